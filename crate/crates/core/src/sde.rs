//! Euler–Maruyama simulation of the signal/observation system and of the
//! weighted ensembles (Girsanov weights D̃ and innovation weights D).
//!
//! Weights are kept in the log domain and advanced by the exponential
//! martingale step `log D += u dY − ½u² dt`, which is exact when `u` is
//! frozen over the step.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result, Warning};
use crate::math::{exp, sqrt, KahanSum};
use crate::model::{ModelSpec, Prior, ScalarModelSpec, TimeGrid};
use crate::rng::{Domain, NormalStream};

pub(crate) const DIVERGENCE_LIMIT: f64 = 1e8;

/// Markov feedback law `a_k(x)` on the time grid.
pub trait FeedbackPolicy: Sync {
    fn control(&self, k: usize, x: f64) -> f64;
}

impl<F: Fn(usize, f64) -> f64 + Sync> FeedbackPolicy for F {
    fn control(&self, k: usize, x: f64) -> f64 {
        self(k, x)
    }
}

/// Observation path `Z` on a time grid, with optional synthetic truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRecord {
    grid: TimeGrid,
    obs_dim: usize,
    state_dim: usize,
    z: Vec<f64>,
    dz: Vec<f64>,
    truth: Option<Vec<f64>>,
    noise: Option<Vec<f64>>,
    innovation: Option<Vec<f64>>,
    obs_error: Option<Vec<f64>>,
}

impl ObservationRecord {
    /// Record from increments `dZ_k` (time-major, `n_steps · m` values).
    pub fn from_increments(grid: TimeGrid, obs_dim: usize, dz: Vec<f64>) -> Result<Self> {
        if obs_dim == 0 || dz.len() != grid.n_steps() * obs_dim {
            return Err(Error::GridMismatch(format!(
                "expected {} increments, got {}",
                grid.n_steps() * obs_dim,
                dz.len()
            )));
        }
        let mut z = vec![0.0; grid.len() * obs_dim];
        for k in 0..grid.n_steps() {
            for c in 0..obs_dim {
                z[(k + 1) * obs_dim + c] = z[k * obs_dim + c] + dz[k * obs_dim + c];
            }
        }
        Ok(Self { grid, obs_dim, state_dim: 0, z, dz, truth: None, noise: None, innovation: None, obs_error: None })
    }

    /// Record from the cumulative path (`Z₀` must be zero).
    pub fn from_cumulative(grid: TimeGrid, obs_dim: usize, z: Vec<f64>) -> Result<Self> {
        if obs_dim == 0 || z.len() != grid.len() * obs_dim {
            return Err(Error::GridMismatch(format!(
                "expected {} observation values, got {}",
                grid.len() * obs_dim,
                z.len()
            )));
        }
        if z[..obs_dim].iter().any(|v| *v != 0.0) {
            return Err(Error::InvalidArgument("Z_0 must be zero".into()));
        }
        let dz = (0..grid.n_steps() * obs_dim).map(|i| z[i + obs_dim] - z[i]).collect();
        Ok(Self { grid, obs_dim, state_dim: 0, z, dz, truth: None, noise: None, innovation: None, obs_error: None })
    }

    /// Pure Brownian record (the observation law under the Girsanov measure).
    pub fn brownian(grid: TimeGrid, obs_dim: usize, seed: u64) -> Self {
        let sq = sqrt(grid.dt());
        let mut dz = vec![0.0; grid.n_steps() * obs_dim];
        for c in 0..obs_dim {
            let mut s = NormalStream::new(seed, Domain::Brownian, c as u64);
            for k in 0..grid.n_steps() {
                dz[k * obs_dim + c] = sq * s.normal_pair().0;
            }
        }
        Self::from_increments(grid, obs_dim, dz).expect("sizes are consistent")
    }

    /// Attaches a truth path (`(n_steps+1) · n` values, time-major).
    pub fn with_truth(mut self, state_dim: usize, truth: Vec<f64>) -> Result<Self> {
        if state_dim == 0 || truth.len() != self.grid.len() * state_dim {
            return Err(Error::GridMismatch("truth path length".into()));
        }
        self.state_dim = state_dim;
        self.truth = Some(truth);
        Ok(self)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
    pub fn z(&self, k: usize) -> &[f64] {
        &self.z[k * self.obs_dim..(k + 1) * self.obs_dim]
    }
    pub fn dz(&self, k: usize) -> &[f64] {
        &self.dz[k * self.obs_dim..(k + 1) * self.obs_dim]
    }
    /// First observation channel at step `k`.
    pub fn z_scalar(&self, k: usize) -> f64 {
        self.z[k * self.obs_dim]
    }
    pub fn dz_scalar(&self, k: usize) -> f64 {
        self.dz[k * self.obs_dim]
    }
    pub fn z_path(&self) -> &[f64] {
        &self.z
    }
    pub fn dz_path(&self) -> &[f64] {
        &self.dz
    }
    pub fn truth_path(&self) -> Option<&[f64]> {
        self.truth.as_deref()
    }
    pub fn truth(&self, k: usize) -> Option<&[f64]> {
        self.truth.as_ref().map(|t| &t[k * self.state_dim..(k + 1) * self.state_dim])
    }
    /// Cumulative measurement noise `Σ √dt η` accumulated by the simulator.
    pub fn noise_path(&self) -> Option<&[f64]> {
        self.noise.as_deref()
    }
    pub fn innovation_path(&self) -> Option<&[f64]> {
        self.innovation.as_deref()
    }
    pub fn observation_error_path(&self) -> Option<&[f64]> {
        self.obs_error.as_deref()
    }

    /// Stores `I` computed from a `π_t[h]` path.
    pub fn attach_innovation(&mut self, pi_h_path: &[f64]) -> Result<()> {
        self.innovation = Some(compute_innovation(self, pi_h_path)?);
        Ok(())
    }

    /// Stores `W` computed from the truth path.
    pub fn attach_observation_error(&mut self, model: &ModelSpec) -> Result<()> {
        self.obs_error = Some(compute_observation_error(model, self)?);
        Ok(())
    }
}

/// Options for synthetic truth generation.
#[derive(Clone, Copy)]
pub struct TruthOptions<'a> {
    /// When false the measurement noise `η` is forced to zero.
    pub measurement_noise: bool,
    /// State feedback applied to the truth (scalar models only).
    pub policy: Option<&'a dyn FeedbackPolicy>,
}

impl Default for TruthOptions<'_> {
    fn default() -> Self {
        Self { measurement_noise: true, policy: None }
    }
}

/// Simulates `X` and `Z` by Euler–Maruyama with `X₀ ~ μ`.
pub fn simulate_truth_and_obs(model: &ModelSpec, grid: &TimeGrid, seed: u64) -> Result<ObservationRecord> {
    simulate_truth_and_obs_with(model, grid, seed, TruthOptions::default())
}

pub fn simulate_truth_and_obs_with(
    model: &ModelSpec,
    grid: &TimeGrid,
    seed: u64,
    opts: TruthOptions<'_>,
) -> Result<ObservationRecord> {
    match model {
        ModelSpec::Scalar(s) => simulate_scalar_truth(s, grid, seed, opts),
        ModelSpec::LinearGaussian(lg) => {
            if opts.policy.is_some() {
                return Err(Error::ModeModelMismatch("state feedback on truth needs a scalar model".into()));
            }
            simulate_lg_truth(lg, grid, seed, opts.measurement_noise)
        }
    }
}

pub(crate) fn draw_prior(prior: &Prior, seed: u64, domain: Domain, index: u64) -> f64 {
    let mut s = NormalStream::new(seed, domain, index);
    let (u, _) = s.uniform_pair();
    let (z, _) = s.normal_pair();
    prior.sample(u, z)
}

fn simulate_scalar_truth(
    model: &ScalarModelSpec,
    grid: &TimeGrid,
    seed: u64,
    opts: TruthOptions<'_>,
) -> Result<ObservationRecord> {
    let n = grid.n_steps();
    let dt = grid.dt();
    let sq = sqrt(dt);
    let mut x = vec![0.0; n + 1];
    let mut z = vec![0.0; n + 1];
    let mut dz = vec![0.0; n];
    let mut noise = vec![0.0; n + 1];
    x[0] = draw_prior(&model.prior, seed, Domain::TruthInit, 0);
    let mut stream = NormalStream::new(seed, Domain::Truth, 0);
    for k in 0..n {
        let (xi, eta) = stream.normal_pair();
        let eta = if opts.measurement_noise { eta } else { 0.0 };
        let xk = x[k];
        let alpha = opts.policy.map_or(0.0, |p| p.control(k, xk));
        let xn = xk + (model.drift.eval(xk) + model.control_gain * alpha) * dt + model.sigma * sq * xi;
        if !(xn.abs() <= DIVERGENCE_LIMIT) {
            return Err(Error::SimulationDiverged { step: k + 1, path: 0 });
        }
        x[k + 1] = xn;
        let dw = sq * eta;
        dz[k] = model.obs.eval(xk) * dt + dw;
        z[k + 1] = z[k] + dz[k];
        noise[k + 1] = noise[k] + dw;
    }
    Ok(ObservationRecord {
        grid: *grid,
        obs_dim: 1,
        state_dim: 1,
        z,
        dz,
        truth: Some(x),
        noise: Some(noise),
        innovation: None,
        obs_error: None,
    })
}

/// Symmetric square root factor `L` with `L Lᵀ = S` for PSD `S`.
fn psd_factor(s: &DMatrix<f64>) -> DMatrix<f64> {
    if s.nrows() == 1 {
        return DMatrix::from_element(1, 1, sqrt(s[(0, 0)].max(0.0)));
    }
    let eig = s.clone().symmetric_eigen();
    let d = eig.eigenvalues.map(|v| sqrt(v.max(0.0)));
    &eig.eigenvectors * DMatrix::from_diagonal(&d)
}

/// Prior draw of the linear-Gaussian truth state.
pub(crate) fn lg_initial_state(lg: &crate::model::LinearGaussianModelSpec, seed: u64) -> DVector<f64> {
    let nx = lg.state_dim();
    let z0 = DVector::from_iterator(
        nx,
        (0..nx).map(|c| {
            let mut s = NormalStream::new(seed, Domain::TruthInit, c as u64);
            let _ = s.uniform_pair();
            s.normal_pair().0
        }),
    );
    &lg.m0 + psd_factor(&lg.sigma0) * z0
}

fn simulate_lg_truth(
    lg: &crate::model::LinearGaussianModelSpec,
    grid: &TimeGrid,
    seed: u64,
    measurement_noise: bool,
) -> Result<ObservationRecord> {
    let n = grid.n_steps();
    let nx = lg.state_dim();
    let m = lg.obs_dim();
    let dt = grid.dt();
    let sq = sqrt(dt);
    let lanes = nx.max(m);
    let mut streams: Vec<NormalStream> = (0..lanes).map(|c| NormalStream::new(seed, Domain::Truth, c as u64)).collect();
    let mut x = lg_initial_state(lg, seed);
    let mut truth = Vec::with_capacity((n + 1) * nx);
    truth.extend(x.iter().copied());
    let mut z = vec![0.0; (n + 1) * m];
    let mut dz = vec![0.0; n * m];
    let mut noise = vec![0.0; (n + 1) * m];
    let mut xi = DVector::zeros(nx);
    for k in 0..n {
        let mut eta = vec![0.0; m];
        for (c, s) in streams.iter_mut().enumerate() {
            let (a, b) = s.normal_pair();
            if c < nx {
                xi[c] = a;
            }
            if c < m {
                eta[c] = if measurement_noise { b } else { 0.0 };
            }
        }
        let hx = lg.obs(&x);
        for c in 0..m {
            let dw = sq * eta[c];
            dz[k * m + c] = hx[c] * dt + dw;
            z[(k + 1) * m + c] = z[k * m + c] + dz[k * m + c];
            noise[(k + 1) * m + c] = noise[k * m + c] + dw;
        }
        x = &x + lg.drift(&x) * dt + &xi * (lg.sigma * sq);
        if x.iter().any(|v| !(v.abs() <= DIVERGENCE_LIMIT)) {
            return Err(Error::SimulationDiverged { step: k + 1, path: 0 });
        }
        truth.extend(x.iter().copied());
    }
    Ok(ObservationRecord {
        grid: *grid,
        obs_dim: m,
        state_dim: nx,
        z,
        dz,
        truth: Some(truth),
        noise: Some(noise),
        innovation: None,
        obs_error: None,
    })
}

/// `I_k = Z_k − Σ_{j<k} π_{t_j}[h] dt`. `pi_h_path` holds `(n_steps+1) · m`
/// values.
pub fn compute_innovation(obs: &ObservationRecord, pi_h_path: &[f64]) -> Result<Vec<f64>> {
    let m = obs.obs_dim;
    let n = obs.grid.n_steps();
    if pi_h_path.len() != (n + 1) * m {
        return Err(Error::GridMismatch(format!(
            "pi_h path has {} values, grid needs {}",
            pi_h_path.len(),
            (n + 1) * m
        )));
    }
    let dt = obs.grid.dt();
    let mut out = vec![0.0; (n + 1) * m];
    for c in 0..m {
        let mut drift = KahanSum::new();
        for k in 1..=n {
            drift.add(pi_h_path[(k - 1) * m + c] * dt);
            out[k * m + c] = obs.z[k * m + c] - drift.value();
        }
    }
    Ok(out)
}

/// `W_k = Z_k − Σ_{j<k} h(X_{t_j}) dt` from the truth path.
pub fn compute_observation_error(model: &ModelSpec, obs: &ObservationRecord) -> Result<Vec<f64>> {
    let truth = obs.truth.as_ref().ok_or(Error::MissingTruthPath)?;
    let m = obs.obs_dim;
    let nx = obs.state_dim;
    if nx != model.state_dim() || m != model.obs_dim() {
        return Err(Error::DimensionMismatch("record and model dimensions differ".into()));
    }
    let n = obs.grid.n_steps();
    let dt = obs.grid.dt();
    let mut hx = vec![0.0; n * m];
    for k in 0..n {
        let xk = &truth[k * nx..(k + 1) * nx];
        match model {
            ModelSpec::Scalar(s) => hx[k] = s.obs.eval(xk[0]),
            ModelSpec::LinearGaussian(lg) => {
                let v = lg.obs(&DVector::from_column_slice(xk));
                hx[k * m..(k + 1) * m].copy_from_slice(v.as_slice());
            }
        }
    }
    let mut out = vec![0.0; (n + 1) * m];
    for c in 0..m {
        let mut drift = KahanSum::new();
        for k in 1..=n {
            drift.add(hx[(k - 1) * m + c] * dt);
            out[k * m + c] = obs.z[k * m + c] - drift.value();
        }
    }
    Ok(out)
}

/// Whether an ensemble may be resampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleMode {
    /// Raw weighted ensemble consumed by the estimators; resampling forbidden.
    Estimator,
    /// Filtering use; resampling allowed.
    Filter,
}

/// N weighted signal paths on a shared grid. Arrays are time-major:
/// entry `(k, i)` is at `k * n_paths + i`.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub(crate) grid: TimeGrid,
    pub(crate) n_paths: usize,
    pub(crate) seed: u64,
    pub(crate) states: Vec<f64>,
    pub(crate) log_d: Option<Vec<f64>>,
    pub(crate) log_dtilde: Option<Vec<f64>>,
    pub(crate) initial_weight: f64,
    pub(crate) pi_h: Option<Vec<f64>>,
    pub(crate) innovation: Option<Vec<f64>>,
    pub(crate) mode: EnsembleMode,
    pub(crate) resampling_steps: Vec<usize>,
    pub(crate) warnings: Vec<Warning>,
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn mode(&self) -> EnsembleMode {
        self.mode
    }
    pub fn set_mode(&mut self, mode: EnsembleMode) {
        self.mode = mode;
    }
    pub fn states(&self) -> &[f64] {
        &self.states
    }
    /// States at step `k` for all paths.
    pub fn states_at(&self, k: usize) -> &[f64] {
        &self.states[k * self.n_paths..(k + 1) * self.n_paths]
    }
    pub fn log_weights_d(&self) -> Option<&[f64]> {
        self.log_d.as_deref()
    }
    pub fn log_weights_dtilde(&self) -> Option<&[f64]> {
        self.log_dtilde.as_deref()
    }
    pub fn log_d_at(&self, k: usize) -> Option<&[f64]> {
        self.log_d.as_ref().map(|w| &w[k * self.n_paths..(k + 1) * self.n_paths])
    }
    pub fn log_dtilde_at(&self, k: usize) -> Option<&[f64]> {
        self.log_dtilde.as_ref().map(|w| &w[k * self.n_paths..(k + 1) * self.n_paths])
    }
    /// Common initial weight `D₀` multiplying every path weight.
    pub fn initial_weight(&self) -> f64 {
        self.initial_weight
    }
    /// Multiplies the initial weights of all paths by `factor`.
    pub fn scale_initial_weights(&mut self, factor: f64) {
        self.initial_weight *= factor;
    }
    /// `π_k[h]` used in the innovation weights (length `n_steps + 1`).
    pub fn pi_h_path(&self) -> Option<&[f64]> {
        self.pi_h.as_deref()
    }
    /// Innovation increments `dI_k` used in the weights (length `n_steps`).
    pub fn innovation_increments(&self) -> Option<&[f64]> {
        self.innovation.as_deref()
    }
    pub fn resampling_steps(&self) -> &[usize] {
        &self.resampling_steps
    }
    pub fn warnings(&self) -> &[Warning] {
        &self.warnings
    }

    /// Rebuilds an ensemble from stored arrays (used by binary dumps).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        grid: TimeGrid,
        seed: u64,
        states: Vec<f64>,
        log_d: Option<Vec<f64>>,
        log_dtilde: Option<Vec<f64>>,
        initial_weight: f64,
        pi_h: Option<Vec<f64>>,
        innovation: Option<Vec<f64>>,
    ) -> Result<Self> {
        let len = grid.len();
        if states.is_empty() || states.len() % len != 0 {
            return Err(Error::GridMismatch("state array does not match the grid".into()));
        }
        let n_paths = states.len() / len;
        for w in [&log_d, &log_dtilde].into_iter().flatten() {
            if w.len() != states.len() || w.iter().any(|v| !v.is_finite()) {
                return Err(Error::GridMismatch("weight array does not match the states".into()));
            }
        }
        if pi_h.as_ref().is_some_and(|p| p.len() != len) || innovation.as_ref().is_some_and(|i| i.len() != grid.n_steps()) {
            return Err(Error::GridMismatch("mean-field path length".into()));
        }
        Ok(Self {
            grid,
            n_paths,
            seed,
            states,
            log_d,
            log_dtilde,
            initial_weight,
            pi_h,
            innovation,
            mode: EnsembleMode::Estimator,
            resampling_steps: Vec::new(),
            warnings: Vec::new(),
        })
    }
}

/// Source of the mean-field term `π_t[h]` in the innovation weights.
#[derive(Debug, Clone, Copy)]
pub enum PiHSource<'a> {
    /// `Σ D h(X) / Σ D` over the ensemble itself.
    SelfNormalized,
    /// Externally supplied path (length `n_steps + 1`), e.g. Kalman–Bucy.
    External(&'a [f64]),
}

/// Observation input of the innovation ensemble.
#[derive(Debug, Clone, Copy)]
pub enum InnovationDriver<'a> {
    /// Innovations computed on the fly as `dZ_k − π_k[h] dt`.
    Observations(&'a ObservationRecord),
    /// Given innovation increments `dI_k` (length `n_steps`).
    Increments(&'a [f64]),
}

#[derive(Clone, Copy)]
pub struct EnsembleOptions<'a> {
    /// Fraction of N below which a WeightCollapse warning is recorded.
    pub ess_floor: f64,
    /// Feedback `a_k(x)` added to the drift as `g a_k(x)`.
    pub policy: Option<&'a dyn FeedbackPolicy>,
    /// Also carry the Girsanov weights D̃ along the innovation ensemble.
    pub track_girsanov: bool,
}

impl Default for EnsembleOptions<'_> {
    fn default() -> Self {
        Self { ess_floor: 0.01, policy: None, track_girsanov: false }
    }
}

struct Paths {
    states: Vec<f64>,
    streams: Vec<NormalStream>,
}

fn init_paths(model: &ScalarModelSpec, grid: &TimeGrid, n: usize, seed: u64) -> Result<Paths> {
    if n == 0 {
        return Err(Error::InvalidArgument("ensemble needs at least one path".into()));
    }
    let mut states = vec![0.0; grid.len() * n];
    for (i, x) in states[..n].iter_mut().enumerate() {
        *x = draw_prior(&model.prior, seed, Domain::EnsembleInit, i as u64);
    }
    let streams = (0..n).map(|i| NormalStream::new(seed, Domain::Ensemble, i as u64)).collect();
    Ok(Paths { states, streams })
}

/// Advances all paths from step `k` to `k + 1`; returns the fresh
/// Brownian observation draws when requested.
fn advance(
    model: &ScalarModelSpec,
    grid: &TimeGrid,
    paths: &mut Paths,
    k: usize,
    policy: Option<&dyn FeedbackPolicy>,
    fresh: Option<&mut [f64]>,
) -> Result<()> {
    let n = paths.streams.len();
    let dt = grid.dt();
    let sq = sqrt(dt);
    let (head, tail) = paths.states.split_at_mut((k + 1) * n);
    let cur = &head[k * n..];
    let next = &mut tail[..n];
    let mut fresh = fresh;
    for i in 0..n {
        let (xi, eta) = match fresh {
            Some(_) => paths.streams[i].normal_pair(),
            None => (paths.streams[i].normal(), 0.0),
        };
        let x = cur[i];
        let alpha = policy.map_or(0.0, |p| p.control(k, x));
        let xn = x + (model.drift.eval(x) + model.control_gain * alpha) * dt + model.sigma * sq * xi;
        if !(xn.abs() <= DIVERGENCE_LIMIT) {
            return Err(Error::SimulationDiverged { step: k + 1, path: i });
        }
        next[i] = xn;
        if let Some(f) = fresh.as_deref_mut() {
            f[i] = sq * eta;
        }
    }
    Ok(())
}

/// Girsanov-weighted ensemble driven by a fixed observation record.
pub fn simulate_girsanov_ensemble(
    model: &ScalarModelSpec,
    grid: &TimeGrid,
    obs: &ObservationRecord,
    n: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    simulate_girsanov_ensemble_with(model, grid, obs, n, seed, EnsembleOptions::default())
}

pub fn simulate_girsanov_ensemble_with(
    model: &ScalarModelSpec,
    grid: &TimeGrid,
    obs: &ObservationRecord,
    n: usize,
    seed: u64,
    opts: EnsembleOptions<'_>,
) -> Result<PathEnsemble> {
    grid.ensure_same(obs.grid(), "observation record vs ensemble grid")?;
    if obs.obs_dim() != 1 {
        return Err(Error::DimensionMismatch("ensembles need a scalar observation channel".into()));
    }
    girsanov_core(model, grid, Some(obs), n, seed, opts)
}

/// Girsanov ensemble where each path sees its own fresh Brownian `dZ`
/// (the Girsanov measure's observation law). Used for martingale checks.
pub fn simulate_girsanov_ensemble_fresh(
    model: &ScalarModelSpec,
    grid: &TimeGrid,
    n: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    girsanov_core(model, grid, None, n, seed, EnsembleOptions::default())
}

fn girsanov_core(
    model: &ScalarModelSpec,
    grid: &TimeGrid,
    obs: Option<&ObservationRecord>,
    n: usize,
    seed: u64,
    opts: EnsembleOptions<'_>,
) -> Result<PathEnsemble> {
    let steps = grid.n_steps();
    let dt = grid.dt();
    let mut paths = init_paths(model, grid, n, seed)?;
    let mut logw = vec![0.0; grid.len() * n];
    let mut fresh = vec![0.0; n];
    let mut warnings = Vec::new();
    for k in 0..steps {
        advance(model, grid, &mut paths, k, opts.policy, obs.is_none().then_some(&mut fresh[..]))?;
        let (head, tail) = logw.split_at_mut((k + 1) * n);
        let cur = &head[k * n..];
        for i in 0..n {
            let h = model.obs.eval(paths.states[k * n + i]);
            let dz = match obs {
                Some(o) => o.dz_scalar(k),
                None => fresh[i],
            };
            tail[i] = cur[i] + h * dz - 0.5 * h * h * dt;
        }
        if opts.ess_floor > 0.0 && warnings.is_empty() {
            let (_, ess) = crate::math::normalized_weights(&tail[..n]);
            if ess < opts.ess_floor * n as f64 {
                warnings.push(Warning::WeightCollapse { step: k + 1, ess });
            }
        }
    }
    Ok(PathEnsemble {
        grid: *grid,
        n_paths: n,
        seed,
        states: paths.states,
        log_d: None,
        log_dtilde: Some(logw),
        initial_weight: 1.0,
        pi_h: None,
        innovation: None,
        mode: EnsembleMode::Estimator,
        resampling_steps: Vec::new(),
        warnings,
    })
}

/// Innovation-weighted ensemble with mean-field term `π_t[h]`.
pub fn simulate_innovation_ensemble(
    model: &ScalarModelSpec,
    grid: &TimeGrid,
    driver: InnovationDriver<'_>,
    n: usize,
    seed: u64,
    pi_h_source: PiHSource<'_>,
) -> Result<PathEnsemble> {
    simulate_innovation_ensemble_with(model, grid, driver, n, seed, pi_h_source, EnsembleOptions::default())
}

pub fn simulate_innovation_ensemble_with(
    model: &ScalarModelSpec,
    grid: &TimeGrid,
    driver: InnovationDriver<'_>,
    n: usize,
    seed: u64,
    pi_h_source: PiHSource<'_>,
    opts: EnsembleOptions<'_>,
) -> Result<PathEnsemble> {
    let steps = grid.n_steps();
    let dt = grid.dt();
    match driver {
        InnovationDriver::Observations(o) => {
            grid.ensure_same(o.grid(), "observation record vs ensemble grid")?;
            if o.obs_dim() != 1 {
                return Err(Error::DimensionMismatch("ensembles need a scalar observation channel".into()));
            }
        }
        InnovationDriver::Increments(di) => {
            if di.len() != steps {
                return Err(Error::GridMismatch(format!("{} innovation increments for {} steps", di.len(), steps)));
            }
        }
    }
    if let PiHSource::External(p) = pi_h_source {
        if p.len() != grid.len() {
            return Err(Error::GridMismatch(format!("pi_h path has {} values for {} grid points", p.len(), grid.len())));
        }
    }
    let mut paths = init_paths(model, grid, n, seed)?;
    let mut log_d = vec![0.0; grid.len() * n];
    let mut log_dt = if opts.track_girsanov { Some(vec![0.0; grid.len() * n]) } else { None };
    let mut pi_h = vec![0.0; grid.len()];
    let mut innov = vec![0.0; steps];
    let mut hbuf = vec![0.0; n];
    let mut warnings = Vec::new();
    let floor = opts.ess_floor * n as f64;
    // π_k[h] and, while no collapse has been flagged, the ESS of the weights
    // at step k, sharing one pass over the weights.
    let pi_at = |k: usize, logw: &[f64], h: &[f64], warnings: &mut Vec<Warning>| -> f64 {
        let check = k > 0 && opts.ess_floor > 0.0 && warnings.is_empty();
        let (p, ess) = match pi_h_source {
            PiHSource::External(p) => (p[k], if check { crate::math::normalized_weights(logw).1 } else { f64::INFINITY }),
            PiHSource::SelfNormalized => mean_and_ess(logw, h),
        };
        if check && ess < floor {
            warnings.push(Warning::WeightCollapse { step: k, ess });
        }
        p
    };
    for k in 0..steps {
        for i in 0..n {
            hbuf[i] = model.obs.eval(paths.states[k * n + i]);
        }
        let pk = pi_at(k, &log_d[k * n..(k + 1) * n], &hbuf, &mut warnings);
        pi_h[k] = pk;
        let (di, dz) = match driver {
            InnovationDriver::Observations(o) => (o.dz_scalar(k) - pk * dt, Some(o.dz_scalar(k))),
            InnovationDriver::Increments(d) => (d[k], None),
        };
        innov[k] = di;
        advance(model, grid, &mut paths, k, opts.policy, None)?;
        {
            let (head, tail) = log_d.split_at_mut((k + 1) * n);
            let cur = &head[k * n..];
            for i in 0..n {
                let u = hbuf[i] - pk;
                tail[i] = cur[i] + u * di - 0.5 * u * u * dt;
            }
        }
        if let Some(lt) = log_dt.as_mut() {
            // Under the innovation driver the observation increment is
            // dZ = dI + π[h] dt.
            let dz = dz.unwrap_or(di + pk * dt);
            let (head, tail) = lt.split_at_mut((k + 1) * n);
            let cur = &head[k * n..];
            for i in 0..n {
                let h = hbuf[i];
                tail[i] = cur[i] + h * dz - 0.5 * h * h * dt;
            }
        }
    }
    for i in 0..n {
        hbuf[i] = model.obs.eval(paths.states[steps * n + i]);
    }
    pi_h[steps] = pi_at(steps, &log_d[steps * n..], &hbuf, &mut warnings);
    Ok(PathEnsemble {
        grid: *grid,
        n_paths: n,
        seed,
        states: paths.states,
        log_d: Some(log_d),
        log_dtilde: log_dt,
        initial_weight: 1.0,
        pi_h: Some(pi_h),
        innovation: Some(innov),
        mode: EnsembleMode::Estimator,
        resampling_steps: Vec::new(),
        warnings,
    })
}

/// `Σ e^{l_i} g_i / Σ e^{l_i}` computed stably in fixed order.
pub fn self_normalized_mean(log_w: &[f64], g: &[f64]) -> f64 {
    mean_and_ess(log_w, g).0
}

/// Self-normalized mean together with the ESS `(Σw)² / Σw²`.
fn mean_and_ess(log_w: &[f64], g: &[f64]) -> (f64, f64) {
    let m = crate::math::max(log_w);
    let mut num = KahanSum::new();
    let mut den = KahanSum::new();
    let mut sq = KahanSum::new();
    for (l, gi) in log_w.iter().zip(g) {
        let w = exp(l - m);
        num.add(w * gi);
        den.add(w);
        sq.add(w * w);
    }
    (num.value() / den.value(), den.value() * den.value() / sq.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScalarFn;

    fn ou(h: ScalarFn) -> ScalarModelSpec {
        ScalarModelSpec::new(ScalarFn::linear(-1.0), 1.0, h, ScalarFn::linear(1.0), Prior::gaussian(0.0, 1.0).unwrap()).unwrap()
    }

    #[test]
    fn truth_is_deterministic_per_seed() {
        let m = ModelSpec::Scalar(ou(ScalarFn::linear(1.0)));
        let g = TimeGrid::new(1.0, 100).unwrap();
        let a = simulate_truth_and_obs(&m, &g, 5).unwrap();
        let b = simulate_truth_and_obs(&m, &g, 5).unwrap();
        let c = simulate_truth_and_obs(&m, &g, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.z_path(), c.z_path());
    }

    #[test]
    fn h_zero_leaves_girsanov_weights_at_one() {
        let model = ou(ScalarFn::zero());
        let g = TimeGrid::new(1.0, 50).unwrap();
        let obs = ObservationRecord::brownian(g, 1, 3);
        let ens = simulate_girsanov_ensemble(&model, &g, &obs, 20, 1).unwrap();
        assert!(ens.log_weights_dtilde().unwrap().iter().all(|w| *w == 0.0));
        let inn = simulate_innovation_ensemble(&model, &g, InnovationDriver::Observations(&obs), 20, 1, PiHSource::SelfNormalized).unwrap();
        assert!(inn.log_weights_d().unwrap().iter().all(|w| *w == 0.0));
    }

    #[test]
    fn constant_h_gives_closed_form_weights() {
        let c = 0.8;
        let model = ou(ScalarFn::constant(c));
        let g = TimeGrid::new(1.0, 200).unwrap();
        let obs = ObservationRecord::brownian(g, 1, 9);
        let ens = simulate_girsanov_ensemble(&model, &g, &obs, 50, 2).unwrap();
        let want = c * obs.z_scalar(200) - 0.5 * c * c;
        for w in ens.log_dtilde_at(200).unwrap() {
            assert!((w - want).abs() < 1e-12);
        }
    }

    #[test]
    fn girsanov_and_innovation_ensembles_share_paths() {
        let model = ou(ScalarFn::linear(1.0));
        let g = TimeGrid::new(0.5, 40).unwrap();
        let obs = simulate_truth_and_obs(&ModelSpec::Scalar(model.clone()), &g, 1).unwrap();
        let a = simulate_girsanov_ensemble(&model, &g, &obs, 30, 4).unwrap();
        let b = simulate_innovation_ensemble(&model, &g, InnovationDriver::Observations(&obs), 30, 4, PiHSource::SelfNormalized).unwrap();
        assert_eq!(a.states(), b.states());
    }

    #[test]
    fn tracked_girsanov_weights_match_girsanov_ensemble() {
        let model = ou(ScalarFn::linear(1.0));
        let g = TimeGrid::new(0.5, 40).unwrap();
        let obs = simulate_truth_and_obs(&ModelSpec::Scalar(model.clone()), &g, 1).unwrap();
        let a = simulate_girsanov_ensemble(&model, &g, &obs, 30, 4).unwrap();
        let opts = EnsembleOptions { track_girsanov: true, ..Default::default() };
        let b = simulate_innovation_ensemble_with(&model, &g, InnovationDriver::Observations(&obs), 30, 4, PiHSource::SelfNormalized, opts).unwrap();
        assert_eq!(a.log_weights_dtilde(), b.log_weights_dtilde());
    }

    #[test]
    fn noiseless_observation_error_vanishes() {
        let m = ModelSpec::Scalar(ou(ScalarFn::linear(1.0)));
        let g = TimeGrid::new(1.0, 100).unwrap();
        let obs = simulate_truth_and_obs_with(&m, &g, 3, TruthOptions { measurement_noise: false, policy: None }).unwrap();
        let w = compute_observation_error(&m, &obs).unwrap();
        assert!(w.iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn innovation_with_zero_filter_is_z() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let obs = ObservationRecord::brownian(g, 1, 1);
        let i = compute_innovation(&obs, &[0.0; 11]).unwrap();
        assert_eq!(i, obs.z_path());
        assert!(matches!(compute_innovation(&obs, &[0.0; 10]), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn missing_truth_is_reported() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let obs = ObservationRecord::brownian(g, 1, 1);
        let m = ModelSpec::Scalar(ou(ScalarFn::linear(1.0)));
        assert!(matches!(compute_observation_error(&m, &obs), Err(Error::MissingTruthPath)));
    }

    #[test]
    fn divergence_is_detected() {
        let model = ScalarModelSpec::new(ScalarFn::Cubic { coef: 1.0 }, 1.0, ScalarFn::zero(), ScalarFn::zero(), Prior::gaussian(3.0, 0.0).unwrap()).unwrap();
        let g = TimeGrid::new(1.0, 10).unwrap();
        let r = simulate_truth_and_obs(&ModelSpec::Scalar(model), &g, 0);
        assert!(matches!(r, Err(Error::SimulationDiverged { .. })));
    }
}
