//! Weighted-ensemble conditional expectations, multinomial resampling and
//! a bootstrap particle filter with resampling.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result, Warning};
use crate::kalman::GaussianState;
use crate::math::{exp, max, normalized_weights, sqrt, KahanSum};
use crate::model::{ScalarModelSpec, TimeGrid};
use crate::quadrature::GaussHermite;
use crate::rng::{Domain, NormalStream};
use crate::sde::{draw_prior, EnsembleMode, FeedbackPolicy, ObservationRecord, PathEnsemble, DIVERGENCE_LIMIT};

/// Per-time estimate of a conditional functional.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalEstimate {
    pub grid: TimeGrid,
    pub values: Vec<f64>,
    pub std_err: Vec<f64>,
    pub ess: Vec<f64>,
    pub warnings: Vec<Warning>,
}

impl ConditionalEstimate {
    pub fn terminal(&self) -> f64 {
        self.values[self.values.len() - 1]
    }
    pub fn terminal_std_err(&self) -> f64 {
        self.std_err[self.std_err.len() - 1]
    }
}

/// `σ_k[g] = (1/N) Σ D̃ⁱ_k g(Xⁱ_k)` with the sample standard error.
pub fn sigma_estimate(ens: &PathEnsemble, g: &dyn Fn(f64) -> f64) -> Result<ConditionalEstimate> {
    if ens.log_weights_dtilde().is_none() {
        return Err(Error::MissingWeights("sigma_estimate needs Girsanov weights"));
    }
    let grid = *ens.grid();
    let n = ens.n_paths();
    let d0 = ens.initial_weight();
    let mut values = Vec::with_capacity(grid.len());
    let mut std_err = Vec::with_capacity(grid.len());
    let mut ess = Vec::with_capacity(grid.len());
    let mut buf = vec![0.0; n];
    for k in 0..grid.len() {
        let lw = ens.log_dtilde_at(k).unwrap_or_default();
        for (i, (x, l)) in ens.states_at(k).iter().zip(lw).enumerate() {
            buf[i] = d0 * exp(*l) * g(*x);
        }
        values.push(crate::math::mean(&buf));
        std_err.push(crate::math::std_err(&buf));
        ess.push(normalized_weights(lw).1);
    }
    Ok(ConditionalEstimate { grid, values, std_err, ess, warnings: Vec::new() })
}

/// Denominator of [`pi_estimate`].
#[derive(Debug, Clone, Copy)]
pub enum Normalization<'a> {
    /// `Σ wⁱ gⁱ / Σ wⁱ`.
    SelfNormalized,
    /// `(1/N) Σ wⁱ gⁱ / c_k` with an external normalizer path `c_k`
    /// (e.g. 1 for innovation weights, or an independent `σ_k[1]`).
    External(&'a [f64]),
}

/// Ratio estimator of `π_k[g]` on the innovation weights D when present,
/// otherwise on D̃. Standard errors are delta-method (influence function).
pub fn pi_estimate(
    ens: &PathEnsemble,
    g: &dyn Fn(f64) -> f64,
    normalization: Normalization<'_>,
    ess_floor: f64,
) -> Result<ConditionalEstimate> {
    let grid = *ens.grid();
    let n = ens.n_paths();
    if let Normalization::External(c) = normalization {
        if c.len() != grid.len() {
            return Err(Error::GridMismatch("external normalizer length".into()));
        }
    }
    let use_d = ens.log_weights_d().is_some();
    if !use_d && ens.log_weights_dtilde().is_none() {
        return Err(Error::MissingWeights("pi_estimate needs D or D̃ weights"));
    }
    let mut values = Vec::with_capacity(grid.len());
    let mut std_err = Vec::with_capacity(grid.len());
    let mut ess = Vec::with_capacity(grid.len());
    let mut warnings = Vec::new();
    let mut gv = vec![0.0; n];
    for k in 0..grid.len() {
        let lw = if use_d { ens.log_d_at(k) } else { ens.log_dtilde_at(k) }.unwrap_or_default();
        for (slot, x) in gv.iter_mut().zip(ens.states_at(k)) {
            *slot = g(*x);
        }
        let (w, e) = normalized_weights(lw);
        ess.push(e);
        if warnings.is_empty() && e < ess_floor * n as f64 {
            warnings.push(Warning::WeightCollapse { step: k, ess: e });
        }
        match normalization {
            Normalization::SelfNormalized => {
                let p = crate::math::sum(w.iter().zip(&gv).map(|(a, b)| a * b));
                let v = crate::math::sum(w.iter().zip(&gv).map(|(a, b)| a * a * (b - p) * (b - p)));
                values.push(p);
                std_err.push(sqrt(v));
            }
            Normalization::External(c) => {
                let d0 = ens.initial_weight();
                let raw: Vec<f64> = lw.iter().zip(&gv).map(|(l, b)| d0 * exp(*l) * b / c[k]).collect();
                values.push(crate::math::mean(&raw));
                std_err.push(crate::math::std_err(&raw));
            }
        }
    }
    Ok(ConditionalEstimate { grid, values, std_err, ess, warnings })
}

/// Source of filter expectations `π_k[g]`.
pub trait PiSource {
    fn grid(&self) -> &TimeGrid;
    fn expect(&self, k: usize, g: &dyn Fn(f64) -> f64) -> f64;
}

/// Kalman–Bucy Gaussian `N(m_k, Σ_k)` evaluated by Gauss–Hermite quadrature
/// (scalar state).
pub struct GaussianPi<'a> {
    state: &'a GaussianState,
    rule: GaussHermite,
}

impl<'a> GaussianPi<'a> {
    pub fn new(state: &'a GaussianState) -> Self {
        Self { state, rule: GaussHermite::standard() }
    }
}

impl PiSource for GaussianPi<'_> {
    fn grid(&self) -> &TimeGrid {
        self.state.grid()
    }
    fn expect(&self, k: usize, g: &dyn Fn(f64) -> f64) -> f64 {
        self.rule.expect(self.state.mean_scalar(k), self.state.var_scalar(k), g)
    }
}

/// Weighted particle cloud per grid time (normalized weights).
#[derive(Debug, Clone)]
pub struct WeightedCloud {
    grid: TimeGrid,
    n: usize,
    states: Vec<f64>,
    weights: Vec<f64>,
}

impl WeightedCloud {
    /// Cloud of a weighted ensemble (D weights when present, else D̃).
    pub fn from_ensemble(ens: &PathEnsemble) -> Result<Self> {
        let log = ens
            .log_weights_d()
            .or(ens.log_weights_dtilde())
            .ok_or(Error::MissingWeights("weighted cloud needs D or D̃ weights"))?;
        let n = ens.n_paths();
        let mut weights = Vec::with_capacity(log.len());
        for k in 0..ens.grid().len() {
            weights.extend(normalized_weights(&log[k * n..(k + 1) * n]).0);
        }
        Ok(Self { grid: *ens.grid(), n, states: ens.states().to_vec(), weights })
    }
    pub fn n_particles(&self) -> usize {
        self.n
    }
    pub fn states_at(&self, k: usize) -> &[f64] {
        &self.states[k * self.n..(k + 1) * self.n]
    }
    pub fn weights_at(&self, k: usize) -> &[f64] {
        &self.weights[k * self.n..(k + 1) * self.n]
    }
}

impl PiSource for WeightedCloud {
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    fn expect(&self, k: usize, g: &dyn Fn(f64) -> f64) -> f64 {
        let mut s = KahanSum::new();
        for (x, w) in self.states_at(k).iter().zip(self.weights_at(k)) {
            s.add(w * g(*x));
        }
        s.value()
    }
}

/// Multinomial ancestor indices from normalized weights and uniforms on (0, 1].
pub fn multinomial_indices(weights: &[f64], uniforms: &mut [f64]) -> Vec<usize> {
    uniforms.sort_unstable_by(|a, b| a.total_cmp(b));
    let n = weights.len();
    let mut out = Vec::with_capacity(uniforms.len());
    let mut cdf = 0.0;
    let mut j = 0;
    // Renormalize the running CDF against the true total so the last bucket
    // always absorbs rounding.
    let total = crate::math::sum(weights.iter().copied());
    for u in uniforms.iter() {
        let target = u * total;
        while j + 1 < n && cdf + weights[j] < target {
            cdf += weights[j];
            j += 1;
        }
        out.push(j);
    }
    out
}

fn resampling_uniforms(seed: u64, step: usize, n: usize) -> Vec<f64> {
    let mut s = NormalStream::new(seed, Domain::Resample, step as u64);
    let mut u = Vec::with_capacity(n + 1);
    while u.len() < n {
        let (a, b) = s.uniform_pair();
        u.push(a);
        u.push(b);
    }
    u.truncate(n);
    u
}

/// Resamples whole paths by their terminal weights when the effective sample
/// size is below `ess_floor · N`. Offspring inherit the ancestor's history;
/// terminal weights are reset to 1. Forbidden for estimator-mode ensembles.
pub fn resample_multinomial(ens: &PathEnsemble, ess_floor: f64, seed: u64) -> Result<PathEnsemble> {
    if ens.mode() == EnsembleMode::Estimator {
        return Err(Error::ResamplingForbiddenInEstimatorMode);
    }
    let grid = *ens.grid();
    let n = ens.n_paths();
    let last = grid.n_steps();
    let lw = ens
        .log_d_at(last)
        .or(ens.log_dtilde_at(last))
        .ok_or(Error::MissingWeights("resampling needs D or D̃ weights"))?;
    let (w, e) = normalized_weights(lw);
    if e >= ess_floor * n as f64 {
        return Ok(ens.clone());
    }
    let mut u = resampling_uniforms(seed, last, n);
    let idx = multinomial_indices(&w, &mut u);
    let pick = |src: &[f64]| {
        let mut out = vec![0.0; src.len()];
        for k in 0..grid.len() {
            for (i, a) in idx.iter().enumerate() {
                out[k * n + i] = src[k * n + a];
            }
        }
        out
    };
    let states = pick(ens.states());
    let reset = |src: &[f64]| {
        let mut out = pick(src);
        for v in &mut out[last * n..] {
            *v = 0.0;
        }
        out
    };
    let mut out = PathEnsemble::from_parts(
        grid,
        ens.seed(),
        states,
        ens.log_weights_d().map(reset),
        ens.log_weights_dtilde().map(reset),
        ens.initial_weight(),
        ens.pi_h_path().map(|p| p.to_vec()),
        ens.innovation_increments().map(|p| p.to_vec()),
    )?;
    out.mode = EnsembleMode::Filter;
    out.resampling_steps = ens.resampling_steps().to_vec();
    out.resampling_steps.push(last);
    out.warnings = ens.warnings().to_vec();
    Ok(out)
}

/// Online bootstrap filter: signal-noise proposals, Girsanov increments
/// `h(x_k) dZ_k − ½h² dt`, multinomial resampling when ESS < `threshold · N`.
/// Tracks each particle's time-0 ancestor for lineage-based standard errors.
#[derive(Debug, Clone)]
pub struct BootstrapFilter {
    model: ScalarModelSpec,
    dt: f64,
    seed: u64,
    threshold: f64,
    x: Vec<f64>,
    log_w: Vec<f64>,
    eve: Vec<usize>,
    streams: Vec<NormalStream>,
}

impl BootstrapFilter {
    pub fn new(model: &ScalarModelSpec, grid: &TimeGrid, n: usize, seed: u64, threshold: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("particle filter needs at least one particle".into()));
        }
        let x = (0..n).map(|i| draw_prior(&model.prior, seed, Domain::EnsembleInit, i as u64)).collect();
        let streams = (0..n).map(|i| NormalStream::new(seed, Domain::Ensemble, i as u64)).collect();
        Ok(Self {
            model: model.clone(),
            dt: grid.dt(),
            seed,
            threshold,
            x,
            log_w: vec![0.0; n],
            eve: (0..n).collect(),
            streams,
        })
    }

    pub fn particles(&self) -> &[f64] {
        &self.x
    }
    pub fn log_weights(&self) -> &[f64] {
        &self.log_w
    }
    pub fn weights(&self) -> (Vec<f64>, f64) {
        normalized_weights(&self.log_w)
    }

    /// `π̂[g]` with the lineage (Chan–Lai) standard error.
    pub fn estimate(&self, g: &dyn Fn(f64) -> f64) -> (f64, f64) {
        self.estimate_with(&self.weights().0, g)
    }

    fn estimate_with(&self, w: &[f64], g: &dyn Fn(f64) -> f64) -> (f64, f64) {
        let gv: Vec<f64> = self.x.iter().map(|x| g(*x)).collect();
        let p = crate::math::sum(w.iter().zip(&gv).map(|(a, b)| a * b));
        let mut by_eve = vec![0.0; self.x.len()];
        for i in 0..self.x.len() {
            by_eve[self.eve[i]] += w[i] * (gv[i] - p);
        }
        let v = crate::math::sum(by_eve.iter().map(|s| s * s));
        (p, sqrt(v))
    }

    /// Resamples when the ESS is below the threshold; returns whether it did.
    pub fn maybe_resample(&mut self, step: usize) -> bool {
        let (w, e) = self.weights();
        self.resample_with(&w, e, step)
    }

    fn resample_with(&mut self, w: &[f64], ess: f64, step: usize) -> bool {
        let n = self.x.len();
        if ess >= self.threshold * n as f64 {
            return false;
        }
        let mut u = resampling_uniforms(self.seed, step, n);
        let idx = multinomial_indices(w, &mut u);
        self.x = idx.iter().map(|a| self.x[*a]).collect();
        self.eve = idx.iter().map(|a| self.eve[*a]).collect();
        self.log_w.iter_mut().for_each(|l| *l = 0.0);
        true
    }

    /// Weight update with `dZ_k` at the current states, then propagation
    /// under drift `b(x) + g α`.
    pub fn step(&mut self, step: usize, dz: f64, alpha: f64) -> Result<()> {
        let dt = self.dt;
        let sq = sqrt(dt);
        for i in 0..self.x.len() {
            let x = self.x[i];
            let h = self.model.obs.eval(x);
            self.log_w[i] += h * dz - 0.5 * h * h * dt;
            let xi = self.streams[i].normal();
            let xn = x + (self.model.drift.eval(x) + self.model.control_gain * alpha) * dt + self.model.sigma * sq * xi;
            if !(xn.abs() <= DIVERGENCE_LIMIT) {
                return Err(Error::SimulationDiverged { step: step + 1, path: i });
            }
            self.x[i] = xn;
        }
        // Keep the log weights centred to avoid drift towards -inf.
        let m = max(&self.log_w);
        self.log_w.iter_mut().for_each(|l| *l -= m);
        Ok(())
    }
}

/// Full run of the resampling filter over an observation record.
#[derive(Debug, Clone)]
pub struct FilterRun {
    pub cloud: WeightedCloud,
    pub estimate: ConditionalEstimate,
    pub resampling_steps: Vec<usize>,
}

/// Options of [`run_resampling_filter`].
#[derive(Clone, Copy)]
pub struct FilterOptions<'a> {
    /// Resample when ESS < threshold · N (0.5 by default).
    pub threshold: f64,
    /// Feedback applied to every particle as `g a_k(x)`.
    pub policy: Option<&'a dyn FeedbackPolicy>,
}

impl Default for FilterOptions<'_> {
    fn default() -> Self {
        Self { threshold: 0.5, policy: None }
    }
}

/// Runs the bootstrap filter and records `π̂_k[g]`, its lineage standard
/// error, the ESS path and the weighted cloud before each resampling.
pub fn run_resampling_filter(
    model: &ScalarModelSpec,
    obs: &ObservationRecord,
    n: usize,
    seed: u64,
    g: &dyn Fn(f64) -> f64,
    opts: FilterOptions<'_>,
) -> Result<FilterRun> {
    let grid = *obs.grid();
    if obs.obs_dim() != 1 {
        return Err(Error::DimensionMismatch("particle filter needs a scalar observation channel".into()));
    }
    let mut pf = BootstrapFilter::new(model, &grid, n, seed, opts.threshold)?;
    let mut states = Vec::with_capacity(grid.len() * n);
    let mut weights = Vec::with_capacity(grid.len() * n);
    let mut values = Vec::with_capacity(grid.len());
    let mut std_err = Vec::with_capacity(grid.len());
    let mut ess = Vec::with_capacity(grid.len());
    let mut resampled = Vec::new();
    for k in 0..grid.len() {
        let (w, e) = pf.weights();
        let (p, se) = pf.estimate_with(&w, g);
        states.extend_from_slice(pf.particles());
        values.push(p);
        std_err.push(se);
        ess.push(e);
        if k == grid.n_steps() {
            weights.extend(w);
            break;
        }
        let resampled_now = pf.resample_with(&w, e, k);
        if resampled_now {
            resampled.push(k);
        }
        // The control is a common input: each particle sees its own a_k(x)
        // only through the policy argument.
        let alpha = match opts.policy {
            Some(pol) => {
                let n = pf.particles().len() as f64;
                let ctl = |i: usize, x: f64| pol.control(k, x) * if resampled_now { 1.0 / n } else { w[i] };
                crate::math::sum(pf.particles().iter().enumerate().map(|(i, x)| ctl(i, *x)))
            }
            None => 0.0,
        };
        weights.extend(w);
        pf.step(k, obs.dz_scalar(k), alpha)?;
    }
    Ok(FilterRun {
        cloud: WeightedCloud { grid, n, states, weights },
        estimate: ConditionalEstimate { grid, values, std_err, ess, warnings: Vec::new() },
        resampling_steps: resampled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Prior, ScalarFn};
    use crate::sde::{simulate_girsanov_ensemble, simulate_truth_and_obs};
    use crate::ModelSpec;

    fn ou(h: ScalarFn) -> ScalarModelSpec {
        ScalarModelSpec::new(ScalarFn::linear(-1.0), 1.0, h, ScalarFn::linear(1.0), Prior::gaussian(0.0, 1.0).unwrap())
            .unwrap()
    }

    #[test]
    fn normalization_and_sigma_ratio() {
        let m = ou(ScalarFn::linear(1.0));
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let obs = simulate_truth_and_obs(&ModelSpec::Scalar(m.clone()), &grid, 3).unwrap();
        let ens = simulate_girsanov_ensemble(&m, &grid, &obs, 200, 4).unwrap();
        let one = pi_estimate(&ens, &|_| 1.0, Normalization::SelfNormalized, 0.0).unwrap();
        assert!(one.values.iter().all(|v| (v - 1.0).abs() < 1e-14));
        let s1 = sigma_estimate(&ens, &|_| 1.0).unwrap();
        let sx = sigma_estimate(&ens, &|x| x).unwrap();
        let px = pi_estimate(&ens, &|x| x, Normalization::SelfNormalized, 0.0).unwrap();
        for k in 0..grid.len() {
            assert!((sx.values[k] / s1.values[k] - px.values[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn no_observation_gives_plain_mean() {
        let m = ou(ScalarFn::zero());
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let obs = simulate_truth_and_obs(&ModelSpec::Scalar(m.clone()), &grid, 3).unwrap();
        let ens = simulate_girsanov_ensemble(&m, &grid, &obs, 50, 4).unwrap();
        let p = pi_estimate(&ens, &|x| x * x, Normalization::SelfNormalized, 0.0).unwrap();
        let xs = ens.states_at(20);
        let plain = crate::math::mean(&xs.iter().map(|x| x * x).collect::<Vec<_>>());
        assert!((p.terminal() - plain).abs() < 1e-13);
        let s = sigma_estimate(&ens, &|_| 1.0).unwrap();
        assert!(s.values.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn multinomial_degenerate_and_uniform() {
        let mut u = vec![0.3, 0.9, 0.1, 1.0];
        assert_eq!(multinomial_indices(&[0.0, 1.0, 0.0, 0.0], &mut u), vec![1, 1, 1, 1]);
        let mut u = vec![0.1, 0.3, 0.6, 0.9];
        assert_eq!(multinomial_indices(&[0.25; 4], &mut u), vec![0, 1, 2, 3]);
    }

    #[test]
    fn estimator_mode_forbids_resampling() {
        let m = ou(ScalarFn::linear(1.0));
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let obs = simulate_truth_and_obs(&ModelSpec::Scalar(m.clone()), &grid, 3).unwrap();
        let mut ens = simulate_girsanov_ensemble(&m, &grid, &obs, 20, 4).unwrap();
        assert_eq!(resample_multinomial(&ens, 1.0, 1).unwrap_err(), Error::ResamplingForbiddenInEstimatorMode);
        ens.set_mode(EnsembleMode::Filter);
        let r = resample_multinomial(&ens, 1.0, 1).unwrap();
        assert_eq!(r.resampling_steps(), &[10]);
        assert!(r.log_dtilde_at(10).unwrap().iter().all(|l| *l == 0.0));
    }

    #[test]
    fn filter_without_resampling_matches_girsanov_ensemble() {
        let m = ou(ScalarFn::linear(1.0));
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let obs = simulate_truth_and_obs(&ModelSpec::Scalar(m.clone()), &grid, 8).unwrap();
        let ens = simulate_girsanov_ensemble(&m, &grid, &obs, 100, 9).unwrap();
        let run = run_resampling_filter(&m, &obs, 100, 9, &|x| x, FilterOptions { threshold: 0.0, policy: None }).unwrap();
        assert!(run.resampling_steps.is_empty());
        let px = pi_estimate(&ens, &|x| x, Normalization::SelfNormalized, 0.0).unwrap();
        for k in 0..grid.len() {
            assert!((run.estimate.values[k] - px.values[k]).abs() < 1e-12);
            assert!((run.estimate.std_err[k] - px.std_err[k]).abs() < 1e-12);
        }
    }
}
