//! The four minimum-variance estimators of conditional expectations, their
//! cost functionals and the variance-decay diagnostics.
//!
//! All stochastic integrals are left-point (Itô) sums on the grid. Standard
//! errors are influence-function (delta-method) errors: every report carries
//! the per-path influence `ψᵢ` with `SE² = Σ ψᵢ²`, so differences and ratios
//! of estimates built on the same paths get paired errors.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DVector;

use crate::error::{Error, Result, Warning};
use crate::kalman::{kalman_bucy_mean, kalman_bucy_mean_closed_loop, riccati_filter};
use crate::math::{exp, normalized_weights, sqrt, KahanSum};
use crate::model::{LinearGaussianModelSpec, ModelSpec, ScalarModelSpec, SpaceGrid, TimeGrid};
use crate::particle::PiSource;
use crate::pde::{linear_backward_closed_loop, linear_backward_vector, solve_backward_general, GridFunction};
use crate::quadrature::GaussHermite;
use crate::sde::{ObservationRecord, PathEnsemble};

/// Which estimator produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorId {
    /// Girsanov weights, observation integrator `dZ`.
    SigmaObs,
    /// Innovation weights, innovation integrator `dI`.
    PiInnovation,
    /// Deterministic control against `dZ` for the normalized filter.
    PiObs,
    /// Girsanov weights, observation-error integrator `dW`.
    SigmaObsError,
}

impl EstimatorId {
    pub const ALL: [EstimatorId; 4] =
        [EstimatorId::SigmaObs, EstimatorId::PiInnovation, EstimatorId::PiObs, EstimatorId::SigmaObsError];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorId::SigmaObs => "sigma_obs",
            EstimatorId::PiInnovation => "pi_innovation",
            EstimatorId::PiObs => "pi_obs",
            EstimatorId::SigmaObsError => "sigma_obs_error",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown estimator '{s}'")))
    }
}

/// Variance of the backward process and the Dirichlet-form right-hand side.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceDecayReport {
    pub grid: TimeGrid,
    /// Ensemble variance of `weight · y_k(X_k)`.
    pub var: Vec<f64>,
    /// Standard error of `var[k]` (fourth-moment formula).
    pub var_std_err: Vec<f64>,
    /// `σ² E[(w ∂x y)²] + E[(w y u − E[w y u])²]` with `u = h` or `h − π[h]`.
    pub rhs: Vec<f64>,
    /// Left-point integral of `rhs` up to `t_k`.
    pub cumulative_rhs: Vec<f64>,
}

/// Output of one estimator evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorReport {
    pub id: EstimatorId,
    pub point_estimate: f64,
    pub mc_std_err: f64,
    pub y0_prior_term: f64,
    pub stochastic_integral_term: f64,
    /// Averaged (deterministic) control per step, `n_steps` values per channel.
    pub control_path: Vec<f64>,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    /// Per-path influence values, `mc_std_err² = Σ ψᵢ²`.
    pub influence: Vec<f64>,
    pub warnings: Vec<Warning>,
    pub diagnostics: Option<VarianceDecayReport>,
    /// Estimator IV only: the same integrand summed against the truth
    /// observation error `dW`.
    pub truth_error_integral: Option<f64>,
    /// Fixed-point mode of estimator III: iterations used.
    pub iterations: Option<usize>,
}

impl EstimatorReport {
    fn new(id: EstimatorId, grid: &TimeGrid, n_paths: usize, seed: u64) -> Self {
        Self {
            id,
            point_estimate: 0.0,
            mc_std_err: 0.0,
            y0_prior_term: 0.0,
            stochastic_integral_term: 0.0,
            control_path: Vec::new(),
            n_paths,
            dt: grid.dt(),
            seed,
            influence: Vec::new(),
            warnings: Vec::new(),
            diagnostics: None,
            truth_error_integral: None,
            iterations: None,
        }
    }
}

fn prior_term(model: &ScalarModelSpec, y: &GridFunction) -> f64 {
    let rule = GaussHermite::standard();
    model.prior.expect(&rule, |x| y.interpolate(0, x))
}

fn check_y(y: &GridFunction, ens: &PathEnsemble) -> Result<()> {
    y.ensure_time(ens.grid(), "value field vs ensemble grid")
}

fn norm_of(psi: &[f64]) -> f64 {
    sqrt(crate::math::sum(psi.iter().map(|p| p * p)))
}

/// Shared core of estimators I and IV: `d₀ μ[y₀] + Σ_k (1/N) Σᵢ D̃ⁱ_k y_k h dYⁱ_k`.
fn girsanov_estimate(
    id: EstimatorId,
    model: &ScalarModelSpec,
    y: &GridFunction,
    ens: &PathEnsemble,
    increment: &dyn Fn(usize, f64) -> f64,
) -> Result<(EstimatorReport, Vec<f64>)> {
    check_y(y, ens)?;
    if ens.log_weights_dtilde().is_none() {
        return Err(Error::MissingWeights("estimator needs Girsanov weights"));
    }
    let grid = *ens.grid();
    let n = ens.n_paths();
    let d0 = ens.initial_weight();
    let mut rep = EstimatorReport::new(id, &grid, n, ens.seed());
    rep.y0_prior_term = d0 * prior_term(model, y);
    let mut per_path = vec![KahanSum::new(); n];
    let mut control = Vec::with_capacity(grid.n_steps());
    let mut integrand = vec![0.0; grid.n_steps()];
    let mut a = vec![0.0; n];
    for k in 0..grid.n_steps() {
        let lw = ens.log_dtilde_at(k).unwrap_or_default();
        let xs = ens.states_at(k);
        for i in 0..n {
            a[i] = d0 * exp(lw[i]) * y.interpolate(k, xs[i]) * model.obs.eval(xs[i]);
            per_path[i].add(a[i] * increment(k, xs[i]));
        }
        let m = crate::math::mean(&a);
        integrand[k] = m;
        control.push(-m);
    }
    let totals: Vec<f64> = per_path.iter().map(|s| s.value()).collect();
    let integral = crate::math::mean(&totals);
    rep.stochastic_integral_term = integral;
    rep.point_estimate = rep.y0_prior_term + integral;
    rep.influence = totals.iter().map(|t| (t - integral) / n as f64).collect();
    rep.mc_std_err = norm_of(&rep.influence);
    rep.control_path = control;
    rep.warnings = ens.warnings().to_vec();
    rep.warnings.extend(y.warnings());
    Ok((rep, integrand))
}

/// Estimator I: `μ[y₀] + Σ_k Ẽ*[D̃_k y_k(X_k) h(X_k)] dZ_k` with `y` the
/// backward Kolmogorov solution for the terminal observable.
pub fn estimate_sigma_obs(
    model: &ScalarModelSpec,
    obs: &ObservationRecord,
    y: &GridFunction,
    ens: &PathEnsemble,
) -> Result<EstimatorReport> {
    ens.grid().ensure_same(obs.grid(), "observation record vs ensemble grid")?;
    let (rep, _) = girsanov_estimate(EstimatorId::SigmaObs, model, y, ens, &|k, _| obs.dz_scalar(k))?;
    Ok(rep)
}

/// Estimator IV: `μ[y₀] + Σ_k Ẽ*[D̃_k y_k(X_k) h(X_k) dW_k]` with `y` the
/// Feynman–Kac solution with growth `+h²` and each path's induced observation
/// error `dWⁱ_k = dZ_k − h(Xⁱ_k) dt`. The truth path is required; the same
/// averaged integrand against the truth error is reported alongside.
pub fn estimate_sigma_obs_error(
    model: &ScalarModelSpec,
    obs: &ObservationRecord,
    y_fk: &GridFunction,
    ens: &PathEnsemble,
) -> Result<EstimatorReport> {
    ens.grid().ensure_same(obs.grid(), "observation record vs ensemble grid")?;
    let truth = obs.truth_path().ok_or(Error::MissingTruthPath)?;
    let dt = obs.grid().dt();
    let (mut rep, integrand) = girsanov_estimate(EstimatorId::SigmaObsError, model, y_fk, ens, &|k, x| {
        obs.dz_scalar(k) - model.obs.eval(x) * dt
    })?;
    let sd = obs.state_dim();
    let mut s = KahanSum::new();
    for (k, c) in integrand.iter().enumerate() {
        s.add(c * (obs.dz_scalar(k) - model.obs.eval(truth[k * sd]) * dt));
    }
    rep.truth_error_integral = Some(rep.y0_prior_term + s.value());
    Ok(rep)
}

/// Estimator II: `μ[y₀] + Σ_k E*_I[D_k y_k(X_k)(h − π_k[h])] dI_k` on the
/// innovation ensemble; the expectation is self-normalized over the D
/// weights. `obs` is used to detect whether the innovation was computed from
/// the observations with the ensemble's own `π[h]` (this enters the
/// influence function).
pub fn estimate_pi_innovation(
    model: &ScalarModelSpec,
    obs: &ObservationRecord,
    y: &GridFunction,
    ens: &PathEnsemble,
) -> Result<EstimatorReport> {
    check_y(y, ens)?;
    ens.grid().ensure_same(obs.grid(), "observation record vs ensemble grid")?;
    let (Some(_), Some(pi_h), Some(di)) = (ens.log_weights_d(), ens.pi_h_path(), ens.innovation_increments()) else {
        return Err(Error::MissingWeights("estimator needs an innovation ensemble"));
    };
    let grid = *ens.grid();
    let dt = grid.dt();
    let n = ens.n_paths();
    let mut rep = EstimatorReport::new(EstimatorId::PiInnovation, &grid, n, ens.seed());
    rep.y0_prior_term = prior_term(model, y);
    let steps = grid.n_steps();
    let mut integral = KahanSum::new();
    let mut control = Vec::with_capacity(steps);
    let mut yv = vec![0.0; n];
    let mut hv = vec![0.0; n];
    let mut cs = vec![0.0; steps];
    let mut ybars = vec![0.0; steps];
    let mut self_pis = vec![false; steps];
    let mut from_obs = vec![false; steps];
    let fill = |k: usize, yv: &mut [f64], hv: &mut [f64]| {
        let xs = ens.states_at(k);
        for i in 0..n {
            yv[i] = y.interpolate(k, xs[i]);
            hv[i] = model.obs.eval(xs[i]);
        }
        normalized_weights(ens.log_d_at(k).unwrap_or_default()).0
    };
    let mut psi = vec![KahanSum::new(); n];
    for k in 0..steps {
        let w = fill(k, &mut yv, &mut hv);
        let p = pi_h[k];
        let hbar = crate::math::sum(w.iter().zip(&hv).map(|(a, b)| a * b));
        ybars[k] = crate::math::sum(w.iter().zip(&yv).map(|(a, b)| a * b));
        cs[k] = crate::math::sum((0..n).map(|i| w[i] * yv[i] * (hv[i] - p)));
        integral.add(cs[k] * di[k]);
        control.push(-cs[k]);
        self_pis[k] = (hbar - p).abs() <= 1e-12 * (1.0 + p.abs());
        from_obs[k] = self_pis[k] && (obs.dz_scalar(k) - p * dt - di[k]).abs() <= 1e-12 * (1.0 + di[k].abs());
        let p_bar = if self_pis[k] { -di[k] * ybars[k] } else { 0.0 } - if from_obs[k] { cs[k] * dt } else { 0.0 };
        for i in 0..n {
            psi[i].add(di[k] * w[i] * (yv[i] * (hv[i] - p) - cs[k]) + p_bar * w[i] * (hv[i] - p));
        }
    }
    // Influence of particle i = derivative of the estimate w.r.t. a mass
    // multiplier on that particle; the forward pass holds the local terms.
    // The log-weight increment is `(h − p) dI − ½ (h − p)² dt`, so a move of
    // the ensemble's own `p` also reaches later weights. When the innovation
    // is built from the same `p` that effect cancels; otherwise a reverse
    // sweep carries it through `g`, the adjoint of the log-weights.
    if (0..steps).any(|k| self_pis[k] && !from_obs[k]) {
        psi = vec![KahanSum::new(); n];
        let mut g = vec![0.0; n];
        for k in (0..steps).rev() {
            let w = fill(k, &mut yv, &mut hv);
            let (p, c) = (pi_h[k], cs[k]);
            let p_bar = if self_pis[k] {
                let gh = crate::math::sum((0..n).map(|i| g[i] * (hv[i] - p)));
                let di_bar = if from_obs[k] { c + gh } else { 0.0 };
                -di[k] * ybars[k] + gh * dt - di_bar * dt
            } else {
                0.0
            };
            for i in 0..n {
                let local = di[k] * w[i] * (yv[i] * (hv[i] - p) - c) + p_bar * w[i] * (hv[i] - p);
                psi[i].add(local);
                g[i] += local;
            }
        }
    }
    rep.stochastic_integral_term = integral.value();
    rep.point_estimate = rep.y0_prior_term + rep.stochastic_integral_term;
    rep.influence = psi.iter().map(|s| s.value()).collect();
    rep.mc_std_err = norm_of(&rep.influence);
    rep.control_path = control;
    rep.warnings = ens.warnings().to_vec();
    rep.warnings.extend(y.warnings());
    Ok(rep)
}

/// Exact linear-Gaussian form of the averaged innovation estimator:
/// `ȳ₀ᵀm₀ + Σ_k (Hᵀ Σ_k ȳ_k)ᵀ dI_k` with `ȳ_k = e^{(T−t_k)A} f̄` and the
/// innovation of the Kalman–Bucy filter. Equals `f̄ᵀ m_T` of
/// [`kalman_bucy_mean`] to rounding.
pub fn pi_innovation_lg_closed_form(lg: &LinearGaussianModelSpec, obs: &ObservationRecord) -> Result<EstimatorReport> {
    let grid = *obs.grid();
    let cov = riccati_filter(&lg.a, &lg.h, lg.sigma, &lg.sigma0, &grid)?;
    let state = kalman_bucy_mean(&lg.a, &lg.h, &cov, &lg.m0, obs)?;
    let ybar = linear_backward_vector(&lg.a, &lg.f_bar, &grid)?;
    let m = obs.obs_dim();
    let inn = state.innovation_path();
    let mut rep = EstimatorReport::new(EstimatorId::PiInnovation, &grid, 0, 0);
    rep.y0_prior_term = ybar.at(0).dot(&lg.m0);
    let mut s = KahanSum::new();
    for k in 0..grid.n_steps() {
        let gain = lg.h.tr_mul(&(cov.sigma_at(k) * ybar.at(k)));
        for c in 0..m {
            let di = inn[(k + 1) * m + c] - inn[k * m + c];
            s.add(gain[c] * di);
            rep.control_path.push(-gain[c]);
        }
    }
    rep.stochastic_integral_term = s.value();
    rep.point_estimate = rep.y0_prior_term + rep.stochastic_integral_term;
    Ok(rep)
}

/// Mode of estimator III.
#[derive(Clone, Copy)]
pub enum PiObsMode<'a> {
    /// Closed-loop backward ODE with the Kalman–Bucy covariance (LG only).
    LgClosedForm,
    /// Frozen-data fixed point on a scalar model with a filter source.
    FixedPoint { source: &'a dyn PiSource, space: SpaceGrid, tol: f64, max_iter: usize },
}

impl<'a> PiObsMode<'a> {
    /// Fixed point with the default tolerance 1e-6 and 50 iterations.
    pub fn fixed_point(source: &'a dyn PiSource, space: SpaceGrid) -> Self {
        PiObsMode::FixedPoint { source, space, tol: 1e-6, max_iter: 50 }
    }
}

/// Estimator III: `Ŝ = μ[y₀] − Σ_k u_kᵀ dZ_k` with a deterministic control.
///
/// Closed form: `u_k = −Hᵀ Σ_k ȳ_k`, `ȳ` from the closed-loop backward
/// equation, `μ[y₀] = ȳ₀ᵀ m₀`.
///
/// Fixed point: `u⁰ ≡ 0`; `y^{(j)}` solves `−∂t y = L y + u^{(j)}_k h(x)`,
/// `y_T = f`; `u^{(j+1)}_k = −π_k[y^{(j)}_k (h − π_k[h])]`; stop when
/// `max_k |u^{(j+1)} − u^{(j)}| < tol`.
pub fn estimate_pi_obs(model: &ModelSpec, obs: &ObservationRecord, mode: PiObsMode<'_>) -> Result<EstimatorReport> {
    let grid = *obs.grid();
    match mode {
        PiObsMode::LgClosedForm => {
            let ModelSpec::LinearGaussian(lg) = model else {
                return Err(Error::ModeModelMismatch("lg_closed_form needs a linear-Gaussian model".into()));
            };
            pi_obs_closed_form(lg, obs)
        }
        PiObsMode::FixedPoint { source, space, tol, max_iter } => {
            let scalar = model
                .to_scalar()
                .map_err(|_| Error::ModeModelMismatch("fixed_point needs a scalar (or 1-D linear-Gaussian) model".into()))?;
            grid.ensure_same(source.grid(), "filter source vs observation record")?;
            let (y, u, iterations) = pi_obs_fixed_point(&scalar, &grid, source, &space, tol, max_iter)?;
            let mut rep = EstimatorReport::new(EstimatorId::PiObs, &grid, 0, 0);
            rep.y0_prior_term = prior_term(&scalar, &y);
            let mut s = KahanSum::new();
            for k in 0..grid.n_steps() {
                s.add(-u[k] * obs.dz_scalar(k));
            }
            rep.stochastic_integral_term = s.value();
            rep.point_estimate = rep.y0_prior_term + rep.stochastic_integral_term;
            rep.control_path = u;
            rep.iterations = Some(iterations);
            rep.warnings = y.warnings();
            Ok(rep)
        }
    }
}

fn pi_obs_closed_form(lg: &LinearGaussianModelSpec, obs: &ObservationRecord) -> Result<EstimatorReport> {
    let grid = *obs.grid();
    let cov = riccati_filter(&lg.a, &lg.h, lg.sigma, &lg.sigma0, &grid)?;
    let (ybar, u) = linear_backward_closed_loop(&lg.a, &lg.h, &cov, &lg.f_bar, &grid)?;
    let m = obs.obs_dim();
    let mut rep = EstimatorReport::new(EstimatorId::PiObs, &grid, 0, 0);
    rep.y0_prior_term = ybar.at(0).dot(&lg.m0);
    let mut s = KahanSum::new();
    for (k, uk) in u.iter().take(grid.n_steps()).enumerate() {
        let dz = obs.dz(k);
        for c in 0..m {
            s.add(-uk[c] * dz[c]);
            rep.control_path.push(uk[c]);
        }
    }
    rep.stochastic_integral_term = s.value();
    rep.point_estimate = rep.y0_prior_term + rep.stochastic_integral_term;
    Ok(rep)
}

/// The fixed-point iteration of estimator III; returns the last value
/// field, the converged control path and the iteration count.
pub fn pi_obs_fixed_point(
    model: &ScalarModelSpec,
    grid: &TimeGrid,
    source: &dyn PiSource,
    space: &SpaceGrid,
    tol: f64,
    max_iter: usize,
) -> Result<(GridFunction, Vec<f64>, usize)> {
    let nk = grid.n_steps();
    let pi_h: Vec<f64> = (0..nk).map(|k| source.expect(k, &|x| model.obs.eval(x))).collect();
    let mut u = vec![0.0; nk];
    let mut change = f64::INFINITY;
    for it in 1..=max_iter {
        let y = solve_backward_general(
            space,
            grid,
            model.sigma,
            &|_, x| model.drift.eval(x),
            None,
            Some(&|k, x| u[k] * model.obs.eval(x)),
            &|x| model.terminal.eval(x),
        )?;
        let next: Vec<f64> = (0..nk)
            .map(|k| -source.expect(k, &|x| y.interpolate(k, x) * (model.obs.eval(x) - pi_h[k])))
            .collect();
        change = next.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        u = next;
        if change < tol {
            // One more solve so that y matches the returned control.
            let y = solve_backward_general(
                space,
                grid,
                model.sigma,
                &|_, x| model.drift.eval(x),
                None,
                Some(&|k, x| u[k] * model.obs.eval(x)),
                &|x| model.terminal.eval(x),
            )?;
            return Ok((y, u, it));
        }
    }
    Err(Error::FixedPointNotConverged { iterations: max_iter, change })
}

/// Kalman–Bucy comparison for estimator III in the closed-loop
/// discretization: `f̄ᵀ m_T`.
pub fn closed_loop_filter_target(lg: &LinearGaussianModelSpec, obs: &ObservationRecord) -> Result<f64> {
    let cov = riccati_filter(&lg.a, &lg.h, lg.sigma, &lg.sigma0, obs.grid())?;
    let st = kalman_bucy_mean_closed_loop(&lg.a, &lg.h, &cov, &lg.m0, obs)?;
    Ok(lg.f_bar.dot(st.mean(obs.grid().n_steps())))
}

/// Monte Carlo cost functional `∫ E[Q² + (U + V)²] dt` and per-path values.
#[derive(Debug, Clone, PartialEq)]
pub struct CostEstimate {
    pub value: f64,
    pub std_err: f64,
    pub per_path: Vec<f64>,
}

/// Cost functional of estimator I (`SigmaObs`, `SigmaObsError`) or II
/// (`PiInnovation`) at the optimal control plus a perturbation
/// `δ(t, x, d)`: `Q = w σ ∂x y`, `V = w y u`, `U = −V + δ` with `w` the
/// path weight and `u = h` or `h − π[h]`.
pub fn cost_functional(
    id: EstimatorId,
    model: &ScalarModelSpec,
    ens: &PathEnsemble,
    y: &GridFunction,
    delta: &dyn Fn(f64, f64, f64) -> f64,
) -> Result<CostEstimate> {
    check_y(y, ens)?;
    let grid = *ens.grid();
    let n = ens.n_paths();
    let dt = grid.dt();
    let d0 = ens.initial_weight();
    let pi_h = ens.pi_h_path();
    let logs = match id {
        EstimatorId::SigmaObs | EstimatorId::SigmaObsError => ens.log_weights_dtilde(),
        EstimatorId::PiInnovation => ens.log_weights_d(),
        EstimatorId::PiObs => return Err(Error::InvalidArgument("cost_functional covers estimators I, II and IV".into())),
    }
    .ok_or(Error::MissingWeights("cost functional needs the estimator's weights"))?;
    let mut per = vec![KahanSum::new(); n];
    for k in 0..grid.n_steps() {
        let t = grid.t(k);
        let xs = ens.states_at(k);
        for i in 0..n {
            let x = xs[i];
            let w = d0 * exp(logs[k * n + i]);
            let u = match id {
                EstimatorId::PiInnovation => model.obs.eval(x) - pi_h.map_or(0.0, |p| p[k]),
                _ => model.obs.eval(x),
            };
            let q = w * model.sigma * y.interpolate_gradient(k, x);
            let v = w * y.interpolate(k, x) * u;
            let uu = -v + delta(t, x, w);
            per[i].add((q * q + (uu + v) * (uu + v)) * dt);
        }
    }
    let per_path: Vec<f64> = per.iter().map(|s| s.value()).collect();
    Ok(CostEstimate { value: crate::math::mean(&per_path), std_err: crate::math::std_err(&per_path), per_path })
}

/// Which weights and observation factor the variance diagnostics use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceFlavor {
    /// `Ỹ = D̃ y`, factor `h`.
    Sigma,
    /// `Y = D y`, factor `h − π[h]`.
    Pi,
}

/// Per-step variance of the backward process `w_k y_k(X_k)` and the
/// Dirichlet-form right-hand side of its growth rate.
pub fn variance_decay(
    model: &ScalarModelSpec,
    y: &GridFunction,
    ens: &PathEnsemble,
    flavor: VarianceFlavor,
) -> Result<VarianceDecayReport> {
    check_y(y, ens)?;
    let grid = *ens.grid();
    let n = ens.n_paths();
    let dt = grid.dt();
    let d0 = ens.initial_weight();
    let (logs, pi_h) = match flavor {
        VarianceFlavor::Sigma => (ens.log_weights_dtilde(), None),
        VarianceFlavor::Pi => (ens.log_weights_d(), ens.pi_h_path()),
    };
    let logs = logs.ok_or(Error::MissingWeights("variance diagnostics need the flavor's weights"))?;
    let mut var = Vec::with_capacity(grid.len());
    let mut var_se = Vec::with_capacity(grid.len());
    let mut rhs = Vec::with_capacity(grid.len());
    let mut cum = Vec::with_capacity(grid.len());
    let mut acc = KahanSum::new();
    let mut yw = vec![0.0; n];
    let mut q2 = vec![0.0; n];
    let mut v = vec![0.0; n];
    for k in 0..grid.len() {
        let xs = ens.states_at(k);
        for i in 0..n {
            let x = xs[i];
            let w = d0 * exp(logs[k * n + i]);
            let u = model.obs.eval(x) - pi_h.map_or(0.0, |p| p[k]);
            yw[i] = w * y.interpolate(k, x);
            let q = w * model.sigma * y.interpolate_gradient(k, x);
            q2[i] = q * q;
            v[i] = yw[i] * u;
        }
        let mu = crate::math::mean(&yw);
        let s2 = crate::math::variance(&yw);
        let m4 = crate::math::mean(&yw.iter().map(|a| (a - mu) * (a - mu) * (a - mu) * (a - mu)).collect::<Vec<_>>());
        var.push(s2);
        var_se.push(sqrt(f64::max(m4 - s2 * s2, 0.0) / n as f64));
        let vm = crate::math::mean(&v);
        let r = crate::math::mean(&q2) + crate::math::mean(&v.iter().map(|a| (a - vm) * (a - vm)).collect::<Vec<_>>());
        rhs.push(r);
        cum.push(acc.value());
        acc.add(r * dt);
    }
    Ok(VarianceDecayReport { grid, var, var_std_err: var_se, rhs, cumulative_rhs: cum })
}

/// Kalman–Bucy `f̄ᵀ m_k` path in innovation form, for scalar comparisons.
pub fn kalman_target(lg: &LinearGaussianModelSpec, obs: &ObservationRecord) -> Result<(f64, f64)> {
    let cov = riccati_filter(&lg.a, &lg.h, lg.sigma, &lg.sigma0, obs.grid())?;
    let st = kalman_bucy_mean(&lg.a, &lg.h, &cov, &lg.m0, obs)?;
    let nk = obs.grid().n_steps();
    let f: &DVector<f64> = &lg.f_bar;
    let var = f.dot(&(st.cov(nk) * f));
    Ok((f.dot(st.mean(nk)), var))
}
