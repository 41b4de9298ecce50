//! Partially observed control: HJB state policies, certainty-equivalence
//! closed-loop runs, the separated-cost estimator, the LQG alternating
//! iteration and the running-cost identity that links estimator III to a
//! control problem.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result, Warning};
use crate::estimators::{estimate_pi_innovation, pi_innovation_lg_closed_form, EstimatorReport};
use crate::kalman::{
    kalman_bucy_mean, kalman_bucy_mean_closed_loop, lq_control_riccati, lq_policy_value, riccati_filter,
    ControlRiccati, CovariancePath, KalmanBucyStepper,
};
use crate::math::{normalized_weights, sqrt, KahanSum};
use crate::model::{CostSpec, LinearGaussianModelSpec, ModelSpec, ScalarModelSpec, SpaceGrid, TimeGrid};
use crate::particle::BootstrapFilter;
use crate::pde::{linear_backward_closed_loop, solve_hjb_quadratic, GridFunction};
use crate::quadrature::GaussHermite;
use crate::rng::{Domain, NormalStream};
use crate::sde::{draw_prior, lg_initial_state, FeedbackPolicy, ObservationRecord, PathEnsemble, DIVERGENCE_LIMIT};

/// Where a policy field came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyProvenance {
    Hjb,
    LqRiccati,
    Zero,
}

/// State feedback `a_k(x)` on a space-time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyField {
    pub field: GridFunction,
    pub provenance: PolicyProvenance,
}

impl PolicyField {
    pub fn zero(space: &SpaceGrid, time: &TimeGrid) -> Result<Self> {
        let field = GridFunction::from_values(*space, *time, vec![0.0; space.n_points() * time.len()])?;
        Ok(Self { field, provenance: PolicyProvenance::Zero })
    }

    /// `a_k(x) = −K_k x` on the grid (scalar state and control).
    pub fn from_riccati(riccati: &ControlRiccati, space: &SpaceGrid) -> Result<Self> {
        let xs = space.points();
        let mut values = Vec::with_capacity(xs.len() * riccati.grid.len());
        for k in 0..riccati.grid.len() {
            let gain = riccati.gain_scalar(k);
            values.extend(xs.iter().map(|x| -gain * x));
        }
        let field = GridFunction::from_values(*space, riccati.grid, values)?;
        Ok(Self { field, provenance: PolicyProvenance::LqRiccati })
    }

    pub fn value(&self, k: usize, x: f64) -> f64 {
        self.field.interpolate(k, x)
    }
}

impl FeedbackPolicy for PolicyField {
    fn control(&self, k: usize, x: f64) -> f64 {
        self.field.interpolate(k, x)
    }
}

/// Optimal state policy `a = −g ∂x y` and value of the quadratic-cost HJB.
pub fn hjb_policy(
    model: &ScalarModelSpec,
    cost: &CostSpec,
    space: &SpaceGrid,
    time: &TimeGrid,
) -> Result<(PolicyField, GridFunction)> {
    let (value, policy) = solve_hjb_quadratic(model, cost, space, time)?;
    Ok((PolicyField { field: policy, provenance: PolicyProvenance::Hjb }, value))
}

/// Outcome of one controlled run or separated-cost evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlRunReport {
    pub seed: u64,
    /// `Σ c(α_k) dt + f(X_T)` on the truth path, when a truth path exists.
    pub realized_cost: Option<f64>,
    pub separated_cost_estimate: Option<f64>,
    pub separated_cost_std_err: Option<f64>,
    /// Unconditional cost `μ[y₀]` of the policy.
    pub mu_y0: Option<f64>,
    /// First component of the filter mean used by the controller.
    pub filter_trace: Vec<f64>,
    /// First component of the applied control.
    pub controls: Vec<f64>,
    pub warnings: Vec<Warning>,
}

impl ControlRunReport {
    fn empty(seed: u64) -> Self {
        Self {
            seed,
            realized_cost: None,
            separated_cost_estimate: None,
            separated_cost_std_err: None,
            mu_y0: None,
            filter_trace: Vec::new(),
            controls: Vec::new(),
            warnings: Vec::new(),
        }
    }
}

/// State policy used by the certainty-equivalence controller.
#[derive(Clone, Copy)]
pub enum CePolicy<'a> {
    /// Grid policy; `α_k = π_k[a_k]` (scalar state).
    Field(&'a PolicyField),
    /// Linear law `a_k(x) = −K_k x`; `α_k = −K_k π_k[x]`.
    LinearGains(&'a ControlRiccati),
}

/// Options of [`certainty_equivalence_run`].
#[derive(Debug, Clone, Copy)]
pub struct CeOptions {
    /// Particles for nonlinear scalar models.
    pub n_particles: usize,
    /// Resampling threshold (fraction of N) of the particle filter.
    pub resample_threshold: f64,
}

impl Default for CeOptions {
    fn default() -> Self {
        Self { n_particles: 1000, resample_threshold: 0.5 }
    }
}

/// Closed-loop run: the truth is driven by `α_k = π̂_k[a_k]` computed from a
/// filter on the synthetic observations (Kalman–Bucy for linear-Gaussian
/// models, a resampling particle filter otherwise). The realized cost is
/// `Σ ½‖α_k‖² dt + terminal(X_T)`. Random streams match
/// [`crate::sde::simulate_truth_and_obs`], so an uncontrolled run sees the
/// same truth path.
pub fn certainty_equivalence_run(
    model: &ModelSpec,
    policy: CePolicy<'_>,
    terminal: &dyn Fn(&[f64]) -> f64,
    grid: &TimeGrid,
    seed: u64,
    opts: CeOptions,
) -> Result<ControlRunReport> {
    match model {
        ModelSpec::Scalar(s) => ce_scalar(s, policy, terminal, grid, seed, opts),
        ModelSpec::LinearGaussian(lg) => ce_linear_gaussian(lg, policy, terminal, grid, seed),
    }
}

fn check_policy_grid(policy: CePolicy<'_>, grid: &TimeGrid) -> Result<()> {
    let pg = match policy {
        CePolicy::Field(f) => f.field.time(),
        CePolicy::LinearGains(r) => &r.grid,
    };
    pg.ensure_same(grid, "policy grid vs run grid")
}

fn ce_scalar(
    model: &ScalarModelSpec,
    policy: CePolicy<'_>,
    terminal: &dyn Fn(&[f64]) -> f64,
    grid: &TimeGrid,
    seed: u64,
    opts: CeOptions,
) -> Result<ControlRunReport> {
    check_policy_grid(policy, grid)?;
    let n = grid.n_steps();
    let dt = grid.dt();
    let sq = sqrt(dt);
    let mut pf = BootstrapFilter::new(model, grid, opts.n_particles, seed, opts.resample_threshold)?;
    let mut x = draw_prior(&model.prior, seed, Domain::TruthInit, 0);
    let mut stream = NormalStream::new(seed, Domain::Truth, 0);
    let mut rep = ControlRunReport::empty(seed);
    let mut running = KahanSum::new();
    for k in 0..n {
        let (w, ess) = normalized_weights(pf.log_weights());
        if rep.warnings.is_empty() && ess < 0.01 * opts.n_particles as f64 {
            rep.warnings.push(Warning::FilterDivergence { step: k, ess });
        }
        let parts = pf.particles();
        let mean = crate::math::sum(parts.iter().zip(&w).map(|(p, wi)| p * wi));
        let alpha = match policy {
            CePolicy::Field(f) => crate::math::sum(parts.iter().zip(&w).map(|(p, wi)| wi * f.value(k, *p))),
            CePolicy::LinearGains(r) => -r.gain_scalar(k) * mean,
        };
        rep.filter_trace.push(mean);
        rep.controls.push(alpha);
        running.add(0.5 * alpha * alpha * dt);
        let (xi, eta) = stream.normal_pair();
        let dz = model.obs.eval(x) * dt + sq * eta;
        let xn = x + (model.drift.eval(x) + model.control_gain * alpha) * dt + model.sigma * sq * xi;
        if !(xn.abs() <= DIVERGENCE_LIMIT) {
            return Err(Error::SimulationDiverged { step: k + 1, path: 0 });
        }
        x = xn;
        pf.maybe_resample(k);
        pf.step(k, dz, alpha)?;
    }
    let (w, _) = normalized_weights(pf.log_weights());
    rep.filter_trace.push(crate::math::sum(pf.particles().iter().zip(&w).map(|(p, wi)| p * wi)));
    rep.realized_cost = Some(running.value() + terminal(&[x]));
    Ok(rep)
}

fn ce_linear_gaussian(
    lg: &LinearGaussianModelSpec,
    policy: CePolicy<'_>,
    terminal: &dyn Fn(&[f64]) -> f64,
    grid: &TimeGrid,
    seed: u64,
) -> Result<ControlRunReport> {
    check_policy_grid(policy, grid)?;
    let nx = lg.state_dim();
    let m = lg.obs_dim();
    let p = lg.control_dim();
    if matches!(policy, CePolicy::Field(_)) && (nx != 1 || p != 1) {
        return Err(Error::DimensionMismatch("grid policies need a scalar state and control".into()));
    }
    let n = grid.n_steps();
    let dt = grid.dt();
    let sq = sqrt(dt);
    let cov = riccati_filter(&lg.a, &lg.h, lg.sigma, &lg.sigma0, grid)?;
    let stepper = KalmanBucyStepper::new(&lg.a, &lg.h, &lg.g, dt);
    let rule = GaussHermite::standard();
    let lanes = nx.max(m);
    let mut streams: Vec<NormalStream> = (0..lanes).map(|c| NormalStream::new(seed, Domain::Truth, c as u64)).collect();
    let mut x = lg_initial_state(lg, seed);
    let mut mean = lg.m0.clone();
    let mut xi = DVector::zeros(nx);
    let mut dz = DVector::zeros(m);
    let mut rep = ControlRunReport::empty(seed);
    let mut running = KahanSum::new();
    for k in 0..n {
        let alpha: DVector<f64> = match policy {
            CePolicy::LinearGains(r) => -(&r.gain[k] * &mean),
            CePolicy::Field(f) => {
                let v = rule.expect(mean[0], cov.sigma_at(k)[(0, 0)], |s| f.value(k, s));
                DVector::from_element(1, v)
            }
        };
        rep.filter_trace.push(mean[0]);
        rep.controls.push(alpha[0]);
        running.add(0.5 * alpha.norm_squared() * dt);
        for (c, s) in streams.iter_mut().enumerate() {
            let (a, b) = s.normal_pair();
            if c < nx {
                xi[c] = a;
            }
            if c < m {
                dz[c] = b * sq;
            }
        }
        dz += lg.obs(&x) * dt;
        x = &x + (lg.drift(&x) + &lg.g * &alpha) * dt + &xi * (lg.sigma * sq);
        if x.iter().any(|v| !(v.abs() <= DIVERGENCE_LIMIT)) {
            return Err(Error::SimulationDiverged { step: k + 1, path: 0 });
        }
        let (next, _) = stepper.step(&mean, cov.sigma_at(k), &dz, &alpha);
        mean = next;
    }
    rep.filter_trace.push(mean[0]);
    rep.realized_cost = Some(running.value() + terminal(x.as_slice()));
    Ok(rep)
}

/// Separated cost `𝒱_T(α | I) = μ[y₀] + Σ_k E*_I[D_k y_k (h − π_k[h])] dI_k`
/// for a fixed Markov policy. `ens` is an innovation ensemble simulated
/// under the controlled drift and `y_value` the policy-evaluation value
/// field. When `obs` carries a truth path, the realized cost of the same
/// policy on that path is reported too.
pub fn separated_cost_estimate(
    model: &ScalarModelSpec,
    policy: &dyn FeedbackPolicy,
    cost: &CostSpec,
    obs: &ObservationRecord,
    ens: &PathEnsemble,
    y_value: &GridFunction,
) -> Result<ControlRunReport> {
    let est: EstimatorReport = estimate_pi_innovation(model, obs, y_value, ens)?;
    let mut rep = ControlRunReport::empty(ens.seed());
    rep.separated_cost_estimate = Some(est.point_estimate);
    rep.separated_cost_std_err = Some(est.mc_std_err);
    rep.mu_y0 = Some(est.y0_prior_term);
    rep.warnings = est.warnings;
    if let Some(pi) = ens.pi_h_path() {
        rep.filter_trace = pi.to_vec();
    }
    if let Some(truth) = obs.truth_path() {
        let grid = obs.grid();
        let mut s = KahanSum::new();
        for k in 0..grid.n_steps() {
            let a = policy.control(k, truth[k]);
            rep.controls.push(a);
            s.add(cost.running.eval(a) * grid.dt());
        }
        rep.realized_cost = Some(s.value() + cost.terminal.eval(truth[grid.n_steps()]));
    }
    Ok(rep)
}

fn trapezoid(grid: &TimeGrid, f: impl Fn(usize) -> f64) -> f64 {
    let mut s = KahanSum::new();
    for k in 0..grid.n_steps() {
        s.add(0.5 * (f(k) + f(k + 1)) * grid.dt());
    }
    s.value()
}

/// Full-information LQ cost `½ m₀ᵀP₀m₀ + ½ tr(P₀Σ₀) + σ² ρ₀`.
pub fn lq_full_information_cost(lg: &LinearGaussianModelSpec, riccati: &ControlRiccati) -> f64 {
    let p0 = &riccati.p[0];
    0.5 * lg.m0.dot(&(p0 * &lg.m0)) + 0.5 * (p0 * &lg.sigma0).trace() + lg.sigma * lg.sigma * riccati.noise_offset[0]
}

/// Optimal LQG cost: the full-information cost plus the estimation penalty
/// `½ ∫ tr(P G Gᵀ P Σ_t) dt`.
pub fn lqg_optimal_cost(lg: &LinearGaussianModelSpec, riccati: &ControlRiccati, cov: &CovariancePath) -> f64 {
    let ggt = &lg.g * lg.g.transpose();
    let penalty = trapezoid(&riccati.grid, |k| 0.5 * (&riccati.p[k] * &ggt * &riccati.p[k] * cov.sigma_at(k)).trace());
    lq_full_information_cost(lg, riccati) + penalty
}

/// Expected cost of the certainty-equivalence law `α = −K m_t`:
/// `½ m₀ᵀP₀m₀ + ½ ∫ tr(P Σ H Hᵀ Σ) dt + ½ tr(Q_f Σ_T)` with `P` the
/// policy-evaluation Hessian of the gains.
pub fn lqg_cost_for_gains(lg: &LinearGaussianModelSpec, policy_value: &ControlRiccati, cov: &CovariancePath) -> f64 {
    let hht = &lg.h * lg.h.transpose();
    let last = policy_value.grid.n_steps();
    let innov = trapezoid(&policy_value.grid, |k| {
        let s = cov.sigma_at(k);
        0.5 * (&policy_value.p[k] * s * &hht * s).trace()
    });
    0.5 * lg.m0.dot(&(&policy_value.p[0] * &lg.m0)) + innov + 0.5 * (&policy_value.p[last] * cov.sigma_at(last)).trace()
}

/// One sweep of the alternating iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub sweep: usize,
    pub max_gain_change: f64,
    /// Expected cost of the gains that entered the sweep.
    pub expected_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqgIteration {
    pub gains: Vec<DMatrix<f64>>,
    pub value: ControlRiccati,
    pub cov: CovariancePath,
    pub trace: Vec<SweepRecord>,
}

const LQG_TOL: f64 = 1e-6;
const LQG_MAX_SWEEPS: usize = 20;

/// Alternates (i) the Kalman–Bucy filter and the expected cost of the
/// current linear law `α = −K m` with (ii) the gain update `K ← Gᵀ P`,
/// where `P` is the value Hessian of the current law. Starts from `K ≡ 0`
/// and stops when successive gain paths differ by less than 1e-6.
pub fn lqg_alternating_iteration(lg: &LinearGaussianModelSpec, qf: &DMatrix<f64>, grid: &TimeGrid) -> Result<LqgIteration> {
    let cov = riccati_filter(&lg.a, &lg.h, lg.sigma, &lg.sigma0, grid)?;
    let zero = DMatrix::zeros(lg.control_dim(), lg.state_dim());
    let mut prev: Option<ControlRiccati> = None;
    let mut trace = Vec::new();
    for sweep in 1..=LQG_MAX_SWEEPS {
        let gain = |k: usize, th: f64| match &prev {
            Some(p) => lg.g.tr_mul(&p.interpolate(k, th)),
            None => zero.clone(),
        };
        let value = lq_policy_value(&lg.a, &lg.g, qf, grid, &gain)?;
        let expected_cost = lqg_cost_for_gains(lg, &value, &cov);
        let change = (0..grid.len())
            .map(|k| crate::linalg::max_abs(&(&value.gain[k] - gain(k, 0.0).clone())))
            .fold(0.0, f64::max);
        trace.push(SweepRecord { sweep, max_gain_change: change, expected_cost });
        if change < LQG_TOL {
            return Ok(LqgIteration { gains: value.gain.clone(), value, cov, trace });
        }
        prev = Some(value);
    }
    let change = trace.last().map_or(f64::INFINITY, |t| t.max_gain_change);
    Err(Error::IterationNotConverged { sweeps: LQG_MAX_SWEEPS, change })
}

/// Gains of the control Riccati equation, for comparison with the iteration.
pub fn lqg_riccati_gains(lg: &LinearGaussianModelSpec, qf: &DMatrix<f64>, grid: &TimeGrid) -> Result<ControlRiccati> {
    lq_control_riccati(&lg.a, &lg.g, qf, grid)
}

/// Control in the running-cost identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemarkControl {
    /// `α = 𝒰`, the deterministic control of estimator III.
    Estimator,
    /// `α ≡ 0`: the identity collapses to the averaged innovation estimator.
    Zero,
}

/// Both sides of `π_T[f] = μ[Y₀] − Σ π_k[h]ᵀ α_k dt + Σ π_k[Y(h − π[h])]ᵀ dI_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RemarkResidual {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

/// Evaluates the identity with Kalman–Bucy closed forms: `π_k[h] = Hᵀ m_k`,
/// `μ[Y₀] = ȳ₀ᵀ m₀`, `π_k[Y(h − π[h])] = Hᵀ Σ_k ȳ_k`.
pub fn remark_consistency_check(
    lg: &LinearGaussianModelSpec,
    obs: &ObservationRecord,
    control: RemarkControl,
) -> Result<RemarkResidual> {
    let grid = *obs.grid();
    let m = obs.obs_dim();
    let dt = grid.dt();
    let cov = riccati_filter(&lg.a, &lg.h, lg.sigma, &lg.sigma0, &grid)?;
    match control {
        RemarkControl::Zero => {
            let st = kalman_bucy_mean(&lg.a, &lg.h, &cov, &lg.m0, obs)?;
            let lhs = lg.f_bar.dot(st.mean(grid.n_steps()));
            let rhs = pi_innovation_lg_closed_form(lg, obs)?.point_estimate;
            Ok(RemarkResidual { lhs, rhs, residual: (lhs - rhs).abs() })
        }
        RemarkControl::Estimator => {
            let st = kalman_bucy_mean_closed_loop(&lg.a, &lg.h, &cov, &lg.m0, obs)?;
            let (ybar, u) = linear_backward_closed_loop(&lg.a, &lg.h, &cov, &lg.f_bar, &grid)?;
            let lhs = lg.f_bar.dot(st.mean(grid.n_steps()));
            let inn = st.innovation_path();
            let mut s = KahanSum::new();
            s.add(ybar.at(0).dot(&lg.m0));
            for k in 0..grid.n_steps() {
                let pi_h = lg.h.tr_mul(st.mean(k));
                let v = lg.h.tr_mul(&(cov.sigma_at(k) * ybar.at(k)));
                for c in 0..m {
                    s.add(-pi_h[c] * u[k][c] * dt);
                    s.add(v[c] * (inn[(k + 1) * m + c] - inn[k * m + c]));
                }
            }
            let rhs = s.value();
            Ok(RemarkResidual { lhs, rhs, residual: (lhs - rhs).abs() })
        }
    }
}
