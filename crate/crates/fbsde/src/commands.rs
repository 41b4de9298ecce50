//! The subcommands. Each one computes, writes its tables into the output
//! directory and returns the list of files it wrote.
//!
//! All randomness is derived from the single run seed through
//! [`derive_seed`], one stream per purpose and record. Records and seeds are
//! processed in parallel and collected in index order, so the bytes written
//! do not depend on the thread count.

use std::path::{Path, PathBuf};

use fbsde_core::control::{
    certainty_equivalence_run, hjb_policy, lqg_alternating_iteration, lqg_optimal_cost, lqg_riccati_gains,
    separated_cost_estimate, CeOptions, CePolicy, ControlRunReport,
};
use fbsde_core::estimators::{
    estimate_pi_innovation, estimate_pi_obs, estimate_sigma_obs, estimate_sigma_obs_error, variance_decay,
    EstimatorId, EstimatorReport, PiObsMode, VarianceFlavor,
};
use fbsde_core::kalman::{kalman_bucy_mean, lq_control_riccati, riccati_filter, GaussianState};
use fbsde_core::model::{LinearGaussianModelSpec, ModelSpec, ScalarModelSpec};
use fbsde_core::particle::{run_resampling_filter, FilterOptions, GaussianPi, WeightedCloud};
use fbsde_core::pde::{solve_backward_kolmogorov, solve_backward_with_source, solve_feynman_kac_growth, GridFunction};
use fbsde_core::sde::{
    simulate_girsanov_ensemble_with, simulate_innovation_ensemble_with, simulate_truth_and_obs,
    simulate_truth_and_obs_with, EnsembleOptions, InnovationDriver, ObservationRecord, PathEnsemble, PiHSource,
    TruthOptions,
};
use fbsde_core::{SpaceGrid, TimeGrid, Warning};
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::config::{build_model, Config, ConfigError, ControlMode, PiHSourceKind, PiObsModeKind};
use crate::output;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] fbsde_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Read(#[from] output::ReadError),
}

impl RunError {
    /// Process exit code: 2 for configuration and usage errors, 3 for a
    /// missing truth path, 4 for other numerical failures, 5 for IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(ConfigError::Model(e)) | RunError::Core(e) | RunError::Read(output::ReadError::Model(e)) => {
                match e {
                    fbsde_core::Error::MissingTruthPath => 3,
                    fbsde_core::Error::UnknownFunctionName(_)
                    | fbsde_core::Error::UnknownParameter { .. }
                    | fbsde_core::Error::MissingParameter { .. }
                    | fbsde_core::Error::DimensionMismatch(_)
                    | fbsde_core::Error::NonPositiveSigma(_)
                    | fbsde_core::Error::InvalidGrid(_)
                    | fbsde_core::Error::InvalidPrior(_)
                    | fbsde_core::Error::InvalidModel(_) => 2,
                    _ => 4,
                }
            }
            RunError::Config(_) | RunError::Usage(_) => 2,
            RunError::Io(_) | RunError::Csv(_) | RunError::Read(_) => 5,
        }
    }
}

pub type RunResult<T> = Result<T, RunError>;

/// Random stream purposes.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Observations = 1,
    Ensemble = 2,
    Filter = 3,
    Control = 4,
}

/// Seed of stream `stream`, item `index`, under the run seed (SplitMix64
/// finalizer over the packed triple).
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add((stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Everything a subcommand needs.
pub struct Job {
    pub cfg: Config,
    pub model: ModelSpec,
    pub seed: u64,
    pub out: PathBuf,
    /// Overrides `[estimator] id`.
    pub estimator: Option<EstimatorId>,
    /// Overrides `[estimator] particles`; `sweep` takes several.
    pub particles: Vec<usize>,
    /// Overrides `[control] mode`.
    pub mode: Option<ControlMode>,
    /// Observation CSV to use instead of simulating record 0.
    pub obs_file: Option<PathBuf>,
}

const DEFAULT_PARTICLES: usize = 1000;
const DEFAULT_RUNS: usize = 100;

impl Job {
    pub fn new(cfg: Config, seed: u64, out: PathBuf) -> RunResult<Self> {
        let model = build_model(&cfg)?;
        Ok(Self { cfg, model, seed, out, estimator: None, particles: Vec::new(), mode: None, obs_file: None })
    }

    fn grid(&self) -> RunResult<TimeGrid> {
        Ok(self.cfg.time_grid()?)
    }

    fn space(&self) -> RunResult<SpaceGrid> {
        Ok(self.cfg.space_grid()?)
    }

    fn estimator_id(&self) -> RunResult<EstimatorId> {
        if let Some(id) = self.estimator {
            return Ok(id);
        }
        match &self.cfg.estimator.id {
            Some(s) => Ok(EstimatorId::parse(s)?),
            None => Err(RunError::Usage("no estimator: pass --estimator or set [estimator] id".into())),
        }
    }

    fn particles(&self) -> usize {
        self.particles.first().copied().or(self.cfg.estimator.particles).unwrap_or(DEFAULT_PARTICLES)
    }

    fn ensemble_options(&self) -> EnsembleOptions<'static> {
        EnsembleOptions { ess_floor: self.cfg.estimator.ess_floor.unwrap_or(0.01), ..EnsembleOptions::default() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Observation record `r`: simulated from the model, or read from
    /// `obs_file` for record 0.
    fn record(&self, r: u64) -> RunResult<ObservationRecord> {
        let grid = self.grid()?;
        match (&self.obs_file, r) {
            (Some(p), 0) => Ok(output::read_observations(p, &grid)?),
            (Some(_), _) => Err(RunError::Usage("an observation file supplies a single record".into())),
            (None, _) => Ok(simulate_truth_and_obs(&self.model, &grid, derive_seed(self.seed, Stream::Observations, r))?),
        }
    }

    fn lg(&self) -> RunResult<&LinearGaussianModelSpec> {
        match &self.model {
            ModelSpec::LinearGaussian(lg) => Ok(lg),
            ModelSpec::Scalar(_) => {
                Err(fbsde_core::Error::ModeModelMismatch("this mode needs a linear-Gaussian model".into()).into())
            }
        }
    }

    fn kalman(&self, obs: &ObservationRecord) -> RunResult<GaussianState> {
        let lg = self.lg()?;
        let cov = riccati_filter(&lg.a, &lg.h, lg.sigma, &lg.sigma0, obs.grid())?;
        Ok(kalman_bucy_mean(&lg.a, &lg.h, &cov, &lg.m0, obs)?)
    }

    /// Runs one estimator on one record with `n` particles.
    fn estimate(
        &self,
        id: EstimatorId,
        obs: &ObservationRecord,
        n: usize,
        ens_seed: u64,
        y: &GridFunction,
    ) -> RunResult<(EstimatorReport, Option<PathEnsemble>)> {
        let grid = self.grid()?;
        let scalar = || -> RunResult<ScalarModelSpec> { Ok(self.model.to_scalar()?) };
        let opts = self.ensemble_options();
        match id {
            EstimatorId::SigmaObs | EstimatorId::SigmaObsError => {
                if id == EstimatorId::SigmaObsError && obs.truth_path().is_none() {
                    return Err(fbsde_core::Error::MissingTruthPath.into());
                }
                let s = scalar()?;
                let ens = simulate_girsanov_ensemble_with(&s, &grid, obs, n, ens_seed, opts)?;
                let rep = if id == EstimatorId::SigmaObs {
                    estimate_sigma_obs(&s, obs, y, &ens)?
                } else {
                    estimate_sigma_obs_error(&s, obs, y, &ens)?
                };
                Ok((rep, Some(ens)))
            }
            EstimatorId::PiInnovation => {
                let s = scalar()?;
                let kalman_pi;
                let source = match self.cfg.estimator.pi_h_source.unwrap_or(PiHSourceKind::SelfNormalized) {
                    PiHSourceKind::SelfNormalized => PiHSource::SelfNormalized,
                    PiHSourceKind::Kalman => {
                        kalman_pi = self.kalman(obs)?.pi_h_path().to_vec();
                        PiHSource::External(&kalman_pi)
                    }
                };
                let ens = simulate_innovation_ensemble_with(
                    &s,
                    &grid,
                    InnovationDriver::Observations(obs),
                    n,
                    ens_seed,
                    source,
                    opts,
                )?;
                Ok((estimate_pi_innovation(&s, obs, y, &ens)?, Some(ens)))
            }
            EstimatorId::PiObs => {
                let default_mode = match self.model {
                    ModelSpec::LinearGaussian(_) => PiObsModeKind::LgClosedForm,
                    ModelSpec::Scalar(_) => PiObsModeKind::FixedPoint,
                };
                match self.cfg.estimator.pi_obs_mode.unwrap_or(default_mode) {
                    PiObsModeKind::LgClosedForm => Ok((estimate_pi_obs(&self.model, obs, PiObsMode::LgClosedForm)?, None)),
                    PiObsModeKind::FixedPoint if matches!(self.model, ModelSpec::LinearGaussian(_)) => {
                        let st = self.kalman(obs)?;
                        let src = GaussianPi::new(&st);
                        Ok((estimate_pi_obs(&self.model, obs, PiObsMode::fixed_point(&src, self.space()?))?, None))
                    }
                    PiObsModeKind::FixedPoint => {
                        let s = scalar()?;
                        let ens = simulate_innovation_ensemble_with(
                            &s,
                            &grid,
                            InnovationDriver::Observations(obs),
                            n,
                            ens_seed,
                            PiHSource::SelfNormalized,
                            opts,
                        )?;
                        let cloud = WeightedCloud::from_ensemble(&ens)?;
                        let mut rep = estimate_pi_obs(&self.model, obs, PiObsMode::fixed_point(&cloud, self.space()?))?;
                        rep.n_paths = n;
                        rep.seed = ens_seed;
                        Ok((rep, Some(ens)))
                    }
                }
            }
        }
    }

    /// Value field the estimator integrates against (none for estimator III).
    fn value_field(&self, id: EstimatorId) -> RunResult<Option<GridFunction>> {
        if id == EstimatorId::PiObs {
            return Ok(None);
        }
        let s = self.model.to_scalar()?;
        let (space, grid) = (self.space()?, self.grid()?);
        space.check_prior(&s.prior)?;
        let y = match id {
            EstimatorId::SigmaObsError => solve_feynman_kac_growth(&s, &space, &grid)?,
            _ => solve_backward_kolmogorov(&s, &space, &grid)?,
        };
        Ok(Some(y))
    }
}

fn log_warnings(what: &str, warnings: &[Warning]) {
    for w in warnings {
        log::warn!("{what}: {w:?}");
    }
}

/// An empty field for estimator III, which takes no value field.
fn placeholder(job: &Job) -> RunResult<GridFunction> {
    let grid = job.grid()?;
    let space = SpaceGrid::new(-1.0, 1.0, 3)?;
    Ok(GridFunction::from_values(space, grid, vec![0.0; 3 * grid.len()])?)
}

/// `obs.csv` for record 0 and, with `dump_ensembles`, the ensemble the
/// configured estimator would use on it.
pub fn cmd_simulate(job: &Job) -> RunResult<Vec<PathBuf>> {
    let obs = job.record(0)?;
    let p = job.path("obs.csv");
    output::write_observations(&p, &obs)?;
    let mut files = vec![p];
    if job.cfg.output.dump_ensembles {
        let id = job.estimator_id().unwrap_or(EstimatorId::PiInnovation);
        let s = job.model.to_scalar()?;
        let grid = job.grid()?;
        let seed = derive_seed(job.seed, Stream::Ensemble, 0);
        let opts = job.ensemble_options();
        let n = job.particles();
        let ens = match id {
            EstimatorId::SigmaObs | EstimatorId::SigmaObsError => {
                simulate_girsanov_ensemble_with(&s, &grid, &obs, n, seed, opts)?
            }
            _ => simulate_innovation_ensemble_with(
                &s,
                &grid,
                InnovationDriver::Observations(&obs),
                n,
                seed,
                PiHSource::SelfNormalized,
                opts,
            )?,
        };
        let p = job.path("ensemble.bin");
        output::write_ensemble(&p, &ens)?;
        files.push(p);
    }
    Ok(files)
}

/// `report.csv` with one row per record, plus the reference filter of
/// record 0 (`kalman.csv` for linear-Gaussian models, `filter.csv` from a
/// resampling particle filter otherwise).
pub fn cmd_estimate(job: &Job) -> RunResult<Vec<PathBuf>> {
    let id = job.estimator_id()?;
    let records = if job.obs_file.is_some() { 1 } else { job.cfg.estimator.records.unwrap_or(1) };
    let n = job.particles();
    let y = match job.value_field(id)? {
        Some(y) => y,
        None => placeholder(job)?,
    };
    let runs: Vec<(ObservationRecord, EstimatorReport, Option<PathEnsemble>)> = (0..records as u64)
        .into_par_iter()
        .map(|r| {
            let obs = job.record(r)?;
            let (rep, ens) = job.estimate(id, &obs, n, derive_seed(job.seed, Stream::Ensemble, r), &y)?;
            log_warnings(&format!("record {r}"), &rep.warnings);
            let keep = if job.cfg.output.dump_ensembles { ens } else { None };
            Ok((obs, rep, keep))
        })
        .collect::<RunResult<_>>()?;
    let reports: Vec<EstimatorReport> = runs.iter().map(|(_, r, _)| r.clone()).collect();
    let mut files = vec![job.path("report.csv")];
    output::write_reports(&files[0], &reports)?;
    for (r, (_, _, ens)) in runs.iter().enumerate() {
        if let Some(ens) = ens {
            let p = job.path(&format!("ensemble_{r}.bin"));
            output::write_ensemble(&p, ens)?;
            files.push(p);
        }
    }
    let obs0 = &runs[0].0;
    match &job.model {
        ModelSpec::LinearGaussian(lg) if lg.obs_dim() == obs0.obs_dim() => {
            let p = job.path("kalman.csv");
            output::write_gaussian_state(&p, &job.kalman(obs0)?)?;
            files.push(p);
        }
        ModelSpec::LinearGaussian(_) => {}
        ModelSpec::Scalar(s) => {
            let f = s.terminal;
            let run = run_resampling_filter(
                s,
                obs0,
                n,
                derive_seed(job.seed, Stream::Filter, 0),
                &|x| f.eval(x),
                FilterOptions::default(),
            )?;
            log_warnings("reference filter", &run.estimate.warnings);
            let p = job.path("filter.csv");
            output::write_conditional_estimate(&p, &run.estimate)?;
            files.push(p);
        }
    }
    Ok(files)
}

/// Same record, one row per particle count.
pub fn cmd_sweep(job: &Job) -> RunResult<Vec<PathBuf>> {
    let id = job.estimator_id()?;
    let counts = if job.particles.is_empty() { vec![job.particles()] } else { job.particles.clone() };
    let obs = job.record(0)?;
    let y = match job.value_field(id)? {
        Some(y) => y,
        None => placeholder(job)?,
    };
    let seed = derive_seed(job.seed, Stream::Ensemble, 0);
    let reports: Vec<EstimatorReport> = counts
        .par_iter()
        .map(|&n| {
            let (rep, _) = job.estimate(id, &obs, n, seed, &y)?;
            log_warnings(&format!("N = {n}"), &rep.warnings);
            Ok(rep)
        })
        .collect::<RunResult<_>>()?;
    let p = job.path("report.csv");
    output::write_reports(&p, &reports)?;
    Ok(vec![p])
}

/// `variance.csv` and the value field `value.csv` on record 0. Estimator I
/// uses the Girsanov weights, estimator II the innovation weights.
pub fn cmd_variance(job: &Job) -> RunResult<Vec<PathBuf>> {
    let id = job.estimator.or(job.cfg.estimator.id.as_deref().map(EstimatorId::parse).transpose()?);
    let flavor = match id.unwrap_or(EstimatorId::PiInnovation) {
        EstimatorId::SigmaObs => VarianceFlavor::Sigma,
        EstimatorId::PiInnovation => VarianceFlavor::Pi,
        other => {
            return Err(RunError::Usage(format!("variance diagnostics cover sigma_obs and pi_innovation, not {}", other.name())))
        }
    };
    let s = job.model.to_scalar()?;
    let (space, grid) = (job.space()?, job.grid()?);
    space.check_prior(&s.prior)?;
    let y = solve_backward_kolmogorov(&s, &space, &grid)?;
    let obs = job.record(0)?;
    let seed = derive_seed(job.seed, Stream::Ensemble, 0);
    let n = job.particles();
    let opts = job.ensemble_options();
    let ens = match flavor {
        VarianceFlavor::Sigma => simulate_girsanov_ensemble_with(&s, &grid, &obs, n, seed, opts)?,
        VarianceFlavor::Pi => simulate_innovation_ensemble_with(
            &s,
            &grid,
            InnovationDriver::Observations(&obs),
            n,
            seed,
            PiHSource::SelfNormalized,
            opts,
        )?,
    };
    log_warnings("ensemble", ens.warnings());
    let rep = variance_decay(&s, &y, &ens, flavor)?;
    let (pv, py) = (job.path("variance.csv"), job.path("value.csv"));
    output::write_variance(&pv, &rep)?;
    output::write_grid_function(&py, &y)?;
    Ok(vec![pv, py])
}

fn quadratic_terminal(job: &Job, n: usize) -> RunResult<DMatrix<f64>> {
    let c = &job.cfg.control;
    let q = c
        .terminal_hessian
        .ok_or_else(|| RunError::Usage("linear-Gaussian control needs [control] terminal_hessian".into()))?;
    if c.terminal_center.unwrap_or(0.0) != 0.0 {
        return Err(RunError::Usage("linear-Gaussian control needs terminal_center = 0".into()));
    }
    Ok(DMatrix::from_diagonal_element(n, n, q))
}

pub fn cmd_control(job: &Job) -> RunResult<Vec<PathBuf>> {
    let mode = job
        .mode
        .or(job.cfg.control.mode)
        .ok_or_else(|| RunError::Usage("no control mode: pass --mode or set [control] mode".into()))?;
    match mode {
        ControlMode::LqgIteration => control_lqg_iteration(job),
        ControlMode::Hjb => control_hjb(job),
        ControlMode::CertaintyEquivalence => control_certainty_equivalence(job),
    }
}

/// `convergence.csv` per sweep and `gains.csv` next to the Riccati gains.
fn control_lqg_iteration(job: &Job) -> RunResult<Vec<PathBuf>> {
    let lg = job.lg()?;
    let grid = job.grid()?;
    let qf = quadratic_terminal(job, lg.state_dim())?;
    let it = lqg_alternating_iteration(lg, &qf, &grid)?;
    let ric = lqg_riccati_gains(lg, &qf, &grid)?;
    let gap = it.gains.iter().zip(&ric.gain).map(|(a, b)| (a - b).abs().max()).fold(0.0, f64::max);
    log::info!("alternating iteration: {} sweeps, max gain gap to Riccati {gap:.3e}", it.trace.len());
    let (pc, pg) = (job.path("convergence.csv"), job.path("gains.csv"));
    output::write_convergence(&pc, &it.trace)?;
    output::write_gains(&pg, &grid, &it.gains, &ric.gain)?;
    Ok(vec![pc, pg])
}

/// `policy.csv` and `value.csv`. With `[control] n_runs`, also evaluates
/// the separated cost of the policy on that many records whose truth is
/// driven by the policy (`costs.csv`).
fn control_hjb(job: &Job) -> RunResult<Vec<PathBuf>> {
    let s = job.model.to_scalar()?;
    let (space, grid) = (job.space()?, job.grid()?);
    let cost = job.cfg.cost_spec(&job.model)?;
    let (policy, value) = hjb_policy(&s, &cost, &space, &grid)?;
    log_warnings("HJB", &value.warnings());
    let (pp, pv) = (job.path("policy.csv"), job.path("value.csv"));
    output::write_grid_function(&pp, &policy.field)?;
    output::write_grid_function(&pv, &value)?;
    let mut files = vec![pp, pv];
    let Some(runs) = job.cfg.control.n_runs else {
        return Ok(files);
    };
    space.check_prior(&s.prior)?;
    let y_value = solve_backward_with_source(
        &s,
        &policy,
        &|_, _, a| cost.running.eval(a),
        &|x| cost.terminal.eval(x),
        &space,
        &grid,
    )?;
    let n = job.particles();
    let reports: Vec<ControlRunReport> = (0..runs as u64)
        .into_par_iter()
        .map(|r| {
            let obs = simulate_truth_and_obs_with(
                &ModelSpec::Scalar(s.clone()),
                &grid,
                derive_seed(job.seed, Stream::Control, r),
                TruthOptions { policy: Some(&policy), ..TruthOptions::default() },
            )?;
            let opts = EnsembleOptions { policy: Some(&policy), ..job.ensemble_options() };
            let ens = simulate_innovation_ensemble_with(
                &s,
                &grid,
                InnovationDriver::Observations(&obs),
                n,
                derive_seed(job.seed, Stream::Ensemble, r),
                PiHSource::SelfNormalized,
                opts,
            )?;
            let mut rep = separated_cost_estimate(&s, &policy, &cost, &obs, &ens, &y_value)?;
            rep.seed = derive_seed(job.seed, Stream::Control, r);
            log_warnings(&format!("run {r}"), &rep.warnings);
            Ok(rep)
        })
        .collect::<RunResult<_>>()?;
    let p = job.path("costs.csv");
    output::write_costs(&p, &reports)?;
    files.push(p);
    Ok(files)
}

/// `costs.csv` over `n_runs` closed-loop runs and `trace.csv` of the first.
fn control_certainty_equivalence(job: &Job) -> RunResult<Vec<PathBuf>> {
    let grid = job.grid()?;
    let runs = job.cfg.control.n_runs.unwrap_or(DEFAULT_RUNS) as u64;
    let opts = CeOptions { n_particles: job.particles(), ..CeOptions::default() };
    let seeds: Vec<u64> = (0..runs).map(|r| derive_seed(job.seed, Stream::Control, r)).collect();
    let reports: Vec<ControlRunReport> = match &job.model {
        ModelSpec::LinearGaussian(lg) => {
            let qf = quadratic_terminal(job, lg.state_dim())?;
            let ric = lq_control_riccati(&lg.a, &lg.g, &qf, &grid)?;
            let cov = riccati_filter(&lg.a, &lg.h, lg.sigma, &lg.sigma0, &grid)?;
            let expected = lqg_optimal_cost(lg, &ric, &cov);
            let terminal = |x: &[f64]| {
                let v = nalgebra::DVector::from_column_slice(x);
                0.5 * v.dot(&(&qf * &v))
            };
            let mut reps: Vec<ControlRunReport> = seeds
                .par_iter()
                .map(|&sd| certainty_equivalence_run(&job.model, CePolicy::LinearGains(&ric), &terminal, &grid, sd, opts))
                .collect::<Result<_, _>>()?;
            for r in &mut reps {
                r.mu_y0 = Some(expected);
            }
            reps
        }
        ModelSpec::Scalar(s) => {
            let space = job.space()?;
            let cost = job.cfg.cost_spec(&job.model)?;
            let (policy, _) = hjb_policy(s, &cost, &space, &grid)?;
            let terminal = |x: &[f64]| cost.terminal.eval(x[0]);
            seeds
                .par_iter()
                .map(|&sd| certainty_equivalence_run(&job.model, CePolicy::Field(&policy), &terminal, &grid, sd, opts))
                .collect::<Result<_, _>>()?
        }
    };
    for r in &reports {
        log_warnings(&format!("seed {}", r.seed), &r.warnings);
    }
    let (pc, pt) = (job.path("costs.csv"), job.path("trace.csv"));
    output::write_costs(&pc, &reports)?;
    output::write_trace(&pt, &grid, &reports[0])?;
    Ok(vec![pc, pt])
}

/// Creates the output directory.
pub fn prepare_out(dir: &Path) -> RunResult<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for s in [0u64, 1, 2] {
            for st in [Stream::Observations, Stream::Ensemble, Stream::Filter, Stream::Control] {
                for i in 0..100 {
                    assert!(seen.insert(derive_seed(s, st, i)));
                }
            }
        }
    }
}
