//! CSV tables, the binary ensemble dump and the run manifest.
//!
//! Every CSV has a header row, `.` decimals and 17 significant digits, so
//! values round-trip bit-exactly. Time-indexed tables put `t` first.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use fbsde_core::control::{ControlRunReport, SweepRecord};
use fbsde_core::estimators::{EstimatorReport, VarianceDecayReport};
use fbsde_core::kalman::GaussianState;
use fbsde_core::particle::ConditionalEstimate;
use fbsde_core::pde::GridFunction;
use fbsde_core::sde::{ObservationRecord, PathEnsemble};
use fbsde_core::TimeGrid;
use serde::Serialize;

/// 17 significant digits in scientific notation.
pub fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

fn writer(path: &Path) -> csv::Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path)?)))
}

/// `t, z_1..z_m[, x_1..x_n]`: cumulative observations and, when present, the
/// truth path. `n_steps + 1` data rows.
pub fn write_observations(path: &Path, obs: &ObservationRecord) -> csv::Result<()> {
    let mut w = writer(path)?;
    let m = obs.obs_dim();
    let n = obs.truth_path().map_or(0, |_| obs.state_dim());
    let mut header = vec!["t".to_string()];
    header.extend((1..=m).map(|c| format!("z_{c}")));
    header.extend((1..=n).map(|c| format!("x_{c}")));
    w.write_record(&header)?;
    for (k, t) in obs.grid().times().enumerate() {
        let mut row = vec![fmt(t)];
        row.extend(obs.z(k).iter().map(|v| fmt(*v)));
        if let Some(x) = obs.truth(k) {
            row.extend(x.iter().map(|v| fmt(*v)));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum ReadError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] fbsde_core::Error),
}

/// Reads an observation CSV written by [`write_observations`] (or by hand).
/// The `t` column must match `grid`. Truth columns are optional.
pub fn read_observations(path: &Path, grid: &TimeGrid) -> Result<ObservationRecord, ReadError> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.get(0) != Some("t") {
        return Err(ReadError::Format(format!("{}: first column must be `t`", path.display())));
    }
    let zc: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with("z_")).collect();
    let xc: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with("x_")).collect();
    if zc.is_empty() || zc.len() + xc.len() + 1 != header.len() {
        return Err(ReadError::Format(format!("{}: expected columns t, z_*, optional x_*", path.display())));
    }
    let mut z = Vec::new();
    let mut x = Vec::new();
    let mut rows = 0;
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64, ReadError> {
            rec[i].trim().parse().map_err(|_| ReadError::Format(format!("row {}: bad number `{}`", k + 2, &rec[i])))
        };
        let t = num(0)?;
        if k >= grid.len() || (t - grid.t(k)).abs() > 1e-9 * grid.t_end().max(1.0) {
            return Err(fbsde_core::Error::GridMismatch(format!("row {} has t = {t}, config grid disagrees", k + 2)).into());
        }
        for &c in &zc {
            z.push(num(c)?);
        }
        for &c in &xc {
            x.push(num(c)?);
        }
        rows += 1;
    }
    if rows != grid.len() {
        return Err(fbsde_core::Error::GridMismatch(format!("{rows} rows for a grid of {} points", grid.len())).into());
    }
    let obs = ObservationRecord::from_cumulative(*grid, zc.len(), z)?;
    Ok(if xc.is_empty() { obs } else { obs.with_truth(xc.len(), x)? })
}

#[derive(Serialize)]
struct ReportRow {
    estimator_id: &'static str,
    estimate: String,
    std_err: String,
    mu_y0: String,
    integral_term: String,
    n_paths: usize,
    dt: String,
    seed: u64,
}

pub fn write_reports(path: &Path, reports: &[EstimatorReport]) -> csv::Result<()> {
    let mut w = writer(path)?;
    for r in reports {
        w.serialize(ReportRow {
            estimator_id: r.id.name(),
            estimate: fmt(r.point_estimate),
            std_err: fmt(r.mc_std_err),
            mu_y0: fmt(r.y0_prior_term),
            integral_term: fmt(r.stochastic_integral_term),
            n_paths: r.n_paths,
            dt: fmt(r.dt),
            seed: r.seed,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_variance(path: &Path, rep: &VarianceDecayReport) -> csv::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["t", "var", "rhs", "cum_rhs"])?;
    for (k, t) in rep.grid.times().enumerate() {
        w.write_record([fmt(t), fmt(rep.var[k]), fmt(rep.rhs[k]), fmt(rep.cumulative_rhs[k])])?;
    }
    w.flush()?;
    Ok(())
}

/// Header `t` followed by the x-coordinates; one row per time step.
pub fn write_grid_function(path: &Path, y: &GridFunction) -> csv::Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["t".to_string()];
    header.extend(y.space().points().into_iter().map(fmt));
    w.write_record(&header)?;
    for (k, t) in y.time().times().enumerate() {
        let mut row = vec![fmt(t)];
        row.extend(y.row(k).iter().map(|v| fmt(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `t, m_1..m_n, Sigma_11..Sigma_nn` (diagonal of the covariance).
pub fn write_gaussian_state(path: &Path, st: &GaussianState) -> csv::Result<()> {
    let mut w = writer(path)?;
    let n = st.mean(0).len();
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("m_{i}")));
    header.extend((1..=n).map(|i| format!("Sigma_{i}{i}")));
    w.write_record(&header)?;
    for (k, t) in st.grid().times().enumerate() {
        let mut row = vec![fmt(t)];
        row.extend(st.mean(k).iter().map(|v| fmt(*v)));
        row.extend((0..n).map(|i| fmt(st.cov(k)[(i, i)])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_conditional_estimate(path: &Path, est: &ConditionalEstimate) -> csv::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["t", "value", "std_err", "ess"])?;
    for (k, t) in est.grid.times().enumerate() {
        w.write_record([fmt(t), fmt(est.values[k]), fmt(est.std_err[k]), fmt(est.ess[k])])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_costs(path: &Path, runs: &[ControlRunReport]) -> csv::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["seed", "realized_cost", "separated_cost_estimate", "mu_y0"])?;
    for r in runs {
        w.write_record([
            r.seed.to_string(),
            fmt_opt(r.realized_cost),
            fmt_opt(r.separated_cost_estimate),
            fmt_opt(r.mu_y0),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `t, filter_mean, control` of one closed-loop run.
pub fn write_trace(path: &Path, grid: &TimeGrid, run: &ControlRunReport) -> csv::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["t", "filter_mean", "control"])?;
    for (k, t) in grid.times().enumerate() {
        let cell = |v: &[f64]| v.get(k).copied().map(fmt).unwrap_or_default();
        w.write_record([fmt(t), cell(&run.filter_trace), cell(&run.controls)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_convergence(path: &Path, trace: &[SweepRecord]) -> csv::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["sweep", "max_gain_change", "expected_cost"])?;
    for s in trace {
        w.write_record([s.sweep.to_string(), fmt(s.max_gain_change), fmt(s.expected_cost)])?;
    }
    w.flush()?;
    Ok(())
}

/// `t, K_ij.., riccati_K_ij..` for the gain paths on the `n_steps` left
/// points of the grid.
pub fn write_gains(
    path: &Path,
    grid: &TimeGrid,
    gains: &[nalgebra::DMatrix<f64>],
    riccati: &[nalgebra::DMatrix<f64>],
) -> csv::Result<()> {
    let mut w = writer(path)?;
    let (r, c) = gains.first().map_or((0, 0), |g| g.shape());
    let names: Vec<String> = (1..=r).flat_map(|i| (1..=c).map(move |j| format!("{i}{j}"))).collect();
    let mut header = vec!["t".to_string()];
    header.extend(names.iter().map(|n| format!("K_{n}")));
    header.extend(names.iter().map(|n| format!("riccati_K_{n}")));
    w.write_record(&header)?;
    for (k, (g, q)) in gains.iter().zip(riccati).enumerate() {
        let mut row = vec![fmt(grid.t(k))];
        for m in [g, q] {
            row.extend((0..r).flat_map(|i| (0..c).map(move |j| fmt(m[(i, j)]))));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

const MAGIC: &[u8; 8] = b"FBSDENS1";

fn put_f64s(w: &mut impl Write, xs: &[f64]) -> io::Result<()> {
    w.write_all(&(xs.len() as u64).to_le_bytes())?;
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn put_opt(w: &mut impl Write, xs: Option<&[f64]>) -> io::Result<()> {
    match xs {
        Some(xs) => {
            w.write_all(&[1])?;
            put_f64s(w, xs)
        }
        None => w.write_all(&[0]),
    }
}

/// Little-endian binary dump of an ensemble: grid, seed, initial weight,
/// states, both log-weight arrays, `π[h]` and innovation increments.
pub fn write_ensemble(path: &Path, ens: &PathEnsemble) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&ens.grid().t_end().to_le_bytes())?;
    w.write_all(&(ens.grid().n_steps() as u64).to_le_bytes())?;
    w.write_all(&ens.seed().to_le_bytes())?;
    w.write_all(&ens.initial_weight().to_le_bytes())?;
    put_f64s(&mut w, ens.states())?;
    put_opt(&mut w, ens.log_weights_d())?;
    put_opt(&mut w, ens.log_weights_dtilde())?;
    put_opt(&mut w, ens.pi_h_path())?;
    put_opt(&mut w, ens.innovation_increments())?;
    w.flush()
}

fn bad(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

fn get8(r: &mut impl Read) -> io::Result<[u8; 8]> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn get_f64s(r: &mut impl Read) -> io::Result<Vec<f64>> {
    let n = u64::from_le_bytes(get8(r)?) as usize;
    // Reading element by element keeps a corrupt length from allocating.
    let mut out = Vec::new();
    for _ in 0..n {
        out.push(f64::from_le_bytes(get8(r)?));
    }
    Ok(out)
}

fn get_opt(r: &mut impl Read) -> io::Result<Option<Vec<f64>>> {
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    match tag[0] {
        0 => Ok(None),
        1 => get_f64s(r).map(Some),
        _ => Err(bad("bad option tag")),
    }
}

pub fn read_ensemble(path: &Path) -> io::Result<PathEnsemble> {
    let mut r = BufReader::new(File::open(path)?);
    if &get8(&mut r)? != MAGIC {
        return Err(bad("not an ensemble dump"));
    }
    let t_end = f64::from_le_bytes(get8(&mut r)?);
    let n_steps = u64::from_le_bytes(get8(&mut r)?) as usize;
    let seed = u64::from_le_bytes(get8(&mut r)?);
    let w0 = f64::from_le_bytes(get8(&mut r)?);
    let states = get_f64s(&mut r)?;
    let log_d = get_opt(&mut r)?;
    let log_dtilde = get_opt(&mut r)?;
    let pi_h = get_opt(&mut r)?;
    let innovation = get_opt(&mut r)?;
    let grid = TimeGrid::new(t_end, n_steps).map_err(|e| bad(&e.to_string()))?;
    PathEnsemble::from_parts(grid, seed, states, log_d, log_dtilde, w0, pi_h, innovation).map_err(|e| bad(&e.to_string()))
}

/// Record of one CLI run, written as `manifest.json` next to the outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub subcommand: String,
    /// Unix seconds.
    pub started_at: u64,
    pub finished_at: u64,
    pub outputs: Vec<PathBuf>,
    pub version: String,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()
    }
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs())
}
