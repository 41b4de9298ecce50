//! TOML scenario files.
//!
//! A scenario has five sections: `[model]`, `[grid]`, `[estimator]`,
//! `[control]` and `[output]`. Only `[model]` and `[grid]` are required.
//! Unknown keys are rejected so a typo never silently falls back to a
//! default.
//!
//! ```toml
//! [model]
//! drift = "linear"
//! a = -1.0
//! sigma = 1.0
//! h = "linear"
//! f = "linear"
//! prior_mean = 0.0
//! prior_var = 1.0
//!
//! [grid]
//! t_end = 1.0
//! n_steps = 1000
//! x_min = -8.0
//! x_max = 8.0
//! n_points = 321
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fbsde_core::model::{GaussianComponent, LinearGaussianModelSpec, ModelSpec, Prior, ScalarFn, ScalarModelSpec};
use fbsde_core::{CostSpec, SpaceGrid, TerminalCost, TimeGrid};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    /// TOML syntax or schema error; the message carries line and column.
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("[{section}] {message}")]
    Invalid { section: &'static str, message: String },
    #[error(transparent)]
    Model(#[from] fbsde_core::Error),
}

fn invalid(section: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { section, message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Scalar,
    LinearGaussian,
}

/// A number, a vector or a matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Numeric {
    Scalar(f64),
    Vector(Vec<f64>),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ModelKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub drift_params: BTreeMap<String, f64>,
    /// Slope of a `linear` drift.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    pub sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub h_params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub f_params: BTreeMap<String, f64>,
    pub prior_mean: Numeric,
    pub prior_var: Numeric,
    /// Mixture weights; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_weights: Option<Vec<f64>>,
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    pub a_matrix: Option<Vec<Vec<f64>>>,
    #[serde(rename = "H", default, skip_serializing_if = "Option::is_none")]
    pub h_matrix: Option<Vec<Vec<f64>>>,
    /// Control matrix; no control channel when absent.
    #[serde(rename = "G", default, skip_serializing_if = "Option::is_none")]
    pub g_matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_bar: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub t_end: f64,
    pub n_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_points: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PiHSourceKind {
    /// The ensemble's own self-normalized `π[h]`.
    SelfNormalized,
    /// Kalman–Bucy `Hᵀm` (linear-Gaussian models).
    Kalman,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PiObsModeKind {
    LgClosedForm,
    FixedPoint,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particles: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi_h_source: Option<PiHSourceKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ess_floor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi_obs_mode: Option<PiObsModeKind>,
    /// Number of independent observation records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ControlMode {
    Hjb,
    CertaintyEquivalence,
    LqgIteration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// `½‖α‖²` running cost.
    Quadratic,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ControlMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_hessian: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_center: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_runs: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub dump_ensembles: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelSection,
    pub grid: GridSection,
    #[serde(default, skip_serializing_if = "is_default")]
    pub estimator: EstimatorSection,
    #[serde(default, skip_serializing_if = "is_default")]
    pub control: ControlSection,
    #[serde(default, skip_serializing_if = "is_default")]
    pub output: OutputSection,
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::parse_named(text, "<config>")
    }

    fn parse_named(text: &str, name: &str) -> Result<Self, ConfigError> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: name.to_string(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::parse_named(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config values are always representable in TOML")
    }

    /// SHA-256 of the canonical form. Key order in the source file does not
    /// matter: the hash is taken over the parsed structure.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes to JSON");
        hex::encode(Sha256::digest(&canonical))
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if let Some(id) = &self.estimator.id {
            fbsde_core::estimators::EstimatorId::parse(id).map_err(|e| invalid("estimator", e.to_string()))?;
        }
        if self.estimator.particles == Some(0) {
            return Err(invalid("estimator", "particles must be positive"));
        }
        if self.estimator.records == Some(0) {
            return Err(invalid("estimator", "records must be positive"));
        }
        if let Some(f) = self.estimator.ess_floor {
            if !(0.0..=1.0).contains(&f) {
                return Err(invalid("estimator", format!("ess_floor must lie in [0, 1], got {f}")));
            }
        }
        if self.control.n_runs == Some(0) {
            return Err(invalid("control", "n_runs must be positive"));
        }
        self.time_grid()?;
        Ok(())
    }

    pub fn time_grid(&self) -> Result<TimeGrid, ConfigError> {
        Ok(TimeGrid::new(self.grid.t_end, self.grid.n_steps)?)
    }

    /// The space grid; required by every command that solves a PDE.
    pub fn space_grid(&self) -> Result<SpaceGrid, ConfigError> {
        let g = &self.grid;
        match (g.x_min, g.x_max, g.n_points) {
            (Some(a), Some(b), Some(n)) => Ok(SpaceGrid::new(a, b, n)?),
            _ => Err(invalid("grid", "x_min, x_max and n_points are required for PDE solves")),
        }
    }

    /// Terminal cost of the control problem: quadratic when
    /// `terminal_hessian` is set, otherwise the model's `f`.
    pub fn cost_spec(&self, model: &ModelSpec) -> Result<CostSpec, ConfigError> {
        let c = &self.control;
        match c.terminal_hessian {
            Some(q) => Ok(CostSpec::quadratic(q, c.terminal_center.unwrap_or(0.0))?),
            None => {
                if c.terminal_center.is_some() {
                    return Err(invalid("control", "terminal_center needs terminal_hessian"));
                }
                let f = model.to_scalar()?.terminal;
                Ok(CostSpec { running: fbsde_core::RunningCost::Quadratic, terminal: TerminalCost::Function(f) })
            }
        }
    }
}

fn resolve(name: &str, params: &BTreeMap<String, f64>) -> Result<ScalarFn, ConfigError> {
    let p: Vec<(&str, f64)> = params.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    Ok(ScalarFn::from_registry(name, &p)?)
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, ConfigError> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if nr == 0 || nc == 0 || rows.iter().any(|r| r.len() != nc) {
        return Err(fbsde_core::Error::DimensionMismatch(format!("{what} must be a non-empty rectangular array of rows")).into());
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

fn scalar_value(v: &Numeric, what: &str) -> Result<f64, ConfigError> {
    match v {
        Numeric::Scalar(x) => Ok(*x),
        Numeric::Vector(xs) if xs.len() == 1 => Ok(xs[0]),
        _ => Err(fbsde_core::Error::DimensionMismatch(format!("{what} must be a number")).into()),
    }
}

fn lg_prior(m: &ModelSection, n: usize) -> Result<(DVector<f64>, DMatrix<f64>), ConfigError> {
    if m.prior_weights.is_some() {
        return Err(fbsde_core::Error::InvalidPrior("linear-Gaussian models take a single Gaussian prior".into()).into());
    }
    let dim = |what: &str| ConfigError::from(fbsde_core::Error::DimensionMismatch(what.into()));
    let mean = match &m.prior_mean {
        Numeric::Scalar(x) => DVector::from_element(n, *x),
        Numeric::Vector(xs) if xs.len() == n => DVector::from_column_slice(xs),
        _ => return Err(dim("prior_mean must be a number or an n-vector")),
    };
    let cov = match &m.prior_var {
        Numeric::Scalar(v) => DMatrix::from_diagonal_element(n, n, *v),
        Numeric::Vector(vs) if vs.len() == n => DMatrix::from_diagonal(&DVector::from_column_slice(vs)),
        Numeric::Matrix(rows) => matrix(rows, "prior_var")?,
        _ => return Err(dim("prior_var must be a number, an n-vector of variances or an n x n matrix")),
    };
    Ok((mean, cov))
}

fn scalar_prior(m: &ModelSection) -> Result<Prior, ConfigError> {
    match (&m.prior_mean, &m.prior_var) {
        (Numeric::Scalar(mu), Numeric::Scalar(v)) if m.prior_weights.is_none() => Ok(Prior::gaussian(*mu, *v)?),
        (Numeric::Vector(mus), Numeric::Vector(vs)) if mus.len() == vs.len() => {
            let k = mus.len();
            let w = m.prior_weights.clone().unwrap_or_else(|| vec![1.0 / k as f64; k]);
            if w.len() != k {
                return Err(fbsde_core::Error::DimensionMismatch("prior_weights must match prior_mean".into()).into());
            }
            let comps = (0..k).map(|i| GaussianComponent { weight: w[i], mean: mus[i], variance: vs[i] }).collect();
            Ok(Prior::mixture(comps)?)
        }
        _ => Err(fbsde_core::Error::InvalidPrior(
            "scalar prior needs numbers, or equal-length arrays for a mixture".into(),
        )
        .into()),
    }
}

fn intercept_free_slope(f: &ScalarFn) -> Option<f64> {
    match *f {
        ScalarFn::Linear { slope, intercept: 0.0 } => Some(slope),
        _ => None,
    }
}

/// Builds and validates the model described by `[model]`.
///
/// Without an explicit `kind`, a model given by matrices is linear-Gaussian,
/// and so is a scalar model whose drift, observation and terminal functions
/// are all intercept-free `linear` with a Gaussian prior.
pub fn build_model(cfg: &Config) -> Result<ModelSpec, ConfigError> {
    let m = &cfg.model;
    let has_matrices = m.a_matrix.is_some() || m.h_matrix.is_some() || m.f_bar.is_some();
    let has_functions = m.drift.is_some() || m.h.is_some() || m.f.is_some();
    if has_matrices && has_functions {
        return Err(invalid("model", "give either drift/h/f or A/H/f_bar, not both"));
    }
    if m.a.is_some() && m.drift.as_deref() != Some("linear") {
        return Err(invalid("model", "`a` is the slope of a linear drift and needs drift = \"linear\""));
    }
    if has_matrices {
        if m.kind == Some(ModelKind::Scalar) {
            return Err(invalid("model", "kind = \"scalar\" takes drift/h/f, not matrices"));
        }
        let req = |v: &Option<Vec<Vec<f64>>>, k: &str| {
            v.as_ref().ok_or_else(|| invalid("model", format!("linear-Gaussian model needs {k}"))).and_then(|r| matrix(r, k))
        };
        let a = req(&m.a_matrix, "A")?;
        let h = req(&m.h_matrix, "H")?;
        let n = a.nrows();
        let g = match &m.g_matrix {
            Some(r) => matrix(r, "G")?,
            None => DMatrix::zeros(n, 1),
        };
        let f_bar = m.f_bar.as_ref().ok_or_else(|| invalid("model", "linear-Gaussian model needs f_bar"))?;
        let (m0, s0) = lg_prior(m, n)?;
        let lg = LinearGaussianModelSpec::new(a, h, g, m.sigma, m0, s0, DVector::from_column_slice(f_bar))?;
        return Ok(ModelSpec::LinearGaussian(lg));
    }

    let need = |v: &Option<String>, k: &str| v.clone().ok_or_else(|| invalid("model", format!("missing key `{k}`")));
    let mut drift_params = m.drift_params.clone();
    if let Some(a) = m.a {
        if drift_params.insert("a".into(), a).is_some() {
            return Err(invalid("model", "drift slope given both as `a` and in drift_params"));
        }
    }
    let drift = resolve(&need(&m.drift, "drift")?, &drift_params)?;
    let obs = resolve(&need(&m.h, "h")?, &m.h_params)?;
    let terminal = resolve(&need(&m.f, "f")?, &m.f_params)?;
    let g = match &m.g_matrix {
        Some(r) => {
            let gm = matrix(r, "G")?;
            if gm.shape() != (1, 1) {
                return Err(fbsde_core::Error::DimensionMismatch("scalar model takes a 1x1 G".into()).into());
            }
            gm[(0, 0)]
        }
        None => 0.0,
    };
    let slopes = (intercept_free_slope(&drift), intercept_free_slope(&obs), intercept_free_slope(&terminal));
    let gaussian_prior = matches!((&m.prior_mean, &m.prior_var), (Numeric::Scalar(_), Numeric::Scalar(_)))
        && m.prior_weights.is_none();
    match (m.kind, slopes) {
        (Some(ModelKind::LinearGaussian) | None, (Some(a), Some(h), Some(f))) if gaussian_prior => {
            let mu = scalar_value(&m.prior_mean, "prior_mean")?;
            let var = scalar_value(&m.prior_var, "prior_var")?;
            Ok(ModelSpec::LinearGaussian(LinearGaussianModelSpec::scalar(a, h, g, m.sigma, mu, var, f)?))
        }
        (Some(ModelKind::LinearGaussian), _) => Err(invalid(
            "model",
            "kind = \"linear_gaussian\" needs intercept-free linear drift/h/f and a Gaussian prior, or matrices",
        )),
        _ => {
            let prior = scalar_prior(m)?;
            let spec = ScalarModelSpec::new(drift, m.sigma, obs, terminal, prior)?.with_control_gain(g);
            Ok(ModelSpec::Scalar(spec))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LG: &str = r#"
[model]
drift = "linear"
a = -1.0
sigma = 1.0
h = "linear"
f = "linear"
prior_mean = 0.0
prior_var = 1.0

[grid]
t_end = 1.0
n_steps = 100
"#;

    #[test]
    fn linear_config_becomes_linear_gaussian() {
        let cfg = Config::parse(LG).unwrap();
        let ModelSpec::LinearGaussian(lg) = build_model(&cfg).unwrap() else { panic!("expected LG") };
        assert_eq!(lg.a, DMatrix::from_element(1, 1, -1.0));
        assert_eq!(lg.h, DMatrix::from_element(1, 1, 1.0));
        assert_eq!(lg.f_bar, DVector::from_element(1, 1.0));
        assert_eq!(lg.g, DMatrix::zeros(1, 1));
    }

    #[test]
    fn zero_sigma_is_rejected() {
        let cfg = Config::parse(&LG.replace("sigma = 1.0", "sigma = 0.0")).unwrap();
        assert!(matches!(build_model(&cfg), Err(ConfigError::Model(fbsde_core::Error::NonPositiveSigma(_)))));
    }

    #[test]
    fn double_well_is_scalar() {
        let text = LG.replace("drift = \"linear\"\na = -1.0", "drift = \"double_well\"");
        let cfg = Config::parse(&text).unwrap();
        let ModelSpec::Scalar(s) = build_model(&cfg).unwrap() else { panic!("expected scalar") };
        assert_eq!(s.drift, ScalarFn::DoubleWell);
        assert_eq!(s.drift.eval(2.0), -6.0);
    }

    #[test]
    fn unknown_function_name_is_reported() {
        let cfg = Config::parse(&LG.replace("h = \"linear\"", "h = \"tanh\"")).unwrap();
        assert!(matches!(
            build_model(&cfg),
            Err(ConfigError::Model(fbsde_core::Error::UnknownFunctionName(n))) if n == "tanh"
        ));
    }

    #[test]
    fn unknown_key_carries_line_context() {
        let err = Config::parse(&LG.replace("sigma = 1.0", "sigma = 1.0\nsigmaa = 2.0")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sigmaa"), "{msg}");
        assert!(msg.contains("line 6"), "{msg}");
    }

    #[test]
    fn missing_model_section_fails() {
        let err = Config::parse("[grid]\nt_end = 1.0\nn_steps = 10\n").unwrap_err();
        assert!(err.to_string().contains("model"), "{err}");
    }

    #[test]
    fn matrix_model_dimensions_are_checked() {
        let text = r#"
[model]
A = [[-1.0, 0.0], [0.0, -2.0]]
H = [[1.0], [0.0]]
G = [[1.0]]
f_bar = [1.0, 0.0]
sigma = 1.0
prior_mean = [0.0, 0.0]
prior_var = [1.0, 1.0]
[grid]
t_end = 1.0
n_steps = 10
"#;
        let cfg = Config::parse(text).unwrap();
        assert!(matches!(
            build_model(&cfg),
            Err(ConfigError::Model(fbsde_core::Error::DimensionMismatch(_)))
        ));
        let cfg = Config::parse(&text.replace("G = [[1.0]]", "G = [[1.0], [0.0]]")).unwrap();
        let ModelSpec::LinearGaussian(lg) = build_model(&cfg).unwrap() else { panic!() };
        assert_eq!(lg.state_dim(), 2);
        assert_eq!(lg.sigma0, DMatrix::identity(2, 2));
    }

    #[test]
    fn mixture_prior_defaults_to_uniform_weights() {
        let text = LG
            .replace("drift = \"linear\"\na = -1.0", "drift = \"double_well\"")
            .replace("prior_mean = 0.0", "prior_mean = [-1.0, 1.0]")
            .replace("prior_var = 1.0", "prior_var = [0.1, 0.1]");
        let ModelSpec::Scalar(s) = build_model(&Config::parse(&text).unwrap()).unwrap() else { panic!() };
        assert_eq!(s.prior.components().len(), 2);
        assert_eq!(s.prior.components()[0].weight, 0.5);
        assert_eq!(s.prior.mean(), 0.0);
    }

    #[test]
    fn hash_ignores_key_order() {
        let reordered = r#"
[grid]
n_steps = 100
t_end = 1.0

[model]
prior_var = 1.0
prior_mean = 0.0
f = "linear"
h = "linear"
sigma = 1.0
a = -1.0
drift = "linear"
"#;
        let a = Config::parse(LG).unwrap();
        let b = Config::parse(reordered).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = Config::parse(&LG.replace("n_steps = 100", "n_steps = 101")).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn serialize_round_trip() {
        let text = format!(
            "{LG}\n[estimator]\nid = \"pi_innovation\"\nparticles = 500\npi_h_source = \"kalman\"\n\
             [control]\nmode = \"certainty_equivalence\"\ncost = \"quadratic\"\nterminal_hessian = 1.0\n\
             [output]\ndir = \"out\"\ndump_ensembles = true\n"
        );
        let cfg = Config::parse(&text).unwrap();
        let again = Config::parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(build_model(&cfg).unwrap(), build_model(&again).unwrap());
    }
}
