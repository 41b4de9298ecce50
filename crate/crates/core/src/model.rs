//! Model specifications, grids and the named-function registry.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::math::{exp, normal_cdf, sin, cos, sqrt};
use crate::quadrature::GaussHermite;

/// Uniform time grid `t_k = k T / n`, `k = 0..=n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(Error::InvalidGrid(format!("t_end must be positive, got {t_end}")));
        }
        if n_steps == 0 {
            return Err(Error::InvalidGrid("n_steps must be positive".into()));
        }
        Ok(Self { t_end, n_steps })
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
    /// Number of grid points, `n_steps + 1`.
    pub fn len(&self) -> usize {
        self.n_steps + 1
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    pub fn dt(&self) -> f64 {
        self.t_end / self.n_steps as f64
    }
    pub fn t(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.t_end
        } else {
            k as f64 * self.dt()
        }
    }
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(|k| self.t(k))
    }

    pub(crate) fn ensure_same(&self, other: &TimeGrid, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: (T={}, n={}) vs (T={}, n={})",
                self.t_end, self.n_steps, other.t_end, other.n_steps
            )))
        }
    }
}

/// Uniform spatial grid on `[x_min, x_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceGrid {
    x_min: f64,
    x_max: f64,
    n_points: usize,
}

impl SpaceGrid {
    pub fn new(x_min: f64, x_max: f64, n_points: usize) -> Result<Self> {
        if !(x_min.is_finite() && x_max.is_finite() && x_min < x_max) {
            return Err(Error::InvalidGrid(format!("need x_min < x_max, got [{x_min}, {x_max}]")));
        }
        if n_points < 3 {
            return Err(Error::InvalidGrid(format!("need at least 3 points, got {n_points}")));
        }
        Ok(Self { x_min, x_max, n_points })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn n_points(&self) -> usize {
        self.n_points
    }
    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_points - 1) as f64
    }
    pub fn x(&self, j: usize) -> f64 {
        if j + 1 == self.n_points {
            self.x_max
        } else {
            self.x_min + j as f64 * self.dx()
        }
    }
    pub fn points(&self) -> Vec<f64> {
        (0..self.n_points).map(|j| self.x(j)).collect()
    }

    /// Fails when the prior puts 1e-6 or more mass outside the grid.
    pub fn check_prior(&self, prior: &Prior) -> Result<()> {
        let mass = prior.mass_outside(self.x_min, self.x_max);
        if mass < 1e-6 {
            Ok(())
        } else {
            Err(Error::PriorMassOutsideGrid { mass })
        }
    }
}

/// Names accepted by the function registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FunctionId {
    Linear,
    Cubic,
    DoubleWell,
    Sine,
    Constant,
    IndicatorPositive,
    GaussianBump,
}

impl FunctionId {
    pub const ALL: [FunctionId; 7] = [
        FunctionId::Linear,
        FunctionId::Cubic,
        FunctionId::DoubleWell,
        FunctionId::Sine,
        FunctionId::Constant,
        FunctionId::IndicatorPositive,
        FunctionId::GaussianBump,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FunctionId::Linear => "linear",
            FunctionId::Cubic => "cubic",
            FunctionId::DoubleWell => "double_well",
            FunctionId::Sine => "sine",
            FunctionId::Constant => "constant",
            FunctionId::IndicatorPositive => "indicator_positive",
            FunctionId::GaussianBump => "gaussian_bump",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|id| id.name() == name)
            .ok_or_else(|| Error::UnknownFunctionName(name.to_string()))
    }

    /// Parameter names with defaults; `None` marks a required parameter.
    pub fn parameters(self) -> &'static [(&'static str, Option<f64>)] {
        match self {
            FunctionId::Linear => &[("a", Some(1.0)), ("b", Some(0.0))],
            FunctionId::Cubic => &[("a", Some(1.0))],
            FunctionId::DoubleWell | FunctionId::IndicatorPositive => &[],
            FunctionId::Sine => &[("amplitude", Some(1.0)), ("frequency", Some(1.0)), ("phase", Some(0.0))],
            FunctionId::Constant => &[("c", None)],
            FunctionId::GaussianBump => &[("center", Some(0.0)), ("width", Some(1.0)), ("height", Some(1.0))],
        }
    }
}

/// A registry function with resolved parameters.
///
/// - `linear`: `a x + b`
/// - `cubic`: `a x³`
/// - `double_well`: `x − x³`
/// - `sine`: `amplitude · sin(frequency · x + phase)`
/// - `constant`: `c`
/// - `indicator_positive`: `1` for `x > 0`, else `0`
/// - `gaussian_bump`: `height · exp(−(x − center)² / (2 width²))`
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarFn {
    Linear { slope: f64, intercept: f64 },
    Cubic { coef: f64 },
    DoubleWell,
    Sine { amplitude: f64, frequency: f64, phase: f64 },
    Constant { value: f64 },
    IndicatorPositive,
    GaussianBump { center: f64, width: f64, height: f64 },
}

impl ScalarFn {
    pub fn linear(slope: f64) -> Self {
        ScalarFn::Linear { slope, intercept: 0.0 }
    }
    pub fn constant(value: f64) -> Self {
        ScalarFn::Constant { value }
    }
    pub fn zero() -> Self {
        ScalarFn::Constant { value: 0.0 }
    }

    /// Resolves `name` with the given parameters against the registry.
    pub fn from_registry(name: &str, params: &[(&str, f64)]) -> Result<Self> {
        let id = FunctionId::parse(name)?;
        let spec = id.parameters();
        for (p, v) in params {
            if !spec.iter().any(|(s, _)| s == p) {
                return Err(Error::UnknownParameter { function: name.into(), param: (*p).into() });
            }
            if !v.is_finite() {
                return Err(Error::InvalidModel(format!("parameter {p} of {name} is not finite")));
            }
        }
        let get = |key: &str| -> Result<f64> {
            if let Some((_, v)) = params.iter().find(|(p, _)| *p == key) {
                return Ok(*v);
            }
            spec.iter()
                .find(|(s, _)| *s == key)
                .and_then(|(_, d)| *d)
                .ok_or_else(|| Error::MissingParameter { function: name.into(), param: key.into() })
        };
        Ok(match id {
            FunctionId::Linear => ScalarFn::Linear { slope: get("a")?, intercept: get("b")? },
            FunctionId::Cubic => ScalarFn::Cubic { coef: get("a")? },
            FunctionId::DoubleWell => ScalarFn::DoubleWell,
            FunctionId::Sine => ScalarFn::Sine {
                amplitude: get("amplitude")?,
                frequency: get("frequency")?,
                phase: get("phase")?,
            },
            FunctionId::Constant => ScalarFn::Constant { value: get("c")? },
            FunctionId::IndicatorPositive => ScalarFn::IndicatorPositive,
            FunctionId::GaussianBump => {
                let width = get("width")?;
                if width <= 0.0 {
                    return Err(Error::InvalidModel("gaussian_bump width must be positive".into()));
                }
                ScalarFn::GaussianBump { center: get("center")?, width, height: get("height")? }
            }
        })
    }

    pub fn id(&self) -> FunctionId {
        match self {
            ScalarFn::Linear { .. } => FunctionId::Linear,
            ScalarFn::Cubic { .. } => FunctionId::Cubic,
            ScalarFn::DoubleWell => FunctionId::DoubleWell,
            ScalarFn::Sine { .. } => FunctionId::Sine,
            ScalarFn::Constant { .. } => FunctionId::Constant,
            ScalarFn::IndicatorPositive => FunctionId::IndicatorPositive,
            ScalarFn::GaussianBump { .. } => FunctionId::GaussianBump,
        }
    }

    /// Resolved parameters in registry order.
    pub fn params(&self) -> Vec<(&'static str, f64)> {
        match *self {
            ScalarFn::Linear { slope, intercept } => alloc::vec![("a", slope), ("b", intercept)],
            ScalarFn::Cubic { coef } => alloc::vec![("a", coef)],
            ScalarFn::DoubleWell | ScalarFn::IndicatorPositive => Vec::new(),
            ScalarFn::Sine { amplitude, frequency, phase } => {
                alloc::vec![("amplitude", amplitude), ("frequency", frequency), ("phase", phase)]
            }
            ScalarFn::Constant { value } => alloc::vec![("c", value)],
            ScalarFn::GaussianBump { center, width, height } => {
                alloc::vec![("center", center), ("width", width), ("height", height)]
            }
        }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            ScalarFn::Linear { slope, intercept } => slope * x + intercept,
            ScalarFn::Cubic { coef } => coef * x * x * x,
            ScalarFn::DoubleWell => x - x * x * x,
            ScalarFn::Sine { amplitude, frequency, phase } => amplitude * sin(frequency * x + phase),
            ScalarFn::Constant { value } => value,
            ScalarFn::IndicatorPositive => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ScalarFn::GaussianBump { center, width, height } => {
                let u = (x - center) / width;
                height * exp(-0.5 * u * u)
            }
        }
    }

    /// Analytic derivative (zero almost everywhere for the indicator).
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            ScalarFn::Linear { slope, .. } => slope,
            ScalarFn::Cubic { coef } => 3.0 * coef * x * x,
            ScalarFn::DoubleWell => 1.0 - 3.0 * x * x,
            ScalarFn::Sine { amplitude, frequency, phase } => {
                amplitude * frequency * cos(frequency * x + phase)
            }
            ScalarFn::Constant { .. } | ScalarFn::IndicatorPositive => 0.0,
            ScalarFn::GaussianBump { center, width, .. } => {
                -(x - center) / (width * width) * self.eval(x)
            }
        }
    }

    /// True when the function is identically zero.
    pub fn is_zero(&self) -> bool {
        matches!(
            *self,
            ScalarFn::Constant { value } if value == 0.0
        ) || matches!(*self, ScalarFn::Linear { slope, intercept } if slope == 0.0 && intercept == 0.0)
            || matches!(*self, ScalarFn::Cubic { coef } if coef == 0.0)
    }
}

/// Pointwise evaluation of a registry function by name.
pub fn registry_eval(name: &str, params: &[(&str, f64)], x: f64) -> Result<f64> {
    Ok(ScalarFn::from_registry(name, params)?.eval(x))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: f64,
    pub variance: f64,
}

/// Gaussian or finite Gaussian-mixture initial law of a scalar state.
#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    components: Vec<GaussianComponent>,
}

impl Prior {
    pub fn gaussian(mean: f64, variance: f64) -> Result<Self> {
        Self::mixture(alloc::vec![GaussianComponent { weight: 1.0, mean, variance }])
    }

    /// Weights must be positive; they are normalized to sum to one.
    pub fn mixture(mut components: Vec<GaussianComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidPrior("no components".into()));
        }
        for c in &components {
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::InvalidPrior(format!("weight {} must be positive", c.weight)));
            }
            if !c.mean.is_finite() || !(c.variance >= 0.0 && c.variance.is_finite()) {
                return Err(Error::InvalidPrior(format!(
                    "component mean {} / variance {} invalid",
                    c.mean, c.variance
                )));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        for c in components.iter_mut() {
            c.weight /= total;
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    /// `(mean, variance)` when the prior is a single Gaussian.
    pub fn as_gaussian(&self) -> Option<(f64, f64)> {
        match self.components.as_slice() {
            [c] => Some((c.mean, c.variance)),
            _ => None,
        }
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.mean).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.components
            .iter()
            .map(|c| c.weight * (c.variance + (c.mean - m) * (c.mean - m)))
            .sum()
    }

    /// `μ[g]` by Gauss–Hermite quadrature per component.
    pub fn expect(&self, rule: &GaussHermite, mut g: impl FnMut(f64) -> f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * rule.expect(c.mean, c.variance, &mut g))
            .sum()
    }

    /// Draw from a component chosen by `u ∈ (0, 1]`, with standard normal `z`.
    pub fn sample(&self, u: f64, z: f64) -> f64 {
        let mut acc = 0.0;
        let last = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u <= acc || i == last {
                return c.mean + sqrt(c.variance) * z;
            }
        }
        unreachable!()
    }

    /// Probability of falling outside `[a, b]`.
    pub fn mass_outside(&self, a: f64, b: f64) -> f64 {
        self.components
            .iter()
            .map(|c| {
                if c.variance == 0.0 {
                    if c.mean < a || c.mean > b {
                        c.weight
                    } else {
                        0.0
                    }
                } else {
                    let s = sqrt(c.variance);
                    c.weight * (normal_cdf((a - c.mean) / s) + normal_cdf(-(b - c.mean) / s))
                }
            })
            .sum()
    }
}

/// Scalar nonlinear model `dX = b(X)dt + σ dB (+ g α dt)`, `dZ = h(X)dt + dW`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarModelSpec {
    pub drift: ScalarFn,
    pub sigma: f64,
    pub obs: ScalarFn,
    pub terminal: ScalarFn,
    pub prior: Prior,
    /// Additive control gain `g` (zero when uncontrolled).
    pub control_gain: f64,
}

impl ScalarModelSpec {
    pub fn new(drift: ScalarFn, sigma: f64, obs: ScalarFn, terminal: ScalarFn, prior: Prior) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::NonPositiveSigma(sigma));
        }
        Ok(Self { drift, sigma, obs, terminal, prior, control_gain: 0.0 })
    }

    pub fn with_control_gain(mut self, g: f64) -> Self {
        self.control_gain = g;
        self
    }

    pub fn with_obs(mut self, obs: ScalarFn) -> Self {
        self.obs = obs;
        self
    }

    pub fn with_terminal(mut self, terminal: ScalarFn) -> Self {
        self.terminal = terminal;
        self
    }

    /// Checks finiteness of b, h, f on the grid and prior coverage.
    pub fn check_on_grid(&self, space: &SpaceGrid) -> Result<()> {
        for x in space.points() {
            for (name, f) in [("drift", &self.drift), ("h", &self.obs), ("f", &self.terminal)] {
                if !f.eval(x).is_finite() {
                    return Err(Error::InvalidModel(format!("{name} is not finite at x={x}")));
                }
            }
        }
        space.check_prior(&self.prior)
    }
}

/// Linear-Gaussian model: `b(x) = Aᵀx + Gα`, `h(x) = Hᵀx`, `f(x) = f̄ᵀx`,
/// `X₀ ~ N(m₀, Σ₀)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianModelSpec {
    pub a: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub sigma: f64,
    pub m0: DVector<f64>,
    pub sigma0: DMatrix<f64>,
    pub f_bar: DVector<f64>,
}

impl LinearGaussianModelSpec {
    pub fn new(
        a: DMatrix<f64>,
        h: DMatrix<f64>,
        g: DMatrix<f64>,
        sigma: f64,
        m0: DVector<f64>,
        sigma0: DMatrix<f64>,
        f_bar: DVector<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        let dim = |ok: bool, what: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::DimensionMismatch(what.into()))
            }
        };
        dim(n > 0 && a.ncols() == n, "A must be square and non-empty")?;
        dim(h.nrows() == n && h.ncols() > 0, "H must be n x m")?;
        dim(g.nrows() == n && g.ncols() > 0, "G must be n x p")?;
        dim(m0.len() == n, "prior mean must have length n")?;
        dim(sigma0.nrows() == n && sigma0.ncols() == n, "prior covariance must be n x n")?;
        dim(f_bar.len() == n, "f_bar must have length n")?;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::NonPositiveSigma(sigma));
        }
        let all_finite = a.iter().chain(h.iter()).chain(g.iter()).chain(m0.iter()).chain(sigma0.iter()).chain(f_bar.iter()).all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidModel("non-finite matrix entry".into()));
        }
        let scale = crate::linalg::max_abs(&sigma0).max(1.0);
        if crate::linalg::max_abs(&(&sigma0 - sigma0.transpose())) > 1e-12 * scale {
            return Err(Error::InvalidPrior("prior covariance is not symmetric".into()));
        }
        let min_eig = sigma0.clone().symmetric_eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if min_eig < -1e-12 * scale {
            return Err(Error::InvalidPrior(format!("prior covariance has eigenvalue {min_eig}")));
        }
        Ok(Self { a, h, g, sigma, m0, sigma0, f_bar })
    }

    /// Scalar convenience constructor with control gain `g`.
    pub fn scalar(a: f64, h: f64, g: f64, sigma: f64, m0: f64, sigma0: f64, f_bar: f64) -> Result<Self> {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        Self::new(s(a), s(h), s(g), sigma, DVector::from_element(1, m0), s(sigma0), DVector::from_element(1, f_bar))
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    pub fn obs_dim(&self) -> usize {
        self.h.ncols()
    }
    pub fn control_dim(&self) -> usize {
        self.g.ncols()
    }

    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        self.a.tr_mul(x)
    }
    pub fn obs(&self, x: &DVector<f64>) -> DVector<f64> {
        self.h.tr_mul(x)
    }
    pub fn terminal(&self, x: &DVector<f64>) -> f64 {
        self.f_bar.dot(x)
    }

    /// Same model with a different diffusion amplitude.
    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        Self::new(self.a.clone(), self.h.clone(), self.g.clone(), sigma, self.m0.clone(), self.sigma0.clone(), self.f_bar.clone())
    }

    /// The equivalent scalar model (requires n = m = 1 and p = 1).
    pub fn to_scalar(&self) -> Result<ScalarModelSpec> {
        if self.state_dim() != 1 || self.obs_dim() != 1 || self.control_dim() != 1 {
            return Err(Error::DimensionMismatch(format!(
                "scalar view needs n=m=p=1, got n={}, m={}, p={}",
                self.state_dim(),
                self.obs_dim(),
                self.control_dim()
            )));
        }
        Ok(ScalarModelSpec::new(
            ScalarFn::linear(self.a[(0, 0)]),
            self.sigma,
            ScalarFn::linear(self.h[(0, 0)]),
            ScalarFn::linear(self.f_bar[0]),
            Prior::gaussian(self.m0[0], self.sigma0[(0, 0)])?,
        )?
        .with_control_gain(self.g[(0, 0)]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Scalar(ScalarModelSpec),
    LinearGaussian(LinearGaussianModelSpec),
}

impl ModelSpec {
    /// Scalar view of the model (linear-Gaussian models must be 1-D).
    pub fn to_scalar(&self) -> Result<ScalarModelSpec> {
        match self {
            ModelSpec::Scalar(s) => Ok(s.clone()),
            ModelSpec::LinearGaussian(lg) => lg.to_scalar(),
        }
    }
    pub fn state_dim(&self) -> usize {
        match self {
            ModelSpec::Scalar(_) => 1,
            ModelSpec::LinearGaussian(lg) => lg.state_dim(),
        }
    }
    pub fn obs_dim(&self) -> usize {
        match self {
            ModelSpec::Scalar(_) => 1,
            ModelSpec::LinearGaussian(lg) => lg.obs_dim(),
        }
    }
}

/// Running cost `c_t(x, α)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunningCost {
    /// `½‖α‖²`
    Quadratic,
    Zero,
}

impl RunningCost {
    #[inline]
    pub fn eval(&self, alpha: f64) -> f64 {
        match self {
            RunningCost::Quadratic => 0.5 * alpha * alpha,
            RunningCost::Zero => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TerminalCost {
    Function(ScalarFn),
    /// `½ q (x − c)²`
    Quadratic { hessian: f64, center: f64 },
}

impl TerminalCost {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            TerminalCost::Function(f) => f.eval(x),
            TerminalCost::Quadratic { hessian, center } => 0.5 * hessian * (x - center) * (x - center),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostSpec {
    pub running: RunningCost,
    pub terminal: TerminalCost,
}

impl CostSpec {
    pub fn quadratic(hessian: f64, center: f64) -> Result<Self> {
        if !(hessian >= 0.0 && hessian.is_finite()) {
            return Err(Error::InvalidModel(format!("terminal Hessian must be >= 0, got {hessian}")));
        }
        Ok(Self { running: RunningCost::Quadratic, terminal: TerminalCost::Quadratic { hessian, center } })
    }
}

pub fn describe_function(f: &ScalarFn) -> String {
    let mut s = String::from(f.id().name());
    for (k, v) in f.params() {
        s.push_str(&format!(" {k}={v}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_examples() {
        assert_eq!(registry_eval("double_well", &[], 2.0).unwrap(), -6.0);
        assert_eq!(registry_eval("constant", &[("c", 0.5)], -3.1).unwrap(), 0.5);
        assert_eq!(registry_eval("indicator_positive", &[], -0.2).unwrap(), 0.0);
        assert_eq!(registry_eval("indicator_positive", &[], 0.2).unwrap(), 1.0);
        assert!(matches!(registry_eval("tanh", &[], 0.0), Err(Error::UnknownFunctionName(_))));
        assert!(matches!(registry_eval("constant", &[], 0.0), Err(Error::MissingParameter { .. })));
        assert!(matches!(registry_eval("linear", &[("k", 1.0)], 0.0), Err(Error::UnknownParameter { .. })));
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let fns = [
            ScalarFn::Linear { slope: -1.5, intercept: 0.3 },
            ScalarFn::Cubic { coef: 0.7 },
            ScalarFn::DoubleWell,
            ScalarFn::Sine { amplitude: 2.0, frequency: 1.5, phase: 0.1 },
            ScalarFn::GaussianBump { center: 0.4, width: 0.8, height: 1.3 },
        ];
        for f in fns {
            for x in [-1.3, -0.2, 0.5, 1.1] {
                let h = 1e-6;
                let fd = (f.eval(x + h) - f.eval(x - h)) / (2.0 * h);
                assert!((fd - f.derivative(x)).abs() < 1e-7, "{f:?} at {x}");
            }
        }
    }

    #[test]
    fn sigma_must_be_positive() {
        let p = Prior::gaussian(0.0, 1.0).unwrap();
        let r = ScalarModelSpec::new(ScalarFn::DoubleWell, 0.0, ScalarFn::linear(1.0), ScalarFn::IndicatorPositive, p);
        assert!(matches!(r, Err(Error::NonPositiveSigma(_))));
    }

    #[test]
    fn prior_mass_outside_grid() {
        let p = Prior::gaussian(0.0, 1.0).unwrap();
        assert!(SpaceGrid::new(-6.0, 6.0, 11).unwrap().check_prior(&p).is_ok());
        assert!(SpaceGrid::new(-3.0, 3.0, 11).unwrap().check_prior(&p).is_err());
    }

    #[test]
    fn lg_validation() {
        let bad = LinearGaussianModelSpec::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(3, 1),
            DMatrix::zeros(2, 1),
            1.0,
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            DVector::zeros(2),
        );
        assert!(matches!(bad, Err(Error::DimensionMismatch(_))));
        let asym = LinearGaussianModelSpec::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::zeros(2, 1),
            1.0,
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
            DVector::zeros(2),
        );
        assert!(matches!(asym, Err(Error::InvalidPrior(_))));
    }

    #[test]
    fn time_grid_endpoints() {
        let g = TimeGrid::new(0.3, 7).unwrap();
        assert_eq!(g.t(0), 0.0);
        assert_eq!(g.t(7), 0.3);
        assert_eq!(g.len(), 8);
    }

    #[test]
    fn mixture_moments_and_quadrature() {
        let p = Prior::mixture(alloc::vec![
            GaussianComponent { weight: 1.0, mean: -1.0, variance: 0.25 },
            GaussianComponent { weight: 3.0, mean: 1.0, variance: 0.5 },
        ])
        .unwrap();
        let rule = GaussHermite::standard();
        assert!((p.expect(&rule, |x| x) - p.mean()).abs() < 1e-13);
        let m2 = p.expect(&rule, |x| x * x);
        assert!((m2 - p.mean() * p.mean() - p.variance()).abs() < 1e-12);
    }
}
