//! Backward-in-time PDE solvers on a uniform 1-D grid and the
//! linear-Gaussian backward ODEs.
//!
//! All grid solvers share one implicit step: `(I − dt L) y_k = w + dt c_k`
//! with `L y = b ∂x y + (σ²/2) ∂²x y`, central differences (first-order
//! upwind where the cell Péclet number `|b| dx / (σ²/2)` exceeds 2) and
//! homogeneous Neumann rows from a reflected ghost node. Reaction terms
//! `r(x) y` enter through `w = e^{r(x) dt} y_{k+1}`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result, Warning};
use crate::kalman::CovariancePath;
use crate::linalg::{expm, solve_tridiagonal};
use crate::math::exp;
use crate::model::{CostSpec, ScalarModelSpec, SpaceGrid, TimeGrid};
use crate::sde::FeedbackPolicy;

/// Space-time field `y[k][j]` with its spatial gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    space: SpaceGrid,
    time: TimeGrid,
    values: Vec<f64>,
    gradient: Vec<f64>,
    upwind_node_steps: usize,
}

fn gradient_row(y: &[f64], dx: f64, out: &mut [f64]) {
    let n = y.len();
    out[0] = (-3.0 * y[0] + 4.0 * y[1] - y[2]) / (2.0 * dx);
    out[n - 1] = (3.0 * y[n - 1] - 4.0 * y[n - 2] + y[n - 3]) / (2.0 * dx);
    for j in 1..n - 1 {
        out[j] = (y[j + 1] - y[j - 1]) / (2.0 * dx);
    }
}

impl GridFunction {
    /// Builds a field from time-major values; the gradient is recomputed.
    pub fn from_values(space: SpaceGrid, time: TimeGrid, values: Vec<f64>) -> Result<Self> {
        let j = space.n_points();
        if values.len() != j * time.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for a {}x{} grid",
                values.len(),
                time.len(),
                j
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("grid values must be finite".into()));
        }
        let mut gradient = vec![0.0; values.len()];
        let dx = space.dx();
        for k in 0..time.len() {
            gradient_row(&values[k * j..(k + 1) * j], dx, &mut gradient[k * j..(k + 1) * j]);
        }
        Ok(Self { space, time, values, gradient, upwind_node_steps: 0 })
    }

    pub fn space(&self) -> &SpaceGrid {
        &self.space
    }
    pub fn time(&self) -> &TimeGrid {
        &self.time
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn value(&self, k: usize, j: usize) -> f64 {
        self.values[k * self.space.n_points() + j]
    }
    pub fn gradient(&self, k: usize, j: usize) -> f64 {
        self.gradient[k * self.space.n_points() + j]
    }
    pub fn row(&self, k: usize) -> &[f64] {
        let j = self.space.n_points();
        &self.values[k * j..(k + 1) * j]
    }
    pub fn gradient_row(&self, k: usize) -> &[f64] {
        let j = self.space.n_points();
        &self.gradient[k * j..(k + 1) * j]
    }

    /// Node-steps at which first-order upwinding replaced central differences.
    pub fn upwind_node_steps(&self) -> usize {
        self.upwind_node_steps
    }

    pub fn warnings(&self) -> Vec<Warning> {
        if self.upwind_node_steps > 0 {
            vec![Warning::CflUpwinding { node_steps: self.upwind_node_steps }]
        } else {
            Vec::new()
        }
    }

    #[inline]
    fn locate(&self, x: f64) -> (usize, f64) {
        let n = self.space.n_points();
        let s = (x - self.space.x_min()) / self.space.dx();
        if s <= 0.0 {
            return (0, 0.0);
        }
        if s >= (n - 1) as f64 {
            return (n - 2, 1.0);
        }
        let j = s as usize;
        (j, s - j as f64)
    }

    /// Linear interpolation of `y_k` at `x`, clamped to the grid.
    #[inline]
    pub fn interpolate(&self, k: usize, x: f64) -> f64 {
        let (j, t) = self.locate(x);
        let row = self.row(k);
        row[j] + t * (row[j + 1] - row[j])
    }

    /// Linear interpolation of `∂x y_k` at `x`, clamped to the grid.
    #[inline]
    pub fn interpolate_gradient(&self, k: usize, x: f64) -> f64 {
        let (j, t) = self.locate(x);
        let row = self.gradient_row(k);
        row[j] + t * (row[j + 1] - row[j])
    }

    pub(crate) fn ensure_time(&self, grid: &TimeGrid, what: &str) -> Result<()> {
        self.time.ensure_same(grid, what)
    }
}

/// Reusable implicit step.
struct Stepper {
    space: SpaceGrid,
    diff: f64,
    dt: f64,
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
    scratch: Vec<f64>,
    /// Advection stencil per node: 0 central, ±1 upwind in the drift direction.
    stencil: Vec<i8>,
}

impl Stepper {
    fn new(space: SpaceGrid, sigma: f64, dt: f64) -> Self {
        let n = space.n_points();
        Self {
            space,
            diff: 0.5 * sigma * sigma,
            dt,
            lower: vec![0.0; n],
            diag: vec![0.0; n],
            upper: vec![0.0; n],
            scratch: Vec::with_capacity(n),
            stencil: vec![0; n],
        }
    }

    /// Central where the cell Péclet number `|b| dx / d` is at most 2,
    /// upwind elsewhere. Returns the number of upwinded nodes.
    fn choose_stencils(&mut self, drift: &[f64]) -> usize {
        let dx = self.space.dx();
        for (s, b) in self.stencil.iter_mut().zip(drift) {
            *s = if b.abs() * dx <= 2.0 * self.diff {
                0
            } else if *b > 0.0 {
                1
            } else {
                -1
            };
        }
        let n = drift.len();
        self.stencil[1..n - 1].iter().filter(|s| **s != 0).count()
    }

    /// Solves `(I − dt L) y = rhs` in place with drift `b[j]`. Returns the
    /// number of upwinded nodes.
    fn solve(&mut self, drift: &[f64], rhs: &mut [f64], step: usize) -> Result<usize> {
        let up = self.choose_stencils(drift);
        self.solve_frozen(drift, rhs, step)?;
        Ok(up)
    }

    /// As [`Stepper::solve`] with the stencils of the last `choose_stencils`.
    fn solve_frozen(&mut self, drift: &[f64], rhs: &mut [f64], step: usize) -> Result<()> {
        let n = self.space.n_points();
        let dx = self.space.dx();
        let dx2 = dx * dx;
        let d = self.diff;
        let dt = self.dt;
        let edge = 2.0 * d / dx2;
        self.lower[0] = 0.0;
        self.diag[0] = 1.0 + dt * edge;
        self.upper[0] = -dt * edge;
        self.lower[n - 1] = -dt * edge;
        self.diag[n - 1] = 1.0 + dt * edge;
        self.upper[n - 1] = 0.0;
        for j in 1..n - 1 {
            let b = drift[j];
            let (l, c, u) = match self.stencil[j] {
                0 => (d / dx2 - b / (2.0 * dx), -2.0 * d / dx2, d / dx2 + b / (2.0 * dx)),
                1 => (d / dx2, -2.0 * d / dx2 - b / dx, d / dx2 + b / dx),
                _ => (d / dx2 - b / dx, -2.0 * d / dx2 + b / dx, d / dx2),
            };
            self.lower[j] = -dt * l;
            self.diag[j] = 1.0 - dt * c;
            self.upper[j] = -dt * u;
        }
        if !solve_tridiagonal(&self.lower, &self.diag, &self.upper, rhs, &mut self.scratch) {
            return Err(Error::LinearSolveFailure { step });
        }
        if rhs.iter().any(|v| !v.is_finite()) {
            return Err(Error::LinearSolveFailure { step });
        }
        Ok(())
    }
}

/// General backward solve of `−∂t y = b_k(x) ∂x y + (σ²/2) ∂²x y + r(x) y +
/// c_k(x)`, `y_T = terminal`.
pub fn solve_backward_general(
    space: &SpaceGrid,
    time: &TimeGrid,
    sigma: f64,
    drift: &dyn Fn(usize, f64) -> f64,
    reaction: Option<&dyn Fn(f64) -> f64>,
    source: Option<&dyn Fn(usize, f64) -> f64>,
    terminal: &dyn Fn(f64) -> f64,
) -> Result<GridFunction> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::NonPositiveSigma(sigma));
    }
    let nj = space.n_points();
    let nk = time.n_steps();
    let dt = time.dt();
    let xs = space.points();
    let mut values = vec![0.0; time.len() * nj];
    for (j, x) in xs.iter().enumerate() {
        values[nk * nj + j] = terminal(*x);
    }
    let growth: Option<Vec<f64>> = reaction.map(|r| xs.iter().map(|x| exp(r(*x) * dt)).collect());
    let mut stepper = Stepper::new(*space, sigma, dt);
    let mut b = vec![0.0; nj];
    let mut rhs = vec![0.0; nj];
    let mut upwinded = 0;
    for k in (0..nk).rev() {
        let next = &values[(k + 1) * nj..(k + 2) * nj];
        for j in 0..nj {
            let mut w = next[j];
            if let Some(g) = &growth {
                w *= g[j];
            }
            if let Some(c) = source {
                w += dt * c(k, xs[j]);
            }
            rhs[j] = w;
            b[j] = drift(k, xs[j]);
        }
        upwinded += stepper.solve(&b, &mut rhs, k)?;
        values[k * nj..(k + 1) * nj].copy_from_slice(&rhs);
    }
    let mut gf = GridFunction::from_values(*space, *time, values)?;
    gf.upwind_node_steps = upwinded;
    Ok(gf)
}

/// Backward Kolmogorov equation `−∂t y = b ∂x y + (σ²/2) ∂²x y`, `y_T = f`.
pub fn solve_backward_kolmogorov(model: &ScalarModelSpec, space: &SpaceGrid, time: &TimeGrid) -> Result<GridFunction> {
    solve_backward_general(space, time, model.sigma, &|_, x| model.drift.eval(x), None, None, &|x| model.terminal.eval(x))
}

/// Feynman–Kac equation with killing, `−∂t y = L y − h² y`, `y_T = f`.
pub fn solve_feynman_kac(model: &ScalarModelSpec, space: &SpaceGrid, time: &TimeGrid) -> Result<GridFunction> {
    let h = model.obs;
    solve_backward_general(
        space,
        time,
        model.sigma,
        &|_, x| model.drift.eval(x),
        Some(&|x| {
            let v = h.eval(x);
            -v * v
        }),
        None,
        &|x| model.terminal.eval(x),
    )
}

/// Feynman–Kac equation with growth, `−∂t y = L y + h² y`, `y_T = f`: the
/// value function whose Girsanov-weighted Itô expansion against the induced
/// observation error `dZ − h(X)dt` is a martingale.
pub fn solve_feynman_kac_growth(model: &ScalarModelSpec, space: &SpaceGrid, time: &TimeGrid) -> Result<GridFunction> {
    let h = model.obs;
    solve_backward_general(
        space,
        time,
        model.sigma,
        &|_, x| model.drift.eval(x),
        Some(&|x| {
            let v = h.eval(x);
            v * v
        }),
        None,
        &|x| model.terminal.eval(x),
    )
}

/// Policy evaluation `−∂t y = L^{x,a} y + c_k(x, a_k(x))`, `y_T = terminal`,
/// with drift `b(x) + g a_k(x)`.
pub fn solve_backward_with_source(
    model: &ScalarModelSpec,
    policy: &dyn FeedbackPolicy,
    cost: &dyn Fn(usize, f64, f64) -> f64,
    terminal: &dyn Fn(f64) -> f64,
    space: &SpaceGrid,
    time: &TimeGrid,
) -> Result<GridFunction> {
    let g = model.control_gain;
    solve_backward_general(
        space,
        time,
        model.sigma,
        &|k, x| model.drift.eval(x) + g * policy.control(k, x),
        None,
        Some(&|k, x| cost(k, x, policy.control(k, x))),
        terminal,
    )
}

const HJB_TOL: f64 = 1e-8;

/// `a = −g ∂x y` at interior nodes, 0 on the reflecting boundary rows.
fn greedy_policy(grad: &[f64], g: f64, a: &mut [f64]) {
    let n = grad.len();
    for j in 1..n - 1 {
        a[j] = -g * grad[j];
    }
    a[0] = 0.0;
    a[n - 1] = 0.0;
}
const HJB_MAX_ITER: usize = 50;

/// HJB equation for drift `b(x) + g α`, running cost `½α²` and the terminal
/// cost of `cost`. Each reverse step runs policy iteration
/// `a = −g ∂x y_k` until the policy changes by less than 1e-8.
/// Returns the value field and the policy field.
///
/// The boundary rows are reflecting and carry no drift, so no control acts
/// there and the minimizing policy is 0. Charging `½α²` at those nodes with
/// the one-sided gradient feeds back into that gradient and diverges.
pub fn solve_hjb_quadratic(
    model: &ScalarModelSpec,
    cost: &CostSpec,
    space: &SpaceGrid,
    time: &TimeGrid,
) -> Result<(GridFunction, GridFunction)> {
    let nj = space.n_points();
    let nk = time.n_steps();
    let dt = time.dt();
    let dx = space.dx();
    let g = model.control_gain;
    let xs = space.points();
    let mut values = vec![0.0; time.len() * nj];
    let mut policy = vec![0.0; time.len() * nj];
    for j in 0..nj {
        values[nk * nj + j] = cost.terminal.eval(xs[j]);
    }
    let mut grad = vec![0.0; nj];
    gradient_row(&values[nk * nj..], dx, &mut grad);
    greedy_policy(&grad, g, &mut policy[nk * nj..]);
    let base: Vec<f64> = xs.iter().map(|x| model.drift.eval(*x)).collect();
    let mut stepper = Stepper::new(*space, model.sigma, dt);
    let mut a = vec![0.0; nj];
    let mut b = vec![0.0; nj];
    let mut rhs = vec![0.0; nj];
    let mut upwinded = 0;
    for k in (0..nk).rev() {
        let next_start = (k + 1) * nj;
        gradient_row(&values[next_start..next_start + nj], dx, &mut grad);
        greedy_policy(&grad, g, &mut a);
        let mut converged = false;
        let mut change = f64::INFINITY;
        // Stencils are fixed from the initial policy so the iteration sees
        // one operator; switching inside the loop can cycle.
        for j in 0..nj {
            b[j] = base[j] + g * a[j];
        }
        let up = stepper.choose_stencils(&b);
        for _ in 0..HJB_MAX_ITER {
            for j in 0..nj {
                b[j] = base[j] + g * a[j];
                rhs[j] = values[next_start + j] + dt * cost.running.eval(a[j]);
            }
            stepper.solve_frozen(&b, &mut rhs, k)?;
            gradient_row(&rhs, dx, &mut grad);
            let prev = core::mem::replace(&mut a, vec![0.0; nj]);
            greedy_policy(&grad, g, &mut a);
            change = prev.iter().zip(&a).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            values[k * nj..(k + 1) * nj].copy_from_slice(&rhs);
            if change < HJB_TOL {
                upwinded += up;
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::PolicyIterationDiverged { step: k, change });
        }
        policy[k * nj..(k + 1) * nj].copy_from_slice(&a);
    }
    let mut value = GridFunction::from_values(*space, *time, values)?;
    value.upwind_node_steps = upwinded;
    let policy = GridFunction::from_values(*space, *time, policy)?;
    Ok((value, policy))
}

/// Backward vector `ȳ_k` on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardVector {
    pub time: TimeGrid,
    pub values: Vec<DVector<f64>>,
}

impl BackwardVector {
    pub fn at(&self, k: usize) -> &DVector<f64> {
        &self.values[k]
    }
}

/// `−dȳ/dt = A ȳ`, `ȳ_T = f̄`, as `ȳ_k = exp((T − t_k) A) f̄`.
pub fn linear_backward_vector(a: &DMatrix<f64>, f_bar: &DVector<f64>, time: &TimeGrid) -> Result<BackwardVector> {
    check_square(a, f_bar)?;
    let nk = time.n_steps();
    let mut values = Vec::with_capacity(time.len());
    for k in 0..=nk {
        if k == nk {
            values.push(f_bar.clone());
        } else {
            let tau = time.t_end() - time.t(k);
            values.push(expm(&(a * tau)) * f_bar);
        }
    }
    Ok(BackwardVector { time: *time, values })
}

/// Same equation by classical RK4 in reverse time.
pub fn linear_backward_vector_rk4(a: &DMatrix<f64>, f_bar: &DVector<f64>, time: &TimeGrid) -> Result<BackwardVector> {
    check_square(a, f_bar)?;
    let nk = time.n_steps();
    let dt = time.dt();
    let step = crate::linalg::rk4_linear_propagator(a, a, a, dt);
    let mut values = vec![f_bar.clone(); time.len()];
    for k in (0..nk).rev() {
        values[k] = &step * &values[k + 1];
    }
    Ok(BackwardVector { time: *time, values })
}

/// Closed-loop backward equation `−dȳ/dt = (A − H Hᵀ Σ_t) ȳ`, `ȳ_T = f̄`,
/// integrated with the transposed RK4 propagator of the closed-loop filter
/// mean; also returns `ū_k = −Hᵀ Σ_k ȳ_k`.
pub fn linear_backward_closed_loop(
    a: &DMatrix<f64>,
    h: &DMatrix<f64>,
    cov: &CovariancePath,
    f_bar: &DVector<f64>,
    time: &TimeGrid,
) -> Result<(BackwardVector, Vec<DVector<f64>>)> {
    check_square(a, f_bar)?;
    time.ensure_same(cov.grid(), "covariance path vs time grid")?;
    if cov.a() != a || cov.h() != h {
        return Err(Error::InvalidArgument("covariance path was computed for different A or H".into()));
    }
    let nk = time.n_steps();
    let mut values = vec![f_bar.clone(); time.len()];
    for k in (0..nk).rev() {
        let phi = cov.closed_loop_propagator(k);
        values[k] = phi.tr_mul(&values[k + 1]);
    }
    let controls = (0..=nk).map(|k| -(h.tr_mul(&(cov.sigma_at(k) * &values[k])))).collect();
    Ok((BackwardVector { time: *time, values }, controls))
}

fn check_square(a: &DMatrix<f64>, f_bar: &DVector<f64>) -> Result<()> {
    if a.nrows() != a.ncols() || a.nrows() != f_bar.len() {
        return Err(Error::DimensionMismatch(format!(
            "A is {}x{}, f_bar has length {}",
            a.nrows(),
            a.ncols(),
            f_bar.len()
        )));
    }
    Ok(())
}
