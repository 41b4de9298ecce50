//! Kalman–Bucy filter, filter Riccati equation and LQ control Riccati
//! equation for `dX = (AᵀX + Gα)dt + σ dB`, `dZ = HᵀX dt + dW`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{clip_psd, expm, hermite, max_abs, rk4_linear_propagator, symmetrize};
use crate::model::TimeGrid;
use crate::sde::ObservationRecord;

const BLOWUP: f64 = 1e8;
/// Target `dt · rate` per RK4 substep.
const SUBSTEP_SCALE: f64 = 0.1;

fn norm_inf(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows()).map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

fn substeps(dt: f64, rate: f64) -> usize {
    let s = libm::ceil(dt * rate / SUBSTEP_SCALE);
    if s.is_finite() && s >= 1.0 {
        (s as usize).min(1_000_000)
    } else {
        1
    }
}

/// `AᵀΣ + ΣA + σ²I − Σ H Hᵀ Σ`.
pub fn riccati_rhs(a: &DMatrix<f64>, hht: &DMatrix<f64>, sigma: f64, s: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    a.tr_mul(s) + s * a + DMatrix::<f64>::identity(n, n) * (sigma * sigma) - s * hht * s
}

/// Filter covariance path `Σ_k` with its time derivative at grid points.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariancePath {
    grid: TimeGrid,
    a: DMatrix<f64>,
    h: DMatrix<f64>,
    sigma: f64,
    cov: Vec<DMatrix<f64>>,
    rate: Vec<DMatrix<f64>>,
}

impl CovariancePath {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }
    pub fn noise(&self) -> f64 {
        self.sigma
    }
    pub fn sigma_at(&self, k: usize) -> &DMatrix<f64> {
        &self.cov[k]
    }
    pub fn rate_at(&self, k: usize) -> &DMatrix<f64> {
        &self.rate[k]
    }
    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.cov
    }

    /// Cubic Hermite value at `t_k + θ dt`.
    pub fn interpolate(&self, k: usize, theta: f64) -> DMatrix<f64> {
        if theta == 0.0 {
            return self.cov[k].clone();
        }
        if theta == 1.0 {
            return self.cov[k + 1].clone();
        }
        hermite(&self.cov[k], &self.rate[k], &self.cov[k + 1], &self.rate[k + 1], self.grid.dt(), theta)
    }

    /// RK4 propagator of `dm/dt = (Aᵀ − Σ(t) H Hᵀ) m` over `[t_k, t_{k+1}]`.
    pub fn closed_loop_propagator(&self, k: usize) -> DMatrix<f64> {
        let dt = self.grid.dt();
        let hht = &self.h * self.h.transpose();
        let at = self.a.transpose();
        let f = |theta: f64| &at - self.interpolate(k, theta) * &hht;
        let f0 = f(0.0);
        let rate = norm_inf(&f0).max(norm_inf(&f(1.0)));
        let m = substeps(dt, rate);
        let hs = dt / m as f64;
        let mut phi = DMatrix::<f64>::identity(at.nrows(), at.nrows());
        for s in 0..m {
            let t0 = s as f64 / m as f64;
            let t1 = (s + 1) as f64 / m as f64;
            let step = rk4_linear_propagator(&f(t0), &f(0.5 * (t0 + t1)), &f(t1), hs);
            phi = step * phi;
        }
        phi
    }
}

/// Integrates the filter Riccati equation by RK4 with automatic substeps,
/// symmetrizing and clipping tiny negative eigenvalues after every step.
pub fn riccati_filter(
    a: &DMatrix<f64>,
    h: &DMatrix<f64>,
    sigma: f64,
    sigma0: &DMatrix<f64>,
    grid: &TimeGrid,
) -> Result<CovariancePath> {
    let n = a.nrows();
    if a.ncols() != n || h.nrows() != n || sigma0.nrows() != n || sigma0.ncols() != n {
        return Err(Error::DimensionMismatch("riccati_filter: A, H, Sigma0 shapes".into()));
    }
    let hht = h * h.transpose();
    let dt = grid.dt();
    let mut s = symmetrize(sigma0);
    let mut cov = Vec::with_capacity(grid.len());
    let mut rate = Vec::with_capacity(grid.len());
    cov.push(s.clone());
    rate.push(riccati_rhs(a, &hht, sigma, &s));
    for k in 0..grid.n_steps() {
        let lam = 2.0 * norm_inf(a) + 2.0 * norm_inf(&hht) * norm_inf(&s) + sigma * sigma;
        let m = substeps(dt, lam);
        let hs = dt / m as f64;
        for _ in 0..m {
            let k1 = riccati_rhs(a, &hht, sigma, &s);
            let k2 = riccati_rhs(a, &hht, sigma, &(&s + &k1 * (0.5 * hs)));
            let k3 = riccati_rhs(a, &hht, sigma, &(&s + &k2 * (0.5 * hs)));
            let k4 = riccati_rhs(a, &hht, sigma, &(&s + &k3 * hs));
            s = &s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (hs / 6.0);
        }
        if !(max_abs(&s) <= BLOWUP) {
            return Err(Error::RiccatiBlowup { step: k + 1 });
        }
        s = clip_psd(&s, 1e-10).ok_or(Error::RiccatiBlowup { step: k + 1 })?;
        rate.push(riccati_rhs(a, &hht, sigma, &s));
        cov.push(s.clone());
    }
    Ok(CovariancePath { grid: *grid, a: a.clone(), h: h.clone(), sigma, cov, rate })
}

/// Filter mean and covariance paths with the realized innovation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    grid: TimeGrid,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    innovation: Vec<f64>,
    pi_h: Vec<f64>,
    obs_dim: usize,
}

impl GaussianState {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn mean(&self, k: usize) -> &DVector<f64> {
        &self.means[k]
    }
    pub fn cov(&self, k: usize) -> &DMatrix<f64> {
        &self.covariances[k]
    }
    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }
    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }
    /// Cumulative innovation `I_k` (time-major, `m` channels).
    pub fn innovation_path(&self) -> &[f64] {
        &self.innovation
    }
    /// Innovation increments of the first channel.
    pub fn innovation_increments(&self) -> Vec<f64> {
        let m = self.obs_dim;
        (0..self.grid.n_steps()).map(|k| self.innovation[(k + 1) * m] - self.innovation[k * m]).collect()
    }
    /// `π_k[h] = Hᵀ m_k` (time-major, `m` channels).
    pub fn pi_h_path(&self) -> &[f64] {
        &self.pi_h
    }
    pub fn mean_scalar(&self, k: usize) -> f64 {
        self.means[k][0]
    }
    pub fn var_scalar(&self, k: usize) -> f64 {
        self.covariances[k][(0, 0)]
    }
}

fn check_filter_inputs(
    a: &DMatrix<f64>,
    h: &DMatrix<f64>,
    cov: &CovariancePath,
    m0: &DVector<f64>,
    obs: &ObservationRecord,
) -> Result<()> {
    cov.grid().ensure_same(obs.grid(), "covariance path vs observation record")?;
    if cov.a() != a || cov.h() != h {
        return Err(Error::InvalidArgument("covariance path was computed for different A or H".into()));
    }
    if m0.len() != a.nrows() || h.ncols() != obs.obs_dim() {
        return Err(Error::DimensionMismatch(format!(
            "m0 has length {}, H is {}x{}, record has {} channels",
            m0.len(),
            h.nrows(),
            h.ncols(),
            obs.obs_dim()
        )));
    }
    Ok(())
}

/// Kalman–Bucy mean in innovation form:
/// `m_{k+1} = e^{Aᵀdt}(m_k + Σ_k H dI_k)`, `dI_k = dZ_k − Hᵀm_k dt`.
pub fn kalman_bucy_mean(
    a: &DMatrix<f64>,
    h: &DMatrix<f64>,
    cov: &CovariancePath,
    m0: &DVector<f64>,
    obs: &ObservationRecord,
) -> Result<GaussianState> {
    check_filter_inputs(a, h, cov, m0, obs)?;
    let dt = obs.grid().dt();
    let e = expm(&(a.transpose() * dt));
    run_filter(h, cov, m0, obs, |k, m, di, _dz| &e * (m + cov.sigma_at(k) * (h * di)))
}

/// Kalman–Bucy mean in closed-loop form:
/// `m_{k+1} = Φ_k (m_k + Σ_k H dZ_k)` with `Φ_k` the RK4 propagator of
/// `Aᵀ − Σ(t) H Hᵀ`. Exact discrete dual of [`crate::pde::linear_backward_closed_loop`].
pub fn kalman_bucy_mean_closed_loop(
    a: &DMatrix<f64>,
    h: &DMatrix<f64>,
    cov: &CovariancePath,
    m0: &DVector<f64>,
    obs: &ObservationRecord,
) -> Result<GaussianState> {
    check_filter_inputs(a, h, cov, m0, obs)?;
    run_filter(h, cov, m0, obs, |k, m, _di, dz| cov.closed_loop_propagator(k) * (m + cov.sigma_at(k) * (h * dz)))
}

fn run_filter(
    h: &DMatrix<f64>,
    cov: &CovariancePath,
    m0: &DVector<f64>,
    obs: &ObservationRecord,
    step: impl Fn(usize, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64>,
) -> Result<GaussianState> {
    let grid = *obs.grid();
    let dt = grid.dt();
    let mo = obs.obs_dim();
    let mut means = Vec::with_capacity(grid.len());
    let mut innovation = vec![0.0; grid.len() * mo];
    let mut pi_h = vec![0.0; grid.len() * mo];
    let mut m = m0.clone();
    for k in 0..grid.n_steps() {
        let hm = h.tr_mul(&m);
        let dz = DVector::from_column_slice(obs.dz(k));
        let di = &dz - &hm * dt;
        for c in 0..mo {
            pi_h[k * mo + c] = hm[c];
            innovation[(k + 1) * mo + c] = innovation[k * mo + c] + di[c];
        }
        let next = step(k, &m, &di, &dz);
        means.push(m);
        m = next;
    }
    let hm = h.tr_mul(&m);
    let nk = grid.n_steps();
    for c in 0..mo {
        pi_h[nk * mo + c] = hm[c];
    }
    means.push(m);
    Ok(GaussianState {
        grid,
        means,
        covariances: cov.covariances().to_vec(),
        innovation,
        pi_h,
        obs_dim: mo,
    })
}

/// One-step Kalman–Bucy update with a known control input, for closed-loop
/// runs: `m_{k+1} = e^{Aᵀdt}(m_k + Σ_k H dI_k + G α_k dt)`.
#[derive(Debug, Clone)]
pub struct KalmanBucyStepper {
    transition: DMatrix<f64>,
    h: DMatrix<f64>,
    g: DMatrix<f64>,
    dt: f64,
}

impl KalmanBucyStepper {
    pub fn new(a: &DMatrix<f64>, h: &DMatrix<f64>, g: &DMatrix<f64>, dt: f64) -> Self {
        Self { transition: expm(&(a.transpose() * dt)), h: h.clone(), g: g.clone(), dt }
    }

    /// Returns the next mean and the innovation increment used.
    pub fn step(
        &self,
        m: &DVector<f64>,
        sigma_k: &DMatrix<f64>,
        dz: &DVector<f64>,
        alpha: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        let di = dz - self.h.tr_mul(m) * self.dt;
        let next = &self.transition * (m + sigma_k * (&self.h * &di) + &self.g * alpha * self.dt);
        (next, di)
    }
}

/// Backward LQ solution `P_k`, gains `K_k = Gᵀ P_k` and the noise offset
/// `ρ_k = ½ ∫_{t_k}^T tr P ds` (value `½xᵀP_k x + σ² ρ_k`).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlRiccati {
    pub grid: TimeGrid,
    pub p: Vec<DMatrix<f64>>,
    pub rate: Vec<DMatrix<f64>>,
    pub gain: Vec<DMatrix<f64>>,
    pub noise_offset: Vec<f64>,
}

impl ControlRiccati {
    /// `½ xᵀ P_k x + σ² ρ_k`.
    pub fn value(&self, k: usize, x: &DVector<f64>, sigma: f64) -> f64 {
        0.5 * x.dot(&(&self.p[k] * x)) + sigma * sigma * self.noise_offset[k]
    }
    pub fn gain_scalar(&self, k: usize) -> f64 {
        self.gain[k][(0, 0)]
    }
    /// Cubic Hermite value of `P` at `t_k + θ dt`.
    pub fn interpolate(&self, k: usize, theta: f64) -> DMatrix<f64> {
        if theta == 0.0 {
            return self.p[k].clone();
        }
        if theta == 1.0 {
            return self.p[k + 1].clone();
        }
        // `rate` stores dP/dt.
        hermite(&self.p[k], &self.rate[k], &self.p[k + 1], &self.rate[k + 1], self.grid.dt(), theta)
    }
}

/// Reverse-time RK4 for `−dP/dt = F(t, P)` with the offset `½ tr P`.
fn integrate_backward(
    grid: &TimeGrid,
    terminal: &DMatrix<f64>,
    g: &DMatrix<f64>,
    rhs: &dyn Fn(usize, f64, &DMatrix<f64>) -> DMatrix<f64>,
    stiffness: &dyn Fn(&DMatrix<f64>) -> f64,
) -> Result<ControlRiccati> {
    let nk = grid.n_steps();
    let dt = grid.dt();
    let mut p = vec![terminal.clone(); grid.len()];
    let mut rho = vec![0.0; grid.len()];
    let mut cur = terminal.clone();
    let mut r = 0.0;
    for k in (0..nk).rev() {
        let m = substeps(dt, stiffness(&cur));
        let hs = dt / m as f64;
        for s in 0..m {
            // Reverse time: θ runs from 1 (t_{k+1}) down to 0 (t_k).
            let th0 = 1.0 - s as f64 / m as f64;
            let th1 = 1.0 - (s + 1) as f64 / m as f64;
            let thm = 0.5 * (th0 + th1);
            let k1 = rhs(k, th0, &cur);
            let k2 = rhs(k, thm, &(&cur + &k1 * (0.5 * hs)));
            let k3 = rhs(k, thm, &(&cur + &k2 * (0.5 * hs)));
            let k4 = rhs(k, th1, &(&cur + &k3 * hs));
            let tr = |x: &DMatrix<f64>| 0.5 * x.trace();
            r += hs / 6.0
                * (tr(&cur) + 2.0 * tr(&(&cur + &k1 * (0.5 * hs))) + 2.0 * tr(&(&cur + &k2 * (0.5 * hs))) + tr(&(&cur + &k3 * hs)));
            cur = symmetrize(&(&cur + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (hs / 6.0)));
        }
        if !(max_abs(&cur) <= BLOWUP) {
            return Err(Error::RiccatiBlowup { step: k });
        }
        p[k] = cur.clone();
        rho[k] = r;
    }
    let rate = (0..grid.len())
        .map(|k| {
            let th = if k == nk { 1.0 } else { 0.0 };
            -rhs(k.min(nk - 1), th, &p[k])
        })
        .collect();
    let gain = p.iter().map(|pk| g.tr_mul(pk)).collect();
    Ok(ControlRiccati { grid: *grid, p, rate, gain, noise_offset: rho })
}

/// LQ control Riccati equation for drift `Aᵀx + Gα`, cost `½‖α‖²` and
/// terminal cost `½ xᵀ Q_f x`: `−dP/dt = AP + PAᵀ − P G Gᵀ P`, `P_T = Q_f`.
pub fn lq_control_riccati(a: &DMatrix<f64>, g: &DMatrix<f64>, qf: &DMatrix<f64>, grid: &TimeGrid) -> Result<ControlRiccati> {
    let n = a.nrows();
    if a.ncols() != n || g.nrows() != n || qf.nrows() != n || qf.ncols() != n {
        return Err(Error::DimensionMismatch("lq_control_riccati: A, G, Q_f shapes".into()));
    }
    if clip_psd(qf, 1e-12).is_none() {
        return Err(Error::InvalidArgument("terminal Hessian must be PSD".into()));
    }
    let ggt = g * g.transpose();
    let rhs = |_: usize, _: f64, p: &DMatrix<f64>| a * p + p * a.transpose() - p * &ggt * p;
    let stiff = |p: &DMatrix<f64>| 2.0 * norm_inf(a) + 2.0 * norm_inf(&ggt) * norm_inf(p);
    integrate_backward(grid, qf, g, &rhs, &stiff)
}

/// Value Hessian of a fixed linear law `α = −K(t) x`:
/// `−dP/dt = (A − KᵀGᵀ)P + P(A − KᵀGᵀ)ᵀ + KᵀK`, `P_T = Q_f`. `gain(k, θ)`
/// returns `K` at `t_k + θ dt`.
pub fn lq_policy_value(
    a: &DMatrix<f64>,
    g: &DMatrix<f64>,
    qf: &DMatrix<f64>,
    grid: &TimeGrid,
    gain: &dyn Fn(usize, f64) -> DMatrix<f64>,
) -> Result<ControlRiccati> {
    let n = a.nrows();
    if a.ncols() != n || g.nrows() != n || qf.nrows() != n || qf.ncols() != n {
        return Err(Error::DimensionMismatch("lq_policy_value: A, G, Q_f shapes".into()));
    }
    let rhs = |k: usize, th: f64, p: &DMatrix<f64>| {
        let kk = gain(k, th);
        let ac = a - kk.tr_mul(&g.transpose());
        &ac * p + p * ac.transpose() + kk.tr_mul(&kk)
    };
    let stiff = |_: &DMatrix<f64>| 2.0 * norm_inf(a) + 2.0 * norm_inf(&(g * g.transpose()));
    integrate_backward(grid, qf, g, &rhs, &stiff)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn stationary_and_pure_diffusion_covariances() {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let c = riccati_filter(&s(0.0), &s(1.0), 1.0, &s(1.0), &g).unwrap();
        assert!(c.covariances().iter().all(|m| (m[(0, 0)] - 1.0).abs() < 1e-14));
        let c = riccati_filter(&s(0.0), &s(0.0), 0.5, &s(1.0), &g).unwrap();
        for k in 0..=100 {
            assert!((c.sigma_at(k)[(0, 0)] - (1.0 + 0.25 * g.t(k))).abs() < 1e-13);
        }
    }

    #[test]
    fn riccati_scalar_closed_form() {
        // Σ' = −2Σ + 1 − Σ²: Σ(t) = r + 2√2 / (c e^{2√2 t} − 1) with r = √2 − 1.
        let g = TimeGrid::new(1.0, 1000).unwrap();
        let c = riccati_filter(&s(-1.0), &s(1.0), 1.0, &s(1.0), &g).unwrap();
        let r = libm::sqrt(2.0) - 1.0;
        let q = 2.0 * libm::sqrt(2.0);
        let c0 = (q / (1.0 - r) + 1.0) * 1.0;
        let exact = |t: f64| r + q / (c0 * libm::exp(q * t) - 1.0);
        for k in [0, 10, 500, 1000] {
            assert!((c.sigma_at(k)[(0, 0)] - exact(g.t(k))).abs() < 1e-10, "k={k}");
        }
    }

    #[test]
    fn control_riccati_scalar_closed_form() {
        // −P' = 2aP − g²P², P_T = q with a=−1, g=1: P(t) = 2 / ((2/q + 1) e^{2(T−t)} − 1).
        let g = TimeGrid::new(1.0, 1000).unwrap();
        let r = lq_control_riccati(&s(-1.0), &s(1.0), &s(1.0), &g).unwrap();
        let exact = |t: f64| 2.0 / (3.0 * libm::exp(2.0 * (1.0 - t)) - 1.0);
        for k in [0, 250, 999, 1000] {
            assert!((r.p[k][(0, 0)] - exact(g.t(k))).abs() < 1e-11);
        }
        // ρ_0 = ½∫P = ½ [ln(3 − e^{−2T}) − ln 2]... checked against quadrature.
        let quad: f64 = (0..1000).map(|k| 0.5 * (exact(g.t(k)) + exact(g.t(k + 1))) * 1e-3).sum::<f64>() * 0.5;
        assert!((r.noise_offset[0] - quad).abs() < 1e-6);
    }

    #[test]
    fn policy_value_with_riccati_gain_reproduces_riccati() {
        let g = TimeGrid::new(1.0, 200).unwrap();
        let a = s(-1.0);
        let gm = s(1.0);
        let r = lq_control_riccati(&a, &gm, &s(2.0), &g).unwrap();
        let pv = lq_policy_value(&a, &gm, &s(2.0), &g, &|k, th| gm.tr_mul(&r.interpolate(k, th))).unwrap();
        for k in 0..=200 {
            let d = (pv.p[k][(0, 0)] - r.p[k][(0, 0)]).abs();
            assert!(d < 1e-8, "k={k} diff={d}");
        }
    }

    #[test]
    fn zero_gain_policy_value_is_lyapunov() {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let pv = lq_policy_value(&s(0.0), &s(1.0), &s(1.5), &g, &|_, _| s(0.0)).unwrap();
        assert!(pv.p.iter().all(|p| (p[(0, 0)] - 1.5).abs() < 1e-14));
    }
}
