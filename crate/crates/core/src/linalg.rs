//! Dense helpers: matrix exponential, symmetrization, tridiagonal solves,
//! Hermite interpolation.

use alloc::vec::Vec;

use nalgebra::DMatrix;

/// Padé(13) coefficients of the scaling-and-squaring exponential.
const PADE13: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371_920_351_148_152;

fn one_norm(a: &DMatrix<f64>) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with a degree-13 Padé
/// approximant.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm needs a square matrix");
    let norm = one_norm(a);
    let s = if norm > THETA13 {
        libm::ceil(libm::log2(norm / THETA13)) as i32
    } else {
        0
    };
    let scaled = a * libm::pow(2.0, -s as f64);
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = &scaled * &scaled;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = &PADE13;
    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &id * b[1];
    let u = &scaled * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &id * b[0];
    let p = &v + &u;
    let q = &v - &u;
    let mut r = q
        .lu()
        .solve(&p)
        .expect("Padé denominator is nonsingular for scaled arguments");
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetrize and clip negative eigenvalues above `-tol` to zero. Returns
/// `None` when an eigenvalue is below `-tol`.
pub fn clip_psd(m: &DMatrix<f64>, tol: f64) -> Option<DMatrix<f64>> {
    let s = symmetrize(m);
    if s.nrows() == 1 {
        let v = s[(0, 0)];
        return if v < -tol {
            None
        } else {
            Some(DMatrix::from_element(1, 1, v.max(0.0)))
        };
    }
    let eig = s.clone().symmetric_eigen();
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min >= 0.0 {
        return Some(s);
    }
    if min < -tol {
        return None;
    }
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        *v = v.max(0.0);
    }
    let q = &eig.eigenvectors;
    Some(symmetrize(&(q * DMatrix::from_diagonal(&vals) * q.transpose())))
}

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| f64::max(acc, v.abs()))
}

/// Cubic Hermite interpolation between `(y0, d0)` at 0 and `(y1, d1)` at `h`,
/// evaluated at `theta * h`.
pub fn hermite(
    y0: &DMatrix<f64>,
    d0: &DMatrix<f64>,
    y1: &DMatrix<f64>,
    d1: &DMatrix<f64>,
    h: f64,
    theta: f64,
) -> DMatrix<f64> {
    let t = theta;
    let h00 = 2.0 * t * t * t - 3.0 * t * t + 1.0;
    let h10 = t * t * t - 2.0 * t * t + t;
    let h01 = -2.0 * t * t * t + 3.0 * t * t;
    let h11 = t * t * t - t * t;
    y0 * h00 + d0 * (h10 * h) + y1 * h01 + d1 * (h11 * h)
}

/// Solves a tridiagonal system in place (Thomas algorithm). `lower[0]` and
/// `upper[n-1]` are ignored. Returns `false` on a vanishing pivot.
pub fn solve_tridiagonal(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    rhs: &mut [f64],
    scratch: &mut Vec<f64>,
) -> bool {
    let n = diag.len();
    scratch.clear();
    scratch.resize(n, 0.0);
    let mut beta = diag[0];
    if beta.abs() < 1e-300 || !beta.is_finite() {
        return false;
    }
    rhs[0] /= beta;
    for i in 1..n {
        scratch[i] = upper[i - 1] / beta;
        beta = diag[i] - lower[i] * scratch[i];
        if beta.abs() < 1e-300 || !beta.is_finite() {
            return false;
        }
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i + 1] * rhs[i + 1];
    }
    true
}

/// Classical RK4 step for a linear matrix ODE `dY/dt = F(t) Y` given the
/// three coefficient matrices at the start, midpoint and end of the step.
pub fn rk4_linear_propagator(
    f_start: &DMatrix<f64>,
    f_mid: &DMatrix<f64>,
    f_end: &DMatrix<f64>,
    h: f64,
) -> DMatrix<f64> {
    let n = f_start.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let k1 = f_start.clone();
    let k2 = f_mid * (&id + &k1 * (0.5 * h));
    let k3 = f_mid * (&id + &k2 * (0.5 * h));
    let k4 = f_end * (&id + &k3 * h);
    id + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}
