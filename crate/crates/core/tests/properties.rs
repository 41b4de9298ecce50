//! Invariants over randomized models, seeds and points.

use fbsde_core::control::lqg_cost_for_gains;
use fbsde_core::kalman::{lq_control_riccati, lq_policy_value, riccati_filter};
use fbsde_core::math::normalized_weights;
use fbsde_core::sde::{simulate_girsanov_ensemble, simulate_truth_and_obs};
use fbsde_core::{LinearGaussianModelSpec, ModelSpec, Prior, ScalarFn, ScalarModelSpec, TimeGrid};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn double_well(sigma: f64) -> ScalarModelSpec {
    ScalarModelSpec::new(
        ScalarFn::from_registry("double_well", &[]).unwrap(),
        sigma,
        ScalarFn::linear(1.0),
        ScalarFn::from_registry("indicator_positive", &[]).unwrap(),
        Prior::gaussian(0.0, 1.0).unwrap(),
    )
    .unwrap()
}

fn small_matrix(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.5..1.5f64, n * n).prop_map(move |v| DMatrix::from_vec(n, n, v))
}

fn spd(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    small_matrix(n).prop_map(move |b| &b * b.transpose() + DMatrix::identity(n, n) * 0.1)
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn girsanov_weights_are_finite_and_normalize(seed in any::<u64>(), sigma in 0.2..1.5f64) {
        let model = double_well(sigma);
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let obs = simulate_truth_and_obs(&ModelSpec::Scalar(model.clone()), &grid, seed).unwrap();
        let ens = simulate_girsanov_ensemble(&model, &grid, &obs, 64, seed ^ 1).unwrap();
        let logw = ens.log_weights_dtilde().unwrap();
        prop_assert!(logw.iter().all(|w| w.is_finite()));
        for k in [0, 25, 50] {
            let (w, ess) = normalized_weights(ens.log_dtilde_at(k).unwrap());
            prop_assert!(w.iter().all(|&wi| wi > 0.0 && wi.is_finite()));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(ess > 0.0 && ess <= 64.0 + 1e-9);
        }
    }

    #[test]
    fn ensembles_are_deterministic_in_the_seed(seed in any::<u64>()) {
        let model = double_well(0.5);
        let grid = TimeGrid::new(0.5, 20).unwrap();
        let spec = ModelSpec::Scalar(model.clone());
        let obs = simulate_truth_and_obs(&spec, &grid, seed).unwrap();
        let again = simulate_truth_and_obs(&spec, &grid, seed).unwrap();
        prop_assert_eq!(obs.z_path(), again.z_path());
        let a = simulate_girsanov_ensemble(&model, &grid, &obs, 16, seed).unwrap();
        let b = simulate_girsanov_ensemble(&model, &grid, &obs, 16, seed).unwrap();
        prop_assert_eq!(a.states(), b.states());
        prop_assert_eq!(a.log_weights_dtilde(), b.log_weights_dtilde());
        let c = simulate_girsanov_ensemble(&model, &grid, &obs, 16, seed.wrapping_add(1)).unwrap();
        prop_assert_ne!(a.states(), c.states());
    }

    #[test]
    fn linear_gaussian_callbacks_match_matrices(
        a in -2.0..2.0f64,
        h in -2.0..2.0f64,
        f in -2.0..2.0f64,
        xs in prop::collection::vec(-10.0..10.0f64, 100),
    ) {
        let lg = LinearGaussianModelSpec::scalar(a, h, 1.0, 0.7, 0.0, 1.0, f).unwrap();
        let s = lg.to_scalar().unwrap();
        for x in xs {
            let v = DVector::from_element(1, x);
            prop_assert!((s.drift.eval(x) - lg.drift(&v)[0]).abs() <= 1e-12 * (1.0 + x.abs()));
            prop_assert!((s.obs.eval(x) - lg.obs(&v)[0]).abs() <= 1e-12 * (1.0 + x.abs()));
            prop_assert!((s.terminal.eval(x) - lg.terminal(&v)).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn filter_covariance_stays_positive_semidefinite(
        a in small_matrix(2),
        h in small_matrix(2),
        s0 in spd(2),
        sigma in 0.2..2.0f64,
    ) {
        let grid = TimeGrid::new(2.0, 100).unwrap();
        let cov = riccati_filter(&a, &h, sigma, &s0, &grid).unwrap();
        for s in cov.covariances() {
            prop_assert!((s - s.transpose()).abs().max() < 1e-12);
            prop_assert!(min_eigenvalue(s) >= -1e-12, "min eigenvalue {}", min_eigenvalue(s));
        }
    }

    #[test]
    fn perturbed_linear_laws_cost_no_less(
        a in -1.0..1.0f64,
        h in 0.3..2.0f64,
        qf in 0.2..3.0f64,
        delta in -0.5..0.5f64,
        tilt in -0.5..0.5f64,
    ) {
        let lg = LinearGaussianModelSpec::scalar(a, h, 1.0, 0.8, 0.7, 0.5, 1.0).unwrap();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let qf = DMatrix::from_element(1, 1, qf);
        let cov = riccati_filter(&lg.a, &lg.h, lg.sigma, &lg.sigma0, &grid).unwrap();
        let opt = lq_control_riccati(&lg.a, &lg.g, &qf, &grid).unwrap();
        let optimal_gain = |k: usize, th: f64| lg.g.tr_mul(&opt.interpolate(k, th));
        let base = lq_policy_value(&lg.a, &lg.g, &qf, &grid, &optimal_gain).unwrap();
        let perturbed = |k: usize, th: f64| {
            let t = grid.t(k) + th * grid.dt();
            optimal_gain(k, th).add_scalar(delta + tilt * t)
        };
        let pert = lq_policy_value(&lg.a, &lg.g, &qf, &grid, &perturbed).unwrap();
        let j_opt = lqg_cost_for_gains(&lg, &base, &cov);
        let j_pert = lqg_cost_for_gains(&lg, &pert, &cov);
        prop_assert!(j_pert >= j_opt - 1e-9, "optimal {j_opt}, perturbed {j_pert}");
    }
}
