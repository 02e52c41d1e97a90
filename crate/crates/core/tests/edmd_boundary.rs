//! The fitted boundary on Example A against the analytic eigenfunctions.

use koopman_core::cases;
use koopman_core::dynamics::{decompose, IntegratorSettings};
use koopman_core::edmd::{sphere_points, EpsEstimator};
use koopman_core::pipeline::{fitted_boundary, select_pair, EdmdConfig};
use koopman_core::C64;

#[test]
fn boundary_error_estimate_covers_the_true_sphere_error() {
    let case = cases::example_a();
    let dec = decompose(&case.field).unwrap();
    let cfg = EdmdConfig::default();
    let integ = IntegratorSettings::default();
    let (snaps, model) = cfg.fit(&case.field, &integ).unwrap();
    for lambda in [2.5, -1.0] {
        let pair = select_pair(dec.a(), C64::new(lambda, 0.0)).unwrap();
        let fb = fitted_boundary(&case.field, &snaps, &model, &pair, &cfg, &integ).unwrap();
        let truth = case.analytic_for(pair.lambda).unwrap();
        let c = truth.gauge_to(&pair);
        let true_err = sphere_points(2, cfg.radius(), 4000, 99)
            .iter()
            .map(|x| (fb.matched.phi_hat(x) - c * truth.eval(x)).norm())
            .fold(0.0, f64::max);
        assert!(true_err <= fb.eps_s, "λ = {lambda}: sphere error {true_err} above estimate {}", fb.eps_s);
        assert!((fb.matched.lambda_fit - pair.lambda).norm() < 1e-3);
    }
}

#[test]
fn fixed_estimator_is_passed_through() {
    let case = cases::example_a();
    let dec = decompose(&case.field).unwrap();
    let cfg = EdmdConfig { n_traj: 200, max_degree: 6, eps_estimator: EpsEstimator::Fixed { value: 0.25 }, ..Default::default() };
    let integ = IntegratorSettings::default();
    let (snaps, model) = cfg.fit(&case.field, &integ).unwrap();
    let pair = select_pair(dec.a(), C64::new(2.5, 0.0)).unwrap();
    let fb = fitted_boundary(&case.field, &snaps, &model, &pair, &cfg, &integ).unwrap();
    assert_eq!(fb.eps_s, 0.25);
    assert_eq!(fb.boundary.eps_s(), Some(0.25));
    assert_eq!(fb.boundary.radius(), 3.0);
}
