//! Zero level set and optimal controller of the saddle example.

use koopman_core::cases::{self, example_b_controller};
use koopman_core::path_integral::PathIntegralSettings;
use koopman_core::pipeline::{control_curve, ControlConfig};

#[test]
fn controller_values_and_odd_symmetry() {
    let case = cases::example_b();
    let xs = [-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5];
    let out = control_curve(&case, &xs, &ControlConfig::default(), &PathIntegralSettings::default()).unwrap();
    assert!(out.assumption.is_clean());
    let row = |x: f64| out.rows.iter().find(|r| r.x1 == x).unwrap();
    assert!(row(0.0).gamma.unwrap().abs() < 1e-7);
    assert_eq!(row(0.0).u_analytic, Some(0.0));
    let expected = 2.0 * (2f64.sqrt() - 1.0);
    assert!((row(1.0).gamma.unwrap() - expected).abs() < 1e-4, "γ(1) = {:?}", row(1.0).gamma);
    assert!((example_b_controller(1.0) - (1.0 - 2f64.sqrt())).abs() < 1e-15);
    for x in [0.5, 1.0, 1.5] {
        let (up, dn) = (row(x).u.unwrap(), row(-x).u.unwrap());
        assert!((up + dn).abs() < 1e-6, "u({x}) = {up}, u(-{x}) = {dn}");
    }
}

#[test]
fn level_set_of_a_coordinate_is_zero() {
    let xs = [-1.0, 0.3, 2.0];
    let pts = cases::zero_level_curve(&|_x1, x2| Ok(x2), &xs, cases::GAMMA_BRACKET, 1e-12);
    for p in pts {
        assert!(p.gamma.unwrap().abs() < 1e-12);
    }
}
