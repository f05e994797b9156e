//! Convergence-order checks of the solver against closed-form fields.

use rkflow_core::analytic::AnalyticField;
use rkflow_core::latent::LatentState;
use rkflow_core::solver::{estimate_order, solve, Direction, TimeGrid};
use rkflow_core::tableau::registry_get;
use rkflow_core::velocity::VelocityField;

const H_LIST: [f64; 5] = [0.1, 0.05, 0.025, 0.0125, 0.00625];

fn empirical_order(name: &str) -> f64 {
    let field = AnalyticField::linear_scalar(1.0).unwrap();
    let tab = registry_get(name).unwrap();
    let z0 = LatentState::scalar(1.0);
    let est = estimate_order(&field, &tab, &z0, &H_LIST).unwrap();
    assert_eq!(est.errors.len(), 5);
    est.empirical_order
}

#[test]
fn euler_is_first_order() {
    let p = empirical_order("euler");
    assert!((p - 1.0).abs() <= 0.25, "euler order {p}");
}

#[test]
fn heun_is_second_order() {
    let p = empirical_order("heun2");
    assert!((p - 2.0).abs() <= 0.25, "heun2 order {p}");
}

#[test]
fn kutta_is_third_order() {
    let p = empirical_order("kutta3");
    assert!((p - 3.0).abs() <= 0.25, "kutta3 order {p}");
}

#[test]
fn three_eighths_is_fourth_order() {
    let p = empirical_order("three_eighths4");
    assert!((p - 4.0).abs() <= 0.3, "three_eighths4 order {p}");
}

#[test]
fn rf_solver_converges_at_first_order_despite_two_stages() {
    // its printed weights violate the order-2 quadrature condition
    let p = empirical_order("rf_solver");
    assert!((p - 1.0).abs() <= 0.25, "rf_solver order {p}");
}

#[test]
fn fireflow_midpoint_is_second_order_without_reuse() {
    let p = empirical_order("fireflow_midpoint");
    assert!((p - 2.0).abs() <= 0.25, "fireflow order {p}");
}

#[test]
fn orders_hold_on_the_gaussian_transport_field() {
    // same sweep on the rectified-flow marginal field
    let field = AnalyticField::gauss_to_gauss(0.4, 1.2).unwrap();
    let z0 = LatentState::scalar(1.0);
    for (name, order, tol) in [("euler", 1.0, 0.25), ("heun2", 2.0, 0.25), ("classic4", 4.0, 0.35)]
    {
        let tab = registry_get(name).unwrap();
        let est = estimate_order(&field, &tab, &z0, &H_LIST).unwrap();
        assert!(
            (est.empirical_order - order).abs() <= tol,
            "{name}: order {}",
            est.empirical_order
        );
    }
}

// Slope reuse drops one evaluation per step. The reused slope is O(h) away
// from the skipped evaluation, enters the second stage scaled by a21 * h and
// moves the state by O(h^3) per step, so the N-step deviation from the full
// two-stage scheme is O(h^2): it quarters when the step size halves.
#[test]
fn reuse_deviation_quarters_with_the_step_size() {
    let field = AnalyticField::logistic();
    let tab = registry_get("fireflow_midpoint").unwrap();
    let z1 = LatentState::scalar(0.82);

    let dev = |n: usize| {
        let grid = TimeGrid::uniform(n).unwrap();
        let full =
            solve(&field, &z1, &grid, Direction::Denoise, &tab, None, 1.0, false, false).unwrap();
        let reused =
            solve(&field, &z1, &grid, Direction::Denoise, &tab, None, 1.0, true, false).unwrap();
        assert_eq!(full.nfe, 2 * n as u64);
        assert_eq!(reused.nfe, n as u64 + 1);
        full.final_state.dist_l2(&reused.final_state)
    };

    let d20 = dev(20);
    let d40 = dev(40);
    let d80 = dev(80);
    let r1 = d20 / d40;
    let r2 = d40 / d80;
    assert!((3.0..=5.0).contains(&r1), "ratio {r1}");
    assert!((3.0..=5.0).contains(&r2), "ratio {r2}");
}

#[test]
fn denoise_error_against_closed_form_shrinks_with_order() {
    // fixed N: a higher-order scheme lands closer to the closed form
    let field = AnalyticField::linear_scalar(1.0).unwrap();
    let z0 = LatentState::scalar(1.0);
    let z1 = field.exact_solution(&z0, 1.0).unwrap();
    let grid = TimeGrid::uniform(16).unwrap();
    let err = |name: &str| {
        let tab = registry_get(name).unwrap();
        let res =
            solve(&field, &z1, &grid, Direction::Denoise, &tab, None, 1.0, false, false).unwrap();
        res.final_state.dist_l2(&z0)
    };
    let e1 = err("euler");
    let e2 = err("heun2");
    let e3 = err("kutta3");
    let e4 = err("classic4");
    assert!(e1 > e2 && e2 > e3 && e3 > e4, "{e1} {e2} {e3} {e4}");
}
