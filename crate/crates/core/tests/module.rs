//! The Baker–Akhiezer module: x–z derivative identities and ranks.

use theta_ring::bamodule::{
    freeness_report, mc_dimension, mc_dimension_report, psi, residues,
    second_derivative_discrepancy, xz_derivative_residual, BAParams,
};
use theta_ring::opcalc::{evaluate, EvalContext};
use theta_ring::{Point, RiemannMatrix, C64};

fn params() -> BAParams {
    let i = |v: f64| C64::new(0.0, v);
    let omega = RiemannMatrix::new([[i(1.0), i(0.3)], [i(0.3), i(1.2)]]).unwrap();
    let c = [C64::new(0.21, 0.13), C64::new(-0.17, 0.08)];
    let cp = [C64::new(0.31, -0.05), C64::new(0.12, 0.27)];
    BAParams::new(omega, c, cp, 1e-14, 1e-6).unwrap()
}

fn samples() -> Vec<(Point, [C64; 2])> {
    vec![
        (
            [C64::new(0.05, 0.11), C64::new(-0.13, 0.02)],
            [C64::new(0.03, -0.02), C64::new(-0.05, 0.04)],
        ),
        (
            [C64::new(-0.21, 0.3), C64::new(0.17, -0.12)],
            [C64::new(-0.06, 0.01), C64::new(0.02, 0.07)],
        ),
        (
            [C64::new(0.33, -0.07), C64::new(0.04, 0.25)],
            [C64::new(0.0, 0.0), C64::new(0.08, -0.03)],
        ),
    ]
}

#[test]
fn x_derivative_equals_z_derivative_plus_log_gradient() {
    let p = params();
    for (z, x) in samples() {
        for n in 1..=3 {
            for a in residues(n) {
                for j in 0..2 {
                    let r = xz_derivative_residual(&p, n, a, j, z, x).unwrap();
                    assert!(r < 1e-10, "n = {n}, a = {a:?}, j = {j}: {r:.2e}");
                }
            }
        }
    }
}

#[test]
fn psi_x_derivative_matches_finite_difference() {
    let p = params();
    let (z, x) = samples()[0];
    let h = 1e-5;
    for j in 0..2 {
        let mut xp = x;
        let mut xm = x;
        xp[j] += h;
        xm[j] -= h;
        let fd = (psi(&p, z, xp).unwrap() - psi(&p, z, xm).unwrap()) / (2.0 * h);
        let f = theta_ring::bamodule::ZFrame::new(&p.omega, z, p.eps).unwrap();
        let e = theta_ring::bamodule::psi_expr(&p, &f).diff(j);
        let exact = evaluate(&e, &EvalContext::new(p.omega.clone(), p.eps), x).unwrap();
        assert!((fd - exact).norm() < 1e-6 * exact.norm());
    }
}

#[test]
fn second_x_derivative_identity() {
    let p = params();
    for (z, x) in samples() {
        for (k, j) in [(0, 0), (0, 1), (1, 1)] {
            let d = second_derivative_discrepancy(&p, k, j, z, x).unwrap();
            assert!(d.worst() < 1e-10, "{k}{j}: {:.2e}", d.worst());
        }
    }
}

#[test]
fn level_k_part_has_dimension_k_squared() {
    let p = params();
    for k in 1..=3 {
        let count = 2 * (1..=k).map(|n| n * n).sum::<usize>();
        assert_eq!(mc_dimension(&p, k, count, 40 + k as u64).unwrap(), k * k);
        let r = mc_dimension_report(&p, k, count, 40 + k as u64).unwrap();
        assert!(r.gap_ratio() < 1e-8);
    }
}

#[test]
fn module_is_free_of_rank_two() {
    let p = params();
    for k in 1..=3 {
        let r = freeness_report(&p, k, 2 * k * k + 4, 50 + k as u64).unwrap();
        assert!(r.passes(), "k = {k}: {r:?}");
    }
}
