//! Small dense linear algebra helpers over `C64`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::C64;

/// Solves the 2×2 system `a · u = b` by Cramer's rule.
pub fn solve2(a: &[[C64; 2]; 2], b: &[C64; 2]) -> Option<[C64; 2]> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    if det.norm() == 0.0 || !det.is_finite() {
        return None;
    }
    Some([
        (b[0] * a[1][1] - a[0][1] * b[1]) / det,
        (a[0][0] * b[1] - b[0] * a[1][0]) / det,
    ])
}

/// Singular values of a 2×2 complex matrix, largest first.
pub fn singular_values2(a: &[[C64; 2]; 2]) -> [f64; 2] {
    // eigenvalues of the Hermitian matrix a^H a
    let h00 = a[0][0].norm_sqr() + a[1][0].norm_sqr();
    let h11 = a[0][1].norm_sqr() + a[1][1].norm_sqr();
    let h01 = a[0][0].conj() * a[0][1] + a[1][0].conj() * a[1][1];
    let mean = 0.5 * (h00 + h11);
    let diff = 0.5 * (h00 - h11);
    let rad = (diff * diff + h01.norm_sqr()).sqrt();
    let hi = (mean + rad).max(0.0).sqrt();
    // det(a^H a) = |det a|^2 gives the small one without cancellation
    let det = (a[0][0] * a[1][1] - a[0][1] * a[1][0]).norm();
    let lo = if hi > 0.0 { det / hi } else { 0.0 };
    [hi, lo]
}

/// 2-norm condition number of a 2×2 complex matrix.
pub fn cond2(a: &[[C64; 2]; 2]) -> f64 {
    let [hi, lo] = singular_values2(a);
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Singular values of a dense complex matrix, largest first.
pub fn singular_values(m: &DMatrix<C64>) -> Vec<f64> {
    let mut sv: Vec<f64> = m
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

/// Number of singular values above `rel_cut · σ_max`.
pub fn numerical_rank(sv: &[f64], rel_cut: f64) -> usize {
    let top = sv.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_cut * top).count()
}

/// Least-squares solution of `m · u ≈ rhs` through the SVD. Fails when the
/// condition number exceeds `cond_cap`.
pub fn least_squares(m: &DMatrix<C64>, rhs: &DVector<C64>, cond_cap: f64) -> Result<DVector<C64>> {
    let svd = m.clone().svd(true, true);
    let sv = &svd.singular_values;
    let hi = sv.iter().copied().fold(0.0, f64::max);
    let lo = sv.iter().copied().fold(f64::INFINITY, f64::min);
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(cond <= cond_cap) {
        return Err(Error::IllConditioned {
            what: "least-squares system".into(),
            cond,
        });
    }
    svd.solve(rhs, 0.0).map_err(|e| Error::IllConditioned {
        what: e.to_string(),
        cond,
    })
}
