//! Baker–Akhiezer functions `ψ`, `ψ_{c'}` and the theta-quotient families
//! spanning the module, as exact expressions in `x` at a fixed `z`.

use nalgebra::DMatrix;
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::avgeom::{lattice_distance, random_cell_point};
use crate::error::{Error, Result};
use crate::jet::ThetaJet;
use crate::linalg::{numerical_rank, singular_values};
use crate::opcalc::{CoeffExpr, EvalContext, Evaluator, ThetaNode};
use crate::theta::{theta_scale, DEFAULT_DIVISOR_FLOOR};
use crate::{Characteristic, MultiIndex, Point, RiemannMatrix, C64};

/// Relative singular-value cut for numerical ranks.
pub const RANK_CUT: f64 = 1e-8;

/// Sample points `z` must satisfy `|θ(z)| > SAMPLE_FLOOR · scale`.
pub const SAMPLE_FLOOR: f64 = 0.05;

/// Largest `k` accepted by the module-dimension routines.
pub const MAX_LEVEL: usize = 6;

const ZERO: C64 = C64::new(0.0, 0.0);

fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

/// Period matrix with the shift `c` and the second-basis shift `c'`.
#[derive(Clone, Debug)]
pub struct BAParams {
    pub omega: RiemannMatrix,
    pub c: Point,
    pub c_prime: Point,
    pub eps: f64,
}

impl BAParams {
    /// Checks that `c`, `c'` are off the lattice and that `θ(c')`,
    /// `θ(c + c')` clear `floor` relative to the local series scale.
    pub fn new(
        omega: RiemannMatrix,
        c: Point,
        c_prime: Point,
        eps: f64,
        floor: f64,
    ) -> Result<Self> {
        let origin = [ZERO; 2];
        if lattice_distance(&c, &origin, &omega) <= 1e-8 {
            return Err(Error::Degenerate("c is a lattice point".into()));
        }
        if lattice_distance(&c_prime, &origin, &omega) <= 1e-8 {
            return Err(Error::Degenerate("c' is a lattice point".into()));
        }
        let p = BAParams {
            omega,
            c,
            c_prime,
            eps,
        };
        for (what, w) in [("theta(c')", c_prime), ("theta(c + c')", add(c, c_prime))] {
            let jet = ThetaJet::new(&p.omega, &w, 0, eps)?;
            let value = jet.value().norm();
            if value <= floor * jet.scale() {
                return Err(Error::DivisorHit(format!("{what} = {value:.3e}")));
            }
        }
        Ok(p)
    }

    pub fn context(&self) -> EvalContext {
        EvalContext::new(self.omega.clone(), self.eps)
    }

    /// The same period matrix and `c` with another second shift.
    pub fn with_c_prime(&self, c_prime: Point, floor: f64) -> Result<Self> {
        BAParams::new(self.omega.clone(), self.c, c_prime, self.eps, floor)
    }
}

/// Theta data at a fixed `z` off the divisor.
#[derive(Clone, Debug)]
pub struct ZFrame {
    pub z: Point,
    jet: ThetaJet,
}

impl ZFrame {
    pub fn new(omega: &RiemannMatrix, z: Point, eps: f64) -> Result<Self> {
        let jet = ThetaJet::new(omega, &z, 4, eps)?;
        let floor = DEFAULT_DIVISOR_FLOOR * jet.scale();
        if !(jet.value().norm() > floor) {
            return Err(Error::OnDivisor {
                value: jet.value().norm(),
                floor,
            });
        }
        Ok(ZFrame { z, jet })
    }

    pub fn theta(&self) -> C64 {
        self.jet.value()
    }

    pub fn d(&self, coords: &[usize]) -> C64 {
        self.jet.partial(coords)
    }

    /// `∂^coords log θ(z)`.
    pub fn log_d(&self, coords: &[usize]) -> C64 {
        self.jet
            .log_deriv(MultiIndex::from_coordinates(coords), 0.0)
            .expect("frame is off the divisor")
    }

    pub fn scale(&self) -> f64 {
        self.jet.scale()
    }
}

/// `θ^{(coords)}(offset + x)`.
pub fn theta_at(offset: Point, coords: &[usize]) -> CoeffExpr {
    CoeffExpr::theta_shifted(offset, MultiIndex::from_coordinates(coords))
}

/// `exp(−Σ x_k ∂_{z_k} log θ(z))`.
pub fn exp_factor(f: &ZFrame) -> CoeffExpr {
    CoeffExpr::exp_lin([-f.log_d(&[0]), -f.log_d(&[1])], ZERO)
}

/// `θ(z + c + x) / θ(z)`.
pub fn psi_quotient(p: &BAParams, f: &ZFrame) -> CoeffExpr {
    theta_at(add(f.z, p.c), &[]).scale(f.theta().inv())
}

/// `ψ(z, x)` as a function of `x`.
pub fn psi_expr(p: &BAParams, f: &ZFrame) -> CoeffExpr {
    psi_quotient(p, f).mul(&exp_factor(f))
}

/// `θ(z + c + c' + x) θ(z − c') / θ(z)^2`.
pub fn psi_cprime_quotient(p: &BAParams, f: &ZFrame) -> Result<CoeffExpr> {
    let minus = ThetaJet::new(&p.omega, &sub(f.z, p.c_prime), 0, p.eps)?.value();
    let t = f.theta();
    Ok(theta_at(add(add(f.z, p.c), p.c_prime), &[]).scale(minus / (t * t)))
}

/// `ψ_{c'}(z, x)` as a function of `x`.
pub fn psi_cprime_expr(p: &BAParams, f: &ZFrame) -> Result<CoeffExpr> {
    Ok(psi_cprime_quotient(p, f)?.mul(&exp_factor(f)))
}

/// `∂_{z_j} ψ(z, x)`.
pub fn dz_psi_expr(p: &BAParams, f: &ZFrame, j: usize) -> CoeffExpr {
    let t = f.theta();
    let w = add(f.z, p.c);
    let dq = theta_at(w, &[j])
        .scale(t.inv())
        .sub(&theta_at(w, &[]).scale(f.d(&[j]) / (t * t)));
    dq.mul(&exp_factor(f))
        .sub(&log_hessian_row(f, j).mul(&psi_expr(p, f)))
}

/// `∂_{z_j} ψ_{c'}(z, x)`.
pub fn dz_psi_cprime_expr(p: &BAParams, f: &ZFrame, j: usize) -> Result<CoeffExpr> {
    let minus = ThetaJet::new(&p.omega, &sub(f.z, p.c_prime), 1, p.eps)?;
    let (m, mj) = (minus.value(), minus.partial(&[j]));
    let t = f.theta();
    let w = add(add(f.z, p.c), p.c_prime);
    let dq = theta_at(w, &[j])
        .scale(m / (t * t))
        .add(&theta_at(w, &[]).scale(mj / (t * t) - 2.0 * m * f.d(&[j]) / (t * t * t)));
    Ok(dq
        .mul(&exp_factor(f))
        .sub(&log_hessian_row(f, j).mul(&psi_cprime_expr(p, f)?)))
}

/// `Σ_k x_k ∂_{z_k}∂_{z_j} log θ(z)`, the `z_j`-derivative of the exponent.
fn log_hessian_row(f: &ZFrame, j: usize) -> CoeffExpr {
    let x1 = CoeffExpr::var(0).scale(f.log_d(&[0, j]));
    let x2 = CoeffExpr::var(1).scale(f.log_d(&[1, j]));
    x1.add(&x2)
}

/// Numerator `θ[a/n, 0](n z + c + x, n Ω)` of the level-`n` family, with
/// `extra` derivatives in the first argument.
fn family_numerator(p: &BAParams, f: &ZFrame, n: u32, a: [i64; 2], extra: &[usize]) -> CoeffExpr {
    let nn = C64::new(n as f64, 0.0);
    let one = C64::new(1.0, 0.0);
    CoeffExpr::theta(ThetaNode {
        ch: Characteristic::section(a, n as i64),
        scale: n,
        offset: [nn * f.z[0] + p.c[0], nn * f.z[1] + p.c[1]],
        lin: [[one, ZERO], [ZERO, one]],
        deriv: MultiIndex::from_coordinates(extra),
    })
}

/// Element `a` of the level-`n` spanning family,
/// `θ[a/n, 0](n z + c + x, n Ω) / θ(z)^n · exp(−Σ x_k ∂_{z_k} log θ(z))`.
pub fn family_expr(p: &BAParams, f: &ZFrame, n: u32, a: [i64; 2]) -> CoeffExpr {
    family_numerator(p, f, n, a, &[])
        .scale(f.theta().powu(n).inv())
        .mul(&exp_factor(f))
}

/// `(1/n) ∂_{z_j}(θ[a/n,0](nz + c + x, nΩ) / θ(z)^n) · exp(…)`.
pub fn family_dz_expr(p: &BAParams, f: &ZFrame, n: u32, a: [i64; 2], j: usize) -> CoeffExpr {
    let t = f.theta();
    let tn = t.powu(n);
    let quotient_dz = family_numerator(p, f, n, a, &[j])
        .scale(tn.inv())
        .sub(&family_numerator(p, f, n, a, &[]).scale(f.d(&[j]) / (tn * t)));
    quotient_dz.mul(&exp_factor(f))
}

/// Residues `a ∈ Z^2 / n Z^2` in lexicographic order.
pub fn residues(n: u32) -> Vec<[i64; 2]> {
    let n = n as i64;
    (0..n)
        .flat_map(|a1| (0..n).map(move |a2| [a1, a2]))
        .collect()
}

/// `∂_{z_k}∂_{z_j}(θ(z + c + x)/θ(z)) · E + ∂_{z_k}∂_{z_j} log θ(z) · ψ`.
pub fn second_derivative_rhs(p: &BAParams, f: &ZFrame, k: usize, j: usize) -> CoeffExpr {
    let t = f.theta();
    let w = add(f.z, p.c);
    let (tk, tj, tkj) = (f.d(&[k]), f.d(&[j]), f.d(&[k, j]));
    let big = |c: &[usize]| theta_at(w, c);
    let q_kj = big(&[k, j])
        .scale(t.inv())
        .sub(&big(&[j]).scale(tk / (t * t)))
        .sub(&big(&[k]).scale(tj / (t * t)))
        .add(&big(&[]).scale(2.0 * tk * tj / (t * t * t) - tkj / (t * t)));
    q_kj.mul(&exp_factor(f))
        .add(&psi_expr(p, f).scale(f.log_d(&[k, j])))
}

/// A measured discrepancy together with the magnitude it is compared with.
///
/// Merging keeps the largest difference, the largest magnitude and the
/// largest per-item ratio, so `worst()` never hides a small-scale failure
/// behind a large-scale sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub diff: f64,
    pub scale: f64,
    pub worst: f64,
}

impl Discrepancy {
    pub fn between(a: C64, b: C64) -> Self {
        let diff = (a - b).norm();
        let scale = a.norm().max(b.norm());
        let worst = if scale > 0.0 { diff / scale } else { diff };
        Discrepancy { diff, scale, worst }
    }

    pub fn merge(self, other: Discrepancy) -> Self {
        Discrepancy {
            diff: self.diff.max(other.diff),
            scale: self.scale.max(other.scale),
            worst: self.worst.max(other.worst),
        }
    }

    /// Pooled ratio `max diff / max scale`, or `diff` itself when the scale
    /// vanishes.
    pub fn relative(&self) -> f64 {
        if self.scale > 0.0 {
            self.diff / self.scale
        } else {
            self.diff
        }
    }

    /// Largest ratio of a single comparison.
    pub fn worst(&self) -> f64 {
        self.worst
    }
}

impl std::iter::FromIterator<Discrepancy> for Discrepancy {
    fn from_iter<I: IntoIterator<Item = Discrepancy>>(iter: I) -> Self {
        iter.into_iter()
            .fold(Discrepancy::default(), Discrepancy::merge)
    }
}

fn eval_at(p: &BAParams, e: &CoeffExpr, x: [C64; 2]) -> Result<C64> {
    let ctx = p.context();
    Evaluator::new(&ctx, x).eval(e)
}

/// `ψ(z, x)`.
pub fn psi(p: &BAParams, z: Point, x: [C64; 2]) -> Result<C64> {
    let f = ZFrame::new(&p.omega, z, p.eps)?;
    eval_at(p, &psi_expr(p, &f), x)
}

/// `ψ_{c'}(z, x)`.
pub fn psi_cprime(p: &BAParams, z: Point, x: [C64; 2]) -> Result<C64> {
    let f = ZFrame::new(&p.omega, z, p.eps)?;
    eval_at(p, &psi_cprime_expr(p, &f)?, x)
}

/// The `k^2` level-`k` family values at `(z, x)`, residues in lexicographic
/// order.
pub fn mc_basis_values(p: &BAParams, k: usize, z: Point, x: [C64; 2]) -> Result<Vec<C64>> {
    check_level(k)?;
    let f = ZFrame::new(&p.omega, z, p.eps)?;
    let ctx = p.context();
    let mut ev = Evaluator::new(&ctx, x);
    residues(k as u32)
        .into_iter()
        .map(|a| ev.eval(&family_expr(p, &f, k as u32, a)))
        .collect()
}

fn check_level(k: usize) -> Result<()> {
    if k == 0 || k > MAX_LEVEL {
        return Err(Error::InvalidInput(format!(
            "level {k} outside 1..={MAX_LEVEL}"
        )));
    }
    Ok(())
}

/// `∂_{x_j}` of the level-`n` family element against `(1/n) ∂_{z_j}` of its
/// theta quotient times the exponential factor.
pub fn xz_derivative_discrepancy(
    p: &BAParams,
    n: u32,
    a: [i64; 2],
    j: usize,
    z: Point,
    x: [C64; 2],
) -> Result<Discrepancy> {
    if n == 0 || j > 1 {
        return Err(Error::InvalidInput(format!("level {n}, direction {j}")));
    }
    let f = ZFrame::new(&p.omega, z, p.eps)?;
    let ctx = p.context();
    let mut ev = Evaluator::new(&ctx, x);
    let lhs = ev.eval(&family_expr(p, &f, n, a).diff(j))?;
    let rhs = ev.eval(&family_dz_expr(p, &f, n, a, j))?;
    Ok(Discrepancy::between(lhs, rhs))
}

/// Absolute residual of the x/z derivative identity for one family element.
pub fn xz_derivative_residual(
    p: &BAParams,
    n: u32,
    a: [i64; 2],
    j: usize,
    z: Point,
    x: [C64; 2],
) -> Result<f64> {
    Ok(xz_derivative_discrepancy(p, n, a, j, z, x)?.diff)
}

/// `∂_{x_k}∂_{x_j} ψ` against the theta-quotient expression.
pub fn second_derivative_discrepancy(
    p: &BAParams,
    k: usize,
    j: usize,
    z: Point,
    x: [C64; 2],
) -> Result<Discrepancy> {
    let f = ZFrame::new(&p.omega, z, p.eps)?;
    let ctx = p.context();
    let mut ev = Evaluator::new(&ctx, x);
    let lhs = ev.eval(&psi_expr(p, &f).diff(k).diff(j))?;
    let rhs = ev.eval(&second_derivative_rhs(p, &f, k, j))?;
    Ok(Discrepancy::between(lhs, rhs))
}

/// `x` uniform in the polydisc `|x_j| ≤ radius`.
pub fn sample_x<R: Rng>(rng: &mut R, radius: f64) -> [C64; 2] {
    std::array::from_fn(|_| {
        let r = radius * rng.gen::<f64>().sqrt();
        let phi = rng.gen::<f64>() * std::f64::consts::TAU;
        Complex::from_polar(r, phi)
    })
}

/// Fundamental-cell point with `|θ(z)|` above `SAMPLE_FLOOR` of its scale.
pub fn sample_z<R: Rng>(rng: &mut R, omega: &RiemannMatrix, eps: f64) -> Result<Point> {
    for _ in 0..10_000 {
        let z = random_cell_point(rng, omega);
        let jet = ThetaJet::new(omega, &z, 0, eps)?;
        if jet.value().norm() > SAMPLE_FLOOR * theta_scale(omega, [z[0].im, z[1].im]) {
            return Ok(z);
        }
    }
    Err(Error::NoConvergence { starts: 10_000 })
}

/// Singular-value summary of a sampled function matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub rank: usize,
    pub expected: usize,
    pub singular_values: Vec<f64>,
}

impl RankReport {
    pub fn from_matrix(m: &DMatrix<C64>, expected: usize) -> Self {
        let sv = singular_values(m);
        RankReport {
            rank: numerical_rank(&sv, RANK_CUT),
            expected,
            singular_values: sv,
        }
    }

    /// `σ_{expected+1} / σ_expected`, zero if the former is absent.
    pub fn gap_ratio(&self) -> f64 {
        let e = self.expected;
        match (
            e.checked_sub(1).and_then(|i| self.singular_values.get(i)),
            self.singular_values.get(e),
        ) {
            (Some(lo), Some(next)) => next / lo,
            (Some(_), None) => 0.0,
            _ => f64::INFINITY,
        }
    }
}

/// Rows are sample points, columns functions; each row and then each column
/// is scaled to unit length so the rank does not see the size of `θ(z)^{-k}`.
fn normalized(rows: Vec<Vec<C64>>) -> DMatrix<C64> {
    let (r, c) = (rows.len(), rows.first().map_or(0, |v| v.len()));
    let mut m = DMatrix::from_fn(r, c, |i, j| rows[i][j]);
    for mut row in m.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= C64::new(n, 0.0);
        }
    }
    for mut col in m.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= C64::new(n, 0.0);
        }
    }
    m
}

fn sample_rows<F>(
    p: &BAParams,
    count: usize,
    seed: u64,
    row: F,
) -> Result<(Vec<Vec<C64>>, [C64; 2])>
where
    F: Fn(&ZFrame, &mut Evaluator) -> Result<Vec<C64>> + Sync,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = sample_x(&mut rng, 0.1);
    let zs = (0..count)
        .map(|_| sample_z(&mut rng, &p.omega, p.eps))
        .collect::<Result<Vec<_>>>()?;
    let ctx = p.context();
    let rows = zs
        .par_iter()
        .map(|z| {
            let f = ZFrame::new(&p.omega, *z, p.eps)?;
            let mut ev = Evaluator::new(&ctx, x);
            row(&f, &mut ev)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, x))
}

/// Rank of the union of the level-`n` families, `n ≤ k`, sampled at
/// `sample_count` points `z` and one fixed `x`. Every member has poles of
/// order at most `k` on the divisor, so the rank is the dimension of the
/// level-`k` part of the module.
pub fn mc_dimension_report(
    p: &BAParams,
    k: usize,
    sample_count: usize,
    seed: u64,
) -> Result<RankReport> {
    check_level(k)?;
    let (rows, _) = sample_rows(p, sample_count, seed, |f, ev| {
        let mut out = Vec::new();
        for n in 1..=k as u32 {
            for a in residues(n) {
                out.push(ev.eval(&family_expr(p, f, n, a))?);
            }
        }
        Ok(out)
    })?;
    Ok(RankReport::from_matrix(&normalized(rows), k * k))
}

pub fn mc_dimension(p: &BAParams, k: usize, sample_count: usize, seed: u64) -> Result<usize> {
    Ok(mc_dimension_report(p, k, sample_count, seed)?.rank)
}

/// Ranks for the generation of the level-`k` part by `ψ` and `ψ_{c'}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreenessReport {
    pub level: usize,
    /// `{∂^α ψ : |α| < k} ∪ {∂^α ψ_{c'} : |α| < k − 1}`.
    pub derivatives: RankReport,
    /// The same functions together with the level-`k` family.
    pub joint: RankReport,
}

impl FreenessReport {
    pub fn passes(&self) -> bool {
        self.derivatives.rank == self.derivatives.expected && self.joint.rank == self.joint.expected
    }
}

/// Samples the `x`-derivatives of `ψ` up to order `k − 1` and of `ψ_{c'}`
/// up to order `k − 2`; there are `k^2` of them, and a free rank-2 module
/// needs them independent and spanning the level-`k` family.
pub fn freeness_report(
    p: &BAParams,
    k: usize,
    sample_count: usize,
    seed: u64,
) -> Result<FreenessReport> {
    check_level(k)?;
    let (rows, _) = sample_rows(p, sample_count, seed, |f, ev| {
        let psi = psi_expr(p, f);
        let psi_c = psi_cprime_expr(p, f)?;
        let mut out = Vec::new();
        for alpha in MultiIndex::up_to(k - 1) {
            out.push(ev.eval(&psi.diff_multi(alpha))?);
        }
        if k >= 2 {
            for alpha in MultiIndex::up_to(k - 2) {
                out.push(ev.eval(&psi_c.diff_multi(alpha))?);
            }
        }
        for a in residues(k as u32) {
            out.push(ev.eval(&family_expr(p, f, k as u32, a))?);
        }
        Ok(out)
    })?;
    let kk = k * k;
    let own: Vec<Vec<C64>> = rows.iter().map(|r| r[..kk].to_vec()).collect();
    Ok(FreenessReport {
        level: k,
        derivatives: RankReport::from_matrix(&normalized(own), kk),
        joint: RankReport::from_matrix(&normalized(rows), kk),
    })
}

/// Multiplier of `ψ`, `ψ_{c'}` and every family element under
/// `z ↦ z + Ω m + n`: `exp(−2πi ⟨m, c⟩)`.
pub fn shift_multiplier(c: &Point, m: [i64; 2]) -> C64 {
    let s = c[0] * m[0] as f64 + c[1] * m[1] as f64;
    (C64::new(0.0, -std::f64::consts::TAU) * s).exp()
}

/// `z + Ω m + n`.
pub fn lattice_shift(omega: &RiemannMatrix, z: Point, m: [i64; 2], n: [i64; 2]) -> Point {
    let om = omega.apply([m[0] as f64, m[1] as f64]);
    [z[0] + om[0] + n[0] as f64, z[1] + om[1] + n[1] as f64]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> BAParams {
        let i = |v: f64| C64::new(0.0, v);
        let omega = RiemannMatrix::new([[i(1.0), i(0.3)], [i(0.3), i(1.2)]]).unwrap();
        let c = [C64::new(0.21, 0.13), C64::new(-0.17, 0.08)];
        let cp = [C64::new(0.31, -0.05), C64::new(0.12, 0.27)];
        BAParams::new(omega, c, cp, 1e-14, 1e-6).unwrap()
    }

    fn z0() -> Point {
        [C64::new(0.05, 0.11), C64::new(-0.13, 0.02)]
    }

    #[test]
    fn psi_at_origin_is_theta_quotient() {
        let p = params();
        let z = z0();
        let v = psi(&p, z, [ZERO; 2]).unwrap();
        let num = ThetaJet::new(&p.omega, &add(z, p.c), 0, p.eps)
            .unwrap()
            .value();
        let den = ThetaJet::new(&p.omega, &z, 0, p.eps).unwrap().value();
        assert!((v - num / den).norm() < 1e-14 * v.norm());
    }

    #[test]
    fn level_one_family_is_psi() {
        let p = params();
        let x = [C64::new(0.02, -0.01), C64::new(0.05, 0.03)];
        let a = mc_basis_values(&p, 1, z0(), x).unwrap()[0];
        let b = psi(&p, z0(), x).unwrap();
        assert!((a - b).norm() < 1e-13 * b.norm());
    }

    #[test]
    fn derivative_identity_levels_one_and_two() {
        let p = params();
        let x = [C64::new(0.04, 0.01), C64::new(-0.03, 0.06)];
        for n in 1..=2 {
            for a in residues(n) {
                for j in 0..2 {
                    let d = xz_derivative_discrepancy(&p, n, a, j, z0(), x).unwrap();
                    assert!(d.relative() < 1e-10, "{n} {a:?} {j} {d:?}");
                }
            }
        }
    }

    #[test]
    fn second_derivative_identity() {
        let p = params();
        let x = [C64::new(-0.04, 0.02), C64::new(0.01, 0.07)];
        for (k, j) in [(0, 0), (0, 1), (1, 1)] {
            let d = second_derivative_discrepancy(&p, k, j, z0(), x).unwrap();
            assert!(d.relative() < 1e-10, "{k}{j} {d:?}");
        }
    }

    #[test]
    fn psi_shift_law() {
        let p = params();
        let x = [C64::new(0.03, 0.02), C64::new(-0.05, 0.01)];
        let z = z0();
        for (m, n) in [([1, 0], [0, 1]), ([0, -1], [2, 0]), ([1, 1], [0, 0])] {
            let zs = lattice_shift(&p.omega, z, m, n);
            let mult = shift_multiplier(&p.c, m);
            for (a, b) in [
                (psi(&p, zs, x).unwrap(), psi(&p, z, x).unwrap()),
                (
                    psi_cprime(&p, zs, x).unwrap(),
                    psi_cprime(&p, z, x).unwrap(),
                ),
            ] {
                assert!((a - mult * b).norm() < 1e-10 * b.norm(), "{m:?} {n:?}");
            }
        }
    }

    #[test]
    fn cprime_function_vanishes_with_its_numerator() {
        let p = params();
        let w = crate::avgeom::find_theta_zero(&p.omega, 3, &Default::default()).unwrap();
        let z = add(w.z(), p.c_prime);
        let f = ZFrame::new(&p.omega, z, p.eps).unwrap();
        let q = psi_cprime_quotient(&p, &f).unwrap();
        let v = eval_at(&p, &q, [ZERO; 2]).unwrap();
        assert!(v.norm() < 1e-9, "{v}");
    }

    #[test]
    fn level_dimensions() {
        let p = params();
        for k in 1..=3 {
            let r =
                mc_dimension_report(&p, k, 2 * (1..=k).map(|n| n * n).sum::<usize>(), 7).unwrap();
            assert_eq!(r.rank, k * k, "{:?}", r.singular_values);
        }
    }

    #[test]
    fn rejects_lattice_shift() {
        let p = params();
        assert!(p.with_c_prime([ZERO, C64::new(1.0, 0.0)], 1e-6).is_err());
    }
}
