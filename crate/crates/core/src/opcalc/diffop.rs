use std::collections::BTreeMap;

use rayon::prelude::*;

use super::eval::{EvalContext, Evaluator};
use super::expr::CoeffExpr;
use crate::error::{Error, Result};
use crate::{MultiIndex, C64};

/// Default cap on the order of composed operators.
pub const DEFAULT_ORDER_CAP: usize = 6;

/// Scalar differential operator `Σ_β coeff_β(x) ∂_x^β`.
#[derive(Clone, Debug, Default)]
pub struct DiffOp {
    terms: BTreeMap<MultiIndex, CoeffExpr>,
}

impl DiffOp {
    pub fn zero() -> Self {
        DiffOp::default()
    }

    pub fn identity() -> Self {
        DiffOp::multiplication(CoeffExpr::one())
    }

    /// Multiplication by the function `f`.
    pub fn multiplication(f: CoeffExpr) -> Self {
        DiffOp::term(MultiIndex::ZERO, f)
    }

    /// `∂_x^beta` with unit coefficient.
    pub fn derivative(beta: MultiIndex) -> Self {
        DiffOp::term(beta, CoeffExpr::one())
    }

    /// `∂/∂x_j`.
    pub fn partial(j: usize) -> Self {
        DiffOp::derivative(MultiIndex::unit(j))
    }

    pub fn term(beta: MultiIndex, coeff: CoeffExpr) -> Self {
        let mut op = DiffOp::zero();
        op.accumulate(beta, coeff);
        op
    }

    pub fn from_terms<I: IntoIterator<Item = (MultiIndex, CoeffExpr)>>(terms: I) -> Self {
        let mut op = DiffOp::zero();
        for (b, c) in terms {
            op.accumulate(b, c);
        }
        op
    }

    /// Adds `coeff · ∂^beta`, dropping exact zeros.
    pub fn accumulate(&mut self, beta: MultiIndex, coeff: CoeffExpr) {
        if coeff.is_zero() {
            return;
        }
        let merged = match self.terms.remove(&beta) {
            Some(old) => old.add(&coeff),
            None => coeff,
        };
        if !merged.is_zero() {
            self.terms.insert(beta, merged);
        }
    }

    pub fn terms(&self) -> impl Iterator<Item = (&MultiIndex, &CoeffExpr)> {
        self.terms.iter()
    }

    pub fn coeff(&self, beta: MultiIndex) -> Option<&CoeffExpr> {
        self.terms.get(&beta)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn order(&self) -> usize {
        self.terms.keys().map(|b| b.total()).max().unwrap_or(0)
    }

    pub fn add(&self, other: &DiffOp) -> DiffOp {
        let mut out = self.clone();
        for (b, c) in other.terms() {
            out.accumulate(*b, c.clone());
        }
        out
    }

    pub fn neg(&self) -> DiffOp {
        DiffOp {
            terms: self.terms.iter().map(|(b, c)| (*b, c.neg())).collect(),
        }
    }

    pub fn sub(&self, other: &DiffOp) -> DiffOp {
        self.add(&other.neg())
    }

    /// `f · P`, multiplication by a function on the left.
    pub fn left_mul(&self, f: &CoeffExpr) -> DiffOp {
        DiffOp::from_terms(self.terms.iter().map(|(b, c)| (*b, f.mul(c))))
    }

    /// `P ∘ Q` by the Leibniz rule,
    /// `Σ_{α,β} Σ_{γ ≤ α} C(α,γ) p_α (∂^γ q_β) ∂^{α-γ+β}`.
    pub fn compose(&self, other: &DiffOp, cap: usize) -> Result<DiffOp> {
        let mut out = DiffOp::zero();
        for (alpha, p) in self.terms() {
            for (beta, q) in other.terms() {
                for gamma in alpha.below() {
                    let rest = alpha.checked_sub(gamma).expect("gamma below alpha");
                    let idx = rest.checked_add(*beta)?;
                    let dq = q.diff_multi(gamma);
                    if dq.is_zero() {
                        continue;
                    }
                    if idx.total() > cap {
                        return Err(Error::OrderCap {
                            order: idx.total(),
                            cap,
                        });
                    }
                    let binom = alpha.binomial(gamma);
                    let coef = p.mul(&dq).scale(C64::new(binom, 0.0));
                    out.accumulate(idx, coef);
                }
            }
        }
        Ok(out)
    }

    /// `Σ_β coeff_β(x) (∂^β f)(x)`.
    pub fn apply(&self, f: &dyn Family, ev: &mut Evaluator) -> Result<C64> {
        let mut acc = C64::new(0.0, 0.0);
        for (beta, c) in self.terms() {
            acc += ev.eval(c)? * f.derivative(*beta, ev)?;
        }
        Ok(acc)
    }
}

/// A function of `x` able to report its partial derivatives.
pub trait Family: Sync {
    fn derivative(&self, beta: MultiIndex, ev: &mut Evaluator) -> Result<C64>;
}

/// Family backed by an expression; derivatives are exact.
#[derive(Clone, Debug)]
pub struct ExprFamily(pub CoeffExpr);

impl Family for ExprFamily {
    fn derivative(&self, beta: MultiIndex, ev: &mut Evaluator) -> Result<C64> {
        ev.eval(&self.0.diff_multi(beta))
    }
}

/// Family given by a finite table of derivative values at one `x`.
#[derive(Clone, Debug, Default)]
pub struct TabulatedFamily(pub BTreeMap<MultiIndex, C64>);

impl Family for TabulatedFamily {
    fn derivative(&self, beta: MultiIndex, _ev: &mut Evaluator) -> Result<C64> {
        self.0
            .get(&beta)
            .copied()
            .ok_or(Error::MissingDerivative(beta.d1(), beta.d2()))
    }
}

/// 2×2 matrix of scalar differential operators.
#[derive(Clone, Debug, Default)]
pub struct MatDiffOp {
    pub entries: [[DiffOp; 2]; 2],
}

impl MatDiffOp {
    pub fn new(entries: [[DiffOp; 2]; 2]) -> Self {
        MatDiffOp { entries }
    }

    pub fn zero() -> Self {
        MatDiffOp::default()
    }

    pub fn identity() -> Self {
        MatDiffOp::diagonal(DiffOp::identity())
    }

    /// `d · I`.
    pub fn diagonal(d: DiffOp) -> Self {
        MatDiffOp::new([[d.clone(), DiffOp::zero()], [DiffOp::zero(), d]])
    }

    pub fn entry(&self, i: usize, j: usize) -> &DiffOp {
        &self.entries[i][j]
    }

    pub fn order(&self) -> usize {
        self.entries
            .iter()
            .flatten()
            .map(|d| d.order())
            .max()
            .unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().flatten().all(|d| d.is_zero())
    }

    pub fn add(&self, other: &MatDiffOp) -> MatDiffOp {
        MatDiffOp::new(std::array::from_fn(|i| {
            std::array::from_fn(|j| self.entries[i][j].add(&other.entries[i][j]))
        }))
    }

    pub fn sub(&self, other: &MatDiffOp) -> MatDiffOp {
        MatDiffOp::new(std::array::from_fn(|i| {
            std::array::from_fn(|j| self.entries[i][j].sub(&other.entries[i][j]))
        }))
    }

    pub fn left_mul(&self, f: &CoeffExpr) -> MatDiffOp {
        MatDiffOp::new(std::array::from_fn(|i| {
            std::array::from_fn(|j| self.entries[i][j].left_mul(f))
        }))
    }

    pub fn compose(&self, other: &MatDiffOp, cap: usize) -> Result<MatDiffOp> {
        let mut entries: [[DiffOp; 2]; 2] = Default::default();
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = DiffOp::zero();
                for k in 0..2 {
                    acc = acc.add(&self.entries[i][k].compose(&other.entries[k][j], cap)?);
                }
                entries[i][j] = acc;
            }
        }
        Ok(MatDiffOp::new(entries))
    }

    /// `[self, other] = self ∘ other − other ∘ self`.
    pub fn commutator(&self, other: &MatDiffOp, cap: usize) -> Result<MatDiffOp> {
        Ok(self.compose(other, cap)?.sub(&other.compose(self, cap)?))
    }

    /// Row-wise action on a pair of functions.
    pub fn apply(&self, f: [&dyn Family; 2], ev: &mut Evaluator) -> Result<[C64; 2]> {
        let mut out = [C64::new(0.0, 0.0); 2];
        for (i, slot) in out.iter_mut().enumerate() {
            for (j, fj) in f.iter().enumerate() {
                *slot += self.entries[i][j].apply(*fj, ev)?;
            }
        }
        Ok(out)
    }
}

/// Anything exposing a flat list of coefficients keyed by entry and order.
pub trait Coefficients {
    fn coefficients(&self) -> Vec<((usize, usize), MultiIndex, CoeffExpr)>;
}

impl Coefficients for DiffOp {
    fn coefficients(&self) -> Vec<((usize, usize), MultiIndex, CoeffExpr)> {
        self.terms().map(|(b, c)| ((0, 0), *b, c.clone())).collect()
    }
}

impl Coefficients for MatDiffOp {
    fn coefficients(&self) -> Vec<((usize, usize), MultiIndex, CoeffExpr)> {
        let mut out = Vec::new();
        for i in 0..2 {
            for j in 0..2 {
                for (b, c) in self.entries[i][j].terms() {
                    out.push(((i, j), *b, c.clone()));
                }
            }
        }
        out
    }
}

/// Largest `|coeff_β(x)|` over entries, orders and sample points.
pub fn op_norm_sampled<P: Coefficients + ?Sized>(
    op: &P,
    samples: &[[C64; 2]],
    ctx: &EvalContext,
) -> Result<f64> {
    let coeffs = op.coefficients();
    let per_x: Vec<Result<f64>> = samples
        .par_iter()
        .map(|x| {
            let mut ev = Evaluator::new(ctx, *x);
            let mut m: f64 = 0.0;
            for (_, _, c) in &coeffs {
                m = m.max(ev.eval(c)?.norm());
            }
            Ok(m)
        })
        .collect();
    per_x.into_iter().try_fold(0.0f64, |acc, r| Ok(acc.max(r?)))
}

/// `max |a_β(x) − b_β(x)| / max(|a_β(x)|, |b_β(x)|)`, the maxima running over
/// entries, orders and sample points. Zero when both operators vanish.
pub fn sampled_relative_difference<P: Coefficients + ?Sized, Q: Coefficients + ?Sized>(
    a: &P,
    b: &Q,
    samples: &[[C64; 2]],
    ctx: &EvalContext,
) -> Result<f64> {
    type Slot = ((usize, usize), MultiIndex);
    let mut keyed: BTreeMap<Slot, [Option<CoeffExpr>; 2]> = BTreeMap::new();
    for (e, m, c) in a.coefficients() {
        keyed.entry((e, m)).or_default()[0] = Some(c);
    }
    for (e, m, c) in b.coefficients() {
        keyed.entry((e, m)).or_default()[1] = Some(c);
    }
    let pairs: Vec<[Option<CoeffExpr>; 2]> = keyed.into_values().collect();
    let per_x: Vec<Result<(f64, f64)>> = samples
        .par_iter()
        .map(|x| {
            let mut ev = Evaluator::new(ctx, *x);
            let (mut diff, mut scale): (f64, f64) = (0.0, 0.0);
            for [ca, cb] in &pairs {
                let va = match ca {
                    Some(c) => ev.eval(c)?,
                    None => C64::new(0.0, 0.0),
                };
                let vb = match cb {
                    Some(c) => ev.eval(c)?,
                    None => C64::new(0.0, 0.0),
                };
                diff = diff.max((va - vb).norm());
                scale = scale.max(va.norm()).max(vb.norm());
            }
            Ok((diff, scale))
        })
        .collect();
    let (mut diff, mut scale): (f64, f64) = (0.0, 0.0);
    for r in per_x {
        let (d, s) = r?;
        diff = diff.max(d);
        scale = scale.max(s);
    }
    Ok(if scale == 0.0 { 0.0 } else { diff / scale })
}

/// Relative sampled norm of `[a, b]`, measured against the two products.
pub fn commutator_residual(
    a: &MatDiffOp,
    b: &MatDiffOp,
    samples: &[[C64; 2]],
    ctx: &EvalContext,
    cap: usize,
) -> Result<f64> {
    let ab = a.compose(b, cap)?;
    let ba = b.compose(a, cap)?;
    sampled_relative_difference(&ab, &ba, samples, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opcalc::evaluate;
    use crate::RiemannMatrix;

    fn ctx() -> EvalContext {
        let i = |v: f64| C64::new(0.0, v);
        let omega = RiemannMatrix::new([[i(1.0), i(0.3)], [i(0.3), i(1.2)]]).unwrap();
        EvalContext::new(omega, 1e-14)
    }

    fn sample_fn() -> CoeffExpr {
        let th = CoeffExpr::theta_shifted(
            [C64::new(0.11, 0.05), C64::new(-0.2, 0.13)],
            MultiIndex::ZERO,
        );
        let e = CoeffExpr::exp_lin(
            [C64::new(0.3, -0.1), C64::new(0.0, 0.7)],
            C64::new(0.1, 0.0),
        );
        let x1 = CoeffExpr::var(0);
        th.mul(&e)
            .add(&x1.mul(&x1))
            .div(&th.add(&CoeffExpr::real(2.0)))
    }

    fn diff_quotient(f: &CoeffExpr, j: usize, x: [C64; 2], ctx: &EvalContext) -> C64 {
        let h = 1e-5;
        let mut xp = x;
        let mut xm = x;
        xp[j] += h;
        xm[j] -= h;
        (evaluate(f, ctx, xp).unwrap() - evaluate(f, ctx, xm).unwrap()) / (2.0 * h)
    }

    #[test]
    fn exact_partials_match_central_differences() {
        let c = ctx();
        let f = sample_fn();
        let x = [C64::new(0.03, -0.02), C64::new(0.05, 0.04)];
        for j in 0..2 {
            let exact = evaluate(&f.diff(j), &c, x).unwrap();
            let approx = diff_quotient(&f, j, x, &c);
            assert!(
                (exact - approx).norm() < 1e-7 * (1.0 + exact.norm()),
                "{exact} {approx}"
            );
        }
    }

    #[test]
    fn compose_of_derivative_and_multiplication() {
        // ∂1 ∘ f = f ∂1 + f_1
        let f = sample_fn();
        let op = DiffOp::partial(0)
            .compose(&DiffOp::multiplication(f.clone()), 6)
            .unwrap();
        assert_eq!(op.order(), 1);
        let c = ctx();
        let x = [C64::new(0.01, 0.02), C64::new(-0.03, 0.0)];
        let a = evaluate(op.coeff(MultiIndex::ZERO).unwrap(), &c, x).unwrap();
        let b = evaluate(&f.diff(0), &c, x).unwrap();
        assert!((a - b).norm() < 1e-14);
    }

    #[test]
    fn order_cap_is_enforced() {
        let d2 = DiffOp::derivative(MultiIndex::new(2, 0).unwrap());
        let err = d2.compose(&d2, 3).unwrap_err();
        assert!(matches!(err, Error::OrderCap { order: 4, cap: 3 }));
        assert_eq!(d2.compose(&d2, 4).unwrap().order(), 4);
    }

    #[test]
    fn compose_is_associative_and_matches_application() {
        let c = ctx();
        let f = sample_fn();
        let x1 = CoeffExpr::var(0);
        let p = DiffOp::partial(1).add(&DiffOp::multiplication(f.clone()));
        let q = DiffOp::partial(0).left_mul(&x1).add(&DiffOp::partial(1));
        let r = DiffOp::partial(0).left_mul(&f);
        let left = p.compose(&q, 6).unwrap().compose(&r, 6).unwrap();
        let right = p.compose(&q.compose(&r, 6).unwrap(), 6).unwrap();
        let xs = [[C64::new(0.02, 0.01), C64::new(-0.04, 0.03)]];
        let rel = sampled_relative_difference(&left, &right, &xs, &c).unwrap();
        assert!(rel < 1e-13, "{rel}");

        let g = ExprFamily(sample_fn().mul(&CoeffExpr::var(1)));
        let mut ev = Evaluator::new(&c, xs[0]);
        let pq = p.compose(&q, 6).unwrap();
        let direct = pq.apply(&g, &mut ev).unwrap();
        let qg = ExprFamily({
            // q applied symbolically to g
            let mut acc = CoeffExpr::zero();
            for (b, coef) in q.terms() {
                acc = acc.add(&coef.mul(&g.0.diff_multi(*b)));
            }
            acc
        });
        let nested = p.apply(&qg, &mut ev).unwrap();
        assert!((direct - nested).norm() < 1e-12 * (1.0 + direct.norm()));
    }

    #[test]
    fn matrix_commutator_of_diagonal_constants_vanishes() {
        let c = ctx();
        let a = MatDiffOp::diagonal(DiffOp::partial(0));
        let b = MatDiffOp::diagonal(DiffOp::partial(1));
        assert!(a.commutator(&b, 6).unwrap().is_zero());
        let f = MatDiffOp::diagonal(DiffOp::multiplication(sample_fn()));
        let xs = [[C64::new(0.0, 0.0), C64::new(0.01, 0.0)]];
        let res = commutator_residual(&a, &f, &xs, &c, 6).unwrap();
        assert!(res > 1e-3);
    }

    #[test]
    fn tabulated_family_reports_missing_orders() {
        let c = ctx();
        let mut ev = Evaluator::new(&c, [C64::new(0.0, 0.0); 2]);
        let mut t = TabulatedFamily::default();
        t.0.insert(MultiIndex::ZERO, C64::new(2.0, 0.0));
        let op = DiffOp::partial(0);
        assert!(matches!(
            op.apply(&t, &mut ev),
            Err(Error::MissingDerivative(1, 0))
        ));
        let id = DiffOp::identity();
        assert_eq!(id.apply(&t, &mut ev).unwrap(), C64::new(2.0, 0.0));
    }
}
