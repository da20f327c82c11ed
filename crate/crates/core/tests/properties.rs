//! Property tests for the theta layer, lattice reduction and the operator
//! calculus.

use proptest::prelude::*;
use theta_ring::avgeom::{lattice_coords, reduce_mod_lattice};
use theta_ring::bamodule::{lattice_shift, psi, shift_multiplier, BAParams};
use theta_ring::opcalc::{
    evaluate, sampled_relative_difference, CoeffExpr, DiffOp, EvalContext, Evaluator, ExprFamily,
    Family, MatDiffOp,
};
use theta_ring::theta::theta_eval;
use theta_ring::{Characteristic, MultiIndex, RiemannMatrix, C64};

const EPS: f64 = 1e-14;

fn omega() -> RiemannMatrix {
    let i = |v: f64| C64::new(0.0, v);
    RiemannMatrix::new([[i(1.0), i(0.3)], [i(0.3), i(1.2)]]).unwrap()
}

fn ctx() -> EvalContext {
    EvalContext::new(omega(), EPS)
}

fn complex(r: f64) -> impl Strategy<Value = C64> {
    (-r..r, -r..r).prop_map(|(a, b)| C64::new(a, b))
}

fn point(r: f64) -> impl Strategy<Value = [C64; 2]> {
    (complex(r), complex(r)).prop_map(|(a, b)| [a, b])
}

fn characteristic() -> impl Strategy<Value = Characteristic> {
    (1i64..=4, [0i64..4, 0i64..4, 0i64..4, 0i64..4]).prop_map(|(den, n)| {
        let r = |k: i64| num_rational::Rational64::new(k % den, den);
        Characteristic::new([r(n[0]), r(n[1])], [r(n[2]), r(n[3])])
    })
}

/// A smooth coefficient: `θ(w + x) · exp(⟨v, x⟩) + a x_1 + b`.
fn coefficient() -> impl Strategy<Value = CoeffExpr> {
    (point(0.3), point(0.5), complex(1.0), complex(1.0)).prop_map(|(w, v, a, b)| {
        CoeffExpr::theta_shifted(w, MultiIndex::ZERO)
            .mul(&CoeffExpr::exp_lin(v, C64::new(0.0, 0.0)))
            .add(&CoeffExpr::var(0).scale(a))
            .add(&CoeffExpr::constant(b))
    })
}

fn scalar_op() -> impl Strategy<Value = DiffOp> {
    prop::collection::vec(((0u8..2, 0u8..2), coefficient()), 1..3).prop_map(|terms| {
        DiffOp::from_terms(
            terms
                .into_iter()
                .map(|((a, b), c)| (MultiIndex::new(a, b).unwrap(), c)),
        )
    })
}

fn mat_op() -> impl Strategy<Value = MatDiffOp> {
    [scalar_op(), scalar_op(), scalar_op(), scalar_op()]
        .prop_map(|[a, b, c, d]| MatDiffOp::new([[a, b], [c, d]]))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn quasi_periodicity_laws(z in point(0.5), ch in characteristic(), m in [-2i64..=2, -2i64..=2]) {
        let om = omega();
        let base = theta_eval(&z, &om, &ch, MultiIndex::ZERO, EPS).unwrap();
        let tau = std::f64::consts::TAU;
        let i = C64::i();
        let (a, b) = (ch.a_real::<f64>(), ch.b_real::<f64>());
        let mf = [m[0] as f64, m[1] as f64];

        let zn = [z[0] + mf[0], z[1] + mf[1]];
        let got = theta_eval(&zn, &om, &ch, MultiIndex::ZERO, EPS).unwrap();
        let want = (i * tau * (a[0] * mf[0] + a[1] * mf[1])).exp() * base;
        prop_assert!((got - want).norm() < 10.0 * EPS * want.norm().max(1.0));

        let s = om.apply(mf);
        let zm = [z[0] + s[0], z[1] + s[1]];
        let got = theta_eval(&zm, &om, &ch, MultiIndex::ZERO, EPS).unwrap();
        let mc = [C64::from(mf[0]), C64::from(mf[1])];
        let factor = (-i * tau * (b[0] * mf[0] + b[1] * mf[1])
            - i * std::f64::consts::PI * om.quad(&mc, &mc)
            - i * tau * (mc[0] * z[0] + mc[1] * z[1]))
            .exp();
        prop_assert!((got - factor * base).norm() < 10.0 * EPS * factor.norm().max(1.0));
    }

    #[test]
    fn theta_is_even(z in point(1.0)) {
        let om = omega();
        let ch = Characteristic::zero();
        let a = theta_eval(&z, &om, &ch, MultiIndex::ZERO, EPS).unwrap();
        let b = theta_eval(&[-z[0], -z[1]], &om, &ch, MultiIndex::ZERO, EPS).unwrap();
        prop_assert!((a - b).norm() < 10.0 * EPS * a.norm().max(1.0));
    }

    #[test]
    fn derivative_matches_finite_difference(z in point(0.5), d1 in 0u8..3, d2 in 0u8..1, j in 0usize..2) {
        let om = omega();
        let ch = Characteristic::zero();
        let d = MultiIndex::new(d1, d2).unwrap();
        let h = 1e-5;
        let mut zp = z;
        let mut zm = z;
        zp[j] += h;
        zm[j] -= h;
        let fd = (theta_eval(&zp, &om, &ch, d, EPS).unwrap() - theta_eval(&zm, &om, &ch, d, EPS).unwrap()) / (2.0 * h);
        let exact = theta_eval(&z, &om, &ch, d.bump(j).unwrap(), EPS).unwrap();
        prop_assert!((fd - exact).norm() < 1e-6 * exact.norm().max(1.0));
    }

    #[test]
    fn lattice_reduction_round_trips(z in point(6.0)) {
        let om = omega();
        let p = reduce_mod_lattice(&z, &om);
        let back = lattice_shift(&om, p.rep, [p.shift[0], p.shift[1]], [p.shift[2], p.shift[3]]);
        prop_assert!((back[0] - z[0]).norm() < 1e-12 && (back[1] - z[1]).norm() < 1e-12);
        let (s, t) = lattice_coords(&p.rep, &om);
        for v in s.iter().chain(t.iter()) {
            prop_assert!((-1e-12..1.0 + 1e-12).contains(v));
        }
    }

    #[test]
    fn multi_index_order_bound(d1 in 0u8..20, d2 in 0u8..20) {
        prop_assert_eq!(MultiIndex::new(d1, d2).is_ok(), d1 as usize + d2 as usize <= 12);
    }

    #[test]
    fn psi_picks_up_shift_multiplier(z in point(0.4), x in point(0.07), m in [-1i64..=1, -1i64..=1], n in [-1i64..=1, -1i64..=1]) {
        let c = [C64::new(0.21, 0.13), C64::new(-0.17, 0.08)];
        let cp = [C64::new(0.31, -0.05), C64::new(0.12, 0.27)];
        let p = BAParams::new(omega(), c, cp, EPS, 1e-6).unwrap();
        let v = psi(&p, z, x);
        prop_assume!(v.is_ok());
        let v = v.unwrap();
        let shifted = psi(&p, lattice_shift(&p.omega, z, m, n), x).unwrap();
        let want = shift_multiplier(&c, m) * v;
        prop_assert!((shifted - want).norm() < 1e-8 * want.norm().max(1.0));
    }

    #[test]
    fn expression_derivative_matches_finite_difference(e in coefficient(), x in point(0.1), j in 0usize..2) {
        let c = ctx();
        let h = 1e-5;
        let mut xp = x;
        let mut xm = x;
        xp[j] += h;
        xm[j] -= h;
        let fd = (evaluate(&e, &c, xp).unwrap() - evaluate(&e, &c, xm).unwrap()) / (2.0 * h);
        let exact = evaluate(&e.diff(j), &c, x).unwrap();
        prop_assert!((fd - exact).norm() < 1e-6 * exact.norm().max(1.0));
    }

    #[test]
    fn composition_is_associative(a in mat_op(), b in mat_op(), c in mat_op(), x in point(0.1)) {
        let left = a.compose(&b, 6).unwrap().compose(&c, 6).unwrap();
        let right = a.compose(&b.compose(&c, 6).unwrap(), 6).unwrap();
        let d = sampled_relative_difference(&left, &right, &[x], &ctx()).unwrap();
        prop_assert!(d < 1e-12, "{}", d);
    }

    #[test]
    fn applying_a_composite_applies_each_factor(a in mat_op(), b in mat_op(), f in coefficient(), g in coefficient(), x in point(0.1)) {
        let c = ctx();
        let fams = [ExprFamily(f), ExprFamily(g)];
        let ab = a.compose(&b, 6).unwrap();
        let mut ev = Evaluator::new(&c, x);
        let refs: [&dyn Family; 2] = [&fams[0], &fams[1]];
        let direct = ab.apply(refs, &mut ev).unwrap();
        // b applied symbolically to the families, then a
        let inner = [0, 1].map(|i| {
            let mut e = CoeffExpr::zero();
            for (k, fam) in fams.iter().enumerate() {
                for (beta, coeff) in b.entry(i, k).terms() {
                    e = e.add(&coeff.mul(&fam.0.diff_multi(*beta)));
                }
            }
            ExprFamily(e)
        });
        let refs: [&dyn Family; 2] = [&inner[0], &inner[1]];
        let nested = a.apply(refs, &mut ev).unwrap();
        for i in 0..2 {
            prop_assert!((direct[i] - nested[i]).norm() < 1e-8 * direct[i].norm().max(1.0));
        }
    }

    #[test]
    fn partials_commute(j in 0usize..2, k in 0usize..2) {
        let a = MatDiffOp::diagonal(DiffOp::partial(j));
        let b = MatDiffOp::diagonal(DiffOp::partial(k));
        prop_assert!(a.commutator(&b, 6).unwrap().is_zero());
    }
}
