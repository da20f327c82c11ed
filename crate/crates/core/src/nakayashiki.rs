//! Explicit matrix operators for the basis `(ψ, ψ_{c'})`: the second-order
//! generators `L(∂_k∂_j log θ)`, the derivation operators `Z_j`, third-order
//! generators as commutators, and changes of basis.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::avgeom::{reduce_mod_lattice, DivisorPoint, DivisorTag};
use crate::bamodule::{
    dz_psi_cprime_expr, dz_psi_expr, psi_cprime_expr, psi_expr, sample_z, theta_at, BAParams,
    Discrepancy, ZFrame,
};
use crate::error::{Error, Result};
use crate::jet::ThetaJet;
use crate::linalg::{cond2, least_squares};
use crate::opcalc::{
    op_norm_sampled, CoeffExpr, DiffOp, EvalContext, Evaluator, ExprFamily, Family, MatDiffOp,
};
use crate::{MultiIndex, Point, C64};

const ZERO: C64 = C64::new(0.0, 0.0);

fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

fn neg(a: Point) -> Point {
    [-a[0], -a[1]]
}

/// Tolerances shared by the constructions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildSettings {
    /// Relative floor below which `|θ(w)|` counts as on the divisor.
    pub floor: f64,
    /// Largest admissible condition number of the 2×2 gradient systems.
    pub cond_cap: f64,
    /// Order cap for compositions.
    pub order_cap: usize,
    /// `z`-points used in the α fit and on the holdout.
    pub alpha_fit_points: usize,
    pub alpha_holdout_points: usize,
    pub alpha_tol: f64,
    /// Relative size below which a coefficient of a commutator above the
    /// expected order is treated as an exact cancellation.
    pub cancellation_tol: f64,
    /// Residual allowed for `θ(q_i)` when reusing `q_i = p_i − c'`.
    pub root_tol: f64,
}

impl Default for BuildSettings {
    fn default() -> Self {
        BuildSettings {
            floor: 1e-6,
            cond_cap: 1e8,
            order_cap: crate::opcalc::DEFAULT_ORDER_CAP,
            alpha_fit_points: 16,
            alpha_holdout_points: 20,
            alpha_tol: 1e-8,
            cancellation_tol: 1e-9,
            root_tol: 1e-11,
        }
    }
}

/// Coefficients of `θ(z−c')θ(z+c')/θ(z)^2 = α11 ℓ11 + α12 ℓ12 + α22 ℓ22 + α`,
/// with `ℓ_kj = ∂_k∂_j log θ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alphas {
    pub a11: C64,
    pub a12: C64,
    pub a22: C64,
    pub a: C64,
    pub holdout_residual: f64,
    pub holdout_points: usize,
}

impl Alphas {
    pub fn as_array(&self) -> [C64; 4] {
        [self.a11, self.a12, self.a22, self.a]
    }
}

fn alpha_row(p: &BAParams, z: Point) -> Result<([C64; 4], C64)> {
    let f = ZFrame::new(&p.omega, z, p.eps)?;
    let t = f.theta();
    let minus = ThetaJet::new(&p.omega, &sub(z, p.c_prime), 0, p.eps)?.value();
    let plus = ThetaJet::new(&p.omega, &add(z, p.c_prime), 0, p.eps)?.value();
    let row = [
        f.log_d(&[0, 0]),
        f.log_d(&[0, 1]),
        f.log_d(&[1, 1]),
        C64::new(1.0, 0.0),
    ];
    Ok((row, minus * plus / (t * t)))
}

/// Least-squares fit of the α's from `fit_points` samples, judged on
/// `holdout_points` fresh ones.
pub fn solve_alphas(p: &BAParams, settings: &BuildSettings, seed: u64) -> Result<Alphas> {
    if settings.alpha_fit_points < 8 {
        return Err(Error::InvalidInput(
            "the alpha fit needs at least 8 points".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng, n: usize| -> Result<Vec<([C64; 4], C64)>> {
        (0..n)
            .map(|_| sample_z(rng, &p.omega, p.eps))
            .collect::<Result<Vec<_>>>()?
            .par_iter()
            .map(|z| alpha_row(p, *z))
            .collect()
    };
    let fit = draw(&mut rng, settings.alpha_fit_points)?;
    let n = fit.len();
    // rows are balanced so no single sample dominates the fit
    let weights: Vec<f64> = fit
        .iter()
        .map(|(r, v)| 1.0 / r.iter().chain([v]).map(|c| c.norm()).fold(0.0, f64::max))
        .collect();
    let m = DMatrix::from_fn(n, 4, |i, j| fit[i].0[j] * weights[i]);
    let rhs = DVector::from_fn(n, |i, _| fit[i].1 * weights[i]);
    let sol = least_squares(&m, &rhs, 1e10)?;
    let holdout = draw(&mut rng, settings.alpha_holdout_points)?;
    let d: Discrepancy = holdout
        .iter()
        .map(|(r, v)| {
            let model: C64 = (0..4).map(|j| r[j] * sol[j]).sum();
            Discrepancy::between(*v, model)
        })
        .collect();
    let residual = d.relative();
    if !(residual < settings.alpha_tol) {
        return Err(Error::BadFit {
            residual,
            tol: settings.alpha_tol,
        });
    }
    Ok(Alphas {
        a11: sol[0],
        a12: sol[1],
        a22: sol[2],
        a: sol[3],
        holdout_residual: residual,
        holdout_points: holdout.len(),
    })
}

/// Everything the operator formulas need for one basis `(ψ, ψ_{c'})`.
#[derive(Clone, Debug)]
pub struct SpectralConfig {
    pub params: BAParams,
    pub delta: DivisorPoint,
    pub p: [DivisorPoint; 2],
    pub q: [DivisorPoint; 2],
    pub alphas: Alphas,
    pub settings: BuildSettings,
    pub seed: u64,
}

/// Serializable view of a [`SpectralConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralRecord {
    pub omega: [[[f64; 2]; 2]; 2],
    pub c: Point,
    pub c_prime: Point,
    pub eps: f64,
    pub delta: DivisorPoint,
    pub p: [DivisorPoint; 2],
    pub q: [DivisorPoint; 2],
    pub alphas: Alphas,
    pub settings: BuildSettings,
    pub seed: u64,
}

impl SpectralConfig {
    /// Completes the configuration from intersection points `p1, p2` of
    /// `θ(z) = 0` with `θ(z − c') = 0` and a theta zero `Δ`.
    pub fn new(
        params: BAParams,
        delta: DivisorPoint,
        p: [DivisorPoint; 2],
        settings: BuildSettings,
        seed: u64,
    ) -> Result<Self> {
        let omega = &params.omega;
        let q = p.map(|pi| {
            let z = sub(pi.z(), params.c_prime);
            let residual = ThetaJet::new(omega, &z, 0, params.eps)
                .map(|j| j.value().norm())
                .unwrap_or(f64::INFINITY);
            (z, residual)
        });
        if q.iter().any(|(_, r)| !(*r < settings.root_tol)) {
            return Err(Error::Degenerate("p_i − c' is not a theta zero".into()));
        }
        let tags = [DivisorTag::Q1, DivisorTag::Q2];
        let q = [0, 1].map(|i| DivisorPoint {
            point: reduce_mod_lattice(&q[i].0, omega),
            residual: q[i].1,
            which: tags[i],
        });
        let alphas = solve_alphas(&params, &settings, seed)?;
        Ok(SpectralConfig {
            params,
            delta,
            p,
            q,
            alphas,
            settings,
            seed,
        })
    }

    pub fn record(&self) -> SpectralRecord {
        SpectralRecord {
            omega: self.params.omega.to_pairs(),
            c: self.params.c,
            c_prime: self.params.c_prime,
            eps: self.params.eps,
            delta: self.delta,
            p: self.p,
            q: self.q,
            alphas: self.alphas.clone(),
            settings: self.settings.clone(),
            seed: self.seed,
        }
    }

    pub fn context(&self) -> EvalContext {
        self.params.context()
    }

    fn shifts(&self) -> Shifts {
        Shifts {
            c: self.params.c,
            cp: self.params.c_prime,
            p: [self.p[0].z(), self.p[1].z()],
            delta: self.delta.z(),
        }
    }

    /// Parameters `(c + c', −c')` with intersection points `q_i`.
    fn swapped_shifts(&self) -> Shifts {
        Shifts {
            c: add(self.params.c, self.params.c_prime),
            cp: neg(self.params.c_prime),
            p: [self.q[0].z(), self.q[1].z()],
            delta: self.delta.z(),
        }
    }
}

/// The data `(c, c', p_1, p_2, Δ)` entering one instance of the formulas.
#[derive(Clone, Copy, Debug)]
struct Shifts {
    c: Point,
    cp: Point,
    p: [Point; 2],
    delta: Point,
}

struct Ctx<'a> {
    p: &'a BAParams,
    s: &'a BuildSettings,
}

impl Ctx<'_> {
    fn jet(&self, z: Point, order: usize) -> Result<ThetaJet> {
        ThetaJet::new(&self.p.omega, &z, order, self.p.eps)
    }

    /// Jet at `z`, refusing points on the divisor.
    fn regular_jet(&self, z: Point, order: usize, what: &str) -> Result<ThetaJet> {
        let j = self.jet(z, order)?;
        if !(j.value().norm() > self.s.floor * j.scale()) {
            return Err(Error::DivisorHit(format!(
                "{what}: |theta| = {:.3e}",
                j.value().norm()
            )));
        }
        Ok(j)
    }

    fn theta(&self, z: Point, what: &str) -> Result<C64> {
        Ok(self.regular_jet(z, 0, what)?.value())
    }

    /// Gradients at the intersection points and the inverse of their matrix.
    fn gradient_system(&self, pts: &[Point; 2]) -> Result<GradientSystem> {
        let j0 = self.jet(pts[0], 2)?;
        let j1 = self.jet(pts[1], 2)?;
        let m = [j0.grad(), j1.grad()];
        let cond = cond2(&m);
        if !(cond < self.s.cond_cap) {
            return Err(Error::IllConditioned {
                what: "gradient matrix at p1, p2".into(),
                cond,
            });
        }
        Ok(GradientSystem { m, jets: [j0, j1] })
    }
}

struct GradientSystem {
    /// `m[i] = ∇θ(p_i)`.
    m: [[C64; 2]; 2],
    jets: [ThetaJet; 2],
}

impl GradientSystem {
    /// Symbolic Cramer solution of `u1 θ1(p_i) + u2 θ2(p_i) = rhs_i`.
    fn solve(&self, rhs: [CoeffExpr; 2]) -> [CoeffExpr; 2] {
        let m = &self.m;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let u1 = rhs[0]
            .scale(m[1][1] / det)
            .sub(&rhs[1].scale(m[0][1] / det));
        let u2 = rhs[1]
            .scale(m[0][0] / det)
            .sub(&rhs[0].scale(m[1][0] / det));
        [u1, u2]
    }
}

/// `Q(z, x) = θ(z + shift + x) / θ(z)` and its `z`-derivatives at fixed `z`.
struct QuotientAt {
    w: Point,
    t: C64,
    g: [C64; 2],
    h: [[C64; 2]; 2],
}

impl QuotientAt {
    fn new(ctx: &Ctx, z: Point, shift: Point, what: &str) -> Result<Self> {
        let j = ctx.regular_jet(z, 2, what)?;
        Ok(QuotientAt {
            w: add(z, shift),
            t: j.value(),
            g: j.grad(),
            h: [
                [j.partial(&[0, 0]), j.partial(&[0, 1])],
                [j.partial(&[1, 0]), j.partial(&[1, 1])],
            ],
        })
    }

    fn big(&self, coords: &[usize]) -> CoeffExpr {
        theta_at(self.w, coords)
    }

    fn q(&self) -> CoeffExpr {
        self.big(&[]).scale(self.t.inv())
    }

    fn dq(&self, l: usize) -> CoeffExpr {
        let t = self.t;
        self.big(&[l])
            .scale(t.inv())
            .sub(&self.big(&[]).scale(self.g[l] / (t * t)))
    }

    fn d2q(&self, k: usize, j: usize) -> CoeffExpr {
        let t = self.t;
        let (gk, gj, hkj) = (self.g[k], self.g[j], self.h[k][j]);
        self.big(&[k, j])
            .scale(t.inv())
            .sub(&self.big(&[j]).scale(gk / (t * t)))
            .sub(&self.big(&[k]).scale(gj / (t * t)))
            .add(
                &self
                    .big(&[])
                    .scale(2.0 * gk * gj / (t * t * t) - hkj / (t * t)),
            )
    }

    fn log2(&self, k: usize, j: usize) -> C64 {
        let t = self.t;
        self.h[k][j] / t - self.g[k] * self.g[j] / (t * t)
    }
}

/// The 11- and 12-entries of `L(∂_k∂_j log θ)` for one parameter set, with
/// the pieces `f, g, h` of the 11-entry.
#[derive(Clone, Debug)]
pub struct SecondOrderParts {
    pub h_op: DiffOp,
    pub f_fn: CoeffExpr,
    pub f: CoeffExpr,
    pub g: CoeffExpr,
    pub h: CoeffExpr,
}

fn second_order_parts(ctx: &Ctx, s: &Shifts, k: usize, j: usize) -> Result<SecondOrderParts> {
    let gs = ctx.gradient_system(&s.p)?;
    // f θ1(p_i) + g θ2(p_i) = (T_j θ_k(p_i) + T_k θ_j(p_i)) / T − θ_kj(p_i),
    // T = θ(p_i + c + x)
    let rhs = [0, 1].map(|i| {
        let jet = &gs.jets[i];
        let w = add(s.p[i], s.c);
        let t = theta_at(w, &[]);
        let num = theta_at(w, &[j])
            .scale(jet.partial(&[k]))
            .add(&theta_at(w, &[k]).scale(jet.partial(&[j])));
        num.div(&t).sub(&CoeffExpr::constant(jet.partial(&[k, j])))
    });
    let [f, g] = gs.solve(rhs);

    // h from z* = Δ + c'
    let star = QuotientAt::new(ctx, add(s.delta, s.cp), s.c, "theta(Delta + c')")?;
    let inner = star
        .d2q(k, j)
        .sub(&f.mul(&star.dq(0)))
        .sub(&g.mul(&star.dq(1)))
        .add(&star.q().scale(2.0 * star.log2(k, j)));
    let h = inner.div(&star.q());

    let beta = MultiIndex::unit(k).checked_add(MultiIndex::unit(j))?;
    let h_op = DiffOp::term(beta, CoeffExpr::real(-1.0))
        .add(&DiffOp::partial(0).left_mul(&f))
        .add(&DiffOp::partial(1).left_mul(&g))
        .add(&DiffOp::multiplication(h.clone()));

    // F from z = 0
    let origin = QuotientAt::new(ctx, [ZERO; 2], s.c, "theta(0)")?;
    let at_zero = origin
        .d2q(k, j)
        .sub(&f.mul(&origin.dq(0)))
        .sub(&g.mul(&origin.dq(1)))
        .sub(&h.mul(&origin.q()))
        .add(&origin.q().scale(2.0 * origin.log2(k, j)));
    let theta_cp = ctx.theta(s.cp, "theta(c')")?;
    let prefactor = origin.t * origin.t / theta_cp;
    let f_fn = at_zero.scale(prefactor).div(&theta_at(add(s.c, s.cp), &[]));
    Ok(SecondOrderParts {
        h_op,
        f_fn,
        f,
        g,
        h,
    })
}

/// Index of `(k, j)` in the order `11, 12, 22`.
pub fn pair_index(k: usize, j: usize) -> usize {
    match (k.min(j), k.max(j)) {
        (0, 0) => 0,
        (0, 1) => 1,
        (1, 1) => 2,
        _ => panic!("index pair ({k}, {j}) out of range"),
    }
}

const PAIRS: [(usize, usize); 3] = [(0, 0), (0, 1), (1, 1)];

/// Index triples `111, 112, 122, 222` of the third-order generators.
pub const TRIPLES: [[usize; 3]; 4] = [[0, 0, 0], [0, 0, 1], [0, 1, 1], [1, 1, 1]];

/// The three second-order generators `L(∂_k∂_j log θ)`, `kj = 11, 12, 22`.
pub fn build_second_order_all(cfg: &SpectralConfig) -> Result<[MatDiffOp; 3]> {
    let ctx = Ctx {
        p: &cfg.params,
        s: &cfg.settings,
    };
    let direct = cfg.shifts();
    let swapped = cfg.swapped_shifts();
    let own: Vec<SecondOrderParts> = PAIRS
        .iter()
        .map(|&(k, j)| second_order_parts(&ctx, &direct, k, j))
        .collect::<Result<_>>()?;
    let a = cfg.alphas.as_array();
    let mut combo_h = DiffOp::multiplication(CoeffExpr::constant(a[3]));
    let mut combo_f = CoeffExpr::zero();
    for (i, parts) in own.iter().enumerate() {
        combo_h = combo_h.add(&parts.h_op.left_mul(&CoeffExpr::constant(a[i])));
        combo_f = combo_f.add(&parts.f_fn.scale(a[i]));
    }
    let mut out: Vec<MatDiffOp> = Vec::with_capacity(3);
    for (i, &(k, j)) in PAIRS.iter().enumerate() {
        let sw = second_order_parts(&ctx, &swapped, k, j)?;
        out.push(MatDiffOp::new([
            [
                own[i].h_op.clone(),
                DiffOp::multiplication(own[i].f_fn.clone()),
            ],
            [
                combo_h.left_mul(&sw.f_fn),
                DiffOp::multiplication(sw.f_fn.mul(&combo_f)).add(&sw.h_op),
            ],
        ]));
    }
    Ok([out[0].clone(), out[1].clone(), out[2].clone()])
}

/// `L(∂_k∂_j log θ)` for the basis of `cfg`.
pub fn build_second_order(cfg: &SpectralConfig, k: usize, j: usize) -> Result<MatDiffOp> {
    Ok(build_second_order_all(cfg)?[pair_index(k, j)].clone())
}

/// The pieces `k1, k2, h^j, g^j` of `Z_j`.
#[derive(Clone, Debug)]
pub struct ZParts {
    pub k: [CoeffExpr; 2],
    pub h: CoeffExpr,
    pub g: CoeffExpr,
}

fn z_parts(ctx: &Ctx, s: &Shifts, j: usize) -> Result<ZParts> {
    let gs = ctx.gradient_system(&s.p)?;
    // k1 θ1(p_i) + k2 θ2(p_i) = −θ_j(p_i − c') θ(p_i + c + c' + x) / θ(p_i + c + x)
    let rhs = [0, 1].map(|i| -> Result<CoeffExpr> {
        let tj = ctx.jet(sub(s.p[i], s.cp), 1)?.partial(&[j]);
        let num = theta_at(add(add(s.p[i], s.c), s.cp), &[]);
        Ok(num.div(&theta_at(add(s.p[i], s.c), &[])).scale(-tj))
    });
    let [r0, r1] = rhs;
    let k = gs.solve([r0?, r1?]);

    // h^j from z* = Δ + c'
    let star = add(s.delta, s.cp);
    let js = ctx.regular_jet(star, 1, "theta(Delta + c')")?;
    let tj_delta = ctx.jet(s.delta, 1)?.partial(&[j]);
    let w = add(star, s.c);
    let big = theta_at(w, &[]);
    let mut h = theta_at(add(w, s.cp), &[])
        .scale(tj_delta / js.value())
        .div(&big);
    for l in 0..2 {
        let log_l = theta_at(w, &[l])
            .div(&big)
            .sub(&CoeffExpr::constant(js.partial(&[l]) / js.value()));
        h = h.sub(&k[l].mul(&log_l));
    }

    // g^j from z = 0
    let origin = QuotientAt::new(ctx, [ZERO; 2], s.c, "theta(0)")?;
    let jcp = ctx.regular_jet(s.cp, 1, "theta(c')")?;
    let shifted = add(s.c, s.cp);
    let applied = k[0]
        .mul(&origin.dq(0))
        .add(&k[1].mul(&origin.dq(1)))
        .add(&h.mul(&origin.q()));
    let g = CoeffExpr::constant(-jcp.partial(&[j]) / jcp.value())
        .sub(&theta_at(shifted, &[j]).div(&theta_at(shifted, &[])))
        .sub(
            &applied
                .scale(origin.t * origin.t / jcp.value())
                .div(&theta_at(shifted, &[])),
        );
    Ok(ZParts { k, h, g })
}

/// `Z_j`, the operator acting on `(ψ, ψ_{c'})` as `∂_{z_j}`.
///
/// `second` holds the generators in the order `11, 12, 22`; functions
/// multiply operators from the left.
pub fn build_z(cfg: &SpectralConfig, second: &[MatDiffOp; 3], j: usize) -> Result<MatDiffOp> {
    let ctx = Ctx {
        p: &cfg.params,
        s: &cfg.settings,
    };
    let parts = z_parts(&ctx, &cfg.shifts(), j)?;
    let x1 = CoeffExpr::var(0);
    let x2 = CoeffExpr::var(1);
    let a = &second[pair_index(0, j)];
    let b = &second[pair_index(j, 1)];
    let lin = a
        .left_mul(&x1)
        .add(&b.left_mul(&x2))
        .left_mul(&CoeffExpr::real(-1.0));
    let extra = MatDiffOp::new([
        [DiffOp::partial(j), DiffOp::zero()],
        [
            DiffOp::partial(0)
                .left_mul(&parts.k[0])
                .add(&DiffOp::partial(1).left_mul(&parts.k[1]))
                .add(&DiffOp::multiplication(parts.h)),
            DiffOp::multiplication(parts.g)
                .add(&DiffOp::partial(j).left_mul(&CoeffExpr::real(2.0))),
        ],
    ]);
    Ok(lin.add(&extra))
}

/// Drops the terms of order above `max_order` after checking that their
/// sampled coefficients vanish relative to the operator's size.
pub fn drop_cancelled_terms(
    op: &MatDiffOp,
    max_order: usize,
    samples: &[[C64; 2]],
    ctx: &EvalContext,
    tol: f64,
) -> Result<MatDiffOp> {
    let norm = op_norm_sampled(op, samples, ctx)?;
    let mut entries: [[DiffOp; 2]; 2] = Default::default();
    for (i, row) in op.entries.iter().enumerate() {
        for (j, d) in row.iter().enumerate() {
            let mut keep = DiffOp::zero();
            for (beta, c) in d.terms() {
                if beta.total() <= max_order {
                    keep.accumulate(*beta, c.clone());
                    continue;
                }
                let size = op_norm_sampled(&DiffOp::term(*beta, c.clone()), samples, ctx)?;
                if size > tol * norm {
                    return Err(Error::BadFit {
                        residual: size / norm,
                        tol,
                    });
                }
            }
            entries[i][j] = keep;
        }
    }
    Ok(MatDiffOp::new(entries))
}

/// `[L(∂_k∂_j log θ), Z_s]`, the generator for `∂_k∂_j∂_s log θ`.
pub fn third_order_raw(
    second: &[MatDiffOp; 3],
    z: &[MatDiffOp; 2],
    k: usize,
    j: usize,
    s: usize,
    cap: usize,
) -> Result<MatDiffOp> {
    second[pair_index(k, j)].commutator(&z[s], cap)
}

/// All operators of the ring for one basis.
#[derive(Clone, Debug)]
pub struct OperatorRing {
    /// `L(ℓ11), L(ℓ12), L(ℓ22)`.
    pub second: [MatDiffOp; 3],
    pub z: [MatDiffOp; 2],
    pub identity: MatDiffOp,
    /// `L(ℓ111), L(ℓ112), L(ℓ122), L(ℓ222)`, each `[L(ℓ_kj), Z_s]` with
    /// the cancelled fourth-order terms removed.
    pub third: [MatDiffOp; 4],
}

impl OperatorRing {
    pub fn build(cfg: &SpectralConfig, samples: &[[C64; 2]]) -> Result<Self> {
        let second = build_second_order_all(cfg)?;
        let z = [build_z(cfg, &second, 0)?, build_z(cfg, &second, 1)?];
        let ctx = cfg.context();
        let cap = cfg.settings.order_cap;
        let third: Vec<MatDiffOp> = TRIPLES
            .par_iter()
            .map(|t| {
                let raw = third_order_raw(&second, &z, t[0], t[1], t[2], cap)?;
                drop_cancelled_terms(&raw, 3, samples, &ctx, cfg.settings.cancellation_tol)
            })
            .collect::<Result<_>>()?;
        Ok(OperatorRing {
            second,
            z,
            identity: MatDiffOp::identity(),
            third: [
                third[0].clone(),
                third[1].clone(),
                third[2].clone(),
                third[3].clone(),
            ],
        })
    }

    pub fn second_order(&self, k: usize, j: usize) -> &MatDiffOp {
        &self.second[pair_index(k, j)]
    }

    /// Operators with stable names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &MatDiffOp)> {
        let mut out: Vec<(String, &MatDiffOp)> = vec![("L1".into(), &self.identity)];
        for (i, (k, j)) in PAIRS.iter().enumerate() {
            out.push((format!("L{}{}", k + 1, j + 1), &self.second[i]));
        }
        for (i, t) in TRIPLES.iter().enumerate() {
            out.push((
                format!("L{}{}{}", t[0] + 1, t[1] + 1, t[2] + 1),
                &self.third[i],
            ));
        }
        out.push(("Z1".into(), &self.z[0]));
        out.push(("Z2".into(), &self.z[1]));
        out
    }
}

/// What an operator should do to the basis `(ψ, ψ_{c'})`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    /// Multiplication by `∂^coords log θ(z)`.
    LogDerivative(Vec<usize>),
    /// `∂_{z_j}`.
    Derivation(usize),
    Identity,
}

/// Compares `op` applied to `(ψ, ψ_{c'})` with the prescribed action at
/// every sample `(z, x)`.
pub fn eigen_discrepancy(
    p: &BAParams,
    op: &MatDiffOp,
    action: &Action,
    samples: &[(Point, [C64; 2])],
) -> Result<Discrepancy> {
    let ctx = p.context();
    let per: Vec<Result<Discrepancy>> = samples
        .par_iter()
        .map(|(z, x)| {
            let f = ZFrame::new(&p.omega, *z, p.eps)?;
            let psi = ExprFamily(psi_expr(p, &f));
            let psi_c = ExprFamily(psi_cprime_expr(p, &f)?);
            let mut ev = Evaluator::new(&ctx, *x);
            let fams: [&dyn Family; 2] = [&psi, &psi_c];
            let got = op.apply(fams, &mut ev)?;
            let want = match action {
                Action::LogDerivative(coords) => {
                    let lam = f.log_d(coords);
                    [lam * ev.eval(&psi.0)?, lam * ev.eval(&psi_c.0)?]
                }
                Action::Derivation(j) => [
                    ev.eval(&dz_psi_expr(p, &f, *j))?,
                    ev.eval(&dz_psi_cprime_expr(p, &f, *j)?)?,
                ],
                Action::Identity => [ev.eval(&psi.0)?, ev.eval(&psi_c.0)?],
            };
            Ok(Discrepancy::between(got[0], want[0]).merge(Discrepancy::between(got[1], want[1])))
        })
        .collect();
    per.into_iter()
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}

/// `A` with `A (ψ, ψ_{c'}) = (ψ, ψ_{c''})`, built from the points where the
/// `ψ_{c'}` term drops out: `p_i`, `Δ + c'` and `z = 0`.
pub fn basis_change(cfg: &SpectralConfig, c_second: Point) -> Result<MatDiffOp> {
    let ctx = Ctx {
        p: &cfg.params,
        s: &cfg.settings,
    };
    let s = cfg.shifts();
    let gs = ctx.gradient_system(&s.p)?;
    // a1 θ1(p_i) + a2 θ2(p_i) = −θ(p_i + c + c'' + x) θ(p_i − c'') / θ(p_i + c + x)
    let rhs = [0, 1].map(|i| -> Result<CoeffExpr> {
        let far = ctx.jet(sub(s.p[i], c_second), 0)?.value();
        Ok(theta_at(add(add(s.p[i], s.c), c_second), &[])
            .div(&theta_at(add(s.p[i], s.c), &[]))
            .scale(-far))
    });
    let [r0, r1] = rhs;
    let a = gs.solve([r0?, r1?]);

    let star_z = add(s.delta, s.cp);
    let star = QuotientAt::new(&ctx, star_z, s.c, "theta(Delta + c')")?;
    let far = ctx.jet(sub(star_z, c_second), 0)?.value();
    let target = theta_at(add(add(star_z, s.c), c_second), &[]).scale(far / (star.t * star.t));
    let a0 = target
        .sub(&a[0].mul(&star.dq(0)))
        .sub(&a[1].mul(&star.dq(1)))
        .div(&star.q());

    let origin = QuotientAt::new(&ctx, [ZERO; 2], s.c, "theta(0)")?;
    let t0 = origin.t;
    let theta_c2 = ctx.theta(c_second, "theta(c'')")?;
    let theta_c1 = ctx.theta(s.cp, "theta(c')")?;
    let psi2_zero = theta_at(add(s.c, c_second), &[]).scale(theta_c2 / (t0 * t0));
    let lower = a[0]
        .mul(&origin.dq(0))
        .add(&a[1].mul(&origin.dq(1)))
        .add(&a0.mul(&origin.q()));
    let b = psi2_zero
        .sub(&lower)
        .scale(t0 * t0 / theta_c1)
        .div(&theta_at(add(s.c, s.cp), &[]));

    Ok(MatDiffOp::new([
        [DiffOp::identity(), DiffOp::zero()],
        [
            DiffOp::partial(0)
                .left_mul(&a[0])
                .add(&DiffOp::partial(1).left_mul(&a[1]))
                .add(&DiffOp::multiplication(a0)),
            DiffOp::multiplication(b),
        ],
    ]))
}

/// Compares `A (ψ, ψ_{c'})` with `(ψ, ψ_{c''})` at the samples.
pub fn basis_change_discrepancy(
    p: &BAParams,
    a: &MatDiffOp,
    c_second: Point,
    samples: &[(Point, [C64; 2])],
) -> Result<Discrepancy> {
    let ctx = p.context();
    let target = BAParams {
        c_prime: c_second,
        ..p.clone()
    };
    let per: Vec<Result<Discrepancy>> = samples
        .par_iter()
        .map(|(z, x)| {
            let f = ZFrame::new(&p.omega, *z, p.eps)?;
            let psi = ExprFamily(psi_expr(p, &f));
            let psi_c = ExprFamily(psi_cprime_expr(p, &f)?);
            let mut ev = Evaluator::new(&ctx, *x);
            let got = a.apply([&psi, &psi_c], &mut ev)?;
            let want = [ev.eval(&psi.0)?, ev.eval(&psi_cprime_expr(&target, &f)?)?];
            Ok(Discrepancy::between(got[0], want[0]).merge(Discrepancy::between(got[1], want[1])))
        })
        .collect();
    per.into_iter()
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}

/// Coefficients `(a1, a2, a0, b)` of `ψ_{c''} = a1 ∂_{x1}ψ + a2 ∂_{x2}ψ + a0 ψ + b ψ_{c'}`
/// at one `x`, by least squares over sampled `z`. All five functions lie
/// in the four-dimensional level-2 part of the module, so the fit is exact.
pub fn basis_change_fit(
    p: &BAParams,
    c_second: Point,
    x: [C64; 2],
    zs: &[Point],
) -> Result<[C64; 4]> {
    let ctx = p.context();
    let target = BAParams {
        c_prime: c_second,
        ..p.clone()
    };
    let rows: Vec<Result<([C64; 4], C64)>> = zs
        .par_iter()
        .map(|z| {
            let f = ZFrame::new(&p.omega, *z, p.eps)?;
            let psi = psi_expr(p, &f);
            let mut ev = Evaluator::new(&ctx, x);
            let row = [
                ev.eval(&psi.diff(0))?,
                ev.eval(&psi.diff(1))?,
                ev.eval(&psi)?,
                ev.eval(&psi_cprime_expr(p, &f)?)?,
            ];
            Ok((row, ev.eval(&psi_cprime_expr(&target, &f)?)?))
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let weights: Vec<f64> = rows
        .iter()
        .map(|(r, v)| 1.0 / r.iter().chain([v]).map(|c| c.norm()).fold(0.0, f64::max))
        .collect();
    let n = rows.len();
    let m = DMatrix::from_fn(n, 4, |i, j| rows[i].0[j] * weights[i]);
    let rhs = DVector::from_fn(n, |i, _| rows[i].1 * weights[i]);
    let sol = least_squares(&m, &rhs, 1e10)?;
    Ok([sol[0], sol[1], sol[2], sol[3]])
}

/// The closed-form coefficients `(a1, a2, a0, b)` of a basis change at `x`.
pub fn basis_change_coefficients(
    a: &MatDiffOp,
    ctx: &EvalContext,
    x: [C64; 2],
) -> Result<[C64; 4]> {
    let mut ev = Evaluator::new(ctx, x);
    let mut get = |d: &DiffOp, beta: MultiIndex| -> Result<C64> {
        match d.coeff(beta) {
            Some(c) => ev.eval(c),
            None => Ok(ZERO),
        }
    };
    let low = a.entry(1, 0);
    Ok([
        get(low, MultiIndex::unit(0))?,
        get(low, MultiIndex::unit(1))?,
        get(low, MultiIndex::ZERO)?,
        get(a.entry(1, 1), MultiIndex::ZERO)?,
    ])
}

/// The nine functions `1`, `ℓ111, ℓ112, ℓ122, ℓ222`, `ℓ111 + ℓ_js`
/// (`js = 11, 12, 22`) and `ℓ12² − ℓ11 ℓ22` at `z`, with `ℓ = ∂… log θ`.
pub fn generator_functions(f: &ZFrame) -> [C64; 9] {
    let l = |c: &[usize]| f.log_d(c);
    let l111 = l(&[0, 0, 0]);
    [
        C64::new(1.0, 0.0),
        l111,
        l(&[0, 0, 1]),
        l(&[0, 1, 1]),
        l(&[1, 1, 1]),
        l111 + l(&[0, 0]),
        l111 + l(&[0, 1]),
        l111 + l(&[1, 1]),
        l(&[0, 1]) * l(&[0, 1]) - l(&[0, 0]) * l(&[1, 1]),
    ]
}

/// Numerical rank of the generator functions sampled at `count` points.
pub fn generator_rank(
    p: &BAParams,
    count: usize,
    seed: u64,
) -> Result<crate::bamodule::RankReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zs = (0..count)
        .map(|_| sample_z(&mut rng, &p.omega, p.eps))
        .collect::<Result<Vec<_>>>()?;
    let rows = zs
        .par_iter()
        .map(|z| Ok(generator_functions(&ZFrame::new(&p.omega, *z, p.eps)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut m = DMatrix::from_fn(rows.len(), 9, |i, j| rows[i][j]);
    for mut col in m.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= C64::new(n, 0.0);
        }
    }
    Ok(crate::bamodule::RankReport::from_matrix(&m, 9))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avgeom::{find_theta_zero, intersect_divisors, RootSettings};
    use crate::opcalc::{evaluate, sampled_relative_difference};
    use crate::RiemannMatrix;
    use std::sync::OnceLock;

    fn omega() -> RiemannMatrix {
        let i = |v: f64| C64::new(0.0, v);
        RiemannMatrix::new([[i(1.0), i(0.3)], [i(0.3), i(1.2)]]).unwrap()
    }

    fn c() -> Point {
        [C64::new(0.21, 0.13), C64::new(-0.17, 0.08)]
    }

    fn c_prime() -> Point {
        [C64::new(0.31, -0.05), C64::new(0.12, 0.27)]
    }

    fn config_for(cp: Point) -> SpectralConfig {
        let root = RootSettings {
            eps: 1e-14,
            ..RootSettings::default()
        };
        let delta = find_theta_zero(&omega(), 7, &root).unwrap();
        let (p1, p2) = intersect_divisors(&omega(), &cp, &root).unwrap();
        let params = BAParams::new(omega(), c(), cp, 1e-14, 1e-6).unwrap();
        SpectralConfig::new(params, delta, [p1, p2], BuildSettings::default(), 11).unwrap()
    }

    fn config() -> &'static SpectralConfig {
        static CFG: OnceLock<SpectralConfig> = OnceLock::new();
        CFG.get_or_init(|| config_for(c_prime()))
    }

    fn xs() -> Vec<[C64; 2]> {
        vec![
            [C64::new(0.03, -0.02), C64::new(-0.05, 0.04)],
            [C64::new(-0.06, 0.01), C64::new(0.02, 0.07)],
            [C64::new(0.0, 0.0), C64::new(0.0, 0.0)],
        ]
    }

    fn samples() -> Vec<(Point, [C64; 2])> {
        let zs = [
            [C64::new(0.05, 0.11), C64::new(-0.13, 0.02)],
            [C64::new(-0.21, 0.3), C64::new(0.17, -0.12)],
            [C64::new(0.33, -0.07), C64::new(0.04, 0.25)],
        ];
        zs.into_iter().zip(xs()).collect()
    }

    #[test]
    fn pair_order_does_not_matter() {
        let cfg = config();
        let a = build_second_order(cfg, 0, 1).unwrap();
        let b = build_second_order(cfg, 1, 0).unwrap();
        assert_eq!(
            sampled_relative_difference(&a, &b, &xs(), &cfg.context()).unwrap(),
            0.0
        );
    }

    #[test]
    fn diagonal_leading_term_is_minus_mixed_partial() {
        let cfg = config();
        let ctx = cfg.context();
        let op = build_second_order(cfg, 0, 1).unwrap();
        assert_eq!(op.order(), 2);
        let beta = MultiIndex::new(1, 1).unwrap();
        for x in xs() {
            for i in 0..2 {
                let diag = evaluate(op.entry(i, i).coeff(beta).unwrap(), &ctx, x).unwrap();
                assert!((diag + 1.0).norm() < 1e-12, "{diag}");
            }
        }
    }

    #[test]
    fn second_order_eigen_relation() {
        let cfg = config();
        for (k, j) in PAIRS {
            let op = build_second_order(cfg, k, j).unwrap();
            let d = eigen_discrepancy(
                &cfg.params,
                &op,
                &Action::LogDerivative(vec![k, j]),
                &samples(),
            )
            .unwrap();
            assert!(d.worst() < 1e-9, "L{}{}: {}", k + 1, j + 1, d.worst());
        }
    }

    #[test]
    fn z_operators_act_as_derivations() {
        let cfg = config();
        let second = build_second_order_all(cfg).unwrap();
        for j in 0..2 {
            let z = build_z(cfg, &second, j).unwrap();
            let d = eigen_discrepancy(&cfg.params, &z, &Action::Derivation(j), &samples()).unwrap();
            assert!(d.worst() < 1e-9, "Z{}: {}", j + 1, d.worst());
        }
    }

    #[test]
    fn identity_operator_has_identity_action() {
        let cfg = config();
        let d = eigen_discrepancy(
            &cfg.params,
            &MatDiffOp::identity(),
            &Action::Identity,
            &samples(),
        )
        .unwrap();
        assert_eq!(d.worst(), 0.0);
    }

    #[test]
    fn basis_change_to_same_shift_is_identity() {
        let cfg = config();
        let a = basis_change(cfg, cfg.params.c_prime).unwrap();
        let d =
            sampled_relative_difference(&a, &MatDiffOp::identity(), &xs(), &cfg.context()).unwrap();
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn alphas_do_not_depend_on_sign_of_shift() {
        let cfg = config();
        let neg = cfg
            .params
            .with_c_prime([-cfg.params.c_prime[0], -cfg.params.c_prime[1]], 1e-6)
            .unwrap();
        let a = solve_alphas(&neg, &cfg.settings, cfg.seed)
            .unwrap()
            .as_array();
        for (u, v) in a.iter().zip(cfg.alphas.as_array()) {
            assert!((u - v).norm() < 1e-9 * v.norm().max(1.0), "{u} vs {v}");
        }
    }

    #[test]
    fn dropping_a_live_term_is_refused() {
        let cfg = config();
        let mut entries: [[DiffOp; 2]; 2] = Default::default();
        entries[0][0] = DiffOp::term(MultiIndex::new(4, 0).unwrap(), CoeffExpr::one());
        let op = MatDiffOp::new(entries);
        let err = drop_cancelled_terms(&op, 3, &xs(), &cfg.context(), 1e-9).unwrap_err();
        assert!(matches!(err, Error::BadFit { .. }));
    }

    #[test]
    fn nine_generators_are_independent() {
        let r = generator_rank(&config().params, 24, 5).unwrap();
        assert_eq!(r.rank, 9);
    }
}
