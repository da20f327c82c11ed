use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::{Arc, OnceLock};

use crate::{Characteristic, MultiIndex, Point, C64};

/// `(∂^deriv θ[ch])(offset + lin · x, scale · Ω)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaNode {
    pub ch: Characteristic,
    pub scale: u32,
    pub offset: Point,
    /// `lin[k][j]` is the coefficient of `x_j` in argument `k`.
    pub lin: [[C64; 2]; 2],
    pub deriv: MultiIndex,
}

impl ThetaNode {
    /// `θ^{(deriv)}(offset + x)` for the Riemann theta function.
    pub fn shifted(offset: Point, deriv: MultiIndex) -> Self {
        ThetaNode {
            ch: Characteristic::zero(),
            scale: 1,
            offset,
            lin: IDENTITY,
            deriv,
        }
    }

    pub fn argument(&self, x: &[C64; 2]) -> Point {
        let l = &self.lin;
        [
            self.offset[0] + l[0][0] * x[0] + l[0][1] * x[1],
            self.offset[1] + l[1][0] * x[0] + l[1][1] * x[1],
        ]
    }
}

const ONE: C64 = C64::new(1.0, 0.0);
const ZERO: C64 = C64::new(0.0, 0.0);
const IDENTITY: [[C64; 2]; 2] = [[ONE, ZERO], [ZERO, ONE]];

#[derive(Clone, Debug)]
pub enum Kind {
    Const(C64),
    Var(usize),
    Theta(ThetaNode),
    /// `exp(⟨v, x⟩ + w)`.
    ExpLin {
        v: [C64; 2],
        w: C64,
    },
    Add(CoeffExpr, CoeffExpr),
    Mul(CoeffExpr, CoeffExpr),
    Div(CoeffExpr, CoeffExpr),
    Neg(CoeffExpr),
}

pub struct Node {
    kind: Kind,
    partials: [OnceLock<CoeffExpr>; 2],
}

/// Immutable, shared expression DAG for a function of `x = (x1, x2)`.
///
/// Partial derivatives are computed once per node and cached, so repeated
/// differentiation of shared subexpressions keeps the DAG shared.
#[derive(Clone)]
pub struct CoeffExpr(Arc<Node>);

impl CoeffExpr {
    /// Wraps a node without simplification.
    pub fn raw(kind: Kind) -> Self {
        CoeffExpr(Arc::new(Node {
            kind,
            partials: [OnceLock::new(), OnceLock::new()],
        }))
    }

    pub fn kind(&self) -> &Kind {
        &self.0.kind
    }

    /// Stable identity of the shared node.
    pub fn id(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    pub fn constant(c: C64) -> Self {
        Self::raw(Kind::Const(c))
    }

    pub fn real(r: f64) -> Self {
        Self::constant(C64::new(r, 0.0))
    }

    pub fn zero() -> Self {
        Self::real(0.0)
    }

    pub fn one() -> Self {
        Self::real(1.0)
    }

    /// The coordinate function `x_j`, `j` in `{0, 1}`.
    pub fn var(j: usize) -> Self {
        assert!(j < 2, "variable index {j} out of range");
        Self::raw(Kind::Var(j))
    }

    pub fn theta(node: ThetaNode) -> Self {
        Self::raw(Kind::Theta(node))
    }

    /// `θ^{(deriv)}(offset + x)`.
    pub fn theta_shifted(offset: Point, deriv: MultiIndex) -> Self {
        Self::theta(ThetaNode::shifted(offset, deriv))
    }

    pub fn exp_lin(v: [C64; 2], w: C64) -> Self {
        Self::raw(Kind::ExpLin { v, w })
    }

    pub fn as_const(&self) -> Option<C64> {
        match self.kind() {
            Kind::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(ZERO)
    }

    pub fn is_one(&self) -> bool {
        self.as_const() == Some(ONE)
    }

    pub fn add(&self, other: &CoeffExpr) -> CoeffExpr {
        match (self.as_const(), other.as_const()) {
            (Some(a), Some(b)) => Self::constant(a + b),
            (Some(a), _) if a == ZERO => other.clone(),
            (_, Some(b)) if b == ZERO => self.clone(),
            _ => Self::raw(Kind::Add(self.clone(), other.clone())),
        }
    }

    pub fn sub(&self, other: &CoeffExpr) -> CoeffExpr {
        self.add(&other.neg())
    }

    pub fn mul(&self, other: &CoeffExpr) -> CoeffExpr {
        match (self.as_const(), other.as_const()) {
            (Some(a), Some(b)) => Self::constant(a * b),
            (Some(a), _) if a == ZERO => Self::zero(),
            (_, Some(b)) if b == ZERO => Self::zero(),
            (Some(a), _) if a == ONE => other.clone(),
            (_, Some(b)) if b == ONE => self.clone(),
            _ => Self::raw(Kind::Mul(self.clone(), other.clone())),
        }
    }

    pub fn div(&self, other: &CoeffExpr) -> CoeffExpr {
        match (self.as_const(), other.as_const()) {
            (Some(a), _) if a == ZERO => Self::zero(),
            (_, Some(b)) if b == ONE => self.clone(),
            (Some(a), Some(b)) if b != ZERO => Self::constant(a / b),
            _ => Self::raw(Kind::Div(self.clone(), other.clone())),
        }
    }

    pub fn neg(&self) -> CoeffExpr {
        match self.kind() {
            Kind::Const(c) => Self::constant(-c),
            Kind::Neg(inner) => inner.clone(),
            _ => Self::raw(Kind::Neg(self.clone())),
        }
    }

    pub fn scale(&self, c: C64) -> CoeffExpr {
        Self::constant(c).mul(self)
    }

    /// Exact partial derivative `∂/∂x_j`.
    pub fn diff(&self, j: usize) -> CoeffExpr {
        self.0.partials[j]
            .get_or_init(|| self.compute_diff(j))
            .clone()
    }

    /// `∂^beta`, applied one coordinate at a time.
    pub fn diff_multi(&self, beta: MultiIndex) -> CoeffExpr {
        let mut e = self.clone();
        for j in beta.coordinates() {
            e = e.diff(j);
        }
        e
    }

    fn compute_diff(&self, j: usize) -> CoeffExpr {
        match self.kind() {
            Kind::Const(_) => Self::zero(),
            Kind::Var(k) => {
                if *k == j {
                    Self::one()
                } else {
                    Self::zero()
                }
            }
            Kind::Theta(t) => {
                let mut acc = Self::zero();
                for k in 0..2 {
                    let coef = t.lin[k][j];
                    if coef == ZERO {
                        continue;
                    }
                    let deriv = t
                        .deriv
                        .bump(k)
                        .expect("theta derivative order stays below the evaluator limit");
                    let node = Self::theta(ThetaNode { deriv, ..t.clone() });
                    acc = acc.add(&node.scale(coef));
                }
                acc
            }
            Kind::ExpLin { v, .. } => self.scale(v[j]),
            Kind::Add(a, b) => a.diff(j).add(&b.diff(j)),
            Kind::Mul(a, b) => a.diff(j).mul(b).add(&a.mul(&b.diff(j))),
            Kind::Div(a, b) => {
                // a'/b - (a/b) b'/b, so no denominator is squared
                a.diff(j).div(b).sub(&self.mul(&b.diff(j).div(b)))
            }
            Kind::Neg(a) => a.diff(j).neg(),
        }
    }

    /// Number of distinct nodes reachable from this one.
    pub fn node_count(&self) -> usize {
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(e) = stack.pop() {
            if !seen.insert(e.id()) {
                continue;
            }
            stack.extend(e.children().into_iter().cloned());
        }
        seen.len()
    }

    pub fn children(&self) -> Vec<&CoeffExpr> {
        match self.kind() {
            Kind::Add(a, b) | Kind::Mul(a, b) | Kind::Div(a, b) => vec![a, b],
            Kind::Neg(a) => vec![a],
            _ => Vec::new(),
        }
    }
}

impl fmt::Debug for CoeffExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind() {
            Kind::Const(c) => write!(f, "{c}"),
            Kind::Var(j) => write!(f, "x{}", j + 1),
            Kind::Theta(t) => write!(f, "theta{}[s={}]", t.deriv, t.scale),
            Kind::ExpLin { .. } => write!(f, "explin"),
            Kind::Add(a, b) => write!(f, "({a:?} + {b:?})"),
            Kind::Mul(a, b) => write!(f, "({a:?} * {b:?})"),
            Kind::Div(a, b) => write!(f, "({a:?} / {b:?})"),
            Kind::Neg(a) => write!(f, "-{a:?}"),
        }
    }
}

macro_rules! binop {
    ($tr:ident, $m:ident) => {
        impl $tr<&CoeffExpr> for &CoeffExpr {
            type Output = CoeffExpr;
            fn $m(self, rhs: &CoeffExpr) -> CoeffExpr {
                CoeffExpr::$m(self, rhs)
            }
        }
        impl $tr<CoeffExpr> for CoeffExpr {
            type Output = CoeffExpr;
            fn $m(self, rhs: CoeffExpr) -> CoeffExpr {
                CoeffExpr::$m(&self, &rhs)
            }
        }
        impl $tr<&CoeffExpr> for CoeffExpr {
            type Output = CoeffExpr;
            fn $m(self, rhs: &CoeffExpr) -> CoeffExpr {
                CoeffExpr::$m(&self, rhs)
            }
        }
        impl $tr<CoeffExpr> for &CoeffExpr {
            type Output = CoeffExpr;
            fn $m(self, rhs: CoeffExpr) -> CoeffExpr {
                CoeffExpr::$m(self, &rhs)
            }
        }
    };
}

binop!(Add, add);
binop!(Sub, sub);
binop!(Mul, mul);
binop!(Div, div);

impl Neg for CoeffExpr {
    type Output = CoeffExpr;
    fn neg(self) -> CoeffExpr {
        CoeffExpr::neg(&self)
    }
}

impl Neg for &CoeffExpr {
    type Output = CoeffExpr;
    fn neg(self) -> CoeffExpr {
        CoeffExpr::neg(self)
    }
}

impl From<C64> for CoeffExpr {
    fn from(c: C64) -> Self {
        CoeffExpr::constant(c)
    }
}

impl From<f64> for CoeffExpr {
    fn from(r: f64) -> Self {
        CoeffExpr::real(r)
    }
}
