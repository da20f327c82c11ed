use std::collections::HashMap;

use super::expr::{CoeffExpr, Kind, ThetaNode};
use crate::error::{Error, Result};
use crate::jet::ThetaJet;
use crate::{Characteristic, RiemannMatrix, C64};

/// Relative size below which a denominator counts as vanishing.
pub const DIVISION_GUARD: f64 = 1e-13;

/// What an expression needs besides `x`: the period matrix and the series
/// accuracy.
#[derive(Clone, Debug)]
pub struct EvalContext {
    pub omega: RiemannMatrix,
    pub eps: f64,
}

impl EvalContext {
    pub fn new(omega: RiemannMatrix, eps: f64) -> Self {
        EvalContext { omega, eps }
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
struct JetKey {
    ch: Characteristic,
    scale: u32,
    arg: [u64; 4],
}

/// Memoizing evaluator of expressions at one point `x`.
///
/// Values are cached per shared node and theta jets per argument, so
/// evaluating many operators built from common subexpressions at the same
/// `x` costs one pass over the union of their DAGs.
pub struct Evaluator<'a> {
    ctx: &'a EvalContext,
    x: [C64; 2],
    memo: HashMap<usize, C64>,
    // keeps memoized nodes alive so their addresses stay unique
    keep: Vec<CoeffExpr>,
    jets: HashMap<JetKey, ThetaJet>,
    scaled: HashMap<u32, RiemannMatrix>,
}

impl<'a> Evaluator<'a> {
    pub fn new(ctx: &'a EvalContext, x: [C64; 2]) -> Self {
        Evaluator {
            ctx,
            x,
            memo: HashMap::new(),
            keep: Vec::new(),
            jets: HashMap::new(),
            scaled: HashMap::new(),
        }
    }

    pub fn x(&self) -> [C64; 2] {
        self.x
    }

    pub fn context(&self) -> &EvalContext {
        self.ctx
    }

    pub fn eval(&mut self, root: &CoeffExpr) -> Result<C64> {
        if let Some(v) = self.memo.get(&root.id()) {
            return Ok(*v);
        }
        let mut stack: Vec<(CoeffExpr, bool)> = vec![(root.clone(), false)];
        while let Some((e, expanded)) = stack.pop() {
            if self.memo.contains_key(&e.id()) {
                continue;
            }
            let children = e.children();
            if !expanded && children.iter().any(|c| !self.memo.contains_key(&c.id())) {
                let kids: Vec<CoeffExpr> = children.into_iter().cloned().collect();
                stack.push((e, true));
                for c in kids {
                    if !self.memo.contains_key(&c.id()) {
                        stack.push((c, false));
                    }
                }
                continue;
            }
            let v = self.eval_node(&e)?;
            self.memo.insert(e.id(), v);
            self.keep.push(e);
        }
        Ok(self.memo[&root.id()])
    }

    fn child(&self, e: &CoeffExpr) -> C64 {
        self.memo[&e.id()]
    }

    fn eval_node(&mut self, e: &CoeffExpr) -> Result<C64> {
        Ok(match e.kind() {
            Kind::Const(c) => *c,
            Kind::Var(j) => self.x[*j],
            Kind::Theta(t) => self.theta(t)?,
            Kind::ExpLin { v, w } => (v[0] * self.x[0] + v[1] * self.x[1] + w).exp(),
            Kind::Add(a, b) => self.child(a) + self.child(b),
            Kind::Mul(a, b) => self.child(a) * self.child(b),
            Kind::Div(a, b) => {
                let (num, den) = (self.child(a), self.child(b));
                let floor = DIVISION_GUARD * num.norm().max(1.0);
                if !(den.norm() >= floor) {
                    return Err(Error::OnDivisor {
                        value: den.norm(),
                        floor,
                    });
                }
                num / den
            }
            Kind::Neg(a) => -self.child(a),
        })
    }

    fn theta(&mut self, t: &ThetaNode) -> Result<C64> {
        let arg = t.argument(&self.x);
        let key = JetKey {
            ch: t.ch.clone(),
            scale: t.scale,
            arg: [
                arg[0].re.to_bits(),
                arg[0].im.to_bits(),
                arg[1].re.to_bits(),
                arg[1].im.to_bits(),
            ],
        };
        let need = t.deriv.total();
        if let Some(jet) = self.jets.get(&key) {
            if jet_order(jet) >= need {
                return Ok(jet.d(t.deriv));
            }
        }
        let order = need.max(4);
        let omega = if t.scale == 1 {
            self.ctx.omega.clone()
        } else {
            self.scaled
                .entry(t.scale)
                .or_insert_with(|| self.ctx.omega.scaled(t.scale))
                .clone()
        };
        let jet = ThetaJet::with_char(&omega, &t.ch, &arg, order, self.ctx.eps)?;
        let v = jet.d(t.deriv);
        self.jets.insert(key, jet);
        Ok(v)
    }
}

fn jet_order(jet: &ThetaJet) -> usize {
    jet.order()
}

/// Evaluates `e` at `x`.
pub fn evaluate(e: &CoeffExpr, ctx: &EvalContext, x: [C64; 2]) -> Result<C64> {
    Evaluator::new(ctx, x).eval(e)
}
