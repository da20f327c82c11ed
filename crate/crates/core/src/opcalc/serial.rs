use std::collections::HashMap;

use serde_json::{json, Value};

use num_rational::Rational64;

use super::diffop::{Coefficients, MatDiffOp};
use super::expr::{CoeffExpr, Kind, ThetaNode};
use crate::error::{Error, Result};
use crate::{Characteristic, MultiIndex, C64};

fn pair(c: &C64) -> Value {
    json!([c.re, c.im])
}

/// Flattens expression DAGs into a node table, children before parents.
#[derive(Default)]
pub struct NodeTable {
    index: HashMap<usize, usize>,
    nodes: Vec<Value>,
    // holds the visited nodes so their addresses stay unique
    keep: Vec<CoeffExpr>,
}

impl NodeTable {
    pub fn new() -> Self {
        NodeTable::default()
    }

    /// Index of `root` in the table, inserting it and its descendants.
    pub fn insert(&mut self, root: &CoeffExpr) -> usize {
        let mut stack: Vec<(CoeffExpr, bool)> = vec![(root.clone(), false)];
        while let Some((e, expanded)) = stack.pop() {
            if self.index.contains_key(&e.id()) {
                continue;
            }
            if !expanded {
                let kids: Vec<CoeffExpr> = e.children().into_iter().cloned().collect();
                stack.push((e, true));
                // reversed so the left child is numbered first
                for c in kids.into_iter().rev() {
                    if !self.index.contains_key(&c.id()) {
                        stack.push((c, false));
                    }
                }
                continue;
            }
            let v = self.encode(&e);
            self.index.insert(e.id(), self.nodes.len());
            self.nodes.push(v);
            self.keep.push(e);
        }
        self.index[&root.id()]
    }

    fn encode(&self, e: &CoeffExpr) -> Value {
        let id = |c: &CoeffExpr| self.index[&c.id()];
        match e.kind() {
            Kind::Const(c) => json!({"const": pair(c)}),
            Kind::Var(j) => json!({"var": j}),
            Kind::Theta(t) => json!({"theta": {
                "char": [
                    [t.ch.a[0].to_string(), t.ch.a[1].to_string()],
                    [t.ch.b[0].to_string(), t.ch.b[1].to_string()],
                ],
                "scale": t.scale,
                "offset": [pair(&t.offset[0]), pair(&t.offset[1])],
                "lin": [
                    [pair(&t.lin[0][0]), pair(&t.lin[0][1])],
                    [pair(&t.lin[1][0]), pair(&t.lin[1][1])],
                ],
                "deriv": [t.deriv.d1(), t.deriv.d2()],
            }}),
            Kind::ExpLin { v, w } => json!({"exp_lin": {
                "v": [pair(&v[0]), pair(&v[1])],
                "w": pair(w),
            }}),
            Kind::Add(a, b) => json!({"add": [id(a), id(b)]}),
            Kind::Mul(a, b) => json!({"mul": [id(a), id(b)]}),
            Kind::Div(a, b) => json!({"div": [id(a), id(b)]}),
            Kind::Neg(a) => json!({"neg": id(a)}),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn into_nodes(self) -> Vec<Value> {
        self.nodes
    }
}

/// JSON form of a named list of matrix operators sharing one node table.
///
/// Each operator lists its nonzero entries as `{row, col, beta, coeff}`
/// sorted by entry and then by multi-index; `coeff` points into `nodes`.
pub fn operators_to_json(ops: &[(String, &MatDiffOp)]) -> Value {
    let mut table = NodeTable::new();
    let mut out = Vec::new();
    for (name, op) in ops {
        let mut terms = Vec::new();
        for ((i, j), beta, c) in op.coefficients() {
            let k = table.insert(&c);
            terms.push(json!({
                "row": i,
                "col": j,
                "beta": [beta.d1(), beta.d2()],
                "coeff": k,
            }));
        }
        out.push(json!({"name": name, "order": op.order(), "terms": terms}));
    }
    json!({"operators": out, "nodes": table.into_nodes()})
}

fn bad(what: &str) -> Error {
    Error::Serialization(format!("malformed {what}"))
}

fn read_pair(v: &Value) -> Result<C64> {
    match v.as_array().map(|a| a.as_slice()) {
        Some([re, im]) => Ok(C64::new(
            re.as_f64().ok_or_else(|| bad("complex number"))?,
            im.as_f64().ok_or_else(|| bad("complex number"))?,
        )),
        _ => Err(bad("complex number")),
    }
}

fn read_pair2(v: &Value) -> Result<[C64; 2]> {
    match v.as_array().map(|a| a.as_slice()) {
        Some([a, b]) => Ok([read_pair(a)?, read_pair(b)?]),
        _ => Err(bad("complex vector")),
    }
}

fn read_index(v: &Value, len: usize) -> Result<usize> {
    let i = v.as_u64().ok_or_else(|| bad("node reference"))? as usize;
    if i >= len {
        return Err(bad("forward node reference"));
    }
    Ok(i)
}

fn read_ratio(v: &Value) -> Result<Rational64> {
    v.as_str()
        .and_then(|s| s.parse::<Rational64>().ok())
        .ok_or_else(|| bad("characteristic"))
}

fn decode(v: &Value, built: &[CoeffExpr]) -> Result<CoeffExpr> {
    let obj = v.as_object().ok_or_else(|| bad("node"))?;
    let (tag, body) = obj.iter().next().ok_or_else(|| bad("node"))?;
    let n = built.len();
    let pair_of = |b: &Value| -> Result<(CoeffExpr, CoeffExpr)> {
        match b.as_array().map(|a| a.as_slice()) {
            Some([l, r]) => Ok((
                built[read_index(l, n)?].clone(),
                built[read_index(r, n)?].clone(),
            )),
            _ => Err(bad("binary node")),
        }
    };
    let kind = match tag.as_str() {
        "const" => Kind::Const(read_pair(body)?),
        "var" => match body.as_u64() {
            Some(j) if j < 2 => Kind::Var(j as usize),
            _ => return Err(bad("variable")),
        },
        "theta" => {
            let ch = &body["char"];
            let a = [read_ratio(&ch[0][0])?, read_ratio(&ch[0][1])?];
            let b = [read_ratio(&ch[1][0])?, read_ratio(&ch[1][1])?];
            let d = &body["deriv"];
            let deriv = MultiIndex::new(
                d[0].as_u64().ok_or_else(|| bad("derivative"))? as u8,
                d[1].as_u64().ok_or_else(|| bad("derivative"))? as u8,
            )?;
            let scale = body["scale"]
                .as_u64()
                .filter(|s| *s >= 1)
                .ok_or_else(|| bad("scale"))?;
            Kind::Theta(ThetaNode {
                ch: Characteristic::new(a, b),
                scale: scale as u32,
                offset: read_pair2(&body["offset"])?,
                lin: [read_pair2(&body["lin"][0])?, read_pair2(&body["lin"][1])?],
                deriv,
            })
        }
        "exp_lin" => Kind::ExpLin {
            v: read_pair2(&body["v"])?,
            w: read_pair(&body["w"])?,
        },
        "add" => {
            let (l, r) = pair_of(body)?;
            Kind::Add(l, r)
        }
        "mul" => {
            let (l, r) = pair_of(body)?;
            Kind::Mul(l, r)
        }
        "div" => {
            let (l, r) = pair_of(body)?;
            Kind::Div(l, r)
        }
        "neg" => Kind::Neg(built[read_index(body, n)?].clone()),
        other => return Err(Error::Serialization(format!("unknown node kind {other}"))),
    };
    Ok(CoeffExpr::raw(kind))
}

/// Inverse of [`operators_to_json`].
pub fn operators_from_json(v: &Value) -> Result<Vec<(String, MatDiffOp)>> {
    let nodes = v["nodes"].as_array().ok_or_else(|| bad("node table"))?;
    let mut built: Vec<CoeffExpr> = Vec::with_capacity(nodes.len());
    for node in nodes {
        let e = decode(node, &built)?;
        built.push(e);
    }
    let ops = v["operators"]
        .as_array()
        .ok_or_else(|| bad("operator list"))?;
    let mut out = Vec::with_capacity(ops.len());
    for op in ops {
        let name = op["name"]
            .as_str()
            .ok_or_else(|| bad("operator name"))?
            .to_string();
        let mut m = MatDiffOp::zero();
        for t in op["terms"].as_array().ok_or_else(|| bad("term list"))? {
            let row = t["row"]
                .as_u64()
                .filter(|r| *r < 2)
                .ok_or_else(|| bad("row"))? as usize;
            let col = t["col"]
                .as_u64()
                .filter(|c| *c < 2)
                .ok_or_else(|| bad("column"))? as usize;
            let beta = MultiIndex::new(
                t["beta"][0].as_u64().ok_or_else(|| bad("multi-index"))? as u8,
                t["beta"][1].as_u64().ok_or_else(|| bad("multi-index"))? as u8,
            )?;
            let coeff = built[read_index(&t["coeff"], built.len())?].clone();
            m.entries[row][col].accumulate(beta, coeff);
        }
        out.push((name, m));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opcalc::{evaluate, DiffOp, EvalContext};
    use crate::RiemannMatrix;

    #[test]
    fn round_trip_preserves_values_and_bytes() {
        let i = |v: f64| C64::new(0.0, v);
        let omega = RiemannMatrix::new([[i(1.0), i(0.3)], [i(0.3), i(1.2)]]).unwrap();
        let ctx = EvalContext::new(omega, 1e-14);
        let th = CoeffExpr::theta(ThetaNode {
            ch: Characteristic::section([1, 0], 2),
            scale: 2,
            offset: [C64::new(0.1, 0.2), C64::new(-0.3, 0.05)],
            lin: [
                [C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
                [C64::new(0.0, 0.0), C64::new(1.0, 0.0)],
            ],
            deriv: MultiIndex::new(1, 0).unwrap(),
        });
        let e = th
            .mul(&CoeffExpr::exp_lin(
                [C64::new(0.2, 0.0), C64::new(0.0, -1.0)],
                C64::new(0.1, 0.1),
            ))
            .div(&CoeffExpr::var(1).add(&CoeffExpr::real(3.0)))
            .neg();
        let op = MatDiffOp::new([
            [DiffOp::partial(0).left_mul(&e), DiffOp::identity()],
            [DiffOp::zero(), DiffOp::multiplication(e.clone())],
        ]);
        let json = operators_to_json(&[("P".to_string(), &op)]);
        let back = operators_from_json(&json).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].0, "P");
        let again = operators_to_json(&[("P".to_string(), &back[0].1)]);
        assert_eq!(json.to_string(), again.to_string());
        let x = [C64::new(0.03, 0.01), C64::new(-0.02, 0.04)];
        let c0 = back[0].1.entry(1, 1).coeff(MultiIndex::ZERO).unwrap();
        assert_eq!(
            evaluate(c0, &ctx, x).unwrap(),
            evaluate(&e, &ctx, x).unwrap()
        );
    }

    #[test]
    fn rejects_forward_references() {
        let v = serde_json::json!({"nodes": [{"neg": 0}], "operators": []});
        assert!(operators_from_json(&v).is_err());
    }
}
