//! Symbolic calculus of differential operators in `x = (x1, x2)` whose
//! coefficients are exact expressions built from theta functions.

pub mod diffop;
pub mod eval;
pub mod expr;
pub mod serial;

pub use diffop::{
    commutator_residual, op_norm_sampled, sampled_relative_difference, Coefficients, DiffOp,
    ExprFamily, Family, MatDiffOp, TabulatedFamily, DEFAULT_ORDER_CAP,
};
pub use eval::{evaluate, EvalContext, Evaluator};
pub use expr::{CoeffExpr, Kind, ThetaNode};
pub use serial::{operators_from_json, operators_to_json, NodeTable};
