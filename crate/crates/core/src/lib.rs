//! Commuting rings of 2×2 matrix differential operators attached to a
//! principally polarized Abelian surface.
//!
//! The crate evaluates genus-2 theta functions, locates the points of the
//! theta divisor that the operator formulas need, builds the operators as
//! exact expression DAGs in the spectral parameters `x = (x1, x2)`, and
//! checks the identities they satisfy by sampling.

// NaN must fail every threshold test, so negated comparisons are deliberate;
// 2×2 index loops mirror the formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]
pub mod avgeom;
pub mod bamodule;
pub mod error;
pub mod harness;
pub mod jet;
pub mod linalg;
pub mod nakayashiki;
pub mod opcalc;
pub mod scalar;
pub mod theta;

pub use error::{Error, Result};
pub use scalar::Real;
pub use theta::{Characteristic, MultiIndex};

/// Double precision complex number, the working type outside the theta layer.
pub type C64 = num_complex::Complex<f64>;

/// Period matrix in double precision.
pub type RiemannMatrix = theta::RiemannMatrix<f64>;

/// Period matrix in single precision.
pub type RiemannMatrix32 = theta::RiemannMatrix<f32>;

/// A point of `C^2`.
pub type Point = [C64; 2];
