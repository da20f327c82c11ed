//! Floating point scalar abstraction for the theta layer.

use std::fmt::Debug;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Real scalar usable by the theta series: `f32` or `f64`.
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}
