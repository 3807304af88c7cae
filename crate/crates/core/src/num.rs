//! Element-type abstraction for model math.
//!
//! The pipeline runs in `f32`; tests instantiate the same code in `f64` where
//! a finite-difference oracle needs the extra precision.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;

pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + std::ops::AddAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn into_f64(self) -> f64 {
        self
    }
}
