//! Scalar abstraction so the whole stack runs at f32 or f64.
//!
//! Everything numeric in this crate is generic over [`Scalar`]. The crate
//! root exports f64 aliases (the default precision; see the type aliases in
//! `lib.rs`), with f32 available as a faster, lower-precision path.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

pub trait Scalar:
    Float + num_traits::NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}
