//! Scalar abstraction over `f32`/`f64` plus small tensor helpers.
//!
//! The training pipeline runs in `f32` (matching the 32-bit checkpoint
//! payload exactly, so save/resume is lossless), while verification-grade
//! math (gradient checks, inversion oracles) instantiates the same code in
//! `f64`. All random draws go through `f64` first so the two element types
//! consume identical generator streams.

use ndarray::{Array4, LinalgScalar};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Element type of every tensor in the crate.
pub trait Scalar:
    LinalgScalar
    + num_traits::Float
    + std::ops::AddAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Gauss error function, used by the exact GELU activation.
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// One standard-normal draw, taken in `f64` and narrowed to `T`.
pub fn sample_standard_normal<T: Scalar, R: Rng>(rng: &mut R) -> T {
    let v: f64 = StandardNormal.sample(rng);
    T::from_f64(v)
}

/// One uniform draw from `[lo, hi)`, taken in `f64` and narrowed to `T`.
pub fn sample_uniform<T: Scalar, R: Rng>(rng: &mut R, lo: f64, hi: f64) -> T {
    T::from_f64(rng.gen_range(lo..hi))
}

/// Fill every element of `a` with independent standard-normal draws.
pub fn fill_standard_normal<T: Scalar, R: Rng>(a: &mut Array4<T>, rng: &mut R) {
    for v in a.iter_mut() {
        *v = sample_standard_normal(rng);
    }
}

/// True when every element is finite.
pub fn all_finite<T: Scalar>(a: &Array4<T>) -> bool {
    a.iter().all(|v| v.is_finite())
}
