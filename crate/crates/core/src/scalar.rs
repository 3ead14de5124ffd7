//! Scalar abstraction over the two float widths.
//!
//! All numeric code is generic over [`Scalar`] so the same kernels run in
//! f32 (runtime default) and f64 (gradient-check and oracle tests).

use num_traits::Float;

/// Floating-point element type for tensors.
///
/// Everything the kernels need beyond `num_traits::Float`: conversions from
/// f64/usize (constants, RNG draws are always sampled in f64 so both widths
/// consume identical random streams) and a dtype tag for serialization.
pub trait Scalar:
    Float + num_traits::NumAssignOps + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    /// Tag used in checkpoint manifests.
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
