//! Floating-point abstraction for the numeric core.
//!
//! Everything numerical in this crate is generic over [`Scalar`] so the same
//! code runs in 64-bit (the default, used by the CLI and by every pinned
//! tolerance in the test suite) and in 32-bit (available for
//! memory-constrained experiments, with loosened tolerances). Checkpoints are
//! always written as 64-bit values on disk; `f32 -> f64` widening is exact, so
//! 32-bit runs still round-trip bit-exactly.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Bundle trait for the scalar type the engine computes in.
///
/// A deliberate superset of what each individual routine needs, so signatures
/// stay short. Implemented for `f32` and `f64`; nothing else is supported.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless-enough conversion from `f64` literals and config values.
    /// Panics on values no finite scalar can represent (never happens for
    /// configuration-range inputs).
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant not representable in scalar type")
    }

    /// Widen to `f64` for reporting and serialization.
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<T: Scalar>(v: f64) -> f64 {
        T::from_f64_c(v).to_f64_c()
    }

    #[test]
    fn f64_roundtrip_is_identity() {
        for v in [0.0, -1.5, 1e300, 1e-300, std::f64::consts::PI] {
            assert_eq!(roundtrip::<f64>(v), v);
        }
    }

    #[test]
    fn f32_roundtrip_rounds_once() {
        let v = std::f64::consts::PI;
        assert_eq!(roundtrip::<f32>(v), std::f32::consts::PI as f64);
    }
}
