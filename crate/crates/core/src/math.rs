//! Numerically careful scalar kernels shared by the whole engine.
//!
//! Every log-domain reduction in the crate funnels through these functions so
//! the stability policy lives in exactly one place:
//!
//! * `log-sum-exp` is always max-shifted — no raw `exp` of an unbounded
//!   argument anywhere.
//! * `-log(sigmoid(z))` is never evaluated literally; losses use
//!   [`softplus`]`(-z)`, which is the same quantity in exact arithmetic and
//!   stays finite for `|z|` far beyond anything training produces.
//!
//! Summation order is fixed (left to right) so results are bit-reproducible
//! run to run.

use crate::scalar::Scalar;

/// `log(sum_i exp(xs[i]))`, max-shifted.
///
/// Panics on an empty slice: callers guarantee at least one element (negative
/// sets are validated non-empty before any loss is formed).
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    assert!(!xs.is_empty(), "log_sum_exp of empty slice");
    let mut m = xs[0];
    for &x in &xs[1..] {
        if x > m {
            m = x;
        }
    }
    // All shifted arguments are <= 0, so exp never overflows.
    let mut acc = T::zero();
    for &x in xs {
        acc = acc + (x - m).exp();
    }
    m + acc.ln()
}

/// `log(1 + exp(x))` without overflow on either tail.
///
/// `softplus(-z)` equals `-log(sigmoid(z))`, which is how every pairwise and
/// list-wise loss in this crate is written.
pub fn softplus<T: Scalar>(x: T) -> T {
    let zero = T::zero();
    if x > zero {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, evaluated on the non-overflowing branch for each sign.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// In-place softmax of `xs` (max-shifted). Used by tape backward passes and
/// by decoding diagnostics; never called on an empty slice.
pub fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    assert!(!xs.is_empty(), "softmax of empty slice");
    let lse = log_sum_exp(xs);
    for x in xs.iter_mut() {
        *x = (*x - lse).exp();
    }
}

/// Plain dot product with fixed summation order.
pub fn dot<T: Scalar>(xs: &[T], ys: &[T]) -> T {
    debug_assert_eq!(xs.len(), ys.len());
    let mut acc = T::zero();
    for (&x, &y) in xs.iter().zip(ys) {
        acc = acc + x * y;
    }
    acc
}

/// Euclidean norm with fixed summation order.
pub fn l2_norm<T: Scalar>(xs: &[T]) -> T {
    let mut acc = T::zero();
    for &x in xs {
        acc = acc + x * x;
    }
    acc.sqrt()
}
