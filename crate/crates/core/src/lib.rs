//! Desk-scale preference optimization for sequential recommendation.
//!
//! This crate trains a small differentiable autoregressive policy to rank the
//! next item a user interacts with, then sharpens it with preference losses:
//! DPO, SimPO, S-DPO, and NAPO (softmax preference over a hybrid negative set
//! with in-batch negative sharing and a dynamically adjusted reward margin).
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! 64-bit is the default everywhere and is what all pinned tolerances assume.

pub mod autodiff;
pub mod aux;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod losses;
pub mod margin;
pub mod math;
pub mod policy;
pub mod scalar;
pub mod sharing;
pub mod trainer;

pub use scalar::Scalar;

/// Default-precision (64-bit) concrete types.
pub type Policy = policy::PolicyParams<f64>;
pub type Aux = aux::AuxParams<f64>;
pub type Tape = autodiff::Tape<f64>;

/// Reduced-precision (32-bit) concrete types, selected by the CLI's
/// `--precision f32` escape hatch.
pub type PolicyF32 = policy::PolicyParams<f32>;
pub type AuxF32 = aux::AuxParams<f32>;
pub type TapeF32 = autodiff::Tape<f32>;
