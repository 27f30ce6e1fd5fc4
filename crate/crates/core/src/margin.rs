//! Batch-level dynamic reward margin.
//!
//! The auxiliary model rates each negative's reliability:
//! `conf = (1 - sr_score) / 2`, so an item the recommender finds totally
//! implausible for the sequence (cosine −1) gets confidence 1, and an item
//! indistinguishable from a plausible next pick gets 0. Each batch's mean
//! confidence is compared against a momentum-tracked baseline `r0` and the
//! margin stretches or shrinks around `gamma0`:
//!
//! ```text
//! gamma = max(0, (1 + alpha * (mean_conf - r0)) * gamma0)
//! r0   <- m * r0 + (1 - m) * mean_conf        (after use)
//! ```
//!
//! `r0` starts as the first batch's mean confidence, so the first emitted
//! margin is exactly `gamma0`. The margin is consumed by the loss as a plain
//! constant — no gradient flows through it.

use crate::aux::{sr_score_from_embedding, AuxError, AuxParams};
use crate::scalar::Scalar;
use crate::sharing::HybridNegativeSet;

#[derive(Debug, thiserror::Error)]
pub enum MarginError {
    #[error("gamma0 must be positive, got {0}")]
    BadGamma0(f64),
    #[error("alpha must be nonnegative, got {0}")]
    BadAlpha(f64),
    #[error("momentum must lie in [0, 1), got {0}")]
    BadMomentum(f64),
    #[error("batch mean confidence {0} outside [0, 1]")]
    ConfidenceOutOfRange(f64),
    #[error("no negatives to average confidence over")]
    EmptyBatch,
    #[error(transparent)]
    Aux(#[from] AuxError),
}

pub type MarginResult<T> = Result<T, MarginError>;

/// Margin controller state, mutated once per batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginState<T> {
    gamma0: T,
    alpha: T,
    momentum: T,
    r0: Option<T>,
    step: u64,
}

impl<T: Scalar> MarginState<T> {
    pub fn new(gamma0: T, alpha: T, momentum: T) -> MarginResult<Self> {
        if gamma0 <= T::zero() {
            return Err(MarginError::BadGamma0(gamma0.to_f64_c()));
        }
        if alpha < T::zero() {
            return Err(MarginError::BadAlpha(alpha.to_f64_c()));
        }
        if momentum < T::zero() || momentum >= T::one() {
            return Err(MarginError::BadMomentum(momentum.to_f64_c()));
        }
        Ok(MarginState { gamma0, alpha, momentum, r0: None, step: 0 })
    }

    pub fn gamma0(&self) -> T {
        self.gamma0
    }

    pub fn r0(&self) -> Option<T> {
        self.r0
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Drop the baseline so the next batch re-anchors it.
    pub fn reset_baseline(&mut self) {
        self.r0 = None;
    }

    /// Emit this batch's margin, then fold the batch's mean confidence into
    /// the baseline. On the first call the baseline is seeded with the mean
    /// itself, so the deviation is zero and the margin comes out `gamma0`.
    pub fn batch_gamma(&mut self, batch_mean_conf: T) -> MarginResult<T> {
        if !(T::zero()..=T::one()).contains(&batch_mean_conf) {
            return Err(MarginError::ConfidenceOutOfRange(batch_mean_conf.to_f64_c()));
        }
        let r0 = *self.r0.get_or_insert(batch_mean_conf);
        let gamma =
            ((T::one() + self.alpha * (batch_mean_conf - r0)) * self.gamma0).max(T::zero());
        self.r0 = Some(self.momentum * r0 + (T::one() - self.momentum) * batch_mean_conf);
        self.step += 1;
        Ok(gamma)
    }
}

/// `conf(s, y) = (1 - sr_score(s, y)) / 2`, in `[0, 1]`.
pub fn confidence<T: Scalar>(
    aux: &AuxParams<T>,
    seq_emb: &[T],
    item_idx: usize,
) -> MarginResult<T> {
    let s = sr_score_from_embedding(aux, seq_emb, item_idx)?;
    Ok((T::one() - s) / T::from_f64_c(2.0))
}

/// Mean confidence over every (sequence, negative-entry) pair in the batch.
/// Shared entries are rated against the sequence RECEIVING them — the set is
/// the receiver's, even though the score inside was computed elsewhere.
pub fn batch_mean_confidence<T: Scalar, V: Copy>(
    aux: &AuxParams<T>,
    seq_embs: &[Vec<T>],
    sets: &[HybridNegativeSet<V>],
) -> MarginResult<T> {
    if seq_embs.len() != sets.len() {
        return Err(MarginError::EmptyBatch);
    }
    let mut total = T::zero();
    let mut count = 0usize;
    for (emb, set) in seq_embs.iter().zip(sets) {
        for idx in set.entry_idxs() {
            total = total + confidence(aux, emb, idx)?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(MarginError::EmptyBatch);
    }
    Ok(total / T::from_f64_c(count as f64))
}
