//! Training objectives: SFT, DPO, SimPO, S-DPO, and NAPO.
//!
//! Every loss is a pure function of already-computed response scores,
//! written against [`Engine`] so the same expression either records onto the
//! gradient tape or evaluates as plain arithmetic. Scores arrive pre-scaled
//! by β (they are `H = β log π`, or `Ĥ = β log(π/π_ref)` for the
//! reference-based losses); nothing here rescales them.
//!
//! Numerical policy: `−log σ(z)` is always computed as `softplus(−z)` and
//! aggregation over negatives as a max-shifted log-sum-exp, so every loss
//! stays finite for score magnitudes up to ±1e3.
//!
//! The family is one algebraic chain, which the tests pin down as exact
//! reduction identities: NAPO with a single negative and a frozen margin is
//! SimPO; NAPO at γ=0 over reference-relative scores is S-DPO; S-DPO with
//! one negative is DPO.

use crate::autodiff::Engine;
use crate::scalar::Scalar;
use crate::sharing::{GradientLinkage, HybridNegativeSet};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("preference loss needs at least one negative")]
    NoNegatives,
    #[error("length normalization needs response lengths >= 1")]
    ZeroLength,
    #[error("margin must be nonnegative, got {0}")]
    NegativeMargin(f64),
}

pub type LossResult<T> = Result<T, LossError>;

/// A response score paired with its token count (used only when length
/// normalization is on).
#[derive(Debug, Clone, Copy)]
pub struct ScoredResponse<V> {
    pub score: V,
    pub token_len: usize,
}

impl<V> ScoredResponse<V> {
    pub fn new(score: V, token_len: usize) -> Self {
        ScoredResponse { score, token_len }
    }
}

/// SFT: negative log-likelihood of the positive, `−h/β`.
pub fn sft_loss<T, E>(engine: &mut E, h: E::Value, beta: T) -> E::Value
where
    T: Scalar,
    E: Engine<T>,
{
    engine.scale(h, -T::one() / beta)
}

/// DPO: `−log σ(Ĥ⁺ − Ĥ⁻)` over reference-relative scores.
pub fn dpo_loss<T, E>(engine: &mut E, pos_rel: E::Value, neg_rel: E::Value) -> E::Value
where
    T: Scalar,
    E: Engine<T>,
{
    let z = engine.sub(neg_rel, pos_rel);
    engine.softplus(z)
}

/// SimPO: `−log σ((1/|y⁺|)H⁺ − (1/|y⁻|)H⁻ − γ₀)` — reference-free,
/// length-normalized, fixed margin.
pub fn simpo_loss<T, E>(
    engine: &mut E,
    pos: ScoredResponse<E::Value>,
    neg: ScoredResponse<E::Value>,
    gamma0: T,
) -> LossResult<E::Value>
where
    T: Scalar,
    E: Engine<T>,
{
    if gamma0 < T::zero() {
        return Err(LossError::NegativeMargin(gamma0.to_f64_c()));
    }
    let pos_n = length_normalized(engine, pos)?;
    let neg_n = length_normalized(engine, neg)?;
    let z = engine.sub(neg_n, pos_n);
    let shifted = engine.add_const(z, gamma0);
    Ok(engine.softplus(shifted))
}

/// S-DPO: `−log σ(Ĥ⁺ − logsumexp(Ĥ⁻ over Ê))` — the multi-negative
/// preference distribution over reference-relative scores.
pub fn sdpo_loss<T, E>(
    engine: &mut E,
    pos_rel: E::Value,
    neg_rels: &[E::Value],
) -> LossResult<E::Value>
where
    T: Scalar,
    E: Engine<T>,
{
    if neg_rels.is_empty() {
        return Err(LossError::NoNegatives);
    }
    let lse = engine.log_sum_exp(neg_rels);
    let z = engine.sub(lse, pos_rel);
    Ok(engine.softplus(z))
}

/// NAPO: `−log σ(H⁺ − logsumexp(H⁻ over E) − γ)` with the hybrid set E and
/// the batch margin γ (a constant — no gradient reaches it).
///
/// The log-sum-exp runs over the negatives only; the positive is not part of
/// the denominator, so `log p` may exceed zero. With length normalization on,
/// every score is divided by its response token count before combination.
pub fn napo_loss<T, E>(
    engine: &mut E,
    pos: ScoredResponse<E::Value>,
    negatives: &[ScoredResponse<E::Value>],
    gamma: T,
    length_normalize: bool,
) -> LossResult<E::Value>
where
    T: Scalar,
    E: Engine<T>,
{
    napo_loss_impl(engine, pos, negatives, gamma, length_normalize, false)
}

/// Comparison-only variant of [`napo_loss`] whose denominator also contains
/// the positive (a true softmax). NOT the trained objective — it exists so
/// the effect of the definitional choice can be measured.
pub fn napo_loss_positive_in_denominator<T, E>(
    engine: &mut E,
    pos: ScoredResponse<E::Value>,
    negatives: &[ScoredResponse<E::Value>],
    gamma: T,
    length_normalize: bool,
) -> LossResult<E::Value>
where
    T: Scalar,
    E: Engine<T>,
{
    napo_loss_impl(engine, pos, negatives, gamma, length_normalize, true)
}

fn napo_loss_impl<T, E>(
    engine: &mut E,
    pos: ScoredResponse<E::Value>,
    negatives: &[ScoredResponse<E::Value>],
    gamma: T,
    length_normalize: bool,
    include_positive: bool,
) -> LossResult<E::Value>
where
    T: Scalar,
    E: Engine<T>,
{
    if negatives.is_empty() {
        return Err(LossError::NoNegatives);
    }
    if gamma < T::zero() {
        return Err(LossError::NegativeMargin(gamma.to_f64_c()));
    }
    let prep = |engine: &mut E, r: ScoredResponse<E::Value>| -> LossResult<E::Value> {
        if length_normalize {
            length_normalized(engine, r)
        } else {
            Ok(r.score)
        }
    };
    let pos_s = prep(engine, pos)?;
    let mut pool = Vec::with_capacity(negatives.len() + 1);
    for &n in negatives {
        pool.push(prep(engine, n)?);
    }
    if include_positive {
        pool.push(pos_s);
    }
    let lse = engine.log_sum_exp(&pool);
    let z = engine.sub(lse, pos_s);
    let shifted = engine.add_const(z, gamma);
    Ok(engine.softplus(shifted))
}

/// NAPO over an assembled hybrid set: own entries first, then shared ones,
/// with detached-linkage shared scores cut from the tape before use.
pub fn napo_loss_from_set<T, E>(
    engine: &mut E,
    pos: ScoredResponse<E::Value>,
    set: &HybridNegativeSet<E::Value>,
    gamma: T,
    length_normalize: bool,
) -> LossResult<E::Value>
where
    T: Scalar,
    E: Engine<T>,
{
    let negs = flatten_set(engine, set);
    napo_loss(engine, pos, &negs, gamma, length_normalize)
}

/// Flatten a hybrid set into loss inputs, applying each shared entry's
/// gradient linkage (detach is an identity on values, a wall for gradients).
pub fn flatten_set<T, E>(
    engine: &mut E,
    set: &HybridNegativeSet<E::Value>,
) -> Vec<ScoredResponse<E::Value>>
where
    T: Scalar,
    E: Engine<T>,
{
    let mut out = Vec::with_capacity(set.effective_count());
    for e in &set.own {
        out.push(ScoredResponse::new(e.score, e.token_len));
    }
    for e in &set.shared {
        let score = match e.gradient_linkage {
            GradientLinkage::FlowThrough => e.score,
            GradientLinkage::Detached => engine.detach(e.score),
        };
        out.push(ScoredResponse::new(score, e.token_len));
    }
    out
}

fn length_normalized<T, E>(engine: &mut E, r: ScoredResponse<E::Value>) -> LossResult<E::Value>
where
    T: Scalar,
    E: Engine<T>,
{
    if r.token_len == 0 {
        return Err(LossError::ZeroLength);
    }
    Ok(engine.scale(r.score, T::one() / T::from_f64_c(r.token_len as f64)))
}
