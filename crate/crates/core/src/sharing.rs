//! In-batch negative sharing.
//!
//! Scoring decomposes as `H = G(F(x), y)`, so once every sequence in a batch
//! has scored its own sampled negatives, those values can be lent to other
//! sequences for free: a receiver folds the top-K most-similar sequences'
//! negatives into its loss *by value*, without another F or G call. Assembly
//! here is a pure function of already-computed scores — it never touches the
//! policy, which is what makes the zero-overhead claim hold by construction.
//!
//! A borrowed entry keeps the score it was given under its origin's prompt
//! (`H(y_v⁻ | x_v)`, not `H(y_v⁻ | x_u)`); [`naive_dense_oracle`] computes
//! the full quadratic grid of re-scored values for small batches so tests
//! can quantify that approximation and check the call accounting.

use crate::autodiff::PlainEngine;
use crate::aux::{sequence_embedding, AuxError, AuxParams};
use crate::data::ItemId;
use crate::math;
use crate::policy::{encode_context, score_response, PolicyError, PolicyParams};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SharingError {
    #[error("dense oracle refuses batches of {b_p} sequences (cap {cap})")]
    BatchAboveCap { b_p: usize, cap: usize },
    #[error("per-sequence inputs disagree in length: {0}")]
    LengthMismatch(String),
    #[error(transparent)]
    Aux(#[from] AuxError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

pub type SharingResult<T> = Result<T, SharingError>;

/// Whether a borrowed score stays a live graph node (gradient flows back to
/// the origin's parameters through every receiver's loss) or is frozen to a
/// constant for the receivers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GradientLinkage {
    #[default]
    FlowThrough,
    Detached,
}

impl GradientLinkage {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "flow" | "flow-through" => Some(GradientLinkage::FlowThrough),
            "detach" | "detached" => Some(GradientLinkage::Detached),
            _ => None,
        }
    }
}

/// Per-batch policy-evaluation counters. `f_calls` counts context encodings,
/// `g_calls` counts response scorings; reference-model evaluations are not
/// policy gradient work and are not counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    pub f_calls: u64,
    pub g_calls: u64,
}

impl OpCounters {
    pub fn bump_f(&mut self) {
        self.f_calls += 1;
    }

    pub fn bump_g(&mut self) {
        self.g_calls += 1;
    }

    pub fn absorb(&mut self, other: OpCounters) {
        self.f_calls += other.f_calls;
        self.g_calls += other.g_calls;
    }
}

/// One of a sequence's own sampled negatives, already scored under that
/// sequence's prompt.
#[derive(Debug, Clone, Copy)]
pub struct OwnNegative<V> {
    pub item_id: ItemId,
    /// Catalog index, carried so confidence scoring needs no id lookup.
    pub item_idx: usize,
    pub score: V,
    pub token_len: usize,
}

/// A negative borrowed from another sequence in the batch. `score` is the
/// value computed under the ORIGIN's prompt — reused, never recomputed.
#[derive(Debug, Clone, Copy)]
pub struct SharedNegativeEntry<V> {
    pub item_id: ItemId,
    pub item_idx: usize,
    pub score: V,
    pub token_len: usize,
    /// Batch position of the sequence that scored this entry.
    pub origin_index: usize,
    pub gradient_linkage: GradientLinkage,
}

/// The hybrid negative set E_u: a sequence's own negatives plus everything
/// borrowed from its partners, minus entries that collide with its positive.
#[derive(Debug, Clone)]
pub struct HybridNegativeSet<V> {
    pub own: Vec<OwnNegative<V>>,
    pub shared: Vec<SharedNegativeEntry<V>>,
    /// Borrowed entries dropped because they matched the owner's positive.
    pub collisions_filtered: usize,
}

impl<V> HybridNegativeSet<V> {
    pub fn effective_count(&self) -> usize {
        self.own.len() + self.shared.len()
    }

    /// Catalog indices of every entry, own first, then shared.
    pub fn entry_idxs(&self) -> impl Iterator<Item = usize> + '_ {
        self.own.iter().map(|e| e.item_idx).chain(self.shared.iter().map(|e| e.item_idx))
    }
}

/// K = ⌊(b_p − 1) · ρ⌋: how many partners each sequence borrows from.
pub fn top_k_count(batch_size: usize, rho: f64) -> usize {
    ((batch_size.saturating_sub(1)) as f64 * rho).floor() as usize
}

/// Top-K partner indices per sequence from a precomputed similarity matrix.
/// Self-pairs are excluded; ties go to the lower index.
pub fn select_partners_from_matrix<T: Scalar>(sim: &[Vec<T>], k: usize) -> Vec<Vec<usize>> {
    let n = sim.len();
    let k = k.min(n.saturating_sub(1));
    let mut out = Vec::with_capacity(n);
    for u in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&v| v != u).collect();
        others.sort_by(|&a, &b| {
            sim[u][b].partial_cmp(&sim[u][a]).expect("similarities are finite").then(a.cmp(&b))
        });
        others.truncate(k);
        out.push(others);
    }
    out
}

/// Partner selection from the auxiliary model: cosine similarity between
/// sequence embeddings, then top-K per sequence.
pub fn select_share_partners<T: Scalar>(
    aux: &AuxParams<T>,
    batch_contexts: &[Vec<usize>],
    rho: f64,
) -> SharingResult<Vec<Vec<usize>>> {
    let embs = batch_contexts
        .iter()
        .map(|c| sequence_embedding(aux, c))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(select_partners_from_embeddings(&embs, top_k_count(batch_contexts.len(), rho)))
}

/// Same selection, given the (normalized) sequence embeddings directly.
pub fn select_partners_from_embeddings<T: Scalar>(embs: &[Vec<T>], k: usize) -> Vec<Vec<usize>> {
    let sim: Vec<Vec<T>> =
        embs.iter().map(|a| embs.iter().map(|b| math::dot(a, b)).collect()).collect();
    select_partners_from_matrix(&sim, k)
}

/// Build every sequence's hybrid set from the batch's own-negative scores.
///
/// Pure assembly: no policy calls happen here, so sharing cannot change the
/// batch's F/G counts. Borrowed entries arrive in (origin_index, position)
/// order; duplicates of the same item from different origins are kept as
/// distinct entries (their scores were computed under different prompts).
pub fn assemble_hybrid_sets<V: Copy>(
    own: &[Vec<OwnNegative<V>>],
    partners: &[Vec<usize>],
    positives: &[ItemId],
    linkage: GradientLinkage,
) -> SharingResult<Vec<HybridNegativeSet<V>>> {
    let b = own.len();
    if partners.len() != b || positives.len() != b {
        return Err(SharingError::LengthMismatch(format!(
            "own={b} partners={} positives={}",
            partners.len(),
            positives.len()
        )));
    }
    let mut sets = Vec::with_capacity(b);
    for u in 0..b {
        let mut sorted_partners = partners[u].clone();
        sorted_partners.sort_unstable();
        let mut shared = Vec::new();
        let mut collisions = 0usize;
        for &v in &sorted_partners {
            for e in &own[v] {
                if e.item_id == positives[u] {
                    collisions += 1;
                    continue;
                }
                shared.push(SharedNegativeEntry {
                    item_id: e.item_id,
                    item_idx: e.item_idx,
                    score: e.score,
                    token_len: e.token_len,
                    origin_index: v,
                    gradient_linkage: linkage,
                });
            }
        }
        sets.push(HybridNegativeSet { own: own[u].clone(), shared, collisions_filtered: collisions });
    }
    Ok(sets)
}

/// Everything the dense oracle scored, plus what it cost.
#[derive(Debug, Clone)]
pub struct DenseOracleOutput<T> {
    /// `positive_scores[u]` = G(z_u, y_u⁺).
    pub positive_scores: Vec<T>,
    /// `negative_scores[u][v][k]` = G(z_u, k-th negative of sequence v) —
    /// every sequence's negatives re-scored under every receiver's prompt.
    pub negative_scores: Vec<Vec<Vec<T>>>,
    pub counters: OpCounters,
}

/// The quadratic-cost alternative to sharing: score every batch negative
/// under every receiver's own prompt. Test-only by intent — refuses batches
/// above `cap` so it cannot sneak into a training path.
pub fn naive_dense_oracle<T: Scalar>(
    params: &PolicyParams<T>,
    prompts: &[Vec<usize>],
    positives: &[Vec<usize>],
    negatives: &[Vec<Vec<usize>>],
    cap: usize,
) -> SharingResult<DenseOracleOutput<T>> {
    let b = prompts.len();
    if b > cap {
        return Err(SharingError::BatchAboveCap { b_p: b, cap });
    }
    if positives.len() != b || negatives.len() != b {
        return Err(SharingError::LengthMismatch(format!(
            "prompts={b} positives={} negatives={}",
            positives.len(),
            negatives.len()
        )));
    }
    let mut engine = PlainEngine;
    let mut counters = OpCounters::default();
    let mut positive_scores = Vec::with_capacity(b);
    let mut negative_scores = Vec::with_capacity(b);
    for u in 0..b {
        let state = encode_context(&mut engine, params, &prompts[u])?;
        counters.bump_f();
        positive_scores.push(score_response(&mut engine, params, &state, &positives[u])?.h);
        counters.bump_g();
        let mut row = Vec::with_capacity(b);
        for v_negs in negatives {
            let mut scores = Vec::with_capacity(v_negs.len());
            for toks in v_negs {
                scores.push(score_response(&mut engine, params, &state, toks)?.h);
                counters.bump_g();
            }
            row.push(scores);
        }
        negative_scores.push(row);
    }
    Ok(DenseOracleOutput { positive_scores, negative_scores, counters })
}
