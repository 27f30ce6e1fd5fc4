//! Offline evaluation over frozen checkpoints: HitRatio@1, ValidRatio, and
//! the popularity-bias score, plus the percentage comparison against an SFT
//! baseline report.
//!
//! Everything here is read-only plain arithmetic — no tape, no parameter
//! mutation. Candidate ranking reuses the encode-once / score-per-response
//! split, so the evaluation cost profile matches training's.

use crate::data::{Catalog, DataError, ItemId, TrainingInstance};
use crate::policy::{
    encode_context, greedy_decode, score_response, PolicyError, PolicyParams, ResponseMode,
    TokenTable,
};
use crate::scalar::Scalar;
use crate::sharing::OpCounters;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("instance for user {user_id} has an empty candidate set")]
    EmptyCandidates { user_id: u32 },
    #[error("no instances to evaluate")]
    NoInstances,
    #[error("pop_counts covers {got} items but the catalog has {expect}")]
    PopCountsMismatch { got: usize, expect: usize },
    #[error("cannot compute a relative improvement against a zero {metric} baseline")]
    ZeroBaseline { metric: &'static str },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

pub type EvalResult<T> = Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_instances: usize,
    pub hit_ratio_at_1: f64,
    pub valid_ratio: f64,
    pub pop_bias: f64,
    pub counters: OpCounters,
}

impl EvalReport {
    /// Three-row text table for terminal output.
    pub fn render_table(&self) -> String {
        format!(
            "metric        value\nhit_ratio@1   {:.6}\nvalid_ratio   {:.6}\npop_bias      {:+.6}\n",
            self.hit_ratio_at_1, self.valid_ratio, self.pop_bias
        )
    }
}

/// Percentage change of each metric against an SFT baseline:
/// `100 · (x − x_sft) / x_sft`. For pop-bias a more negative percentage
/// means stronger debiasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeReport {
    pub hit_ratio_at_1_pct: f64,
    pub pop_bias_pct: f64,
}

pub fn relative_improvement(x: f64, baseline: f64, metric: &'static str) -> EvalResult<f64> {
    if baseline == 0.0 {
        return Err(EvalError::ZeroBaseline { metric });
    }
    Ok(100.0 * (x - baseline) / baseline)
}

pub fn relative_report(method: &EvalReport, sft: &EvalReport) -> EvalResult<RelativeReport> {
    Ok(RelativeReport {
        hit_ratio_at_1_pct: relative_improvement(
            method.hit_ratio_at_1,
            sft.hit_ratio_at_1,
            "hit_ratio_at_1",
        )?,
        pop_bias_pct: relative_improvement(method.pop_bias, sft.pop_bias, "pop_bias")?,
    })
}

/// Top-1 pick from scored candidates: the strictly highest score wins; exact
/// ties go to the lowest item id. Returns the winning item id.
pub fn top1_item<T: Scalar>(scored: &[(ItemId, T)]) -> Option<ItemId> {
    let mut best: Option<(ItemId, T)> = None;
    for &(id, s) in scored {
        best = match best {
            None => Some((id, s)),
            Some((bid, bs)) => {
                if s > bs || (s == bs && id < bid) {
                    Some((id, s))
                } else {
                    Some((bid, bs))
                }
            }
        };
    }
    best.map(|(id, _)| id)
}

/// The hit predicate for one instance: does the tie-broken argmax equal the
/// positive?
pub fn hit_from_scores<T: Scalar>(scored: &[(ItemId, T)], positive: ItemId) -> bool {
    top1_item(scored) == Some(positive)
}

fn log_pop(pop_counts: &[u64], idx: usize) -> f64 {
    (1.0 + pop_counts[idx] as f64).ln()
}

/// Evaluate a frozen policy on a set of instances.
///
/// Per instance: one context encode, one response score per candidate, the
/// tie-broken argmax for HitRatio@1 and the pop-bias term, plus (in
/// multi-token mode) one greedy decode checked for exact membership in the
/// candidate titles. `pop_counts` must come from the training split.
pub fn evaluate<T: Scalar>(
    params: &PolicyParams<T>,
    table: &TokenTable,
    catalog: &Catalog,
    instances: &[TrainingInstance],
    pop_counts: &[u64],
) -> EvalResult<EvalReport> {
    if instances.is_empty() {
        return Err(EvalError::NoInstances);
    }
    if pop_counts.len() != catalog.len() {
        return Err(EvalError::PopCountsMismatch { got: pop_counts.len(), expect: catalog.len() });
    }
    let mut plain = crate::autodiff::PlainEngine;
    let mut counters = OpCounters::default();
    let mut hits = 0usize;
    let mut valid = 0usize;
    let mut bias_sum = 0.0;
    for inst in instances {
        if inst.candidates.is_empty() {
            return Err(EvalError::EmptyCandidates { user_id: inst.user_id });
        }
        let ctx_idxs = inst
            .prompt_context
            .iter()
            .map(|&id| catalog.idx_of(id))
            .collect::<Result<Vec<_>, _>>()?;
        let prompt = table.prompt_tokens(&ctx_idxs);
        let state = encode_context(&mut plain, params, &prompt)?;
        counters.bump_f();

        let mut scored = Vec::with_capacity(inst.candidates.len());
        for &cand in &inst.candidates {
            let idx = catalog.idx_of(cand)?;
            let score = score_response(&mut plain, params, &state, table.response_tokens(idx))?;
            counters.bump_g();
            scored.push((cand, score.h));
        }
        let top1 = top1_item(&scored).expect("candidates checked non-empty");
        if top1 == inst.positive {
            hits += 1;
        }

        match table.mode() {
            // Every single-token emission names a real item, so validity
            // holds by construction.
            ResponseMode::SingleToken => valid += 1,
            ResponseMode::MultiToken => {
                let decoded = greedy_decode(
                    params,
                    &state,
                    table.end_of_response(),
                    table.max_title_tokens(),
                );
                let matches_candidate = inst.candidates.iter().any(|&cand| {
                    catalog.idx_of(cand).map(|i| table.response_tokens(i) == decoded).unwrap_or(false)
                });
                if matches_candidate {
                    valid += 1;
                }
            }
        }

        let top1_idx = catalog.idx_of(top1)?;
        let hist_mean = ctx_idxs.iter().map(|&i| log_pop(pop_counts, i)).sum::<f64>()
            / ctx_idxs.len() as f64;
        bias_sum += log_pop(pop_counts, top1_idx) - hist_mean;
    }
    let n = instances.len();
    Ok(EvalReport {
        n_instances: n,
        hit_ratio_at_1: hits as f64 / n as f64,
        valid_ratio: valid as f64 / n as f64,
        pop_bias: bias_sum / n as f64,
        counters,
    })
}
