//! Training orchestration: SFT pretraining and the preference-optimization
//! loop (DPO, SimPO, S-DPO, NAPO).
//!
//! Each preference batch runs the same fixed pipeline: encode every context
//! (b_p F-calls), score positives and own negatives (b_p·(1+n_neg) G-calls),
//! assemble hybrid negative sets by similarity-guided sharing, derive the
//! batch margin from mean negative confidence (NAPO only), evaluate the
//! configured loss, mean-reduce, backprop, clip, and step the optimizer.
//! Sharing happens strictly after scoring, so the per-batch call counters
//! cannot depend on ρ.
//!
//! Everything is seeded and single-threaded: identical config + data + seed
//! reproduce bit-identical parameters and reports in 64-bit mode.

use crate::autodiff::Tape;
use crate::aux::{sequence_embedding, AuxError, AuxParams};
use crate::data::{make_batches, mix_seed, sample_negatives, DataError, DatasetSplit, TrainingInstance};
use crate::losses::{
    dpo_loss, flatten_set, napo_loss_from_set, sdpo_loss, sft_loss, simpo_loss, LossError,
    ScoredResponse,
};
use crate::margin::{batch_mean_confidence, MarginError, MarginState};
use crate::policy::{
    backward_params, bind_params, encode_context, score_ref_relative, score_response,
    GradientBuffer, PolicyError, PolicyParams, TokenTable,
};
use crate::scalar::Scalar;
use crate::sharing::{
    assemble_hybrid_sets, select_partners_from_embeddings, top_k_count, GradientLinkage,
    HybridNegativeSet, OpCounters, OwnNegative, SharingError,
};
use serde::{Deserialize, Serialize};

/// Global gradient-norm ceiling; batches with larger gradients are rescaled.
const CLIP_NORM: f64 = 5.0;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("bad configuration: {0}")]
    Config(String),
    #[error("{loss_kind:?} needs an auxiliary recommender checkpoint ({why}); pass one via --aux-checkpoint")]
    MissingAux { loss_kind: LossKind, why: String },
    #[error("non-finite {what} at step {}; batch dump: {}", dump.step, serde_json::to_string(dump).unwrap_or_default())]
    NonFinite { what: String, dump: BatchDump },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Margin(#[from] MarginError),
    #[error(transparent)]
    Sharing(#[from] SharingError),
    #[error(transparent)]
    Aux(#[from] AuxError),
}

pub type TrainResult<T> = Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Sft,
    Dpo,
    Simpo,
    Sdpo,
    Napo,
}

impl LossKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sft" => Some(LossKind::Sft),
            "dpo" => Some(LossKind::Dpo),
            "simpo" => Some(LossKind::Simpo),
            "sdpo" => Some(LossKind::Sdpo),
            "napo" => Some(LossKind::Napo),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Sft => "sft",
            LossKind::Dpo => "dpo",
            LossKind::Simpo => "simpo",
            LossKind::Sdpo => "sdpo",
            LossKind::Napo => "napo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(OptimizerKind::Sgd),
            "adam" => Some(OptimizerKind::Adam),
            _ => None,
        }
    }
}

/// The complete training recipe. Serialized as a flat JSON document with
/// exactly these keys; unknown keys are rejected so typos cannot silently
/// fall back to defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub n_neg: usize,
    pub rho: f64,
    pub gamma0: f64,
    pub alpha: f64,
    pub momentum: f64,
    pub beta: f64,
    pub length_normalize: bool,
    pub gradient_linkage: GradientLinkage,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer_kind: OptimizerKind,
    pub rng_seed: u64,
    pub candidate_size: usize,
    /// Test hook (not a config-file key): score dpo/sdpo with raw H instead
    /// of reference-relative Ĥ, for the paired-run equivalence oracle.
    #[serde(skip)]
    pub reference_free_scores: bool,
    /// Test hook (not a config-file key): re-anchor the margin baseline at
    /// the start of every epoch instead of persisting it across the run.
    #[serde(skip)]
    pub reset_r0_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_kind: LossKind::Napo,
            n_neg: 3,
            rho: 0.7,
            gamma0: 1.0,
            alpha: 0.3,
            momentum: 0.9,
            beta: 1.0,
            length_normalize: false,
            gradient_linkage: GradientLinkage::FlowThrough,
            batch_size: 16,
            epochs: 3,
            lr: 1e-3,
            optimizer_kind: OptimizerKind::Adam,
            rng_seed: 7,
            candidate_size: 20,
            reference_free_scores: false,
            reset_r0_each_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> TrainResult<()> {
        let bad = |msg: &str| Err(TrainError::Config(msg.into()));
        if self.n_neg < 1 {
            return bad("n_neg must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1]");
        }
        if self.gamma0 < 0.0 {
            return bad("gamma0 must be nonnegative");
        }
        if self.alpha < 0.0 {
            return bad("alpha must be nonnegative");
        }
        if self.alpha > 0.0 && self.gamma0 == 0.0 {
            return bad("a dynamic margin (alpha > 0) needs gamma0 > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.beta <= 0.0 {
            return bad("beta must be positive");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.candidate_size < 2 {
            return bad("candidate_size must be at least 2");
        }
        Ok(())
    }
}

/// One training-step record, serialized as a JSON line in the run report.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct BatchRecord {
    pub step: u64,
    pub epoch: usize,
    pub batch_size: usize,
    pub loss: f64,
    pub gamma: Option<f64>,
    pub mean_conf: Option<f64>,
    pub r0: Option<f64>,
    pub f_calls: u64,
    pub g_calls: u64,
    pub effective_negatives_mean: f64,
    pub collisions_filtered: u64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub n_batches: usize,
}

/// Everything a batch needs to be replayed after a numerical abort.
#[derive(Debug, Clone, Serialize)]
pub struct BatchDump {
    pub step: u64,
    pub epoch: usize,
    pub user_ids: Vec<u32>,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub batches: Vec<BatchRecord>,
    pub epochs: Vec<EpochRecord>,
    pub counters_total: OpCounters,
}

/// First-order parameter updates over the flat buffer.
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: T,
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: T, n_params: usize) -> Self {
        let moments = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => n_params,
        };
        Optimizer { kind, lr, m: vec![T::zero(); moments], v: vec![T::zero(); moments], t: 0 }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grads) {
                    *p = *p - self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                // Standard bias-corrected adaptive moments:
                // beta1=0.9, beta2=0.999, eps=1e-8.
                self.t += 1;
                let b1 = T::from_f64_c(0.9);
                let b2 = T::from_f64_c(0.999);
                let eps = T::from_f64_c(1e-8);
                let c1 = T::one() - b1.powi(self.t as i32);
                let c2 = T::one() - b2.powi(self.t as i32);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
                    self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
                    let mhat = self.m[i] / c1;
                    let vhat = self.v[i] / c2;
                    params[i] = params[i] - self.lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

/// Per-instance token views, resolved once per batch.
struct ResolvedInstance<'a> {
    user_id: u32,
    prompt: Vec<usize>,
    ctx_idxs: Vec<usize>,
    pos_id: u32,
    pos_tokens: &'a [usize],
    neg_ids: Vec<u32>,
    neg_idxs: Vec<usize>,
}

fn resolve_instance<'a>(
    inst: &TrainingInstance,
    split: &DatasetSplit,
    table: &'a TokenTable,
    config: &TrainConfig,
) -> TrainResult<ResolvedInstance<'a>> {
    let catalog = &split.catalog;
    let ctx_idxs = inst
        .prompt_context
        .iter()
        .map(|&id| catalog.idx_of(id))
        .collect::<Result<Vec<_>, _>>()?;
    let pos_idx = catalog.idx_of(inst.positive)?;
    // Use the stored negatives when they match the requested count;
    // otherwise draw a deterministic per-instance replacement set so n_neg
    // sweeps do not require rebuilding the dataset.
    let neg_ids: Vec<u32> = if inst.sampled_negatives.len() == config.n_neg {
        inst.sampled_negatives.clone()
    } else {
        let mut exclude = inst.prompt_context.clone();
        exclude.push(inst.positive);
        sample_negatives(
            catalog,
            &exclude,
            config.n_neg,
            mix_seed(config.rng_seed, inst.user_id as u64, inst.prompt_context.len() as u64),
        )?
    };
    let neg_idxs =
        neg_ids.iter().map(|&id| catalog.idx_of(id)).collect::<Result<Vec<_>, _>>()?;
    Ok(ResolvedInstance {
        user_id: inst.user_id,
        prompt: table.prompt_tokens(&ctx_idxs),
        ctx_idxs,
        pos_id: inst.positive,
        pos_tokens: table.response_tokens(pos_idx),
        neg_ids,
        neg_idxs,
    })
}

fn ensure_finite(value: f64, what: &str, dump: &BatchDump) -> TrainResult<()> {
    if !value.is_finite() {
        return Err(TrainError::NonFinite { what: what.into(), dump: dump.clone() });
    }
    Ok(())
}

/// Supervised pretraining: minimize `−h/β` of the positive response. The
/// result doubles as the frozen reference policy for DPO and S-DPO.
pub fn train_sft<T: Scalar>(
    config: &TrainConfig,
    split: &DatasetSplit,
    table: &TokenTable,
    init: &PolicyParams<T>,
) -> TrainResult<(PolicyParams<T>, TrainReport)> {
    config.validate()?;
    if config.loss_kind != LossKind::Sft {
        return Err(TrainError::Config("train_sft requires loss_kind = sft".into()));
    }
    let mut params = init.clone();
    params.beta = T::from_f64_c(config.beta);
    let mut optimizer = Optimizer::new(config.optimizer_kind, T::from_f64_c(config.lr), params.data.len());
    let mut report = TrainReport::default();
    let mut grads = GradientBuffer::zeros(params.layout);
    let mut step = 0u64;

    for epoch in 0..config.epochs {
        let batches = make_batches(split.train.len(), config.batch_size, config.rng_seed, epoch)?;
        let mut epoch_loss_sum = 0.0;
        let mut epoch_n = 0usize;
        for batch in &batches {
            step += 1;
            let mut tape: Tape<T> = Tape::new();
            let bound = bind_params(&mut tape, &params);
            let mut counters = OpCounters::default();
            let mut losses = Vec::with_capacity(batch.len());
            let mut user_ids = Vec::with_capacity(batch.len());
            for &i in batch {
                let r = resolve_instance(&split.train[i], split, table, config)?;
                user_ids.push(r.user_id);
                let state = encode_context(&mut tape, &bound, &r.prompt)?;
                counters.bump_f();
                let score = score_response(&mut tape, &bound, &state, r.pos_tokens)?;
                counters.bump_g();
                losses.push(sft_loss(&mut tape, score.h, T::from_f64_c(config.beta)));
            }
            let record = finish_batch(
                &mut tape, &losses, &mut params, &mut grads, &mut optimizer, counters, step, epoch,
                &user_ids, None, None, None, 0.0, 0,
            )?;
            epoch_loss_sum += record.loss * batch.len() as f64;
            epoch_n += batch.len();
            report.counters_total.absorb(counters);
            report.batches.push(record);
        }
        report.epochs.push(EpochRecord {
            epoch,
            mean_loss: if epoch_n == 0 { 0.0 } else { epoch_loss_sum / epoch_n as f64 },
            n_batches: batches.len(),
        });
    }
    Ok((params, report))
}

/// Preference training from a frozen SFT starting point.
///
/// `aux` is required whenever something actually consumes it: similarity
/// partners (ρ > 0 for NAPO/S-DPO) or the dynamic margin (α > 0 for NAPO).
pub fn train_preference<T: Scalar>(
    config: &TrainConfig,
    split: &DatasetSplit,
    table: &TokenTable,
    sft: &PolicyParams<T>,
    aux: Option<&AuxParams<T>>,
) -> TrainResult<(PolicyParams<T>, TrainReport)> {
    config.validate()?;
    let loss_kind = config.loss_kind;
    if loss_kind == LossKind::Sft {
        return Err(TrainError::Config("preference training cannot use loss_kind = sft".into()));
    }
    let sharing_active = matches!(loss_kind, LossKind::Sdpo | LossKind::Napo) && config.rho > 0.0;
    let margin_active = loss_kind == LossKind::Napo && config.alpha > 0.0;
    if (sharing_active || margin_active) && aux.is_none() {
        let why = if sharing_active {
            "similarity-guided sharing is on (rho > 0)"
        } else {
            "the dynamic margin is on (alpha > 0)"
        };
        return Err(TrainError::MissingAux { loss_kind, why: why.into() });
    }
    let use_reference =
        matches!(loss_kind, LossKind::Dpo | LossKind::Sdpo) && !config.reference_free_scores;

    let mut params = sft.clone();
    params.beta = T::from_f64_c(config.beta);
    let mut ref_params = sft.clone();
    ref_params.beta = T::from_f64_c(config.beta);
    let mut optimizer = Optimizer::new(config.optimizer_kind, T::from_f64_c(config.lr), params.data.len());
    let mut report = TrainReport::default();
    let mut grads = GradientBuffer::zeros(params.layout);
    let mut margin_state = if margin_active {
        Some(MarginState::new(
            T::from_f64_c(config.gamma0),
            T::from_f64_c(config.alpha),
            T::from_f64_c(config.momentum),
        )?)
    } else {
        None
    };
    let mut plain = crate::autodiff::PlainEngine;
    let mut step = 0u64;

    for epoch in 0..config.epochs {
        if config.reset_r0_each_epoch {
            if let Some(st) = margin_state.as_mut() {
                st.reset_baseline();
            }
        }
        let batches = make_batches(split.train.len(), config.batch_size, config.rng_seed, epoch)?;
        let mut epoch_loss_sum = 0.0;
        let mut epoch_n = 0usize;
        for batch in &batches {
            step += 1;
            let b_p = batch.len();
            let mut tape: Tape<T> = Tape::new();
            let bound = bind_params(&mut tape, &params);
            let mut counters = OpCounters::default();

            // (1)+(2): encode each context, score its positive and own
            // negatives. Reference scores (when used) are plain arithmetic
            // against the frozen copy and are not policy calls.
            let mut user_ids = Vec::with_capacity(b_p);
            let mut positives = Vec::with_capacity(b_p);
            let mut pos_scores = Vec::with_capacity(b_p);
            let mut own_sets = Vec::with_capacity(b_p);
            let mut ctx_idxs_all = Vec::with_capacity(b_p);
            for &i in batch {
                let r = resolve_instance(&split.train[i], split, table, config)?;
                let state = encode_context(&mut tape, &bound, &r.prompt)?;
                counters.bump_f();
                let ref_state = if use_reference {
                    Some(encode_context(&mut plain, &ref_params, &r.prompt)?)
                } else {
                    None
                };
                let pos = if let Some(rs) = &ref_state {
                    let s =
                        score_ref_relative(&mut tape, &bound, &state, &ref_params, rs, r.pos_tokens)?;
                    ScoredResponse::new(s.h_ref_relative.unwrap(), s.response_length)
                } else {
                    let s = score_response(&mut tape, &bound, &state, r.pos_tokens)?;
                    ScoredResponse::new(s.h, s.response_length)
                };
                counters.bump_g();
                let mut own = Vec::with_capacity(r.neg_idxs.len());
                for (k, &neg_idx) in r.neg_idxs.iter().enumerate() {
                    let toks = table.response_tokens(neg_idx);
                    let score = if let Some(rs) = &ref_state {
                        let s = score_ref_relative(&mut tape, &bound, &state, &ref_params, rs, toks)?;
                        s.h_ref_relative.unwrap()
                    } else {
                        score_response(&mut tape, &bound, &state, toks)?.h
                    };
                    counters.bump_g();
                    own.push(OwnNegative {
                        item_id: r.neg_ids[k],
                        item_idx: neg_idx,
                        score,
                        token_len: toks.len(),
                    });
                }
                user_ids.push(r.user_id);
                positives.push(r.pos_id);
                pos_scores.push(pos);
                own_sets.push(own);
                ctx_idxs_all.push(r.ctx_idxs);
            }

            // (3): similarity partners and hybrid assembly — pure reuse of
            // the scores above, no further policy calls.
            let seq_embs: Option<Vec<Vec<T>>> = match aux {
                Some(a) if loss_kind == LossKind::Napo || sharing_active => Some(
                    ctx_idxs_all
                        .iter()
                        .map(|c| sequence_embedding(a, c))
                        .collect::<Result<_, _>>()?,
                ),
                _ => None,
            };
            let partners: Vec<Vec<usize>> = if sharing_active {
                select_partners_from_embeddings(
                    seq_embs.as_ref().expect("aux checked above"),
                    top_k_count(b_p, config.rho),
                )
            } else {
                vec![Vec::new(); b_p]
            };
            let sets: Vec<HybridNegativeSet<_>> =
                assemble_hybrid_sets(&own_sets, &partners, &positives, config.gradient_linkage)?;

            // (4): batch margin (NAPO only; a constant inside the loss).
            let (gamma, mean_conf, r0) = if loss_kind == LossKind::Napo {
                match (aux, seq_embs.as_ref()) {
                    (Some(a), Some(embs)) => {
                        let conf = batch_mean_confidence(a, embs, &sets)?;
                        let g = match margin_state.as_mut() {
                            Some(st) => st.batch_gamma(conf)?,
                            None => T::from_f64_c(config.gamma0),
                        };
                        let r0 = margin_state.as_ref().and_then(|st| st.r0()).map(|v| v.to_f64_c());
                        (Some(g), Some(conf.to_f64_c()), r0)
                    }
                    _ => (Some(T::from_f64_c(config.gamma0)), None, None),
                }
            } else {
                (None, None, None)
            };

            // (5): per-instance losses under the configured objective.
            let mut losses = Vec::with_capacity(b_p);
            for u in 0..b_p {
                let pos = pos_scores[u];
                let loss = match loss_kind {
                    LossKind::Sft => unreachable!("rejected above"),
                    LossKind::Dpo => dpo_loss(&mut tape, pos.score, sets[u].own[0].score),
                    LossKind::Simpo => {
                        let n = &sets[u].own[0];
                        simpo_loss(
                            &mut tape,
                            pos,
                            ScoredResponse::new(n.score, n.token_len),
                            T::from_f64_c(config.gamma0),
                        )?
                    }
                    LossKind::Sdpo => {
                        let entries = flatten_set(&mut tape, &sets[u]);
                        let rels: Vec<_> = entries.iter().map(|e| e.score).collect();
                        sdpo_loss(&mut tape, pos.score, &rels)?
                    }
                    LossKind::Napo => napo_loss_from_set(
                        &mut tape,
                        pos,
                        &sets[u],
                        gamma.expect("napo sets gamma above"),
                        config.length_normalize,
                    )?,
                };
                losses.push(loss);
            }

            let eff_mean = sets.iter().map(|s| s.effective_count() as f64).sum::<f64>() / b_p as f64;
            let collisions = sets.iter().map(|s| s.collisions_filtered as u64).sum::<u64>();

            // (6): reduce, backprop, clip, step.
            let record = finish_batch(
                &mut tape, &losses, &mut params, &mut grads, &mut optimizer, counters, step, epoch,
                &user_ids, gamma.map(|g| g.to_f64_c()), mean_conf, r0, eff_mean, collisions,
            )?;
            epoch_loss_sum += record.loss * b_p as f64;
            epoch_n += b_p;
            report.counters_total.absorb(counters);
            report.batches.push(record);
        }
        report.epochs.push(EpochRecord {
            epoch,
            mean_loss: if epoch_n == 0 { 0.0 } else { epoch_loss_sum / epoch_n as f64 },
            n_batches: batches.len(),
        });
    }
    Ok((params, report))
}

#[allow(clippy::too_many_arguments)]
fn finish_batch<T: Scalar>(
    tape: &mut Tape<T>,
    losses: &[crate::autodiff::Var],
    params: &mut PolicyParams<T>,
    grads: &mut GradientBuffer<T>,
    optimizer: &mut Optimizer<T>,
    counters: OpCounters,
    step: u64,
    epoch: usize,
    user_ids: &[u32],
    gamma: Option<f64>,
    mean_conf: Option<f64>,
    r0: Option<f64>,
    effective_negatives_mean: f64,
    collisions_filtered: u64,
) -> TrainResult<BatchRecord> {
    use crate::autodiff::Engine;
    let b = losses.len();
    let total = tape.sum(losses);
    let mean = tape.scale(total, T::one() / T::from_f64_c(b as f64));
    let loss_value = tape.value(mean).to_f64_c();
    let dump = BatchDump { step, epoch, user_ids: user_ids.to_vec(), loss: loss_value };
    ensure_finite(loss_value, "batch loss", &dump)?;

    grads.reset();
    backward_params(tape, mean, T::one(), grads)?;
    let norm = grads.l2_norm().to_f64_c();
    ensure_finite(norm, "gradient norm", &dump)?;
    if norm > CLIP_NORM {
        let scale = T::from_f64_c(CLIP_NORM / norm);
        for g in grads.data.iter_mut() {
            *g = *g * scale;
        }
    }
    optimizer.step(&mut params.data, &grads.data);

    Ok(BatchRecord {
        step,
        epoch,
        batch_size: b,
        loss: loss_value,
        gamma,
        mean_conf,
        r0,
        f_calls: counters.f_calls,
        g_calls: counters.g_calls,
        effective_negatives_mean,
        collisions_filtered,
        grad_norm: norm,
    })
}
