//! The scoring policy: a small differentiable autoregressive model over item
//! titles.
//!
//! Scoring is split into two stages so negative sharing can reuse work:
//!
//! * **F — [`encode_context`]:** recency-weighted mean of the prompt's token
//!   embeddings through one `tanh` dense layer. Called once per sequence,
//!   whatever is scored against it afterwards.
//! * **G — [`score_response`]:** teacher-forced autoregressive scoring of one
//!   response against an encoded context. At step `t` the hidden state is the
//!   context seed plus the sum of the embeddings of the tokens already
//!   emitted; step logits are that state against every token embedding plus a
//!   per-token output bias. The response score is
//!   `h = beta * sum_t log softmax(logits_t)[y_t]`, so `exp(h / beta)` is the
//!   policy's probability of the response and `h <= 0` whenever `beta = 1`.
//!
//! Both stages are written against [`Engine`], so the identical code runs on
//! the recording tape during training and as plain arithmetic during
//! evaluation; a property test pins the two to bit equality.
//!
//! Parameters live in one flat buffer ([`PolicyParams::data`]) with a fixed
//! layout, which keeps the optimizer, checkpointing, gradient extraction, and
//! finite-difference probing all trivially aligned.

use crate::autodiff::{AdResult, Engine, PlainEngine, Tape, Var};
use crate::checkpoint::{Checkpoint, CheckpointError, CkptResult, Tensor};
use crate::data::Catalog;
use crate::scalar::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Geometric recency weight for prompt pooling: the token at distance `k`
/// from the end of the prompt gets weight `0.9^k` (then normalized). This is
/// what makes the encoder order-sensitive — a plain mean would score permuted
/// prompts identically.
const RECENCY_DECAY: f64 = 0.9;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("token {token} out of vocabulary (size {vocab})")]
    UnknownToken { token: usize, vocab: usize },
    #[error("prompt has no tokens")]
    EmptyPrompt,
    #[error("response has no tokens")]
    EmptyResponse,
    #[error("item {item_id} has an empty title; it cannot be scored in multi-token mode")]
    EmptyTitle { item_id: u32 },
    #[error("beta must be positive, got {0}")]
    NonPositiveBeta(f64),
    #[error("parameter buffer has {got} values but layout needs {want}")]
    LayoutMismatch { got: usize, want: usize },
    #[error("gradient extraction failed: {0}")]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error("checkpoint problem: {0}")]
    Checkpoint(#[from] CheckpointError),
}

pub type PolicyResult<T> = Result<T, PolicyError>;

/// How items are rendered as token sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ResponseMode {
    /// One dedicated token per item (the default): responses are one token.
    #[default]
    SingleToken,
    /// Items are their whitespace-tokenized titles over a shared word
    /// vocabulary; responses are full title sequences.
    MultiToken,
}

impl ResponseMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ResponseMode::SingleToken => "single-token",
            ResponseMode::MultiToken => "multi-token",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "single-token" => Some(ResponseMode::SingleToken),
            "multi-token" => Some(ResponseMode::MultiToken),
            _ => None,
        }
    }
}

/// Catalog-derived vocabulary: per-item token sequences plus the dedicated
/// end-of-response token (always the last vocabulary id).
#[derive(Debug, Clone)]
pub struct TokenTable {
    mode: ResponseMode,
    /// Token sequence per catalog index.
    item_tokens: Vec<Vec<usize>>,
    vocab: usize,
    eor: usize,
    max_title_tokens: usize,
}

impl TokenTable {
    pub fn build(catalog: &Catalog, mode: ResponseMode) -> PolicyResult<Self> {
        match mode {
            ResponseMode::SingleToken => {
                let n = catalog.len();
                Ok(TokenTable {
                    mode,
                    item_tokens: (0..n).map(|i| vec![i]).collect(),
                    vocab: n + 1,
                    eor: n,
                    max_title_tokens: 1,
                })
            }
            ResponseMode::MultiToken => {
                let mut words: std::collections::HashMap<String, usize> =
                    std::collections::HashMap::new();
                let mut item_tokens = Vec::with_capacity(catalog.len());
                let mut max_len = 0;
                for item in catalog.iter() {
                    let toks: Vec<usize> = item
                        .title
                        .split_whitespace()
                        .map(|w| {
                            let next = words.len();
                            *words.entry(w.to_string()).or_insert(next)
                        })
                        .collect();
                    if toks.is_empty() {
                        return Err(PolicyError::EmptyTitle { item_id: item.id });
                    }
                    max_len = max_len.max(toks.len());
                    item_tokens.push(toks);
                }
                let n_words = words.len();
                Ok(TokenTable {
                    mode,
                    item_tokens,
                    vocab: n_words + 1,
                    eor: n_words,
                    max_title_tokens: max_len,
                })
            }
        }
    }

    pub fn mode(&self) -> ResponseMode {
        self.mode
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn end_of_response(&self) -> usize {
        self.eor
    }

    pub fn max_title_tokens(&self) -> usize {
        self.max_title_tokens
    }

    /// Response tokens of the item at a catalog index.
    pub fn response_tokens(&self, catalog_idx: usize) -> &[usize] {
        &self.item_tokens[catalog_idx]
    }

    /// Prompt tokens: the concatenated title tokens of the context items, in
    /// chronological order.
    pub fn prompt_tokens(&self, catalog_idxs: &[usize]) -> Vec<usize> {
        catalog_idxs.iter().flat_map(|&i| self.item_tokens[i].iter().copied()).collect()
    }
}

/// Where each named tensor lives inside the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub vocab: usize,
    pub d: usize,
}

impl ParamLayout {
    pub fn new(vocab: usize, d: usize) -> Self {
        ParamLayout { vocab, d }
    }

    pub fn emb_offset(&self) -> usize {
        0
    }
    pub fn ctx_w_offset(&self) -> usize {
        self.vocab * self.d
    }
    pub fn ctx_b_offset(&self) -> usize {
        self.ctx_w_offset() + self.d * self.d
    }
    pub fn bias_offset(&self) -> usize {
        self.ctx_b_offset() + self.d
    }
    pub fn total(&self) -> usize {
        self.bias_offset() + self.vocab
    }
}

/// Read-only view of policy parameters as engine values. Implemented by
/// [`PolicyParams`] (plain scalars) and [`BoundParams`] (tape leaves), so the
/// forward pass is written once.
pub trait ParamView<T: Scalar, V: Copy> {
    fn emb_row(&self, token: usize) -> &[V];
    fn ctx_w_row(&self, i: usize) -> &[V];
    fn ctx_b(&self) -> &[V];
    fn out_bias(&self) -> &[V];
    fn layout(&self) -> ParamLayout;
    fn beta(&self) -> T;
}

/// Trainable policy parameters in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<T> {
    pub data: Vec<T>,
    pub layout: ParamLayout,
    pub beta: T,
}

impl<T: Scalar> PolicyParams<T> {
    pub fn zeros(layout: ParamLayout, beta: T) -> PolicyResult<Self> {
        if beta <= T::zero() {
            return Err(PolicyError::NonPositiveBeta(beta.to_f64_c()));
        }
        Ok(PolicyParams { data: vec![T::zero(); layout.total()], layout, beta })
    }

    /// Seeded init: i.i.d. uniform on `[-0.1, 0.1]` scaled by `1/sqrt(d)`.
    pub fn init(layout: ParamLayout, beta: T, seed: u64) -> PolicyResult<Self> {
        let mut p = Self::zeros(layout, beta)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (layout.d as f64).sqrt();
        for v in p.data.iter_mut() {
            let draw: f64 = rand::Rng::random_range(&mut rng, -0.1..0.1);
            *v = T::from_f64_c(draw * scale);
        }
        Ok(p)
    }

    pub fn vocab(&self) -> usize {
        self.layout.vocab
    }

    pub fn d(&self) -> usize {
        self.layout.d
    }

    /// Serialize with the response mode recorded, since the vocabulary only
    /// makes sense together with the tokenization that produced it.
    pub fn to_checkpoint(&self, mode: ResponseMode) -> Checkpoint {
        let l = self.layout;
        let grab = |a: usize, b: usize| -> Vec<f64> {
            self.data[a..b].iter().map(|v| v.to_f64_c()).collect()
        };
        let mut c = Checkpoint::new("policy");
        c.tensors.push(Tensor::new(
            "token_embeddings",
            vec![l.vocab, l.d],
            grab(l.emb_offset(), l.ctx_w_offset()),
        ));
        c.tensors.push(Tensor::new(
            "context_weights",
            vec![l.d, l.d],
            grab(l.ctx_w_offset(), l.ctx_b_offset()),
        ));
        c.tensors.push(Tensor::new("context_bias", vec![l.d], grab(l.ctx_b_offset(), l.bias_offset())));
        c.tensors.push(Tensor::new("output_bias", vec![l.vocab], grab(l.bias_offset(), l.total())));
        c.meta.insert("beta".into(), serde_json::json!(self.beta.to_f64_c()));
        c.meta.insert("vocab".into(), serde_json::json!(l.vocab));
        c.meta.insert("d".into(), serde_json::json!(l.d));
        c.meta.insert("response_mode".into(), serde_json::json!(mode.as_str()));
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> CkptResult<(Self, ResponseMode)> {
        ckpt.require_kind("policy")?;
        let vocab = ckpt.meta_usize("vocab")?;
        let d = ckpt.meta_usize("d")?;
        let beta = ckpt.meta_f64("beta")?;
        let mode = ResponseMode::parse(ckpt.meta_str("response_mode")?)
            .ok_or_else(|| CheckpointError::MissingMeta("response_mode".into()))?;
        let layout = ParamLayout::new(vocab, d);
        let mut data = Vec::with_capacity(layout.total());
        for name in ["token_embeddings", "context_weights", "context_bias", "output_bias"] {
            let t = ckpt
                .tensor(name)
                .ok_or_else(|| CheckpointError::MissingMeta(format!("tensor {name}")))?;
            data.extend(t.data.iter().map(|&v| T::from_f64_c(v)));
        }
        if data.len() != layout.total() {
            return Err(CheckpointError::ShapeMismatch {
                name: "policy parameters".into(),
                shape: vec![layout.total()],
                expect: layout.total(),
                got: data.len(),
            });
        }
        Ok((PolicyParams { data, layout, beta: T::from_f64_c(beta) }, mode))
    }
}

impl<T: Scalar> ParamView<T, T> for PolicyParams<T> {
    fn emb_row(&self, token: usize) -> &[T] {
        let l = self.layout;
        let off = l.emb_offset() + token * l.d;
        &self.data[off..off + l.d]
    }
    fn ctx_w_row(&self, i: usize) -> &[T] {
        let l = self.layout;
        let off = l.ctx_w_offset() + i * l.d;
        &self.data[off..off + l.d]
    }
    fn ctx_b(&self) -> &[T] {
        let l = self.layout;
        &self.data[l.ctx_b_offset()..l.bias_offset()]
    }
    fn out_bias(&self) -> &[T] {
        let l = self.layout;
        &self.data[l.bias_offset()..l.total()]
    }
    fn layout(&self) -> ParamLayout {
        self.layout
    }
    fn beta(&self) -> T {
        self.beta
    }
}

/// Policy parameters registered as tape leaves (always the first nodes on
/// the tape, so parameter gradients are the leading adjoints).
pub struct BoundParams<T> {
    vars: Vec<Var>,
    layout: ParamLayout,
    beta: T,
}

/// Bind `params` to a fresh tape. The tape must be empty: the optimizer and
/// gradient buffer rely on parameters occupying the first `layout.total()`
/// node slots.
pub fn bind_params<T: Scalar>(tape: &mut Tape<T>, params: &PolicyParams<T>) -> BoundParams<T> {
    assert!(tape.is_empty(), "parameters must be the first nodes on the tape");
    let vars = params.data.iter().map(|&v| tape.leaf(v)).collect();
    BoundParams { vars, layout: params.layout, beta: params.beta }
}

impl<T: Scalar> ParamView<T, Var> for BoundParams<T> {
    fn emb_row(&self, token: usize) -> &[Var] {
        let l = self.layout;
        let off = l.emb_offset() + token * l.d;
        &self.vars[off..off + l.d]
    }
    fn ctx_w_row(&self, i: usize) -> &[Var] {
        let l = self.layout;
        let off = l.ctx_w_offset() + i * l.d;
        &self.vars[off..off + l.d]
    }
    fn ctx_b(&self) -> &[Var] {
        let l = self.layout;
        &self.vars[l.ctx_b_offset()..l.bias_offset()]
    }
    fn out_bias(&self) -> &[Var] {
        let l = self.layout;
        &self.vars[l.bias_offset()..l.total()]
    }
    fn layout(&self) -> ParamLayout {
        self.layout
    }
    fn beta(&self) -> T {
        self.beta
    }
}

/// Output of the context encoder F: a d-dimensional state, reused for every
/// response scored against the same prompt.
#[derive(Debug, Clone)]
pub struct ContextState<V> {
    pub seed: Vec<V>,
    pub prompt_len: usize,
}

/// One scored response. `h = beta * log pi(y|x)`; `h_ref_relative`, when
/// present, is `h - h_ref` for a frozen reference model (whose parameters
/// never touch the gradient tape).
#[derive(Debug, Clone, Copy)]
pub struct PolicyScore<V> {
    pub h: V,
    pub h_ref_relative: Option<V>,
    pub response_length: usize,
}

fn check_tokens<T: Scalar, V: Copy>(
    view: &impl ParamView<T, V>,
    tokens: &[usize],
) -> PolicyResult<()> {
    let vocab = view.layout().vocab;
    for &t in tokens {
        if t >= vocab {
            return Err(PolicyError::UnknownToken { token: t, vocab });
        }
    }
    Ok(())
}

/// F: encode a prompt into a context state.
///
/// Recency-weighted pooling (`0.9^distance-from-end`, normalized) over the
/// prompt's token embeddings, then one dense layer with `tanh`.
pub fn encode_context<T, E, P>(
    engine: &mut E,
    view: &P,
    prompt_tokens: &[usize],
) -> PolicyResult<ContextState<E::Value>>
where
    T: Scalar,
    E: Engine<T>,
    P: ParamView<T, E::Value>,
{
    if prompt_tokens.is_empty() {
        return Err(PolicyError::EmptyPrompt);
    }
    check_tokens(view, prompt_tokens)?;
    let d = view.layout().d;
    let n = prompt_tokens.len();
    // Weights from oldest to newest: 0.9^(n-1), ..., 0.9, 1, normalized.
    let mut weights = vec![T::zero(); n];
    let decay = T::from_f64_c(RECENCY_DECAY);
    let mut w = T::one();
    let mut total = T::zero();
    for t in (0..n).rev() {
        weights[t] = w;
        total = total + w;
        w = w * decay;
    }
    for w in weights.iter_mut() {
        *w = *w / total;
    }

    let mut pooled = Vec::with_capacity(d);
    let mut column = Vec::with_capacity(n);
    for j in 0..d {
        column.clear();
        column.extend(prompt_tokens.iter().map(|&tok| view.emb_row(tok)[j]));
        pooled.push(engine.weighted_sum(&column, &weights));
    }
    let mut seed = Vec::with_capacity(d);
    for i in 0..d {
        let a = engine.dot(view.ctx_w_row(i), &pooled);
        let ab = engine.add(a, view.ctx_b()[i]);
        seed.push(engine.tanh(ab));
    }
    Ok(ContextState { seed, prompt_len: n })
}

/// Step logits for the state `state_vec`: one logit per vocabulary token.
pub fn step_logits<T, E, P>(engine: &mut E, view: &P, state_vec: &[E::Value]) -> Vec<E::Value>
where
    T: Scalar,
    E: Engine<T>,
    P: ParamView<T, E::Value>,
{
    let vocab = view.layout().vocab;
    let bias = view.out_bias();
    let mut logits = Vec::with_capacity(vocab);
    for tok in 0..vocab {
        let dp = engine.dot(view.emb_row(tok), state_vec);
        logits.push(engine.add(dp, bias[tok]));
    }
    logits
}

/// G: teacher-forced score of one response against an encoded context.
pub fn score_response<T, E, P>(
    engine: &mut E,
    view: &P,
    state: &ContextState<E::Value>,
    response_tokens: &[usize],
) -> PolicyResult<PolicyScore<E::Value>>
where
    T: Scalar,
    E: Engine<T>,
    P: ParamView<T, E::Value>,
{
    if response_tokens.is_empty() {
        return Err(PolicyError::EmptyResponse);
    }
    check_tokens(view, response_tokens)?;
    let d = view.layout().d;
    let mut state_vec = state.seed.clone();
    let mut log_probs = Vec::with_capacity(response_tokens.len());
    for (t, &tok) in response_tokens.iter().enumerate() {
        if t > 0 {
            // Fold the previous emitted token into the state.
            let prev = view.emb_row(response_tokens[t - 1]);
            for j in 0..d {
                state_vec[j] = engine.add(state_vec[j], prev[j]);
            }
        }
        let logits = step_logits(engine, view, &state_vec);
        log_probs.push(engine.log_softmax_pick(&logits, tok));
    }
    let total = engine.sum(&log_probs);
    let h = engine.scale(total, view.beta());
    Ok(PolicyScore { h, h_ref_relative: None, response_length: response_tokens.len() })
}

/// G with a frozen reference: same response scored by both models, returning
/// `h` and `h - h_ref`. The reference is evaluated in plain arithmetic, so no
/// gradient can reach it by construction.
pub fn score_ref_relative<T, E, P>(
    engine: &mut E,
    view: &P,
    state: &ContextState<E::Value>,
    ref_params: &PolicyParams<T>,
    ref_state: &ContextState<T>,
    response_tokens: &[usize],
) -> PolicyResult<PolicyScore<E::Value>>
where
    T: Scalar,
    E: Engine<T>,
    P: ParamView<T, E::Value>,
{
    let mut score = score_response(engine, view, state, response_tokens)?;
    let mut plain = PlainEngine;
    let ref_score = score_response(&mut plain, ref_params, ref_state, response_tokens)?;
    score.h_ref_relative = Some(engine.add_const(score.h, -ref_score.h));
    Ok(score)
}

/// Greedy decode: argmax per step (ties to the lowest token id), stopping at
/// the end-of-response token or after `max_len` emitted tokens. Returns the
/// emitted tokens with the terminator stripped.
pub fn greedy_decode<T: Scalar>(
    params: &PolicyParams<T>,
    state: &ContextState<T>,
    end_of_response: usize,
    max_len: usize,
) -> Vec<usize> {
    let mut engine = PlainEngine;
    let d = params.layout.d;
    let mut state_vec = state.seed.clone();
    let mut out = Vec::new();
    for _ in 0..max_len {
        let logits = step_logits(&mut engine, params, &state_vec);
        let mut best = 0usize;
        for (tok, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = tok;
            }
        }
        if best == end_of_response {
            break;
        }
        out.push(best);
        let emb = <PolicyParams<T> as ParamView<T, T>>::emb_row(params, best).to_vec();
        for j in 0..d {
            state_vec[j] = state_vec[j] + emb[j];
        }
    }
    out
}

/// Gradient accumulator shaped like [`PolicyParams`].
#[derive(Debug, Clone)]
pub struct GradientBuffer<T> {
    pub data: Vec<T>,
    pub layout: ParamLayout,
}

impl<T: Scalar> GradientBuffer<T> {
    pub fn zeros(layout: ParamLayout) -> Self {
        GradientBuffer { data: vec![T::zero(); layout.total()], layout }
    }

    pub fn reset(&mut self) {
        for v in self.data.iter_mut() {
            *v = T::zero();
        }
    }

    pub fn l2_norm(&self) -> T {
        crate::math::l2_norm(&self.data)
    }
}

/// Reverse pass: propagate `upstream` from `root` and add the parameter
/// adjoints (the leading `layout.total()` tape slots) into `grads`.
///
/// Errors if the tape does not even contain the bound parameters — i.e.
/// backward was requested without a forward pass.
pub fn backward_params<T: Scalar>(
    tape: &Tape<T>,
    root: Var,
    upstream: T,
    grads: &mut GradientBuffer<T>,
) -> PolicyResult<()> {
    let n = grads.layout.total();
    if tape.len() < n {
        return Err(PolicyError::LayoutMismatch { got: tape.len(), want: n });
    }
    let adj = adjoints(tape, root, upstream)?;
    for (g, a) in grads.data.iter_mut().zip(adj.leading(n)) {
        *g = *g + *a;
    }
    Ok(())
}

fn adjoints<T: Scalar>(tape: &Tape<T>, root: Var, upstream: T) -> AdResult<crate::autodiff::Adjoints<T>> {
    tape.backward(root, upstream)
}
