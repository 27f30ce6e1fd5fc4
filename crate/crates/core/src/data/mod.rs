//! Corpus model: catalogs, interaction sequences, training instances, and
//! the chronological train/validation/test split.
//!
//! An instance is one supervised ranking example: the user's interaction
//! prefix as prompt context, the next item as the positive, a fixed set of
//! uniformly sampled negatives for preference losses, and a fixed candidate
//! set (positive plus distractors) for evaluation. Negatives and candidates
//! are sampled once, at dataset-build time, from a seed derived per instance
//! — re-running a build with the same seed reproduces them exactly, and no
//! epoch ever resamples them.

mod ingest;
mod store;
mod synthetic;

pub use ingest::{ingest, IngestOutcome};
pub use store::{load_split, save_split};
pub use synthetic::{generate_synthetic, generate_synthetic_with_latents, SyntheticLatents};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

pub type ItemId = u32;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed row: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}:{line}: unknown item `{token}`")]
    UnknownItem { path: String, line: usize, token: String },
    #[error("{path}:{line}: duplicate item_id {id}")]
    DuplicateItem { path: String, line: usize, id: ItemId },
    #[error("item_id {0} is not in the catalog")]
    UncatalogedItem(ItemId),
    #[error("sampling pool has {have} items but {need} are needed ({what})")]
    PoolTooSmall { what: String, need: usize, have: usize },
    #[error("no usable instances: {0}")]
    Empty(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub type DataResult<T> = Result<T, DataError>;

/// One catalog entry. Titles are whitespace-tokenized in multi-token response
/// mode and ignored (one dedicated token per item) in single-token mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    pub id: ItemId,
    pub title: String,
}

/// Item catalog, ordered by ascending `item_id`. The position of an item in
/// this ordering is its dense index, used for embedding rows and
/// popularity counters.
#[derive(Debug, Clone)]
pub struct Catalog {
    items: Vec<Item>,
    index: HashMap<ItemId, usize>,
}

impl Catalog {
    /// Build from entries; sorts by id. Duplicate ids are rejected by the
    /// parsers before this is reached, so here they are a programming error.
    pub fn new(mut items: Vec<Item>) -> DataResult<Self> {
        items.sort_by_key(|i| i.id);
        let mut index = HashMap::with_capacity(items.len());
        for (pos, item) in items.iter().enumerate() {
            if index.insert(item.id, pos).is_some() {
                return Err(DataError::Invalid(format!("duplicate item_id {} in catalog", item.id)));
            }
        }
        Ok(Catalog { items, index })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn idx_of(&self, id: ItemId) -> DataResult<usize> {
        self.index.get(&id).copied().ok_or(DataError::UncatalogedItem(id))
    }

    pub fn contains(&self, id: ItemId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn item_at(&self, idx: usize) -> &Item {
        &self.items[idx]
    }

    pub fn id_at(&self, idx: usize) -> ItemId {
        self.items[idx].id
    }

    pub fn iter(&self) -> impl Iterator<Item = &Item> {
        self.items.iter()
    }
}

/// A user's full interaction history, chronological after ingestion.
#[derive(Debug, Clone)]
pub struct InteractionSequence {
    pub user_id: u32,
    pub items: Vec<ItemId>,
    pub timestamps: Vec<i64>,
}

/// One supervised ranking example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingInstance {
    pub user_id: u32,
    /// Chronological prefix; never empty.
    pub prompt_context: Vec<ItemId>,
    /// The next interaction after the context.
    pub positive: ItemId,
    pub target_timestamp: i64,
    /// Evaluation candidates: the positive plus uniformly sampled
    /// non-history items, stored sorted ascending.
    pub candidates: Vec<ItemId>,
    /// Training negatives: uniform non-history items, never containing the
    /// positive or any context item.
    pub sampled_negatives: Vec<ItemId>,
}

/// Chronological split plus training-split popularity counts (indexed like
/// the catalog).
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub catalog: Catalog,
    pub train: Vec<TrainingInstance>,
    pub validation: Vec<TrainingInstance>,
    pub test: Vec<TrainingInstance>,
    pub pop_counts: Vec<u64>,
}

impl DatasetSplit {
    pub fn part(&self, which: SplitPart) -> &[TrainingInstance] {
        match which {
            SplitPart::Train => &self.train,
            SplitPart::Validation => &self.validation,
            SplitPart::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Validation,
    Test,
}

/// Knobs for turning raw sequences into a `DatasetSplit`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BuildOptions {
    /// Negatives fixed per instance (>= 1).
    pub n_neg: usize,
    /// Total candidate-set size including the positive (>= 2).
    pub candidate_size: usize,
    /// Base seed for all per-instance sampling.
    pub seed: u64,
    /// One instance per (user, position) instead of one per user.
    pub sliding_window: bool,
    /// Users with fewer interactions than this are dropped (counted).
    pub min_interactions: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { n_neg: 3, candidate_size: 20, seed: 7, sliding_window: false, min_interactions: 2 }
    }
}

impl BuildOptions {
    pub fn validate(&self) -> DataResult<()> {
        if self.n_neg == 0 {
            return Err(DataError::Invalid("n_neg must be >= 1".into()));
        }
        if self.candidate_size < 2 {
            return Err(DataError::Invalid("candidate_size must be >= 2".into()));
        }
        if self.min_interactions < 2 {
            return Err(DataError::Invalid("min_interactions must be >= 2".into()));
        }
        Ok(())
    }
}

/// Deterministic seed mixing (splitmix64 finalizer) so every instance gets
/// its own reproducible stream regardless of build order.
pub fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sample `n` distinct items uniformly from the catalog minus `exclude`,
/// using a dedicated ChaCha stream seeded with `seed`. Order within the
/// result is the (seeded) draw order.
pub fn sample_negatives(
    catalog: &Catalog,
    exclude: &[ItemId],
    n: usize,
    seed: u64,
) -> DataResult<Vec<ItemId>> {
    let mut pool: Vec<ItemId> =
        catalog.iter().map(|i| i.id).filter(|id| !exclude.contains(id)).collect();
    if pool.len() < n {
        return Err(DataError::PoolTooSmall {
            what: "negative sampling".into(),
            need: n,
            have: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Partial Fisher-Yates: only the first n positions are settled.
    for j in 0..n {
        let k = j + rand::Rng::random_range(&mut rng, 0..pool.len() - j);
        pool.swap(j, k);
    }
    pool.truncate(n);
    Ok(pool)
}

/// Deterministically shuffled index batches for one epoch. The trailing
/// short batch is kept; its actual length is what enters the partner-count
/// formula downstream.
pub fn make_batches(
    n_instances: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> DataResult<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(DataError::Invalid("batch_size must be >= 1".into()));
    }
    if n_instances == 0 {
        return Err(DataError::Empty("cannot batch an empty instance list".into()));
    }
    let mut idx: Vec<usize> = (0..n_instances).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64, 0x0BA7C4));
    idx.shuffle(&mut rng);
    Ok(idx.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Shared by ingestion and synthesis: instances from per-user sequences,
/// chronological 8:1:1 split, popularity counts, per-instance sampling.
pub(crate) fn build_split(
    sequences: &[InteractionSequence],
    catalog: Catalog,
    opts: &BuildOptions,
) -> DataResult<DatasetSplit> {
    opts.validate()?;
    struct Proto {
        user_id: u32,
        context_end: usize,
        seq: usize,
        ts: i64,
    }
    let mut protos: Vec<Proto> = Vec::new();
    for (s_idx, s) in sequences.iter().enumerate() {
        debug_assert!(s.items.len() >= opts.min_interactions);
        debug_assert_eq!(s.items.len(), s.timestamps.len());
        if opts.sliding_window {
            for p in 1..s.items.len() {
                protos.push(Proto { user_id: s.user_id, context_end: p, seq: s_idx, ts: s.timestamps[p] });
            }
        } else {
            let p = s.items.len() - 1;
            protos.push(Proto { user_id: s.user_id, context_end: p, seq: s_idx, ts: s.timestamps[p] });
        }
    }
    if protos.is_empty() {
        return Err(DataError::Empty("no instances survive filtering".into()));
    }
    // Chronological split over instances ordered by target timestamp;
    // user id and prefix length only break ties deterministically.
    protos.sort_by_key(|p| (p.ts, p.user_id, p.context_end));
    let n = protos.len();
    let n_train = n * 8 / 10;
    let n_val = n * 9 / 10 - n_train;

    let build_instance = |p: &Proto| -> DataResult<TrainingInstance> {
        let s = &sequences[p.seq];
        let context = s.items[..p.context_end].to_vec();
        let positive = s.items[p.context_end];
        let mut exclude = context.clone();
        exclude.push(positive);
        let cand_seed = mix_seed(opts.seed, p.user_id as u64, (p.context_end as u64) << 1);
        let neg_seed = mix_seed(opts.seed, p.user_id as u64, ((p.context_end as u64) << 1) | 1);
        let mut candidates =
            sample_negatives(&catalog, &exclude, opts.candidate_size - 1, cand_seed).map_err(
                |e| match e {
                    DataError::PoolTooSmall { need, have, .. } => DataError::PoolTooSmall {
                        what: "candidate sampling".into(),
                        need,
                        have,
                    },
                    other => other,
                },
            )?;
        candidates.push(positive);
        candidates.sort_unstable();
        let sampled_negatives = sample_negatives(&catalog, &exclude, opts.n_neg, neg_seed)?;
        Ok(TrainingInstance {
            user_id: p.user_id,
            prompt_context: context,
            positive,
            target_timestamp: p.ts,
            candidates,
            sampled_negatives,
        })
    };

    let mut train = Vec::with_capacity(n_train);
    let mut validation = Vec::with_capacity(n_val);
    let mut test = Vec::with_capacity(n - n_train - n_val);
    for (i, p) in protos.iter().enumerate() {
        let inst = build_instance(p)?;
        if i < n_train {
            train.push(inst);
        } else if i < n_train + n_val {
            validation.push(inst);
        } else {
            test.push(inst);
        }
    }
    let pop_counts = pop_counts_of(&catalog, &train)?;
    Ok(DatasetSplit { catalog, train, validation, test, pop_counts })
}

/// Per-item interaction counts over a set of instances, counting every
/// occurrence in `context + positive` (an item appearing twice in one
/// sequence counts twice).
pub fn pop_counts_of(catalog: &Catalog, instances: &[TrainingInstance]) -> DataResult<Vec<u64>> {
    let mut counts = vec![0u64; catalog.len()];
    for inst in instances {
        for &id in inst.prompt_context.iter().chain(std::iter::once(&inst.positive)) {
            counts[catalog.idx_of(id)?] += 1;
        }
    }
    Ok(counts)
}

#[cfg(test)]
pub(crate) fn toy_catalog(n: usize) -> Catalog {
    Catalog::new((0..n as u32).map(|id| Item { id, title: format!("t{id}") }).collect()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sampling_a_full_pool_returns_exactly_the_complement() {
        let cat = toy_catalog(10);
        let got = sample_negatives(&cat, &[1, 2, 3], 7, 99).unwrap();
        let mut sorted = got.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 4, 5, 6, 7, 8, 9]);
    }

    #[test]
    fn sampling_is_seed_deterministic_and_seed_sensitive() {
        let cat = toy_catalog(50);
        let a = sample_negatives(&cat, &[0], 5, 7).unwrap();
        let b = sample_negatives(&cat, &[0], 5, 7).unwrap();
        let c = sample_negatives(&cat, &[0], 5, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn undersized_pool_is_an_error() {
        let cat = toy_catalog(5);
        let err = sample_negatives(&cat, &[0, 1, 2], 3, 1).unwrap_err();
        assert!(matches!(err, DataError::PoolTooSmall { need: 3, have: 2, .. }));
    }

    #[test]
    fn batches_cover_all_indices_and_keep_the_short_tail() {
        let batches = make_batches(10, 4, 3, 0).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batch_shuffle_depends_on_seed_and_epoch() {
        let a = make_batches(64, 8, 1, 0).unwrap();
        let b = make_batches(64, 8, 1, 0).unwrap();
        let c = make_batches(64, 8, 1, 1).unwrap();
        let d = make_batches(64, 8, 2, 0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn degenerate_batching_requests_fail() {
        assert!(matches!(make_batches(5, 0, 1, 0), Err(DataError::Invalid(_))));
        assert!(matches!(make_batches(0, 4, 1, 0), Err(DataError::Empty(_))));
    }

    #[test]
    fn mix_seed_separates_nearby_inputs() {
        assert_ne!(mix_seed(1, 2, 3), mix_seed(1, 3, 2));
        assert_ne!(mix_seed(1, 2, 3), mix_seed(2, 2, 3));
        assert_eq!(mix_seed(1, 2, 3), mix_seed(1, 2, 3));
    }

    proptest! {
        #[test]
        fn sampled_negatives_are_distinct_and_outside_history(
            n_items in 10usize..60,
            hist_len in 0usize..6,
            n in 1usize..5,
            seed in 0u64..1000,
        ) {
            let cat = toy_catalog(n_items);
            let exclude: Vec<ItemId> = (0..hist_len as u32).collect();
            prop_assume!(n_items - hist_len >= n);
            let got = sample_negatives(&cat, &exclude, n, seed).unwrap();
            prop_assert_eq!(got.len(), n);
            let mut uniq = got.clone();
            uniq.sort_unstable();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), n);
            prop_assert!(got.iter().all(|id| !exclude.contains(id)));
        }
    }
}
