//! Synthetic corpus generation with planted preference structure.
//!
//! Users and items get latent vectors; each user's interaction sequence is
//! drawn i.i.d. from the softmax of their latent affinity over the catalog.
//! Items also carry a scalar bias drawn once per item, which plants a
//! popularity skew: high-bias items are interacted with by everyone, which is
//! exactly the structure the popularity-bias metric needs to be non-trivial.
//!
//! Generation is f64 throughout (it produces ids, not model inputs) and is a
//! pure function of its arguments — same seed, same corpus, bit for bit.

use super::{build_split, BuildOptions, Catalog, DataError, DataResult, DatasetSplit, InteractionSequence, Item};
use crate::math;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Scale applied to the user-item latent inner product. Larger values make
/// sequences more concentrated on each user's favorite items.
const AFFINITY_SCALE: f64 = 2.5;
/// Standard deviation of the per-item popularity bias.
const POPULARITY_SD: f64 = 0.9;
/// Word base for synthetic titles: items share these words, so multi-token
/// response mode has a genuinely shared vocabulary.
const TITLE_BASE: usize = 40;

/// Generation-time latents, returned so tests can use the true affinities as
/// an oracle for the planted structure.
#[derive(Debug, Clone)]
pub struct SyntheticLatents {
    pub user: Vec<Vec<f64>>,
    pub item: Vec<Vec<f64>>,
    pub item_bias: Vec<f64>,
    pub latent_dim: usize,
}

impl SyntheticLatents {
    /// True (pre-softmax) affinity of user `u` for item index `i`.
    pub fn affinity(&self, u: usize, i: usize) -> f64 {
        let k = self.latent_dim as f64;
        AFFINITY_SCALE * math::dot(&self.user[u], &self.item[i]) / k.sqrt() + self.item_bias[i]
    }
}

pub fn generate_synthetic(
    n_users: usize,
    n_items: usize,
    latent_dim: usize,
    seq_len: usize,
    seed: u64,
    opts: &BuildOptions,
) -> DataResult<DatasetSplit> {
    generate_synthetic_with_latents(n_users, n_items, latent_dim, seq_len, seed, opts).map(|(s, _)| s)
}

pub fn generate_synthetic_with_latents(
    n_users: usize,
    n_items: usize,
    latent_dim: usize,
    seq_len: usize,
    seed: u64,
    opts: &BuildOptions,
) -> DataResult<(DatasetSplit, SyntheticLatents)> {
    if n_users == 0 {
        return Err(DataError::Invalid("n_users must be >= 1".into()));
    }
    if n_items < 2 {
        return Err(DataError::Invalid("n_items must be >= 2".into()));
    }
    if latent_dim == 0 {
        return Err(DataError::Invalid("latent_dim must be >= 1".into()));
    }
    if seq_len < 2 {
        return Err(DataError::Invalid("seq_len must be >= 2 so every user yields an instance".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw_vec = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..latent_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let user: Vec<Vec<f64>> = (0..n_users).map(|_| draw_vec(&mut rng)).collect();
    let item: Vec<Vec<f64>> = (0..n_items).map(|_| draw_vec(&mut rng)).collect();
    let item_bias: Vec<f64> =
        (0..n_items).map(|_| POPULARITY_SD * rng.sample::<f64, _>(StandardNormal)).collect();
    let latents = SyntheticLatents { user, item, item_bias, latent_dim };

    let mut sequences = Vec::with_capacity(n_users);
    let mut probs = vec![0.0f64; n_items];
    for u in 0..n_users {
        for (i, p) in probs.iter_mut().enumerate() {
            *p = latents.affinity(u, i);
        }
        math::softmax_in_place(&mut probs);
        let items = (0..seq_len).map(|_| categorical(&probs, &mut rng) as u32).collect();
        let timestamps = (0..seq_len as i64).collect();
        sequences.push(InteractionSequence { user_id: u as u32, items, timestamps });
    }

    let catalog = Catalog::new(
        (0..n_items as u32).map(|id| Item { id, title: synth_title(id as usize) }).collect(),
    )?;
    let split = build_split(&sequences, catalog, opts)?;
    Ok((split, latents))
}

/// Inverse-CDF draw from a probability vector.
fn categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if x < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Unique multi-word title: the base-40 digits of the item index, most
/// significant first. Index 57 becomes "w1 w17"; index 17 becomes "w17".
fn synth_title(idx: usize) -> String {
    let mut digits = Vec::new();
    let mut v = idx;
    loop {
        digits.push(v % TITLE_BASE);
        v /= TITLE_BASE;
        if v == 0 {
            break;
        }
    }
    digits.reverse();
    digits.iter().map(|d| format!("w{d}")).collect::<Vec<_>>().join(" ")
}
