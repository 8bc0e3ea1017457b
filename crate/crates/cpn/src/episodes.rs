//! Seeded randomness and N-way K-shot episode sampling.
//!
//! Every stochastic routine in the crate draws from an [`RngStream`]
//! addressed by a `(seed, stream)` pair, so any single episode, parameter
//! init, or sweep can be regenerated in isolation and in parallel without
//! shared state. Stream ids are assigned by convention:
//!
//! - evaluation episode `i` uses stream `i`;
//! - meta-training epoch `e` (1-based), episode `i` uses `e * 2^32 + i`;
//! - fixed jobs (parameter init, random prototype draws, finite-difference
//!   sweeps, synthetic generation) use the dedicated constants below, placed
//!   at the top of the id space where episode streams cannot reach.
//!
//! The generator is xoshiro256** seeded through splitmix64: the root is the
//! first splitmix64 output of the seed XOR the stream id, and the state is
//! the next four outputs of a splitmix64 chain started at that root.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::DatasetBundle;

/// Stream for model parameter initialization.
pub const INIT_STREAM: u64 = u64::MAX;
/// Stream for drawing random (untrained) component prototypes.
pub const RICP_STREAM: u64 = u64::MAX - 1;
/// Stream for materializing the concat fusion head.
pub const CONCAT_INIT_STREAM: u64 = u64::MAX - 2;
/// Stream for finite-difference gradient sweeps.
pub const GRADCHECK_STREAM: u64 = u64::MAX - 3;
/// Stream for synthetic dataset generation.
pub const SYNTH_STREAM: u64 = u64::MAX - 4;
/// Base stream for pre-training epoch shuffles (`base + epoch`). Sits far
/// above the meta-training band (`epoch << 32 | episode`) and below the
/// reserved ids at the top of the range.
pub const PRETRAIN_SHUFFLE_BASE: u64 = 1 << 63;

/// Stream id for evaluation episode `i`.
pub fn eval_stream(episode: usize) -> u64 {
    episode as u64
}

/// Stream id for meta-training epoch `epoch` (1-based), episode `episode`.
pub fn meta_stream(epoch: usize, episode: usize) -> u64 {
    assert!(epoch >= 1, "meta-training epochs are 1-based");
    assert!((episode as u64) < (1 << 32), "episode index overflows stream");
    (epoch as u64) * (1 << 32) + episode as u64
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// xoshiro256** generator bound to one `(seed, stream)` address.
#[derive(Debug, Clone)]
pub struct RngStream {
    s: [u64; 4],
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut sm = seed;
        let root = splitmix64(&mut sm) ^ stream;
        let mut sm = root;
        let mut s = [0u64; 4];
        for slot in &mut s {
            *slot = splitmix64(&mut sm);
        }
        // xoshiro cannot run from the all-zero state.
        if s == [0, 0, 0, 0] {
            s[0] = 0x9E3779B97F4A7C15;
        }
        RngStream {
            s,
            spare_normal: None,
        }
    }

    #[cfg(test)]
    fn from_state(s: [u64; 4]) -> Self {
        RngStream {
            s,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform integer in [0, bound) by multiply-shift. The bias is at most
    /// bound / 2^64, far below anything observable at this scale.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "below(0) is meaningless");
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }

    /// Uniform double in [0, 1) with 53 random mantissa bits.
    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller; the paired draw is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let mut u1 = self.unit_f64();
        while u1 == 0.0 {
            u1 = self.unit_f64();
        }
        let u2 = self.unit_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// First `k` entries of a partial Fisher-Yates shuffle of `0..n`:
    /// `k` distinct indices, each subset equally likely.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot choose {k} distinct from {n}");
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}

// ------------------------------------------------------------- episodes

#[derive(Debug, Error, PartialEq)]
pub enum EpisodeError {
    #[error("episode needs {need} classes but the pool has {have}")]
    PoolTooSmall { need: usize, have: usize },
    #[error("class {class} has {have} records but the episode needs {need}")]
    ClassTooSmall { class: u32, need: usize, have: usize },
    #[error("class {class} appears more than once in the pool")]
    DuplicateClassInPool { class: u32 },
    #[error("invalid episode spec: {0}")]
    BadSpec(&'static str),
}

/// Episode shape: N-way, K-shot, Q queries per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize, n_query: usize) -> Result<Self, EpisodeError> {
        if n_way < 2 {
            return Err(EpisodeError::BadSpec("n_way must be at least 2"));
        }
        if k_shot < 1 {
            return Err(EpisodeError::BadSpec("k_shot must be at least 1"));
        }
        if n_query < 1 {
            return Err(EpisodeError::BadSpec("n_query must be at least 1"));
        }
        Ok(EpisodeSpec {
            n_way,
            k_shot,
            n_query,
        })
    }

    /// Records each selected class must provide.
    pub fn per_class(&self) -> usize {
        self.k_shot + self.n_query
    }
}

/// One sampled episode. `classes` is sorted ascending; `support` and
/// `query` hold `(record index, class id)` pairs grouped in class order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<u32>,
    pub support: Vec<(usize, u32)>,
    pub query: Vec<(usize, u32)>,
}

impl Episode {
    /// Support record indices for one episode class.
    pub fn support_of(&self, class: u32) -> impl Iterator<Item = usize> + '_ {
        self.support
            .iter()
            .filter(move |(_, c)| *c == class)
            .map(|(i, _)| *i)
    }

    /// Position of `class` in the sorted class list.
    pub fn class_position(&self, class: u32) -> Option<usize> {
        self.classes.binary_search(&class).ok()
    }
}

/// Draws one episode from `pool` (distinct class ids). The whole pool is
/// precondition-checked so failures cannot depend on which classes the
/// stream happens to select. Draw order depends on pool order; callers
/// that need reproducibility across runs must pass a stable pool.
pub fn sample_episode(
    bundle: &DatasetBundle,
    pool: &[u32],
    spec: &EpisodeSpec,
    rng: &mut RngStream,
) -> Result<Episode, EpisodeError> {
    if pool.len() < spec.n_way {
        return Err(EpisodeError::PoolTooSmall {
            need: spec.n_way,
            have: pool.len(),
        });
    }
    let mut sorted = pool.to_vec();
    sorted.sort_unstable();
    for pair in sorted.windows(2) {
        if pair[0] == pair[1] {
            return Err(EpisodeError::DuplicateClassInPool { class: pair[0] });
        }
    }
    let need = spec.per_class();
    for &class in pool {
        let have = bundle.records_of(class).len();
        if have < need {
            return Err(EpisodeError::ClassTooSmall { class, need, have });
        }
    }

    let mut classes: Vec<u32> = rng
        .choose_distinct(pool.len(), spec.n_way)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    classes.sort_unstable();

    let mut support = Vec::with_capacity(spec.n_way * spec.k_shot);
    let mut query = Vec::with_capacity(spec.n_way * spec.n_query);
    for &class in &classes {
        let records = bundle.records_of(class);
        let picks = rng.choose_distinct(records.len(), need);
        for &p in &picks[..spec.k_shot] {
            support.push((records[p], class));
        }
        for &p in &picks[spec.k_shot..] {
            query.push((records[p], class));
        }
    }
    Ok(Episode {
        classes,
        support,
        query,
    })
}
