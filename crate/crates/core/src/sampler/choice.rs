//! Sources of random choices for the samplers.
//!
//! Every sampler draws its randomness through [`ChoiceSource`]. The random
//! implementation is backed by seeded ChaCha streams; the scripted
//! implementation walks the full tree of choices so that any sampler can be
//! enumerated exhaustively together with the exact probability of each
//! outcome.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default cap on the number of enumerated outcomes.
pub const ENUMERATION_LIMIT: usize = 100_000;

pub trait ChoiceSource {
    /// Marks the start of the draws for one layer (1-based).
    fn enter_layer(&mut self, _layer: usize) {}

    /// Uniform `k`-subset of `0..n`, sorted ascending.
    fn subset(&mut self, n: usize, k: usize) -> Vec<usize>;

    /// Randomized systematic sampling without replacement.
    ///
    /// `inclusion[j]` is the target inclusion probability of item `j`;
    /// items with probability 1 are always selected, items with
    /// probability 0 never. The selected indices are returned sorted and
    /// each item is selected with exactly its target probability.
    fn systematic(&mut self, inclusion: &[f64]) -> Vec<usize>;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent 64-bit seed from a master seed and a key path.
pub fn derive_seed(master: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix64(master), |acc, &k| {
        splitmix64(acc ^ splitmix64(k))
    })
}

/// What a random stream is used for. Distinct purposes never share draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Step = 1,
    Snapshot = 2,
    Measure = 3,
    Analysis = 4,
}

/// Random choices from a stream keyed by `(seed, purpose, index)`; each
/// layer re-keys to its own sub-stream so plans do not depend on how many
/// draws earlier layers consumed.
#[derive(Clone, Debug)]
pub struct RandomChoice {
    key: u64,
    rng: ChaCha8Rng,
}

impl RandomChoice {
    pub fn new(seed: u64, purpose: Purpose, index: u64) -> Self {
        let key = derive_seed(seed, &[purpose as u64, index]);
        Self {
            key,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(key, &[0])),
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::new(seed, Purpose::Analysis, 0)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

impl ChoiceSource for RandomChoice {
    fn enter_layer(&mut self, layer: usize) {
        self.rng = ChaCha8Rng::seed_from_u64(derive_seed(self.key, &[1 + layer as u64]));
    }

    fn subset(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "subset of size {k} from {n}");
        let mut idx = rand::seq::index::sample(&mut self.rng, n, k).into_vec();
        idx.sort_unstable();
        idx
    }

    fn systematic(&mut self, inclusion: &[f64]) -> Vec<usize> {
        let uncertain: Vec<usize> = (0..inclusion.len())
            .filter(|&j| inclusion[j] > 0.0 && inclusion[j] < 1.0)
            .collect();
        let mut order = uncertain;
        let u = if order.is_empty() {
            0.0
        } else {
            order.shuffle(&mut self.rng);
            self.rng.random::<f64>()
        };
        systematic_select(inclusion, &order, u)
    }
}

/// Selects the certain items plus, walking `order`, every uncertain item
/// whose cumulative interval contains one of the points `u, u+1, u+2, …`.
fn systematic_select(inclusion: &[f64], order: &[usize], u: f64) -> Vec<usize> {
    let mut out: Vec<usize> = (0..inclusion.len())
        .filter(|&j| inclusion[j] >= 1.0)
        .collect();
    let mut lo = 0.0;
    for &j in order {
        let hi = lo + inclusion[j];
        if (hi - u).ceil() > (lo - u).ceil() {
            out.push(j);
        }
        lo = hi;
    }
    out.sort_unstable();
    out
}

/// Offsets `u` at which the systematic selection changes, as
/// `(interval_length, midpoint)` pairs covering `[0, 1)`.
fn systematic_intervals(inclusion: &[f64], order: &[usize]) -> Vec<(f64, f64)> {
    let mut cuts = vec![0.0];
    let mut acc = 0.0;
    for &j in order {
        acc += inclusion[j];
        cuts.push(acc - acc.floor());
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    cuts.push(1.0);
    cuts.windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| (w[1] - w[0], 0.5 * (w[0] + w[1])))
        .collect()
}

/// Inclusion probabilities proportional to `weights` for a without-replacement
/// sample of size `min(k, #positive)`.
///
/// Items whose proportional share would exceed one are capped at one and the
/// remaining sample size is redistributed over the rest, so the
/// probabilities always sum to the sample size. Without capping
/// `π_j = k·w_j / Σw`.
pub fn inclusion_probabilities(weights: &[f64], k: usize) -> Result<Vec<f64>> {
    let positive: Vec<usize> = (0..weights.len()).filter(|&j| weights[j] > 0.0).collect();
    if positive.is_empty() {
        return Err(Error::SamplerDegenerate(
            "all candidate probabilities are zero".into(),
        ));
    }
    let k = k.min(positive.len());
    let mut pi = vec![0.0; weights.len()];
    if k == positive.len() {
        for &j in &positive {
            pi[j] = 1.0;
        }
        return Ok(pi);
    }
    let mut certain = vec![false; weights.len()];
    let mut n_certain = 0;
    loop {
        let mass: f64 = positive
            .iter()
            .filter(|&&j| !certain[j])
            .map(|&j| weights[j])
            .sum();
        let remaining = (k - n_certain) as f64;
        let mut capped = false;
        for &j in &positive {
            if certain[j] {
                pi[j] = 1.0;
                continue;
            }
            pi[j] = remaining * weights[j] / mass;
            if pi[j] >= 1.0 {
                certain[j] = true;
                n_certain += 1;
                capped = true;
            }
        }
        if !capped {
            break;
        }
    }
    for (p, &c) in pi.iter_mut().zip(&certain) {
        if c {
            *p = 1.0;
        }
    }
    Ok(pi)
}

/// Binomial coefficient, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        match acc.checked_mul((n - i) as u128) {
            Some(v) => acc = v / (i as u128 + 1),
            None => return u128::MAX,
        }
    }
    acc
}

fn factorial(n: usize) -> u128 {
    (1..=n as u128)
        .try_fold(1u128, |a, b| a.checked_mul(b))
        .unwrap_or(u128::MAX)
}

/// The `rank`-th `k`-subset of `0..n` in lexicographic order.
pub fn unrank_combination(n: usize, k: usize, mut rank: u128) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        for x in start..n {
            let c = binomial(n - x - 1, k - i - 1);
            if rank < c {
                out.push(x);
                start = x + 1;
                break;
            }
            rank -= c;
        }
    }
    out
}

/// The `rank`-th permutation of `items` (Lehmer code order).
fn unrank_permutation(items: &[usize], mut rank: u128) -> Vec<usize> {
    let mut pool = items.to_vec();
    let mut out = Vec::with_capacity(items.len());
    for remaining in (1..=items.len()).rev() {
        let block = factorial(remaining - 1);
        let idx = (rank / block) as usize;
        rank %= block;
        out.push(pool.remove(idx));
    }
    out
}

/// Replays a fixed prefix of decisions and records the branching of every
/// choice point, so [`enumerate`] can walk all outcomes depth-first.
#[derive(Debug)]
pub struct ScriptedChoice {
    path: Vec<u128>,
    arity: Vec<u128>,
    pos: usize,
    prob: f64,
    limit: usize,
    overflow: Option<u128>,
}

impl ScriptedChoice {
    fn new(path: Vec<u128>, limit: usize) -> Self {
        Self {
            path,
            arity: Vec::new(),
            pos: 0,
            prob: 1.0,
            limit,
            overflow: None,
        }
    }

    /// Probability of the path taken so far.
    pub fn probability(&self) -> f64 {
        self.prob
    }

    fn next(&mut self, arity: u128) -> Option<u128> {
        if arity > self.limit as u128 {
            self.overflow.get_or_insert(arity);
            return None;
        }
        if self.pos == self.path.len() {
            self.path.push(0);
        }
        let v = self.path[self.pos];
        self.arity.push(arity);
        self.pos += 1;
        Some(v)
    }
}

impl ChoiceSource for ScriptedChoice {
    fn subset(&mut self, n: usize, k: usize) -> Vec<usize> {
        let total = binomial(n, k);
        match self.next(total) {
            Some(rank) => {
                self.prob /= total as f64;
                unrank_combination(n, k, rank)
            }
            None => (0..k).collect(),
        }
    }

    fn systematic(&mut self, inclusion: &[f64]) -> Vec<usize> {
        let uncertain: Vec<usize> = (0..inclusion.len())
            .filter(|&j| inclusion[j] > 0.0 && inclusion[j] < 1.0)
            .collect();
        if uncertain.is_empty() {
            return systematic_select(inclusion, &[], 0.0);
        }
        let n_orders = factorial(uncertain.len());
        let Some(rank) = self.next(n_orders) else {
            return systematic_select(inclusion, &uncertain, 0.0);
        };
        self.prob /= n_orders as f64;
        let order = unrank_permutation(&uncertain, rank);
        let intervals = systematic_intervals(inclusion, &order);
        let Some(pick) = self.next(intervals.len() as u128) else {
            return systematic_select(inclusion, &order, 0.0);
        };
        let (len, mid) = intervals[pick as usize];
        self.prob *= len;
        systematic_select(inclusion, &order, mid)
    }
}

/// One enumerated outcome and its probability.
#[derive(Clone, Debug)]
pub struct Outcome<T> {
    pub prob: f64,
    pub value: T,
}

/// Runs `draw` once for every distinct sequence of choices it can make.
///
/// Fails with [`Error::OracleTooLarge`] once more than `limit` outcomes (or a
/// single choice point with more than `limit` branches) are encountered.
pub fn enumerate<T>(
    limit: usize,
    mut draw: impl FnMut(&mut ScriptedChoice) -> Result<T>,
) -> Result<Vec<Outcome<T>>> {
    let mut outcomes = Vec::new();
    let mut path: Vec<u128> = Vec::new();
    loop {
        let mut script = ScriptedChoice::new(path, limit);
        let value = draw(&mut script)?;
        if let Some(size) = script.overflow {
            return Err(Error::OracleTooLarge { size, limit });
        }
        outcomes.push(Outcome {
            prob: script.prob,
            value,
        });
        if outcomes.len() > limit {
            return Err(Error::OracleTooLarge {
                size: outcomes.len() as u128,
                limit,
            });
        }
        let mut taken = script.path;
        taken.truncate(script.pos);
        let arity = script.arity;
        match (0..taken.len()).rev().find(|&d| taken[d] + 1 < arity[d]) {
            Some(d) => {
                taken.truncate(d + 1);
                taken[d] += 1;
                path = taken;
            }
            None => return Ok(outcomes),
        }
    }
}
