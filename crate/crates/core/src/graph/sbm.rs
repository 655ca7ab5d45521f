use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{GraphDataset, Labels, Masks, NormalizeOptions};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

const EDGE_STREAM: u64 = 1;
const FEATURE_STREAM: u64 = 2;
const SPLIT_STREAM: u64 = 3;

/// Stochastic block model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SbmConfig {
    pub n_nodes: usize,
    pub n_blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feat_dim: usize,
    /// Standard deviation of the Gaussian feature noise.
    pub noise: f64,
    pub seed: u64,
}

impl SbmConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_blocks == 0 || self.n_blocks > self.n_nodes {
            return bad(format!(
                "need 1 <= blocks <= nodes, got {} blocks for {} nodes",
                self.n_blocks, self.n_nodes
            ));
        }
        if !(0.0..=1.0).contains(&self.p_in) {
            return bad(format!("p_in = {} outside [0, 1]", self.p_in));
        }
        if !(0.0..=1.0).contains(&self.p_out) {
            return bad(format!("p_out = {} outside [0, 1]", self.p_out));
        }
        if self.p_out > self.p_in {
            return bad(format!(
                "p_out = {} exceeds p_in = {}",
                self.p_out, self.p_in
            ));
        }
        if self.feat_dim == 0 {
            return bad("feat_dim must be at least 1".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise = {} must be a nonnegative real", self.noise));
        }
        Ok(())
    }

    /// Block of node `i`: nodes are split into contiguous, near-equal blocks.
    pub fn block_of(&self, i: usize) -> usize {
        i * self.n_blocks / self.n_nodes
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Generates a stochastic-block-model dataset.
///
/// Labels are block ids; features are the one-hot block centroid
/// (block `b` lights coordinate `b mod feat_dim`) plus Gaussian noise.
/// Masks are a per-block stratified 60/20/20 split. Uses the default
/// normalization (symmetric, self-loops).
pub fn generate_sbm(config: &SbmConfig) -> Result<GraphDataset> {
    config.validate()?;
    let n = config.n_nodes;

    let mut rng = stream(config.seed, EDGE_STREAM);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if config.block_of(u) == config.block_of(v) {
                config.p_in
            } else {
                config.p_out
            };
            // draw unconditionally so the stream does not depend on p
            let x: f64 = rng.random();
            if x < p {
                edges.push((u, v));
            }
        }
    }

    let mut rng = stream(config.seed, FEATURE_STREAM);
    let normal = Normal::new(0.0, config.noise).expect("noise validated");
    let features = DenseMatrix::from_fn(n, config.feat_dim, |r, c| {
        let centroid = if c == config.block_of(r) % config.feat_dim {
            1.0
        } else {
            0.0
        };
        centroid + normal.sample(&mut rng)
    });

    let labels: Vec<usize> = (0..n).map(|i| config.block_of(i)).collect();

    let mut rng = stream(config.seed, SPLIT_STREAM);
    let mut masks = Masks::default();
    for b in 0..config.n_blocks {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == b).collect();
        members.shuffle(&mut rng);
        let size = members.len();
        let n_train = ((size as f64) * 0.6).round() as usize;
        let n_val = (((size as f64) * 0.2).round() as usize).min(size - n_train);
        masks.train.extend_from_slice(&members[..n_train]);
        masks
            .val
            .extend_from_slice(&members[n_train..n_train + n_val]);
        masks.test.extend_from_slice(&members[n_train + n_val..]);
    }

    GraphDataset::new(
        &edges,
        features,
        Labels::Single(labels),
        masks,
        config.n_blocks,
        NormalizeOptions::default(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, blocks: usize, p_in: f64, p_out: f64, seed: u64) -> SbmConfig {
        SbmConfig {
            n_nodes: n,
            n_blocks: blocks,
            p_in,
            p_out,
            feat_dim: 4,
            noise: 0.5,
            seed,
        }
    }

    #[test]
    fn degenerate_probabilities_give_disjoint_triangles() {
        let g = generate_sbm(&cfg(6, 2, 1.0, 0.0, 1)).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5)]);
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_sbm(&cfg(30, 3, 0.4, 0.05, 9)).unwrap();
        let b = generate_sbm(&cfg(30, 3, 0.4, 0.05, 9)).unwrap();
        assert_eq!(a.edges(), b.edges());
        assert_eq!(a.features(), b.features());
        assert_eq!(a.masks(), b.masks());
    }

    #[test]
    fn within_block_edge_count_is_binomial() {
        // 3 blocks of 20: 3·C(20,2) = 570 within-block pairs at p_in = 0.3
        let c = cfg(60, 3, 0.3, 0.02, 13);
        let g = generate_sbm(&c).unwrap();
        let within = g
            .edges()
            .iter()
            .filter(|&&(u, v)| c.block_of(u) == c.block_of(v))
            .count() as f64;
        let pairs: f64 = 3.0 * 190.0;
        let mean = pairs * 0.3;
        let sd = (pairs * 0.3 * 0.7).sqrt();
        assert!((within - mean).abs() < 4.0 * sd, "within = {within}");
    }

    #[test]
    fn masks_are_stratified_and_cover_all_nodes() {
        let g = generate_sbm(&cfg(60, 3, 0.3, 0.02, 13)).unwrap();
        let m = g.masks();
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (36, 12, 12));
        let Labels::Single(labels) = g.labels() else {
            unreachable!()
        };
        for b in 0..3 {
            assert_eq!(m.train.iter().filter(|&&i| labels[i] == b).count(), 12);
        }
    }

    #[test]
    fn invalid_parameters() {
        assert!(generate_sbm(&cfg(6, 2, 1.5, 0.0, 1)).is_err());
        assert!(generate_sbm(&cfg(6, 2, 0.2, 0.3, 1)).is_err());
        assert!(generate_sbm(&cfg(2, 3, 0.5, 0.1, 1)).is_err());
    }
}
