//! Paired synthetic data with shared latent structure.
//!
//! Each instance starts from a latent `z ~ N(0, I)`. The text side is a
//! discretization of `z + noise·ε_t`: token `j` is `j·N_BINS + bin(z_j)`, one
//! token per latent coordinate. The molecule side is a ring of six atoms with
//! a short chain hanging off atom 0; atom `k` carries the coordinates
//! `{j : j mod K = k}` of `z + noise·ε_m`, embedded through a fixed mixing
//! matrix with orthonormal columns. No single atom sees all of `z`, so the
//! molecule encoder has to aggregate over the graph to recover it.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{InstancePair, MoleculeGraph, TokenSequence};
use crate::error::{Error, Result};

pub const N_BINS: usize = 8;
/// Latent values are clamped to `[-BIN_RANGE, BIN_RANGE]` before binning.
pub const BIN_RANGE: f64 = 2.5;
pub const RING_SIZE: usize = 6;
pub const MAX_CHAIN: usize = 4;
const MIXING_SEED: u64 = 0x6d6f_6c5f_6d69_78;

pub fn vocab_size(latent_dim: usize) -> usize {
    latent_dim * N_BINS
}

pub fn atom_dim(latent_dim: usize) -> usize {
    2 * latent_dim
}

pub fn bin_of(value: f64) -> usize {
    let width = 2.0 * BIN_RANGE / N_BINS as f64;
    let b = ((value.clamp(-BIN_RANGE, BIN_RANGE) + BIN_RANGE) / width).floor() as usize;
    b.min(N_BINS - 1)
}

/// `atom_dim × latent_dim` matrix with orthonormal columns. Depends only on
/// `latent_dim`, so independently generated corpora share it.
pub fn mixing_matrix(latent_dim: usize) -> Array2<f64> {
    let rows = atom_dim(latent_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(MIXING_SEED ^ latent_dim as u64);
    let mut m = Array2::<f64>::zeros((rows, latent_dim));
    for j in 0..latent_dim {
        loop {
            let mut v: Array1<f64> = (0..rows).map(|_| StandardNormal.sample(&mut rng)).collect();
            for k in 0..j {
                let prev = m.column(k);
                let proj = prev.dot(&v);
                v.scaled_add(-proj, &prev);
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-8 {
                m.column_mut(j).assign(&(v / norm));
                break;
            }
        }
    }
    m
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub pairs: Vec<InstancePair>,
    /// `n × latent_dim`, row `i` is instance `i`'s clean latent.
    pub latents: Array2<f64>,
    pub mixing: Array2<f64>,
}

pub fn generate_synthetic_corpus(
    n_pairs: usize,
    latent_dim: usize,
    noise: f64,
    seed: u64,
) -> Result<SyntheticCorpus> {
    if n_pairs < 2 {
        return Err(Error::config("pairs", "must be at least 2"));
    }
    if latent_dim < 2 {
        return Err(Error::config("latent_dim", "must be at least 2"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::config("noise", "must be finite and non-negative"));
    }
    let mixing = mixing_matrix(latent_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut latents = Array2::zeros((n_pairs, latent_dim));
    let mut pairs = Vec::with_capacity(n_pairs);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    for i in 0..n_pairs {
        let z: Array1<f64> = (0..latent_dim).map(|_| normal(&mut rng)).collect();
        latents.row_mut(i).assign(&z);

        let tokens = z
            .iter()
            .enumerate()
            .map(|(j, &zj)| (j * N_BINS + bin_of(zj + noise * normal(&mut rng))) as u32)
            .collect();
        let text = TokenSequence::new(tokens)?;

        let jitter: Array1<f64> = (0..latent_dim).map(|_| noise * normal(&mut rng)).collect();
        let z_mol = &z + &jitter;
        let chain = rng.random_range(1..=MAX_CHAIN);
        let k = RING_SIZE + chain;
        let mut features = Array2::zeros((k, mixing.nrows()));
        for atom in 0..k {
            let mut slice = Array1::zeros(latent_dim);
            for j in (atom..latent_dim).step_by(k) {
                slice[j] = z_mol[j];
            }
            features.row_mut(atom).assign(&mixing.dot(&slice));
        }
        let mut edges: Vec<(usize, usize)> = (0..RING_SIZE).map(|a| (a, (a + 1) % RING_SIZE)).collect();
        let mut prev = 0;
        for atom in RING_SIZE..k {
            edges.push((prev, atom));
            prev = atom;
        }
        let molecule = MoleculeGraph::new(features, edges)?;

        pairs.push(InstancePair {
            id: format!("syn-{i:05}"),
            text,
            molecule,
        });
    }
    Ok(SyntheticCorpus {
        pairs,
        latents,
        mixing,
    })
}

pub fn generate_synthetic(
    n_pairs: usize,
    latent_dim: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<InstancePair>> {
    Ok(generate_synthetic_corpus(n_pairs, latent_dim, noise, seed)?.pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixing_columns_are_orthonormal() {
        let m = mixing_matrix(6);
        let gram = m.t().dot(&m);
        for ((i, j), v) in gram.indexed_iter() {
            let target = if i == j { 1.0 } else { 0.0 };
            assert!((v - target).abs() < 1e-10);
        }
    }

    #[test]
    fn shapes_and_vocab() {
        let c = generate_synthetic_corpus(5, 4, 0.1, 1).unwrap();
        for p in &c.pairs {
            assert_eq!(p.text.len(), 4);
            assert!(p.text.tokens().iter().all(|&t| (t as usize) < vocab_size(4)));
            let k = p.molecule.num_atoms();
            assert!((RING_SIZE + 1..=RING_SIZE + MAX_CHAIN).contains(&k));
            assert_eq!(p.molecule.edges().len(), k);
            assert_eq!(p.molecule.feature_dim(), atom_dim(4));
        }
    }

    #[test]
    fn preconditions() {
        assert!(generate_synthetic(1, 4, 0.0, 0).is_err());
        assert!(generate_synthetic(4, 1, 0.0, 0).is_err());
        assert!(generate_synthetic(4, 4, -1.0, 0).is_err());
    }

    #[test]
    fn bins_cover_range() {
        assert_eq!(bin_of(-100.0), 0);
        assert_eq!(bin_of(100.0), N_BINS - 1);
        assert_eq!(bin_of(BIN_RANGE), N_BINS - 1);
        assert_eq!(bin_of(0.01), N_BINS / 2);
    }
}
