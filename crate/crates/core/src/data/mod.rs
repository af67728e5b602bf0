//! Paired text/molecule instances, featurization, batching and triplet sampling.

mod io;
pub mod synthetic;

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use io::{
    load_atom_table, load_dataset, save_dataset, DatasetLoader, Tokenizer, DEFAULT_ATOM_DIM,
    DEFAULT_MAX_LEN, DEFAULT_VOCAB_SIZE,
};
pub use synthetic::{generate_synthetic, generate_synthetic_corpus, SyntheticCorpus};

/// Token ids of one text description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<u32>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Validation("token sequence must be nonempty".into()));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Atom feature matrix plus an undirected edge list. Self-loops are never
/// stored; the encoder adds them.
#[derive(Debug, Clone, PartialEq)]
pub struct MoleculeGraph {
    atom_features: Array2<f64>,
    edges: Vec<(usize, usize)>,
}

impl MoleculeGraph {
    pub fn new(atom_features: Array2<f64>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let k = atom_features.nrows();
        if k == 0 {
            return Err(Error::Validation("a molecule needs at least one atom".into()));
        }
        if atom_features.ncols() == 0 {
            return Err(Error::Validation("atom features must be nonempty".into()));
        }
        for &(i, j) in &edges {
            if i >= k || j >= k {
                return Err(Error::Validation(format!(
                    "edge ({i}, {j}) out of range for {k} atoms"
                )));
            }
            if i == j {
                return Err(Error::Validation(format!("self-loop on atom {i}")));
            }
        }
        if atom_features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("atom features must be finite".into()));
        }
        Ok(Self {
            atom_features,
            edges,
        })
    }

    pub fn atom_features(&self) -> &Array2<f64> {
        &self.atom_features
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_atoms(&self) -> usize {
        self.atom_features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.atom_features.ncols()
    }

    /// Binary symmetric adjacency without self-loops. Duplicate edges collapse.
    pub fn adjacency(&self) -> Array2<f64> {
        let k = self.num_atoms();
        let mut a = Array2::zeros((k, k));
        for &(i, j) in &self.edges {
            a[[i, j]] = 1.0;
            a[[j, i]] = 1.0;
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstancePair {
    pub id: String,
    pub text: TokenSequence,
    pub molecule: MoleculeGraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletDirection {
    TextAnchor,
    MoleculeAnchor,
}

/// Batch-local triplet. The positive is always the anchor's own counterpart
/// in the other modality, so `positive_index == anchor_index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor_index: usize,
    pub positive_index: usize,
    pub negative_index: usize,
    pub direction: TripletDirection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStrategy {
    #[default]
    Uniform,
    /// Closest in-batch counterpart by Euclidean distance.
    Hard,
}

/// Substructure id → feature vector lookup with a deterministic fallback.
#[derive(Debug, Clone)]
pub struct AtomFeatureTable {
    dim: usize,
    entries: HashMap<String, Array1<f64>>,
}

impl AtomFeatureTable {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "atom feature dimension must be positive");
        Self {
            dim,
            entries: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, key: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "atom table vector has length {}, expected {}",
                vector.len(),
                self.dim
            )));
        }
        self.entries.insert(key.into(), Array1::from(vector));
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&Array1<f64>> {
        self.entries.get(key)
    }

    /// Table row for `key`, or the hashed fallback when absent.
    pub fn lookup(&self, key: &str) -> Array1<f64> {
        match self.entries.get(key) {
            Some(v) => v.clone(),
            None => hashed_unit_vector(key, self.dim),
        }
    }
}

pub(crate) fn stable_seed(key: &str) -> u64 {
    let digest = Sha256::digest(key.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

/// Unit-norm Gaussian direction seeded by the SHA-256 of `key`.
pub fn hashed_unit_vector(key: &str, dim: usize) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(key));
    loop {
        let v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > 0.0 {
            return v / norm;
        }
    }
}

pub fn featurize_molecule(
    atoms: &[impl AsRef<str>],
    edges: Vec<(usize, usize)>,
    table: &AtomFeatureTable,
) -> Result<MoleculeGraph> {
    if atoms.is_empty() {
        return Err(Error::Validation("a molecule needs at least one atom".into()));
    }
    let mut features = Array2::zeros((atoms.len(), table.dim()));
    for (mut row, atom) in features.rows_mut().into_iter().zip(atoms) {
        row.assign(&table.lookup(atom.as_ref()));
    }
    MoleculeGraph::new(features, edges)
}

/// Shuffles `0..n` under `seed` and cuts it into full batches. A trailing
/// batch shorter than `batch_size` is dropped.
pub fn make_batches(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::config("batch_size", "must be at least 2"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// One triplet per instance and direction: all text anchors first, then all
/// molecule anchors. Each negative is `r` or `r + 1` for
/// `r = rng.random_range(0..n - 1)`, skipping the anchor, i.e. uniform over the
/// other instances.
pub fn sample_triplets_with(n: usize, rng: &mut impl Rng) -> Result<Vec<Triplet>> {
    if n < 2 {
        return Err(Error::Validation("triplets need a batch of at least 2".into()));
    }
    let mut out = Vec::with_capacity(2 * n);
    for direction in [TripletDirection::TextAnchor, TripletDirection::MoleculeAnchor] {
        for anchor in 0..n {
            let r = rng.random_range(0..n - 1);
            let negative = if r >= anchor { r + 1 } else { r };
            out.push(Triplet {
                anchor_index: anchor,
                positive_index: anchor,
                negative_index: negative,
                direction,
            });
        }
    }
    Ok(out)
}

pub fn sample_triplets(n: usize, seed: u64) -> Result<Vec<Triplet>> {
    sample_triplets_with(n, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Hard negatives: for each anchor, the nearest non-matching row of the other
/// modality. Ties go to the lower index.
pub fn hard_triplets(text: &Array2<f64>, molecule: &Array2<f64>) -> Result<Vec<Triplet>> {
    let n = text.nrows();
    if n < 2 || molecule.nrows() != n {
        return Err(Error::Validation(
            "hard negatives need two aligned batches of at least 2".into(),
        ));
    }
    let nearest = |anchors: &Array2<f64>, others: &Array2<f64>, i: usize| {
        let a = anchors.row(i);
        (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d: f64 = a.iter().zip(others.row(j)).map(|(x, y)| (x - y).powi(2)).sum();
                (j, d)
            })
            .fold((usize::MAX, f64::INFINITY), |best, cur| {
                if cur.1 < best.1 {
                    cur
                } else {
                    best
                }
            })
            .0
    };
    let mut out = Vec::with_capacity(2 * n);
    for (direction, anchors, others) in [
        (TripletDirection::TextAnchor, text, molecule),
        (TripletDirection::MoleculeAnchor, molecule, text),
    ] {
        for i in 0..n {
            out.push(Triplet {
                anchor_index: i,
                positive_index: i,
                negative_index: nearest(anchors, others, i),
                direction,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::collections::BTreeSet;

    #[test]
    fn featurize_known_ids_copies_table_rows() {
        let mut table = AtomFeatureTable::new(3);
        table.insert("C", vec![1.0, 2.0, 3.0]).unwrap();
        table.insert("O", vec![-1.0, 0.5, 0.0]).unwrap();
        let g = featurize_molecule(&["C", "O"], vec![(0, 1)], &table).unwrap();
        assert_eq!(g.atom_features(), &array![[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]]);
    }

    #[test]
    fn unknown_ids_share_a_deterministic_unit_fallback() {
        let table = AtomFeatureTable::new(5);
        let g = featurize_molecule(&["Xx", "Xx"], vec![], &table).unwrap();
        assert_eq!(g.atom_features().row(0), g.atom_features().row(1));
        let n = g.atom_features().row(0).dot(&g.atom_features().row(0));
        assert!((n - 1.0).abs() < 1e-12);
        assert_ne!(hashed_unit_vector("Xx", 5), hashed_unit_vector("Yy", 5));
    }

    #[test]
    fn mixed_ids_match_direct_lookup() {
        let mut table = AtomFeatureTable::new(4);
        table.insert("N", vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let atoms = ["N", "unk-1", "N"];
        let g = featurize_molecule(&atoms, vec![(0, 1), (1, 2)], &table).unwrap();
        assert_eq!(g.atom_features().dim(), (3, 4));
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
        for (i, a) in atoms.iter().enumerate() {
            let expected = table
                .get(a)
                .cloned()
                .unwrap_or_else(|| hashed_unit_vector(a, 4));
            assert_eq!(g.atom_features().row(i), expected);
        }
    }

    #[test]
    fn empty_molecule_is_rejected() {
        let table = AtomFeatureTable::new(2);
        let atoms: [&str; 0] = [];
        assert!(featurize_molecule(&atoms, vec![], &table).is_err());
    }

    #[test]
    fn edges_are_validated() {
        let f = Array2::ones((2, 2));
        assert!(MoleculeGraph::new(f.clone(), vec![(0, 2)]).is_err());
        assert!(MoleculeGraph::new(f.clone(), vec![(1, 1)]).is_err());
        assert!(MoleculeGraph::new(f, vec![(0, 1), (1, 0)]).is_ok());
    }

    #[test]
    fn batches_drop_short_remainder() {
        let b = make_batches(10, 4, 3).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4]);
        assert_eq!(b, make_batches(10, 4, 3).unwrap());
        assert!(make_batches(10, 1, 3).is_err());
    }

    #[test]
    fn different_seeds_permute_the_same_ids() {
        let a = make_batches(12, 3, 1).unwrap();
        let b = make_batches(12, 3, 2).unwrap();
        assert_ne!(a, b);
        let ms = |v: &Vec<Vec<usize>>| v.iter().flatten().copied().collect::<BTreeSet<_>>();
        assert_eq!(ms(&a), ms(&b));
        assert_eq!(ms(&a).len(), 12);
    }

    #[test]
    fn batch_of_two_forces_the_other_negative() {
        let t = sample_triplets(2, 9).unwrap();
        assert_eq!(t.len(), 4);
        for tr in t {
            assert_eq!(tr.negative_index, 1 - tr.anchor_index);
        }
    }

    #[test]
    fn triplet_count_is_twice_batch() {
        let t = sample_triplets(7, 0).unwrap();
        assert_eq!(t.len(), 14);
        assert!(t.iter().all(|t| t.negative_index != t.anchor_index));
        assert!(sample_triplets(1, 0).is_err());
    }

    #[test]
    fn hard_negative_is_nearest_other() {
        let text = array![[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]];
        let mol = array![[0.1, 0.0], [0.9, 0.0], [0.2, 0.1]];
        let t = hard_triplets(&text, &mol).unwrap();
        assert_eq!(t[0].negative_index, 2);
        assert_eq!(t[1].negative_index, 2);
        assert_eq!(t[2].negative_index, 1);
    }
}
