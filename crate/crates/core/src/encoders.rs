//! Modality-specific encoders producing per-token and per-atom representations.
//!
//! The text encoder is a token embedding, an optional contextual mixer (one
//! single-head self-attention block with learned positions and a
//! feed-forward sublayer, both residual) and a linear map to the shared
//! model width. The molecule encoder is a stack of graph convolutions
//! `σ(Â H W)` over the self-looped, normalized adjacency, followed by a
//! linear map.

use ndarray::{Array2, Axis};
use rand::Rng;

use crate::autograd::{Param, Tape, Var};
use crate::config::{AdjacencyNorm, ModelConfig};
use crate::data::{MoleculeGraph, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{fan_in_init, gaussian, join, Activation, Linear, Module};

#[derive(Debug, Clone)]
pub struct TextMixer {
    pub position: Param,
    pub w_query: Param,
    pub w_key: Param,
    pub w_value: Param,
    pub w_out: Param,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl TextMixer {
    pub fn new(embed_dim: usize, ff_dim: usize, max_len: usize, rng: &mut impl Rng) -> Self {
        Self {
            position: Param::new(gaussian(max_len, embed_dim, 0.02, rng)),
            w_query: Param::new(fan_in_init(embed_dim, embed_dim, rng)),
            w_key: Param::new(fan_in_init(embed_dim, embed_dim, rng)),
            w_value: Param::new(fan_in_init(embed_dim, embed_dim, rng)),
            w_out: Param::new(fan_in_init(embed_dim, embed_dim, rng)),
            ff_in: Linear::new(embed_dim, ff_dim, rng),
            ff_out: Linear::new(ff_dim, embed_dim, rng),
        }
    }

    pub fn max_len(&self) -> usize {
        self.position.value.nrows()
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let len = x.shape().0;
        let positions: Vec<usize> = (0..len).collect();
        let x = x.add(tape.param(&self.position).gather(&positions));
        let q = x.matmul(tape.param(&self.w_query));
        let k = x.matmul(tape.param(&self.w_key));
        let v = x.matmul(tape.param(&self.w_value));
        let scale = 1.0 / (x.shape().1 as f64).sqrt();
        let attended = q
            .matmul(k.t())
            .scale(scale)
            .softmax_rows()
            .matmul(v)
            .matmul(tape.param(&self.w_out));
        let x = x.add(attended);
        let ff = self.ff_out.forward(tape, self.ff_in.forward(tape, x).relu());
        x.add(ff)
    }
}

impl Module for TextMixer {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(join(prefix, "position"), &self.position);
        f(join(prefix, "w_query"), &self.w_query);
        f(join(prefix, "w_key"), &self.w_key);
        f(join(prefix, "w_value"), &self.w_value);
        f(join(prefix, "w_out"), &self.w_out);
        self.ff_in.visit(&join(prefix, "ff_in"), f);
        self.ff_out.visit(&join(prefix, "ff_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "position"), &mut self.position);
        f(join(prefix, "w_query"), &mut self.w_query);
        f(join(prefix, "w_key"), &mut self.w_key);
        f(join(prefix, "w_value"), &mut self.w_value);
        f(join(prefix, "w_out"), &mut self.w_out);
        self.ff_in.visit_mut(&join(prefix, "ff_in"), f);
        self.ff_out.visit_mut(&join(prefix, "ff_out"), f);
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub token_embedding: Param,
    pub mixer: Option<TextMixer>,
    pub output: Linear,
}

impl TextEncoder {
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let e = config.text_embed_dim;
        Self {
            token_embedding: Param::new(gaussian(config.vocab_size, e, 1.0, rng)),
            mixer: config
                .text_mixer
                .then(|| TextMixer::new(e, config.text_ff_dim, config.max_len, rng)),
            output: Linear::new(e, config.model_dim, rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embedding.value.nrows()
    }

    /// `L×d` token representations.
    pub fn forward<'t>(&self, tape: &'t Tape, seq: &TokenSequence) -> Result<Var<'t>> {
        let vocab = self.vocab_size();
        if let Some(&bad) = seq.tokens().iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Validation(format!(
                "token id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        let ids: Vec<usize> = seq.tokens().iter().map(|&t| t as usize).collect();
        let mut x = tape.param(&self.token_embedding).gather(&ids);
        if let Some(mixer) = &self.mixer {
            if seq.len() > mixer.max_len() {
                return Err(Error::Validation(format!(
                    "sequence of {} tokens exceeds max_len {}",
                    seq.len(),
                    mixer.max_len()
                )));
            }
            x = mixer.forward(tape, x);
        }
        Ok(self.output.forward(tape, x))
    }
}

impl Module for TextEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(join(prefix, "token_embedding"), &self.token_embedding);
        if let Some(m) = &self.mixer {
            m.visit(&join(prefix, "mixer"), f);
        }
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "token_embedding"), &mut self.token_embedding);
        if let Some(m) = &mut self.mixer {
            m.visit_mut(&join(prefix, "mixer"), f);
        }
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// `Â` for `A + I`: symmetric `D^-1/2 (A+I) D^-1/2` or row-normalized `D^-1 (A+I)`.
pub fn normalized_adjacency(graph: &MoleculeGraph, norm: AdjacencyNorm) -> Array2<f64> {
    let mut a = graph.adjacency();
    a.diag_mut().fill(1.0);
    let degree = a.sum_axis(Axis(1));
    match norm {
        AdjacencyNorm::Symmetric => {
            let inv_sqrt = degree.mapv(|d| 1.0 / d.sqrt());
            for ((i, j), v) in a.indexed_iter_mut() {
                *v *= inv_sqrt[i] * inv_sqrt[j];
            }
        }
        AdjacencyNorm::Row => {
            for (mut row, d) in a.rows_mut().into_iter().zip(degree) {
                row /= d;
            }
        }
    }
    a
}

#[derive(Debug, Clone)]
pub struct MoleculeEncoder {
    /// GCN weights, `in×out` per layer.
    pub layers: Vec<Param>,
    pub activation: Activation,
    pub norm: AdjacencyNorm,
    pub output: Linear,
}

impl MoleculeEncoder {
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(config.gcn_layers.len());
        let mut width = config.atom_dim;
        for &next in &config.gcn_layers {
            layers.push(Param::new(fan_in_init(width, next, rng)));
            width = next;
        }
        Self {
            layers,
            activation: config.gcn_activation,
            norm: config.adjacency_norm,
            output: Linear::new(width, config.model_dim, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers
            .first()
            .map_or(self.output.input_dim(), |w| w.value.nrows())
    }

    /// `K×d` atom representations.
    pub fn forward<'t>(&self, tape: &'t Tape, graph: &MoleculeGraph) -> Result<Var<'t>> {
        if graph.feature_dim() != self.input_dim() {
            return Err(Error::Shape(format!(
                "atom features have width {}, encoder expects {}",
                graph.feature_dim(),
                self.input_dim()
            )));
        }
        let adj = tape.constant(normalized_adjacency(graph, self.norm));
        let mut h = tape.constant(graph.atom_features().clone());
        for w in &self.layers {
            h = self.activation.apply(adj.matmul(h).matmul(tape.param(w)));
        }
        Ok(self.output.forward(tape, h))
    }
}

impl Module for MoleculeEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        for (i, w) in self.layers.iter().enumerate() {
            f(join(prefix, &format!("gcn{i}")), w);
        }
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (i, w) in self.layers.iter_mut().enumerate() {
            f(join(prefix, &format!("gcn{i}")), w);
        }
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

pub fn encode_text(seq: &TokenSequence, encoder: &TextEncoder) -> Result<Array2<f64>> {
    let tape = Tape::new();
    Ok(encoder.forward(&tape, seq)?.value())
}

pub fn encode_molecule(graph: &MoleculeGraph, encoder: &MoleculeEncoder) -> Result<Array2<f64>> {
    let tape = Tape::new();
    Ok(encoder.forward(&tape, graph)?.value())
}

/// Column mean of a `P×d` representation, as a length-`d` vector.
pub fn mean_pool(h: &Array2<f64>) -> Result<ndarray::Array1<f64>> {
    h.mean_axis(Axis(0))
        .ok_or_else(|| Error::Shape("mean pool over zero rows".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            max_len: 6,
            text_embed_dim: 4,
            text_ff_dim: 5,
            atom_dim: 3,
            gcn_layers: vec![4, 4],
            model_dim: 4,
            out_dim: 4,
            n_memory: 2,
            critic_hidden: vec![3],
            ..ModelConfig::default()
        }
    }

    fn relu(x: f64) -> f64 {
        x.max(0.0)
    }

    #[test]
    fn single_token_gives_one_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = TextEncoder::new(&small_config(), &mut rng);
        let h = encode_text(&TokenSequence::new(vec![3]).unwrap(), &enc).unwrap();
        assert_eq!(h.dim(), (1, 4));
    }

    #[test]
    fn zero_mixer_and_identity_output_return_raw_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut enc = TextEncoder::new(&small_config(), &mut rng);
        enc.output = Linear::identity(4);
        if let Some(m) = &mut enc.mixer {
            m.visit_mut("", &mut |_, p| p.value.fill(0.0));
        }
        let seq = TokenSequence::new(vec![2, 7, 2]).unwrap();
        let h = encode_text(&seq, &enc).unwrap();
        for (row, &t) in h.rows().into_iter().zip(seq.tokens()) {
            assert_eq!(row, enc.token_embedding.value.row(t as usize));
        }
    }

    #[test]
    fn out_of_range_token_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = TextEncoder::new(&small_config(), &mut rng);
        assert!(encode_text(&TokenSequence::new(vec![10]).unwrap(), &enc).is_err());
    }

    /// Straight-line reimplementation of the text forward pass.
    fn text_oracle(enc: &TextEncoder, tokens: &[usize]) -> Array2<f64> {
        let m = enc.mixer.as_ref().unwrap();
        let e = enc.token_embedding.value.ncols();
        let l = tokens.len();
        let x: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                (0..e)
                    .map(|c| enc.token_embedding.value[[t, c]] + m.position.value[[i, c]])
                    .collect()
            })
            .collect();
        let proj = |w: &Array2<f64>, v: &[f64]| -> Vec<f64> {
            (0..w.ncols()).map(|c| (0..v.len()).map(|r| v[r] * w[[r, c]]).sum()).collect()
        };
        let q: Vec<_> = x.iter().map(|r| proj(&m.w_query.value, r)).collect();
        let k: Vec<_> = x.iter().map(|r| proj(&m.w_key.value, r)).collect();
        let v: Vec<_> = x.iter().map(|r| proj(&m.w_value.value, r)).collect();
        let mut out = Array2::zeros((l, enc.output.output_dim()));
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| (0..e).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (e as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            let ctx: Vec<f64> = (0..e)
                .map(|c| (0..l).map(|j| w[j] / z * v[j][c]).sum())
                .collect();
            let att = proj(&m.w_out.value, &ctx);
            let x1: Vec<f64> = (0..e).map(|c| x[i][c] + att[c]).collect();
            let mut hidden = proj(&m.ff_in.weight.value, &x1);
            for (c, h) in hidden.iter_mut().enumerate() {
                *h = relu(*h + m.ff_in.bias.value[[0, c]]);
            }
            let ff = proj(&m.ff_out.weight.value, &hidden);
            let x2: Vec<f64> = (0..e).map(|c| x1[c] + ff[c] + m.ff_out.bias.value[[0, c]]).collect();
            let y = proj(&enc.output.weight.value, &x2);
            for c in 0..y.len() {
                out[[i, c]] = y[c] + enc.output.bias.value[[0, c]];
            }
        }
        out
    }

    #[test]
    fn text_forward_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut enc = TextEncoder::new(&small_config(), &mut rng);
        // nonzero biases so they are exercised
        enc.visit_mut("", &mut |name, p| {
            if name.ends_with("bias") {
                p.value.mapv_inplace(|_| 0.1);
            }
        });
        let tokens = [4usize, 1, 9];
        let seq = TokenSequence::new(tokens.iter().map(|&t| t as u32).collect()).unwrap();
        let h = encode_text(&seq, &enc).unwrap();
        let oracle = text_oracle(&enc, &tokens);
        for (a, b) in h.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn mixer_makes_output_order_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = TextEncoder::new(&small_config(), &mut rng);
        let a = encode_text(&TokenSequence::new(vec![1, 2, 3]).unwrap(), &enc).unwrap();
        let b = encode_text(&TokenSequence::new(vec![3, 2, 1]).unwrap(), &enc).unwrap();
        assert!((&a.row(0) - &b.row(2)).iter().any(|v| v.abs() > 1e-9));
    }

    #[test]
    fn without_mixer_permuting_tokens_permutes_rows() {
        let cfg = ModelConfig {
            text_mixer: false,
            ..small_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = TextEncoder::new(&cfg, &mut rng);
        let a = encode_text(&TokenSequence::new(vec![1, 2, 3]).unwrap(), &enc).unwrap();
        let b = encode_text(&TokenSequence::new(vec![3, 1, 2]).unwrap(), &enc).unwrap();
        assert_eq!(a.row(0), b.row(1));
        assert_eq!(a.row(1), b.row(2));
        assert_eq!(a.row(2), b.row(0));
    }

    fn mol_encoder(seed: u64) -> MoleculeEncoder {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MoleculeEncoder::new(&small_config(), &mut rng)
    }

    fn dense(m: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((m.nrows(), x.ncols()));
        for i in 0..m.nrows() {
            for j in 0..x.ncols() {
                for k in 0..m.ncols() {
                    out[[i, j]] += m[[i, k]] * x[[k, j]];
                }
            }
        }
        out
    }

    #[test]
    fn single_atom_uses_unit_adjacency() {
        let enc = mol_encoder(6);
        let g = MoleculeGraph::new(array![[0.3, -0.2, 0.9]], vec![]).unwrap();
        assert_eq!(normalized_adjacency(&g, AdjacencyNorm::Symmetric), array![[1.0]]);
        let h = encode_molecule(&g, &enc).unwrap();
        let mut x = g.atom_features().clone();
        for w in &enc.layers {
            x = dense(&x, &w.value).mapv(relu);
        }
        let expected = dense(&x, &enc.output.weight.value) + &enc.output.bias.value;
        for (a, b) in h.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_connected_atoms_get_identical_rows() {
        let enc = mol_encoder(7);
        let g = MoleculeGraph::new(array![[1.0, 2.0, -1.0], [1.0, 2.0, -1.0]], vec![(0, 1)]).unwrap();
        let h = encode_molecule(&g, &enc).unwrap();
        assert_eq!(h.row(0), h.row(1));
    }

    #[test]
    fn path_graph_matches_dense_oracle() {
        let enc = mol_encoder(8);
        let feats = array![[0.1, 0.2, 0.3], [-0.4, 0.5, 0.6], [0.7, -0.8, 0.9], [1.0, 1.1, -1.2]];
        let g = MoleculeGraph::new(feats.clone(), vec![(0, 1), (1, 2), (2, 3)]).unwrap();
        // Â by hand: degrees with self-loops are 2, 3, 3, 2
        let deg = [2.0f64, 3.0, 3.0, 2.0];
        let mut a_hat = Array2::<f64>::zeros((4, 4));
        for i in 0..4 {
            for j in 0..4 {
                let linked = i == j || (i as i32 - j as i32).abs() == 1;
                if linked {
                    a_hat[[i, j]] = 1.0 / (deg[i] * deg[j]).sqrt();
                }
            }
        }
        let mut x = feats;
        for w in &enc.layers {
            x = dense(&dense(&a_hat, &x), &w.value).mapv(relu);
        }
        let expected = dense(&x, &enc.output.weight.value) + &enc.output.bias.value;
        let h = encode_molecule(&g, &enc).unwrap();
        for (a, b) in h.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn row_normalization_is_stochastic() {
        let g = MoleculeGraph::new(Array2::ones((3, 2)), vec![(0, 1), (1, 2)]).unwrap();
        let a = normalized_adjacency(&g, AdjacencyNorm::Row);
        for row in a.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_pool_cases() {
        let v = array![[1.0, -2.0, 3.0]];
        assert_eq!(mean_pool(&v).unwrap(), Array1::from(vec![1.0, -2.0, 3.0]));
        let sym = array![[1.0, -2.0], [-1.0, 2.0]];
        assert_eq!(mean_pool(&sym).unwrap(), Array1::from(vec![0.0, 0.0]));
        let h = array![[0.5, 1.0], [1.5, -3.0], [4.0, 0.25]];
        let g = mean_pool(&h).unwrap();
        assert!((g[0] - (0.5 + 1.5 + 4.0) / 3.0).abs() < 1e-15);
        assert!((g[1] - (1.0 - 3.0 + 0.25) / 3.0).abs() < 1e-15);
    }
}
