//! Memory-bank feature projector.
//!
//! `n` learnable memory vectors act as cross-attention queries over an
//! encoder's output `H`, producing `n` fixed-size shared features
//! `O = Attn(Q, H W_K, H W_V)`. The final embedding is `FC(meanPool(O))`.
//! A single bank serves both modalities.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Param, Tape, Var};
use crate::config::{ModelConfig, ProjectorKind};
use crate::error::{Error, Result};
use crate::nn::{fan_in_init, gaussian, join, Linear, Module};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Molecule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityEmbedding {
    pub vector: Array1<f64>,
    pub modality: Modality,
}

/// `softmax(Q Kᵀ · s) V`, row-wise over keys; `s = 1/√d` when `scaled`.
pub fn attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, scaled: bool) -> Var<'t> {
    let scores = q.matmul(k.t());
    let scores = if scaled {
        scores.scale(1.0 / (q.shape().1 as f64).sqrt())
    } else {
        scores
    };
    scores.softmax_rows().matmul(v)
}

#[derive(Debug, Clone)]
pub struct MemoryBank {
    /// `n×d` memory vectors.
    pub queries: Param,
    pub w_key: Param,
    pub w_value: Param,
    pub fc: Linear,
    pub scaled: bool,
}

impl MemoryBank {
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = config.model_dim;
        Self {
            queries: Param::new(gaussian(config.n_memory, d, config.memory_init_std, rng)),
            w_key: Param::new(fan_in_init(d, d, rng)),
            w_value: Param::new(fan_in_init(d, d, rng)),
            fc: Linear::new(d, config.out_dim, rng),
            scaled: config.attention_scale,
        }
    }

    pub fn n_memory(&self) -> usize {
        self.queries.value.nrows()
    }

    pub fn dim(&self) -> usize {
        self.queries.value.ncols()
    }

    /// `n×d` shared features for a `P×d` input.
    pub fn project<'t>(&self, tape: &'t Tape, h: Var<'t>) -> Var<'t> {
        let q = tape.param(&self.queries);
        let k = h.matmul(tape.param(&self.w_key));
        let v = h.matmul(tape.param(&self.w_value));
        attention(q, k, v, self.scaled)
    }

    /// `1×d_out` embedding from shared features.
    pub fn finalize<'t>(&self, tape: &'t Tape, o: Var<'t>) -> Var<'t> {
        self.fc.forward(tape, o.mean_rows())
    }
}

impl Module for MemoryBank {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(join(prefix, "queries"), &self.queries);
        f(join(prefix, "w_key"), &self.w_key);
        f(join(prefix, "w_value"), &self.w_value);
        self.fc.visit(&join(prefix, "fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "queries"), &mut self.queries);
        f(join(prefix, "w_key"), &mut self.w_key);
        f(join(prefix, "w_value"), &mut self.w_value);
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }
}

/// The shared head applied to both encoders' outputs.
#[derive(Debug, Clone)]
pub enum Projector {
    MemoryBank(MemoryBank),
    /// Mean pooling followed by a shared linear layer, no memory vectors.
    Linear(Linear),
}

impl Projector {
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        match config.projector {
            ProjectorKind::MemoryBank => Projector::MemoryBank(MemoryBank::new(config, rng)),
            ProjectorKind::Linear => {
                Projector::Linear(Linear::new(config.model_dim, config.out_dim, rng))
            }
        }
    }

    pub fn kind(&self) -> ProjectorKind {
        match self {
            Projector::MemoryBank(_) => ProjectorKind::MemoryBank,
            Projector::Linear(_) => ProjectorKind::Linear,
        }
    }

    /// `1×d_out` embedding for a `P×d` encoder output.
    pub fn embed<'t>(&self, tape: &'t Tape, h: Var<'t>) -> Var<'t> {
        match self {
            Projector::MemoryBank(bank) => bank.finalize(tape, bank.project(tape, h)),
            Projector::Linear(fc) => fc.forward(tape, h.mean_rows()),
        }
    }
}

impl Module for Projector {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        match self {
            Projector::MemoryBank(b) => b.visit(prefix, f),
            Projector::Linear(l) => l.visit(&join(prefix, "fc"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        match self {
            Projector::MemoryBank(b) => b.visit_mut(prefix, f),
            Projector::Linear(l) => l.visit_mut(&join(prefix, "fc"), f),
        }
    }
}

pub fn project(h: &Array2<f64>, bank: &MemoryBank) -> Result<Array2<f64>> {
    if h.ncols() != bank.dim() || h.nrows() == 0 {
        return Err(Error::Shape(format!(
            "projector expects P×{} with P ≥ 1, got {:?}",
            bank.dim(),
            h.dim()
        )));
    }
    let tape = Tape::new();
    let hv = tape.constant(h.clone());
    Ok(bank.project(&tape, hv).value())
}

pub fn finalize(o: &Array2<f64>, bank: &MemoryBank, modality: Modality) -> Result<ModalityEmbedding> {
    if o.dim() != (bank.n_memory(), bank.dim()) {
        return Err(Error::Shape(format!(
            "finalize expects {}×{}, got {:?}",
            bank.n_memory(),
            bank.dim(),
            o.dim()
        )));
    }
    let tape = Tape::new();
    let ov = tape.constant(o.clone());
    let x = bank.finalize(&tape, ov).value();
    Ok(ModalityEmbedding {
        vector: x.row(0).to_owned(),
        modality,
    })
}
