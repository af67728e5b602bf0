//! Model and training configuration. Every field has a default and is
//! overridable from a JSON file.

use serde::{Deserialize, Serialize};

use crate::data::NegativeStrategy;
use crate::error::{Error, Result};
use crate::nn::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyNorm {
    /// `D^-1/2 (A + I) D^-1/2`
    #[default]
    Symmetric,
    /// `D^-1 (A + I)`
    Row,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorKind {
    #[default]
    MemoryBank,
    /// Mean pooling followed by the shared linear layer only.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    /// Width of the token embeddings and the contextual mixer.
    pub text_embed_dim: usize,
    /// Self-attention + feed-forward block over the tokens; off means the
    /// text encoder is a per-token embedding plus output map.
    pub text_mixer: bool,
    pub text_ff_dim: usize,
    pub atom_dim: usize,
    /// Output widths of the GCN layers; the last one should equal `model_dim`.
    pub gcn_layers: Vec<usize>,
    pub gcn_activation: Activation,
    pub adjacency_norm: AdjacencyNorm,
    pub model_dim: usize,
    pub n_memory: usize,
    pub out_dim: usize,
    pub attention_scale: bool,
    pub projector: ProjectorKind,
    pub memory_init_std: f64,
    /// Hidden widths of the critic; empty gives a linear critic.
    pub critic_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::data::DEFAULT_VOCAB_SIZE,
            max_len: crate::data::DEFAULT_MAX_LEN,
            text_embed_dim: 768,
            text_mixer: true,
            text_ff_dim: 1024,
            atom_dim: crate::data::DEFAULT_ATOM_DIM,
            gcn_layers: vec![300, 300],
            gcn_activation: Activation::Relu,
            adjacency_norm: AdjacencyNorm::Symmetric,
            model_dim: 300,
            n_memory: 28,
            out_dim: 300,
            attention_scale: true,
            projector: ProjectorKind::MemoryBank,
            memory_init_std: 0.02,
            critic_hidden: vec![128],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.vocab_size", self.vocab_size),
            ("model.max_len", self.max_len),
            ("model.text_embed_dim", self.text_embed_dim),
            ("model.text_ff_dim", self.text_ff_dim),
            ("model.atom_dim", self.atom_dim),
            ("model.model_dim", self.model_dim),
            ("model.n_memory", self.n_memory),
            ("model.out_dim", self.out_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.gcn_layers.is_empty() || self.gcn_layers.contains(&0) {
            return Err(Error::config("model.gcn_layers", "needs at least one positive width"));
        }
        if self.critic_hidden.contains(&0) {
            return Err(Error::config("model.critic_hidden", "widths must be positive"));
        }
        if !(self.memory_init_std >= 0.0 && self.memory_init_std.is_finite()) {
            return Err(Error::config("model.memory_init_std", "must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialMode {
    /// Critic with gradient penalty; unbounded scores.
    #[default]
    WganGp,
    /// `E[log D(g_t)] + E[log(1 - D(g_m))]` with a sigmoid discriminator.
    LogLoss,
}

/// Which loss terms are active. The four second-order flags are the
/// directional halves of the uni-to-uni and uni-to-cross losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossToggles {
    pub contrastive: bool,
    pub adversarial: bool,
    /// `KL(P_tt ‖ P_mm)`
    pub t2m: bool,
    /// `KL(P_mm ‖ P_tt)`
    pub m2t: bool,
    /// `KL(P_mm ‖ P_tm)`
    pub to_m: bool,
    /// `KL(P_tt ‖ P_mt)`
    pub to_t: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self::all()
    }
}

impl LossToggles {
    pub fn all() -> Self {
        Self {
            contrastive: true,
            adversarial: true,
            t2m: true,
            m2t: true,
            to_m: true,
            to_t: true,
        }
    }

    pub fn first_order_only() -> Self {
        Self {
            t2m: false,
            m2t: false,
            to_m: false,
            to_t: false,
            ..Self::all()
        }
    }

    pub fn none() -> Self {
        Self {
            contrastive: false,
            adversarial: false,
            ..Self::first_order_only()
        }
    }

    pub fn u2u(&self) -> bool {
        self.t2m || self.m2t
    }

    pub fn u2c(&self) -> bool {
        self.to_m || self.to_t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_text: f64,
    pub lr_other: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Triplet margin.
    pub alpha: f64,
    /// Weight of the adversarial term in the total loss.
    pub lambda_1: f64,
    pub lambda_gp: f64,
    pub critic_steps: usize,
    pub adversarial_mode: AdversarialMode,
    pub negatives: NegativeStrategy,
    pub losses: LossToggles,
    pub w_u2u: f64,
    pub w_u2c: f64,
    pub seed: u64,
    /// Write `last/` every this many epochs; 0 writes only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 60,
            lr_text: 3e-5,
            lr_other: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            alpha: 0.3,
            lambda_1: 2e-4,
            lambda_gp: 10.0,
            critic_steps: 1,
            adversarial_mode: AdversarialMode::WganGp,
            negatives: NegativeStrategy::Uniform,
            losses: LossToggles::all(),
            w_u2u: 1.0,
            w_u2c: 1.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("train.batch_size", "must be at least 2"));
        }
        for (field, v) in [("train.lr_text", self.lr_text), ("train.lr_other", self.lr_other)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return Err(Error::config("train.adam_beta1", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("train.adam_beta2", "must be in [0, 1)"));
        }
        let non_negative = [
            ("train.adam_eps", self.adam_eps),
            ("train.alpha", self.alpha),
            ("train.lambda_1", self.lambda_1),
            ("train.lambda_gp", self.lambda_gp),
            ("train.w_u2u", self.w_u2u),
            ("train.w_u2c", self.w_u2c),
        ];
        for (field, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Dataset locations, relative paths resolved against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<String>,
    pub valid: Option<String>,
    pub test: Option<String>,
    pub atom_table: Option<String>,
    /// Vocabulary file (one word per line) for raw `text` fields.
    pub vocab: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Small model sized for the generated corpus of
    /// [`crate::data::generate_synthetic`] at `latent_dim`, trainable on a CPU
    /// in a couple of minutes. The default learning rates assume pretrained
    /// encoders; from scratch this preset uses 1e-3 for both groups.
    pub fn synthetic(latent_dim: usize) -> Self {
        let d = 128;
        Self {
            model: ModelConfig {
                vocab_size: crate::data::synthetic::vocab_size(latent_dim),
                max_len: latent_dim,
                text_embed_dim: d,
                text_mixer: false,
                text_ff_dim: d,
                atom_dim: crate::data::synthetic::atom_dim(latent_dim),
                gcn_layers: vec![d, d],
                model_dim: d,
                n_memory: 8,
                out_dim: d,
                critic_hidden: vec![d],
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 80,
                lr_text: 1e-3,
                lr_other: 1e-3,
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            // serde reports unknown/mistyped keys by name; keep it as the field.
            Error::config(json_field_hint(&e.to_string()), e.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn json_field_hint(message: &str) -> String {
    message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<root>".into())
}
