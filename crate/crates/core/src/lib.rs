//! Text–molecule joint embeddings: hashed-token text encoder, GCN molecule
//! encoder, a shared memory-bank projector, and training with contrastive,
//! adversarial and similarity-distribution losses.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod evaluator;
pub mod experiments;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod projector;
pub mod trainer;

pub use config::{AdversarialMode, LossToggles, ModelConfig, RunConfig, TrainConfig};
pub use data::{InstancePair, MoleculeGraph, TokenSequence};
pub use error::{Error, Result};
pub use model::Model;
pub use evaluator::{RetrievalReport, Scoring};
pub use trainer::{train, train_step, TrainState};
