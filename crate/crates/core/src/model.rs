//! The full text–molecule model: both encoders, the shared projector and
//! the adversarial critic.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Param, Tape, Var};
use crate::checkpoint::{self, Archive};
use crate::config::ModelConfig;
use crate::data::{InstancePair, MoleculeGraph, TokenSequence};
use crate::encoders::{MoleculeEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::nn::{join, Module};
use crate::objectives::Critic;
use crate::projector::Projector;

pub const CONFIG_FILE: &str = "model.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub text: TextEncoder,
    pub molecule: MoleculeEncoder,
    pub projector: Projector,
    pub critic: Critic,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = TextEncoder::new(&config, &mut rng);
        let molecule = MoleculeEncoder::new(&config, &mut rng);
        let projector = Projector::new(&config, &mut rng);
        let critic = Critic::new(config.out_dim, &config.critic_hidden, &mut rng);
        Ok(Self {
            config,
            text,
            molecule,
            projector,
            critic,
        })
    }

    pub fn embed_text<'t>(&self, tape: &'t Tape, seq: &TokenSequence) -> Result<Var<'t>> {
        let h = self.text.forward(tape, seq)?;
        Ok(self.projector.embed(tape, h))
    }

    pub fn embed_molecule<'t>(&self, tape: &'t Tape, graph: &MoleculeGraph) -> Result<Var<'t>> {
        let h = self.molecule.forward(tape, graph)?;
        Ok(self.projector.embed(tape, h))
    }

    /// `B×d_out` text and molecule embeddings, rows in input order.
    pub fn embed_batch<'t>(
        &self,
        tape: &'t Tape,
        pairs: &[&InstancePair],
    ) -> Result<(Var<'t>, Var<'t>)> {
        if pairs.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let mut xt = Vec::with_capacity(pairs.len());
        let mut xm = Vec::with_capacity(pairs.len());
        for p in pairs {
            xt.push(self.embed_text(tape, &p.text).map_err(|e| e.for_instance(&p.id))?);
            xm.push(self.embed_molecule(tape, &p.molecule).map_err(|e| e.for_instance(&p.id))?);
        }
        Ok((Var::concat_rows(&xt), Var::concat_rows(&xm)))
    }

    /// Inference-only embeddings of one pair.
    pub fn embed_pair(&self, pair: &InstancePair) -> Result<(Array1<f64>, Array1<f64>)> {
        let tape = Tape::new();
        let (t, m) = self.embed_batch(&tape, &[pair])?;
        Ok((t.value().row(0).to_owned(), m.value().row(0).to_owned()))
    }

    /// Encoders and projector, without the critic.
    pub fn visit_trainable<'a>(&'a self, f: &mut dyn FnMut(String, &'a Param)) {
        self.text.visit("text", f);
        self.molecule.visit("molecule", f);
        self.projector.visit("projector", f);
    }

    pub fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(String, &mut Param)) {
        self.text.visit_mut("text", f);
        self.molecule.visit_mut("molecule", f);
        self.projector.visit_mut("projector", f);
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.value.len());
        n
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        self.visit("", &mut |name, p| {
            a.insert(name, p.value.clone());
        });
        a
    }

    /// Overwrites every parameter from `archive`; names and shapes must match exactly.
    pub fn load_archive(&mut self, archive: &Archive) -> Result<()> {
        let mut seen = 0;
        let mut failure = None;
        self.visit_mut("", &mut |name, p| {
            if failure.is_some() {
                return;
            }
            match archive.get(&name) {
                Some(v) if v.dim() == p.value.dim() => {
                    p.value.assign(v);
                    seen += 1;
                }
                Some(v) => {
                    failure = Some(format!(
                        "`{name}` has shape {:?}, model expects {:?}",
                        v.dim(),
                        p.value.dim()
                    ))
                }
                None => failure = Some(format!("missing parameter `{name}`")),
            }
        });
        if let Some(msg) = failure {
            return Err(Error::Checkpoint(msg));
        }
        if seen != archive.len() {
            return Err(Error::Checkpoint("archive has entries the model does not use".into()));
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = dir.join(CONFIG_FILE);
        fs::write(&cfg, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(&cfg, e))?;
        checkpoint::write(dir.join(PARAMS_FILE), &self.to_archive())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cfg_path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: ModelConfig = serde_json::from_str(&text)?;
        let mut model = Model::new(config, 0)?;
        model.load_archive(&checkpoint::read(dir.join(PARAMS_FILE))?)?;
        Ok(model)
    }
}

impl Module for Model {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.text.visit(&join(prefix, "text"), f);
        self.molecule.visit(&join(prefix, "molecule"), f);
        self.projector.visit(&join(prefix, "projector"), f);
        self.critic.visit(&join(prefix, "critic"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.text.visit_mut(&join(prefix, "text"), f);
        self.molecule.visit_mut(&join(prefix, "molecule"), f);
        self.projector.visit_mut(&join(prefix, "projector"), f);
        self.critic.visit_mut(&join(prefix, "critic"), f);
    }
}

/// Embeds every pair; rows of the two matrices follow `pairs`.
pub fn embed_corpus(model: &Model, pairs: &[InstancePair]) -> Result<(Array2<f64>, Array2<f64>)> {
    let d = model.config.out_dim;
    let mut xt = Array2::zeros((pairs.len(), d));
    let mut xm = Array2::zeros((pairs.len(), d));
    for (i, p) in pairs.iter().enumerate() {
        let (t, m) = model.embed_pair(p)?;
        xt.row_mut(i).assign(&t);
        xm.row_mut(i).assign(&m);
    }
    Ok((xt, xm))
}
