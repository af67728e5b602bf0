//! Min-max training: critic updates on detached global representations,
//! then one model update on the combined objective.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::distr::Uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::checkpoint::{self, Archive};
use crate::config::{ModelConfig, TrainConfig};
use crate::data::{hard_triplets, make_batches, sample_triplets_with, InstancePair, NegativeStrategy};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, RetrievalReport, Scoring};
use crate::model::Model;
use crate::nn::Module;
use crate::objectives::{
    batch_triplet_loss, critic_loss, generator_loss, total_loss, LossBundle, SimilarityDistributions,
};
use crate::optim::Adam;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const STATE_FILE: &str = "state.json";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const BEST_DIR: &str = "best";
pub const LAST_DIR: &str = "last";

/// Parameters in this namespace use `lr_text`; everything else `lr_other`.
pub const TEXT_PREFIX: &str = "text/";
/// Only these parameters receive the adversarial term's gradient.
pub const MOLECULE_PREFIX: &str = "molecule/";

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Adam,
    pub critic_optimizer: Adam,
    /// Model updates taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    /// Best validation score seen, if any.
    pub best_score: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    step: u64,
    epoch: usize,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
    best_score: Option<f64>,
    train: TrainConfig,
}

impl TrainState {
    pub fn new(model_config: ModelConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(model_config, config.seed)?;
        let adam = || Adam::new(config.adam_beta1, config.adam_beta2, config.adam_eps);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        // keep the training stream apart from the initialization stream
        rng.set_stream(1);
        Ok(Self {
            model,
            optimizer: adam(),
            critic_optimizer: adam(),
            step: 0,
            epoch: 0,
            rng,
            best_score: None,
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>, config: &TrainConfig) -> Result<()> {
        let dir = dir.as_ref();
        self.model.save(dir)?;
        let mut opt = Archive::new();
        for (k, v) in self.optimizer.to_archive() {
            opt.insert(format!("model/{k}"), v);
        }
        for (k, v) in self.critic_optimizer.to_archive() {
            opt.insert(format!("critic/{k}"), v);
        }
        checkpoint::write(dir.join(OPTIMIZER_FILE), &opt)?;
        let state = StateFile {
            step: self.step,
            epoch: self.epoch,
            rng_seed: self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            best_score: self.best_score,
            train: config.clone(),
        };
        let path = dir.join(STATE_FILE);
        fs::write(&path, serde_json::to_string_pretty(&state)?).map_err(|e| Error::io(&path, e))
    }

    /// Restores a checkpoint written by [`TrainState::save`], along with the
    /// training configuration it was written under.
    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, TrainConfig)> {
        let dir = dir.as_ref();
        let model = Model::load(dir)?;
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let s: StateFile = serde_json::from_str(&text)?;
        let bad = |what: &str| Error::Checkpoint(format!("{}: invalid {what}", path.display()));
        if s.rng_seed.len() != 64 {
            return Err(bad("rng_seed"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&s.rng_seed[2 * i..2 * i + 2], 16).map_err(|_| bad("rng_seed"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(s.rng_stream);
        rng.set_word_pos(s.rng_word_pos.parse().map_err(|_| bad("rng_word_pos"))?);

        let all = checkpoint::read(dir.join(OPTIMIZER_FILE))?;
        let split = |prefix: &str| -> Archive {
            all.iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
                .collect()
        };
        let cfg = &s.train;
        let mut optimizer = Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        optimizer.load_archive(&split("model/"))?;
        let mut critic_optimizer = Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        critic_optimizer.load_archive(&split("critic/"))?;
        Ok((
            Self {
                model,
                optimizer,
                critic_optimizer,
                step: s.step,
                epoch: s.epoch,
                rng,
                best_score: s.best_score,
            },
            s.train,
        ))
    }
}

fn finite(v: Var<'_>, component: &str, step: u64) -> Result<f64> {
    let x = v.scalar();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite {
            component: component.into(),
            step,
        })
    }
}

fn sum_terms<'t>(terms: &[Var<'t>]) -> Option<Var<'t>> {
    terms.iter().copied().reduce(|a, b| a.add(b))
}

fn critic_update(state: &mut TrainState, g_t: &Array2<f64>, g_m: &Array2<f64>, config: &TrainConfig) -> Result<()> {
    let unit = Uniform::new(0.0, 1.0).expect("unit interval");
    for _ in 0..config.critic_steps {
        let eps: Vec<f64> = (0..g_t.nrows()).map(|_| state.rng.sample(unit)).collect();
        let tape = Tape::new();
        let critic = &state.model.critic;
        let loss = critic_loss(
            &tape,
            critic,
            tape.constant(g_t.clone()),
            tape.constant(g_m.clone()),
            &eps,
            config.lambda_gp,
            config.adversarial_mode,
        );
        finite(loss, "critic", state.step)?;
        let grads = tape.backward(loss);
        let opt = &mut state.critic_optimizer;
        state.model.critic.visit_mut("critic", &mut |name, p| {
            if let Some(g) = grads.param(p) {
                opt.step(&name, p, g, config.lr_other);
            }
        });
    }
    Ok(())
}

/// One critic phase followed by one model update on `batch`.
///
/// A loss term whose toggle is off or whose weight is zero is left out of the
/// graph and reported as exactly 0.
pub fn train_step(state: &mut TrainState, batch: &[&InstancePair], config: &TrainConfig) -> Result<LossBundle> {
    if batch.len() < 2 {
        return Err(Error::Validation("a training batch needs at least 2 pairs".into()));
    }
    state.step += 1;
    let step = state.step;
    let toggles = config.losses;
    let tape = Tape::new();
    let (xt, xm) = state.model.embed_batch(&tape, batch)?;

    if toggles.adversarial {
        critic_update(state, &xt.value(), &xm.value(), config)?;
    }

    let mut main = Vec::new();
    let mut l_cl = 0.0;
    if toggles.contrastive {
        let triplets = match config.negatives {
            NegativeStrategy::Uniform => sample_triplets_with(batch.len(), &mut state.rng)?,
            NegativeStrategy::Hard => hard_triplets(&xt.value(), &xm.value())?,
        };
        let v = batch_triplet_loss(xt, xm, &triplets, config.alpha)?;
        l_cl = finite(v, "l_cl", step)?;
        main.push(v);
    }

    let mut l_adv = 0.0;
    let mut adv = None;
    if toggles.adversarial && config.lambda_1 > 0.0 {
        let v = generator_loss(&tape, &state.model.critic, xm, config.adversarial_mode);
        l_adv = finite(v, "l_adv", step)?;
        adv = Some(v.scale(config.lambda_1));
    }

    let use_u2u = toggles.u2u() && config.w_u2u > 0.0;
    let use_u2c = toggles.u2c() && config.w_u2c > 0.0;
    let (mut l_u2u, mut l_u2c) = (0.0, 0.0);
    if use_u2u || use_u2c {
        let d = SimilarityDistributions::new(xt, xm);
        if use_u2u {
            let mut parts = Vec::new();
            if toggles.t2m {
                parts.push(d.t2m());
            }
            if toggles.m2t {
                parts.push(d.m2t());
            }
            let v = sum_terms(&parts).expect("at least one u2u direction");
            l_u2u = finite(v, "l_u2u", step)?;
            main.push(v.scale(config.w_u2u));
        }
        if use_u2c {
            let mut parts = Vec::new();
            if toggles.to_m {
                parts.push(d.to_m());
            }
            if toggles.to_t {
                parts.push(d.to_t());
            }
            let v = sum_terms(&parts).expect("at least one u2c direction");
            l_u2c = finite(v, "l_u2c", step)?;
            main.push(v.scale(config.w_u2c));
        }
    }

    let bundle = total_loss(l_cl, l_adv, l_u2u, l_u2c, config.lambda_1, config.w_u2u, config.w_u2c);
    if !bundle.total.is_finite() {
        return Err(Error::NonFinite {
            component: "total".into(),
            step,
        });
    }

    let main_grads: Option<Gradients> = sum_terms(&main).map(|v| tape.backward(v));
    let adv_grads: Option<Gradients> = adv.map(|v| tape.backward(v));
    let optimizer = &mut state.optimizer;
    state.model.visit_trainable_mut(&mut |name, p| {
        let mut g = main_grads.as_ref().and_then(|gr| gr.param(p)).cloned();
        if name.starts_with(MOLECULE_PREFIX) {
            if let Some(a) = adv_grads.as_ref().and_then(|gr| gr.param(p)) {
                g = Some(match g {
                    Some(m) => m + a,
                    None => a.clone(),
                });
            }
        }
        if let Some(g) = g {
            let lr = if name.starts_with(TEXT_PREFIX) {
                config.lr_text
            } else {
                config.lr_other
            };
            optimizer.step(&name, p, &g, lr);
        }
    });
    Ok(bundle)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub l_cl: f64,
    pub l_adv: f64,
    pub l_u2u: f64,
    pub l_u2c: f64,
    pub total: f64,
}

impl LogRecord {
    pub fn new(step: u64, b: &LossBundle) -> Self {
        Self {
            step,
            l_cl: b.l_cl,
            l_adv: b.l_adv,
            l_u2u: b.l_u2u,
            l_u2c: b.l_u2c,
            total: b.total,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-on-validation state when a validation split was given, otherwise
    /// the final state.
    pub state: TrainState,
    pub log_path: Option<PathBuf>,
    /// Mean total loss per epoch run in this call.
    pub epoch_losses: Vec<f64>,
    /// Every loss bundle produced in this call, in order.
    pub history: Vec<LogRecord>,
    pub best_epoch: Option<usize>,
    pub validation: Vec<RetrievalReport>,
}

/// Runs epochs `state.epoch..config.epochs`. With `out`, writes the JSONL
/// loss log, `last/` (every `checkpoint_every` epochs and at the end) and
/// `best/` (on validation improvement).
pub fn train(
    mut state: TrainState,
    train_set: &[InstancePair],
    valid: Option<&[InstancePair]>,
    config: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.len() < 2 {
        return Err(Error::Validation("training set needs at least 2 pairs".into()));
    }
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let file = if state.step == 0 {
                File::create(&path)
            } else {
                OpenOptions::new().create(true).append(true).open(&path)
            }
            .map_err(|e| Error::io(&path, e))?;
            Some((path, BufWriter::new(file)))
        }
        None => None,
    };

    let batch_size = config.batch_size.min(train_set.len());
    let mut best: Option<TrainState> = None;
    let mut best_epoch = None;
    let mut outcome_losses = Vec::new();
    let mut history = Vec::new();
    let mut validation = Vec::new();

    while state.epoch < config.epochs {
        let shuffle_seed: u64 = state.rng.random();
        let batches = make_batches(train_set.len(), batch_size, shuffle_seed)?;
        let mut sum = 0.0;
        for idx in &batches {
            let batch: Vec<&InstancePair> = idx.iter().map(|&i| &train_set[i]).collect();
            let bundle = train_step(&mut state, &batch, config)?;
            sum += bundle.total;
            let rec = LogRecord::new(state.step, &bundle);
            history.push(rec);
            if let Some((path, w)) = log.as_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                writeln!(w).map_err(|e| Error::io(path.clone(), e))?;
            }
        }
        outcome_losses.push(sum / batches.len().max(1) as f64);
        state.epoch += 1;
        if let Some((path, w)) = log.as_mut() {
            w.flush().map_err(|e| Error::io(path.clone(), e))?;
        }

        if let Some(v) = valid.filter(|v| !v.is_empty()) {
            let all: Vec<usize> = (0..v.len()).collect();
            let report = evaluate(&state.model, v, &all, Scoring::Cosine)?;
            validation.push(report);
            let score = report.mean_mrr();
            if state.best_score.is_none_or(|b| score > b) {
                state.best_score = Some(score);
                best_epoch = Some(state.epoch);
                if let Some(dir) = out {
                    state.save(dir.join(BEST_DIR), config)?;
                }
                best = Some(state.clone());
            }
        }
        let periodic = config.checkpoint_every > 0 && state.epoch % config.checkpoint_every == 0;
        if let (Some(dir), true) = (out, periodic && state.epoch < config.epochs) {
            state.save(dir.join(LAST_DIR), config)?;
        }
    }
    if let Some(dir) = out {
        state.save(dir.join(LAST_DIR), config)?;
    }
    Ok(TrainOutcome {
        state: best.unwrap_or(state),
        log_path: log.map(|(p, _)| p),
        epoch_losses: outcome_losses,
        history,
        best_epoch,
        validation,
    })
}
