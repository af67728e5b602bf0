use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use textmol::config::RunConfig;
use textmol::data::{generate_synthetic, load_atom_table, save_dataset, AtomFeatureTable, DatasetLoader, Tokenizer};
use textmol::diagnostics::{gradient_check_suite, GradCheck};
use textmol::evaluator::{evaluate, modality_gap, pairwise_consistency, GapReport, RetrievalReport, Scoring};
use textmol::experiments::{run_ablation, sweep, write_ablation_csv, Splits, SweepLoss, SweepRow, SWEEP_GRID};
use textmol::model::{embed_corpus, Model};
use textmol::trainer::{train, TrainState, BEST_DIR, LAST_DIR, LOG_FILE};
use textmol::InstancePair;

const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "textmol", version, about = "Text-molecule cross-modal retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired corpus and a matching config.
    Synth(SynthArgs),
    /// Train a model; writes the loss log and `best/`, `last/` checkpoints.
    Train(TrainArgs),
    /// Retrieval metrics of a checkpoint on the test split.
    Eval(EvalArgs),
    /// Six-row ablation over the second-order losses and the memory bank.
    Ablate(ExperimentArgs),
    /// One training run per weight of a second-order loss.
    Sweep(SweepArgs),
    /// Modality gap, pairwise consistency and the gradient-check suite.
    Diagnose(DiagnoseArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Training pairs.
    #[arg(long, default_value_t = 512)]
    pairs: usize,
    #[arg(long, default_value_t = 64)]
    valid_pairs: usize,
    #[arg(long, default_value_t = 64)]
    test_pairs: usize,
    #[arg(long, default_value_t = 16)]
    latent: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Overrides {
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(short, long)]
    config: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Continue from a checkpoint directory written by a previous run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Pool {
    /// Queries and candidates are the test split.
    Test,
    /// Test queries against every split.
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScoringArg {
    Cosine,
    Euclidean,
}

impl From<ScoringArg> for Scoring {
    fn from(s: ScoringArg) -> Self {
        match s {
            ScoringArg::Cosine => Scoring::Cosine,
            ScoringArg::Euclidean => Scoring::Euclidean,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(short, long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Pool::Test)]
    pool: Pool,
    #[arg(long, value_enum, default_value_t = ScoringArg::Cosine)]
    scoring: ScoringArg,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(short, long)]
    config: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, value_enum, default_value_t = Pool::Test)]
    pool: Pool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    U2u,
    U2c,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: ExperimentArgs,
    #[arg(long, value_enum)]
    loss: LossArg,
    /// Comma-separated weights; defaults to 0.5, 1.0, ..., 3.0.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(short, long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    /// Random pairs for the consistency estimate.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug)]
enum CliError {
    Core(textmol::Error),
    /// A flag or config value that is missing or unusable; `field` names it.
    Input { field: String, message: String },
}

impl From<textmol::Error> for CliError {
    fn from(e: textmol::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn input(field: &str, message: impl Into<String>) -> Self {
        CliError::Input {
            field: field.into(),
            message: message.into(),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Core(textmol::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    fn to_json(&self) -> serde_json::Value {
        use textmol::Error as E;
        match self {
            CliError::Input { field, message } => {
                serde_json::json!({"error": "input", "field": field, "message": message})
            }
            CliError::Core(E::Config { field, message }) => {
                serde_json::json!({"error": "config", "field": field, "message": message})
            }
            CliError::Core(E::NonFinite { component, step }) => serde_json::json!({
                "error": "non_finite", "component": component, "step": step, "message": self.message(),
            }),
            CliError::Core(e) => {
                let kind = match e {
                    E::Parse { .. } => "parse",
                    E::Validation(_) => "validation",
                    E::Shape(_) => "shape",
                    E::Domain(_) => "domain",
                    E::Instance { .. } => "instance",
                    E::Checkpoint(_) => "checkpoint",
                    E::Io { .. } => "io",
                    E::Json(_) => "json",
                    E::Csv(_) => "csv",
                    _ => "error",
                };
                serde_json::json!({"error": kind, "message": self.message()})
            }
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Core(e) => e.to_string(),
            CliError::Input { message, .. } => message.clone(),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let started_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let (name, out, mut manifest) = match cli.command {
        Command::Synth(a) => ("synth", a.out.clone(), synth(&a)?),
        Command::Train(a) => ("train", a.out.clone(), train_cmd(&a)?),
        Command::Eval(a) => ("eval", a.out.clone(), eval_cmd(&a)?),
        Command::Ablate(a) => ("ablate", a.out.clone(), ablate_cmd(&a)?),
        Command::Sweep(a) => ("sweep", a.common.out.clone(), sweep_cmd(&a)?),
        Command::Diagnose(a) => ("diagnose", a.out.clone(), diagnose_cmd(&a)?),
    };
    manifest.command = name.into();
    manifest.argv = std::env::args().collect();
    manifest.version = env!("CARGO_PKG_VERSION").into();
    manifest.started_unix = started_unix;
    manifest.elapsed_secs = started.elapsed().as_secs_f64();
    manifest.host = hostname();
    for file in manifest.outputs.clone().keys() {
        let digest = sha256_file(&out.join(file))?;
        manifest.outputs.insert(file.clone(), digest);
    }
    write_json(&out.join(MANIFEST_FILE), &manifest)
}

/// Non-deterministic run metadata, kept apart from the reports.
#[derive(Debug, Default, Serialize)]
struct Manifest {
    command: String,
    argv: Vec<String>,
    version: String,
    started_unix: u64,
    elapsed_secs: f64,
    host: String,
    /// Input file → sha256.
    inputs: BTreeMap<String, String>,
    /// Report file (relative to the output directory) → sha256.
    outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    extra: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    fn with_outputs(files: &[&str]) -> Self {
        Manifest {
            outputs: files.iter().map(|f| (f.to_string(), String::new())).collect(),
            ..Manifest::default()
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let digest = if path.is_dir() {
            sha256_dir(path)?
        } else {
            sha256_file(path)?
        };
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }
}

fn hostname() -> String {
    std::env::var("HOSTNAME")
        .ok()
        .or_else(|| fs::read_to_string("/etc/hostname").ok())
        .map(|h| h.trim().to_string())
        .filter(|h| !h.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hash over the sorted file names and contents of a directory tree.
fn sha256_dir(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| CliError::io(&d, e))? {
            let p = entry.map_err(|e| CliError::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(dir).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(&f).map_err(|e| CliError::io(&f, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(textmol::Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Config plus the directory its relative data paths resolve against.
struct Loaded {
    config: RunConfig,
    base: PathBuf,
}

fn load_config(path: &Path, overrides: Option<&Overrides>) -> Result<Loaded> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut config = RunConfig::from_json(&text)?;
    if let Some(o) = overrides {
        if let Some(s) = o.seed {
            config.train.seed = s;
        }
        if let Some(e) = o.epochs {
            config.train.epochs = e;
        }
        if let Some(b) = o.batch_size {
            config.train.batch_size = b;
        }
        config.validate()?;
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { config, base })
}

impl Loaded {
    fn path(&self, value: &Option<String>) -> Option<PathBuf> {
        value.as_ref().map(|v| self.base.join(v))
    }

    fn loader(&self) -> Result<DatasetLoader> {
        let m = &self.config.model;
        let tokenizer = match self.path(&self.config.data.vocab) {
            Some(p) => {
                let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
                let words: Vec<&str> = text.lines().map(str::trim).filter(|w| !w.is_empty()).collect();
                if words.len() >= m.vocab_size {
                    return Err(textmol::Error::config(
                        "model.vocab_size",
                        format!("must exceed the {} vocabulary words", words.len()),
                    )
                    .into());
                }
                Tokenizer::with_vocab(words, m.vocab_size, m.max_len)
            }
            None => Tokenizer::hashed(m.vocab_size, m.max_len),
        };
        let atom_table = match self.path(&self.config.data.atom_table) {
            Some(p) => load_atom_table(&p)?,
            None => AtomFeatureTable::new(m.atom_dim),
        };
        Ok(DatasetLoader { tokenizer, atom_table })
    }

    fn split(&self, value: &Option<String>, m: &mut Manifest) -> Result<Option<Vec<InstancePair>>> {
        match self.path(value) {
            Some(p) => {
                m.input(&p)?;
                Ok(Some(self.loader()?.load(&p)?))
            }
            None => Ok(None),
        }
    }

    fn required(&self, field: &str, value: &Option<String>, m: &mut Manifest) -> Result<Vec<InstancePair>> {
        self.split(value, m)?
            .ok_or_else(|| textmol::Error::config(field, "required by this command").into())
    }
}

/// Evaluation pool and query indices for `pool`.
fn eval_pool(
    loaded: &Loaded,
    pool: Pool,
    train: Option<&[InstancePair]>,
    valid: Option<&[InstancePair]>,
    m: &mut Manifest,
) -> Result<(Vec<InstancePair>, Vec<usize>)> {
    let test = loaded.required("data.test", &loaded.config.data.test, m)?;
    match pool {
        Pool::Test => {
            let q = (0..test.len()).collect();
            Ok((test, q))
        }
        Pool::All => {
            let mut all: Vec<InstancePair> = train.unwrap_or_default().to_vec();
            all.extend_from_slice(valid.unwrap_or_default());
            let start = all.len();
            all.extend(test);
            let q = (start..all.len()).collect();
            Ok((all, q))
        }
    }
}

fn synth(a: &SynthArgs) -> Result<Manifest> {
    if a.pairs < 2 {
        return Err(CliError::input("pairs", "must be at least 2"));
    }
    let total = a.pairs + a.valid_pairs + a.test_pairs;
    let pairs = generate_synthetic(total, a.latent, a.noise, a.seed)?;
    create_dir(&a.out)?;
    let (train, rest) = pairs.split_at(a.pairs);
    let (valid, test) = rest.split_at(a.valid_pairs);
    let mut config = RunConfig::synthetic(a.latent);
    let mut files = vec!["config.json", "train.jsonl"];
    save_dataset(a.out.join("train.jsonl"), train)?;
    config.data.train = Some("train.jsonl".into());
    if !valid.is_empty() {
        save_dataset(a.out.join("valid.jsonl"), valid)?;
        config.data.valid = Some("valid.jsonl".into());
        files.push("valid.jsonl");
    }
    if !test.is_empty() {
        save_dataset(a.out.join("test.jsonl"), test)?;
        config.data.test = Some("test.jsonl".into());
        files.push("test.jsonl");
    }
    write_json(&a.out.join("config.json"), &config)?;
    let mut m = Manifest::with_outputs(&files);
    m.extra.insert(
        "synth".into(),
        serde_json::json!({
            "pairs": a.pairs, "valid_pairs": a.valid_pairs, "test_pairs": a.test_pairs,
            "latent": a.latent, "noise": a.noise, "seed": a.seed,
        }),
    );
    Ok(m)
}

#[derive(Serialize)]
struct TrainReport {
    steps: u64,
    epochs: usize,
    parameters: usize,
    epoch_losses: Vec<f64>,
    best_epoch: Option<usize>,
    best_score: Option<f64>,
    validation: Vec<RetrievalReport>,
}

fn train_cmd(a: &TrainArgs) -> Result<Manifest> {
    let loaded = load_config(&a.config, Some(&a.overrides))?;
    let mut m = Manifest::default();
    m.input(&a.config)?;
    let cfg = &loaded.config;
    let train_set = loaded.required("data.train", &cfg.data.train, &mut m)?;
    let valid = loaded.split(&cfg.data.valid, &mut m)?;
    let state = match &a.resume {
        Some(dir) => {
            m.input(dir)?;
            let (state, _) = TrainState::load(dir)?;
            if state.model.config != cfg.model {
                return Err(CliError::input("resume", "checkpoint model config differs from the config file"));
            }
            state
        }
        None => TrainState::new(cfg.model.clone(), &cfg.train)?,
    };
    log::info!("training {} pairs for {} epochs", train_set.len(), cfg.train.epochs);
    let outcome = train(state, &train_set, valid.as_deref(), &cfg.train, Some(&a.out))?;
    let report = TrainReport {
        steps: outcome.state.step,
        epochs: cfg.train.epochs,
        parameters: outcome.state.model.parameter_count(),
        epoch_losses: outcome.epoch_losses,
        best_epoch: outcome.best_epoch,
        best_score: outcome.state.best_score,
        validation: outcome.validation,
    };
    write_json(&a.out.join("train_report.json"), &report)?;
    let mut m2 = Manifest::with_outputs(&["train_report.json", LOG_FILE]);
    m2.inputs = m.inputs;
    for dir in [BEST_DIR, LAST_DIR] {
        let p = a.out.join(dir);
        if p.is_dir() {
            m2.extra.insert(format!("{dir}_sha256"), sha256_dir(&p)?.into());
        }
    }
    Ok(m2)
}

fn eval_cmd(a: &EvalArgs) -> Result<Manifest> {
    let loaded = load_config(&a.config, None)?;
    let mut m = Manifest::with_outputs(&["retrieval_report.json"]);
    m.input(&a.config)?;
    let before = sha256_dir(&a.checkpoint)?;
    let model = Model::load(&a.checkpoint)?;
    let cfg = &loaded.config;
    let (train_set, valid) = match a.pool {
        Pool::All => (
            loaded.split(&cfg.data.train, &mut m)?,
            loaded.split(&cfg.data.valid, &mut m)?,
        ),
        Pool::Test => (None, None),
    };
    let (pool, queries) = eval_pool(&loaded, a.pool, train_set.as_deref(), valid.as_deref(), &mut m)?;
    let report = evaluate(&model, &pool, &queries, a.scoring.into())?;
    create_dir(&a.out)?;
    write_json(&a.out.join("retrieval_report.json"), &report)?;
    let after = sha256_dir(&a.checkpoint)?;
    if before != after {
        return Err(textmol::Error::Checkpoint(format!("{} changed during eval", a.checkpoint.display())).into());
    }
    m.extra.insert("checkpoint".into(), a.checkpoint.display().to_string().into());
    m.extra.insert("checkpoint_sha256_before".into(), before.into());
    m.extra.insert("checkpoint_sha256_after".into(), after.into());
    Ok(m)
}

struct ExperimentData {
    loaded: Loaded,
    train: Vec<InstancePair>,
    valid: Option<Vec<InstancePair>>,
    pool: Vec<InstancePair>,
    queries: Vec<usize>,
    manifest: Manifest,
}

impl ExperimentData {
    fn load(a: &ExperimentArgs, outputs: &[&str]) -> Result<Self> {
        let loaded = load_config(&a.config, Some(&a.overrides))?;
        let mut manifest = Manifest::with_outputs(outputs);
        manifest.input(&a.config)?;
        let cfg = &loaded.config;
        let train = loaded.required("data.train", &cfg.data.train, &mut manifest)?;
        let valid = loaded.split(&cfg.data.valid, &mut manifest)?;
        let (pool, queries) = eval_pool(&loaded, a.pool, Some(&train), valid.as_deref(), &mut manifest)?;
        Ok(Self {
            loaded,
            train,
            valid,
            pool,
            queries,
            manifest,
        })
    }

    fn splits(&self) -> Splits<'_> {
        Splits {
            train: &self.train,
            valid: self.valid.as_deref(),
            pool: &self.pool,
            queries: &self.queries,
        }
    }
}

fn ablate_cmd(a: &ExperimentArgs) -> Result<Manifest> {
    let data = ExperimentData::load(a, &["ablation.csv", "ablation.json"])?;
    let cfg = &data.loaded.config;
    let rows = run_ablation(&cfg.model, &cfg.train, data.splits())?;
    create_dir(&a.out)?;
    let path = a.out.join("ablation.csv");
    let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    write_ablation_csv(&rows, file)?;
    write_json(&a.out.join("ablation.json"), &rows)?;
    Ok(data.manifest)
}

fn sweep_cmd(a: &SweepArgs) -> Result<Manifest> {
    let loss = match a.loss {
        LossArg::U2u => SweepLoss::U2u,
        LossArg::U2c => SweepLoss::U2c,
    };
    let tag = match loss {
        SweepLoss::U2u => "u2u",
        SweepLoss::U2c => "u2c",
    };
    let (json, csv) = (format!("sweep_{tag}.json"), format!("sweep_{tag}.csv"));
    let data = ExperimentData::load(&a.common, &[&json, &csv])?;
    let weights = a.weights.clone().unwrap_or_else(|| SWEEP_GRID.to_vec());
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
        return Err(CliError::input("weights", format!("{w} is not a finite non-negative weight")));
    }
    let cfg = &data.loaded.config;
    let rows = sweep(&cfg.model, &cfg.train, loss, &weights, data.splits())?;
    create_dir(&a.common.out)?;
    write_json(&a.common.out.join(&json), &rows)?;
    write_sweep_csv(&a.common.out.join(&csv), &rows)?;
    Ok(data.manifest)
}

fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut text = String::from("weight,t2m_hits_at_1,t2m_mean_rank,m2t_hits_at_1,m2t_mean_rank\n");
    for r in rows {
        text.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4}\n",
            r.weight, r.hits_at_1_t2m, r.mean_rank_t2m, r.hits_at_1_m2t, r.mean_rank_m2t
        ));
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

#[derive(Serialize)]
struct Diagnostics {
    n: usize,
    modality_gap: GapReport,
    pairwise_consistency: f64,
    consistency_samples: usize,
    gradient_checks: Vec<GradCheck>,
    gradient_checks_passed: bool,
}

fn diagnose_cmd(a: &DiagnoseArgs) -> Result<Manifest> {
    let loaded = load_config(&a.config, None)?;
    let mut m = Manifest::with_outputs(&["diagnostics.json", "modality_gap_kde.csv"]);
    m.input(&a.config)?;
    m.input(&a.checkpoint)?;
    let model = Model::load(&a.checkpoint)?;
    let test = loaded.required("data.test", &loaded.config.data.test, &mut m)?;
    let (xt, xm) = embed_corpus(&model, &test)?;
    let gap = modality_gap(&xt, &xm)?;
    let consistency = pairwise_consistency(&xt, &xm, a.samples, a.seed)?;
    let checks = gradient_check_suite(a.seed);
    let report = Diagnostics {
        n: test.len(),
        pairwise_consistency: consistency,
        consistency_samples: a.samples,
        gradient_checks_passed: checks.iter().all(|c| c.passed),
        gradient_checks: checks,
        modality_gap: gap,
    };
    create_dir(&a.out)?;
    let mut kde = String::from("gap,density\n");
    for (x, y) in report.modality_gap.kde.iter().flatten() {
        kde.push_str(&format!("{x},{y}\n"));
    }
    let path = a.out.join("modality_gap_kde.csv");
    fs::write(&path, kde).map_err(|e| CliError::io(&path, e))?;
    write_json(&a.out.join("diagnostics.json"), &report)?;
    Ok(m)
}
