//! Ablation grid and loss-weight sensitivity sweep.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::{LossToggles, ModelConfig, ProjectorKind, TrainConfig};
use crate::data::InstancePair;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, RetrievalReport, Scoring};
use crate::trainer::{train, TrainState};

/// Weights visited by the sensitivity sweep.
pub const SWEEP_GRID: [f64; 6] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub row: usize,
    pub t2m: bool,
    pub m2t: bool,
    pub to_m: bool,
    pub to_t: bool,
    pub memory_bank: bool,
}

impl AblationSpec {
    pub fn apply(&self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let mut m = model.clone();
        m.projector = if self.memory_bank {
            ProjectorKind::MemoryBank
        } else {
            ProjectorKind::Linear
        };
        let mut t = train.clone();
        t.losses = LossToggles {
            t2m: self.t2m,
            m2t: self.m2t,
            to_m: self.to_m,
            to_t: self.to_t,
            ..train.losses
        };
        (m, t)
    }
}

/// The six ablation rows: second-order directions are removed one at a
/// time, then the memory bank is replaced by the shared linear layer.
pub fn ablation_grid() -> [AblationSpec; 6] {
    let row = |row, t2m, m2t, to_m, to_t, memory_bank| AblationSpec {
        row,
        t2m,
        m2t,
        to_m,
        to_t,
        memory_bank,
    };
    [
        row(1, true, true, true, true, true),
        row(2, false, true, true, true, true),
        row(3, false, false, true, true, true),
        row(4, false, false, false, true, true),
        row(5, false, false, false, false, true),
        row(6, false, false, false, false, false),
    ]
}

/// Training inputs shared by every run of an experiment.
#[derive(Debug, Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a [InstancePair],
    pub valid: Option<&'a [InstancePair]>,
    /// Evaluation pool and the pool indices of the queries.
    pub pool: &'a [InstancePair],
    pub queries: &'a [usize],
}

/// Trains from scratch under `model`/`train` and evaluates on the pool.
pub fn train_and_evaluate(model: &ModelConfig, train_cfg: &TrainConfig, splits: Splits<'_>) -> Result<RetrievalReport> {
    let state = TrainState::new(model.clone(), train_cfg)?;
    let outcome = train(state, splits.train, splits.valid, train_cfg, None)?;
    evaluate(&outcome.state.model, splits.pool, splits.queries, Scoring::Cosine)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub spec: AblationSpec,
    pub report: RetrievalReport,
}

pub fn run_ablation(model: &ModelConfig, train_cfg: &TrainConfig, splits: Splits<'_>) -> Result<Vec<AblationRow>> {
    ablation_grid()
        .iter()
        .map(|spec| {
            let (m, t) = spec.apply(model, train_cfg);
            let report = train_and_evaluate(&m, &t, splits)
                .map_err(|e| Error::Validation(format!("ablation row {}: {e}", spec.row)))?;
            Ok(AblationRow { spec: *spec, report })
        })
        .collect()
}

pub const ABLATION_HEADER: [&str; 14] = [
    "#",
    "L_t2m",
    "L_m2t",
    "L_2m",
    "L_2t",
    "MB",
    "T2M Mean Rank",
    "T2M MRR",
    "T2M Hits@1",
    "T2M Hits@10",
    "M2T Mean Rank",
    "M2T MRR",
    "M2T Hits@1",
    "M2T Hits@10",
];

pub fn write_ablation_csv(rows: &[AblationRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ABLATION_HEADER)?;
    let mark = |b: bool| if b { "x" } else { "" }.to_string();
    for r in rows {
        let (a, b) = (r.report.text_to_molecule, r.report.molecule_to_text);
        let mut rec = vec![
            r.spec.row.to_string(),
            mark(r.spec.t2m),
            mark(r.spec.m2t),
            mark(r.spec.to_m),
            mark(r.spec.to_t),
            mark(r.spec.memory_bank),
        ];
        for m in [a, b] {
            rec.push(format!("{:.4}", m.mean_rank));
            rec.push(format!("{:.4}", m.mrr));
            rec.push(format!("{:.4}", m.hits_at_1));
            rec.push(format!("{:.4}", m.hits_at_10));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepLoss {
    U2u,
    U2c,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub loss: SweepLoss,
    pub weight: f64,
    pub hits_at_1_t2m: f64,
    pub mean_rank_t2m: f64,
    pub hits_at_1_m2t: f64,
    pub mean_rank_m2t: f64,
    pub report: RetrievalReport,
}

/// One training run per weight, all else fixed.
pub fn sweep(
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    loss: SweepLoss,
    weights: &[f64],
    splits: Splits<'_>,
) -> Result<Vec<SweepRow>> {
    if weights.is_empty() {
        return Err(Error::Validation("sweep needs at least one weight".into()));
    }
    weights
        .iter()
        .map(|&w| {
            let mut t = train_cfg.clone();
            match loss {
                SweepLoss::U2u => t.w_u2u = w,
                SweepLoss::U2c => t.w_u2c = w,
            }
            let report = train_and_evaluate(model, &t, splits)?;
            Ok(SweepRow {
                loss,
                weight: w,
                hits_at_1_t2m: report.text_to_molecule.hits_at_1,
                mean_rank_t2m: report.text_to_molecule.mean_rank,
                hits_at_1_m2t: report.molecule_to_text.hits_at_1,
                mean_rank_m2t: report.molecule_to_text.mean_rank,
                report,
            })
        })
        .collect()
}
