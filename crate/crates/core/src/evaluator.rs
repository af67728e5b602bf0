//! Bidirectional retrieval metrics and embedding-space diagnostics.

use std::cmp::Ordering;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::row_norms;
use crate::data::InstancePair;
use crate::error::{Error, Result};
use crate::model::{embed_corpus, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    #[default]
    Cosine,
    /// Negative Euclidean distance.
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    pub hits_at_1: f64,
    pub hits_at_10: f64,
    pub mrr: f64,
    pub mean_rank: f64,
    #[serde(rename = "N")]
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub text_to_molecule: DirectionMetrics,
    pub molecule_to_text: DirectionMetrics,
}

impl RetrievalReport {
    /// Mean of the two directions' MRR; the validation selection metric.
    pub fn mean_mrr(&self) -> f64 {
        0.5 * (self.text_to_molecule.mrr + self.molecule_to_text.mrr)
    }
}

fn unit_rows(x: &Array2<f64>, what: &str) -> Result<Array2<f64>> {
    let norms = row_norms(x);
    if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::Domain(format!("{what} row {i} has zero or non-finite norm")));
    }
    Ok(x / &norms.insert_axis(ndarray::Axis(1)))
}

/// `Q×N` score matrix, higher is better.
fn scores(queries: &Array2<f64>, corpus: &Array2<f64>, scoring: Scoring) -> Result<Array2<f64>> {
    if queries.ncols() != corpus.ncols() {
        return Err(Error::Shape(format!(
            "query width {} vs corpus width {}",
            queries.ncols(),
            corpus.ncols()
        )));
    }
    if corpus.nrows() == 0 {
        return Err(Error::Validation("empty corpus".into()));
    }
    Ok(match scoring {
        Scoring::Cosine => unit_rows(queries, "query")?.dot(&unit_rows(corpus, "corpus")?.t()),
        Scoring::Euclidean => {
            let mut s = Array2::zeros((queries.nrows(), corpus.nrows()));
            for (i, q) in queries.rows().into_iter().enumerate() {
                for (j, c) in corpus.rows().into_iter().enumerate() {
                    s[[i, j]] = -(&q - &c).mapv(|v| v * v).sum().sqrt();
                }
            }
            s
        }
    })
}

fn order(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// 1-based rank of every corpus item for one query: descending score, ties
/// by ascending index.
pub fn rank(query: ArrayView1<f64>, corpus: &Array2<f64>, scoring: Scoring) -> Result<Vec<usize>> {
    let q = query.to_owned().insert_axis(ndarray::Axis(0));
    let s = scores(&q, corpus, scoring)?;
    let mut idx: Vec<usize> = (0..corpus.nrows()).collect();
    idx.sort_by(|&a, &b| order((a, s[[0, a]]), (b, s[[0, b]])));
    let mut ranks = vec![0; idx.len()];
    for (pos, &i) in idx.iter().enumerate() {
        ranks[i] = pos + 1;
    }
    Ok(ranks)
}

/// Rank of `gold[i]` for query `i`.
pub fn gold_ranks(
    queries: &Array2<f64>,
    corpus: &Array2<f64>,
    gold: &[usize],
    scoring: Scoring,
) -> Result<Vec<usize>> {
    if gold.len() != queries.nrows() {
        return Err(Error::Shape("one gold index per query".into()));
    }
    if let Some(&g) = gold.iter().find(|&&g| g >= corpus.nrows()) {
        return Err(Error::Validation(format!("gold index {g} outside corpus of {}", corpus.nrows())));
    }
    let s = scores(queries, corpus, scoring)?;
    Ok(gold
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let target = (g, s[[i, g]]);
            1 + (0..corpus.nrows())
                .filter(|&j| order((j, s[[i, j]]), target) == Ordering::Less)
                .count()
        })
        .collect())
}

pub fn hits_at(ranks: &[usize], k: usize) -> f64 {
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

pub fn metrics(ranks: &[usize], n: usize) -> Result<DirectionMetrics> {
    if ranks.is_empty() {
        return Err(Error::Validation("no ranks".into()));
    }
    if let Some(&r) = ranks.iter().find(|&&r| r == 0 || r > n) {
        return Err(Error::Domain(format!("rank {r} outside [1, {n}]")));
    }
    let q = ranks.len() as f64;
    Ok(DirectionMetrics {
        hits_at_1: hits_at(ranks, 1),
        hits_at_10: hits_at(ranks, 10),
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / q,
        mean_rank: ranks.iter().sum::<usize>() as f64 / q,
        n,
    })
}

/// Retrieval of query pairs against a pool; `gold[i]` is the pool index of
/// query `i`'s counterpart.
pub fn retrieval_report_pool(
    query_t: &Array2<f64>,
    query_m: &Array2<f64>,
    pool_t: &Array2<f64>,
    pool_m: &Array2<f64>,
    gold: &[usize],
    scoring: Scoring,
) -> Result<RetrievalReport> {
    if pool_t.dim() != pool_m.dim() || query_t.dim() != query_m.dim() {
        return Err(Error::Shape("text and molecule embeddings must be aligned".into()));
    }
    let n = pool_t.nrows();
    Ok(RetrievalReport {
        text_to_molecule: metrics(&gold_ranks(query_t, pool_m, gold, scoring)?, n)?,
        molecule_to_text: metrics(&gold_ranks(query_m, pool_t, gold, scoring)?, n)?,
    })
}

/// Every instance queries the same set; instance `i`'s counterpart is row `i`.
pub fn retrieval_report(xt: &Array2<f64>, xm: &Array2<f64>, scoring: Scoring) -> Result<RetrievalReport> {
    let gold: Vec<usize> = (0..xt.nrows()).collect();
    retrieval_report_pool(xt, xm, xt, xm, &gold, scoring)
}

/// Embeds `pool`, then ranks each of `queries` (given as pool indices).
pub fn evaluate(
    model: &Model,
    pool: &[InstancePair],
    queries: &[usize],
    scoring: Scoring,
) -> Result<RetrievalReport> {
    let (xt, xm) = embed_corpus(model, pool)?;
    let qt = xt.select(ndarray::Axis(0), queries);
    let qm = xm.select(ndarray::Axis(0), queries);
    retrieval_report_pool(&qt, &qm, &xt, &xm, queries, scoring)
}

pub const KDE_POINTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub gaps: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    /// `(x, density)` on an even grid over `[0, 2]`; absent when the
    /// bandwidth degenerates (fewer than two distinct gaps).
    pub kde: Option<Vec<(f64, f64)>>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Gaussian KDE with Silverman's bandwidth `0.9 · min(σ, IQR/1.34) · n^(-1/5)`.
pub fn kde_curve(values: &[f64], lo: f64, hi: f64, points: usize) -> Option<Vec<(f64, f64)>> {
    let n = values.len() as f64;
    if values.len() < 2 || points < 2 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let (i, f) = (pos.floor() as usize, pos.fract());
        sorted[i] + f * (sorted[(i + 1).min(sorted.len() - 1)] - sorted[i])
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * n.powf(-0.2);
    if !(h > 0.0) {
        return None;
    }
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    Some(
        (0..points)
            .map(|k| {
                let x = lo + (hi - lo) * k as f64 / (points - 1) as f64;
                let d = values.iter().map(|v| (-0.5 * ((x - v) / h).powi(2)).exp()).sum::<f64>();
                (x, d * norm)
            })
            .collect(),
    )
}

pub fn modality_gap(xt: &Array2<f64>, xm: &Array2<f64>) -> Result<GapReport> {
    if xt.dim() != xm.dim() || xt.nrows() == 0 {
        return Err(Error::Shape("modality gap needs aligned nonempty embeddings".into()));
    }
    let ut = unit_rows(xt, "text")?;
    let um = unit_rows(xm, "molecule")?;
    let gaps: Vec<f64> = ut
        .rows()
        .into_iter()
        .zip(um.rows())
        .map(|(a, b)| (1.0 - a.dot(&b)).clamp(0.0, 2.0))
        .collect();
    Ok(GapReport {
        mean: gaps.iter().sum::<f64>() / gaps.len() as f64,
        median: median(&gaps),
        kde: kde_curve(&gaps, 0.0, 2.0, KDE_POINTS),
        gaps,
    })
}

fn consistency_terms(
    xt: &Array2<f64>,
    xm: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if xt.dim() != xm.dim() || xt.nrows() < 2 {
        return Err(Error::Shape("pairwise consistency needs ≥ 2 aligned instances".into()));
    }
    let ut = unit_rows(xt, "text")?;
    let um = unit_rows(xm, "molecule")?;
    Ok((ut.dot(&ut.t()), um.dot(&um.t())))
}

/// Mean of `|cos(x_i^t, x_j^t) − cos(x_i^m, x_j^m)|` over `n_samples`
/// uniformly drawn ordered pairs `i ≠ j`.
pub fn pairwise_consistency(xt: &Array2<f64>, xm: &Array2<f64>, n_samples: usize, seed: u64) -> Result<f64> {
    let (st, sm) = consistency_terms(xt, xm)?;
    if n_samples == 0 {
        return Err(Error::Validation("n_samples must be positive".into()));
    }
    let n = xt.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n_samples {
        let i = rng.random_range(0..n);
        let r = rng.random_range(0..n - 1);
        let j = if r >= i { r + 1 } else { r };
        total += (st[[i, j]] - sm[[i, j]]).abs();
    }
    Ok(total / n_samples as f64)
}

/// Same quantity averaged over every ordered pair `i ≠ j`.
pub fn pairwise_consistency_exhaustive(xt: &Array2<f64>, xm: &Array2<f64>) -> Result<f64> {
    let (st, sm) = consistency_terms(xt, xm)?;
    let n = xt.nrows();
    let diff = (&st - &sm).mapv(f64::abs);
    Ok((diff.sum() - diff.diag().sum()) / (n * (n - 1)) as f64)
}

/// Cosine of two vectors through the same path the evaluator uses.
pub fn cosine(u: &Array1<f64>, v: &Array1<f64>) -> Result<f64> {
    crate::objectives::cosine_similarity(u.view(), v.view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rank_cases() {
        let one = array![[0.3, 0.1]];
        assert_eq!(rank(array![1.0, 0.0].view(), &one, Scoring::Cosine).unwrap(), vec![1]);
        let corpus = array![[0.0, 1.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let r = rank(array![1.0, 0.0, 0.0].view(), &corpus, Scoring::Cosine).unwrap();
        assert_eq!(r, vec![2, 1, 3]);
        assert!(rank(array![0.0, 0.0, 0.0].view(), &corpus, Scoring::Cosine).is_err());
    }

    #[test]
    fn metric_hand_cases() {
        let m = metrics(&[1, 1, 1], 3).unwrap();
        assert_eq!((m.hits_at_1, m.mrr, m.mean_rank), (1.0, 1.0, 1.0));
        let m = metrics(&[1, 2, 4], 4).unwrap();
        assert!((m.mrr - 0.58333).abs() < 1e-5);
        assert!((m.mean_rank - 2.3333).abs() < 1e-4);
        assert!((m.hits_at_1 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.hits_at_10, 1.0);
        let m = metrics(&[7], 7).unwrap();
        assert_eq!((m.mrr, m.mean_rank), (1.0 / 7.0, 7.0));
        assert!(metrics(&[5], 4).is_err());
        assert!(metrics(&[0], 4).is_err());
    }

    #[test]
    fn gap_extremes() {
        let x = array![[1.0, 0.0], [0.0, 2.0]];
        assert!(modality_gap(&x, &x).unwrap().gaps.iter().all(|&g| g.abs() < 1e-15));
        let y = array![[0.0, 1.0], [3.0, 0.0]];
        assert!(modality_gap(&x, &y).unwrap().gaps.iter().all(|&g| (g - 1.0).abs() < 1e-15));
        let z = -&x;
        assert!(modality_gap(&x, &z).unwrap().gaps.iter().all(|&g| (g - 2.0).abs() < 1e-15));
        assert!(modality_gap(&x, &array![[0.0, 0.0], [1.0, 1.0]]).is_err());
    }

    #[test]
    fn kde_integrates_to_about_one() {
        let gaps = [0.2, 0.4, 0.45, 0.6, 0.9, 1.0];
        let curve = kde_curve(&gaps, 0.0, 2.0, KDE_POINTS).unwrap();
        assert_eq!(curve.len(), KDE_POINTS);
        assert_eq!(curve[0].0, 0.0);
        assert_eq!(curve[KDE_POINTS - 1].0, 2.0);
        let dx = 2.0 / (KDE_POINTS - 1) as f64;
        let area: f64 = curve.iter().map(|p| p.1).sum::<f64>() * dx;
        assert!((area - 1.0).abs() < 0.05, "{area}");
        assert!(kde_curve(&[0.5, 0.5], 0.0, 2.0, 10).is_none());
    }

    #[test]
    fn consistency_cases() {
        let x = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.5]];
        assert_eq!(pairwise_consistency(&x, &x, 50, 0).unwrap(), 0.0);
        let y = array![[0.3, 0.2], [0.1, -1.0], [2.0, 0.1], [0.0, 1.0]];
        let mut brute = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    let ct = cosine(&x.row(i).to_owned(), &x.row(j).to_owned()).unwrap();
                    let cm = cosine(&y.row(i).to_owned(), &y.row(j).to_owned()).unwrap();
                    brute += (ct - cm).abs();
                }
            }
        }
        let ex = pairwise_consistency_exhaustive(&x, &y).unwrap();
        assert!((ex - brute / 12.0).abs() < 1e-12);
        let sampled = pairwise_consistency(&x, &y, 20_000, 3).unwrap();
        assert!((sampled - ex).abs() < 0.02);
        assert!((0.0..=2.0).contains(&sampled));
    }

    #[test]
    fn perfect_embeddings_give_perfect_report() {
        let x = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let r = retrieval_report(&x, &x, Scoring::Cosine).unwrap();
        assert_eq!(r.text_to_molecule.hits_at_1, 1.0);
        assert_eq!(r.molecule_to_text.mrr, 1.0);
        let r = retrieval_report(&x, &x, Scoring::Euclidean).unwrap();
        assert_eq!(r.mean_mrr(), 1.0);
    }

    #[test]
    fn pool_gold_indices() {
        let pool = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let q = pool.select(ndarray::Axis(0), &[2]);
        let r = retrieval_report_pool(&q, &q, &pool, &pool, &[2], Scoring::Cosine).unwrap();
        assert_eq!(r.text_to_molecule.n, 3);
        assert_eq!(r.text_to_molecule.hits_at_1, 1.0);
    }
}
