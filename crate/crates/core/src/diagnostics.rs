//! Finite-difference gradient checks for the training objectives.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Param, Tape, Var};
use crate::config::{AdversarialMode, ModelConfig};
use crate::nn::{gaussian, Linear};
use crate::objectives::{critic_loss, gradient_penalty, triplet_loss_var, Critic, SimilarityDistributions};
use crate::projector::MemoryBank;

pub const FD_STEP: f64 = 1e-6;
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub name: String,
    /// Largest per-tensor `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub max_rel_error: f64,
    pub tensors: usize,
    pub passed: bool,
}

fn norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Gradient norms below this are compared absolutely; central differences
/// of an exactly-zero gradient still carry ~1e-10 of rounding noise.
pub const NORM_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    let diff = norm(&(analytic - numeric));
    diff / norm(analytic).max(norm(numeric)).max(NORM_FLOOR)
}

/// Compares tape gradients of `f` against central differences for every
/// entry of every tensor in `values`.
pub fn check<F>(name: &str, values: &[Array2<f64>], f: F) -> GradCheck
where
    F: for<'t> Fn(&'t Tape, &[Param]) -> Var<'t>,
{
    let params: Vec<Param> = values.iter().cloned().map(Param::new).collect();
    let tape = Tape::new();
    let out = f(&tape, &params);
    let grads = tape.backward(out);
    let eval = |vals: Vec<Array2<f64>>| {
        let ps: Vec<Param> = vals.into_iter().map(Param::new).collect();
        let t = Tape::new();
        f(&t, &ps).scalar()
    };
    let mut worst: f64 = 0.0;
    for (k, p) in params.iter().enumerate() {
        let analytic = grads
            .param(p)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(p.value.dim()));
        let mut numeric = Array2::zeros(p.value.dim());
        for idx in 0..p.value.len() {
            let (r, c) = (idx / p.value.ncols(), idx % p.value.ncols());
            let mut plus = values.to_vec();
            plus[k][[r, c]] += FD_STEP;
            let mut minus = values.to_vec();
            minus[k][[r, c]] -= FD_STEP;
            numeric[[r, c]] = (eval(plus) - eval(minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    GradCheck {
        name: name.into(),
        max_rel_error: worst,
        tensors: values.len(),
        passed: worst <= GRADCHECK_TOL,
    }
}

fn critic_from(params: &[Param], hidden: usize) -> Critic {
    let layers = (0..hidden)
        .map(|i| Linear {
            weight: params[2 * i].clone(),
            bias: params[2 * i + 1].clone(),
        })
        .collect();
    Critic {
        hidden: layers,
        out: Linear {
            weight: params[2 * hidden].clone(),
            bias: params[2 * hidden + 1].clone(),
        },
    }
}

/// Runs every check on small random instances (`d ≤ 8`, `|B| ≤ 4`, `n ≤ 3`).
pub fn gradient_check_suite(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = |r, c| gaussian(r, c, 1.0, &mut rng);
    let (b, d) = (4, 6);
    let mut out = Vec::new();

    let trip: Vec<Array2<f64>> = (0..6).map(|_| g(b, d)).collect();
    out.push(check("triplet_loss", &trip, |t, p| {
        let v: Vec<Var> = p.iter().map(|x| t.param(x)).collect();
        // a large margin keeps every hinge active and away from its kink
        triplet_loss_var(v[0], v[1], v[2], v[3], v[4], v[5], 10.0)
    }));

    let xs = vec![g(b, d), g(b, d)];
    out.push(check("loss_u2u", &xs, |t, p| {
        let s = SimilarityDistributions::new(t.param(&p[0]), t.param(&p[1]));
        s.t2m().add(s.m2t())
    }));
    out.push(check("loss_u2c", &xs, |t, p| {
        let s = SimilarityDistributions::new(t.param(&p[0]), t.param(&p[1]));
        s.to_m().add(s.to_t())
    }));

    let width = 5;
    let mut critic_vals = vec![g(d, width), g(1, width), g(width, 1), g(1, 1)];
    critic_vals.push(g(b, d));
    critic_vals.push(g(b, d));
    out.push(check("gradient_penalty", &critic_vals, |t, p| {
        let c = critic_from(p, 1);
        let hat = t.param(&p[4]).scale(0.3).add(t.param(&p[5]).scale(0.7));
        gradient_penalty(t, &c, hat)
    }));
    let eps = [0.1, 0.4, 0.6, 0.95];
    out.push(check("critic_loss_wgan_gp", &critic_vals, |t, p| {
        let c = critic_from(p, 1);
        critic_loss(t, &c, t.param(&p[4]), t.param(&p[5]), &eps, 10.0, AdversarialMode::WganGp)
    }));

    let (n, dm, dout) = (3, 5, 4);
    let bank_vals = vec![g(n, dm), g(dm, dm), g(dm, dm), g(dm, dout), g(1, dout), g(7, dm)];
    out.push(check("finalize_project", &bank_vals, |t, p| {
        let bank = MemoryBank {
            queries: p[0].clone(),
            w_key: p[1].clone(),
            w_value: p[2].clone(),
            fc: Linear {
                weight: p[3].clone(),
                bias: p[4].clone(),
            },
            scaled: ModelConfig::default().attention_scale,
        };
        let x = bank.finalize(t, bank.project(t, t.param(&p[5])));
        // fold the embedding into a scalar with fixed non-trivial weights
        let w = t.constant(Array2::from_shape_fn((dout, 1), |(i, _)| 0.5 + i as f64));
        x.tanh().matmul(w).sum()
    }));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for seed in 0..2 {
            for c in gradient_check_suite(seed) {
                assert!(c.passed, "{c:?}");
            }
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // detach hides the dependence from the tape but not from the numeric check
        let c = check("broken", &[Array2::from_elem((1, 2), 0.5)], |t, p| {
            let x = t.param(&p[0]);
            x.mul(x.detach()).sum()
        });
        assert!(!c.passed);
    }
}
