//! Training objectives: triplet contrastive loss, the adversarial critic
//! with gradient penalty, and the second-order similarity-distribution losses.
//!
//! Each loss has a tape form (used by the trainer, differentiable) and a
//! plain form over arrays that validates its inputs.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand::distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::autograd::{Param, Tape, Var};
use crate::config::AdversarialMode;
use crate::data::{Triplet, TripletDirection};
use crate::error::{Error, Result};
use crate::nn::{join, Linear, Module};

/// Entries are floored here before taking logs in [`kl_divergence`].
pub const KL_FLOOR: f64 = 1e-12;
/// Row sums of a distribution must be within this of 1.
pub const NORMALIZATION_TOL: f64 = 1e-9;

fn check_same_len(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<()> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("lengths {} and {}", u.len(), v.len())));
    }
    Ok(())
}

pub fn euclidean_distance(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    check_same_len(u, v)?;
    Ok(u.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
}

pub fn cosine_similarity(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    check_same_len(u, v)?;
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Domain("cosine similarity of a zero-norm vector".into()));
    }
    Ok((u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Mean over rows of
/// `max(‖a_t − p_m‖ − ‖a_t − n_m‖ + α, 0) + max(‖a_m − p_t‖ − ‖a_m − n_t‖ + α, 0)`.
/// All inputs are `R×d` with row `r` forming one pair of triplets.
pub fn triplet_loss_var<'t>(
    anchor_t: Var<'t>,
    pos_m: Var<'t>,
    neg_m: Var<'t>,
    anchor_m: Var<'t>,
    pos_t: Var<'t>,
    neg_t: Var<'t>,
    alpha: f64,
) -> Var<'t> {
    let hinge = |a: Var<'t>, p: Var<'t>, n: Var<'t>| {
        a.sub(p)
            .row_norms()
            .sub(a.sub(n).row_norms())
            .add_scalar(alpha)
            .relu()
    };
    let t = hinge(anchor_t, pos_m, neg_m);
    let m = hinge(anchor_m, pos_t, neg_t);
    t.add(m).mean()
}

/// Triplet loss over a batch given per-instance embeddings `x_t`, `x_m`
/// (`B×d`) and triplets from [`crate::data::sample_triplets`]. Text- and
/// molecule-anchored triplets are paired in order.
pub fn batch_triplet_loss<'t>(
    x_t: Var<'t>,
    x_m: Var<'t>,
    triplets: &[Triplet],
    alpha: f64,
) -> Result<Var<'t>> {
    let pick = |dir: TripletDirection| -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let sel: Vec<&Triplet> = triplets.iter().filter(|t| t.direction == dir).collect();
        (
            sel.iter().map(|t| t.anchor_index).collect(),
            sel.iter().map(|t| t.positive_index).collect(),
            sel.iter().map(|t| t.negative_index).collect(),
        )
    };
    let (ta, tp, tn) = pick(TripletDirection::TextAnchor);
    let (ma, mp, mn) = pick(TripletDirection::MoleculeAnchor);
    if ta.len() != ma.len() || ta.is_empty() {
        return Err(Error::Validation(
            "need equally many (and at least one) text- and molecule-anchored triplets".into(),
        ));
    }
    Ok(triplet_loss_var(
        x_t.gather(&ta),
        x_m.gather(&tp),
        x_m.gather(&tn),
        x_m.gather(&ma),
        x_t.gather(&mp),
        x_t.gather(&mn),
        alpha,
    ))
}

pub fn triplet_loss(
    anchor_t: &Array2<f64>,
    pos_m: &Array2<f64>,
    neg_m: &Array2<f64>,
    anchor_m: &Array2<f64>,
    pos_t: &Array2<f64>,
    neg_t: &Array2<f64>,
    alpha: f64,
) -> Result<f64> {
    let shape = anchor_t.dim();
    if [pos_m, neg_m, anchor_m, pos_t, neg_t].iter().any(|a| a.dim() != shape) || shape.0 == 0 {
        return Err(Error::Shape("triplet inputs must share a nonempty shape".into()));
    }
    if alpha < 0.0 {
        return Err(Error::Domain("margin must be non-negative".into()));
    }
    let tape = Tape::new();
    let c = |a: &Array2<f64>| tape.constant(a.clone());
    Ok(triplet_loss_var(c(anchor_t), c(pos_m), c(neg_m), c(anchor_m), c(pos_t), c(neg_t), alpha).scalar())
}

/// Feed-forward critic `d → hidden… → 1` with tanh hidden units and no output
/// squashing.
#[derive(Debug, Clone)]
pub struct Critic {
    pub hidden: Vec<Linear>,
    pub out: Linear,
}

impl Critic {
    pub fn new(input: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut width = input;
        for &h in hidden {
            layers.push(Linear::new(width, h, rng));
            width = h;
        }
        Self {
            hidden: layers,
            out: Linear::new(width, 1, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden
            .first()
            .map_or(self.out.input_dim(), Linear::input_dim)
    }

    /// `B×1` scores for `B×d` inputs.
    pub fn score<'t>(&self, tape: &'t Tape, g: Var<'t>) -> Var<'t> {
        let mut h = g;
        for layer in &self.hidden {
            h = layer.forward(tape, h).tanh();
        }
        self.out.forward(tape, h)
    }

    /// `∂D/∂g` for each row of `g`, built from tape operations so that it can
    /// itself be differentiated with respect to the critic's parameters.
    pub fn input_gradient<'t>(&self, tape: &'t Tape, g: Var<'t>) -> Var<'t> {
        let rows = g.shape().0;
        let mut activations = Vec::with_capacity(self.hidden.len());
        let mut h = g;
        for layer in &self.hidden {
            h = layer.forward(tape, h).tanh();
            activations.push(h);
        }
        let ones = tape.constant(Array2::ones((rows, 1)));
        let mut delta = ones.matmul(tape.param(&self.out.weight).t());
        for (layer, act) in self.hidden.iter().zip(activations).rev() {
            let slope = act.mul(act).scale(-1.0).add_scalar(1.0);
            delta = delta.mul(slope).matmul(tape.param(&layer.weight).t());
        }
        delta
    }
}

impl Module for Critic {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        for (i, l) in self.hidden.iter().enumerate() {
            l.visit(&join(prefix, &format!("hidden{i}")), f);
        }
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (i, l) in self.hidden.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("hidden{i}")), f);
        }
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

pub fn discriminator_score(g: ArrayView1<f64>, critic: &Critic) -> Result<f64> {
    if g.len() != critic.input_dim() {
        return Err(Error::Shape(format!(
            "critic expects width {}, got {}",
            critic.input_dim(),
            g.len()
        )));
    }
    let tape = Tape::new();
    let x = tape.constant(g.to_owned().insert_axis(ndarray::Axis(0)));
    Ok(critic.score(&tape, x).scalar())
}

/// `mean_i (‖∇D(ĝ_i)‖ − 1)²`.
pub fn gradient_penalty<'t>(tape: &'t Tape, critic: &Critic, g_hat: Var<'t>) -> Var<'t> {
    let norm = critic.input_gradient(tape, g_hat).row_norms();
    let dev = norm.add_scalar(-1.0);
    dev.mul(dev).mean()
}

/// `ε_i g_t,i + (1 − ε_i) g_m,i`.
pub fn interpolate<'t>(tape: &'t Tape, g_t: Var<'t>, g_m: Var<'t>, eps: &[f64]) -> Var<'t> {
    let e = tape.constant(Array2::from_shape_vec((eps.len(), 1), eps.to_vec()).expect("eps column"));
    let one_minus = tape.constant(
        Array2::from_shape_vec((eps.len(), 1), eps.iter().map(|v| 1.0 - v).collect()).expect("eps column"),
    );
    g_t.mul_col(e).add(g_m.mul_col(one_minus))
}

/// Objective minimized by the critic.
///
/// WGAN-GP: `mean D(g_m) − mean D(g_t) + λ_gp · GP(ĝ)`.
/// Log-loss: `−(mean log σ(D(g_t)) + mean log(1 − σ(D(g_m))))`.
pub fn critic_loss<'t>(
    tape: &'t Tape,
    critic: &Critic,
    g_t: Var<'t>,
    g_m: Var<'t>,
    eps: &[f64],
    lambda_gp: f64,
    mode: AdversarialMode,
) -> Var<'t> {
    let st = critic.score(tape, g_t);
    let sm = critic.score(tape, g_m);
    match mode {
        AdversarialMode::WganGp => {
            let g_hat = interpolate(tape, g_t, g_m, eps);
            let gp = gradient_penalty(tape, critic, g_hat);
            sm.mean().sub(st.mean()).add(gp.scale(lambda_gp))
        }
        AdversarialMode::LogLoss => {
            let real = st.log_sigmoid().mean();
            let fake = sm.scale(-1.0).log_sigmoid().mean();
            real.add(fake).scale(-1.0)
        }
    }
}

/// Adversarial term of the model objective; depends on molecule
/// representations only.
///
/// WGAN-GP: `−mean D(g_m)`. Log-loss: `mean log(1 − σ(D(g_m)))`.
pub fn generator_loss<'t>(tape: &'t Tape, critic: &Critic, g_m: Var<'t>, mode: AdversarialMode) -> Var<'t> {
    let sm = critic.score(tape, g_m);
    match mode {
        AdversarialMode::WganGp => sm.mean().scale(-1.0),
        AdversarialMode::LogLoss => sm.scale(-1.0).log_sigmoid().mean(),
    }
}

/// Plain-array critic and generator losses with interpolation coefficients
/// drawn uniformly from `[0, 1)` per row pair.
pub fn adversarial_losses(
    g_t: &Array2<f64>,
    g_m: &Array2<f64>,
    critic: &Critic,
    lambda_gp: f64,
    mode: AdversarialMode,
    rng: &mut impl Rng,
) -> Result<(f64, f64)> {
    if g_t.nrows() == 0 || g_t.dim() != g_m.dim() || g_t.ncols() != critic.input_dim() {
        return Err(Error::Shape("adversarial inputs must be aligned nonempty batches".into()));
    }
    let eps: Vec<f64> = rng
        .sample_iter(Uniform::new(0.0, 1.0).expect("unit interval"))
        .take(g_t.nrows())
        .collect();
    let tape = Tape::new();
    let t = tape.constant(g_t.clone());
    let m = tape.constant(g_m.clone());
    let c = critic_loss(&tape, critic, t, m, &eps, lambda_gp, mode).scalar();
    let g = generator_loss(&tape, critic, m, mode).scalar();
    Ok((c, g))
}

/// `log P` where `P_ij = softmax_j cos(x_i, y_j)`, diagonal included.
pub fn log_similarity_distribution<'t>(x: Var<'t>, y: Var<'t>) -> Var<'t> {
    x.normalize_rows()
        .matmul(y.normalize_rows().t())
        .log_softmax_rows()
}

fn check_nonzero_rows(x: &Array2<f64>, what: &str) -> Result<()> {
    if crate::autograd::row_norms(x).iter().any(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::Domain(format!("{what} has a zero-norm or non-finite row")));
    }
    Ok(())
}

pub fn similarity_distribution(x: &Array2<f64>, y: &Array2<f64>) -> Result<Array2<f64>> {
    if x.dim() != y.dim() || x.nrows() < 2 {
        return Err(Error::Shape(format!(
            "similarity distribution needs two equal |B|×d inputs with |B| ≥ 2, got {:?} and {:?}",
            x.dim(),
            y.dim()
        )));
    }
    check_nonzero_rows(x, "X")?;
    check_nonzero_rows(y, "Y")?;
    let tape = Tape::new();
    let s = tape
        .constant(x.clone())
        .normalize_rows()
        .matmul(tape.constant(y.clone()).normalize_rows().t());
    Ok(s.softmax_rows().value())
}

fn check_distribution(p: ArrayView1<f64>, what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Domain(format!("{what} is empty")));
    }
    if p.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("{what} has a non-positive entry")));
    }
    if (p.sum() - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::Domain(format!("{what} sums to {}, not 1", p.sum())));
    }
    Ok(())
}

/// `Σ_j p_j ln(p_j / q_j)` for strictly positive, normalized `p` and `q`.
pub fn kl_divergence(p: ArrayView1<f64>, q: ArrayView1<f64>) -> Result<f64> {
    check_same_len(p, q)?;
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| a * (a.max(KL_FLOOR).ln() - b.max(KL_FLOOR).ln()))
        .sum())
}

fn mean_row_kl(p: &Array2<f64>, q: &Array2<f64>) -> Result<f64> {
    let mut total = 0.0;
    for (pr, qr) in p.rows().into_iter().zip(q.rows()) {
        total += kl_divergence(pr, qr)?;
    }
    Ok(total / p.nrows() as f64)
}

fn check_shapes(ms: &[&Array2<f64>]) -> Result<()> {
    let shape = ms[0].dim();
    if shape.0 == 0 || shape.0 != shape.1 || ms.iter().any(|m| m.dim() != shape) {
        return Err(Error::Shape("distributions must share one square nonempty shape".into()));
    }
    Ok(())
}

/// `(1/|B|) Σ_i [KL(P_tt,i ‖ P_mm,i) + KL(P_mm,i ‖ P_tt,i)]`.
pub fn loss_u2u(p_tt: &Array2<f64>, p_mm: &Array2<f64>) -> Result<f64> {
    check_shapes(&[p_tt, p_mm])?;
    Ok(mean_row_kl(p_tt, p_mm)? + mean_row_kl(p_mm, p_tt)?)
}

/// `(1/|B|) Σ_i [KL(P_tt,i ‖ P_mt,i) + KL(P_mm,i ‖ P_tm,i)]`; the uni-modal
/// distributions are the reference.
pub fn loss_u2c(
    p_tt: &Array2<f64>,
    p_mm: &Array2<f64>,
    p_tm: &Array2<f64>,
    p_mt: &Array2<f64>,
) -> Result<f64> {
    check_shapes(&[p_tt, p_mm, p_tm, p_mt])?;
    Ok(mean_row_kl(p_tt, p_mt)? + mean_row_kl(p_mm, p_tm)?)
}

/// The four batch similarity distributions in both probability and log form.
pub struct SimilarityDistributions<'t> {
    pub tt: (Var<'t>, Var<'t>),
    pub mm: (Var<'t>, Var<'t>),
    pub tm: (Var<'t>, Var<'t>),
    pub mt: (Var<'t>, Var<'t>),
}

impl<'t> SimilarityDistributions<'t> {
    pub fn new(x_t: Var<'t>, x_m: Var<'t>) -> Self {
        let nt = x_t.normalize_rows();
        let nm = x_m.normalize_rows();
        let dist = |a: Var<'t>, b: Var<'t>| {
            let s = a.matmul(b.t());
            (s.softmax_rows(), s.log_softmax_rows())
        };
        Self {
            tt: dist(nt, nt),
            mm: dist(nm, nm),
            tm: dist(nt, nm),
            mt: dist(nm, nt),
        }
    }

    /// Mean over rows of `KL(p_i ‖ q_i)`.
    pub fn kl(p: (Var<'t>, Var<'t>), q: (Var<'t>, Var<'t>)) -> Var<'t> {
        let n = p.0.shape().0 as f64;
        p.0.mul(p.1.sub(q.1)).sum().scale(1.0 / n)
    }

    pub fn t2m(&self) -> Var<'t> {
        Self::kl(self.tt, self.mm)
    }

    pub fn m2t(&self) -> Var<'t> {
        Self::kl(self.mm, self.tt)
    }

    pub fn to_m(&self) -> Var<'t> {
        Self::kl(self.mm, self.tm)
    }

    pub fn to_t(&self) -> Var<'t> {
        Self::kl(self.tt, self.mt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_cl: f64,
    pub l_adv: f64,
    pub l_u2u: f64,
    pub l_u2c: f64,
    pub total: f64,
    pub lambda_1: f64,
}

/// `l_cl + λ₁ l_adv + w_u2u l_u2u + w_u2c l_u2c`; both weights are 1 unless
/// a sensitivity sweep says otherwise.
pub fn total_loss(
    l_cl: f64,
    l_adv: f64,
    l_u2u: f64,
    l_u2c: f64,
    lambda_1: f64,
    w_u2u: f64,
    w_u2c: f64,
) -> LossBundle {
    LossBundle {
        l_cl,
        l_adv,
        l_u2u,
        l_u2c,
        total: l_cl + lambda_1 * l_adv + w_u2u * l_u2u + w_u2c * l_u2c,
        lambda_1,
    }
}

/// Sanity view of the embedding rows used by the second-order losses.
pub fn rows_are_nonzero(x: &Array2<f64>) -> bool {
    crate::autograd::row_norms(x).iter().all(|&n| n > 0.0)
}

pub fn to_row(v: &Array1<f64>) -> Array2<f64> {
    v.clone().insert_axis(ndarray::Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn euclidean_cases() {
        let z = array![1.5, -2.0];
        assert_eq!(euclidean_distance(z.view(), z.view()).unwrap(), 0.0);
        assert_eq!(euclidean_distance(array![0.0, 0.0].view(), array![3.0, 4.0].view()).unwrap(), 5.0);
        let u = array![0.1, -0.4, 2.0, 0.0, 1.3];
        let v = array![1.1, 0.6, -1.0, 0.5, 0.3];
        let oracle = u.iter().zip(v.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!((euclidean_distance(u.view(), v.view()).unwrap() - oracle).abs() < 1e-15);
    }

    #[test]
    fn cosine_cases() {
        let u = array![1.0, 2.0, -0.5];
        assert!((cosine_similarity(u.view(), u.view()).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(array![1.0, 0.0].view(), array![0.0, 3.0].view()).unwrap(), 0.0);
        let scaled = &u * 7.5;
        assert!((cosine_similarity(u.view(), scaled.view()).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine_similarity(array![0.0, 0.0].view(), u.slice(ndarray::s![..2])).is_err());
    }

    /// One-row triplet inputs arranged so that the anchor-positive and
    /// anchor-negative distances are `dap` and `dan` along the first axis.
    fn rows(dap: f64, dan: f64) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        (array![[0.0, 0.0]], array![[dap, 0.0]], array![[0.0, dan]])
    }

    #[test]
    fn triplet_hand_cases() {
        let (a, p, n) = rows(1.0, 2.0);
        assert_eq!(triplet_loss(&a, &p, &n, &a, &p, &n, 0.3).unwrap(), 0.0);
        let (a, p, n) = rows(1.0, 1.0);
        assert!((triplet_loss(&a, &p, &n, &a, &p, &n, 0.3).unwrap() - 0.6).abs() < 1e-12);
        let (a1, p1, n1) = rows(1.5, 1.0);
        let (a2, p2, n2) = rows(0.0, 5.0);
        assert!((triplet_loss(&a1, &p1, &n1, &a2, &p2, &n2, 0.3).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn batch_triplet_uses_both_directions() {
        let tape = Tape::new();
        let xt = tape.constant(array![[0.0, 0.0], [1.0, 0.0]]);
        let xm = tape.constant(array![[0.0, 0.0], [1.0, 0.0]]);
        let triplets = crate::data::sample_triplets(2, 0).unwrap();
        // positives coincide, negatives are at distance 1 → hinge inactive
        let l = batch_triplet_loss(xt, xm, &triplets, 0.3).unwrap();
        assert_eq!(l.scalar(), 0.0);
        let l = batch_triplet_loss(xt, xm, &triplets, 1.5).unwrap();
        assert!((l.scalar() - 1.0).abs() < 1e-12);
    }

    fn zero_critic(d: usize, hidden: &[usize]) -> Critic {
        let mut c = Critic::new(d, hidden, &mut ChaCha8Rng::seed_from_u64(0));
        c.visit_mut("", &mut |_, p| p.value.fill(0.0));
        c
    }

    #[test]
    fn zero_critic_scores_zero_and_penalizes_one() {
        let c = zero_critic(3, &[4]);
        assert_eq!(discriminator_score(array![1.0, 2.0, 3.0].view(), &c).unwrap(), 0.0);
        let gt = array![[1.0, 0.0, 2.0], [0.5, 0.5, 0.5]];
        let gm = array![[0.0, 1.0, 0.0], [3.0, -1.0, 0.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (cl, gl) = adversarial_losses(&gt, &gm, &c, 10.0, AdversarialMode::WganGp, &mut rng).unwrap();
        assert!((cl - 10.0).abs() < 1e-12);
        assert_eq!(gl, 0.0);
    }

    #[test]
    fn linear_critic_scores_dot_product() {
        let w = array![[0.6], [-0.8]];
        let c = Critic {
            hidden: vec![],
            out: Linear::from_parts(w, Array2::zeros((1, 1))),
        };
        let s = discriminator_score(array![2.0, 1.0].view(), &c).unwrap();
        assert!((s - (1.2 - 0.8)).abs() < 1e-15);
        let tape = Tape::new();
        let g = tape.constant(array![[5.0, -3.0], [0.1, 0.2], [0.0, 0.0]]);
        assert_eq!(gradient_penalty(&tape, &c, g).scalar(), 0.0);
    }

    /// 2-layer critic `w2·tanh(W1ᵀg + b1) + b2` worked out in closed form.
    #[test]
    fn two_layer_critic_matches_closed_form() {
        let w1 = array![[0.5, -0.3], [0.2, 0.8]];
        let b1 = array![[0.1, -0.2]];
        let w2 = array![[1.5], [-0.7]];
        let b2 = array![[0.05]];
        let c = Critic {
            hidden: vec![Linear::from_parts(w1.clone(), b1.clone())],
            out: Linear::from_parts(w2.clone(), b2.clone()),
        };
        let score = |g: [f64; 2]| -> (f64, [f64; 2]) {
            let pre = [
                g[0] * w1[[0, 0]] + g[1] * w1[[1, 0]] + b1[[0, 0]],
                g[0] * w1[[0, 1]] + g[1] * w1[[1, 1]] + b1[[0, 1]],
            ];
            let h = [pre[0].tanh(), pre[1].tanh()];
            let s = h[0] * w2[[0, 0]] + h[1] * w2[[1, 0]] + b2[[0, 0]];
            let d = [w2[[0, 0]] * (1.0 - h[0] * h[0]), w2[[1, 0]] * (1.0 - h[1] * h[1])];
            let grad = [
                d[0] * w1[[0, 0]] + d[1] * w1[[0, 1]],
                d[0] * w1[[1, 0]] + d[1] * w1[[1, 1]],
            ];
            (s, grad)
        };
        let gt = [[1.0, -0.5], [0.3, 0.9]];
        let gm = [[-0.2, 0.4], [2.0, 1.0]];
        let eps = [0.25, 0.8];
        let mut expected_critic = 0.0;
        let mut gen = 0.0;
        for i in 0..2 {
            expected_critic += (score(gm[i]).0 - score(gt[i]).0) / 2.0;
            gen -= score(gm[i]).0 / 2.0;
            let hat = [
                eps[i] * gt[i][0] + (1.0 - eps[i]) * gm[i][0],
                eps[i] * gt[i][1] + (1.0 - eps[i]) * gm[i][1],
            ];
            let g = score(hat).1;
            let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
            expected_critic += 10.0 * (norm - 1.0).powi(2) / 2.0;
        }
        let tape = Tape::new();
        let t = tape.constant(array![[1.0, -0.5], [0.3, 0.9]]);
        let m = tape.constant(array![[-0.2, 0.4], [2.0, 1.0]]);
        let cl = critic_loss(&tape, &c, t, m, &eps, 10.0, AdversarialMode::WganGp).scalar();
        let gl = generator_loss(&tape, &c, m, AdversarialMode::WganGp).scalar();
        assert!((cl - expected_critic).abs() < 1e-12, "{cl} vs {expected_critic}");
        assert!((gl - gen).abs() < 1e-12);
    }

    #[test]
    fn log_loss_mode_is_finite_and_signed() {
        let c = zero_critic(2, &[]);
        let tape = Tape::new();
        let g = tape.constant(array![[1.0, 2.0]]);
        let cl = critic_loss(&tape, &c, g, g, &[0.5], 10.0, AdversarialMode::LogLoss).scalar();
        assert!((cl - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let gl = generator_loss(&tape, &c, g, AdversarialMode::LogLoss).scalar();
        assert!((gl + std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn similarity_distribution_cases() {
        let x = array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
        let p = similarity_distribution(&x, &x).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let p = similarity_distribution(&x, &x).unwrap();
        let e = std::f64::consts::E;
        assert!((p[[0, 0]] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[[0, 1]] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((p[[0, 0]] - 0.7311).abs() < 1e-4);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = crate::nn::gaussian(4, 3, 1.0, &mut rng);
        let b = crate::nn::gaussian(4, 3, 1.0, &mut rng);
        let p1 = similarity_distribution(&a, &b).unwrap();
        let p2 = similarity_distribution(&(&a * 3.7), &b).unwrap();
        for (u, v) in p1.iter().zip(p2.iter()) {
            assert!((u - v).abs() < 1e-12);
        }

        let z = array![[0.0, 0.0], [1.0, 1.0]];
        assert!(matches!(similarity_distribution(&z, &x), Err(Error::Domain(_))));
    }

    #[test]
    fn kl_cases() {
        let p = array![0.5, 0.5];
        let q = array![0.25, 0.75];
        assert_eq!(kl_divergence(p.view(), p.view()).unwrap(), 0.0);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        let got = kl_divergence(p.view(), q.view()).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.14384).abs() < 1e-5);
        assert!(kl_divergence(array![0.5, 0.6].view(), q.view()).is_err());
        assert!(kl_divergence(array![1.0, 0.0].view(), q.view()).is_err());
    }

    #[test]
    fn u2u_and_u2c_hand_values() {
        let a = array![[0.5, 0.5], [0.25, 0.75]];
        let b = array![[0.25, 0.75], [0.5, 0.5]];
        assert_eq!(loss_u2u(&a, &a).unwrap(), 0.0);
        let kl = |p: [f64; 2], q: [f64; 2]| p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln();
        let h = 0.5 * (kl([0.5, 0.5], [0.25, 0.75]) + kl([0.25, 0.75], [0.5, 0.5])) * 2.0;
        assert!((loss_u2u(&a, &b).unwrap() - h).abs() < 1e-15);
        assert!((loss_u2u(&b, &a).unwrap() - loss_u2u(&a, &b).unwrap()).abs() < 1e-15);

        assert_eq!(loss_u2c(&a, &b, &b, &a).unwrap(), 0.0);
        // P_tt = a, P_mm = a, P_tm = b, P_mt = b
        let expected = (kl([0.5, 0.5], [0.25, 0.75]) + kl([0.25, 0.75], [0.5, 0.5])) / 2.0 * 2.0;
        assert!((loss_u2c(&a, &a, &b, &b).unwrap() - expected).abs() < 1e-15);
        // asymmetry: uni and cross swapped
        let u = array![[0.5, 0.5], [0.5, 0.5]];
        let c = array![[0.25, 0.75], [0.25, 0.75]];
        assert_ne!(loss_u2c(&u, &u, &c, &c).unwrap(), loss_u2c(&c, &c, &u, &u).unwrap());
        assert!(loss_u2u(&a, &array![[1.0]]).is_err());
    }

    #[test]
    fn tape_distributions_agree_with_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xt = crate::nn::gaussian(3, 4, 1.0, &mut rng);
        let xm = crate::nn::gaussian(3, 4, 1.0, &mut rng);
        let tape = Tape::new();
        let d = SimilarityDistributions::new(tape.constant(xt.clone()), tape.constant(xm.clone()));
        let ptt = similarity_distribution(&xt, &xt).unwrap();
        let pmm = similarity_distribution(&xm, &xm).unwrap();
        let ptm = similarity_distribution(&xt, &xm).unwrap();
        let pmt = similarity_distribution(&xm, &xt).unwrap();
        let u2u = d.t2m().scalar() + d.m2t().scalar();
        let u2c = d.to_m().scalar() + d.to_t().scalar();
        assert!((u2u - loss_u2u(&ptt, &pmm).unwrap()).abs() < 1e-12);
        assert!((u2c - loss_u2c(&ptt, &pmm, &ptm, &pmt).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, 2e-4, 1.0, 1.0).total, 0.0);
        assert!((total_loss(0.0, 5.0, 0.0, 0.0, 2e-4, 1.0, 1.0).total - 1e-3).abs() < 1e-15);
        assert_eq!(total_loss(1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0).total, 4.0);
    }

    #[test]
    fn to_row_shape() {
        assert_eq!(to_row(&Array1::from(vec![1.0, 2.0])).dim(), (1, 2));
    }
}
