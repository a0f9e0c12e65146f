//! Training objectives in the joint embedding space.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::config::{Mining, ModelConfig, TripletMode};
use crate::error::{Error, Result};

/// Added under the square root of the printed triplet form.
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub gamma: f64,
    pub w_triplet: f64,
    pub w_proj_recon: f64,
    pub triplet_mode: TripletMode,
    pub mining: Mining,
    pub use_projection: bool,
    pub use_reconstruction: bool,
}

impl LossConfig {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            gamma: cfg.gamma,
            w_triplet: cfg.w_triplet,
            w_proj_recon: cfg.w_proj_recon,
            triplet_mode: cfg.triplet_mode,
            mining: cfg.mining,
            use_projection: cfg.use_projection_loss,
            use_reconstruction: cfg.use_reconstruction_loss,
        }
    }
}

/// Component values of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub triplet: f64,
    pub projection: f64,
    pub reconstruction: f64,
    pub total: f64,
}

/// Squared Euclidean distance between matching rows, `[N, 1]`.
pub fn row_sq_dist(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d2 = tape.square(d)?;
    let axis = tape.shape(d2).len() - 1;
    tape.sum_axis(d2, axis)
}

/// Plain-value squared distances between every row of `a` and every row of
/// `b` (`[N, D]` each), row-major `N × N`.
pub fn pairwise_sq_dist(a: &[f64], b: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = a[i * d..(i + 1) * d]
                .iter()
                .zip(&b[j * d..(j + 1) * d])
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
        }
    }
    out
}

/// For each anchor `i`, the index `j` with `labels[j] != labels[i]` that
/// minimizes `dist(j, i)`; ties go to the lowest index. `dist` is an
/// `N × N` table indexed `[candidate][anchor]`.
pub fn hardest_negatives(dist: &[f64], labels: &[usize]) -> Vec<Option<usize>> {
    let n = labels.len();
    (0..n).map(|i| closest(dist, labels, i, f64::NEG_INFINITY)).collect()
}

/// Like [`hardest_negatives`], restricted to candidates farther than
/// `positive[i]` whenever one exists.
pub fn semi_hard_negatives(dist: &[f64], labels: &[usize], positive: &[f64]) -> Vec<Option<usize>> {
    let n = labels.len();
    (0..n)
        .map(|i| closest(dist, labels, i, positive[i]).or_else(|| closest(dist, labels, i, f64::NEG_INFINITY)))
        .collect()
}

fn closest(dist: &[f64], labels: &[usize], i: usize, above: f64) -> Option<usize> {
    let n = labels.len();
    (0..n)
        .filter(|&j| labels[j] != labels[i] && dist[j * n + i] > above)
        .fold(None, |best: Option<usize>, j| match best {
            Some(b) if dist[b * n + i] <= dist[j * n + i] => Some(b),
            _ => Some(j),
        })
}

pub fn mine_negatives(dist: &[f64], labels: &[usize], positive: &[f64], mining: Mining) -> Vec<Option<usize>> {
    match mining {
        Mining::Hardest => hardest_negatives(dist, labels),
        Mining::SemiHard => semi_hard_negatives(dist, labels, positive),
    }
}

/// Margin loss with hardest in-batch negatives, averaged over anchors that
/// have at least one negative (zero when none do).
///
/// * `Resolved`: `[γ + d(a⁺, t⁺) − d(a⁻, t⁺)]₊ + [γ + d(t⁺, a⁺) − d(t⁻, a⁺)]₊`
///   with squared Euclidean `d`.
/// * `Printed`: `‖a⁺ − t⁺‖ + [γ − ‖a⁻ − t⁺‖]₊`.
pub fn triplet_loss(
    tape: &mut Tape,
    f_av: Var,
    f_tex: Var,
    labels: &[usize],
    gamma: f64,
    mode: TripletMode,
    mining: Mining,
) -> Result<Var> {
    let (sa, st) = (tape.shape(f_av).to_vec(), tape.shape(f_tex).to_vec());
    if sa.len() != 2 || sa != st || sa[0] != labels.len() {
        return Err(Error::shape("triplet_loss", &sa, &st));
    }
    let (n, d) = (sa[0], sa[1]);
    let av = tape.value(f_av).data().to_vec();
    let tx = tape.value(f_tex).data().to_vec();
    // dist_at[j][i] = d(av_j, tex_i), dist_ta[j][i] = d(tex_j, av_i)
    let dist_at = pairwise_sq_dist(&av, &tx, n, d);
    let dist_ta = pairwise_sq_dist(&tx, &av, n, d);
    let positive: Vec<f64> = (0..n).map(|i| dist_at[i * n + i]).collect();
    let neg_av = mine_negatives(&dist_at, labels, &positive, mining);
    let neg_tx = mine_negatives(&dist_ta, labels, &positive, mining);
    let anchors: Vec<usize> = (0..n).filter(|&i| neg_av[i].is_some()).collect();
    if anchors.is_empty() {
        let z = tape.constant(crate::tensor::Tensor::scalar(0.0));
        return Ok(z);
    }
    let pick = |v: &[Option<usize>]| -> Vec<usize> { anchors.iter().map(|&i| v[i].unwrap()).collect() };
    let a_pos = tape.index_select(f_av, &anchors)?;
    let t_pos = tape.index_select(f_tex, &anchors)?;
    let a_neg = tape.index_select(f_av, &pick(&neg_av))?;
    let d_pos = row_sq_dist(tape, a_pos, t_pos)?;
    let d_neg_a = row_sq_dist(tape, a_neg, t_pos)?;
    let per_anchor = match mode {
        TripletMode::Resolved => {
            let t_neg = tape.index_select(f_tex, &pick(&neg_tx))?;
            let d_neg_t = row_sq_dist(tape, t_neg, a_pos)?;
            let h1 = tape.sub(d_pos, d_neg_a)?;
            let h1 = tape.add_scalar(h1, gamma)?;
            let h1 = tape.relu(h1)?;
            let h2 = tape.sub(d_pos, d_neg_t)?;
            let h2 = tape.add_scalar(h2, gamma)?;
            let h2 = tape.relu(h2)?;
            tape.add(h1, h2)?
        }
        TripletMode::Printed => {
            let p = tape.add_scalar(d_pos, NORM_FLOOR)?;
            let p = tape.sqrt(p)?;
            let q = tape.add_scalar(d_neg_a, NORM_FLOOR)?;
            let q = tape.sqrt(q)?;
            let h = tape.neg(q)?;
            let h = tape.add_scalar(h, gamma)?;
            let h = tape.relu(h)?;
            tape.add(p, h)?
        }
    };
    tape.mean(per_anchor)
}

/// Mean squared error over all entries.
pub fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape("mse", tape.shape(a), tape.shape(b)));
    }
    let d = tape.sub(a, b)?;
    let d2 = tape.square(d)?;
    tape.mean(d2)
}

pub fn projection_loss(tape: &mut Tape, f_av: Var, f_tex: Var) -> Result<Var> {
    mse(tape, f_av, f_tex)
}

pub fn reconstruction_loss(tape: &mut Tape, f_rec: Var, f_tex: Var) -> Result<Var> {
    mse(tape, f_rec, f_tex)
}

/// `w_t·L_t + w_pr·(L_p + L_r)`, with disabled components dropped.
pub fn total_loss(tape: &mut Tape, lt: Var, lp: Var, lr: Var, cfg: &LossConfig) -> Result<Var> {
    let t = tape.mul_scalar(lt, cfg.w_triplet)?;
    let mut pr: Option<Var> = None;
    for (on, v) in [(cfg.use_projection, lp), (cfg.use_reconstruction, lr)] {
        if on {
            pr = Some(match pr {
                None => v,
                Some(acc) => tape.add(acc, v)?,
            });
        }
    }
    match pr {
        None => Ok(t),
        Some(pr) => {
            let pr = tape.mul_scalar(pr, cfg.w_proj_recon)?;
            tape.add(t, pr)
        }
    }
}

/// Scalar form of [`total_loss`].
pub fn total_value(lt: f64, lp: f64, lr: f64, cfg: &LossConfig) -> f64 {
    let pr = if cfg.use_projection { lp } else { 0.0 } + if cfg.use_reconstruction { lr } else { 0.0 };
    cfg.w_triplet * lt + cfg.w_proj_recon * pr
}
