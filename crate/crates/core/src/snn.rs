//! Convolutional leaky integrate-and-fire blocks with global-local pooling,
//! time-step-factor aggregation and adaptive thresholds.
//!
//! Layout: a block sees its input for all `T` steps at once as
//! `[T·B, L, H]` (sequence axis `L`, channels `H`), runs convolution and
//! batch normalization over the whole stack, then integrates the membrane
//! recurrence step by step. Thresholds are tracked per sample.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Surrogate, Tape, Var};
use crate::config::{ModelConfig, ThresholdMode, TsfMode};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv1d, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

pub const BLOCKS: usize = 3;
pub const KERNEL: usize = 3;

/// Floor of the normalized spike statistic so that `N·ln N` stays finite.
const INFO_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    pub tau_m: f64,
    pub resistance: f64,
    pub v_rest: f64,
    pub v_th_init: f64,
    pub dt: f64,
}

impl LifParams {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            tau_m: cfg.tau_m,
            resistance: cfg.resistance,
            v_rest: cfg.v_rest,
            v_th_init: cfg.v_th_init,
            dt: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_m > 0.0) {
            return Err(Error::Config(format!("tau_m = {} must be positive", self.tau_m)));
        }
        if !(self.v_th_init > self.v_rest) {
            return Err(Error::Config("v_th_init must exceed v_rest".into()));
        }
        Ok(())
    }
}

/// Result of one membrane update.
#[derive(Debug, Clone, Copy)]
pub struct LifStep {
    pub spikes: Var,
    /// Potential after integration, before reset.
    pub v_pre: Var,
    /// Potential after reset.
    pub v_next: Var,
}

/// One Euler step `v ← v + (dt/τ)(−v + R·I)`, spike where `v ≥ v_th`,
/// reset spiking positions to `v_rest`. `v_th` has one entry per index of
/// the leading axis (or a single shared entry). The reset path uses the
/// detached spike mask.
pub fn lif_step(
    tape: &mut Tape,
    v: Var,
    current: Var,
    v_th: &[f64],
    p: &LifParams,
    surrogate: Surrogate,
) -> Result<LifStep> {
    if tape.shape(v) != tape.shape(current) {
        return Err(Error::shape("lif_step", tape.shape(v), tape.shape(current)));
    }
    let k = p.dt / p.tau_m;
    let leak = tape.mul_scalar(v, 1.0 - k)?;
    let drive = tape.mul_scalar(current, k * p.resistance)?;
    let v_pre = tape.add(leak, drive)?;
    let spikes = tape.spike(v_pre, v_th, surrogate)?;
    let mask = tape.detach(spikes);
    let keep = tape.value(mask).map(|s| 1.0 - s);
    let keep = tape.constant(keep);
    let kept = tape.mul(v_pre, keep)?;
    let v_next = if p.v_rest == 0.0 {
        kept
    } else {
        let rest = tape.mul_scalar(mask, p.v_rest)?;
        tape.add(kept, rest)?
    };
    Ok(LifStep {
        spikes,
        v_pre,
        v_next,
    })
}

/// Membrane state of one layer outside any autodiff context.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeState {
    pub v: Tensor,
    pub v_th: Vec<f64>,
    pub spikes: Vec<Tensor>,
    pub t: usize,
}

impl SpikeState {
    pub fn new(shape: &[usize], p: &LifParams) -> Self {
        Self {
            v: Tensor::full(shape, p.v_rest),
            v_th: vec![p.v_th_init],
            spikes: Vec::new(),
            t: 0,
        }
    }

    /// Advances one step and returns the emitted spikes.
    pub fn step(&mut self, current: &Tensor, p: &LifParams) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.constant(self.v.clone());
        let i = tape.constant(current.clone());
        let out = lif_step(&mut tape, v, i, &self.v_th, p, Surrogate::Zero)?;
        let spikes = tape.value(out.spikes).clone();
        self.v = tape.value(out.v_next).clone();
        self.spikes.push(spikes.clone());
        self.t += 1;
        Ok(spikes)
    }
}

/// Global-local pooling along `axis`:
/// `P_all = ½(P_max+P_avg) + β·P_max + (1−β)·P_avg` (kept dimension) and
/// the gated current `σ(P_all ⊙ I + I)`. Returns `(gated, P_all)`.
pub fn glp(tape: &mut Tape, current: Var, beta: Var, axis: usize) -> Result<(Var, Var)> {
    if tape.value(beta).numel() != 1 {
        return Err(Error::shape("glp", &[1], tape.shape(beta)));
    }
    let p_max = tape.max_axis(current, axis)?;
    let p_avg = tape.mean_axis(current, axis)?;
    // ½(M+A) + βM + (1−β)A = 0.5M + 1.5A + β(M−A)
    let m = tape.mul_scalar(p_max, 0.5)?;
    let a = tape.mul_scalar(p_avg, 1.5)?;
    let diff = tape.sub(p_max, p_avg)?;
    let bd = tape.mul(diff, beta)?;
    let ma = tape.add(m, a)?;
    let p_all = tape.add(ma, bd)?;
    let n = tape.shape(current)[axis];
    let p_full = tape.expand(p_all, axis, n)?;
    let gate = tape.mul(p_full, current)?;
    let pre = tape.add(gate, current)?;
    let out = tape.sigmoid(pre)?;
    Ok((out, p_all))
}

/// Aggregates `currents: [T, …]` over the leading time axis.
pub fn tsf_aggregate(tape: &mut Tape, currents: Var, mode: TsfMode) -> Result<Var> {
    let shape = tape.shape(currents).to_vec();
    let t = shape[0];
    let rest: Vec<usize> = shape[1..].to_vec();
    let weighted = match mode {
        TsfMode::Uniform => tape.mul_scalar(currents, 1.0 / t as f64)?,
        TsfMode::SoftmaxWeight => {
            let w = tape.softmax(currents, 0)?;
            tape.mul(w, currents)?
        }
        TsfMode::MaxWeight => {
            let w = tape.softmax(currents, 0)?;
            let wmax = tape.max_axis(w, 0)?;
            let w = tape.expand(wmax, 0, t)?;
            tape.mul(w, currents)?
        }
    };
    let total = tape.sum_axis(weighted, 0)?;
    tape.reshape(total, &rest)
}

/// Min-max normalizes `values` into `(0, 1]` and averages; a constant input
/// maps to 1.
pub fn normalized_information(values: &[f64]) -> f64 {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if !(hi > lo) {
        return 1.0;
    }
    let mean = values.iter().map(|v| (v - lo) / (hi - lo)).sum::<f64>() / values.len() as f64;
    INFO_FLOOR + (1.0 - INFO_FLOOR) * mean
}

/// `clamp((σ(mean P_all) + N·ln N)·v_th, min, max)`.
pub fn update_threshold(v_th: f64, p_all_mean: f64, information: f64, min: f64, max: f64) -> f64 {
    let factor = sigmoid(p_all_mean) + information * information.ln();
    (factor * v_th).clamp(min, max)
}

/// Per-(layer, step) spike statistics and invariant audit.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepStats {
    pub layer: usize,
    pub step: usize,
    pub spikes: usize,
    pub neurons: usize,
    pub v_th_min: f64,
    pub v_th_max: f64,
    /// Spike values outside {0, 1}.
    pub binarity_violations: usize,
    /// Spiking positions whose post-reset potential is not `v_rest`, or
    /// whose pre-reset potential was below threshold; and silent positions
    /// at or above threshold.
    pub reset_violations: usize,
    /// Thresholds outside the clamp interval.
    pub threshold_violations: usize,
}

impl StepStats {
    pub fn violations(&self) -> usize {
        self.binarity_violations + self.reset_violations + self.threshold_violations
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SnnBlock {
    pub conv: Conv1d,
    pub bn: BatchNorm,
    pub beta: ParamId,
}

/// Three conv-LIF blocks for one modality.
#[derive(Debug, Clone)]
pub struct SpikingEncoder {
    pub blocks: Vec<SnnBlock>,
    pub width: usize,
}

pub struct SnnOutput {
    /// Time-aggregated final-block currents, `[B, L, H]`.
    pub out: Var,
    pub stats: Vec<StepStats>,
}

impl SpikingEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        let blocks = (0..BLOCKS)
            .map(|l| SnnBlock {
                conv: Conv1d::new(store, &format!("{name}.block{l}.conv"), KERNEL, width, width, rng),
                bn: BatchNorm::new(store, &format!("{name}.block{l}.bn"), width),
                beta: store.add(&format!("{name}.block{l}.beta"), Tensor::scalar(0.5)),
            })
            .collect();
        Self { blocks, width }
    }

    /// Runs `T` steps over `x: [B, L, H]`, presenting the same input at every
    /// step.
    pub fn forward(&self, s: &mut Session, x: Var, cfg: &ModelConfig) -> Result<SnnOutput> {
        let shape = s.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.width {
            return Err(Error::shape("snn_forward", &shape, &[0, 0, self.width]));
        }
        let (b, l, h) = (shape[0], shape[1], shape[2]);
        let t_steps = cfg.time_steps;
        let p = LifParams::from_config(cfg);
        let surrogate = cfg.surrogate();
        let mut stats = Vec::with_capacity(BLOCKS * t_steps);
        let mut spikes_prev: Option<Var> = None;
        let mut final_currents = None;

        for (li, block) in self.blocks.iter().enumerate() {
            // [T, B, L, H] currents for this block.
            let currents = match spikes_prev {
                None => {
                    // A static input gives identical per-step currents.
                    let c = block.conv.forward(s, x)?;
                    let c = block.bn.forward(s, c)?;
                    let copies = vec![c; t_steps];
                    s.tape.stack(&copies)?
                }
                Some(prev) => {
                    let flat = s.tape.reshape(prev, &[t_steps * b, l, h])?;
                    let c = block.conv.forward(s, flat)?;
                    let c = block.bn.forward(s, c)?;
                    s.tape.reshape(c, &[t_steps, b, l, h])?
                }
            };
            let (gated, p_all_means) = if cfg.glp {
                let beta = s.p(block.beta);
                let (gated, p_all) = glp(&mut s.tape, currents, beta, 2)?;
                (gated, row_means(s.tape.value(p_all), t_steps * b))
            } else {
                let pooled = pooled_stats(s.tape.value(currents), t_steps * b, l, h, s.p_value(block.beta));
                (currents, pooled)
            };

            let mut v_th = vec![
                match cfg.threshold_mode {
                    ThresholdMode::Dynamic => p.v_th_init,
                    ThresholdMode::Fixed(v) => v,
                };
                b
            ];
            let mut v = s.constant(Tensor::full(&[b, l, h], p.v_rest));
            let mut step_spikes = Vec::with_capacity(t_steps);
            for t in 0..t_steps {
                let cur = s.tape.index_select(gated, &[t])?;
                let cur = s.tape.reshape(cur, &[b, l, h])?;
                let out = lif_step(&mut s.tape, v, cur, &v_th, &p, surrogate)?;
                stats.push(audit(
                    &s.tape,
                    &out,
                    &v_th,
                    &p,
                    li,
                    t,
                    (cfg.v_th_min, cfg.v_th_max),
                ));
                if cfg.threshold_mode == ThresholdMode::Dynamic {
                    let sp = s.tape.value(out.spikes).data();
                    let per = l * h;
                    for (bi, th) in v_th.iter_mut().enumerate() {
                        let info = normalized_information(&sp[bi * per..(bi + 1) * per]);
                        *th = update_threshold(
                            *th,
                            p_all_means[t * b + bi],
                            info,
                            cfg.v_th_min,
                            cfg.v_th_max,
                        );
                    }
                }
                step_spikes.push(out.spikes);
                v = out.v_next;
            }
            spikes_prev = Some(s.tape.stack(&step_spikes)?);
            if li == BLOCKS - 1 {
                final_currents = Some(currents);
            }
        }
        let out = tsf_aggregate(&mut s.tape, final_currents.expect("at least one block"), cfg.tsf_mode)?;
        Ok(SnnOutput { out, stats })
    }
}

/// Mean over each of `rows` equal chunks.
fn row_means(t: &Tensor, rows: usize) -> Vec<f64> {
    let w = t.numel() / rows;
    t.data().chunks(w).map(|c| c.iter().sum::<f64>() / w as f64).collect()
}

/// `mean(P_all)` per `(t, b)` computed from plain values, for runs without
/// the pooling gate.
fn pooled_stats(cur: &Tensor, rows: usize, l: usize, h: usize, beta: f64) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            let blk = &cur.data()[r * l * h..(r + 1) * l * h];
            let mut total = 0.0;
            for c in 0..h {
                let col = (0..l).map(|i| blk[i * h + c]);
                let max = col.clone().fold(f64::NEG_INFINITY, f64::max);
                let avg = col.sum::<f64>() / l as f64;
                total += 0.5 * (max + avg) + beta * max + (1.0 - beta) * avg;
            }
            total / h as f64
        })
        .collect()
}

fn audit(
    tape: &Tape,
    out: &LifStep,
    v_th: &[f64],
    p: &LifParams,
    layer: usize,
    step: usize,
    (lo, hi): (f64, f64),
) -> StepStats {
    let sp = tape.value(out.spikes).data();
    let pre = tape.value(out.v_pre).data();
    let post = tape.value(out.v_next).data();
    let per = sp.len() / v_th.len();
    let mut st = StepStats {
        layer,
        step,
        neurons: sp.len(),
        v_th_min: v_th.iter().copied().fold(f64::INFINITY, f64::min),
        v_th_max: v_th.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ..Default::default()
    };
    for k in 0..sp.len() {
        let th = v_th[k / per];
        match sp[k] {
            x if x == 1.0 => {
                st.spikes += 1;
                if post[k] != p.v_rest || pre[k] < th {
                    st.reset_violations += 1;
                }
            }
            x if x == 0.0 => {
                if pre[k] >= th {
                    st.reset_violations += 1;
                }
            }
            _ => st.binarity_violations += 1,
        }
    }
    st.threshold_violations = v_th.iter().filter(|&&t| !(lo..=hi).contains(&t)).count();
    st
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(tau: f64) -> LifParams {
        LifParams {
            tau_m: tau,
            resistance: 1.0,
            v_rest: 0.0,
            v_th_init: 1.0,
            dt: 1.0,
        }
    }

    #[test]
    fn quiescent_without_input() {
        let p = params(2.0);
        let mut st = SpikeState::new(&[3], &p);
        for _ in 0..5 {
            let s = st.step(&Tensor::zeros(&[3]), &p).unwrap();
            assert_eq!(s.sum(), 0.0);
        }
        assert_eq!(st.v, Tensor::zeros(&[3]));
        assert_eq!(st.t, 5);
    }

    #[test]
    fn constant_drive_fires_on_first_step() {
        let p = params(1.0);
        let mut st = SpikeState::new(&[1], &p);
        let s = st.step(&Tensor::full(&[1], 2.0), &p).unwrap();
        assert_eq!(s.item(), 1.0);
        assert_eq!(st.v.item(), 0.0);
    }

    #[test]
    fn unreachable_threshold_never_fires() {
        let p = params(2.0);
        let mut st = SpikeState::new(&[4], &p);
        st.v_th = vec![1e300];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..8 {
            let i = Tensor::randn(&[4], &mut rng).map(|x| 100.0 * x);
            assert_eq!(st.step(&i, &p).unwrap().sum(), 0.0);
        }
    }

    #[test]
    fn lif_params_validate() {
        assert!(params(0.0).validate().is_err());
        let mut p = params(1.0);
        p.v_th_init = p.v_rest;
        assert!(p.validate().is_err());
    }

    #[test]
    fn threshold_update_cases() {
        // N = 1: the entropy term vanishes.
        assert!((update_threshold(2.0, 0.0, 1.0, 0.05, 10.0) - 1.0).abs() < 1e-15);
        let mut th = 1.0;
        for _ in 0..20 {
            th = update_threshold(th, 0.0, 1.0, 0.05, 10.0);
        }
        assert_eq!(th, 0.05);
        assert_eq!(update_threshold(9.0, 50.0, 1.0, 0.05, 10.0), 9.0);
        assert_eq!(update_threshold(1.0, -50.0, 0.3, 0.05, 10.0), 0.05);
    }

    #[test]
    fn information_of_constant_and_binary() {
        assert_eq!(normalized_information(&[0.0, 0.0, 0.0]), 1.0);
        let n = normalized_information(&[0.0, 1.0, 1.0, 0.0]);
        assert!((n - (INFO_FLOOR + (1.0 - INFO_FLOOR) * 0.5)).abs() < 1e-15);
    }
}
