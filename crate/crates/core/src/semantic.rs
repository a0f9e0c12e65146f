//! Modality encoders and latent semantic reasoning with shared knowledge slots.
//!
//! Feature maps are `[B, L, H]`. The slot matrices `K_i` are `[H, H]` and act
//! on the channel axis: `K_o = Σ_i σ(X·K_i) ⊙ X`.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{dropout, BatchNorm, LayerNorm, Linear, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

/// Two linear layers, each followed by batch norm, ReLU and dropout.
#[derive(Debug, Clone, Copy)]
pub struct Encoder {
    pub f1: Linear,
    pub bn1: BatchNorm,
    pub f2: Linear,
    pub bn2: BatchNorm,
    pub dropout: f64,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        h_in: usize,
        h_hid: usize,
        h_emb: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            f1: Linear::new(store, &format!("{name}.f1"), h_in, h_hid, rng),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), h_hid),
            f2: Linear::new(store, &format!("{name}.f2"), h_hid, h_emb, rng),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), h_emb),
            dropout,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let mut h = x;
        for (f, bn) in [(self.f1, self.bn1), (self.f2, self.bn2)] {
            h = f.forward(s, h)?;
            h = bn.forward(s, h)?;
            h = s.tape.relu(h)?;
            h = dropout(s, h, self.dropout)?;
        }
        Ok(h)
    }
}

/// `K_o = Σ_i σ(X·K_i) ⊙ X`.
pub fn lkc_combine(tape: &mut Tape, slots: &[Var], x: Var) -> Result<Var> {
    if slots.is_empty() {
        return Err(Error::Empty("lkc_combine"));
    }
    let mut acc: Option<Var> = None;
    for &k in slots {
        let xk = tape.matmul(x, k)?;
        let g = tape.sigmoid(xk)?;
        let term = tape.mul(g, x)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.unwrap())
}

/// `P = relu(K_o·W_o + b_o)`.
pub fn lkc_gate(s: &mut Session, k_o: Var, w_o: &Linear) -> Result<Var> {
    let y = w_o.forward(s, k_o)?;
    s.tape.relu(y)
}

/// `K_t = α·mean_b((P_aᵀK_oa + P_vᵀK_ov)/L) + (1−α)·K_{t−1}`.
///
/// Operands are `[B, L, H]`; `k_prev` is `[H, H]`.
pub fn slots_update(
    tape: &mut Tape,
    alpha: Var,
    p_a: Var,
    k_oa: Var,
    p_v: Var,
    k_ov: Var,
    k_prev: Var,
) -> Result<Var> {
    let l = tape.shape(p_a)[1] as f64;
    let mut cross = |p: Var, k: Var| -> Result<Var> {
        let pt = tape.transpose(p)?;
        tape.matmul(pt, k)
    };
    let ma = cross(p_a, k_oa)?;
    let mv = cross(p_v, k_ov)?;
    let m = tape.add(ma, mv)?;
    let m = tape.mean_axis(m, 0)?;
    let hw = tape.shape(k_prev).to_vec();
    let m = tape.reshape(m, &hw)?;
    let m = tape.mul_scalar(m, 1.0 / l)?;
    let fresh = tape.mul(m, alpha)?;
    let neg = tape.neg(alpha)?;
    let keep = tape.add_scalar(neg, 1.0)?;
    let carried = tape.mul(k_prev, keep)?;
    tape.add(fresh, carried)
}

/// Single-head self-attention followed by a residual MLP on its output:
/// `R = MLP(LN(SA)) + SA`.
#[derive(Debug, Clone, Copy)]
pub struct LsrBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub ln: LayerNorm,
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub width: usize,
}

pub struct LsrOutput {
    pub r: Var,
    pub attention: Var,
    pub sa: Var,
}

impl LsrBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, rng),
            ln: LayerNorm::new(store, &format!("{name}.ln"), width),
            mlp1: Linear::new(store, &format!("{name}.mlp1"), width, width, rng),
            mlp2: Linear::new(store, &format!("{name}.mlp2"), width, width, rng),
            width,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<LsrOutput> {
        let q = self.q.forward(s, x)?;
        let k = self.k.forward(s, x)?;
        let v = self.v.forward(s, x)?;
        let (sa, attention) = attend(&mut s.tape, q, k, v)?;
        let h = self.ln.forward(s, sa)?;
        let h = self.mlp1.forward(s, h)?;
        let h = s.tape.relu(h)?;
        let h = self.mlp2.forward(s, h)?;
        let r = s.tape.add(h, sa)?;
        Ok(LsrOutput { r, attention, sa })
    }
}

/// `softmax(QKᵀ/√d)·V` over the last two axes; returns `(output, weights)`.
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d = *tape.shape(q).last().unwrap() as f64;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.mul_scalar(scores, 1.0 / d.sqrt())?;
    let axis = tape.shape(scores).len() - 1;
    let w = tape.softmax(scores, axis)?;
    let out = tape.matmul(w, v)?;
    Ok((out, w))
}

/// Slot matrices shared by both modalities, the gate `W_o`, the mixing rate
/// `α` and the carried combination `K_t` (a buffer).
#[derive(Debug, Clone)]
pub struct KnowledgeSlots {
    pub slots: Vec<ParamId>,
    pub w_o: Linear,
    pub alpha: ParamId,
    pub combined: ParamId,
    pub width: usize,
}

impl KnowledgeSlots {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        count: usize,
        width: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (width as f64).sqrt();
        let slots: Vec<ParamId> = (0..count)
            .map(|i| store.add(&format!("{name}.slot{i}"), Tensor::uniform(&[width, width], bound, rng)))
            .collect();
        let w_o = Linear::new(store, &format!("{name}.w_o"), width, width, rng);
        let alpha = store.add(&format!("{name}.alpha"), Tensor::scalar(alpha));
        let combined = store.add_buffer(&format!("{name}.combined"), Tensor::zeros(&[width, width]));
        let me = Self {
            slots,
            w_o,
            alpha,
            combined,
            width,
        };
        me.reset(store);
        me
    }

    /// Sets `K_t` to the mean of the slot matrices.
    pub fn reset(&self, store: &mut ParamStore) {
        let mut mean = Tensor::zeros(&[self.width, self.width]);
        for &id in &self.slots {
            for (m, v) in mean.data_mut().iter_mut().zip(store.get(id).data()) {
                *m += v;
            }
        }
        let n = self.slots.len() as f64;
        let mean = mean.map(|v| v / n);
        *store.get_mut(self.combined) = mean;
    }
}

/// Encoded features of both modalities in, semantic representations out.
#[derive(Debug, Clone)]
pub struct SemanticReasoner {
    pub slots: KnowledgeSlots,
    pub lsr_a: LsrBlock,
    pub lsr_v: LsrBlock,
    pub use_lkc: bool,
}

impl SemanticReasoner {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        slot_count: usize,
        alpha: f64,
        use_lkc: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            slots: KnowledgeSlots::new(store, &format!("{name}.lkc"), slot_count, width, alpha, rng),
            lsr_a: LsrBlock::new(store, &format!("{name}.lsr_a"), width, rng),
            lsr_v: LsrBlock::new(store, &format!("{name}.lsr_v"), width, rng),
            use_lkc,
        }
    }

    /// In train mode `K_t` is recomputed from this batch (with the carried
    /// value detached) and written back; in eval mode the carried value is
    /// used as is.
    pub fn forward(&self, s: &mut Session, a: Var, v: Var) -> Result<(Var, Var)> {
        let (xa, xv) = if self.use_lkc {
            let slots: Vec<Var> = self.slots.slots.iter().map(|&id| s.p(id)).collect();
            let k_oa = lkc_combine(&mut s.tape, &slots, a)?;
            let k_ov = lkc_combine(&mut s.tape, &slots, v)?;
            let k_t = if s.train {
                let p_a = lkc_gate(s, k_oa, &self.slots.w_o)?;
                let p_v = lkc_gate(s, k_ov, &self.slots.w_o)?;
                let alpha = s.p(self.slots.alpha);
                let prev = s.store.get(self.slots.combined).clone();
                let prev = s.constant(prev);
                let k_t = slots_update(&mut s.tape, alpha, p_a, k_oa, p_v, k_ov, prev)?;
                let value = s.tape.value(k_t).clone();
                *s.store.get_mut(self.slots.combined) = value;
                k_t
            } else {
                let prev = s.store.get(self.slots.combined).clone();
                s.constant(prev)
            };
            let mut inject = |k_o: Var| -> Result<Var> {
                let mixed = s.tape.matmul(k_o, k_t)?;
                s.tape.add(k_o, mixed)
            };
            (inject(k_oa)?, inject(k_ov)?)
        } else {
            (a, v)
        };
        let ra = self.lsr_a.forward(s, xa)?.r;
        let rv = self.lsr_v.forward(s, xv)?.r;
        Ok((ra, rv))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_slot_gates_at_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[2, 3, 4], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let k = tape.constant(Tensor::zeros(&[4, 4]));
        let out = lkc_combine(&mut tape, &[k], xv).unwrap();
        assert!(tape.value(out).max_abs_diff(&x.map(|v| 0.5 * v)) < 1e-15);
    }

    #[test]
    fn alpha_zero_freezes_combined() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prev = Tensor::randn(&[4, 4], &mut rng);
        let mut tape = Tape::new();
        let ops: Vec<Var> = (0..4)
            .map(|_| tape.constant(Tensor::randn(&[2, 3, 4], &mut rng)))
            .collect();
        let alpha = tape.constant(Tensor::scalar(0.0));
        let kp = tape.constant(prev.clone());
        let k = slots_update(&mut tape, alpha, ops[0], ops[1], ops[2], ops[3], kp).unwrap();
        assert_eq!(tape.value(k), &prev);
    }
}
