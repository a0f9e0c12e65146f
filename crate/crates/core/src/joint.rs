//! Cross-modal transformer with one weight set for both attention
//! directions, and the two-layer projection heads.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::config::JointMode;
use crate::error::{Error, Result};
use crate::nn::{dropout, LayerNorm, Linear, ParamStore, Session};
use crate::semantic::attend;
use crate::tensor::Tensor;

/// Multi-head attention projections.
#[derive(Debug, Clone, Copy)]
pub struct Mhca {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

pub struct AttentionOutput {
    pub out: Var,
    /// `[B·heads, L_q, L_kv]`.
    pub weights: Var,
}

/// `[B, L, H·D]` → `[B·H, L, D]`.
fn split_heads(tape: &mut Tape, x: Var, heads: usize, dim: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, l) = (s[0], s[1]);
    let x = tape.reshape(x, &[b, l, heads, dim])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b * heads, l, dim])
}

fn merge_heads(tape: &mut Tape, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (l, d) = (s[1], s[2]);
    let x = tape.reshape(x, &[batch, heads, l, d])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[batch, l, heads * d])
}

impl Mhca {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        heads: usize,
        head_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = heads * head_dim;
        Self {
            q: Linear::new(store, &format!("{name}.q"), w, w, rng),
            k: Linear::new(store, &format!("{name}.k"), w, w, rng),
            v: Linear::new(store, &format!("{name}.v"), w, w, rng),
            o: Linear::new(store, &format!("{name}.o"), w, w, rng),
            heads,
            head_dim,
        }
    }

    /// Queries from `q_src`, keys and values from `kv_src`; both `[B, L, H·D]`.
    pub fn forward(&self, s: &mut Session, q_src: Var, kv_src: Var) -> Result<AttentionOutput> {
        let (sq, skv) = (s.tape.shape(q_src).to_vec(), s.tape.shape(kv_src).to_vec());
        let w = self.heads * self.head_dim;
        if sq.len() != 3 || skv.len() != 3 || sq[0] != skv[0] || sq[2] != w || skv[2] != w {
            return Err(Error::shape("mhca", &sq, &skv));
        }
        let b = sq[0];
        let q = self.q.forward(s, q_src)?;
        let k = self.k.forward(s, kv_src)?;
        let v = self.v.forward(s, kv_src)?;
        let q = split_heads(&mut s.tape, q, self.heads, self.head_dim)?;
        let k = split_heads(&mut s.tape, k, self.heads, self.head_dim)?;
        let v = split_heads(&mut s.tape, v, self.heads, self.head_dim)?;
        let (o, weights) = attend(&mut s.tape, q, k, v)?;
        let o = merge_heads(&mut s.tape, o, b, self.heads)?;
        let out = self.o.forward(s, o)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// `Z = MLP(LN(Q)) + Q` over an attention output `Q`.
#[derive(Debug, Clone, Copy)]
pub struct JointBlock {
    pub attn: Mhca,
    pub ln: LayerNorm,
    pub mlp1: Linear,
    pub mlp2: Linear,
}

impl JointBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        heads: usize,
        head_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = heads * head_dim;
        Self {
            attn: Mhca::new(store, &format!("{name}.attn"), heads, head_dim, rng),
            ln: LayerNorm::new(store, &format!("{name}.ln"), w),
            mlp1: Linear::new(store, &format!("{name}.mlp1"), w, w, rng),
            mlp2: Linear::new(store, &format!("{name}.mlp2"), w, w, rng),
        }
    }

    /// Attention output `Q` for the configured direction(s).
    pub fn attention(&self, s: &mut Session, y_a: Var, y_v: Var, mode: JointMode) -> Result<Var> {
        let av = self.attn.forward(s, y_a, y_v)?.out;
        match mode {
            JointMode::AQueriesV => Ok(av),
            JointMode::AvgBidirectional => {
                let va = self.attn.forward(s, y_v, y_a)?.out;
                let sum = s.tape.add(av, va)?;
                s.tape.mul_scalar(sum, 0.5)
            }
        }
    }

    pub fn residual_mlp(&self, s: &mut Session, q: Var) -> Result<Var> {
        let h = self.ln.forward(s, q)?;
        let h = self.mlp1.forward(s, h)?;
        let h = s.tape.relu(h)?;
        let h = self.mlp2.forward(s, h)?;
        s.tape.add(h, q)
    }

    pub fn forward(&self, s: &mut Session, y_a: Var, y_v: Var, mode: JointMode) -> Result<Var> {
        let q = self.attention(s, y_a, y_v, mode)?;
        self.residual_mlp(s, q)
    }
}

/// The first block attends across modalities; any further blocks attend
/// within the joint representation.
#[derive(Debug, Clone)]
pub struct JointReasoner {
    pub blocks: Vec<JointBlock>,
    pub mode: JointMode,
}

impl JointReasoner {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        depth: usize,
        heads: usize,
        head_dim: usize,
        mode: JointMode,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| JointBlock::new(store, &format!("{name}.block{i}"), heads, head_dim, rng))
            .collect();
        Self { blocks, mode }
    }

    pub fn forward(&self, s: &mut Session, y_a: Var, y_v: Var) -> Result<Var> {
        let mut z = self.blocks[0].forward(s, y_a, y_v, self.mode)?;
        for blk in &self.blocks[1..] {
            let q = blk.attn.forward(s, z, z)?.out;
            z = blk.residual_mlp(s, q)?;
        }
        Ok(z)
    }
}

/// `f4(drop(relu(f3(z))))`.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionHead {
    pub f3: Linear,
    pub f4: Linear,
    pub dropout: f64,
}

impl ProjectionHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hid: usize,
        d_out: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            f3: Linear::new(store, &format!("{name}.f3"), d_in, d_hid, rng),
            f4: Linear::new(store, &format!("{name}.f4"), d_hid, d_out, rng),
            dropout,
        }
    }

    /// Same layout with the output layer starting at zero, so the head
    /// initially maps every input to the origin.
    pub fn new_zero_out<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hid: usize,
        d_out: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let head = Self::new(store, name, d_in, d_hid, d_out, dropout, rng);
        let shape = store.get(head.f4.w).shape().to_vec();
        *store.get_mut(head.f4.w) = Tensor::zeros(&shape);
        head
    }

    pub fn forward(&self, s: &mut Session, z: Var) -> Result<Var> {
        let h = self.f3.forward(s, z)?;
        let h = s.tape.relu(h)?;
        let h = dropout(s, h, self.dropout)?;
        self.f4.forward(s, h)
    }
}
