//! Named parameters, forward sessions, standard layers and the Adam optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var, NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Flat, insertion-ordered registry of model state keyed by module path.
/// Trainable entries receive gradients; buffers (running statistics,
/// carried slot state) do not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId(self.names.len() - 1)
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(name, value, false)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape("ParamStore::set", self.values[id.0].shape(), value.shape()));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.trainable[id.0])
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable_ids().map(|id| self.values[id.0].numel()).sum()
    }

    /// Trainable scalars whose name starts with `prefix`.
    pub fn num_trainable_under(&self, prefix: &str) -> usize {
        self.trainable_ids()
            .filter(|id| self.names[id.0].starts_with(prefix))
            .map(|id| self.values[id.0].numel())
            .sum()
    }

    /// Rebuilds the name index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
    }

    /// Copies every value from `other`, which must have the same layout.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint("parameter layout differs".into()));
        }
        for (mine, theirs) in self.values.iter_mut().zip(&other.values) {
            if mine.shape() != theirs.shape() {
                return Err(Error::Checkpoint("parameter shape differs".into()));
            }
            *mine = theirs.clone();
        }
        Ok(())
    }
}

/// One forward pass: a fresh tape, lazily materialized parameter leaves and
/// the random stream used by stochastic layers.
pub struct Session<'a> {
    pub tape: Tape,
    pub store: &'a mut ParamStore,
    pub train: bool,
    pub rng: &'a mut ChaCha8Rng,
    leaves: HashMap<ParamId, Var>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a mut ParamStore, train: bool, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            tape: Tape::new(),
            store,
            train,
            rng,
            leaves: HashMap::new(),
        }
    }

    /// Leaf for a stored value. Trainable entries track gradients; each
    /// entry is materialized once per session.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.get(&id) {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = self.tape.leaf(value, self.store.is_trainable(id));
        self.leaves.insert(id, v);
        v
    }

    /// Scalar value of a stored entry without recording it.
    pub fn p_value(&self, id: ParamId) -> f64 {
        self.store.get(id).item()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Gradients of every trainable entry that took part in the pass.
    pub fn grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .leaves
            .iter()
            .filter_map(|(&id, &v)| self.tape.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn check_last_dim(s: &Session, x: Var, expected: usize, op: &'static str) -> Result<()> {
    let shape = s.tape.shape(x);
    if shape.last() != Some(&expected) {
        return Err(Error::shape(op, shape, &[expected]));
    }
    Ok(())
}

/// `y = x·W + b` over the last axis; `W` is `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights uniform with unit-variance gain (`±√(3/fan_in)`), zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (3.0 / fan_in as f64).sqrt();
        let w = store.add(&format!("{name}.w"), Tensor::uniform(&[fan_in, fan_out], bound, rng));
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        check_last_dim(s, x, self.fan_in, "Linear")?;
        let shape = s.tape.shape(x).to_vec();
        let (w, b) = (s.p(self.w), s.p(self.b));
        let y = if shape.len() == 1 {
            let x2 = s.tape.reshape(x, &[1, self.fan_in])?;
            let y = s.tape.matmul(x2, w)?;
            s.tape.reshape(y, &[self.fan_out])?
        } else {
            s.tape.matmul(x, w)?
        };
        s.tape.add_bias(y, b)
    }
}

/// Batch normalization over every axis but the last.
#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gain: store.add(&format!("{name}.gain"), Tensor::ones(&[channels])),
            bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::ones(&[channels])),
            channels,
        }
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates (biased variance, momentum [`BN_MOMENTUM`]); eval
    /// mode uses the running estimates.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        check_last_dim(s, x, self.channels, "BatchNorm")?;
        let (g, b) = (s.p(self.gain), s.p(self.bias));
        if s.train {
            let (y, mean, var) = s.tape.batch_norm(x, g, b)?;
            for (id, batch) in [(self.running_mean, mean), (self.running_var, var)] {
                let run = s.store.get_mut(id);
                for (r, v) in run.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            }
            Ok(y)
        } else {
            let mean = s.store.get(self.running_mean).data().to_vec();
            let var = s.store.get(self.running_var).data();
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            let shift: Vec<f64> = mean.iter().zip(&inv).map(|(m, i)| -m * i).collect();
            let c = self.channels;
            let inv = s.constant(Tensor::from_parts(vec![c], inv));
            let shift = s.constant(Tensor::from_parts(vec![c], shift));
            let xn = s.tape.mul_channel(x, inv)?;
            let xn = s.tape.add_bias(xn, shift)?;
            let y = s.tape.mul_channel(xn, g)?;
            s.tape.add_bias(y, b)
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(&format!("{name}.gain"), Tensor::ones(&[width])),
            bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gain), s.p(self.bias));
        s.tape.layer_norm(x, g, b)
    }
}

/// Same-padded 1-D convolution along axis 1 of `[B, L, C_in]`, no bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub w: ParamId,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (3.0 / (kernel * c_in) as f64).sqrt();
        Self {
            w: store.add(&format!("{name}.w"), Tensor::uniform(&[kernel, c_in, c_out], bound, rng)),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.p(self.w);
        s.tape.conv1d(x, w)
    }
}

/// Inverted dropout: Bernoulli keep-mask scaled by `1/(1-p)` in train mode,
/// identity otherwise.
pub fn dropout(s: &mut Session, x: Var, p: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
    }
    if !s.train || p == 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask(s.tape.shape(x), p, s.rng);
    let m = s.constant(mask);
    s.tape.mul(x, m)
}

pub fn dropout_mask<R: Rng + ?Sized>(shape: &[usize], p: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - p);
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .ids()
            .map(|id| {
                if store.is_trainable(id) {
                    vec![0.0; store.get(id).numel()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Entries without a gradient are left untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(*id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
