//! Seeded training loop, zero-shot evaluation, checkpoints and metric logs.
//!
//! Randomness is drawn from ChaCha8 streams of the configured seed: stream
//! 0 initializes parameters, stream `e + 1` drives epoch `e` (shuffling and
//! dropout). Evaluation draws nothing.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{classify, mean_class_accuracy, EvalReport};
use crate::model::{Modality, ModalityStats, Stft};
use crate::nn::{Adam, ParamStore, Session};
use crate::objectives::LossParts;
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 256;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Spike activity of one `(modality, layer, step)` summed over an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeSummary {
    pub modality: Modality,
    pub layer: usize,
    pub step: usize,
    pub spikes: usize,
    pub neurons: usize,
    pub v_th_min: f64,
    pub v_th_max: f64,
    pub violations: usize,
}

impl SpikeSummary {
    pub fn rate(&self) -> f64 {
        self.spikes as f64 / self.neurons.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub batches: usize,
    /// Batch means.
    pub loss: LossParts,
    pub spikes: Vec<SpikeSummary>,
}

impl EpochRecord {
    pub fn total_spikes(&self) -> usize {
        self.spikes.iter().map(|s| s.spikes).sum()
    }

    pub fn violations(&self) -> usize {
        self.spikes.iter().map(|s| s.violations).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Number of completed epochs.
    pub epoch: usize,
    pub report: EvalReport,
}

/// One line of the JSONL metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricsLine {
    Epoch(EpochRecord),
    Eval(EvalRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub config_hash: String,
    /// Number of completed epochs.
    pub epoch: usize,
    pub params: ParamStore,
    pub optimizer: Adam,
    pub history: Vec<EpochRecord>,
    pub evals: Vec<EvalRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut ck: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        if ck.config.hash() != ck.config_hash {
            return Err(Error::Checkpoint(format!(
                "{}: config hash mismatch (stored {}, computed {})",
                path.display(),
                ck.config_hash,
                ck.config.hash()
            )));
        }
        ck.params.reindex();
        Ok(ck)
    }
}

pub struct Trainer {
    pub model: Stft,
    pub store: ParamStore,
    pub adam: Adam,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub evals: Vec<EvalRecord>,
}

impl Trainer {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = Stft::new(cfg, &mut store, &mut stream_rng(cfg.seed, 0))?;
        let adam = Adam::new(&store, cfg.lr);
        Ok(Self {
            model,
            store,
            adam,
            epoch: 0,
            history: Vec::new(),
            evals: Vec::new(),
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.model.cfg
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg().clone(),
            config_hash: self.cfg().hash(),
            epoch: self.epoch,
            params: self.store.clone(),
            optimizer: self.adam.clone(),
            history: self.history.clone(),
            evals: self.evals.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let mut t = Self::new(&ck.config)?;
        t.store.load_values(&ck.params)?;
        t.adam = ck.optimizer;
        t.epoch = ck.epoch;
        t.history = ck.history;
        t.evals = ck.evals;
        Ok(t)
    }

    /// One pass over the training split in a seeded random order. A final
    /// batch of one sample is dropped.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochRecord> {
        data.check_compatible(self.cfg())?;
        let epoch = self.epoch;
        let mut rng = stream_rng(self.cfg().seed, epoch as u64 + 1);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        self.model.begin_epoch(&mut self.store);

        let mut sums = LossParts::default();
        let mut spikes: BTreeMap<(Modality, usize, usize), SpikeSummary> = BTreeMap::new();
        let mut batches = 0;
        let bs = self.cfg().batch_size;
        for (bi, idx) in order.chunks(bs).filter(|c| c.len() >= 2).enumerate() {
            let (audio, visual, labels) = data.train.batch(idx);
            let text = gather_rows(&data.text, &labels);
            let mut s = Session::new(&mut self.store, true, &mut rng);
            let non_finite = |parts: LossParts| Error::NonFiniteLoss {
                epoch,
                batch: bi,
                triplet: parts.triplet,
                projection: parts.projection,
                reconstruction: parts.reconstruction,
            };
            let out = match self.model.loss(&mut s, &audio, &visual, &text, &labels) {
                Ok(o) => o,
                Err(Error::NonFinite(_)) => {
                    return Err(non_finite(LossParts {
                        triplet: f64::NAN,
                        projection: f64::NAN,
                        reconstruction: f64::NAN,
                        total: f64::NAN,
                    }))
                }
                Err(e) => return Err(e),
            };
            if !out.parts.total.is_finite() {
                return Err(non_finite(out.parts));
            }
            s.tape.backward(out.total)?;
            let grads = s.grads();
            drop(s);
            self.adam.update(&mut self.store, &grads);

            sums.triplet += out.parts.triplet;
            sums.projection += out.parts.projection;
            sums.reconstruction += out.parts.reconstruction;
            sums.total += out.parts.total;
            for ModalityStats { modality, stats } in out.spikes {
                let e = spikes
                    .entry((modality, stats.layer, stats.step))
                    .or_insert(SpikeSummary {
                        modality,
                        layer: stats.layer,
                        step: stats.step,
                        spikes: 0,
                        neurons: 0,
                        v_th_min: f64::INFINITY,
                        v_th_max: f64::NEG_INFINITY,
                        violations: 0,
                    });
                e.spikes += stats.spikes;
                e.neurons += stats.neurons;
                e.v_th_min = e.v_th_min.min(stats.v_th_min);
                e.v_th_max = e.v_th_max.max(stats.v_th_max);
                e.violations += stats.violations();
            }
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::Dataset("training split has fewer than two samples".into()));
        }
        let n = batches as f64;
        let rec = EpochRecord {
            epoch,
            batches,
            loss: LossParts {
                triplet: sums.triplet / n,
                projection: sums.projection / n,
                reconstruction: sums.reconstruction / n,
                total: sums.total / n,
            },
            spikes: spikes.into_values().collect(),
        };
        self.epoch += 1;
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Trains until `cfg.epochs` epochs are complete, evaluating every
    /// `eval_every` epochs (0: only at the end) and appending JSONL lines to
    /// `log` when given.
    pub fn fit(&mut self, data: &Dataset, eval_every: usize, mut log: Option<&mut dyn Write>) -> Result<()> {
        let total = self.cfg().epochs;
        while self.epoch < total {
            let rec = self.run_epoch(data)?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", serde_json::to_string(&MetricsLine::Epoch(rec))?)?;
            }
            let due = self.epoch == total || (eval_every > 0 && self.epoch % eval_every == 0);
            if due {
                let report = self.evaluate(data)?;
                let r = EvalRecord { epoch: self.epoch, report };
                self.evals.push(r);
                if let Some(w) = log.as_deref_mut() {
                    writeln!(w, "{}", serde_json::to_string(&MetricsLine::Eval(r))?)?;
                }
            }
        }
        Ok(())
    }

    /// Audio-visual embeddings `[N, h_out]` in inference mode.
    pub fn embed(&mut self, split: &Split) -> Result<Tensor> {
        let mut rng = stream_rng(self.cfg().seed, u64::MAX);
        let width = self.cfg().h_out;
        let mut data = Vec::with_capacity(split.len() * width);
        let idx: Vec<usize> = (0..split.len()).collect();
        for chunk in idx.chunks(EVAL_CHUNK) {
            let (audio, visual, _) = split.batch(chunk);
            let mut s = Session::new(&mut self.store, false, &mut rng);
            let out = self.model.forward_av(&mut s, &audio, &visual)?;
            data.extend_from_slice(s.tape.value(out.f_av).data());
        }
        Tensor::new(&[split.len(), width], data)
    }

    /// Projected class text embeddings `[C, h_out]` in inference mode.
    pub fn class_table(&mut self, text: &Tensor) -> Result<Tensor> {
        let mut rng = stream_rng(self.cfg().seed, u64::MAX);
        let mut s = Session::new(&mut self.store, false, &mut rng);
        let t = self.model.embed_text(&mut s, text)?;
        Ok(s.tape.value(t).clone())
    }

    /// Zero-shot accuracy over unseen test samples with unseen candidates,
    /// and generalized seen/unseen accuracy with every class as candidate.
    pub fn evaluate(&mut self, data: &Dataset) -> Result<EvalReport> {
        data.check_compatible(self.cfg())?;
        let emb = self.embed(&data.test)?;
        let table = self.class_table(&data.text)?;
        let labels = &data.test.labels;
        let all: Vec<usize> = (0..data.spec.classes).collect();
        let preds = classify(&emb, &table, &all)?;
        let split_acc = |classes: &[usize]| -> Result<f64> {
            let keep: Vec<usize> = (0..labels.len()).filter(|&i| classes.contains(&labels[i])).collect();
            let p: Vec<usize> = keep.iter().map(|&i| preds[i]).collect();
            let y: Vec<usize> = keep.iter().map(|&i| labels[i]).collect();
            mean_class_accuracy(&p, &y, classes)
        };
        let s_acc = split_acc(&data.seen)?;
        let u_acc = split_acc(&data.unseen)?;

        let keep: Vec<usize> = (0..labels.len()).filter(|&i| data.unseen.contains(&labels[i])).collect();
        let zsl_emb = gather_rows(&emb, &keep);
        let zsl_preds = classify(&zsl_emb, &table, &data.unseen)?;
        let y: Vec<usize> = keep.iter().map(|&i| labels[i]).collect();
        let zsl = mean_class_accuracy(&zsl_preds, &y, &data.unseen)?;
        Ok(EvalReport::new(s_acc, u_acc, zsl))
    }
}

/// Rows `idx` of a 2-D tensor.
pub fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let w = t.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
    }
    Tensor::from_parts(vec![idx.len(), w], data)
}

/// Finite-difference check of the full training loss of one batch with
/// respect to the stored entries `params`. Every evaluation starts from the
/// same stored state and the same dropout stream.
pub fn end_to_end_grad_check<R: rand::Rng + ?Sized>(
    trainer: &Trainer,
    data: &Dataset,
    batch: &[usize],
    params: &[crate::nn::ParamId],
    cfg: crate::gradcheck::GradCheckConfig,
    rng: &mut R,
) -> Result<crate::gradcheck::GradCheckReport> {
    let (audio, visual, labels) = data.train.batch(batch);
    let text = gather_rows(&data.text, &labels);
    let seed = trainer.cfg().seed;
    let run = |store: &mut ParamStore, grads: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut drop_rng = stream_rng(seed, 1);
        let mut s = Session::new(store, true, &mut drop_rng);
        let out = trainer.model.loss(&mut s, &audio, &visual, &text, &labels)?;
        let value = s.tape.value(out.total).item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        s.tape.backward(out.total)?;
        let all = s.grads();
        let pick = params
            .iter()
            .map(|id| {
                all.iter()
                    .find(|(g, _)| g == id)
                    .map(|(_, t)| t.clone())
                    .unwrap_or_else(|| Tensor::zeros(s.store.get(*id).shape()))
            })
            .collect();
        Ok((value, pick))
    };
    let mut base = trainer.store.clone();
    let inputs: Vec<Tensor> = params.iter().map(|&id| base.get(id).clone()).collect();
    let (_, analytic) = run(&mut base, true)?;
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut st = trainer.store.clone();
        for (&id, x) in params.iter().zip(xs) {
            st.set(id, x.clone())?;
        }
        Ok(run(&mut st, false)?.0)
    };
    crate::gradcheck::check_against(&analytic, &inputs, eval, cfg, rng)
}
