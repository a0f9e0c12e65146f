//! The full audio-visual model: encoders, semantic reasoning, spiking
//! temporal encoding, Tucker fusion, joint reasoning and projection heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::joint::{JointReasoner, ProjectionHead};
use crate::nn::{ParamStore, Session};
use crate::objectives::{
    projection_loss, reconstruction_loss, total_loss, triplet_loss, LossConfig, LossParts,
};
use crate::semantic::{Encoder, SemanticReasoner};
use crate::snn::{SpikingEncoder, StepStats};
use crate::tensor::Tensor;
use crate::tucker::{dense_param_count, TuckerFactors};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Visual,
}

/// Spike audit of one spiking block step for one modality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModalityStats {
    pub modality: Modality,
    pub stats: StepStats,
}

pub struct AvOutput {
    /// `[B, h_out]`.
    pub f_av: Var,
    pub spikes: Vec<ModalityStats>,
}

pub struct LossOutput {
    pub total: Var,
    pub parts: LossParts,
    pub spikes: Vec<ModalityStats>,
}

#[derive(Debug, Clone)]
pub struct Stft {
    pub cfg: ModelConfig,
    pub enc_a: Encoder,
    pub enc_v: Encoder,
    pub semantic: SemanticReasoner,
    pub snn_a: SpikingEncoder,
    pub snn_v: SpikingEncoder,
    pub fuse_a: TuckerFactors,
    pub fuse_v: TuckerFactors,
    pub joint: JointReasoner,
    pub pro_av: ProjectionHead,
    pub recon: ProjectionHead,
    pub pro_tex: ProjectionHead,
}

impl Stft {
    /// Registers every parameter in `store`, drawing initial values from `rng`
    /// in a fixed order.
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.h_emb;
        Ok(Self {
            cfg: cfg.clone(),
            enc_a: Encoder::new(store, "enc_a", cfg.h_in, cfg.h_hid, e, cfg.d_enc, rng),
            enc_v: Encoder::new(store, "enc_v", cfg.h_in, cfg.h_hid, e, cfg.d_enc, rng),
            semantic: SemanticReasoner::new(store, "semantic", e, cfg.slot_count, cfg.alpha_init, cfg.lkc, rng),
            snn_a: SpikingEncoder::new(store, "snn_a", e, rng),
            snn_v: SpikingEncoder::new(store, "snn_v", e, rng),
            fuse_a: TuckerFactors::new(store, "fuse_a", e, e, e, cfg.rank, rng)?,
            fuse_v: TuckerFactors::new(store, "fuse_v", e, e, e, cfg.rank, rng)?,
            joint: JointReasoner::new(store, "joint", cfg.joint_depth, cfg.heads, cfg.head_dim, cfg.joint_mode, rng),
            pro_av: ProjectionHead::new_zero_out(store, "pro_av", e, cfg.h_hid, cfg.h_out, cfg.d_proj, rng),
            recon: ProjectionHead::new(store, "recon", cfg.h_out, cfg.h_hid, cfg.h_out, cfg.d_proj, rng),
            pro_tex: ProjectionHead::new(store, "pro_tex", cfg.text_dim, cfg.h_hid, cfg.h_out, cfg.d_text, rng),
        })
    }

    /// Learnable scalars in both modalities' fusion factors.
    pub fn fusion_param_count(&self) -> usize {
        self.fuse_a.param_count() + self.fuse_v.param_count()
    }

    /// The same count for dense interaction tensors.
    pub fn dense_fusion_param_count(&self) -> usize {
        2 * dense_param_count(self.cfg.h_emb, self.cfg.h_emb, self.cfg.h_emb)
    }

    /// Starts a new pass over the data.
    pub fn begin_epoch(&self, store: &mut ParamStore) {
        self.semantic.slots.reset(store);
    }

    fn check_input(&self, x: &Tensor, len: usize) -> Result<()> {
        let s = x.shape();
        if s.len() != 3 || s[1] != len || s[2] != self.cfg.h_in {
            return Err(Error::shape("Stft::forward_av", s, &[0, len, self.cfg.h_in]));
        }
        Ok(())
    }

    /// `audio`, `visual`: `[B, L, h_in]`.
    pub fn forward_av(&self, s: &mut Session, audio: &Tensor, visual: &Tensor) -> Result<AvOutput> {
        self.check_input(audio, self.cfg.a_in)?;
        self.check_input(visual, self.cfg.v_in)?;
        if audio.shape()[0] != visual.shape()[0] {
            return Err(Error::shape("Stft::forward_av", audio.shape(), visual.shape()));
        }
        let xa = s.constant(audio.clone());
        let xv = s.constant(visual.clone());
        let xa = self.enc_a.forward(s, xa)?;
        let xv = self.enc_v.forward(s, xv)?;
        let (ra, rv) = self.semantic.forward(s, xa, xv)?;
        let sa = self.snn_a.forward(s, xa, &self.cfg)?;
        let sv = self.snn_v.forward(s, xv, &self.cfg)?;
        let ya = self.fuse_a.forward(s, ra, sa.out)?;
        let yv = self.fuse_v.forward(s, rv, sv.out)?;
        let z = self.joint.forward(s, ya, yv)?;
        let z = s.tape.mean_axis(z, 1)?;
        let z = s.tape.reshape(z, &[audio.shape()[0], self.cfg.h_emb])?;
        let f_av = self.pro_av.forward(s, z)?;
        let spikes = sa
            .stats
            .into_iter()
            .map(|stats| ModalityStats { modality: Modality::Audio, stats })
            .chain(sv.stats.into_iter().map(|stats| ModalityStats { modality: Modality::Visual, stats }))
            .collect();
        Ok(AvOutput { f_av, spikes })
    }

    /// `text`: `[N, text_dim]` → `[N, h_out]`.
    pub fn embed_text(&self, s: &mut Session, text: &Tensor) -> Result<Var> {
        if text.rank() != 2 || text.shape()[1] != self.cfg.text_dim {
            return Err(Error::shape("Stft::embed_text", text.shape(), &[0, self.cfg.text_dim]));
        }
        let t = s.constant(text.clone());
        self.pro_tex.forward(s, t)
    }

    /// Training objective for one batch; `text` holds each sample's class
    /// embedding.
    pub fn loss(
        &self,
        s: &mut Session,
        audio: &Tensor,
        visual: &Tensor,
        text: &Tensor,
        labels: &[usize],
    ) -> Result<LossOutput> {
        let av = self.forward_av(s, audio, visual)?;
        let f_tex = self.embed_text(s, text)?;
        let f_rec = self.recon.forward(s, av.f_av)?;
        let lc = LossConfig::from_config(&self.cfg);
        let lt = triplet_loss(&mut s.tape, av.f_av, f_tex, labels, lc.gamma, lc.triplet_mode, lc.mining)?;
        let lp = projection_loss(&mut s.tape, av.f_av, f_tex)?;
        let lr = reconstruction_loss(&mut s.tape, f_rec, f_tex)?;
        let total = total_loss(&mut s.tape, lt, lp, lr, &lc)?;
        let parts = LossParts {
            triplet: s.tape.value(lt).item(),
            projection: s.tape.value(lp).item(),
            reconstruction: s.tape.value(lr).item(),
            total: s.tape.value(total).item(),
        };
        Ok(LossOutput {
            total,
            parts,
            spikes: av.spikes,
        })
    }
}
