//! Model and training hyperparameters, presets, and TOML layering.
//!
//! A configuration resolves in three layers: a named preset supplies every
//! field, a TOML file may override any subset, and explicit overrides (the
//! CLI flags) win over both.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Firing-threshold policy of the spiking blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ThresholdMode {
    /// Multiplicative per-step adaptation starting at `v_th_init`.
    Dynamic,
    /// Constant threshold.
    Fixed(f64),
}

impl FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "dynamic" {
            return Ok(Self::Dynamic);
        }
        let v = s
            .strip_prefix("fixed:")
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| {
                Error::Config(format!("threshold mode {s:?}: expected `dynamic` or `fixed:<value>`"))
            })?;
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::Config(format!("fixed threshold {v} must be positive")));
        }
        Ok(Self::Fixed(v))
    }
}

impl TryFrom<String> for ThresholdMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Dynamic => write!(f, "dynamic"),
            Self::Fixed(v) => write!(f, "fixed:{v}"),
        }
    }
}

impl From<ThresholdMode> for String {
    fn from(m: ThresholdMode) -> Self {
        m.to_string()
    }
}

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($(#[$vmeta:meta])* $variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $($(#[$vmeta])* #[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::Config(format!(
                        concat!(stringify!($name), " {:?}: expected one of {:?}"),
                        s,
                        [$($text),+]
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

string_enum! {
    /// Per-step weighting used to aggregate spiking-block currents over time.
    TsfMode {
        /// Each step weighted by its own softmax mass over time.
        SoftmaxWeight => "softmax_weight",
        /// Every step weighted by the largest softmax mass over time.
        MaxWeight => "max_weight",
        /// Plain time average.
        Uniform => "uniform",
    }
}

string_enum! {
    TripletMode {
        /// Bidirectional hinge on squared distances.
        Resolved => "resolved",
        /// `‖F⁺av − F⁺tex‖ + [γ − ‖F⁻av − F⁺tex‖]₊`.
        Printed => "printed",
    }
}

string_enum! {
    /// Choice of in-batch negative for each anchor.
    Mining {
        /// Closest sample of another class.
        Hardest => "hardest",
        /// Closest sample of another class that is farther than the
        /// positive; the hardest one when no such sample exists.
        SemiHard => "semi_hard",
    }
}

string_enum! {
    JointMode {
        /// Both attention directions with one weight set, averaged.
        AvgBidirectional => "avg_bidirectional",
        /// Audio queries attend to visual keys only.
        AQueriesV => "a_queries_v",
    }
}

string_enum! {
    SurrogateKind {
        Rectangular => "rectangular",
        /// Zero derivative through spikes; used for exact gradient checks.
        Zero => "zero",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Audio sequence length.
    pub a_in: usize,
    /// Visual sequence length.
    pub v_in: usize,
    /// Input feature width per sequence position.
    pub h_in: usize,
    pub h_emb: usize,
    pub h_hid: usize,
    pub h_out: usize,
    /// Per-head width of the cross-modal attention.
    pub h_proj: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Width of the class text embeddings.
    pub text_dim: usize,

    pub time_steps: usize,
    pub rank: usize,
    pub slot_count: usize,
    pub joint_depth: usize,

    pub d_enc: f64,
    pub d_proj: f64,
    pub d_text: f64,

    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub w_triplet: f64,
    pub w_proj_recon: f64,
    pub use_projection_loss: bool,
    pub use_reconstruction_loss: bool,

    pub tau_m: f64,
    pub resistance: f64,
    pub v_rest: f64,
    pub v_th_init: f64,
    pub v_th_min: f64,
    pub v_th_max: f64,
    pub surrogate: SurrogateKind,
    pub surrogate_half_width: f64,
    pub alpha_init: f64,

    pub threshold_mode: ThresholdMode,
    pub tsf_mode: TsfMode,
    pub glp: bool,
    pub lkc: bool,
    pub triplet_mode: TripletMode,
    pub mining: Mining,
    pub joint_mode: JointMode,

    pub seed: u64,
}

impl ModelConfig {
    pub const PRESETS: &'static [&'static str] = &["desk", "full"];

    /// Small widths that train in minutes on one core.
    pub fn desk() -> Self {
        Self {
            a_in: 4,
            v_in: 4,
            h_in: 16,
            h_emb: 32,
            h_hid: 32,
            h_out: 300,
            h_proj: 4,
            heads: 8,
            head_dim: 4,
            text_dim: 300,
            time_steps: 4,
            rank: 16,
            slot_count: 3,
            joint_depth: 1,
            d_enc: 0.25,
            d_proj: 0.20,
            d_text: 0.1,
            lr: 1e-4,
            epochs: 60,
            batch_size: 64,
            gamma: 1.0,
            w_triplet: 0.5,
            w_proj_recon: 0.5,
            use_projection_loss: true,
            use_reconstruction_loss: true,
            tau_m: 2.0,
            resistance: 2.0,
            v_rest: 0.0,
            v_th_init: 1.0,
            v_th_min: 0.05,
            v_th_max: 10.0,
            surrogate: SurrogateKind::Rectangular,
            surrogate_half_width: 0.5,
            alpha_init: 0.1,
            threshold_mode: ThresholdMode::Dynamic,
            tsf_mode: TsfMode::SoftmaxWeight,
            glp: true,
            lkc: true,
            triplet_mode: TripletMode::Resolved,
            mining: Mining::SemiHard,
            joint_mode: JointMode::AvgBidirectional,
            seed: 0,
        }
    }

    /// Full-size widths. Too large to train here; used for accounting.
    pub fn full() -> Self {
        Self {
            a_in: 512,
            v_in: 512,
            h_in: 512,
            h_emb: 512,
            h_hid: 512,
            h_proj: 64,
            head_dim: 64,
            rank: 60,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            _ => Err(Error::Config(format!(
                "unknown preset {name:?}; expected one of {:?}",
                Self::PRESETS
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let widths = [
            ("a_in", self.a_in),
            ("v_in", self.v_in),
            ("h_in", self.h_in),
            ("h_emb", self.h_emb),
            ("h_hid", self.h_hid),
            ("h_out", self.h_out),
            ("h_proj", self.h_proj),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("text_dim", self.text_dim),
            ("time_steps", self.time_steps),
            ("rank", self.rank),
            ("slot_count", self.slot_count),
            ("joint_depth", self.joint_depth),
            ("epochs", self.epochs),
        ];
        for (name, v) in widths {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.h_emb != self.heads * self.head_dim {
            return fail(format!(
                "h_emb ({}) must equal heads·head_dim ({}·{})",
                self.h_emb, self.heads, self.head_dim
            ));
        }
        if self.h_proj != self.head_dim {
            return fail(format!(
                "h_proj ({}) must equal head_dim ({})",
                self.h_proj, self.head_dim
            ));
        }
        if self.a_in != self.v_in && self.joint_mode == JointMode::AvgBidirectional {
            return fail("avg_bidirectional joint mode needs a_in == v_in".into());
        }
        if self.rank > self.h_emb {
            return fail(format!("rank {} exceeds h_emb {}", self.rank, self.h_emb));
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2".into());
        }
        for (name, p) in [("d_enc", self.d_enc), ("d_proj", self.d_proj), ("d_text", self.d_text)] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("{name} = {p} outside [0, 1)"));
            }
        }
        let finite = [
            self.lr,
            self.gamma,
            self.w_triplet,
            self.w_proj_recon,
            self.tau_m,
            self.resistance,
            self.v_rest,
            self.v_th_init,
            self.v_th_min,
            self.v_th_max,
            self.surrogate_half_width,
            self.alpha_init,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return fail("non-finite hyperparameter".into());
        }
        if self.lr < 0.0 || self.gamma < 0.0 || self.w_triplet < 0.0 || self.w_proj_recon < 0.0 {
            return fail("lr, gamma and loss weights must be non-negative".into());
        }
        if self.tau_m <= 0.0 {
            return fail("tau_m must be positive".into());
        }
        if self.v_th_init <= self.v_rest {
            return fail("v_th_init must exceed v_rest".into());
        }
        if !(0.0 < self.v_th_min && self.v_th_min < self.v_th_max) {
            return fail("threshold clamp must satisfy 0 < v_th_min < v_th_max".into());
        }
        if self.surrogate_half_width <= 0.0 {
            return fail("surrogate_half_width must be positive".into());
        }
        // TOML integers are signed.
        if self.seed > i64::MAX as u64 {
            return fail(format!("seed {} exceeds {}", self.seed, i64::MAX));
        }
        Ok(())
    }

    /// Layers `file` (TOML text) and then `overrides` over `base`.
    pub fn resolve(base: &ModelConfig, file: Option<&str>, overrides: &toml::Table) -> Result<Self> {
        let mut table = match toml::Value::try_from(base)? {
            toml::Value::Table(t) => t,
            _ => unreachable!("config serializes to a table"),
        };
        if let Some(text) = file {
            let file_table: toml::Table = toml::from_str(text)?;
            merge(&mut table, file_table)?;
        }
        merge(&mut table, overrides.clone())?;
        let cfg: ModelConfig = toml::Value::Table(table).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn surrogate(&self) -> crate::autograd::Surrogate {
        match self.surrogate {
            SurrogateKind::Rectangular => crate::autograd::Surrogate::Rectangular {
                half_width: self.surrogate_half_width,
            },
            SurrogateKind::Zero => crate::autograd::Surrogate::Zero,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) -> Result<()> {
    for (k, v) in over {
        let Some(slot) = base.get_mut(&k) else {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        };
        // Integers are accepted where floats are expected.
        *slot = match (&*slot, v) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
    }
    Ok(())
}
