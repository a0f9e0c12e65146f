//! Synthetic audio-visual zero-shot data and its on-disk format.
//!
//! Every class gets a unit-norm text embedding drawn from a low-rank
//! Gaussian, so the seen classes span the space the unseen ones live in.
//! Each modality's class mean is a fixed random linear image of the text
//! embedding; samples add isotropic Gaussian noise.
//!
//! # File format
//!
//! `manifest.json` describes the split and names the matrix files. Each
//! matrix file is:
//!
//! | bytes | content |
//! |-------|---------|
//! | 0..8  | ASCII `STFTFEAT` |
//! | 8..12 | width, `u32` little-endian |
//! | 12..16 | height (rows), `u32` little-endian |
//! | 16..  | `width·height` `f32` little-endian, row-major |
//!
//! Feature rows hold one sample flattened as `seq_len × feat_dim`.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"STFTFEAT";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub classes: usize,
    pub unseen: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seq_len: usize,
    pub feat_dim: usize,
    pub text_dim: usize,
    /// Rank of the text-embedding distribution.
    pub latent_dim: usize,
    /// Per-coordinate noise standard deviation.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            classes: 20,
            unseen: 5,
            train_per_class: 80,
            test_per_class: 40,
            seq_len: 4,
            feat_dim: 16,
            text_dim: 300,
            latent_dim: 6,
            sigma: 0.1,
            seed: 0,
        }
    }
}

impl DataSpec {
    /// Widths taken from a model configuration.
    pub fn for_model(cfg: &ModelConfig) -> Self {
        Self {
            seq_len: cfg.a_in,
            feat_dim: cfg.h_in,
            text_dim: cfg.text_dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Dataset(m.to_string()));
        if self.classes < 4 {
            return fail("need at least 4 classes");
        }
        if self.unseen < 2 {
            return fail("need at least 2 unseen classes");
        }
        if self.classes - self.unseen.min(self.classes) < 2 {
            return fail("need at least 2 seen classes");
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return fail("samples per class must be positive");
        }
        if self.seq_len == 0 || self.feat_dim == 0 || self.text_dim == 0 || self.latent_dim == 0 {
            return fail("widths must be positive");
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return fail("sigma must be finite and non-negative");
        }
        Ok(())
    }

    pub fn sample_width(&self) -> usize {
        self.seq_len * self.feat_dim
    }
}

/// Features `[N, seq_len, feat_dim]` for both modalities plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub audio: Tensor,
    pub visual: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `idx` of both modalities as `([n, L, F], [n, L, F], labels)`.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor, Vec<usize>) {
        let gather = |t: &Tensor| {
            let w = t.numel() / t.shape()[0];
            let mut data = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
            let mut shape = t.shape().to_vec();
            shape[0] = idx.len();
            Tensor::from_parts(shape, data)
        };
        (
            gather(&self.audio),
            gather(&self.visual),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DataSpec,
    /// `[classes, text_dim]`, unit-norm rows.
    pub text: Tensor,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    /// Seen classes only.
    pub train: Split,
    /// Seen and unseen classes.
    pub test: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub text: String,
    pub train_audio: String,
    pub train_visual: String,
    pub test_audio: String,
    pub test_visual: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: DataSpec,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    pub train_labels: Vec<usize>,
    pub test_labels: Vec<usize>,
    pub files: ManifestFiles,
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Deterministic in `spec` (including its seed). Values are rounded to
/// `f32` so that written and in-memory data agree exactly.
pub fn generate(spec: &DataSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, td, ld) = (spec.classes, spec.text_dim, spec.latent_dim);

    let basis = gaussian(td * ld, &mut rng);
    let mut text = Vec::with_capacity(c * td);
    for _ in 0..c {
        let z = gaussian(ld, &mut rng);
        let row: Vec<f64> = (0..td)
            .map(|i| (0..ld).map(|k| basis[i * ld + k] * z[k]).sum())
            .collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        text.extend(row.iter().map(|v| round_f32(v / norm)));
    }

    let mut unseen = sample(&mut rng, c, spec.unseen).into_vec();
    unseen.sort_unstable();
    let seen: Vec<usize> = (0..c).filter(|k| !unseen.contains(k)).collect();

    let w = spec.sample_width();
    let mut means = Vec::new();
    for _ in 0..2 {
        let proj = gaussian(w * td, &mut rng);
        let m: Vec<Vec<f64>> = (0..c)
            .map(|k| {
                let t = &text[k * td..(k + 1) * td];
                (0..w)
                    .map(|i| proj[i * td..(i + 1) * td].iter().zip(t).map(|(p, x)| p * x).sum())
                    .collect()
            })
            .collect();
        means.push(m);
    }

    let draw = |classes: &[usize], per: usize, rng: &mut ChaCha8Rng| -> Split {
        let n = classes.len() * per;
        let mut audio = Vec::with_capacity(n * w);
        let mut visual = Vec::with_capacity(n * w);
        let mut labels = Vec::with_capacity(n);
        for &k in classes {
            for _ in 0..per {
                for (buf, m) in [(&mut audio, &means[0]), (&mut visual, &means[1])] {
                    buf.extend(m[k].iter().map(|mu| {
                        let e: f64 = StandardNormal.sample(rng);
                        round_f32(mu + spec.sigma * e)
                    }));
                }
                labels.push(k);
            }
        }
        let shape = vec![n, spec.seq_len, spec.feat_dim];
        Split {
            audio: Tensor::from_parts(shape.clone(), audio),
            visual: Tensor::from_parts(shape, visual),
            labels,
        }
    };
    let train = draw(&seen, spec.train_per_class, &mut rng);
    let all: Vec<usize> = (0..c).collect();
    let test = draw(&all, spec.test_per_class, &mut rng);

    Ok(Dataset {
        spec: *spec,
        text: Tensor::from_parts(vec![c, td], text),
        seen,
        unseen,
        train,
        test,
    })
}

pub fn write_matrix(path: &Path, rows: usize, width: usize, data: &[f64]) -> Result<()> {
    let to_u32 = |v: usize| {
        u32::try_from(v).map_err(|_| Error::Dataset(format!("dimension {v} exceeds u32")))
    };
    let mut bytes = Vec::with_capacity(16 + 4 * data.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&to_u32(width)?.to_le_bytes());
    bytes.extend_from_slice(&to_u32(rows)?.to_le_bytes());
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Returns `(rows, width, values)`.
pub fn read_matrix(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Dataset(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing STFTFEAT header"));
    }
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let rows = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != 4 * width * rows {
        return Err(bad(&format!("expected {} payload bytes, found {}", 4 * width * rows, body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok((rows, width, data))
}

impl Dataset {
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            spec: self.spec,
            seen: self.seen.clone(),
            unseen: self.unseen.clone(),
            train_labels: self.train.labels.clone(),
            test_labels: self.test.labels.clone(),
            files: ManifestFiles {
                text: "text.bin".into(),
                train_audio: "train_audio.bin".into(),
                train_visual: "train_visual.bin".into(),
                test_audio: "test_audio.bin".into(),
                test_visual: "test_visual.bin".into(),
            },
        }
    }

    /// Writes the manifest and matrix files into `dir` (created if needed).
    pub fn save(&self, dir: &Path) -> Result<DatasetManifest> {
        fs::create_dir_all(dir)?;
        let m = self.manifest();
        let w = self.spec.sample_width();
        write_matrix(&dir.join(&m.files.text), self.spec.classes, self.spec.text_dim, self.text.data())?;
        for (name, t) in [
            (&m.files.train_audio, &self.train.audio),
            (&m.files.train_visual, &self.train.visual),
            (&m.files.test_audio, &self.test.audio),
            (&m.files.test_visual, &self.test.visual),
        ] {
            write_matrix(&dir.join(name), t.shape()[0], w, t.data())?;
        }
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&m)?)?;
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
        m.spec.validate()?;
        let spec = m.spec;
        check_partition(&m)?;
        let w = spec.sample_width();
        let read = |name: &str, rows: usize, width: usize| -> Result<Vec<f64>> {
            let (r, wd, data) = read_matrix(&dir.join(name))?;
            if r != rows || wd != width {
                return Err(Error::Dataset(format!(
                    "{name}: expected {rows}×{width}, found {r}×{wd}"
                )));
            }
            Ok(data)
        };
        let text = read(&m.files.text, spec.classes, spec.text_dim)?;
        let split = |a: &str, v: &str, labels: &[usize]| -> Result<Split> {
            let n = labels.len();
            let shape = vec![n, spec.seq_len, spec.feat_dim];
            Ok(Split {
                audio: Tensor::new(&shape, read(a, n, w)?)?,
                visual: Tensor::new(&shape, read(v, n, w)?)?,
                labels: labels.to_vec(),
            })
        };
        Ok(Dataset {
            spec,
            text: Tensor::new(&[spec.classes, spec.text_dim], text)?,
            seen: m.seen.clone(),
            unseen: m.unseen.clone(),
            train: split(&m.files.train_audio, &m.files.train_visual, &m.train_labels)?,
            test: split(&m.files.test_audio, &m.files.test_visual, &m.test_labels)?,
        })
    }

    /// Confirms the feature widths match a model configuration.
    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        let s = &self.spec;
        if s.seq_len != cfg.a_in || s.seq_len != cfg.v_in || s.feat_dim != cfg.h_in || s.text_dim != cfg.text_dim {
            return Err(Error::Dataset(format!(
                "data is {}×{} with text {}, model expects a_in={}, v_in={}, h_in={}, text_dim={}",
                s.seq_len, s.feat_dim, s.text_dim, cfg.a_in, cfg.v_in, cfg.h_in, cfg.text_dim
            )));
        }
        Ok(())
    }
}

fn check_partition(m: &DatasetManifest) -> Result<()> {
    let c = m.spec.classes;
    let mut owner = vec![0u8; c];
    for &k in m.seen.iter().chain(&m.unseen) {
        if k >= c {
            return Err(Error::Dataset(format!("class {k} out of range")));
        }
        owner[k] += 1;
    }
    if owner.iter().any(|&o| o != 1) {
        return Err(Error::Dataset("seen and unseen must partition the classes".into()));
    }
    if m.unseen.len() != m.spec.unseen {
        return Err(Error::Dataset("unseen list disagrees with spec".into()));
    }
    if let Some(k) = m.train_labels.iter().find(|k| m.unseen.contains(k)) {
        return Err(Error::Dataset(format!("unseen class {k} in training split")));
    }
    if let Some(k) = m.test_labels.iter().find(|&&k| k >= c) {
        return Err(Error::Dataset(format!("test label {k} out of range")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_structure() {
        let d = generate(&DataSpec::default()).unwrap();
        assert_eq!(d.seen.len(), 15);
        assert_eq!(d.unseen.len(), 5);
        assert_eq!(d.train.len(), 15 * 80);
        assert_eq!(d.test.len(), 20 * 40);
        assert!(d.train.labels.iter().all(|k| d.seen.contains(k)));
        for k in 0..20 {
            let row = &d.text.data()[k * 300..(k + 1) * 300];
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_noise_repeats_class_means() {
        let spec = DataSpec {
            sigma: 0.0,
            ..DataSpec::default()
        };
        let d = generate(&spec).unwrap();
        let w = spec.sample_width();
        let a = d.train.audio.data();
        assert_eq!(&a[..w], &a[w..2 * w]);
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            DataSpec { classes: 3, ..DataSpec::default() },
            DataSpec { unseen: 1, ..DataSpec::default() },
            DataSpec { unseen: 19, ..DataSpec::default() },
            DataSpec { sigma: -1.0, ..DataSpec::default() },
        ] {
            assert!(generate(&spec).is_err(), "{spec:?}");
        }
    }
}
