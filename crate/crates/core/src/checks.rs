//! Self-contained verification suites shared by the acceptance target and
//! the `grad-check` / `oracle-check` commands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::config::{Mining, ModelConfig, SurrogateKind, TripletMode, TsfMode};
use crate::data::{generate, DataSpec, Dataset};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::metrics::harmonic_mean;
use crate::nn::Session;
use crate::objectives::{mse, triplet_loss};
use crate::semantic::{attend, lkc_combine, slots_update};
use crate::snn::{glp, tsf_aggregate};
use crate::tensor::Tensor;
use crate::train::{end_to_end_grad_check, Trainer};
use crate::tucker::{dense_bilinear, dense_param_count, tucker_compose, tucker_fuse, tucker_param_count, TuckerVars};

/// One published GZSL result: seen and unseen accuracy with their harmonic
/// mean, all in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublishedRow {
    pub model: &'static str,
    pub dataset: &'static str,
    pub seen: f64,
    pub unseen: f64,
    pub hm: f64,
}

macro_rules! rows {
    ($(($m:expr, $d:expr, $s:expr, $u:expr, $h:expr)),* $(,)?) => {
        &[$(PublishedRow { model: $m, dataset: $d, seen: $s, unseen: $u, hm: $h }),*]
    };
}

/// Published audio-visual GZSL results on VGGSound, UCF101 and ActivityNet.
pub const PUBLISHED_GZSL: &[PublishedRow] = rows![
    ("SJE", "VGGSound", 48.33, 1.10, 2.15),
    ("SJE", "UCF", 63.10, 16.77, 26.50),
    ("SJE", "ActivityNet", 4.61, 7.04, 5.57),
    ("DEVISE", "VGGSound", 36.22, 1.07, 2.08),
    ("DEVISE", "UCF", 55.59, 14.94, 23.56),
    ("DEVISE", "ActivityNet", 3.45, 8.53, 4.91),
    ("APN", "VGGSound", 7.48, 3.88, 5.11),
    ("APN", "UCF", 28.46, 16.16, 20.61),
    ("APN", "ActivityNet", 9.84, 5.76, 7.27),
    ("VAEGAN", "VGGSound", 12.77, 0.95, 1.77),
    ("VAEGAN", "UCF", 17.29, 8.47, 11.37),
    ("VAEGAN", "ActivityNet", 4.36, 2.14, 2.87),
    ("CJME", "VGGSound", 8.69, 4.78, 6.17),
    ("CJME", "UCF", 26.04, 8.21, 12.48),
    ("CJME", "ActivityNet", 5.55, 4.75, 5.12),
    ("AVGZSLNet", "VGGSound", 18.05, 3.48, 5.83),
    ("AVGZSLNet", "UCF", 52.52, 10.90, 18.05),
    ("AVGZSLNet", "ActivityNet", 8.93, 5.04, 6.44),
    ("AVCA", "VGGSound", 14.90, 4.00, 6.31),
    ("AVCA", "UCF", 51.53, 18.43, 27.15),
    ("AVCA", "ActivityNet", 24.86, 8.02, 12.13),
    ("TCaF", "VGGSound", 9.64, 5.91, 7.33),
    ("TCaF", "UCF", 58.60, 21.74, 31.72),
    ("TCaF", "ActivityNet", 18.70, 7.50, 10.71),
    ("AVMST", "VGGSound", 14.14, 5.28, 7.68),
    ("AVMST", "UCF", 44.08, 22.63, 29.91),
    ("AVMST", "ActivityNet", 17.75, 9.90, 12.71),
    ("Hyper-alignment", "VGGSound", 13.22, 5.01, 7.27),
    ("Hyper-alignment", "UCF", 57.28, 17.83, 27.19),
    ("Hyper-alignment", "ActivityNet", 23.50, 8.47, 12.46),
    ("Hyper-single", "VGGSound", 9.79, 6.23, 7.62),
    ("Hyper-single", "UCF", 52.67, 19.04, 27.97),
    ("Hyper-single", "ActivityNet", 23.60, 10.13, 14.18),
    ("Hyper-multiple", "VGGSound", 15.02, 6.75, 9.32),
    ("Hyper-multiple", "UCF", 63.08, 19.10, 29.32),
    ("Hyper-multiple", "ActivityNet", 23.38, 8.67, 12.65),
    ("MDFT", "VGGSound", 16.14, 5.97, 8.72),
    ("MDFT", "UCF", 48.79, 23.11, 31.36),
    ("MDFT", "ActivityNet", 18.32, 10.55, 13.39),
    ("STFT", "VGGSound", 19.22, 6.81, 10.06),
    ("STFT", "UCF", 56.47, 22.89, 32.58),
    ("STFT", "ActivityNet", 22.34, 11.73, 15.38),
];

/// Largest `|harmonic_mean(S, U) − HM|` over the published rows, with the
/// offending row.
pub fn published_hm_error() -> (f64, PublishedRow) {
    PUBLISHED_GZSL
        .iter()
        .map(|r| ((harmonic_mean(r.seen, r.unseen) - r.hm).abs(), *r))
        .fold((0.0, PUBLISHED_GZSL[0]), |acc, x| if x.0 > acc.0 { x } else { acc })
}

/// `(tucker, dense)` parameter counts of one rank-60 fusion at 512×512 → 64.
pub fn published_fusion_counts() -> (usize, usize) {
    (tucker_param_count(512, 512, 64, (60, 60, 60)), dense_param_count(512, 512, 64))
}

/// Max abs difference between `tucker_fuse` and the dense bilinear form of
/// the composed tensor at full rank, over `seeds` random problems with every
/// dimension in `1..=max_dim`.
pub fn tucker_equivalence(seeds: u64, max_dim: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_s = rng.random_range(1..=max_dim);
        let d_t = rng.random_range(1..=max_dim);
        let k = rng.random_range(1..=max_dim);
        let n = rng.random_range(1..=4);
        let mut tape = Tape::new();
        let mut leaf = |shape: &[usize], rng: &mut ChaCha8Rng| tape.constant(Tensor::randn(shape, rng));
        let f = TuckerVars {
            g: leaf(&[d_s, d_t, k], &mut rng),
            u_s: leaf(&[d_s, d_s], &mut rng),
            u_t: leaf(&[d_t, d_t], &mut rng),
            u_k: leaf(&[k, k], &mut rng),
        };
        let r = leaf(&[n, d_s], &mut rng);
        let s = leaf(&[n, d_t], &mut rng);
        let fused = tucker_fuse(&mut tape, r, s, &f)?;
        let full = tucker_compose(&mut tape, &f)?;
        let dense = dense_bilinear(&mut tape, r, s, full)?;
        worst = worst.max(tape.value(fused).max_abs_diff(tape.value(dense)));
    }
    Ok(worst)
}

/// Over `seeds` random problems and every aggregation mode: the largest
/// deviation of TSF on a constant-in-time input from the per-step value,
/// and of TSF at `T = 1` from its input.
pub fn tsf_degenerate(seeds: u64) -> Result<(f64, f64)> {
    let (mut constant, mut single): (f64, f64) = (0.0, 0.0);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rng.random_range(2..=8);
        let shape = [rng.random_range(1..=4), rng.random_range(1..=5)];
        let step = Tensor::randn(&shape, &mut rng);
        for &mode in TsfMode::ALL {
            let mut tape = Tape::new();
            let steps: Vec<Var> = (0..t).map(|_| tape.constant(step.clone())).collect();
            let stacked = tape.stack(&steps)?;
            let out = tsf_aggregate(&mut tape, stacked, mode)?;
            constant = constant.max(tape.value(out).max_abs_diff(&step));

            let one = tape.stack(&steps[..1])?;
            let out = tsf_aggregate(&mut tape, one, mode)?;
            single = single.max(tape.value(out).max_abs_diff(&step));
        }
    }
    Ok((constant, single))
}

/// Deterministic weights used to reduce an output tensor to a scalar.
fn probe_weights(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| (0.7548 * i as f64 + 0.31).sin() + 0.25).collect();
    Tensor::new(shape, w).expect("shape and length agree")
}

fn contract(tape: &mut Tape, out: Var) -> Result<Var> {
    let w = tape.constant(probe_weights(tape.shape(out)));
    let m = tape.mul(out, w)?;
    tape.sum(m)
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor>,
    f: OpFn,
}

fn case(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        inputs,
        f: Box::new(move |tape, x| {
            let out = f(tape, x)?;
            contract(tape, out)
        }),
    }
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let mut r = |shape: &[usize]| Tensor::randn(shape, rng);
    let labels = vec![0, 1, 0, 2, 1, 2];
    let mut v = vec![
        case("add", vec![r(&[3, 4]), r(&[3, 4])], |t, x| t.add(x[0], x[1])),
        case("sub", vec![r(&[3, 4]), r(&[3, 4])], |t, x| t.sub(x[0], x[1])),
        case("mul", vec![r(&[3, 4]), r(&[3, 4])], |t, x| t.mul(x[0], x[1])),
        case("mul_scalar_operand", vec![r(&[3, 4]), r(&[1])], |t, x| t.mul(x[0], x[1])),
        case("affine_scalars", vec![r(&[5])], |t, x| {
            let a = t.mul_scalar(x[0], -1.7)?;
            let a = t.add_scalar(a, 0.3)?;
            t.neg(a)
        }),
        case("sigmoid", vec![r(&[3, 4])], |t, x| t.sigmoid(x[0])),
        case("relu", vec![r(&[3, 4])], |t, x| t.relu(x[0])),
        case("exp", vec![r(&[3, 4])], |t, x| t.exp(x[0])),
        case("square", vec![r(&[3, 4])], |t, x| t.square(x[0])),
        case("log", vec![r(&[3, 4])], |t, x| {
            let a = t.square(x[0])?;
            let a = t.add_scalar(a, 0.5)?;
            t.log(a)
        }),
        case("sqrt", vec![r(&[3, 4])], |t, x| {
            let a = t.square(x[0])?;
            let a = t.add_scalar(a, 0.5)?;
            t.sqrt(a)
        }),
        case("reshape_permute", vec![r(&[2, 3, 4])], |t, x| {
            let a = t.permute(x[0], &[2, 0, 1])?;
            t.reshape(a, &[4, 6])
        }),
        case("transpose", vec![r(&[2, 3, 4])], |t, x| t.transpose(x[0])),
        case("expand", vec![r(&[3, 1, 4])], |t, x| t.expand(x[0], 1, 5)),
        case("stack", vec![r(&[2, 3]), r(&[2, 3]), r(&[2, 3])], |t, x| t.stack(x)),
        case("index_select", vec![r(&[4, 3])], |t, x| t.index_select(x[0], &[2, 0, 2])),
        case("sum", vec![r(&[3, 4])], |t, x| t.sum(x[0])),
        case("mean", vec![r(&[3, 4])], |t, x| t.mean(x[0])),
        case("sum_axis", vec![r(&[3, 4, 2])], |t, x| t.sum_axis(x[0], 1)),
        case("mean_axis", vec![r(&[3, 4, 2])], |t, x| t.mean_axis(x[0], 0)),
        case("max_axis", vec![r(&[3, 4, 2])], |t, x| t.max_axis(x[0], 1)),
        case("softmax", vec![r(&[3, 4])], |t, x| t.softmax(x[0], 1)),
        case("softmax_leading", vec![r(&[4, 2, 3])], |t, x| t.softmax(x[0], 0)),
        case("matmul", vec![r(&[3, 4]), r(&[4, 2])], |t, x| t.matmul(x[0], x[1])),
        case("matmul_shared", vec![r(&[2, 3, 4]), r(&[4, 5])], |t, x| t.matmul(x[0], x[1])),
        case("matmul_batched", vec![r(&[2, 3, 4]), r(&[2, 4, 2])], |t, x| t.matmul(x[0], x[1])),
        case("mode_product_0", vec![r(&[3, 4, 2]), r(&[5, 3])], |t, x| t.mode_product(x[0], x[1], 0)),
        case("mode_product_1", vec![r(&[3, 4, 2]), r(&[2, 4])], |t, x| t.mode_product(x[0], x[1], 1)),
        case("mode_product_2", vec![r(&[3, 4, 2]), r(&[3, 2])], |t, x| t.mode_product(x[0], x[1], 2)),
        case("add_bias", vec![r(&[2, 3, 4]), r(&[4])], |t, x| t.add_bias(x[0], x[1])),
        case("mul_channel", vec![r(&[2, 3, 4]), r(&[4])], |t, x| t.mul_channel(x[0], x[1])),
        case("layer_norm", vec![r(&[3, 5]), r(&[5]), r(&[5])], |t, x| t.layer_norm(x[0], x[1], x[2])),
        case("batch_norm", vec![r(&[2, 3, 4]), r(&[4]), r(&[4])], |t, x| {
            Ok(t.batch_norm(x[0], x[1], x[2])?.0)
        }),
        case("conv1d", vec![r(&[2, 5, 3]), r(&[3, 3, 4])], |t, x| t.conv1d(x[0], x[1])),
        case("tucker_fuse", vec![r(&[3, 4]), r(&[3, 3]), r(&[2, 2, 2]), r(&[4, 2]), r(&[3, 2]), r(&[5, 2])], |t, x| {
            let f = TuckerVars {
                g: x[2],
                u_s: x[3],
                u_t: x[4],
                u_k: x[5],
            };
            tucker_fuse(t, x[0], x[1], &f)
        }),
        case("tucker_compose", vec![r(&[2, 3, 2]), r(&[3, 2]), r(&[4, 3]), r(&[2, 2])], |t, x| {
            let f = TuckerVars {
                g: x[0],
                u_s: x[1],
                u_t: x[2],
                u_k: x[3],
            };
            tucker_compose(t, &f)
        }),
        case("dense_bilinear", vec![r(&[3, 2]), r(&[3, 4]), r(&[2, 4, 3])], |t, x| dense_bilinear(t, x[0], x[1], x[2])),
        case("attend", vec![r(&[2, 3, 4]), r(&[2, 5, 4]), r(&[2, 5, 3])], |t, x| Ok(attend(t, x[0], x[1], x[2])?.0)),
        case("lkc_combine", vec![r(&[3, 4]), r(&[4, 4]), r(&[4, 4])], |t, x| lkc_combine(t, &x[1..], x[0])),
        case(
            "slots_update",
            vec![r(&[1]), r(&[2, 3, 4]), r(&[2, 3, 4]), r(&[2, 3, 4]), r(&[2, 3, 4]), r(&[4, 4])],
            |t, x| slots_update(t, x[0], x[1], x[2], x[3], x[4], x[5]),
        ),
        case("glp", vec![r(&[2, 3, 4]), r(&[1])], |t, x| Ok(glp(t, x[0], x[1], 2)?.0)),
        case("mse", vec![r(&[3, 4]), r(&[3, 4])], |t, x| mse(t, x[0], x[1])),
    ];
    for (name, mode) in [
        ("tsf_softmax_weight", TsfMode::SoftmaxWeight),
        ("tsf_max_weight", TsfMode::MaxWeight),
        ("tsf_uniform", TsfMode::Uniform),
    ] {
        v.push(case(name, vec![r(&[4, 2, 3])], move |t, x| tsf_aggregate(t, x[0], mode)));
    }
    for (name, mode, mining) in [
        ("triplet_resolved_hardest", TripletMode::Resolved, Mining::Hardest),
        ("triplet_resolved_semi_hard", TripletMode::Resolved, Mining::SemiHard),
        ("triplet_printed_hardest", TripletMode::Printed, Mining::Hardest),
    ] {
        let labels = labels.clone();
        v.push(case(name, vec![r(&[6, 3]), r(&[6, 3])], move |t, x| {
            triplet_loss(t, x[0], x[1], &labels, 1.0, mode, mining)
        }));
    }
    v
}

/// Named report of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedReport {
    pub name: String,
    pub report: GradCheckReport,
}

/// Finite-difference checks of every differentiable primitive and composite
/// operation for one seed.
pub fn op_grad_checks(seed: u64) -> Result<Vec<NamedReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = op_cases(&mut rng);
    let mut out = Vec::with_capacity(cases.len());
    for c in cases {
        let report = grad_check(&c.f, &c.inputs, GradCheckConfig::default(), &mut rng)?;
        out.push(NamedReport {
            name: c.name.to_string(),
            report,
        });
    }
    Ok(out)
}

/// Finite-difference check of the full training loss of the desk model
/// (exact `zero` surrogate) in a few sampled entries of every trainable
/// parameter, starting from a seeded initialization.
pub fn model_grad_check(seed: u64, coords_per_param: usize) -> Result<GradCheckReport> {
    let mut cfg = ModelConfig::desk();
    cfg.surrogate = SurrogateKind::Zero;
    cfg.seed = seed;
    let mut spec = DataSpec::for_model(&cfg);
    spec.train_per_class = 2;
    spec.test_per_class = 1;
    spec.seed = seed;
    let data = generate(&spec)?;
    let trainer = Trainer::new(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch: Vec<usize> = rand::seq::index::sample(&mut rng, data.train.len(), 8).into_vec();
    let ids: Vec<_> = trainer.store.trainable_ids().collect();
    let cfg = GradCheckConfig {
        max_coords: Some(coords_per_param),
        ..GradCheckConfig::default()
    };
    end_to_end_grad_check(&trainer, &data, &batch, &ids, cfg, &mut rng)
}

/// Total spikes emitted on the test split in inference mode, once per
/// initial threshold in `values`, with everything else held fixed.
pub fn spike_counts_by_threshold(trainer: &Trainer, data: &Dataset, values: &[f64]) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..data.test.len()).collect();
    let (audio, visual, _) = data.test.batch(&idx);
    let mut counts = Vec::with_capacity(values.len());
    for &v in values {
        let mut model = trainer.model.clone();
        model.cfg.v_th_init = v;
        let mut store = trainer.store.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = Session::new(&mut store, false, &mut rng);
        let out = model.forward_av(&mut s, &audio, &visual)?;
        counts.push(out.spikes.iter().map(|m| m.stats.spikes).sum());
    }
    Ok(counts)
}
