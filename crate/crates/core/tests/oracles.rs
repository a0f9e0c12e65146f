//! Component outputs against direct loop implementations and worked examples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stft_core::autograd::{Surrogate, Tape};
use stft_core::checks::{published_fusion_counts, published_hm_error, PUBLISHED_GZSL};
use stft_core::config::ModelConfig;
use stft_core::metrics::{classify, harmonic_mean, mean_class_accuracy};
use stft_core::objectives::{projection_loss, total_loss, total_value, triplet_loss, LossConfig};
use stft_core::semantic::attend;
use stft_core::snn::{glp, lif_step, LifParams};
use stft_core::tucker::dense_bilinear;
use stft_core::{Mining, Tensor, TripletMode};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn conv1d_matches_loops() {
    let mut r = rng(1);
    let (b, l, ci, co, k) = (2, 6, 3, 4, 3);
    let x = Tensor::randn(&[b, l, ci], &mut r);
    let w = Tensor::randn(&[k, ci, co], &mut r);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv1d(xv, wv).unwrap();
    let y = tape.value(y);
    for bi in 0..b {
        for t in 0..l {
            for o in 0..co {
                let mut acc = 0.0;
                for j in 0..k {
                    let src = t as isize + j as isize - 1;
                    if src < 0 || src >= l as isize {
                        continue;
                    }
                    for c in 0..ci {
                        acc += x.at(&[bi, src as usize, c]) * w.at(&[j, c, o]);
                    }
                }
                assert!((y.at(&[bi, t, o]) - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn layer_norm_matches_loops() {
    let x = Tensor::randn(&[3, 5], &mut rng(2));
    let g = Tensor::new(&[5], vec![1.0, 2.0, 0.5, -1.0, 3.0]).unwrap();
    let b = Tensor::new(&[5], vec![0.0, 0.1, 0.2, 0.3, 0.4]).unwrap();
    let mut tape = Tape::new();
    let (xv, gv, bv) = (tape.constant(x.clone()), tape.constant(g.clone()), tape.constant(b.clone()));
    let y = tape.layer_norm(xv, gv, bv).unwrap();
    for (row, out) in x.data().chunks(5).zip(tape.value(y).data().chunks(5)) {
        let mean = row.iter().sum::<f64>() / 5.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        for j in 0..5 {
            let want = (row[j] - mean) / (var + 1e-5).sqrt() * g.data()[j] + b.data()[j];
            assert!((out[j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn dense_bilinear_matches_loops() {
    let mut r = rng(3);
    let (n, ds, dt, k) = (2, 3, 4, 5);
    let rr = Tensor::randn(&[n, ds], &mut r);
    let ss = Tensor::randn(&[n, dt], &mut r);
    let t = Tensor::randn(&[ds, dt, k], &mut r);
    let mut tape = Tape::new();
    let (a, b, c) = (tape.constant(rr.clone()), tape.constant(ss.clone()), tape.constant(t.clone()));
    let y = dense_bilinear(&mut tape, a, b, c).unwrap();
    for row in 0..n {
        for kk in 0..k {
            let mut acc = 0.0;
            for i in 0..ds {
                for j in 0..dt {
                    acc += t.at(&[i, j, kk]) * rr.at(&[row, i]) * ss.at(&[row, j]);
                }
            }
            assert!((tape.value(y).at(&[row, kk]) - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn mode_product_matches_loops() {
    let mut r = rng(4);
    let t = Tensor::randn(&[2, 3, 4], &mut r);
    let m = Tensor::randn(&[5, 3], &mut r);
    let mut tape = Tape::new();
    let (tv, mv) = (tape.constant(t.clone()), tape.constant(m.clone()));
    let y = tape.mode_product(tv, mv, 1).unwrap();
    let y = tape.value(y);
    assert_eq!(y.shape(), &[2, 5, 4]);
    for a in 0..2 {
        for q in 0..5 {
            for c in 0..4 {
                let want: f64 = (0..3).map(|j| m.at(&[q, j]) * t.at(&[a, j, c])).sum();
                assert!((y.at(&[a, q, c]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn attention_matches_loops() {
    let mut r = rng(5);
    let (lq, lk, d, dv) = (3, 4, 2, 3);
    let q = Tensor::randn(&[lq, d], &mut r);
    let k = Tensor::randn(&[lk, d], &mut r);
    let v = Tensor::randn(&[lk, dv], &mut r);
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let (out, _) = attend(&mut tape, qv, kv, vv).unwrap();
    for i in 0..lq {
        let scores: Vec<f64> = (0..lk)
            .map(|j| (0..d).map(|c| q.at(&[i, c]) * k.at(&[j, c])).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for c in 0..dv {
            let want: f64 = (0..lk).map(|j| scores[j].exp() / z * v.at(&[j, c])).sum();
            assert!((tape.value(out).at(&[i, c]) - want).abs() < 1e-12);
        }
    }
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

#[test]
fn hardest_negative_triplet_matches_loops() {
    let mut r = rng(6);
    let (n, d, gamma) = (6, 3, 0.7);
    let labels = [0, 1, 1, 2, 0, 2];
    let a = Tensor::randn(&[n, d], &mut r);
    let t = Tensor::randn(&[n, d], &mut r);
    let row = |x: &Tensor, i: usize| x.data()[i * d..(i + 1) * d].to_vec();
    let mut total = 0.0;
    for i in 0..n {
        let pos = sq(&row(&a, i), &row(&t, i));
        let negs: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[i]).collect();
        let na = negs
            .iter()
            .map(|&j| sq(&row(&a, j), &row(&t, i)))
            .fold(f64::INFINITY, f64::min);
        let nt = negs
            .iter()
            .map(|&j| sq(&row(&t, j), &row(&a, i)))
            .fold(f64::INFINITY, f64::min);
        total += (gamma + pos - na).max(0.0) + (gamma + pos - nt).max(0.0);
    }
    let mut tape = Tape::new();
    let (av, tv) = (tape.constant(a), tape.constant(t));
    let l = triplet_loss(&mut tape, av, tv, &labels, gamma, TripletMode::Resolved, Mining::Hardest).unwrap();
    assert!((tape.value(l).item() - total / n as f64).abs() < 1e-12);
}

#[test]
fn identical_embeddings_cost_twice_the_margin() {
    let e = Tensor::full(&[4, 3], 0.3);
    for mining in [Mining::Hardest, Mining::SemiHard] {
        let mut tape = Tape::new();
        let (a, t) = (tape.constant(e.clone()), tape.constant(e.clone()));
        let l = triplet_loss(&mut tape, a, t, &[0, 1, 2, 3], 1.5, TripletMode::Resolved, mining).unwrap();
        assert_eq!(tape.value(l).item(), 3.0);
    }
}

#[test]
fn unit_offset_projection_loss_is_one() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::full(&[3, 4], 2.0));
    let b = tape.constant(Tensor::full(&[3, 4], 1.0));
    let l = projection_loss(&mut tape, a, b).unwrap();
    assert_eq!(tape.value(l).item(), 1.0);
}

#[test]
fn weighted_total_of_two_one_one_is_two() {
    let lc = LossConfig::from_config(&ModelConfig::desk());
    assert_eq!(total_value(2.0, 1.0, 1.0, &lc), 2.0);
    let mut tape = Tape::new();
    let (t, p, r) = (
        tape.constant(Tensor::scalar(2.0)),
        tape.constant(Tensor::scalar(1.0)),
        tape.constant(Tensor::scalar(1.0)),
    );
    let total = total_loss(&mut tape, t, p, r, &lc).unwrap();
    assert_eq!(tape.value(total).item(), 2.0);
}

#[test]
fn classify_breaks_ties_toward_the_lowest_index() {
    let table = Tensor::from_rows(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 5.0]]).unwrap();
    let emb = Tensor::from_rows(&[&[0.0, 0.0], &[0.9, 0.0]]).unwrap();
    assert_eq!(classify(&emb, &table, &[2, 1, 0]).unwrap(), vec![0, 0]);
    assert_eq!(classify(&emb, &table, &[2, 1]).unwrap(), vec![1, 1]);
}

#[test]
fn mean_class_accuracy_weights_classes_equally() {
    // Class 0: 9 of 9 right; class 1: 0 of 1 right.
    let mut labels = vec![0; 9];
    labels.push(1);
    let mut preds = vec![0; 9];
    preds.push(0);
    assert_eq!(mean_class_accuracy(&preds, &labels, &[0, 1]).unwrap(), 0.5);
}

#[test]
fn lif_euler_step_by_hand() {
    // dt/τ = 0.5, R = 2: v' = 0.5·v + I.
    let p = LifParams { tau_m: 2.0, resistance: 2.0, v_rest: -0.1, v_th_init: 1.0, dt: 1.0 };
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(&[1, 3], vec![0.5, 0.5, 0.0]).unwrap());
    let i = tape.constant(Tensor::new(&[1, 3], vec![1.0, 0.5, 0.999]).unwrap());
    let out = lif_step(&mut tape, v, i, &[1.0], &p, Surrogate::Zero).unwrap();
    assert_eq!(tape.value(out.v_pre).data(), &[1.25, 0.75, 0.999]);
    assert_eq!(tape.value(out.spikes).data(), &[1.0, 0.0, 0.0]);
    assert_eq!(tape.value(out.v_next).data(), &[-0.1, 0.75, 0.999]);
}

#[test]
fn glp_of_a_constant_row() {
    // P_max = P_avg = c, so ½(c + c) + βc + (1 − β)c = 2c for any β.
    let c = 0.3;
    for beta in [0.0, 0.5, 0.9] {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 4], c));
        let b = tape.constant(Tensor::scalar(beta));
        let (gated, p_all) = glp(&mut tape, x, b, 2).unwrap();
        assert!(tape.value(p_all).data().iter().all(|p| (p - 2.0 * c).abs() < 1e-15));
        let want = 1.0 / (1.0 + (-(2.0 * c * c + c)).exp());
        assert!(tape.value(gated).data().iter().all(|g| (g - want).abs() < 1e-15));
    }
}

#[test]
fn published_harmonic_means_reproduce() {
    assert!(PUBLISHED_GZSL.iter().filter(|r| r.model != "STFT").count() >= 5);
    let (err, row) = published_hm_error();
    assert!(err <= 0.01, "{row:?}");
    assert!((harmonic_mean(56.47, 22.89) - 32.58).abs() <= 0.01);
    assert!((harmonic_mean(19.22, 6.81) - 10.06).abs() <= 0.01);
}

#[test]
fn published_fusion_parameter_counts() {
    let (tucker, dense) = published_fusion_counts();
    assert_eq!(tucker, 281_280);
    assert_eq!(dense, 16_777_216);
    assert!(1.0 - tucker as f64 / dense as f64 >= 0.98);
}
