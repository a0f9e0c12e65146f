use stft_core::data::{generate, DataSpec};
use stft_core::metrics::classify;
use stft_core::{Checkpoint, Error, Mining, ModelConfig, Trainer};

fn small(epochs: usize) -> (ModelConfig, stft_core::Dataset) {
    let mut cfg = ModelConfig::desk();
    cfg.epochs = epochs;
    cfg.batch_size = 16;
    let mut spec = DataSpec::for_model(&cfg);
    spec.train_per_class = 8;
    spec.test_per_class = 4;
    (cfg, generate(&spec).unwrap())
}

fn history_json(t: &Trainer) -> String {
    serde_json::to_string(&(&t.history, &t.evals)).unwrap()
}

#[test]
fn identical_seeds_give_identical_histories() {
    let (cfg, data) = small(3);
    let mut a = Trainer::new(&cfg).unwrap();
    let mut b = Trainer::new(&cfg).unwrap();
    a.fit(&data, 1, None).unwrap();
    b.fit(&data, 1, None).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(history_json(&a), history_json(&b));
    assert_eq!(a.store, b.store);
}

#[test]
fn different_seeds_diverge() {
    let (mut cfg, data) = small(1);
    let mut a = Trainer::new(&cfg).unwrap();
    cfg.seed = 7;
    let mut b = Trainer::new(&cfg).unwrap();
    a.fit(&data, 0, None).unwrap();
    b.fit(&data, 0, None).unwrap();
    assert_ne!(a.history[0].loss, b.history[0].loss);
}

#[test]
fn checkpoint_round_trip() {
    let (cfg, data) = small(2);
    let mut t = Trainer::new(&cfg).unwrap();
    t.fit(&data, 0, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.json");
    let p2 = dir.path().join("b.json");
    t.checkpoint().save(&p1).unwrap();
    let loaded = Checkpoint::load(&p1).unwrap();
    loaded.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    let mut back = Trainer::from_checkpoint(loaded).unwrap();
    let live = t.evaluate(&data).unwrap();
    let restored = back.evaluate(&data).unwrap();
    for (x, y) in [
        (live.seen, restored.seen),
        (live.unseen, restored.unseen),
        (live.hm, restored.hm),
        (live.zsl, restored.zsl),
    ] {
        assert!((x - y).abs() < 1e-12);
    }
    let e1 = t.embed(&data.test).unwrap();
    let e2 = back.embed(&data.test).unwrap();
    assert!(e1.max_abs_diff(&e2) < 1e-12);
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let (cfg, _) = small(1);
    let t = Trainer::new(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    let mut ck = t.checkpoint();
    ck.config.gamma = 3.0;
    ck.save(&p).unwrap();
    assert!(Checkpoint::load(&p).is_err());
}

#[test]
fn resume_continues_identically() {
    let (cfg, data) = small(3);
    let mut straight = Trainer::new(&cfg).unwrap();
    straight.fit(&data, 1, None).unwrap();

    let mut first = cfg.clone();
    first.epochs = 2;
    let mut part = Trainer::new(&first).unwrap();
    part.fit(&data, 1, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ck.json");
    let mut ck = part.checkpoint();
    ck.config = cfg.clone();
    ck.config_hash = cfg.hash();
    ck.save(&p).unwrap();
    let mut resumed = Trainer::from_checkpoint(Checkpoint::load(&p).unwrap()).unwrap();
    resumed.fit(&data, 1, None).unwrap();

    assert_eq!(history_json(&straight), history_json(&resumed));
    assert_eq!(straight.store, resumed.store);
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let (mut cfg, data) = small(2);
    cfg.lr = 0.0;
    let mut t = Trainer::new(&cfg).unwrap();
    let before = t.store.clone();
    t.fit(&data, 0, None).unwrap();
    let ids: Vec<_> = t.store.trainable_ids().collect();
    assert!(!ids.is_empty());
    for id in ids {
        let (a, b) = (before.get(id).data(), t.store.get(id).data());
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", t.store.name(id));
    }
}

#[test]
fn non_finite_input_aborts_with_diagnostic() {
    let (cfg, mut data) = small(1);
    data.train.audio = data.train.audio.map(|_| f64::NAN);
    let mut t = Trainer::new(&cfg).unwrap();
    match t.fit(&data, 0, None) {
        Err(Error::NonFiniteLoss { epoch, .. }) => assert_eq!(epoch, 0),
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn metrics_log_is_one_record_per_line() {
    let (cfg, data) = small(2);
    let mut t = Trainer::new(&cfg).unwrap();
    let mut buf = Vec::new();
    t.fit(&data, 1, Some(&mut buf)).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let kinds: Vec<String> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(kinds, ["epoch", "eval", "epoch", "eval"]);
}

fn binomial_band(p: f64, n: usize) -> f64 {
    3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

#[test]
fn untrained_model_is_at_chance() {
    let cfg = ModelConfig::desk();
    let data = generate(&DataSpec::for_model(&cfg)).unwrap();
    let mut t = Trainer::new(&cfg).unwrap();
    let report = t.evaluate(&data).unwrap();
    let n_unseen = data.test.labels.iter().filter(|l| data.unseen.contains(l)).count();
    let zsl_chance = 1.0 / data.unseen.len() as f64;
    assert!((report.zsl - zsl_chance).abs() <= binomial_band(zsl_chance, n_unseen), "{report}");

    let emb = t.embed(&data.test).unwrap();
    let table = t.class_table(&data.text).unwrap();
    let all: Vec<usize> = (0..data.spec.classes).collect();
    let preds = classify(&emb, &table, &all).unwrap();
    let hits = preds.iter().zip(&data.test.labels).filter(|(p, y)| p == y).count();
    let acc = hits as f64 / preds.len() as f64;
    let chance = 1.0 / data.spec.classes as f64;
    assert!((acc - chance).abs() <= binomial_band(chance, preds.len()), "accuracy {acc}");
}

#[test]
fn overwhelming_noise_leaves_zero_shot_at_chance() {
    let mut cfg = ModelConfig::desk();
    cfg.epochs = 5;
    let mut spec = DataSpec::for_model(&cfg);
    spec.train_per_class = 20;
    // Class means have per-step norm near √feat_dim = 4.
    spec.sigma = 40.0;
    let data = generate(&spec).unwrap();
    let mut t = Trainer::new(&cfg).unwrap();
    t.fit(&data, 0, None).unwrap();
    let report = t.evals.last().unwrap().report;
    let n_unseen = data.test.labels.iter().filter(|l| data.unseen.contains(l)).count();
    let chance = 1.0 / data.unseen.len() as f64;
    assert!((report.zsl - chance).abs() <= binomial_band(chance, n_unseen), "{report}");
}

#[test]
fn noiseless_data_is_fit_exactly() {
    let mut cfg = ModelConfig::desk();
    // Exact separation needs the hardest negatives; semi-hard mining stops
    // once some farther negative clears the margin.
    cfg.epochs = 40;
    cfg.lr = 1e-3;
    cfg.batch_size = 16;
    cfg.mining = Mining::Hardest;
    cfg.d_enc = 0.0;
    cfg.d_proj = 0.0;
    cfg.d_text = 0.0;
    let mut spec = DataSpec::for_model(&cfg);
    spec.sigma = 0.0;
    spec.train_per_class = 16;
    spec.test_per_class = 2;
    let data = generate(&spec).unwrap();
    let mut t = Trainer::new(&cfg).unwrap();
    t.fit(&data, 0, None).unwrap();
    let report = t.evals.last().unwrap().report;
    assert_eq!(report.seen, 1.0, "{report}");
}

#[test]
fn training_lowers_the_loss() {
    let mut cfg = ModelConfig::desk();
    cfg.epochs = 10;
    let data = generate(&DataSpec::for_model(&cfg)).unwrap();
    let mut t = Trainer::new(&cfg).unwrap();
    t.fit(&data, 0, None).unwrap();
    let first = t.history[0].loss.total;
    let tenth = t.history[9].loss.total;
    assert!(tenth < first, "epoch 1 {first}, epoch 10 {tenth}");
    assert_eq!(t.history.iter().map(|h| h.violations()).sum::<usize>(), 0);
}
