use stft_core::checks::spike_counts_by_threshold;
use stft_core::data::{generate, DataSpec};
use stft_core::{ModelConfig, Trainer};

#[test]
fn short_run_keeps_every_spiking_invariant() {
    let mut cfg = ModelConfig::desk();
    cfg.epochs = 3;
    let mut spec = DataSpec::for_model(&cfg);
    spec.train_per_class = 16;
    let data = generate(&spec).unwrap();
    let mut t = Trainer::new(&cfg).unwrap();
    t.fit(&data, 0, None).unwrap();
    for rec in &t.history {
        assert_eq!(rec.violations(), 0);
        for s in &rec.spikes {
            assert!(s.spikes <= s.neurons);
            assert!(s.v_th_min >= cfg.v_th_min && s.v_th_max <= cfg.v_th_max, "{s:?}");
        }
    }

    let grid = [0.2, 0.5, 1.0, 2.0, 5.0];
    let counts = spike_counts_by_threshold(&t, &data, &grid).unwrap();
    assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
    assert!(counts[0] > counts[4]);
}
