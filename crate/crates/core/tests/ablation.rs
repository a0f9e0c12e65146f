use stft_core::ablation::{format_table, grid, run, Axis};
use stft_core::data::{generate, DataSpec};
use stft_core::nn::ParamStore;
use stft_core::train::stream_rng;
use stft_core::{ModelConfig, Stft, ThresholdMode, TsfMode};

#[test]
fn tsf_rows_differ_only_in_aggregation() {
    let base = ModelConfig::desk();
    let pts = grid(Axis::Tsf, &base, &Axis::Tsf.default_values()).unwrap();
    assert_eq!(pts.len(), 2);
    let mut off = pts[1].config.clone();
    assert_eq!(off.tsf_mode, TsfMode::Uniform);
    off.tsf_mode = pts[0].config.tsf_mode;
    assert_eq!(off, pts[0].config);
}

#[test]
fn rank_grid_grows_the_fusion_strictly() {
    let mut base = ModelConfig::desk();
    base.head_dim = 10;
    base.h_proj = 10;
    base.h_emb = 80;
    let pts = grid(Axis::Rank, &base, &Axis::Rank.default_values()).unwrap();
    let counts: Vec<usize> = pts
        .iter()
        .map(|p| {
            let mut store = ParamStore::new();
            Stft::new(&p.config, &mut store, &mut stream_rng(0, 0)).unwrap().fusion_param_count()
        })
        .collect();
    assert_eq!(counts.len(), 4);
    assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
}

#[test]
fn component_removals_each_change_one_switch() {
    let base = ModelConfig::desk();
    let pts = grid(Axis::Components, &base, &Axis::Components.default_values()).unwrap();
    let labels: Vec<&str> = pts.iter().map(|p| p.label.as_str()).collect();
    assert_eq!(labels, ["Full", "W/o TSF", "W/o GLP", "W/o DTH", "W/o LKC"]);
    assert_eq!(pts[0].config, base);
    assert_eq!(pts[3].config.threshold_mode, ThresholdMode::Fixed(base.v_th_init));
    assert!(!pts[2].config.glp && !pts[4].config.lkc);
}

#[test]
fn loss_weight_grid_matches_the_published_pairs() {
    let base = ModelConfig::desk();
    let pts = grid(Axis::LossWeights, &base, &Axis::LossWeights.default_values()).unwrap();
    let pairs: Vec<(f64, f64)> = pts.iter().map(|p| (p.config.w_triplet, p.config.w_proj_recon)).collect();
    assert_eq!(pairs, [(0.2, 0.8), (0.8, 0.2), (0.7, 0.3), (0.3, 0.7), (0.5, 0.5)]);
}

#[test]
fn threshold_sweep_reports_spike_rates() {
    let mut base = ModelConfig::desk();
    base.epochs = 1;
    let mut spec = DataSpec::for_model(&base);
    spec.train_per_class = 4;
    spec.test_per_class = 2;
    let data = generate(&spec).unwrap();
    let pts = grid(Axis::Threshold, &base, &Axis::Threshold.default_values()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let rows = run(&pts, &data, Some(dir.path())).unwrap();
    assert_eq!(rows.len(), 4);
    for (i, r) in rows.iter().enumerate() {
        assert!((0.0..=1.0).contains(&r.spike_rate), "{r:?}");
        assert!(dir.path().join(format!("{i}.jsonl")).exists());
    }
    // Fixed thresholds 0.5 < 1 < 2 fire progressively less.
    assert!(rows[1].spike_rate >= rows[2].spike_rate && rows[2].spike_rate >= rows[3].spike_rate);
    let table = format_table(Axis::Threshold, &rows);
    assert_eq!(table.lines().count(), 5);
}
