//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Run with `cargo test --release -p stft-core --test acceptance`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use stft_core::ablation::{self, AblationRow, Axis};
use stft_core::checks::{
    model_grad_check, op_grad_checks, published_fusion_counts, published_hm_error, spike_counts_by_threshold,
    tsf_degenerate, tucker_equivalence, PUBLISHED_GZSL,
};
use stft_core::data::{generate, DataSpec};
use stft_core::{Checkpoint, Dataset, Error, ModelConfig, Result, Trainer};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn hm_table() -> Result<Outcome> {
    let baselines = PUBLISHED_GZSL.iter().filter(|r| r.model != "STFT").count();
    let (err, row) = published_hm_error();
    outcome(
        err <= 0.01 && baselines >= 5,
        format!(
            "{} rows ({baselines} baseline), max |HM error| {err:.4} at {} {}",
            PUBLISHED_GZSL.len(),
            row.model,
            row.dataset
        ),
    )
}

fn tucker_oracle() -> Result<Outcome> {
    let diff = tucker_equivalence(50, 8)?;
    outcome(diff < 1e-10, format!("50 seeds, dims ≤ 8, max abs diff {diff:.2e}"))
}

fn param_counts() -> Result<Outcome> {
    let (tucker, dense) = published_fusion_counts();
    let reduction = 1.0 - tucker as f64 / dense as f64;
    outcome(
        tucker == 281_280 && dense == 16_777_216 && reduction >= 0.98,
        format!("rank 60: {tucker} vs dense {dense}, reduction {:.2}%", 100.0 * reduction),
    )
}

fn gradients() -> Result<Outcome> {
    let (mut op_worst, mut op_name, mut op_checked) = (0.0f64, String::new(), 0);
    let (mut e2e_worst, mut e2e_checked, mut e2e_skipped) = (0.0f64, 0, 0);
    for seed in 0..20 {
        for r in op_grad_checks(seed)? {
            op_checked += r.report.checked;
            if r.report.max_rel_error >= op_worst {
                op_worst = r.report.max_rel_error;
                op_name = r.name;
            }
        }
        let r = model_grad_check(seed, 1)?;
        e2e_worst = e2e_worst.max(r.max_rel_error);
        e2e_checked += r.checked;
        e2e_skipped += r.skipped;
    }
    outcome(
        op_worst < 1e-6 && e2e_worst < 1e-4,
        format!(
            "20 seeds; ops {op_checked} coords, max rel {op_worst:.2e} ({op_name}); \
             end-to-end {e2e_checked} coords ({e2e_skipped} on kinks skipped), max rel {e2e_worst:.2e}"
        ),
    )
}

fn spiking(cfg: &ModelConfig, data: &Dataset) -> Result<Outcome> {
    let mut c = cfg.clone();
    c.epochs = 10;
    let mut t = Trainer::new(&c)?;
    t.fit(data, 0, None)?;
    let violations: usize = t.history.iter().map(|h| h.violations()).sum();
    let (lo, hi) = t
        .history
        .iter()
        .flat_map(|h| &h.spikes)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), s| (l.min(s.v_th_min), h.max(s.v_th_max)));
    let grid = [0.2, 0.5, 1.0, 2.0, 5.0];
    let counts = spike_counts_by_threshold(&t, data, &grid)?;
    let monotone = counts.windows(2).all(|w| w[0] >= w[1]);
    outcome(
        violations == 0 && monotone && lo >= c.v_th_min && hi <= c.v_th_max,
        format!(
            "10 epochs, {violations} violations, thresholds in [{lo:.3}, {hi:.3}]; \
             spikes at v_th_init {grid:?}: {counts:?}"
        ),
    )
}

fn tsf() -> Result<Outcome> {
    let (constant, single) = tsf_degenerate(50)?;
    outcome(
        constant < 1e-12 && single < 1e-12,
        format!("constant input max diff {constant:.2e}, T=1 max diff {single:.2e}"),
    )
}

fn learning(trainer: &Trainer, elapsed: Duration) -> Result<Outcome> {
    let r = trainer.evals.last().expect("final evaluation").report;
    outcome(
        r.zsl >= 0.60 && r.hm > 0.0 && elapsed <= Duration::from_secs(600),
        format!("{} epochs: {r}, training took {:.0}s", trainer.epoch, elapsed.as_secs_f64()),
    )
}

fn ablation_direction(cfg: &ModelConfig, data: &Dataset, full: &Trainer) -> Result<Outcome> {
    let points = ablation::grid(Axis::Components, cfg, &Axis::Components.default_values())?;
    let full_hm = full.evals.last().expect("final evaluation").report.hm;
    let removals: Vec<AblationRow> = ablation::run(&points[1..], data, None)?;
    let wins = removals.iter().filter(|r| full_hm >= r.report.hm).count();
    let rows: Vec<String> = removals
        .iter()
        .map(|r| format!("{} {:.2}", r.label, 100.0 * r.report.hm))
        .collect();
    outcome(
        wins >= 3,
        format!("Full HM {:.2} ≥ {wins}/4 removals ({})", 100.0 * full_hm, rows.join(", ")),
    )
}

fn determinism(cfg: &ModelConfig, data: &Dataset, trained: &mut Trainer) -> Result<Outcome> {
    let mut c = cfg.clone();
    c.epochs = 3;
    let history = |t: &Trainer| serde_json::to_string(&(&t.history, &t.evals)).map_err(Error::from);
    let mut a = Trainer::new(&c)?;
    let mut b = Trainer::new(&c)?;
    a.fit(data, 1, None)?;
    b.fit(data, 1, None)?;
    let identical = history(&a)? == history(&b)? && a.history == b.history;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("checkpoint.json");
    trained.checkpoint().save(&path)?;
    let mut loaded = Trainer::from_checkpoint(Checkpoint::load(&path)?)?;
    let (x, y) = (trained.evaluate(data)?, loaded.evaluate(data)?);
    let diff = [x.seen - y.seen, x.unseen - y.unseen, x.hm - y.hm, x.zsl - y.zsl]
        .iter()
        .fold(0.0f64, |m, d| m.max(d.abs()));
    let emb = trained.embed(&data.test)?.max_abs_diff(&loaded.embed(&data.test)?);
    outcome(
        identical && diff < 1e-12 && emb < 1e-12,
        format!(
            "3-epoch histories identical: {identical}; reloaded metrics diff {diff:.1e}, embeddings diff {emb:.1e}"
        ),
    )
}

fn main() -> ExitCode {
    let cfg = ModelConfig::desk();
    let data = match generate(&DataSpec::for_model(&cfg)) {
        Ok(d) => d,
        Err(e) => {
            println!("FAIL setup: {e}");
            return ExitCode::FAILURE;
        }
    };
    let mut failures = 0;
    let mut report = |id: usize, name: &str, budget: Duration, f: &mut dyn FnMut() -> Result<Outcome>| {
        let start = Instant::now();
        let res = f();
        let took = start.elapsed();
        let (pass, detail) = match res {
            Ok(o) => (o.pass && took <= budget, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failures += 1;
        }
        println!(
            "{} [{id}] {name}: {detail} [{:.2}s, budget {}s]",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            budget.as_secs()
        );
    };

    report(1, "harmonic mean reproduces published rows", Duration::from_secs(1), &mut hm_table);
    report(2, "Tucker fusion equals dense bilinear at full rank", Duration::from_secs(10), &mut tucker_oracle);
    report(3, "fusion parameter count", Duration::from_secs(1), &mut param_counts);
    report(4, "gradient integrity", Duration::from_secs(120), &mut gradients);
    report(5, "spiking invariants", Duration::from_secs(120), &mut || spiking(&cfg, &data));
    report(6, "TSF degenerate cases", Duration::from_secs(1), &mut tsf);

    let start = Instant::now();
    let mut full = Trainer::new(&cfg);
    let trained = full.as_mut().map_err(|e| e.to_string()).and_then(|t| {
        t.fit(&data, 0, None).map_err(|e| e.to_string())?;
        Ok(t)
    });
    let elapsed = start.elapsed();
    match trained {
        Ok(trainer) => {
            report(7, "desk-scale learning signal", Duration::from_secs(600), &mut || learning(trainer, elapsed));
            report(8, "ablation direction", Duration::from_secs(3600).saturating_sub(elapsed), &mut || {
                ablation_direction(&cfg, &data, trainer)
            });
            report(9, "determinism and checkpoint round trip", Duration::from_secs(300), &mut || {
                determinism(&cfg, &data, trainer)
            });
        }
        Err(e) => {
            for (id, name) in [(7, "desk-scale learning signal"), (8, "ablation direction"), (9, "determinism")] {
                failures += 1;
                println!("FAIL [{id}] {name}: training failed: {e}");
            }
        }
    }

    println!("{} of 9 criteria passed", 9 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
