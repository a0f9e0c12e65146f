use stft_core::checks::{model_grad_check, op_grad_checks};

#[test]
fn every_op_matches_central_differences() {
    for seed in 0..20 {
        for r in op_grad_checks(seed).unwrap() {
            assert!(r.report.checked > 0, "seed {seed} {}: nothing checked", r.name);
            assert!(
                r.report.max_rel_error < 1e-6,
                "seed {seed} {}: rel error {:.3e}",
                r.name,
                r.report.max_rel_error
            );
        }
    }
}

#[test]
fn full_loss_matches_central_differences() {
    for seed in 0..3 {
        let r = model_grad_check(seed, 2).unwrap();
        assert!(r.checked > 50, "seed {seed}: only {} coordinates checked", r.checked);
        assert!(r.max_rel_error < 1e-4, "seed {seed}: rel error {:.3e}", r.max_rel_error);
    }
}
