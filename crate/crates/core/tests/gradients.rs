mod common;

use gintrip_core::training::{grad_check, LOSS_NAMES};

#[test]
fn all_losses_match_central_differences() {
    for seed in 0..3 {
        let data = common::planted(6, 2, 0.1, 240, seed);
        let model = common::model(&data, 8, seed);
        let report = grad_check(&model, &data.train[seed as usize], 1e-4).unwrap();
        for (name, err) in LOSS_NAMES.iter().zip(report.max_relative_error) {
            assert!(err < 1e-4, "seed {seed} {name}: {err:e}");
        }
        assert!(report.passed);
        assert_eq!(report.n_parameters, model.params.n_scalars());
    }
}

#[test]
fn report_fails_below_achievable_tolerance() {
    let data = common::planted(6, 2, 0.1, 240, 9);
    let model = common::model(&data, 8, 9);
    let report = grad_check(&model, &data.train[0], 0.0).unwrap();
    assert!(!report.passed);
}
