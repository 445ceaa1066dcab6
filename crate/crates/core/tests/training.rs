use proptest::prelude::*;

use svdkl::synthetic::piecewise_regression;
use svdkl::trainer::toy_problem;
use svdkl::{grad_check, train_regressor, TrainConfig};

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 4,
        batch_size: 16,
        inducing_count: 6,
        layer_sizes: vec![6, 3],
        pretrain_epochs: 3,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_models() {
    let (x, y) = piecewise_regression(40, 0.1, 9).unwrap();
    let cfg = small_config(4);
    let (a, la) = train_regressor(x.view(), y.view(), &cfg).unwrap();
    let (b, lb) = train_regressor(x.view(), y.view(), &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(la.records, lb.records);
    let (c, _) = train_regressor(x.view(), y.view(), &small_config(5)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn small_steps_do_not_increase_the_objective() {
    let (x, y) = piecewise_regression(30, 0.1, 2).unwrap();
    let mut cfg = small_config(1);
    cfg.batch_size = 30;
    cfg.step_size = 1e-4;
    cfg.net_step_size = 1e-5;
    cfg.epochs = 1;
    cfg.log_full_elbo = true;
    let (start, _) = train_regressor(x.view(), y.view(), &cfg).unwrap();
    cfg.epochs = 100;
    let (end, log) = train_regressor(x.view(), y.view(), &cfg).unwrap();
    assert_eq!(log.records.len(), 100);
    let first = log.records[0].full_elbo.unwrap();
    let last = log.records[99].full_elbo.unwrap();
    assert!(last >= first, "{first} -> {last}");
    assert!(end.elbo_full(x.view(), y.view()).unwrap() >= start.elbo_full(x.view(), y.view()).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn gradients_match_finite_differences(seed in 0u64..10_000) {
        let cfg = small_config(seed);
        let (model, x, y) = toy_problem(&cfg, 3, 2, 10).unwrap();
        let report = grad_check(&model, x.view(), y.view(), 1e-4).unwrap();
        prop_assert!(report.passed(), "{:?}", report.groups);
    }
}
