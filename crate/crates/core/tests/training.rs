use dircp::config::RunConfig;
use dircp::learn::{soft_loss_and_grad, train_scorer, LearnError};

/// Default scenes at half resolution, to keep training fast.
fn toy_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.grid.height = 32;
    cfg.grid.width = 32;
    cfg.grid.cell_size = 2.0;
    cfg
}

#[test]
fn zero_learning_rate_keeps_the_initialization() {
    let mut cfg = toy_config();
    cfg.train.steps = 3;
    cfg.train.lr = 0.0;
    cfg.train.batch = 2;
    let attention = cfg.attention().unwrap();
    let init = cfg.scorer_init();
    let out = train_scorer(&init, &attention, &cfg.training_batch().unwrap(), &cfg.train_config()).unwrap();
    assert_eq!(out.params, init);
    assert_eq!(out.log.len(), 4);
    assert!(out.log.iter().all(|r| r.dw_loss == out.log[0].dw_loss));
}

#[test]
fn training_lowers_the_directional_loss() {
    let cfg = toy_config();
    assert_eq!(cfg.train.steps, 200);
    assert_eq!(cfg.train.batch, 8);
    let attention = cfg.attention().unwrap();
    let batch = cfg.training_batch().unwrap();
    let out = train_scorer(&cfg.scorer_init(), &attention, &batch, &cfg.train_config()).unwrap();
    assert!(
        out.final_loss() < out.initial_loss(),
        "{} -> {}",
        out.initial_loss(),
        out.final_loss()
    );
    let csv = out.log_csv();
    assert_eq!(csv.lines().count(), cfg.train.steps + 2);
    assert!(csv.starts_with("step,dw_loss"));
}

#[test]
fn training_is_deterministic() {
    let mut cfg = toy_config();
    cfg.train.steps = 4;
    cfg.train.batch = 3;
    let attention = cfg.attention().unwrap();
    let batch = cfg.training_batch().unwrap();
    let a = train_scorer(&cfg.scorer_init(), &attention, &batch, &cfg.train_config()).unwrap();
    let b = train_scorer(&cfg.scorer_init(), &attention, &batch, &cfg.train_config()).unwrap();
    assert_eq!(a.params.to_checkpoint(), b.params.to_checkpoint());
    assert_eq!(a.log_csv(), b.log_csv());
}

#[test]
fn bad_hyperparameters_are_rejected() {
    let mut cfg = toy_config();
    cfg.train.batch = 1;
    let attention = cfg.attention().unwrap();
    let batch = cfg.training_batch().unwrap();
    let mut tc = cfg.train_config();
    tc.steps = 0;
    assert!(matches!(
        train_scorer(&cfg.scorer_init(), &attention, &batch, &tc),
        Err(LearnError::InvalidHyper(_))
    ));
    let mut tc = cfg.train_config();
    tc.soft.tau = 0.0;
    assert!(soft_loss_and_grad(&cfg.scorer_init(), &attention, &batch[0], &tc.soft).is_err());
    assert!(train_scorer(&cfg.scorer_init(), &attention, &[], &cfg.train_config()).is_err());
}

#[test]
fn zero_sigma_ignores_off_sectors_in_the_gradient_weighting() {
    let mut cfg = toy_config();
    cfg.train.batch = 4;
    let attention = cfg.attention().unwrap();
    let batch = cfg.training_batch().unwrap();
    let mut tc = cfg.train_config();
    tc.soft.sigma = 0.0;
    for ts in &batch {
        let out = soft_loss_and_grad(&cfg.scorer_init(), &attention, ts, &tc.soft).unwrap();
        let on: Vec<f64> = (0..ts.scene.mask.n_dir())
            .filter(|&s| ts.scene.mask.is_on(s))
            .map(|s| out.loss.per_direction[s])
            .collect();
        let mean = on.iter().sum::<f64>() / on.len() as f64;
        assert!((out.loss.dw_total - mean).abs() <= 1e-12 * mean.max(1.0));
        assert!(out.grad.iter().all(|g| g.is_finite()));
    }
}
