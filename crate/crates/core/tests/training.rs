use cape::harness::eval::split_seeds;
use cape::harness::train::Trainer;
use cape::harness::{evaluate_model, robustness_sweep, train, EvalSplit, ExperimentConfig};

#[test]
fn smoke_run_completes_with_finite_loss() {
    let cfg = ExperimentConfig::smoke();
    let outcome = train(&cfg, None, false).unwrap();
    assert!(outcome.diverged.is_none());
    assert_eq!(outcome.checkpoint.step, 50);
    assert!(outcome
        .log
        .iter()
        .all(|l| l.loss.is_finite() && l.grad_norm.is_finite()));
    assert_eq!(outcome.log.last().unwrap().step, 49);
}

/// The standard desk config, trained once: loss halves, training scenes
/// score at least as well as held-out ones, and extrinsic noise hurts more
/// as it grows.
#[test]
fn desk_run() {
    let cfg = ExperimentConfig::default();
    let mut trainer = Trainer::new(&cfg).unwrap();
    let mut losses = Vec::with_capacity(cfg.train.steps);
    for _ in 0..cfg.train.steps {
        losses.push(trainer.step().unwrap().unwrap().loss);
    }
    // Single-batch losses are noisy; the final loss is the mean of the last
    // 50 steps.
    let final_loss = losses[losses.len() - 50..].iter().sum::<f64>() / 50.0;
    assert!(
        final_loss <= 0.5 * losses[10],
        "step 10 {} final {final_loss}",
        losses[10]
    );

    let ckpt = trainer.checkpoint();
    let (model, store) = ckpt.model().unwrap();
    let seen = evaluate_model(&model, &store, &cfg, &split_seeds(&cfg, EvalSplit::Train), None).unwrap();
    let held_out = evaluate_model(&model, &store, &cfg, &split_seeds(&cfg, EvalSplit::HeldOut), None).unwrap();
    assert!(
        seen.map >= held_out.map - 0.02,
        "train {} held-out {}",
        seen.map,
        held_out.map
    );

    let report = robustness_sweep(&[("desk".into(), ckpt)], &[0.0, 30.0, 90.0, 180.0], 5, 1, None).unwrap();
    let drops = &report.curves[0].mean_drop;
    assert_eq!(drops[0], 0.0);
    assert!(drops.windows(2).all(|w| w[1] >= w[0]), "{drops:?}");
}
