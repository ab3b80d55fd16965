//! Training-loop behavior: determinism, checkpoint resume, clipping, and a
//! short loss-decrease smoke run.

mod common;

use blockrank_core::model::{forward_backward, LossMode};
use blockrank_core::training::{
    clip_global_norm, load_train_state, save_train_state, train, TrainConfig, TrainState,
};
use common::Fixture;

fn quick_cfg(fx: &Fixture, total_steps: usize) -> TrainConfig {
    TrainConfig {
        total_steps,
        warmup_steps: 2,
        batch_size: 4,
        l_star: 2,
        l_chunk: fx.l_chunk,
        n_candidates: fx.task.n_docs,
        eval_every: 0,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_trains_to_identical_parameters() {
    let fx = Fixture::new(3, 2, 32, 2);
    let dataset = fx.examples(10);
    let cfg = quick_cfg(&fx, 5);
    let mut a = TrainState::new(&fx.model, 1);
    let mut b = TrainState::new(&fx.model, 1);
    train(&mut a, &fx.model, &fx.vocab, &fx.template, &dataset, &cfg, None).unwrap();
    train(&mut b, &fx.model, &fx.vocab, &fx.template, &dataset, &cfg, None).unwrap();
    assert_eq!(a.params, b.params, "two identical runs must agree bit-exactly");
    assert_eq!(a.opt.m, b.opt.m);
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let fx = Fixture::new(3, 2, 32, 2);
    let dataset = fx.examples(10);

    // One uninterrupted 2-step run, checkpointing after every step.
    let mut cfg = quick_cfg(&fx, 2);
    cfg.eval_every = 1;
    let dir = tempfile::tempdir().unwrap();
    let mut straight = TrainState::new(&fx.model, 2);
    train(
        &mut straight,
        &fx.model,
        &fx.vocab,
        &fx.template,
        &dataset,
        &cfg,
        Some(dir.path()),
    )
    .unwrap();

    // Resume the step-1 checkpoint and finish under the same config.
    let ckpt = dir.path().join("checkpoint_step1.bin");
    let (mut resumed, model, meta) = load_train_state(&ckpt).unwrap();
    assert_eq!(model, fx.model);
    assert_eq!(resumed.step, 1);
    assert!(meta.is_some());
    train(
        &mut resumed,
        &fx.model,
        &fx.vocab,
        &fx.template,
        &dataset,
        &cfg,
        None,
    )
    .unwrap();
    assert_eq!(
        resumed.params, straight.params,
        "save -> load -> one step must equal two uninterrupted steps"
    );
    assert_eq!(resumed.opt.v, straight.opt.v);
}

#[test]
fn tampered_checkpoint_fails_digest_validation() {
    let fx = Fixture::new(3, 1, 16, 1);
    let state = TrainState::new(&fx.model, 0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    save_train_state(&path, &state, &fx.model, &quick_cfg(&fx, 1), None).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xFF;
    std::fs::write(&path, bytes).unwrap();
    assert!(load_train_state(&path).is_err());
}

#[test]
fn clipping_caps_the_global_norm() {
    let fx = Fixture::new(3, 2, 32, 2);
    let params = fx.params(4);
    let (layout, positives) = fx.training_layout(&fx.listed_example(0, 1));
    let (_, mut grads, _) = forward_backward(
        &params,
        &fx.model,
        &layout,
        &positives,
        &TrainConfig::default().loss_spec(),
    )
    .unwrap();
    let before = grads.global_norm();
    let cap = before / 3.0;
    clip_global_norm(&mut grads, cap);
    let after = grads.global_norm();
    assert!(after <= cap + 1e-6, "clipped norm {after} exceeds cap {cap}");
    // Clipping below the cap is a no-op.
    let mut small = grads.clone();
    let unchanged = clip_global_norm(&mut small, after * 10.0);
    assert!((unchanged - after).abs() < 1e-12);
    assert_eq!(small, grads);
}

#[test]
fn loss_mode_flag_reaches_the_objective() {
    let fx = Fixture::new(3, 2, 32, 2);
    let params = fx.params(4);
    let (layout, positives) = fx.training_layout(&fx.listed_example(0, 1));
    let mut spec = TrainConfig::default().loss_spec();
    spec.mode = LossMode::NtpOnly;
    let (ntp_only, _, _) =
        forward_backward(&params, &fx.model, &layout, &positives, &spec).unwrap();
    assert_eq!(ntp_only.total, ntp_only.ntp);
    spec.mode = LossMode::AuxOnly;
    let (aux_only, _, _) =
        forward_backward(&params, &fx.model, &layout, &positives, &spec).unwrap();
    assert!((aux_only.total - spec.lambda * aux_only.aux).abs() < 1e-15);
}

#[test]
fn short_training_reduces_the_loss() {
    let fx = Fixture::new(4, 2, 32, 2);
    let dataset = fx.examples(40);
    let mut cfg = quick_cfg(&fx, 150);
    cfg.warmup_steps = 10;
    let mut state = TrainState::new(&fx.model, 3);
    let logs = train(
        &mut state,
        &fx.model,
        &fx.vocab,
        &fx.template,
        &dataset,
        &cfg,
        None,
    )
    .unwrap();
    let head: f64 = logs[..20].iter().map(|l| l.total).sum::<f64>() / 20.0;
    let tail: f64 = logs[logs.len() - 20..].iter().map(|l| l.total).sum::<f64>() / 20.0;
    assert!(
        tail < head,
        "loss should fall: first-20 mean {head:.4}, last-20 mean {tail:.4}"
    );
}
