//! Gradient verification: analytic backprop against central finite
//! differences, plus the locality guarantee of the auxiliary loss.

mod common;

use blockrank_core::model::{forward_backward, LossMode, LossSpec};
use blockrank_core::objective::SignalAggregation;
use blockrank_core::training::finite_difference_grad_check;
use common::Fixture;

fn spec(mode: LossMode, l_star: usize) -> LossSpec {
    LossSpec {
        mode,
        lambda: 0.1,
        tau: 0.05,
        l_star,
        aggregation: SignalAggregation::Sum,
    }
}

#[test]
fn combined_loss_gradients_match_finite_differences() {
    let fx = Fixture::new(4, 2, 32, 2);
    let params = fx.params(3);
    let batch: Vec<_> = (0..2)
        .map(|i| fx.training_layout(&fx.listed_example(i, 100 + i as u64)))
        .collect();
    let report = finite_difference_grad_check(
        &params,
        &fx.model,
        &batch,
        &spec(LossMode::NtpPlusAux, 2),
        1e-4,
        40,
        7,
    )
    .unwrap();
    assert!(
        report.max_rel_error < 1e-4,
        "max relative error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn ntp_only_gradients_match_finite_differences() {
    let fx = Fixture::new(3, 2, 32, 2);
    let params = fx.params(5);
    let batch = vec![fx.training_layout(&fx.listed_example(0, 1))];
    let report = finite_difference_grad_check(
        &params,
        &fx.model,
        &batch,
        &spec(LossMode::NtpOnly, 1),
        1e-4,
        25,
        11,
    )
    .unwrap();
    assert!(
        report.max_rel_error < 1e-4,
        "max relative error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn aux_only_gradients_match_finite_differences() {
    let fx = Fixture::new(4, 3, 32, 2);
    let params = fx.params(9);
    let batch = vec![fx.training_layout(&fx.listed_example(0, 2))];
    let report = finite_difference_grad_check(
        &params,
        &fx.model,
        &batch,
        &spec(LossMode::AuxOnly, 2),
        1e-4,
        25,
        13,
    )
    .unwrap();
    assert!(
        report.max_rel_error < 1e-4,
        "max relative error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn aux_gradient_is_exactly_zero_above_l_star() {
    let fx = Fixture::new(4, 3, 32, 2);
    let params = fx.params(2);
    let (layout, positives) = fx.training_layout(&fx.listed_example(0, 4));
    let l_star = 2;
    let (_, grads, _) = forward_backward(
        &params,
        &fx.model,
        &layout,
        &positives,
        &spec(LossMode::AuxOnly, l_star),
    )
    .unwrap();
    for (name, tensor) in grads.named_tensors() {
        let above = name
            .strip_prefix("layers.")
            .and_then(|rest| rest.split('.').next())
            .and_then(|idx| idx.parse::<usize>().ok())
            .map(|idx| idx + 1 > l_star)
            .unwrap_or(false);
        let head_side = name == "lm_head" || name == "final_norm";
        if above || head_side {
            assert!(
                tensor.iter().all(|&v| v == 0.0),
                "{name} should carry no auxiliary gradient"
            );
        }
    }
    // Layers at or below l_star do learn from the auxiliary loss.
    let low_norm: f64 = grads.layers[0].w_q.iter().map(|v| v * v).sum();
    assert!(low_norm > 0.0);
}

#[test]
fn mean_aggregation_gradients_match_finite_differences() {
    let fx = Fixture::new(3, 2, 32, 2);
    let params = fx.params(21);
    let batch = vec![fx.training_layout(&fx.listed_example(1, 8))];
    let spec = LossSpec {
        mode: LossMode::NtpPlusAux,
        lambda: 0.2,
        tau: 0.05,
        l_star: 2,
        aggregation: SignalAggregation::Mean,
    };
    let report =
        finite_difference_grad_check(&params, &fx.model, &batch, &spec, 1e-4, 20, 3).unwrap();
    assert!(
        report.max_rel_error < 1e-4,
        "max relative error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn dense_causal_gradients_match_finite_differences() {
    let mut fx = Fixture::new(3, 2, 32, 2);
    fx.model.attention_mode = blockrank_core::model::AttentionMode::DenseCausal;
    let params = fx.params(6);
    let batch = vec![fx.training_layout(&fx.listed_example(0, 5))];
    let report = finite_difference_grad_check(
        &params,
        &fx.model,
        &batch,
        &spec(LossMode::NtpPlusAux, 2),
        1e-4,
        25,
        17,
    )
    .unwrap();
    assert!(
        report.max_rel_error < 1e-4,
        "max relative error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}
