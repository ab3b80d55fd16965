//! Dev probe: trains the criterion-7 configuration and prints attention P@1
//! at several step budgets for the full and ntp-only objectives.

use blockrank_core::corpus::{
    build_candidate_list, generate_synthetic_dataset, reserved_tokens, SyntheticTaskConfig,
    TemplateConfig, Vocabulary,
};
use blockrank_core::evaluation::{evaluate_dataset, layerwise_attention_precision, EvalOptions};
use blockrank_core::inference::InferenceMethod;
use blockrank_core::model::{AttentionMode, LossMode, ModelConfig};
use blockrank_core::training::{train, TrainConfig, TrainState};

fn main() {
    let task = SyntheticTaskConfig {
        vocab_size: 500,
        n_docs: 8,
        doc_len: 16,
        query_span_len: 6,
        distractor_overlap: 0.25,
        seed: 7,
    };
    let template = TemplateConfig::default();
    let vocab = Vocabulary::build(&task.corpus_texts(), &reserved_tokens(&template)).unwrap();
    let model = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 64,
        head_dim: 32,
        vocab_size: vocab.len(),
        mlp_hidden: 128,
        rotary_base: 10_000.0,
        max_position: 8300,
        attention_mode: AttentionMode::Blockwise,
    };
    let train_data = generate_synthetic_dataset(&task, 2000).unwrap();
    let mut eval_task = task.clone();
    eval_task.seed = 1007;
    let eval_raw = generate_synthetic_dataset(&eval_task, 500).unwrap();
    let eval: Vec<_> = eval_raw
        .iter()
        .enumerate()
        .map(|(i, ex)| build_candidate_list(ex, 8, 0xE0 + i as u64).unwrap())
        .collect();

    let opts = EvalOptions {
        l_star: 2,
        l_chunk: 32,
        ..EvalOptions::default()
    };

    for (name, mode) in [
        ("full", LossMode::NtpPlusAux),
        ("ntp_only", LossMode::NtpOnly),
        ("aux_only", LossMode::AuxOnly),
    ] {
        let budgets = [250usize, 500, 1000, 2000];
        let mut state = TrainState::new(&model, 5);
        let start = std::time::Instant::now();
        for (i, &budget) in budgets.iter().enumerate() {
            let cfg = TrainConfig {
                total_steps: budget,
                warmup_steps: 100,
                batch_size: 16,
                l_star: 2,
                l_chunk: 32,
                n_candidates: 8,
                loss_mode: mode,
                seed: 5,
                ..TrainConfig::default()
            };
            train(&mut state, &model, &vocab, &template, &train_data, &cfg, None).unwrap();
            let (_, attn) = evaluate_dataset(
                &state.params,
                &model,
                &vocab,
                &template,
                &eval,
                InferenceMethod::Attention,
                &opts,
            )
            .unwrap();
            let greedy_p1 = if i + 1 == budgets.len() {
                let (_, g) = evaluate_dataset(
                    &state.params,
                    &model,
                    &vocab,
                    &template,
                    &eval[..100],
                    InferenceMethod::Greedy,
                    &opts,
                )
                .unwrap();
                g.p_at_1
            } else {
                f64::NAN
            };
            println!(
                "{name:9} steps {budget:5}  attn P@1 {:.3}  MRR {:.3}  greedy P@1 {:.3}  elapsed {:.0}s",
                attn.p_at_1,
                attn.mrr_at_10,
                greedy_p1,
                start.elapsed().as_secs_f64()
            );
        }
        let curve = layerwise_attention_precision(
            &state.params,
            &model,
            &vocab,
            &template,
            &eval[..200],
            &opts,
        )
        .unwrap();
        println!("{name:9} layerwise P@1 curve: {curve:?}");
    }
}
