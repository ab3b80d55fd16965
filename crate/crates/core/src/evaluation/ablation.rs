//! Ablation grids over loss mode, attention mode, inference method, and
//! query-in-prefix, each cell trained and evaluated on the synthetic task.

use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_candidate_list, generate_synthetic_dataset, reserved_tokens, SyntheticTaskConfig,
    TemplateConfig, Vocabulary,
};
use crate::error::Result;
use crate::evaluation::metrics::MetricsReport;
use crate::evaluation::{evaluate_dataset, EvalOptions};
use crate::inference::InferenceMethod;
use crate::model::{AttentionMode, LossMode, ModelConfig};
use crate::training::{train, TrainConfig, TrainState};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCellSpec {
    pub label: String,
    pub loss_mode: LossMode,
    pub attention_mode: AttentionMode,
    pub query_in_prefix: bool,
    pub methods: Vec<InferenceMethod>,
}

/// The loss-mode and inference-method grid plus the query-in-prefix rows.
pub fn default_grid() -> Vec<AblationCellSpec> {
    let both = vec![InferenceMethod::Greedy, InferenceMethod::Attention];
    let mut cells = Vec::new();
    for (label, loss_mode) in [
        ("blockwise_full", LossMode::NtpPlusAux),
        ("blockwise_wo_aux", LossMode::NtpOnly),
        ("blockwise_wo_ntp", LossMode::AuxOnly),
    ] {
        cells.push(AblationCellSpec {
            label: label.into(),
            loss_mode,
            attention_mode: AttentionMode::Blockwise,
            query_in_prefix: true,
            methods: both.clone(),
        });
    }
    cells.push(AblationCellSpec {
        label: "dense_full_ft".into(),
        loss_mode: LossMode::NtpOnly,
        attention_mode: AttentionMode::DenseCausal,
        query_in_prefix: true,
        methods: both.clone(),
    });
    cells.push(AblationCellSpec {
        label: "dense_full_ft_w_aux".into(),
        loss_mode: LossMode::NtpPlusAux,
        attention_mode: AttentionMode::DenseCausal,
        query_in_prefix: true,
        methods: both.clone(),
    });
    cells.push(AblationCellSpec {
        label: "blockwise_full_no_query_prefix".into(),
        loss_mode: LossMode::NtpPlusAux,
        attention_mode: AttentionMode::Blockwise,
        query_in_prefix: false,
        methods: both,
    });
    cells
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationCellResult {
    pub spec: AblationCellSpec,
    /// Metrics per inference method, in the cell's method order.
    pub metrics: Vec<(InferenceMethod, MetricsReport)>,
    /// A failed cell is recorded and the grid continues.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub cells: Vec<AblationCellResult>,
    pub n_train: usize,
    pub n_eval: usize,
}

pub struct AblationContext {
    pub task: SyntheticTaskConfig,
    pub model_shape: ModelConfig,
    pub train: TrainConfig,
    pub n_train: usize,
    pub n_eval: usize,
}

fn run_cell(ctx: &AblationContext, spec: &AblationCellSpec) -> Result<Vec<(InferenceMethod, MetricsReport)>> {
    let template = TemplateConfig {
        query_in_prefix: spec.query_in_prefix,
        ..TemplateConfig::default()
    };
    let corpus = ctx.task.corpus_texts();
    let vocab = Vocabulary::build(&corpus, &reserved_tokens(&template))?;
    let mut model = ctx.model_shape.clone();
    model.vocab_size = vocab.len();
    model.attention_mode = spec.attention_mode;
    if spec.attention_mode == AttentionMode::DenseCausal {
        let span = (ctx.task.n_docs + 2) * ctx.train.l_chunk + 1;
        model.max_position = model.max_position.max(span);
    }
    let mut train_cfg = ctx.train.clone();
    train_cfg.loss_mode = spec.loss_mode;
    train_cfg.n_candidates = ctx.task.n_docs;

    let dataset = generate_synthetic_dataset(&ctx.task, ctx.n_train)?;
    let mut eval_task = ctx.task.clone();
    eval_task.seed = ctx.task.seed.wrapping_add(1);
    let eval_raw = generate_synthetic_dataset(&eval_task, ctx.n_eval)?;
    let eval: Vec<_> = eval_raw
        .iter()
        .enumerate()
        .map(|(i, ex)| build_candidate_list(ex, ctx.task.n_docs, 0xEA5E ^ i as u64))
        .collect::<Result<_>>()?;

    let mut state = TrainState::new(&model, train_cfg.seed);
    train(&mut state, &model, &vocab, &template, &dataset, &train_cfg, None)?;

    let opts = EvalOptions {
        l_star: train_cfg.l_star,
        l_chunk: train_cfg.l_chunk,
        query_offset: train_cfg.query_offset,
        aggregation: train_cfg.aggregation,
        ..EvalOptions::default()
    };
    let mut out = Vec::new();
    for &method in &spec.methods {
        let (_, report) = evaluate_dataset(&state.params, &model, &vocab, &template, &eval, method, &opts)?;
        out.push((method, report));
    }
    Ok(out)
}

/// Trains and evaluates every cell; failures are recorded per cell and the
/// grid keeps going.
pub fn run_ablation_grid(ctx: &AblationContext, cells: &[AblationCellSpec]) -> AblationReport {
    let results = cells
        .iter()
        .map(|spec| match run_cell(ctx, spec) {
            Ok(metrics) => AblationCellResult {
                spec: spec.clone(),
                metrics,
                error: None,
            },
            Err(e) => AblationCellResult {
                spec: spec.clone(),
                metrics: Vec::new(),
                error: Some(e.to_string()),
            },
        })
        .collect();
    AblationReport {
        cells: results,
        n_train: ctx.n_train,
        n_eval: ctx.n_eval,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_the_expected_shape() {
        let cells = default_grid();
        assert_eq!(cells.len(), 6);
        assert!(cells.iter().any(|c| !c.query_in_prefix));
        assert!(cells
            .iter()
            .any(|c| c.attention_mode == AttentionMode::DenseCausal));
        for c in &cells {
            assert_eq!(c.methods.len(), 2);
        }
    }

    #[test]
    fn failing_cell_is_recorded_and_grid_continues() {
        let task = SyntheticTaskConfig {
            vocab_size: 40,
            n_docs: 3,
            doc_len: 6,
            query_span_len: 3,
            distractor_overlap: 0.0,
            seed: 1,
        };
        let model_shape = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 8,
            head_dim: 8,
            vocab_size: 0, // overwritten per cell
            mlp_hidden: 16,
            rotary_base: 10_000.0,
            max_position: 8300,
            attention_mode: AttentionMode::Blockwise,
        };
        let train = TrainConfig {
            total_steps: 1,
            warmup_steps: 0,
            batch_size: 2,
            l_star: 1,
            l_chunk: 20,
            ..TrainConfig::default()
        };
        let ctx = AblationContext {
            task,
            model_shape,
            train,
            n_train: 4,
            n_eval: 2,
        };
        let bad = AblationCellSpec {
            label: "broken".into(),
            loss_mode: LossMode::NtpPlusAux,
            attention_mode: AttentionMode::Blockwise,
            query_in_prefix: true,
            methods: vec![InferenceMethod::Attention],
        };
        let mut ctx_bad = ctx;
        ctx_bad.train.l_star = 5; // exceeds depth: the cell must fail
        let report = run_ablation_grid(&ctx_bad, &[bad.clone(), bad]);
        assert_eq!(report.cells.len(), 2);
        assert!(report.cells[0].error.is_some());
        assert!(report.cells[1].error.is_some());
    }
}
