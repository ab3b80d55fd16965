//! Evaluation: ranking metrics, attention-cost accounting, latency scaling,
//! attention-map exports, digit-entropy analysis, and ablation grids.

pub mod ablation;
pub mod bench;
pub mod complexity;
pub mod entropy;
pub mod heatmaps;
pub mod metrics;

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{assemble_prompt, RetrievalExample, TemplateConfig, Vocabulary};
use crate::error::Result;
use crate::inference::{
    constrained_beam_decode, greedy_decode_id, rank_by_attention, rank_indices, DecodeContext,
    InferenceMethod, RankedPrediction,
};
use crate::layout::{
    assign_positions, assign_sequential_positions, chunk_segments, with_default_signal_tokens,
    ChunkLayout,
};
use crate::model::{
    forward, AttentionMode, ModelConfig, Parameters, QkCachePolicy, TraceOptions,
};
use crate::objective::{attention_mass_scores, SignalAggregation};

pub use ablation::{default_grid, run_ablation_grid, AblationCellSpec, AblationContext, AblationReport};
pub use bench::{aic, linear_fit, quadratic_fit, scaling_benchmark, BenchmarkSpec, LatencyRecord};
pub use complexity::{analytic_scored_pairs, count_attention_macs, instrumented_scored_pairs, pair_ratio};
pub use entropy::{id_digit_entropy, random_baseline, random_id_lists, DigitEntropyStats};
pub use heatmaps::{export_attention_heatmaps, write_matrix_csv, HeatmapBundle};
pub use metrics::{compute_metrics, query_metrics, MetricsReport, QueryMetrics};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Layer for attention-based inference (1-indexed).
    pub l_star: usize,
    pub top_k: usize,
    pub beam: usize,
    pub step_cap: usize,
    pub l_chunk: usize,
    pub query_offset: usize,
    pub aggregation: SignalAggregation,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            l_star: 2,
            top_k: 10,
            beam: 10,
            step_cap: 8,
            l_chunk: 32,
            query_offset: crate::layout::DEFAULT_QUERY_OFFSET,
            aggregation: SignalAggregation::Sum,
        }
    }
}

/// Builds the inference layout (no teacher-forced answer) for one example.
pub fn inference_layout(
    example: &RetrievalExample,
    vocab: &Vocabulary,
    template: &TemplateConfig,
    model: &ModelConfig,
    opts: &EvalOptions,
) -> Result<ChunkLayout> {
    let segments = assemble_prompt(example, vocab, template)?;
    let layout = chunk_segments(&segments, opts.l_chunk)?;
    let layout = match model.attention_mode {
        AttentionMode::Blockwise => assign_positions(layout, opts.query_offset)?,
        AttentionMode::DenseCausal => assign_sequential_positions(layout),
    };
    with_default_signal_tokens(layout, vocab)
}

/// Runs one inference method over a dataset (candidate lists already built)
/// and scores the rankings. Per-query work runs in parallel; outputs keep
/// dataset order.
pub fn evaluate_dataset(
    params: &Parameters,
    model: &ModelConfig,
    vocab: &Vocabulary,
    template: &TemplateConfig,
    examples: &[RetrievalExample],
    method: InferenceMethod,
    opts: &EvalOptions,
) -> Result<(Vec<RankedPrediction>, MetricsReport)> {
    let predictions: Vec<RankedPrediction> = examples
        .par_iter()
        .map(|example| -> Result<RankedPrediction> {
            match method {
                InferenceMethod::Attention => {
                    let layout = inference_layout(example, vocab, template, model, opts)?;
                    let top_k = opts.top_k.min(layout.n_docs());
                    rank_by_attention(params, model, &layout, opts.l_star, top_k, opts.aggregation)
                }
                InferenceMethod::Greedy | InferenceMethod::Beam => {
                    let segments = assemble_prompt(example, vocab, template)?;
                    let ctx = DecodeContext {
                        params,
                        cfg: model,
                        vocab,
                        segments: &segments,
                        l_chunk: opts.l_chunk,
                        query_offset: opts.query_offset,
                        step_cap: opts.step_cap,
                    };
                    match method {
                        InferenceMethod::Greedy => greedy_decode_id(&ctx),
                        _ => constrained_beam_decode(&ctx, opts.beam.min(layout_beam_cap(example))),
                    }
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<BTreeSet<String>> = examples
        .iter()
        .map(|e| e.positive_ids().into_iter().collect())
        .collect();
    let report = compute_metrics(&predictions, &labels)?;
    Ok((predictions, report))
}

fn layout_beam_cap(example: &RetrievalExample) -> usize {
    example.candidates.len().max(1)
}

/// Attention-ranking Precision@1 per layer: one full-depth forward caching
/// Q/K at every layer, scored layer by layer. The curve has `n_layers`
/// entries.
pub fn layerwise_attention_precision(
    params: &Parameters,
    model: &ModelConfig,
    vocab: &Vocabulary,
    template: &TemplateConfig,
    examples: &[RetrievalExample],
    opts: &EvalOptions,
) -> Result<Vec<f64>> {
    let hits: Vec<Vec<bool>> = examples
        .par_iter()
        .map(|example| -> Result<Vec<bool>> {
            let layout = inference_layout(example, vocab, template, model, opts)?;
            let trace = forward(
                params,
                model,
                &layout,
                &TraceOptions {
                    qk_cache: QkCachePolicy::AllLayers,
                    ..TraceOptions::default()
                },
            )?;
            let positive = *example
                .positive_indices
                .iter()
                .next()
                .ok_or(crate::error::Error::NoPositives)?;
            (1..=model.n_layers)
                .map(|layer| {
                    let scores =
                        attention_mass_scores(&trace, &layout, layer, opts.aggregation)?;
                    Ok(rank_indices(&scores.scores)[0] == positive)
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let n = examples.len() as f64;
    Ok((0..model.n_layers)
        .map(|l| hits.iter().filter(|h| h[l]).count() as f64 / n)
        .collect())
}
