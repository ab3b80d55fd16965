//! Exact attention-cost accounting.
//!
//! The unit is a scored pair: one computed entry of a query-key score
//! rectangle, counted per layer per head, masked entries included (they are
//! computed and then masked, which is what a kernel pays). Blockwise
//! attention scores `3(N+1)·L², dense attention `((N+2)·L)²`. MACs follow as
//! `2 · pairs · head_dim` (score dot products plus value mixing).

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::layout::{chunk_segments, DocumentSegment, PromptSegments};
use crate::model::{forward, AttentionMode, ModelConfig, Parameters, TraceOptions};

/// Closed-form scored pairs per layer per head.
pub fn analytic_scored_pairs(mode: AttentionMode, n_docs: usize, l_chunk: usize) -> u64 {
    let n = n_docs as u64;
    let l = l_chunk as u64;
    match mode {
        AttentionMode::Blockwise => 3 * (n + 1) * l * l,
        AttentionMode::DenseCausal => ((n + 2) * l) * ((n + 2) * l),
    }
}

/// Dense-to-blockwise scored-pair ratio at a given N: `(N+2)² / (3(N+1))`.
pub fn pair_ratio(n_docs: usize) -> f64 {
    let n = n_docs as f64;
    (n + 2.0) * (n + 2.0) / (3.0 * (n + 1.0))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplexityRecord {
    pub n_docs: usize,
    pub l_chunk: usize,
    pub mode: AttentionMode,
    pub head_dim: usize,
    pub scored_pairs_per_layer_per_head: u64,
    pub macs_per_layer_per_head: u64,
}

/// Analytic complexity record for one configuration.
pub fn count_attention_macs(
    cfg: &ModelConfig,
    n_docs: usize,
    l_chunk: usize,
    mode: AttentionMode,
) -> ComplexityRecord {
    let pairs = analytic_scored_pairs(mode, n_docs, l_chunk);
    ComplexityRecord {
        n_docs,
        l_chunk,
        mode,
        head_dim: cfg.head_dim,
        scored_pairs_per_layer_per_head: pairs,
        macs_per_layer_per_head: 2 * pairs * cfg.head_dim as u64,
    }
}

/// Counts scored pairs by actually running an instrumented forward pass over
/// a grid where every segment fills its chunk (the accounting assumption).
/// The counter increments once per computed score-rectangle entry.
pub fn instrumented_scored_pairs(
    n_docs: usize,
    l_chunk: usize,
    mode: AttentionMode,
) -> Result<u64> {
    let tokens = vec![2u32; l_chunk];
    let segments = PromptSegments {
        instruction: tokens.clone(),
        documents: (0..n_docs)
            .map(|k| DocumentSegment {
                doc_id: format!("{k:03}"),
                tokens: tokens.clone(),
            })
            .collect(),
        query: tokens.clone(),
        answer_target: vec![],
    };
    let layout = chunk_segments(&segments, l_chunk)?;
    let layout = match mode {
        AttentionMode::Blockwise => {
            crate::layout::assign_positions(layout, crate::layout::DEFAULT_QUERY_OFFSET.max(2 * l_chunk))?
        }
        AttentionMode::DenseCausal => crate::layout::assign_sequential_positions(layout),
    };
    let cfg = ModelConfig {
        n_layers: 1,
        n_heads: 1,
        d_model: 8,
        head_dim: 8,
        vocab_size: 4,
        mlp_hidden: 8,
        rotary_base: 10_000.0,
        max_position: layout.max_position() + 1,
        attention_mode: mode,
    };
    let params = Parameters::zeros(&cfg);
    let trace = forward(&params, &cfg, &layout, &TraceOptions::default())?;
    Ok(trace.scored_pairs[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blockwise_formula_examples() {
        assert_eq!(
            analytic_scored_pairs(AttentionMode::Blockwise, 4, 8),
            960,
            "3 * 5 * 64"
        );
        assert_eq!(analytic_scored_pairs(AttentionMode::DenseCausal, 4, 8), 2304);
    }

    #[test]
    fn doubling_documents_shows_linear_vs_quadratic_growth() {
        let b4 = analytic_scored_pairs(AttentionMode::Blockwise, 4, 8);
        let b8 = analytic_scored_pairs(AttentionMode::Blockwise, 8, 8);
        assert_eq!((b4, b8), (960, 1728));
        assert!((b8 as f64 / b4 as f64 - 1.8).abs() < 1e-12);
        let d4 = analytic_scored_pairs(AttentionMode::DenseCausal, 4, 8);
        let d8 = analytic_scored_pairs(AttentionMode::DenseCausal, 8, 8);
        assert_eq!((d4, d8), (2304, 6400));
        assert!((d8 as f64 / d4 as f64 - 2.7778).abs() < 1e-3);
    }

    #[test]
    fn instrumented_counts_equal_the_formula() {
        for &(n, l) in &[(2usize, 4usize), (4, 8), (7, 5)] {
            for mode in [AttentionMode::Blockwise, AttentionMode::DenseCausal] {
                let counted = instrumented_scored_pairs(n, l, mode).unwrap();
                assert_eq!(counted, analytic_scored_pairs(mode, n, l), "N={n} L={l}");
            }
        }
    }

    #[test]
    fn pair_ratio_is_monotonically_increasing() {
        for n in 2..512 {
            assert!(pair_ratio(n + 1) > pair_ratio(n), "ratio dips at N={n}");
        }
    }

    #[test]
    fn macs_double_count_scores_and_values() {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            head_dim: 8,
            vocab_size: 4,
            mlp_hidden: 8,
            rotary_base: 10_000.0,
            max_position: 10_000,
            attention_mode: AttentionMode::Blockwise,
        };
        let rec = count_attention_macs(&cfg, 4, 8, AttentionMode::Blockwise);
        assert_eq!(rec.macs_per_layer_per_head, 2 * 960 * 8);
    }
}
