//! Shared fixtures: a small synthetic ranking task wired through the full
//! prompt pipeline.

#![allow(dead_code)]

use std::collections::BTreeSet;

use blockrank_core::corpus::{
    assemble_prompt, build_candidate_list, generate_synthetic_dataset, reserved_tokens,
    RetrievalExample, SyntheticTaskConfig, TemplateConfig, Vocabulary,
};
use blockrank_core::layout::{
    assign_positions, assign_sequential_positions, chunk_segments, chunk_segments_teacher_forced,
    with_default_signal_tokens, ChunkLayout,
};
use blockrank_core::model::{AttentionMode, ModelConfig, Parameters};

pub struct Fixture {
    pub task: SyntheticTaskConfig,
    pub template: TemplateConfig,
    pub vocab: Vocabulary,
    pub model: ModelConfig,
    pub l_chunk: usize,
    pub query_offset: usize,
}

impl Fixture {
    pub fn new(n_docs: usize, n_layers: usize, d_model: usize, n_heads: usize) -> Self {
        let task = SyntheticTaskConfig {
            vocab_size: 60,
            n_docs,
            doc_len: 8,
            query_span_len: 4,
            distractor_overlap: 0.25,
            seed: 11,
        };
        let template = TemplateConfig::default();
        let vocab =
            Vocabulary::build(&task.corpus_texts(), &reserved_tokens(&template)).unwrap();
        let model = ModelConfig {
            n_layers,
            n_heads,
            d_model,
            head_dim: d_model / n_heads,
            vocab_size: vocab.len(),
            mlp_hidden: 2 * d_model,
            rotary_base: 10_000.0,
            max_position: 16_384,
            attention_mode: AttentionMode::Blockwise,
        };
        Self {
            task,
            template,
            vocab,
            model,
            l_chunk: 24,
            query_offset: 8192,
        }
    }

    pub fn examples(&self, n: usize) -> Vec<RetrievalExample> {
        generate_synthetic_dataset(&self.task, n).unwrap()
    }

    pub fn listed_example(&self, index: usize, shuffle_seed: u64) -> RetrievalExample {
        let raw = generate_synthetic_dataset(&self.task, index + 1).unwrap();
        build_candidate_list(&raw[index], self.task.n_docs, shuffle_seed).unwrap()
    }

    /// Teacher-forced training layout plus positive set.
    pub fn training_layout(&self, example: &RetrievalExample) -> (ChunkLayout, BTreeSet<usize>) {
        let segments = assemble_prompt(example, &self.vocab, &self.template).unwrap();
        let layout = chunk_segments_teacher_forced(&segments, self.l_chunk).unwrap();
        let layout = match self.model.attention_mode {
            AttentionMode::Blockwise => assign_positions(layout, self.query_offset).unwrap(),
            AttentionMode::DenseCausal => assign_sequential_positions(layout),
        };
        let layout = with_default_signal_tokens(layout, &self.vocab).unwrap();
        (layout, example.positive_indices.clone())
    }

    /// Inference layout (scaffold only).
    pub fn inference_layout(&self, example: &RetrievalExample) -> ChunkLayout {
        let segments = assemble_prompt(example, &self.vocab, &self.template).unwrap();
        let layout = chunk_segments(&segments, self.l_chunk).unwrap();
        let layout = match self.model.attention_mode {
            AttentionMode::Blockwise => assign_positions(layout, self.query_offset).unwrap(),
            AttentionMode::DenseCausal => assign_sequential_positions(layout),
        };
        with_default_signal_tokens(layout, &self.vocab).unwrap()
    }

    pub fn params(&self, seed: u64) -> Parameters {
        Parameters::init(&self.model, seed)
    }
}

/// Max absolute difference between two equal-shape 2-D arrays.
pub fn max_abs_diff(a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
