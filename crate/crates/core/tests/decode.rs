//! Greedy and constrained-beam decoding, driven by a rigged transition
//! model: one-hot embeddings, zeroed mixing weights, and an output head that
//! acts as a next-token lookup table. The model then deterministically emits
//! whatever chain the table encodes.

mod common;

use std::collections::BTreeSet;

use blockrank_core::corpus::template::{BRACKET_CLOSE, QUOTE, SCAFFOLD_OPEN};
use blockrank_core::corpus::{
    assemble_prompt, generate_synthetic_dataset, reserved_tokens, SyntheticTaskConfig,
    TemplateConfig, Vocabulary,
};
use blockrank_core::inference::{constrained_beam_decode, greedy_decode_id, DecodeContext};
use blockrank_core::model::{AttentionMode, ModelConfig, Parameters};

struct DecodeFixture {
    vocab: Vocabulary,
    template: TemplateConfig,
    model: ModelConfig,
    task: SyntheticTaskConfig,
}

impl DecodeFixture {
    fn new(n_docs: usize) -> Self {
        let template = TemplateConfig::default();
        let task = SyntheticTaskConfig {
            vocab_size: 10,
            n_docs,
            doc_len: 6,
            query_span_len: 3,
            distractor_overlap: 0.0,
            seed: 3,
        };
        let vocab =
            Vocabulary::build(&task.corpus_texts(), &reserved_tokens(&template)).unwrap();
        let model = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 64,
            head_dim: 64,
            vocab_size: vocab.len(),
            mlp_hidden: 8,
            rotary_base: 10_000.0,
            max_position: 16_384,
            attention_mode: AttentionMode::Blockwise,
        };
        assert!(vocab.len() <= model.d_model, "one-hot embeddings need room");
        Self {
            vocab,
            template,
            model,
            task,
        }
    }

    /// Zero model except: one-hot embeddings, unit final norm, and an output
    /// head encoding `transitions` as argmax choices.
    fn transition_params(&self, transitions: &[(&str, &str)]) -> Parameters {
        let mut p = Parameters::zeros(&self.model);
        for t in 0..self.model.vocab_size {
            p.embedding[[t, t]] = 1.0;
        }
        p.final_norm.fill(1.0);
        for (from, to) in transitions {
            let from = self.vocab.id(from).unwrap() as usize;
            let to = self.vocab.id(to).unwrap() as usize;
            p.lm_head[[from, to]] = 1.0;
        }
        p
    }

    fn ctx<'a>(
        &'a self,
        params: &'a Parameters,
        segments: &'a blockrank_core::layout::PromptSegments,
    ) -> DecodeContext<'a> {
        DecodeContext {
            params,
            cfg: &self.model,
            vocab: &self.vocab,
            segments,
            l_chunk: 28,
            query_offset: 8192,
            step_cap: 8,
        }
    }

    fn segments(&self) -> blockrank_core::layout::PromptSegments {
        let example = &generate_synthetic_dataset(&self.task, 1).unwrap()[0];
        assemble_prompt(example, &self.vocab, &self.template).unwrap()
    }
}

#[test]
fn greedy_emits_the_programmed_id_in_four_steps() {
    let fx = DecodeFixture::new(4);
    let params = fx.transition_params(&[
        (SCAFFOLD_OPEN, "0"),
        ("0", "1"),
        ("1", QUOTE),
        (QUOTE, BRACKET_CLOSE),
    ]);
    let segments = fx.segments();
    let pred = greedy_decode_id(&fx.ctx(&params, &segments)).unwrap();
    assert!(pred.valid);
    assert_eq!(pred.ranked_ids, vec!["01".to_string()]);
    assert_eq!(pred.decode_steps, 4);
}

#[test]
fn step_cap_without_closing_marks_invalid() {
    let fx = DecodeFixture::new(4);
    // '3' loops forever, so the closing quote-bracket never arrives.
    let params = fx.transition_params(&[(SCAFFOLD_OPEN, "3"), ("3", "3")]);
    let segments = fx.segments();
    let pred = greedy_decode_id(&fx.ctx(&params, &segments)).unwrap();
    assert!(!pred.valid);
    assert!(pred.ranked_ids.is_empty());
    assert_eq!(pred.decode_steps, 8);
}

#[test]
fn emitted_id_outside_candidates_is_invalid_not_an_error() {
    let fx = DecodeFixture::new(4); // candidate ids 00..03
    let params = fx.transition_params(&[
        (SCAFFOLD_OPEN, "9"),
        ("9", "9"),
        // second occurrence of '9' transitions onward
    ]);
    // Chain: 9 -> 9 -> 9... never closes; instead program 9 -> quote.
    let params2 = fx.transition_params(&[
        (SCAFFOLD_OPEN, "9"),
        ("9", QUOTE),
        (QUOTE, BRACKET_CLOSE),
    ]);
    let segments = fx.segments();
    for p in [params, params2] {
        let pred = greedy_decode_id(&fx.ctx(&p, &segments)).unwrap();
        assert!(!pred.valid);
        assert!(pred.ranked_ids.is_empty());
    }
}

#[test]
fn untrained_model_decodes_without_crashing() {
    let fx = DecodeFixture::new(4);
    let params = Parameters::init(&fx.model, 77);
    let segments = fx.segments();
    let pred = greedy_decode_id(&fx.ctx(&params, &segments)).unwrap();
    if pred.valid {
        assert_eq!(pred.ranked_ids.len(), 1);
    } else {
        assert!(pred.ranked_ids.is_empty());
    }
}

#[test]
fn beam_exhausts_the_trie_when_wider_than_it() {
    let fx = DecodeFixture::new(8); // ids 00..07
    let params = Parameters::zeros(&fx.model); // uniform logits
    let segments = fx.segments();
    let pred = constrained_beam_decode(&fx.ctx(&params, &segments), 10).unwrap();
    assert_eq!(pred.ranked_ids.len(), 8, "trie exhausted before beam");
    // Uniform logits: trie order with ascending-id tie break.
    let expected: Vec<String> = (0..8).map(|i| format!("{i:02}")).collect();
    assert_eq!(pred.ranked_ids, expected);
    assert_eq!(pred.decode_steps, 2);
    assert!(pred.valid);
}

#[test]
fn beam_width_one_matches_greedy_on_valid_chains() {
    let fx = DecodeFixture::new(4);
    let params = fx.transition_params(&[
        (SCAFFOLD_OPEN, "0"),
        ("0", "2"),
        ("2", QUOTE),
        (QUOTE, BRACKET_CLOSE),
    ]);
    let segments = fx.segments();
    let greedy = greedy_decode_id(&fx.ctx(&params, &segments)).unwrap();
    let beam = constrained_beam_decode(&fx.ctx(&params, &segments), 1).unwrap();
    assert!(greedy.valid);
    assert_eq!(greedy.ranked_ids, beam.ranked_ids);
}

#[test]
fn beam_outputs_are_always_valid_candidates() {
    let fx = DecodeFixture::new(5);
    for seed in [1u64, 2, 3] {
        let params = Parameters::init(&fx.model, seed);
        let segments = fx.segments();
        let pred = constrained_beam_decode(&fx.ctx(&params, &segments), 10).unwrap();
        let ids: BTreeSet<String> = segments.documents.iter().map(|d| d.doc_id.clone()).collect();
        assert!(!pred.ranked_ids.is_empty());
        for id in &pred.ranked_ids {
            assert!(ids.contains(id), "{id} not a candidate");
        }
        let unique: BTreeSet<&String> = pred.ranked_ids.iter().collect();
        assert_eq!(unique.len(), pred.ranked_ids.len());
    }
}
