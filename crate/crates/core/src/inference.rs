//! Ranked predictions: attention-mass prefill ranking, greedy decoding, and
//! constrained beam decoding over the candidate-id digit trie.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::template::{BRACKET_CLOSE, QUOTE};
use crate::corpus::vocab::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::layout::{
    assign_positions, assign_sequential_positions, chunk_segments_with_decoded, ChunkLayout,
    PromptSegments,
};
use crate::model::{forward, AttentionMode, ModelConfig, Parameters, QkCachePolicy, TraceOptions};
use crate::objective::{attention_mass_scores, SignalAggregation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMethod {
    Attention,
    Greedy,
    Beam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedPrediction {
    /// Best-first candidate ids; unique and drawn from the prompt's ids.
    pub ranked_ids: Vec<String>,
    pub method: InferenceMethod,
    /// Attention masses or hypothesis log-probabilities, aligned to
    /// `ranked_ids`.
    pub scores: Option<Vec<f64>>,
    pub layers_executed: usize,
    pub decode_steps: usize,
    /// Greedy decoding may emit something that is not a candidate id; that
    /// outcome is reported here rather than as an error.
    pub valid: bool,
}

/// Sorts scores descending; ties break toward the lower candidate index.
pub(crate) fn rank_indices(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Prefill ranking: run `l_star` blocks, read attention masses, rank.
/// No decoding happens; `decode_steps` is 0 by construction.
pub fn rank_by_attention(
    params: &Parameters,
    cfg: &ModelConfig,
    layout: &ChunkLayout,
    l_star: usize,
    top_k: usize,
    aggregation: SignalAggregation,
) -> Result<RankedPrediction> {
    if top_k > layout.n_docs() {
        return Err(Error::InvalidConfig(format!(
            "top_k {top_k} exceeds {} candidates",
            layout.n_docs()
        )));
    }
    let trace = forward(
        params,
        cfg,
        layout,
        &TraceOptions {
            stop_layer: Some(l_star),
            qk_cache: QkCachePolicy::Layer(l_star),
            ..TraceOptions::default()
        },
    )?;
    let scores = attention_mass_scores(&trace, layout, l_star, aggregation)?;
    let order = rank_indices(&scores.scores);
    let ranked: Vec<usize> = order.into_iter().take(top_k).collect();
    Ok(RankedPrediction {
        ranked_ids: ranked.iter().map(|&k| layout.doc_ids[k].clone()).collect(),
        method: InferenceMethod::Attention,
        scores: Some(ranked.iter().map(|&k| scores.scores[k]).collect()),
        layers_executed: trace.layers_executed,
        decode_steps: 0,
        valid: true,
    })
}

/// Everything a decoding method needs to re-run prefills with emitted tokens
/// appended to the query chunk.
pub struct DecodeContext<'a> {
    pub params: &'a Parameters,
    pub cfg: &'a ModelConfig,
    pub vocab: &'a Vocabulary,
    pub segments: &'a PromptSegments,
    pub l_chunk: usize,
    pub query_offset: usize,
    pub step_cap: usize,
}

impl DecodeContext<'_> {
    fn candidate_ids(&self) -> Vec<String> {
        self.segments
            .documents
            .iter()
            .map(|d| d.doc_id.clone())
            .collect()
    }

    /// Full-depth prefill with `decoded` appended; returns the logits at the
    /// last valid query slot.
    fn next_logits(&self, decoded: &[TokenId]) -> Result<Vec<f64>> {
        let layout = chunk_segments_with_decoded(self.segments, self.l_chunk, decoded)?;
        let layout = match self.cfg.attention_mode {
            AttentionMode::Blockwise => assign_positions(layout, self.query_offset)?,
            AttentionMode::DenseCausal => assign_sequential_positions(layout),
        };
        let trace = forward(self.params, self.cfg, &layout, &TraceOptions::default())?;
        let logits: &Array2<f64> = trace
            .logits
            .as_ref()
            .ok_or_else(|| Error::MissingTrace("logits".into()))?;
        let last = layout.query_chunk().n_valid - 1;
        Ok(logits.row(last).to_vec())
    }
}

fn argmax_lowest(logits: &[f64]) -> TokenId {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Greedy decoding of one id: emit argmax tokens after the scaffold until
/// the closing `'` `]` pair or the step cap. An emission that does not parse
/// to a candidate id is reported with `valid = false`, never as an error.
pub fn greedy_decode_id(ctx: &DecodeContext<'_>) -> Result<RankedPrediction> {
    let quote = ctx.vocab.require(QUOTE)?;
    let bracket = ctx.vocab.require(BRACKET_CLOSE)?;
    let mut decoded: Vec<TokenId> = Vec::new();
    let mut closed = false;
    while decoded.len() < ctx.step_cap {
        let logits = ctx.next_logits(&decoded)?;
        decoded.push(argmax_lowest(&logits));
        if decoded.len() >= 2 && decoded[decoded.len() - 2..] == [quote, bracket] {
            closed = true;
            break;
        }
    }
    let parsed = if closed {
        let digits = &decoded[..decoded.len() - 2];
        digits
            .iter()
            .map(|&t| {
                ctx.vocab
                    .token(t)
                    .and_then(|s| if s.len() == 1 { s.chars().next() } else { None })
                    .filter(|c| c.is_ascii_digit())
            })
            .collect::<Option<String>>()
    } else {
        None
    };
    let candidates = ctx.candidate_ids();
    let valid = parsed
        .as_ref()
        .map(|id| candidates.iter().any(|c| c == id))
        .unwrap_or(false);
    Ok(RankedPrediction {
        ranked_ids: if valid { vec![parsed.unwrap()] } else { Vec::new() },
        method: InferenceMethod::Greedy,
        scores: None,
        layers_executed: ctx.cfg.n_layers,
        decode_steps: decoded.len(),
        valid,
    })
}

/// Beam search over the digit trie of the prompt's candidate ids: only
/// prefixes of valid ids are expandable, so every returned id is a candidate
/// id. Hypotheses score by the sum of their digit-token log-probabilities
/// (all ids share one width, so no length normalization is needed); ties
/// break by ascending id.
pub fn constrained_beam_decode(ctx: &DecodeContext<'_>, beam: usize) -> Result<RankedPrediction> {
    if beam == 0 {
        return Err(Error::InvalidConfig("beam must be at least 1".into()));
    }
    let candidates = ctx.candidate_ids();
    if candidates.is_empty() {
        return Err(Error::NoDocuments);
    }
    let width = candidates[0].len();
    if candidates.iter().any(|c| c.len() != width) {
        return Err(Error::InvalidConfig(
            "candidate ids must share one digit width".into(),
        ));
    }
    let digit_tokens: Vec<TokenId> = (0..10u8)
        .map(|d| ctx.vocab.digit_id(d))
        .collect::<Result<_>>()?;

    // (id prefix string, emitted tokens, cumulative log-prob)
    let mut hyps: Vec<(String, Vec<TokenId>, f64)> = vec![(String::new(), Vec::new(), 0.0)];
    for _ in 0..width {
        let mut next: Vec<(String, Vec<TokenId>, f64)> = Vec::new();
        for (prefix, tokens, logp) in &hyps {
            let logits = ctx.next_logits(tokens)?;
            let logprobs = crate::model::ops::log_softmax(&logits);
            for d in 0..10u8 {
                let mut extended = prefix.clone();
                extended.push((b'0' + d) as char);
                let expandable = candidates.iter().any(|c| c.starts_with(&extended));
                if !expandable {
                    continue;
                }
                let tok = digit_tokens[d as usize];
                let mut toks = tokens.clone();
                toks.push(tok);
                next.push((extended, toks, logp + logprobs[tok as usize]));
            }
        }
        next.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        next.truncate(beam);
        hyps = next;
    }

    Ok(RankedPrediction {
        ranked_ids: hyps.iter().map(|(id, _, _)| id.clone()).collect(),
        method: InferenceMethod::Beam,
        scores: Some(hyps.iter().map(|(_, _, lp)| *lp).collect()),
        layers_executed: ctx.cfg.n_layers,
        decode_steps: width,
        valid: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_sorts_descending_with_index_tie_break() {
        assert_eq!(rank_indices(&[0.1, 0.7, 0.2]), vec![1, 2, 0]);
        assert_eq!(rank_indices(&[0.5, 0.5]), vec![0, 1]);
    }

    #[test]
    fn argmax_prefers_lowest_token_on_ties() {
        assert_eq!(argmax_lowest(&[0.0, 3.0, 3.0]), 1);
        assert_eq!(argmax_lowest(&[5.0, 5.0, 5.0]), 0);
    }
}
