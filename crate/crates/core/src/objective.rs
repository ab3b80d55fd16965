//! Relevance scores and training losses.
//!
//! The attention-mass score of a document is the probability mass that the
//! signal-carrier query tokens put on its tokens, where the softmax over
//! attention logits is restricted to document tokens only. Scores feed an
//! InfoNCE loss at the chosen layer; next-token cross-entropy on the answer
//! tokens supplies the generative objective; the total is their weighted sum.

use std::collections::BTreeSet;
use std::ops::Range;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::ChunkLayout;
use crate::model::forward::{CachedQk, ForwardTrace};
use crate::model::ops::{softmax_rows, softmax_rows_backward};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SignalAggregation {
    /// Sum masses over signal tokens (the default).
    #[default]
    Sum,
    /// Average masses over signal tokens.
    Mean,
}

#[derive(Debug, Clone)]
pub struct RelevanceScores {
    /// One score per document, in chunk order.
    pub scores: Vec<f64>,
    /// `[n_signal_tokens, n_docs]` per-signal-token masses (head-averaged).
    pub per_signal: Array2<f64>,
    /// Layer the cached projections came from (1-indexed).
    pub l_star: usize,
    pub aggregation: SignalAggregation,
}

/// Per-head document-restricted attention rows, kept for the backward pass.
pub(crate) struct ScoresDetail {
    /// Per head: `[n_signal, total_valid_doc_tokens]` probabilities.
    pub alpha: Vec<Array2<f64>>,
    /// Column span of each document inside the alpha matrices.
    pub doc_spans: Vec<Range<usize>>,
}

pub(crate) fn attention_mass_scores_detailed(
    qk: &CachedQk,
    layout: &ChunkLayout,
    l_star: usize,
    aggregation: SignalAggregation,
) -> Result<(RelevanceScores, ScoresDetail)> {
    let n_docs = layout.n_docs();
    if n_docs == 0 {
        return Err(Error::NoDocuments);
    }
    let signal = &layout.signal_token_indices;
    if signal.is_empty() {
        return Err(Error::EmptySignalSet);
    }
    let (n_heads, _, head_dim) = qk.q_query.dim();
    let scale = 1.0 / (head_dim as f64).sqrt();

    let mut doc_spans = Vec::with_capacity(n_docs);
    let mut total = 0usize;
    for k in 0..n_docs {
        let n_valid = layout.doc_chunk(k).n_valid;
        doc_spans.push(total..total + n_valid);
        total += n_valid;
    }

    let mut alpha_heads = Vec::with_capacity(n_heads);
    let mut alpha_mean: Array2<f64> = Array2::zeros((signal.len(), total));
    for h in 0..n_heads {
        // Keys of all valid document tokens, concatenated in chunk order.
        let mut keys = Array2::zeros((total, head_dim));
        for k in 0..n_docs {
            let kh = qk.k_doc(k).index_axis(Axis(0), h);
            let span = doc_spans[k].clone();
            keys.slice_mut(ndarray::s![span, ..])
                .assign(&kh.slice(ndarray::s![..layout.doc_chunk(k).n_valid, ..]));
        }
        let qh = qk.q_query.index_axis(Axis(0), h);
        let mut q_sig = Array2::zeros((signal.len(), head_dim));
        for (i, &slot) in signal.iter().enumerate() {
            q_sig.row_mut(i).assign(&qh.row(slot));
        }
        let mut z = q_sig.dot(&keys.t());
        z.mapv_inplace(|v| v * scale);
        softmax_rows(&mut z);
        alpha_mean.zip_mut_with(&z, |a, &p| *a += p / n_heads as f64);
        alpha_heads.push(z);
    }

    let mut per_signal = Array2::zeros((signal.len(), n_docs));
    for i in 0..signal.len() {
        for k in 0..n_docs {
            per_signal[[i, k]] = alpha_mean
                .slice(ndarray::s![i, doc_spans[k].clone()])
                .sum();
        }
    }
    let scores = (0..n_docs)
        .map(|k| {
            let s: f64 = per_signal.column(k).sum();
            match aggregation {
                SignalAggregation::Sum => s,
                SignalAggregation::Mean => s / signal.len() as f64,
            }
        })
        .collect();

    Ok((
        RelevanceScores {
            scores,
            per_signal,
            l_star,
            aggregation,
        },
        ScoresDetail {
            alpha: alpha_heads,
            doc_spans,
        },
    ))
}

/// Computes per-document attention-mass scores from the trace's cached Q/K
/// at `l_star`.
pub fn attention_mass_scores(
    trace: &ForwardTrace,
    layout: &ChunkLayout,
    l_star: usize,
    aggregation: SignalAggregation,
) -> Result<RelevanceScores> {
    let qk = trace
        .qk
        .get(&l_star)
        .ok_or_else(|| Error::MissingTrace(format!("cached Q/K at layer {l_star}")))?;
    attention_mass_scores_detailed(qk, layout, l_star, aggregation).map(|(s, _)| s)
}

/// Backward of the score computation: gradient w.r.t. the cached (rotated)
/// Q rows of the signal tokens and K of the document chunks.
pub(crate) fn scores_backward(
    qk: &CachedQk,
    layout: &ChunkLayout,
    detail: &ScoresDetail,
    aggregation: SignalAggregation,
    d_scores: &[f64],
) -> (Array3<f64>, Vec<Array3<f64>>) {
    let signal = &layout.signal_token_indices;
    let n_docs = layout.n_docs();
    let (n_heads, l, head_dim) = qk.q_query.dim();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let weight = match aggregation {
        SignalAggregation::Sum => 1.0,
        SignalAggregation::Mean => 1.0 / signal.len() as f64,
    };

    let total = detail.doc_spans.last().map(|r| r.end).unwrap_or(0);
    let mut dq_query = Array3::zeros((n_heads, l, head_dim));
    let mut dk_docs: Vec<Array3<f64>> = (0..n_docs)
        .map(|_| Array3::zeros((n_heads, l, head_dim)))
        .collect();

    for h in 0..n_heads {
        let alpha = &detail.alpha[h];
        let mut dalpha = Array2::zeros((signal.len(), total));
        for k in 0..n_docs {
            let g = d_scores[k] * weight / n_heads as f64;
            dalpha
                .slice_mut(ndarray::s![.., detail.doc_spans[k].clone()])
                .fill(g);
        }
        let dz = softmax_rows_backward(alpha, &dalpha);

        // Rebuild this head's key block (cheap relative to storing it).
        let mut keys = Array2::zeros((total, head_dim));
        for k in 0..n_docs {
            let kh = qk.k_doc(k).index_axis(Axis(0), h);
            keys.slice_mut(ndarray::s![detail.doc_spans[k].clone(), ..])
                .assign(&kh.slice(ndarray::s![..layout.doc_chunk(k).n_valid, ..]));
        }
        let qh = qk.q_query.index_axis(Axis(0), h);
        let mut q_sig = Array2::zeros((signal.len(), head_dim));
        for (i, &slot) in signal.iter().enumerate() {
            q_sig.row_mut(i).assign(&qh.row(slot));
        }

        let dq_sig = dz.dot(&keys).mapv(|v| v * scale);
        for (i, &slot) in signal.iter().enumerate() {
            let mut row = dq_query.slice_mut(ndarray::s![h, slot, ..]);
            row += &dq_sig.row(i);
        }
        let dkeys = dz.t().dot(&q_sig).mapv(|v| v * scale);
        for k in 0..n_docs {
            let span = detail.doc_spans[k].clone();
            let n_valid = span.len();
            let mut dst = dk_docs[k].slice_mut(ndarray::s![h, ..n_valid, ..]);
            dst += &dkeys.slice(ndarray::s![span, ..]);
        }
    }
    (dq_query, dk_docs)
}

/// InfoNCE over attention masses with temperature `tau`; entries listed in
/// `excluded` (other labeled positives) are left out of the denominator.
pub fn infonce_aux_loss_excluding(
    scores: &[f64],
    positive: usize,
    excluded: &BTreeSet<usize>,
    tau: f64,
) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    if positive >= scores.len() {
        return Err(Error::InvalidConfig(format!(
            "positive index {positive} out of range for {} scores",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("attention-mass score".into()));
    }
    let included: Vec<f64> = scores
        .iter()
        .enumerate()
        .filter(|(k, _)| *k == positive || !excluded.contains(k))
        .map(|(_, &s)| s / tau)
        .collect();
    let max = included.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = included.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    Ok(log_sum - scores[positive] / tau)
}

/// InfoNCE with every non-positive score in the denominator.
pub fn infonce_aux_loss(scores: &[f64], positive: usize, tau: f64) -> Result<f64> {
    infonce_aux_loss_excluding(scores, positive, &BTreeSet::new(), tau)
}

/// Gradient of [`infonce_aux_loss_excluding`] w.r.t. the scores.
pub(crate) fn infonce_grad(
    scores: &[f64],
    positive: usize,
    excluded: &BTreeSet<usize>,
    tau: f64,
) -> Vec<f64> {
    let included: Vec<usize> = (0..scores.len())
        .filter(|k| *k == positive || !excluded.contains(k))
        .collect();
    let max = included
        .iter()
        .map(|&k| scores[k] / tau)
        .fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = included.iter().map(|&k| (scores[k] / tau - max).exp()).sum();
    let mut grad = vec![0.0; scores.len()];
    for &k in &included {
        let p = (scores[k] / tau - max).exp() / denom;
        grad[k] = p / tau;
    }
    grad[positive] -= 1.0 / tau;
    grad
}

/// Mean cross-entropy over the teacher-forced answer tokens at the tail of
/// the query chunk. Positions outside the answer contribute nothing.
pub fn ntp_loss(logits: &Array2<f64>, layout: &ChunkLayout) -> Result<f64> {
    let (rows, targets) = answer_alignment(logits, layout)?;
    let mut loss = 0.0;
    for (&row, &target) in rows.iter().zip(&targets) {
        let r = logits.row(row);
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = r.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += log_sum - r[target as usize];
    }
    Ok(loss / rows.len() as f64)
}

/// Gradient of [`ntp_loss`] w.r.t. the logits (zero outside answer rows).
pub(crate) fn ntp_logit_grad(logits: &Array2<f64>, layout: &ChunkLayout) -> Result<Array2<f64>> {
    let (rows, targets) = answer_alignment(logits, layout)?;
    let mut grad = Array2::zeros(logits.raw_dim());
    let inv = 1.0 / rows.len() as f64;
    for (&row, &target) in rows.iter().zip(&targets) {
        let r = logits.row(row);
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = r.iter().map(|v| (v - max).exp()).sum();
        for c in 0..logits.ncols() {
            let p = (logits[[row, c]] - max).exp() / denom;
            grad[[row, c]] = p * inv;
        }
        grad[[row, target as usize]] -= inv;
    }
    Ok(grad)
}

/// Prediction rows and target token ids for the answer span: the logits at
/// slot `i` predict the token at slot `i + 1`.
fn answer_alignment(logits: &Array2<f64>, layout: &ChunkLayout) -> Result<(Vec<usize>, Vec<u32>)> {
    let chunk = layout.query_chunk();
    if layout.answer_len == 0 {
        return Err(Error::AlignmentMismatch(
            "layout has no teacher-forced answer tokens".into(),
        ));
    }
    if logits.nrows() != layout.l_chunk {
        return Err(Error::AlignmentMismatch(format!(
            "logits cover {} slots, query chunk has {}",
            logits.nrows(),
            layout.l_chunk
        )));
    }
    let scaffold_len = chunk.n_valid - layout.answer_len;
    if scaffold_len == 0 {
        return Err(Error::AlignmentMismatch(
            "query chunk has no scaffold before the answer".into(),
        ));
    }
    let rows: Vec<usize> = (0..layout.answer_len).map(|t| scaffold_len - 1 + t).collect();
    let targets: Vec<u32> = (0..layout.answer_len)
        .map(|t| chunk.tokens[scaffold_len + t])
        .collect();
    Ok((rows, targets))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub ntp: f64,
    pub aux: f64,
    pub total: f64,
    pub lambda: f64,
    pub tau: f64,
}

/// The combined objective: `total = ntp + lambda * aux`.
pub fn total_loss(ntp: f64, aux: f64, lambda: f64) -> f64 {
    ntp + lambda * aux
}

impl LossBreakdown {
    pub fn new(ntp: f64, aux: f64, lambda: f64, tau: f64) -> Self {
        Self {
            ntp,
            aux,
            total: total_loss(ntp, aux, lambda),
            lambda,
            tau,
        }
    }
}
