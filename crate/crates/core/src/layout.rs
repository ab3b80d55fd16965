//! Fixed-length chunk grid over prompt segments.
//!
//! Chunk 0 holds the instruction, chunks `1..=N` the documents, chunk `N+1`
//! the query. Segments are right-padded (or tail-truncated) to `L_chunk`;
//! the instruction and query each occupy exactly one chunk. Padding slots
//! are excluded from every attention scope, loss, and score.
//!
//! Position ids come in two schemes. The shared-document scheme gives the
//! instruction positions `0..`, starts *every* document at `L_inst` as if it
//! were the only one present, and places the query at a large fixed offset,
//! so per-document encodings are order-invariant. The sequential scheme
//! numbers the concatenated grid `0..S-1` for the dense-causal baseline.
//! Padding slots continue each chunk's position run so the assignment stays
//! total and deterministic; they are masked everywhere regardless.

use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{TokenId, Vocabulary, PAD_ID};
use crate::error::{Error, Result};

/// Query tokens sit at this offset by default, far past any document position.
pub const DEFAULT_QUERY_OFFSET: usize = 8192;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentSegment {
    pub doc_id: String,
    pub tokens: Vec<TokenId>,
}

/// Tokenized prompt split into its logical parts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSegments {
    pub instruction: Vec<TokenId>,
    pub documents: Vec<DocumentSegment>,
    pub query: Vec<TokenId>,
    /// Digit tokens of the positive id plus the closing `'` `]`; empty at
    /// inference time.
    pub answer_target: Vec<TokenId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChunkRole {
    Instruction,
    Document(usize),
    Query,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub role: ChunkRole,
    /// Exactly `l_chunk` token ids, right-padded with PAD.
    pub tokens: Vec<TokenId>,
    /// Valid prefix length; slots `n_valid..` are padding.
    pub n_valid: usize,
}

impl Chunk {
    pub fn is_valid(&self, slot: usize) -> bool {
        slot < self.n_valid
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositionScheme {
    Unassigned,
    SharedDocument { query_offset: usize },
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkLayout {
    pub chunks: Vec<Chunk>,
    pub l_chunk: usize,
    /// Valid instruction tokens before padding (capped at `l_chunk`).
    pub l_inst: usize,
    /// Per chunk, per slot; empty until a scheme is assigned.
    pub position_ids: Vec<Vec<usize>>,
    pub scheme: PositionScheme,
    /// Candidate ids in document-chunk order.
    pub doc_ids: Vec<String>,
    /// Slots of the signal-carrier tokens within the query chunk.
    pub signal_token_indices: Vec<usize>,
    /// Teacher-forced answer tokens occupying the tail of the query chunk.
    pub answer_len: usize,
    /// Tokens dropped by tail truncation, across all segments.
    pub truncated_tokens: usize,
}

impl ChunkLayout {
    pub fn n_docs(&self) -> usize {
        self.chunks.len() - 2
    }

    pub fn query_chunk_index(&self) -> usize {
        self.chunks.len() - 1
    }

    pub fn query_chunk(&self) -> &Chunk {
        &self.chunks[self.query_chunk_index()]
    }

    pub fn doc_chunk(&self, doc: usize) -> &Chunk {
        &self.chunks[doc + 1]
    }

    /// Total grid length including padding.
    pub fn total_len(&self) -> usize {
        self.chunks.len() * self.l_chunk
    }

    pub fn global_index(&self, chunk: usize, slot: usize) -> usize {
        chunk * self.l_chunk + slot
    }

    pub fn positions_assigned(&self) -> bool {
        !self.position_ids.is_empty()
    }

    pub fn query_offset(&self) -> Option<usize> {
        match self.scheme {
            PositionScheme::SharedDocument { query_offset } => Some(query_offset),
            _ => None,
        }
    }

    /// Valid-token global indices of each document chunk; together these
    /// partition the valid tokens of chunks `1..=N`.
    pub fn doc_token_index_sets(&self) -> Vec<Vec<usize>> {
        (0..self.n_docs())
            .map(|k| {
                let chunk = k + 1;
                (0..self.chunks[chunk].n_valid)
                    .map(|slot| self.global_index(chunk, slot))
                    .collect()
            })
            .collect()
    }

    /// Largest assigned position id (panics if unassigned).
    pub fn max_position(&self) -> usize {
        self.position_ids
            .iter()
            .flat_map(|p| p.iter().copied())
            .max()
            .expect("positions assigned")
    }
}

fn fit(tokens: &[TokenId], l_chunk: usize, truncated: &mut usize) -> (Vec<TokenId>, usize) {
    let n_valid = tokens.len().min(l_chunk);
    *truncated += tokens.len() - n_valid;
    let mut out = tokens[..n_valid].to_vec();
    out.resize(l_chunk, PAD_ID);
    (out, n_valid)
}

fn chunk_with_query_suffix(
    segments: &PromptSegments,
    l_chunk: usize,
    suffix: &[TokenId],
    suffix_is_answer: bool,
) -> Result<ChunkLayout> {
    if l_chunk == 0 {
        return Err(Error::InvalidConfig("l_chunk must be at least 1".into()));
    }
    let mut truncated = 0usize;
    let mut chunks = Vec::with_capacity(segments.documents.len() + 2);

    let (tokens, n_valid) = fit(&segments.instruction, l_chunk, &mut truncated);
    let l_inst = n_valid;
    chunks.push(Chunk {
        role: ChunkRole::Instruction,
        tokens,
        n_valid,
    });

    let mut doc_ids = Vec::with_capacity(segments.documents.len());
    for (k, doc) in segments.documents.iter().enumerate() {
        let (tokens, n_valid) = fit(&doc.tokens, l_chunk, &mut truncated);
        chunks.push(Chunk {
            role: ChunkRole::Document(k),
            tokens,
            n_valid,
        });
        doc_ids.push(doc.doc_id.clone());
    }

    let mut query_tokens = segments.query.clone();
    query_tokens.extend_from_slice(suffix);
    let (tokens, n_valid) = fit(&query_tokens, l_chunk, &mut truncated);
    // Truncation eats the tail, so only count the suffix part that survived.
    let answer_len = if suffix_is_answer {
        n_valid.saturating_sub(segments.query.len())
    } else {
        0
    };
    chunks.push(Chunk {
        role: ChunkRole::Query,
        tokens,
        n_valid,
    });

    Ok(ChunkLayout {
        chunks,
        l_chunk,
        l_inst,
        position_ids: Vec::new(),
        scheme: PositionScheme::Unassigned,
        doc_ids,
        signal_token_indices: Vec::new(),
        answer_len,
        truncated_tokens: truncated,
    })
}

/// Grids the segments for inference: the query chunk holds the scaffold only.
pub fn chunk_segments(segments: &PromptSegments, l_chunk: usize) -> Result<ChunkLayout> {
    chunk_with_query_suffix(segments, l_chunk, &[], false)
}

/// Grids the segments for training: the answer target is appended to the
/// query chunk (teacher forcing) and its surviving length recorded.
pub fn chunk_segments_teacher_forced(
    segments: &PromptSegments,
    l_chunk: usize,
) -> Result<ChunkLayout> {
    chunk_with_query_suffix(segments, l_chunk, &segments.answer_target, true)
}

/// Grids the segments with already-decoded tokens appended to the query
/// chunk, for autoregressive decoding.
pub fn chunk_segments_with_decoded(
    segments: &PromptSegments,
    l_chunk: usize,
    decoded: &[TokenId],
) -> Result<ChunkLayout> {
    chunk_with_query_suffix(segments, l_chunk, decoded, false)
}

/// Assigns the shared-document position scheme.
///
/// The offset must clear the document position range `[L_inst,
/// L_inst + L_chunk)`; anything lower collides.
pub fn assign_positions(mut layout: ChunkLayout, query_offset: usize) -> Result<ChunkLayout> {
    let required = layout.l_inst + layout.l_chunk;
    if query_offset < required {
        return Err(Error::PositionCollision {
            offset: query_offset,
            required,
        });
    }
    let l = layout.l_chunk;
    layout.position_ids = layout
        .chunks
        .iter()
        .map(|c| {
            let base = match c.role {
                ChunkRole::Instruction => 0,
                ChunkRole::Document(_) => layout.l_inst,
                ChunkRole::Query => query_offset,
            };
            (base..base + l).collect()
        })
        .collect();
    layout.scheme = PositionScheme::SharedDocument { query_offset };
    Ok(layout)
}

/// Assigns standard sequential positions `0..S-1` over the concatenated grid
/// (the dense-causal baseline scheme).
pub fn assign_sequential_positions(mut layout: ChunkLayout) -> ChunkLayout {
    let l = layout.l_chunk;
    layout.position_ids = (0..layout.chunks.len())
        .map(|c| (c * l..(c + 1) * l).collect())
        .collect();
    layout.scheme = PositionScheme::Sequential;
    layout
}

/// Finds each signal token's final occurrence within the query scaffold
/// (teacher-forced answer tokens are not scanned). Errors name the first
/// missing token: a prompt without its scaffold is malformed.
pub fn locate_signal_tokens(
    layout: &ChunkLayout,
    vocab: &Vocabulary,
    signal_spec: &[&str],
) -> Result<Vec<usize>> {
    if signal_spec.is_empty() {
        return Err(Error::EmptySignalSet);
    }
    let chunk = layout.query_chunk();
    let scaffold_end = chunk.n_valid - layout.answer_len;
    let mut out = Vec::with_capacity(signal_spec.len());
    for name in signal_spec {
        let id = vocab.require(name)?;
        let found = (0..scaffold_end)
            .rev()
            .find(|&slot| chunk.tokens[slot] == id)
            .ok_or_else(|| Error::SignalTokenMissing((*name).to_string()))?;
        out.push(found);
    }
    Ok(out)
}

/// Convenience: locate the default signal tokens and store them.
pub fn with_default_signal_tokens(
    mut layout: ChunkLayout,
    vocab: &Vocabulary,
) -> Result<ChunkLayout> {
    layout.signal_token_indices =
        locate_signal_tokens(&layout, vocab, &crate::corpus::template::DEFAULT_SIGNAL_TOKENS)?;
    Ok(layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn segments(inst: usize, docs: &[usize], query: usize) -> PromptSegments {
        // Token values are arbitrary non-pad ids.
        let tok = |n: usize, base: u32| (0..n).map(|i| base + i as u32 + 2).collect();
        PromptSegments {
            instruction: tok(inst, 0),
            documents: docs
                .iter()
                .enumerate()
                .map(|(k, &n)| DocumentSegment {
                    doc_id: format!("{k:02}"),
                    tokens: tok(n, 100 * (k as u32 + 1)),
                })
                .collect(),
            query: tok(query, 1000),
            answer_target: vec![],
        }
    }

    #[test]
    fn padding_and_truncation_arithmetic() {
        let segs = segments(12, &[16, 8, 20], 10);
        let layout = chunk_segments(&segs, 16).unwrap();
        assert_eq!(layout.chunks.len(), 5);
        assert_eq!(layout.l_inst, 12);
        assert_eq!(layout.doc_chunk(0).n_valid, 16);
        assert_eq!(layout.doc_chunk(1).n_valid, 8);
        assert_eq!(layout.doc_chunk(2).n_valid, 16, "doc 3 truncated to 16");
        assert_eq!(layout.truncated_tokens, 4);
        let pads = layout.doc_chunk(1).tokens[8..]
            .iter()
            .filter(|&&t| t == PAD_ID)
            .count();
        assert_eq!(pads, 8);
    }

    #[test]
    fn exact_fit_has_no_padding_or_truncation() {
        let segs = segments(16, &[16, 16], 16);
        let layout = chunk_segments(&segs, 16).unwrap();
        assert_eq!(layout.truncated_tokens, 0);
        for c in &layout.chunks {
            assert_eq!(c.n_valid, 16);
        }
    }

    #[test]
    fn shared_positions_match_the_scheme() {
        let segs = segments(12, &[16, 9], 10);
        let layout = assign_positions(chunk_segments(&segs, 16).unwrap(), 8192).unwrap();
        assert_eq!(layout.position_ids[0][..12], (0..12).collect::<Vec<_>>()[..]);
        // Every document's first token sits at L_inst, and the position
        // vectors are element-wise identical across documents.
        assert_eq!(layout.position_ids[1][0], 12);
        assert_eq!(layout.position_ids[1], layout.position_ids[2]);
        let q = layout.query_chunk_index();
        assert_eq!(
            layout.position_ids[q][..10],
            (8192..8202).collect::<Vec<_>>()[..]
        );
    }

    #[test]
    fn offset_collision_rejected() {
        let segs = segments(12, &[16], 10);
        let layout = chunk_segments(&segs, 16).unwrap();
        match assign_positions(layout, 20) {
            Err(Error::PositionCollision { offset, required }) => {
                assert_eq!((offset, required), (20, 28));
            }
            other => panic!("expected collision, got {other:?}"),
        }
    }

    #[test]
    fn permuting_documents_preserves_position_multiset() {
        let segs = segments(8, &[10, 12, 7], 9);
        let a = assign_positions(chunk_segments(&segs, 12).unwrap(), 8192).unwrap();

        let mut permuted = segs.clone();
        permuted.documents.rotate_left(1);
        let b = assign_positions(chunk_segments(&permuted, 12).unwrap(), 8192).unwrap();

        let pairs = |l: &ChunkLayout| {
            let mut v: Vec<(String, Vec<usize>)> = l
                .chunks
                .iter()
                .zip(&l.position_ids)
                .filter_map(|(c, p)| match c.role {
                    ChunkRole::Document(k) => Some((l.doc_ids[k].clone(), p.clone())),
                    _ => None,
                })
                .collect();
            v.sort();
            v
        };
        assert_eq!(pairs(&a), pairs(&b));
    }

    #[test]
    fn doc_token_sets_partition_valid_doc_tokens() {
        let segs = segments(5, &[7, 12, 3], 6);
        let layout = chunk_segments(&segs, 12).unwrap();
        let sets = layout.doc_token_index_sets();
        let mut all: Vec<usize> = sets.iter().flatten().copied().collect();
        let total: usize = (0..layout.n_docs())
            .map(|k| layout.doc_chunk(k).n_valid)
            .sum();
        assert_eq!(all.len(), total);
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), total, "sets must be disjoint");
        for &g in &all {
            let chunk = g / layout.l_chunk;
            assert!(chunk >= 1 && chunk <= layout.n_docs());
            assert!(layout.chunks[chunk].is_valid(g % layout.l_chunk));
        }
    }

    #[test]
    fn teacher_forced_answer_survives_in_tail() {
        let mut segs = segments(4, &[6], 8);
        segs.answer_target = vec![900, 901, 902];
        let layout = chunk_segments_teacher_forced(&segs, 16).unwrap();
        assert_eq!(layout.answer_len, 3);
        let q = layout.query_chunk();
        assert_eq!(q.n_valid, 11);
        assert_eq!(&q.tokens[8..11], &[900, 901, 902]);
    }
}
