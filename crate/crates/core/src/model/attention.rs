//! Structured attention over the chunk grid.
//!
//! Scopes: the instruction chunk attends causally to itself; each document
//! chunk attends causally to itself plus every valid instruction token; the
//! query chunk attends causally to itself plus all valid instruction and
//! document tokens. Padding columns are masked everywhere. The blockwise
//! path materializes one score rectangle per chunk (its full scope width),
//! which is what the complexity accounting counts.
//!
//! [`dense_masked_attention_oracle`] is the reference implementation: it
//! builds the explicit full additive mask over the concatenated sequence and
//! runs plain dense attention. It exists for equivalence testing and shares
//! no scope logic with the blockwise path.

use ndarray::{concatenate, Array2, Array3, Axis};

use crate::layout::{ChunkLayout, ChunkRole};
use crate::model::ops::{softmax_rows, MASK_NEG};

/// Output of attending one block: per-head probabilities are kept for the
/// backward pass and for attention-map analysis.
#[derive(Debug, Clone)]
pub struct ChunkAttention {
    /// `[L, n_heads * head_dim]`, heads concatenated, before the output
    /// projection.
    pub merged: Array2<f64>,
    /// Per head: `[L, scope_len]` attention probabilities.
    pub probs: Vec<Array2<f64>>,
    /// Chunk indices forming the key scope, self first.
    pub scope: Vec<usize>,
}

/// Key scope of chunk `c`, self first so intra-chunk causality applies to the
/// leading segment.
pub fn chunk_scope(layout: &ChunkLayout, c: usize) -> Vec<usize> {
    match layout.chunks[c].role {
        ChunkRole::Instruction => vec![c],
        ChunkRole::Document(_) => vec![c, 0],
        ChunkRole::Query => {
            let mut scope = vec![c, 0];
            scope.extend(1..=layout.n_docs());
            scope
        }
    }
}

/// Additive mask `[L, scope_len]` for chunk `c` over its scope: padding
/// columns masked, plus causality against the self segment.
pub fn chunk_scope_mask(layout: &ChunkLayout, c: usize, scope: &[usize]) -> Array2<f64> {
    let l = layout.l_chunk;
    let mut mask = Array2::zeros((l, scope.len() * l));
    for (seg, &m) in scope.iter().enumerate() {
        for t in 0..l {
            let col = seg * l + t;
            if !layout.chunks[m].is_valid(t) {
                mask.column_mut(col).fill(MASK_NEG);
            } else if m == c {
                for row in 0..t {
                    mask[[row, col]] = MASK_NEG;
                }
            }
        }
    }
    mask
}

fn attend_block(
    q: &Array3<f64>,
    keys: &Array3<f64>,
    values: &Array3<f64>,
    mask: &Array2<f64>,
    scope: Vec<usize>,
    scale: f64,
) -> ChunkAttention {
    let (n_heads, l, head_dim) = q.dim();
    let mut merged = Array2::zeros((l, n_heads * head_dim));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = q.index_axis(Axis(0), h);
        let kh = keys.index_axis(Axis(0), h);
        let vh = values.index_axis(Axis(0), h);
        let mut scores = qh.dot(&kh.t());
        scores.mapv_inplace(|v| v * scale);
        scores += mask;
        softmax_rows(&mut scores);
        let out = scores.dot(&vh);
        merged
            .slice_mut(ndarray::s![.., h * head_dim..(h + 1) * head_dim])
            .assign(&out);
        probs.push(scores);
    }
    ChunkAttention {
        merged,
        probs,
        scope,
    }
}

fn gather_scope(tensors: &[Array3<f64>], scope: &[usize]) -> Array3<f64> {
    let views: Vec<_> = scope.iter().map(|&m| tensors[m].view()).collect();
    concatenate(Axis(1), &views).expect("uniform chunk shapes")
}

/// Blockwise structured attention: one scoped score rectangle per chunk.
/// `q`, `k`, `v` are per-chunk `[H, L, head_dim]`, already rotated.
pub fn block_attention_layer(
    q: &[Array3<f64>],
    k: &[Array3<f64>],
    v: &[Array3<f64>],
    layout: &ChunkLayout,
) -> Vec<ChunkAttention> {
    let head_dim = q[0].len_of(Axis(2));
    let scale = 1.0 / (head_dim as f64).sqrt();
    (0..layout.chunks.len())
        .map(|c| {
            let scope = chunk_scope(layout, c);
            let mask = chunk_scope_mask(layout, c, &scope);
            let keys = gather_scope(k, &scope);
            let values = gather_scope(v, &scope);
            attend_block(&q[c], &keys, &values, &mask, scope, scale)
        })
        .collect()
}

/// Dense attention over the full concatenated sequence with an arbitrary
/// additive mask (used by the dense-causal mode and the oracle).
pub fn dense_attention(
    q: &Array3<f64>,
    k: &Array3<f64>,
    v: &Array3<f64>,
    mask: &Array2<f64>,
    layout: &ChunkLayout,
) -> ChunkAttention {
    let head_dim = q.len_of(Axis(2));
    let scale = 1.0 / (head_dim as f64).sqrt();
    attend_block(q, k, v, mask, (0..layout.chunks.len()).collect(), scale)
}

/// The explicit full `[S, S]` additive mask encoding the blockwise scopes,
/// built directly from the scope rules (not from [`chunk_scope_mask`]).
pub fn blockwise_scope_mask(layout: &ChunkLayout) -> Array2<f64> {
    let l = layout.l_chunk;
    let s = layout.total_len();
    let mut mask = Array2::from_elem((s, s), MASK_NEG);
    for (ci, chunk_i) in layout.chunks.iter().enumerate() {
        for si in 0..l {
            let row = ci * l + si;
            for (cj, chunk_j) in layout.chunks.iter().enumerate() {
                for sj in 0..chunk_j.n_valid {
                    let col = cj * l + sj;
                    let permitted = match (chunk_i.role, chunk_j.role) {
                        (_, _) if ci == cj => sj <= si,
                        (ChunkRole::Document(_), ChunkRole::Instruction) => true,
                        (ChunkRole::Query, ChunkRole::Instruction) => true,
                        (ChunkRole::Query, ChunkRole::Document(_)) => true,
                        _ => false,
                    };
                    if permitted {
                        mask[[row, col]] = 0.0;
                    }
                }
            }
        }
    }
    mask
}

/// Standard causal mask over the concatenated sequence (padding excluded):
/// the dense-causal baseline's scope.
pub fn sequential_causal_mask(layout: &ChunkLayout) -> Array2<f64> {
    let l = layout.l_chunk;
    let s = layout.total_len();
    let mut mask = Array2::from_elem((s, s), MASK_NEG);
    let valid: Vec<bool> = (0..s)
        .map(|g| layout.chunks[g / l].is_valid(g % l))
        .collect();
    for row in 0..s {
        for col in 0..=row {
            if valid[col] {
                mask[[row, col]] = 0.0;
            }
        }
    }
    mask
}

/// Reference implementation for equivalence tests: dense attention over the
/// whole sequence under the explicit blockwise mask. Returns the merged
/// head outputs `[S, n_heads * head_dim]`.
pub fn dense_masked_attention_oracle(
    q: &Array3<f64>,
    k: &Array3<f64>,
    v: &Array3<f64>,
    layout: &ChunkLayout,
) -> Array2<f64> {
    let mask = blockwise_scope_mask(layout);
    dense_attention(q, k, v, &mask, layout).merged
}
