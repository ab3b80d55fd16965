//! Forward pass over a chunk layout, with optional early stop, Q/K caching,
//! attention-map retention, and scored-pair counting.

use std::collections::BTreeMap;

use ndarray::{concatenate, Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::layout::ChunkLayout;
use crate::model::attention::{
    block_attention_layer, chunk_scope, dense_attention, sequential_causal_mask, ChunkAttention,
};
use crate::model::ops::{apply_rope, rms_norm, rope_tables, silu};
use crate::model::{AttentionMode, ModelConfig, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QkCachePolicy {
    None,
    /// Cache rotated Q (query chunk) and K (document chunks) at one layer,
    /// 1-indexed.
    Layer(usize),
    /// Cache at every executed layer (layerwise probing).
    AllLayers,
}

#[derive(Debug, Clone)]
pub struct TraceOptions {
    /// Run this many blocks (1-indexed count); `None` runs the full depth.
    pub stop_layer: Option<usize>,
    pub qk_cache: QkCachePolicy,
    /// Keep full head-averaged attention maps per layer (analysis mode).
    pub retain_attention: bool,
    /// Keep per-chunk hidden states after every block.
    pub retain_hidden: bool,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            stop_layer: None,
            qk_cache: QkCachePolicy::None,
            retain_attention: false,
            retain_hidden: false,
        }
    }
}

/// Rotated projections cached at one layer: enough to recompute the layer's
/// query-to-anything attention logits.
#[derive(Debug, Clone)]
pub struct CachedQk {
    /// Query-chunk Q, `[H, L, head_dim]`.
    pub q_query: Array3<f64>,
    /// K for every chunk in grid order, `[H, L, head_dim]` each.
    pub k_chunks: Vec<Array3<f64>>,
}

impl CachedQk {
    pub fn k_doc(&self, doc: usize) -> &Array3<f64> {
        &self.k_chunks[doc + 1]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub layers_executed: usize,
    /// `[L_chunk, vocab]` logits at every query-chunk slot; present only when
    /// the full depth ran.
    pub logits: Option<Array2<f64>>,
    pub qk: BTreeMap<usize, CachedQk>,
    /// Per executed layer: head-averaged `[S, S]` attention probabilities
    /// (zeros outside each token's scope). Analysis mode only.
    pub attention: Vec<Array2<f64>>,
    /// Per executed layer, per chunk hidden states after the block.
    pub hidden: Vec<Vec<Array2<f64>>>,
    /// Per executed layer: score-rectangle entries computed per head.
    pub scored_pairs: Vec<u64>,
}

pub(crate) fn embed_chunks(
    params: &Parameters,
    cfg: &ModelConfig,
    layout: &ChunkLayout,
) -> Result<Vec<Array2<f64>>> {
    layout
        .chunks
        .iter()
        .map(|chunk| {
            let mut x = Array2::zeros((layout.l_chunk, cfg.d_model));
            for (slot, &tok) in chunk.tokens.iter().enumerate() {
                if tok as usize >= cfg.vocab_size {
                    return Err(Error::InvalidConfig(format!(
                        "token id {tok} out of range for vocab_size {}",
                        cfg.vocab_size
                    )));
                }
                x.row_mut(slot).assign(&params.embedding.row(tok as usize));
            }
            Ok(x)
        })
        .collect()
}

pub(crate) fn check_layout(cfg: &ModelConfig, layout: &ChunkLayout) -> Result<()> {
    cfg.validate()?;
    if !layout.positions_assigned() {
        return Err(Error::PositionsUnassigned);
    }
    let max_pos = layout.max_position();
    if max_pos >= cfg.max_position {
        return Err(Error::PositionOverflow {
            position: max_pos,
            max: cfg.max_position,
        });
    }
    Ok(())
}

/// Projects per-chunk hidden states to rotated Q/K and plain V.
pub(crate) fn project_qkv(
    normed: &Array2<f64>,
    layer: &crate::model::LayerParameters,
    cfg: &ModelConfig,
    cos: &Array2<f64>,
    sin: &Array2<f64>,
) -> (Array3<f64>, Array3<f64>, Array3<f64>) {
    let l = normed.nrows();
    let to_heads = |m: Array2<f64>| -> Array3<f64> {
        let mut out = Array3::zeros((cfg.n_heads, l, cfg.head_dim));
        for h in 0..cfg.n_heads {
            out.index_axis_mut(Axis(0), h).assign(&m.slice(ndarray::s![
                ..,
                h * cfg.head_dim..(h + 1) * cfg.head_dim
            ]));
        }
        out
    };
    let mut q = to_heads(normed.dot(&layer.w_q));
    let mut k = to_heads(normed.dot(&layer.w_k));
    let v = to_heads(normed.dot(&layer.w_v));
    apply_rope(&mut q, &cos.view(), &sin.view());
    apply_rope(&mut k, &cos.view(), &sin.view());
    (q, k, v)
}

pub(crate) fn merge_heads(x: &Array3<f64>) -> Array2<f64> {
    let (h, l, hd) = x.dim();
    let mut out = Array2::zeros((l, h * hd));
    for head in 0..h {
        out.slice_mut(ndarray::s![.., head * hd..(head + 1) * hd])
            .assign(&x.index_axis(Axis(0), head));
    }
    out
}

fn head_average_into_map(
    attn: &[ChunkAttention],
    layout: &ChunkLayout,
    mode: AttentionMode,
) -> Array2<f64> {
    let s = layout.total_len();
    let l = layout.l_chunk;
    let mut map = Array2::zeros((s, s));
    match mode {
        AttentionMode::Blockwise => {
            for (c, ca) in attn.iter().enumerate() {
                let n_heads = ca.probs.len() as f64;
                for probs in &ca.probs {
                    for row in 0..l {
                        for (seg, &m) in ca.scope.iter().enumerate() {
                            for t in 0..l {
                                map[[c * l + row, m * l + t]] +=
                                    probs[[row, seg * l + t]] / n_heads;
                            }
                        }
                    }
                }
            }
        }
        AttentionMode::DenseCausal => {
            let ca = &attn[0];
            let n_heads = ca.probs.len() as f64;
            for probs in &ca.probs {
                map.zip_mut_with(probs, |a, &p| *a += p / n_heads);
            }
        }
    }
    map
}

/// Runs the transformer over a layout.
///
/// With `stop_layer = Some(l)` exactly `l` blocks execute and no logits head
/// is evaluated. Q/K caching stores the rotated projections computed inside
/// the requested layer(s).
pub fn forward(
    params: &Parameters,
    cfg: &ModelConfig,
    layout: &ChunkLayout,
    opts: &TraceOptions,
) -> Result<ForwardTrace> {
    check_layout(cfg, layout)?;
    let depth = cfg.n_layers;
    let stop = opts.stop_layer.unwrap_or(depth);
    if stop == 0 || stop > depth {
        return Err(Error::StopLayerOutOfRange {
            requested: stop,
            depth,
        });
    }

    let n_chunks = layout.chunks.len();
    let q_chunk = layout.query_chunk_index();
    let rope: Vec<(Array2<f64>, Array2<f64>)> = layout
        .position_ids
        .iter()
        .map(|p| rope_tables(p, cfg.head_dim, cfg.rotary_base))
        .collect();
    let dense_mask = match cfg.attention_mode {
        AttentionMode::DenseCausal => Some(sequential_causal_mask(layout)),
        AttentionMode::Blockwise => None,
    };

    let mut x = embed_chunks(params, cfg, layout)?;
    let mut trace = ForwardTrace {
        layers_executed: 0,
        logits: None,
        qk: BTreeMap::new(),
        attention: Vec::new(),
        hidden: Vec::new(),
        scored_pairs: Vec::new(),
    };

    for layer_idx in 1..=stop {
        let layer = &params.layers[layer_idx - 1];
        let normed: Vec<Array2<f64>> = x.iter().map(|xc| rms_norm(xc, &layer.attn_norm)).collect();
        let mut q = Vec::with_capacity(n_chunks);
        let mut k = Vec::with_capacity(n_chunks);
        let mut v = Vec::with_capacity(n_chunks);
        for c in 0..n_chunks {
            let (qc, kc, vc) = project_qkv(&normed[c], layer, cfg, &rope[c].0, &rope[c].1);
            q.push(qc);
            k.push(kc);
            v.push(vc);
        }

        let cache_here = match opts.qk_cache {
            QkCachePolicy::None => false,
            QkCachePolicy::Layer(l) => l == layer_idx,
            QkCachePolicy::AllLayers => true,
        };
        if cache_here {
            trace.qk.insert(
                layer_idx,
                CachedQk {
                    q_query: q[q_chunk].clone(),
                    k_chunks: k.clone(),
                },
            );
        }

        let (attn, pairs) = match cfg.attention_mode {
            AttentionMode::Blockwise => {
                let outs = block_attention_layer(&q, &k, &v, layout);
                let pairs: u64 = (0..n_chunks)
                    .map(|c| {
                        (layout.l_chunk * chunk_scope(layout, c).len() * layout.l_chunk) as u64
                    })
                    .sum();
                (outs, pairs)
            }
            AttentionMode::DenseCausal => {
                let cat = |t: &[Array3<f64>]| {
                    let views: Vec<_> = t.iter().map(|a| a.view()).collect();
                    concatenate(Axis(1), &views).expect("uniform chunks")
                };
                let out = dense_attention(
                    &cat(&q),
                    &cat(&k),
                    &cat(&v),
                    dense_mask.as_ref().expect("dense mask"),
                    layout,
                );
                let s = layout.total_len() as u64;
                (vec![out], s * s)
            }
        };
        trace.scored_pairs.push(pairs);

        if opts.retain_attention {
            trace
                .attention
                .push(head_average_into_map(&attn, layout, cfg.attention_mode));
        }

        // Residual add of the projected attention output, then the MLP.
        match cfg.attention_mode {
            AttentionMode::Blockwise => {
                for c in 0..n_chunks {
                    x[c] += &attn[c].merged.dot(&layer.w_o);
                }
            }
            AttentionMode::DenseCausal => {
                let projected = attn[0].merged.dot(&layer.w_o);
                for c in 0..n_chunks {
                    let range = c * layout.l_chunk..(c + 1) * layout.l_chunk;
                    x[c] += &projected.slice(ndarray::s![range, ..]);
                }
            }
        }
        for xc in x.iter_mut() {
            let normed2 = rms_norm(xc, &layer.mlp_norm);
            let gate = normed2.dot(&layer.w_gate);
            let up = normed2.dot(&layer.w_up);
            let mut h = gate;
            h.zip_mut_with(&up, |g, &u| *g = silu(*g) * u);
            *xc += &h.dot(&layer.w_down);
        }

        if opts.retain_hidden {
            trace.hidden.push(x.clone());
        }
        trace.layers_executed = layer_idx;
    }

    if trace.layers_executed == depth {
        let final_normed = rms_norm(&x[q_chunk], &params.final_norm);
        trace.logits = Some(final_normed.dot(&params.lm_head));
    }
    Ok(trace)
}
