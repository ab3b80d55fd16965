//! Training engine: a caching forward pass and its hand-written backward.
//!
//! The combined objective is `w_ntp * ntp + w_aux * lambda * aux`, where the
//! loss mode picks the weights. The auxiliary gradient enters the graph at
//! layer `l_star` only, added to the rotated Q/K gradients of that layer's
//! attention before the rotation is unwound; parameters strictly above
//! `l_star` therefore receive exactly zero auxiliary gradient.

use std::collections::BTreeSet;

use ndarray::{concatenate, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::ChunkLayout;
use crate::model::attention::{block_attention_layer, dense_attention, ChunkAttention};
use crate::model::forward::{check_layout, embed_chunks, merge_heads, project_qkv, CachedQk};
use crate::model::ops::{
    apply_rope_backward, rms_norm, rms_norm_backward, rope_tables, silu, silu_derivative,
    softmax_rows_backward,
};
use crate::model::{AttentionMode, ModelConfig, Parameters};
use crate::objective::{
    attention_mass_scores_detailed, infonce_aux_loss_excluding, infonce_grad, ntp_logit_grad,
    ntp_loss, scores_backward, LossBreakdown, RelevanceScores, SignalAggregation,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    NtpOnly,
    AuxOnly,
    NtpPlusAux,
}

impl LossMode {
    /// `(w_ntp, w_aux)`; the auxiliary weight multiplies `lambda`.
    fn weights(self, lambda: f64) -> (f64, f64) {
        match self {
            LossMode::NtpOnly => (1.0, 0.0),
            LossMode::AuxOnly => (0.0, lambda),
            LossMode::NtpPlusAux => (1.0, lambda),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossSpec {
    pub mode: LossMode,
    pub lambda: f64,
    pub tau: f64,
    /// Layer whose attention carries the auxiliary loss, 1-indexed.
    pub l_star: usize,
    pub aggregation: SignalAggregation,
}

impl LossSpec {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig("lambda must be nonnegative".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::InvalidConfig("tau must be positive".into()));
        }
        if self.l_star == 0 || self.l_star > cfg.n_layers {
            return Err(Error::StopLayerOutOfRange {
                requested: self.l_star,
                depth: cfg.n_layers,
            });
        }
        Ok(())
    }
}

struct LayerCache {
    x_in: Vec<Array2<f64>>,
    normed: Vec<Array2<f64>>,
    q: Vec<Array3<f64>>,
    k: Vec<Array3<f64>>,
    v: Vec<Array3<f64>>,
    attn: Vec<ChunkAttention>,
    r_mid: Vec<Array2<f64>>,
    normed2: Vec<Array2<f64>>,
    gate_pre: Vec<Array2<f64>>,
    up: Vec<Array2<f64>>,
    h: Vec<Array2<f64>>,
}

fn cat3(parts: &[Array3<f64>]) -> Array3<f64> {
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    concatenate(Axis(1), &views).expect("uniform chunk shapes")
}

/// Backward through one attended block. `dmerged` is the gradient at the
/// pre-projection concatenated head output.
#[allow(clippy::too_many_arguments)]
fn attention_block_backward(
    q_block: &Array3<f64>,
    k_chunks: &[Array3<f64>],
    v_chunks: &[Array3<f64>],
    attn: &ChunkAttention,
    dmerged: &Array2<f64>,
    scale: f64,
    dq_block: &mut Array3<f64>,
    dk_chunks: &mut [Array3<f64>],
    dv_chunks: &mut [Array3<f64>],
) {
    let (n_heads, _, head_dim) = q_block.dim();
    let l = k_chunks[0].len_of(Axis(1));
    for h in 0..n_heads {
        let k_scope_views: Vec<_> = attn
            .scope
            .iter()
            .map(|&m| k_chunks[m].index_axis(Axis(0), h))
            .collect();
        let k_scope = concatenate(Axis(0), &k_scope_views).expect("scope shapes");
        let v_scope_views: Vec<_> = attn
            .scope
            .iter()
            .map(|&m| v_chunks[m].index_axis(Axis(0), h))
            .collect();
        let v_scope = concatenate(Axis(0), &v_scope_views).expect("scope shapes");

        let dout = dmerged.slice(ndarray::s![.., h * head_dim..(h + 1) * head_dim]);
        let probs = &attn.probs[h];
        let dprobs = dout.dot(&v_scope.t());
        let dv_scope = probs.t().dot(&dout);
        let dz = softmax_rows_backward(probs, &dprobs);

        {
            let mut dq_h = dq_block.index_axis_mut(Axis(0), h);
            dq_h += &dz.dot(&k_scope).mapv(|v| v * scale);
        }
        let dk_scope = dz.t().dot(&q_block.index_axis(Axis(0), h)).mapv(|v| v * scale);
        for (seg, &m) in attn.scope.iter().enumerate() {
            let rows = seg * l..(seg + 1) * l;
            {
                let mut dk_h = dk_chunks[m].index_axis_mut(Axis(0), h);
                dk_h += &dk_scope.slice(ndarray::s![rows.clone(), ..]);
            }
            let mut dv_h = dv_chunks[m].index_axis_mut(Axis(0), h);
            dv_h += &dv_scope.slice(ndarray::s![rows, ..]);
        }
    }
}

/// Runs the full forward with activation caching, evaluates the losses, and
/// backpropagates. Returns the loss breakdown, parameter gradients, and the
/// relevance scores at `l_star`.
pub fn forward_backward(
    params: &Parameters,
    cfg: &ModelConfig,
    layout: &ChunkLayout,
    positives: &BTreeSet<usize>,
    spec: &LossSpec,
) -> Result<(LossBreakdown, Parameters, RelevanceScores)> {
    check_layout(cfg, layout)?;
    spec.validate(cfg)?;
    let positive = *positives.iter().next().ok_or(Error::NoPositives)?;
    let excluded: BTreeSet<usize> = positives
        .iter()
        .copied()
        .filter(|&k| k != positive)
        .collect();

    let n_chunks = layout.chunks.len();
    let q_chunk = layout.query_chunk_index();
    let scale = 1.0 / (cfg.head_dim as f64).sqrt();
    let rope: Vec<(Array2<f64>, Array2<f64>)> = layout
        .position_ids
        .iter()
        .map(|p| rope_tables(p, cfg.head_dim, cfg.rotary_base))
        .collect();
    let dense_mask = match cfg.attention_mode {
        AttentionMode::DenseCausal => Some(crate::model::attention::sequential_causal_mask(layout)),
        AttentionMode::Blockwise => None,
    };

    // ---- forward with caching ----
    let mut x = embed_chunks(params, cfg, layout)?;
    let mut caches: Vec<LayerCache> = Vec::with_capacity(cfg.n_layers);
    for layer_idx in 1..=cfg.n_layers {
        let layer = &params.layers[layer_idx - 1];
        let x_in = x.clone();
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
        let attn = match cfg.attention_mode {
            AttentionMode::Blockwise => block_attention_layer(&q, &k, &v, layout),
            AttentionMode::DenseCausal => vec![dense_attention(
                &cat3(&q),
                &cat3(&k),
                &cat3(&v),
                dense_mask.as_ref().expect("dense mask"),
                layout,
            )],
        };
        let mut r_mid = Vec::with_capacity(n_chunks);
        match cfg.attention_mode {
            AttentionMode::Blockwise => {
                for c in 0..n_chunks {
                    r_mid.push(&x[c] + &attn[c].merged.dot(&layer.w_o));
                }
            }
            AttentionMode::DenseCausal => {
                let projected = attn[0].merged.dot(&layer.w_o);
                for c in 0..n_chunks {
                    let range = c * layout.l_chunk..(c + 1) * layout.l_chunk;
                    r_mid.push(&x[c] + &projected.slice(ndarray::s![range, ..]));
                }
            }
        }
        let mut normed2 = Vec::with_capacity(n_chunks);
        let mut gate_pre = Vec::with_capacity(n_chunks);
        let mut up = Vec::with_capacity(n_chunks);
        let mut hbuf = Vec::with_capacity(n_chunks);
        let mut x_next = Vec::with_capacity(n_chunks);
        for c in 0..n_chunks {
            let n2 = rms_norm(&r_mid[c], &layer.mlp_norm);
            let g = n2.dot(&layer.w_gate);
            let u = n2.dot(&layer.w_up);
            let mut hh = g.clone();
            hh.zip_mut_with(&u, |gv, &uv| *gv = silu(*gv) * uv);
            x_next.push(&r_mid[c] + &hh.dot(&layer.w_down));
            normed2.push(n2);
            gate_pre.push(g);
            up.push(u);
            hbuf.push(hh);
        }
        caches.push(LayerCache {
            x_in,
            normed,
            q,
            k,
            v,
            attn,
            r_mid,
            normed2,
            gate_pre,
            up,
            h: hbuf,
        });
        x = x_next;
    }

    let final_normed = rms_norm(&x[q_chunk], &params.final_norm);
    let logits = final_normed.dot(&params.lm_head);

    // ---- losses ----
    let star = &caches[spec.l_star - 1];
    let qk = CachedQk {
        q_query: star.q[q_chunk].clone(),
        k_chunks: star.k.clone(),
    };
    let (scores, detail) =
        attention_mass_scores_detailed(&qk, layout, spec.l_star, spec.aggregation)?;
    let aux = infonce_aux_loss_excluding(&scores.scores, positive, &excluded, spec.tau)?;
    let ntp = ntp_loss(&logits, layout)?;
    let (w_ntp, w_aux) = spec.mode.weights(spec.lambda);
    let total = match spec.mode {
        LossMode::NtpPlusAux => crate::objective::total_loss(ntp, aux, spec.lambda),
        _ => w_ntp * ntp + w_aux * aux,
    };
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("loss (ntp={ntp}, aux={aux})")));
    }
    let breakdown = LossBreakdown {
        ntp,
        aux,
        total,
        lambda: spec.lambda,
        tau: spec.tau,
    };

    // ---- backward ----
    let mut grads = Parameters::zeros(cfg);
    let mut dx: Vec<Array2<f64>> = (0..n_chunks)
        .map(|_| Array2::zeros((layout.l_chunk, cfg.d_model)))
        .collect();

    if w_ntp != 0.0 {
        let mut dlogits = ntp_logit_grad(&logits, layout)?;
        dlogits.mapv_inplace(|v| v * w_ntp);
        grads.lm_head += &final_normed.t().dot(&dlogits);
        let dfinal_normed = dlogits.dot(&params.lm_head.t());
        let (dxq, dgain) = rms_norm_backward(&x[q_chunk], &params.final_norm, &dfinal_normed);
        grads.final_norm += &dgain;
        dx[q_chunk] += &dxq;
    }

    // Auxiliary gradient enters at l_star as extra dQ/dK on the rotated
    // projections of that layer.
    let aux_inject = if w_aux != 0.0 {
        let mut ds = infonce_grad(&scores.scores, positive, &excluded, spec.tau);
        for v in ds.iter_mut() {
            *v *= w_aux;
        }
        Some(scores_backward(&qk, layout, &detail, spec.aggregation, &ds))
    } else {
        None
    };

    for layer_idx in (1..=cfg.n_layers).rev() {
        let layer = &params.layers[layer_idx - 1];
        let glayer = &mut grads.layers[layer_idx - 1];
        let cache = &caches[layer_idx - 1];

        // MLP backward; dx holds the gradient at the block output.
        let mut dr_mid: Vec<Array2<f64>> = Vec::with_capacity(n_chunks);
        for c in 0..n_chunks {
            let dh = dx[c].dot(&layer.w_down.t());
            *(&mut glayer.w_down) += &cache.h[c].t().dot(&dx[c]);
            let mut dgate = dh.clone();
            dgate.zip_mut_with(&cache.gate_pre[c], |dv, &g| *dv *= silu_derivative(g));
            dgate.zip_mut_with(&cache.up[c], |dv, &u| *dv *= u);
            let mut dup = dh;
            dup.zip_mut_with(&cache.gate_pre[c], |dv, &g| *dv *= silu(g));
            let dnormed2 = dgate.dot(&layer.w_gate.t()) + dup.dot(&layer.w_up.t());
            *(&mut glayer.w_gate) += &cache.normed2[c].t().dot(&dgate);
            *(&mut glayer.w_up) += &cache.normed2[c].t().dot(&dup);
            let (dr, dgain) = rms_norm_backward(&cache.r_mid[c], &layer.mlp_norm, &dnormed2);
            *(&mut glayer.mlp_norm) += &dgain;
            dr_mid.push(&dx[c] + &dr);
        }

        // Attention backward.
        let mut dq: Vec<Array3<f64>> = (0..n_chunks)
            .map(|_| Array3::zeros((cfg.n_heads, layout.l_chunk, cfg.head_dim)))
            .collect();
        let mut dk: Vec<Array3<f64>> = dq.clone();
        let mut dv: Vec<Array3<f64>> = dq.clone();
        match cfg.attention_mode {
            AttentionMode::Blockwise => {
                for c in 0..n_chunks {
                    let dmerged = dr_mid[c].dot(&layer.w_o.t());
                    *(&mut glayer.w_o) += &cache.attn[c].merged.t().dot(&dr_mid[c]);
                    let mut dq_c = Array3::zeros((cfg.n_heads, layout.l_chunk, cfg.head_dim));
                    attention_block_backward(
                        &cache.q[c],
                        &cache.k,
                        &cache.v,
                        &cache.attn[c],
                        &dmerged,
                        scale,
                        &mut dq_c,
                        &mut dk,
                        &mut dv,
                    );
                    dq[c] += &dq_c;
                }
            }
            AttentionMode::DenseCausal => {
                let dr_views: Vec<_> = dr_mid.iter().map(|a| a.view()).collect();
                let dprojected = concatenate(Axis(0), &dr_views).expect("chunk shapes");
                let dmerged = dprojected.dot(&layer.w_o.t());
                *(&mut glayer.w_o) += &cache.attn[0].merged.t().dot(&dprojected);
                let q_full = cat3(&cache.q);
                let s = layout.total_len();
                let mut dq_full = Array3::zeros((cfg.n_heads, s, cfg.head_dim));
                attention_block_backward(
                    &q_full,
                    &cache.k,
                    &cache.v,
                    &cache.attn[0],
                    &dmerged,
                    scale,
                    &mut dq_full,
                    &mut dk,
                    &mut dv,
                );
                for c in 0..n_chunks {
                    let range = c * layout.l_chunk..(c + 1) * layout.l_chunk;
                    dq[c] += &dq_full.slice(ndarray::s![.., range, ..]);
                }
            }
        }

        if layer_idx == spec.l_star {
            if let Some((dq_aux, dk_aux)) = &aux_inject {
                dq[q_chunk] += dq_aux;
                for (doc, dk_doc) in dk_aux.iter().enumerate() {
                    dk[doc + 1] += dk_doc;
                }
            }
        }

        // Rotation, projections, and the attention norm.
        for c in 0..n_chunks {
            apply_rope_backward(&mut dq[c], &rope[c].0.view(), &rope[c].1.view());
            apply_rope_backward(&mut dk[c], &rope[c].0.view(), &rope[c].1.view());
            let dq_flat = merge_heads(&dq[c]);
            let dk_flat = merge_heads(&dk[c]);
            let dv_flat = merge_heads(&dv[c]);
            *(&mut glayer.w_q) += &cache.normed[c].t().dot(&dq_flat);
            *(&mut glayer.w_k) += &cache.normed[c].t().dot(&dk_flat);
            *(&mut glayer.w_v) += &cache.normed[c].t().dot(&dv_flat);
            let dnormed = dq_flat.dot(&layer.w_q.t())
                + dk_flat.dot(&layer.w_k.t())
                + dv_flat.dot(&layer.w_v.t());
            let (dxc, dgain) = rms_norm_backward(&cache.x_in[c], &layer.attn_norm, &dnormed);
            *(&mut glayer.attn_norm) += &dgain;
            dx[c] = &dr_mid[c] + &dxc;
        }
    }

    // Embedding scatter-add.
    for (c, chunk) in layout.chunks.iter().enumerate() {
        for (slot, &tok) in chunk.tokens.iter().enumerate() {
            let mut row = grads.embedding.row_mut(tok as usize);
            row += &dx[c].row(slot);
        }
    }

    Ok((breakdown, grads, scores))
}

/// Loss evaluation without any backward work, via the plain forward pass.
/// This is the path finite-difference probing perturbs.
pub fn evaluate_loss(
    params: &Parameters,
    cfg: &ModelConfig,
    layout: &ChunkLayout,
    positives: &BTreeSet<usize>,
    spec: &LossSpec,
) -> Result<LossBreakdown> {
    spec.validate(cfg)?;
    let positive = *positives.iter().next().ok_or(Error::NoPositives)?;
    let excluded: BTreeSet<usize> = positives
        .iter()
        .copied()
        .filter(|&k| k != positive)
        .collect();
    let trace = crate::model::forward::forward(
        params,
        cfg,
        layout,
        &crate::model::forward::TraceOptions {
            qk_cache: crate::model::forward::QkCachePolicy::Layer(spec.l_star),
            ..Default::default()
        },
    )?;
    let scores =
        crate::objective::attention_mass_scores(&trace, layout, spec.l_star, spec.aggregation)?;
    let aux = infonce_aux_loss_excluding(&scores.scores, positive, &excluded, spec.tau)?;
    let logits = trace
        .logits
        .as_ref()
        .ok_or_else(|| Error::MissingTrace("logits".into()))?;
    let ntp = ntp_loss(logits, layout)?;
    let (w_ntp, w_aux) = spec.mode.weights(spec.lambda);
    let total = match spec.mode {
        LossMode::NtpPlusAux => crate::objective::total_loss(ntp, aux, spec.lambda),
        _ => w_ntp * ntp + w_aux * aux,
    };
    Ok(LossBreakdown {
        ntp,
        aux,
        total,
        lambda: spec.lambda,
        tau: spec.tau,
    })
}
