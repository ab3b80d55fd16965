//! The decoder transformer: pre-norm blocks with rotary attention and a
//! gated MLP, run in either blockwise-structured or dense-causal attention
//! mode. All math is f64, so the single tolerance contracts hold with room
//! to spare and gradient checks run at full precision.

pub mod attention;
pub mod backward;
pub mod checkpoint;
pub mod forward;
pub mod ops;

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use attention::{
    block_attention_layer, blockwise_scope_mask, dense_masked_attention_oracle, ChunkAttention,
};
pub use backward::{evaluate_loss, forward_backward, LossMode, LossSpec};
pub use checkpoint::{load_model, read_checkpoint, save_model, write_checkpoint};
pub use forward::{forward, CachedQk, ForwardTrace, QkCachePolicy, TraceOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Blockwise,
    DenseCausal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub mlp_hidden: usize,
    pub rotary_base: f64,
    pub max_position: usize,
    pub attention_mode: AttentionMode,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.vocab_size == 0 || self.mlp_hidden == 0
        {
            return Err(Error::InvalidConfig(
                "n_layers, n_heads, vocab_size, mlp_hidden must be positive".into(),
            ));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must equal n_heads {} * head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::InvalidConfig(
                "head_dim must be even for rotary pairs".into(),
            ));
        }
        if self.rotary_base <= 1.0 {
            return Err(Error::InvalidConfig("rotary_base must exceed 1".into()));
        }
        if self.max_position == 0 {
            return Err(Error::InvalidConfig("max_position must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParameters {
    pub attn_norm: Array1<f64>,
    /// `[d_model, n_heads * head_dim]`; head `h` owns columns `h*hd..(h+1)*hd`.
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    /// `[n_heads * head_dim, d_model]`.
    pub w_o: Array2<f64>,
    pub mlp_norm: Array1<f64>,
    pub w_gate: Array2<f64>,
    pub w_up: Array2<f64>,
    pub w_down: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    /// `[vocab_size, d_model]`.
    pub embedding: Array2<f64>,
    pub layers: Vec<LayerParameters>,
    pub final_norm: Array1<f64>,
    /// `[d_model, vocab_size]` (untied output head).
    pub lm_head: Array2<f64>,
}

fn sampled(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    // Variance 1/fan_in keeps activations at unit scale.
    let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("valid sigma");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

fn sampled_std(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("valid sigma");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

impl Parameters {
    /// Deterministic scaled-normal initialization; normalization gains are 1.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let embedding = sampled_std(&mut rng, cfg.vocab_size, d, 1.0 / (d as f64).sqrt());
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParameters {
                attn_norm: Array1::ones(d),
                w_q: sampled(&mut rng, d, cfg.n_heads * cfg.head_dim),
                w_k: sampled(&mut rng, d, cfg.n_heads * cfg.head_dim),
                w_v: sampled(&mut rng, d, cfg.n_heads * cfg.head_dim),
                w_o: sampled(&mut rng, cfg.n_heads * cfg.head_dim, d),
                mlp_norm: Array1::ones(d),
                w_gate: sampled(&mut rng, d, cfg.mlp_hidden),
                w_up: sampled(&mut rng, d, cfg.mlp_hidden),
                w_down: sampled(&mut rng, cfg.mlp_hidden, d),
            })
            .collect();
        Self {
            embedding,
            layers,
            final_norm: Array1::ones(d),
            lm_head: sampled(&mut rng, d, cfg.vocab_size),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let hd = cfg.n_heads * cfg.head_dim;
        Self {
            embedding: Array2::zeros((cfg.vocab_size, d)),
            layers: (0..cfg.n_layers)
                .map(|_| LayerParameters {
                    attn_norm: Array1::zeros(d),
                    w_q: Array2::zeros((d, hd)),
                    w_k: Array2::zeros((d, hd)),
                    w_v: Array2::zeros((d, hd)),
                    w_o: Array2::zeros((hd, d)),
                    mlp_norm: Array1::zeros(d),
                    w_gate: Array2::zeros((d, cfg.mlp_hidden)),
                    w_up: Array2::zeros((d, cfg.mlp_hidden)),
                    w_down: Array2::zeros((cfg.mlp_hidden, d)),
                })
                .collect(),
            final_norm: Array1::zeros(d),
            lm_head: Array2::zeros((d, cfg.vocab_size)),
        }
    }

    /// Fixed-order (name, tensor) views; the flattening used by the
    /// optimizer, checkpoints, and gradient probing.
    pub fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewD<'_, f64>)> =
            vec![("embedding".into(), self.embedding.view().into_dyn())];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), l.attn_norm.view().into_dyn()));
            out.push((format!("layers.{i}.w_q"), l.w_q.view().into_dyn()));
            out.push((format!("layers.{i}.w_k"), l.w_k.view().into_dyn()));
            out.push((format!("layers.{i}.w_v"), l.w_v.view().into_dyn()));
            out.push((format!("layers.{i}.w_o"), l.w_o.view().into_dyn()));
            out.push((format!("layers.{i}.mlp_norm"), l.mlp_norm.view().into_dyn()));
            out.push((format!("layers.{i}.w_gate"), l.w_gate.view().into_dyn()));
            out.push((format!("layers.{i}.w_up"), l.w_up.view().into_dyn()));
            out.push((format!("layers.{i}.w_down"), l.w_down.view().into_dyn()));
        }
        out.push(("final_norm".into(), self.final_norm.view().into_dyn()));
        out.push(("lm_head".into(), self.lm_head.view().into_dyn()));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewMutD<'_, f64>)> = vec![(
            "embedding".into(),
            self.embedding.view_mut().into_dyn(),
        )];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((
                format!("layers.{i}.attn_norm"),
                l.attn_norm.view_mut().into_dyn(),
            ));
            out.push((format!("layers.{i}.w_q"), l.w_q.view_mut().into_dyn()));
            out.push((format!("layers.{i}.w_k"), l.w_k.view_mut().into_dyn()));
            out.push((format!("layers.{i}.w_v"), l.w_v.view_mut().into_dyn()));
            out.push((format!("layers.{i}.w_o"), l.w_o.view_mut().into_dyn()));
            out.push((
                format!("layers.{i}.mlp_norm"),
                l.mlp_norm.view_mut().into_dyn(),
            ));
            out.push((format!("layers.{i}.w_gate"), l.w_gate.view_mut().into_dyn()));
            out.push((format!("layers.{i}.w_up"), l.w_up.view_mut().into_dyn()));
            out.push((format!("layers.{i}.w_down"), l.w_down.view_mut().into_dyn()));
        }
        out.push(("final_norm".into(), self.final_norm.view_mut().into_dyn()));
        out.push(("lm_head".into(), self.lm_head.view_mut().into_dyn()));
        out
    }

    /// In-place `self += rhs * scale`, tensor by tensor.
    pub fn add_scaled(&mut self, rhs: &Self, scale: f64) {
        for (mut a, b) in self
            .named_tensors_mut()
            .into_iter()
            .map(|(_, t)| t)
            .zip(rhs.named_tensors().into_iter().map(|(_, t)| t))
        {
            a.zip_mut_with(&b, |x, y| *x += y * scale);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, mut t) in self.named_tensors_mut() {
            t.mapv_inplace(|v| v * s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.named_tensors()
            .iter()
            .map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            head_dim: 32,
            vocab_size: 50,
            mlp_hidden: 128,
            rotary_base: 10_000.0,
            max_position: 9000,
            attention_mode: AttentionMode::Blockwise,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny_cfg();
        let a = Parameters::init(&cfg, 3);
        let b = Parameters::init(&cfg, 3);
        assert_eq!(a, b);
        let c = Parameters::init(&cfg, 4);
        assert_ne!(a, c);
    }

    #[test]
    fn projection_shapes_follow_head_split() {
        let cfg = tiny_cfg();
        let p = Parameters::init(&cfg, 0);
        assert_eq!(p.layers[0].w_q.dim(), (64, 64));
        assert_eq!(p.layers[0].w_o.dim(), (64, 64));
        assert_eq!(p.embedding.dim(), (50, 64));
        assert_eq!(p.lm_head.dim(), (64, 50));
    }

    #[test]
    fn gains_start_at_exactly_one() {
        let cfg = tiny_cfg();
        let p = Parameters::init(&cfg, 1);
        assert!(p.layers.iter().all(|l| l.attn_norm.iter().all(|&g| g == 1.0)));
        assert!(p.final_norm.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn config_validation_catches_shape_mismatch() {
        let mut cfg = tiny_cfg();
        cfg.head_dim = 16;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.head_dim = 31;
        cfg.d_model = 62;
        assert!(cfg.validate().is_err());
    }
}
