//! Fine-tuning: batch assembly, the combined objective, gradient clipping,
//! an adaptive-moment optimizer, warmup-plus-cosine scheduling, resumable
//! checkpoints, and finite-difference gradient verification.
//!
//! Determinism: batch composition and shuffle seeds derive statelessly from
//! `(seed, step)`, so a run resumed from a checkpoint replays exactly the
//! steps an uninterrupted run would take. Batch members run in parallel but
//! gradients reduce in slot order, so results are bit-stable.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{assemble_prompt, build_candidate_list, RetrievalExample, TemplateConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::layout::{
    assign_positions, assign_sequential_positions, chunk_segments_teacher_forced,
    with_default_signal_tokens, ChunkLayout,
};
use crate::model::checkpoint::{checkpoint_bytes, content_digest, read_checkpoint};
use crate::model::{
    evaluate_loss, forward_backward, AttentionMode, LossMode, LossSpec, ModelConfig, Parameters,
};
use crate::objective::{LossBreakdown, SignalAggregation};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub tau: f64,
    /// Layer carrying the auxiliary loss, 1-indexed.
    pub l_star: usize,
    pub seed: u64,
    pub grad_clip_norm: f64,
    pub loss_mode: LossMode,
    /// Checkpoint cadence in steps (0 disables periodic checkpoints).
    pub eval_every: usize,
    /// Candidate-list size assembled per training example.
    pub n_candidates: usize,
    pub l_chunk: usize,
    pub query_offset: usize,
    pub aggregation: SignalAggregation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 3e-4,
            warmup_steps: 100,
            total_steps: 2000,
            batch_size: 16,
            lambda: 0.1,
            tau: 0.05,
            l_star: 2,
            seed: 0,
            grad_clip_norm: 1.0,
            loss_mode: LossMode::NtpPlusAux,
            eval_every: 0,
            n_candidates: 8,
            l_chunk: 32,
            query_offset: crate::layout::DEFAULT_QUERY_OFFSET,
            aggregation: SignalAggregation::Sum,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::InvalidConfig(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig("lambda must be nonnegative".into()));
        }
        if self.l_star == 0 || self.l_star > model.n_layers {
            return Err(Error::InvalidConfig(format!(
                "l_star {} must be in 1..={}",
                self.l_star, model.n_layers
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            mode: self.loss_mode,
            lambda: self.lambda,
            tau: self.tau,
            l_star: self.l_star,
            aggregation: self.aggregation,
        }
    }
}

/// Scales `grads` so the global L2 norm does not exceed `max_norm`.
pub fn clip_global_norm(grads: &mut Parameters, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Linear warmup to `lr_peak` over `warmup_steps`, then cosine decay to zero
/// at `total_steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.total_steps == 0 {
        return 0.0;
    }
    if step < cfg.warmup_steps {
        return cfg.lr_peak * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.total_steps - cfg.warmup_steps).max(1) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    let progress = progress.min(1.0);
    cfg.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Parameters,
    pub v: Parameters,
    pub t: u64,
}

impl AdamState {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            m: Parameters::zeros(cfg),
            v: Parameters::zeros(cfg),
            t: 0,
        }
    }

    /// One adaptive-moment update with bias correction.
    pub fn update(&mut self, params: &mut Parameters, grads: &Parameters, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let mut p = params.named_tensors_mut();
        let mut m = self.m.named_tensors_mut();
        let mut v = self.v.named_tensors_mut();
        let g = grads.named_tensors();
        for i in 0..p.len() {
            let gt = &g[i].1;
            let iter = p[i]
                .1
                .iter_mut()
                .zip(m[i].1.iter_mut())
                .zip(v[i].1.iter_mut())
                .zip(gt.iter());
            for (((pv, mv), vv), &gv) in iter {
                *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: Parameters,
    pub opt: AdamState,
    pub step: usize,
}

impl TrainState {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        Self {
            params: Parameters::init(cfg, seed),
            opt: AdamState::new(cfg),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub ntp: f64,
    pub aux: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// Metadata written beside every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub metrics: Option<serde_json::Value>,
    /// SHA-256 of the checkpoint payload; validated on load.
    pub digest: String,
}

/// Builds the teacher-forced layout for one training example.
pub fn training_layout(
    example: &RetrievalExample,
    vocab: &Vocabulary,
    template: &TemplateConfig,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ChunkLayout, BTreeSet<usize>)> {
    let segments = assemble_prompt(example, vocab, template)?;
    let layout = chunk_segments_teacher_forced(&segments, cfg.l_chunk)?;
    let layout = match model.attention_mode {
        AttentionMode::Blockwise => assign_positions(layout, cfg.query_offset)?,
        AttentionMode::DenseCausal => assign_sequential_positions(layout),
    };
    let layout = with_default_signal_tokens(layout, vocab)?;
    Ok((layout, example.positive_indices.clone()))
}

fn mean_of(results: Vec<(LossBreakdown, Parameters)>, cfg: &ModelConfig) -> (LossBreakdown, Parameters) {
    let n = results.len() as f64;
    let mut grads = Parameters::zeros(cfg);
    let mut ntp = 0.0;
    let mut aux = 0.0;
    let mut total = 0.0;
    let (mut lambda, mut tau) = (0.0, 0.0);
    for (loss, g) in &results {
        grads.add_scaled(g, 1.0 / n);
        ntp += loss.ntp / n;
        aux += loss.aux / n;
        total += loss.total / n;
        lambda = loss.lambda;
        tau = loss.tau;
    }
    (
        LossBreakdown {
            ntp,
            aux,
            total,
            lambda,
            tau,
        },
        grads,
    )
}

/// Runs training from `state.step` to `cfg.total_steps`.
///
/// Per step: sample a batch, rebuild each example's candidate list with a
/// step-derived shuffle seed (teacher forcing with the positive at a random
/// slot), assemble and grid the prompts, run forward/backward, clip the
/// global gradient norm, and apply the scheduled adaptive-moment update.
/// With an output directory, appends JSONL step logs and writes periodic
/// checkpoints.
pub fn train(
    state: &mut TrainState,
    model: &ModelConfig,
    vocab: &Vocabulary,
    template: &TemplateConfig,
    dataset: &[RetrievalExample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<StepLog>> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("dataset is empty".into()));
    }
    cfg.validate(model)?;
    let spec = cfg.loss_spec();
    let mut logs = Vec::new();
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(
                fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("log.jsonl"))?,
            )
        }
        None => None,
    };

    while state.step < cfg.total_steps {
        let step = state.step;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step as u64 + 1);
        let batch: Vec<(usize, u64)> = (0..cfg.batch_size)
            .map(|_| {
                let idx = rng.random_range(0..dataset.len());
                let shuffle_seed: u64 = rng.random();
                (idx, shuffle_seed)
            })
            .collect();

        let results: Vec<(LossBreakdown, Parameters)> = batch
            .par_iter()
            .map(|&(idx, shuffle_seed)| -> Result<(LossBreakdown, Parameters)> {
                let listed = build_candidate_list(&dataset[idx], cfg.n_candidates, shuffle_seed)?;
                let (layout, positives) =
                    training_layout(&listed, vocab, template, model, cfg)?;
                let (loss, grads, _) =
                    forward_backward(&state.params, model, &layout, &positives, &spec)?;
                Ok((loss, grads))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!(
                    "step {step}: {msg}; batch indices {:?}",
                    batch.iter().map(|(i, _)| *i).collect::<Vec<_>>()
                )),
                other => other,
            })?;

        let (loss, mut grads) = mean_of(results, model);
        let grad_norm = grads.global_norm();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "step {step}: gradient norm; batch indices {:?}",
                batch.iter().map(|(i, _)| *i).collect::<Vec<_>>()
            )));
        }
        clip_global_norm(&mut grads, cfg.grad_clip_norm);
        let lr = lr_schedule(step, cfg);
        state.opt.update(&mut state.params, &grads, lr);
        state.step += 1;

        let entry = StepLog {
            step,
            lr,
            ntp: loss.ntp,
            aux: loss.aux,
            total: loss.total,
            grad_norm,
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&entry)?)?;
        }
        logs.push(entry);

        if let Some(dir) = out_dir {
            let periodic = cfg.eval_every > 0 && state.step % cfg.eval_every == 0;
            if periodic && state.step < cfg.total_steps {
                save_train_state(
                    &dir.join(format!("checkpoint_step{}.bin", state.step)),
                    state,
                    model,
                    cfg,
                    None,
                )?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_train_state(&dir.join("checkpoint.bin"), state, model, cfg, None)?;
    }
    Ok(logs)
}

/// Writes a resumable checkpoint (parameters plus optimizer moments) and its
/// metadata JSON alongside.
pub fn save_train_state(
    path: &Path,
    state: &TrainState,
    model: &ModelConfig,
    cfg: &TrainConfig,
    metrics: Option<serde_json::Value>,
) -> Result<()> {
    let mut tensors: Vec<(String, ndarray::ArrayD<f64>)> = Vec::new();
    for (name, t) in state.params.named_tensors() {
        tensors.push((name, t.to_owned()));
    }
    for (name, t) in state.opt.m.named_tensors() {
        tensors.push((format!("adam.m.{name}"), t.to_owned()));
    }
    for (name, t) in state.opt.v.named_tensors() {
        tensors.push((format!("adam.v.{name}"), t.to_owned()));
    }
    tensors.push((
        "adam.t".into(),
        ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1]), state.opt.t as f64),
    ));
    tensors.push((
        "train.step".into(),
        ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1]), state.step as f64),
    ));
    let views: Vec<(String, ndarray::ArrayViewD<f64>)> =
        tensors.iter().map(|(n, t)| (n.clone(), t.view())).collect();
    let bytes = checkpoint_bytes(model, &views)?;
    let digest = content_digest(&bytes);
    fs::write(path, &bytes)?;
    let meta = CheckpointMeta {
        step: state.step,
        model_config: model.clone(),
        train_config: cfg.clone(),
        metrics,
        digest,
    };
    fs::write(
        path.with_extension("meta.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(())
}

/// Loads a resumable checkpoint; when the metadata file is present the
/// payload digest is verified against it.
pub fn load_train_state(path: &Path) -> Result<(TrainState, ModelConfig, Option<CheckpointMeta>)> {
    let bytes = fs::read(path)?;
    let meta_path = path.with_extension("meta.json");
    let meta: Option<CheckpointMeta> = match fs::read_to_string(&meta_path) {
        Ok(s) => Some(serde_json::from_str(&s)?),
        Err(_) => None,
    };
    if let Some(m) = &meta {
        let digest = content_digest(&bytes);
        if digest != m.digest {
            return Err(Error::Checkpoint(format!(
                "digest mismatch: checkpoint {digest} vs metadata {}",
                m.digest
            )));
        }
    }
    let (model, tensors) = read_checkpoint(&bytes)?;
    model.validate()?;
    let mut params_t = Vec::new();
    let mut m_t = Vec::new();
    let mut v_t = Vec::new();
    let mut adam_t = 0u64;
    let mut step = 0usize;
    for (name, tensor) in tensors {
        if let Some(rest) = name.strip_prefix("adam.m.") {
            m_t.push((rest.to_string(), tensor));
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            v_t.push((rest.to_string(), tensor));
        } else if name == "adam.t" {
            adam_t = tensor.iter().next().copied().unwrap_or(0.0) as u64;
        } else if name == "train.step" {
            step = tensor.iter().next().copied().unwrap_or(0.0) as usize;
        } else {
            params_t.push((name, tensor));
        }
    }
    let params = crate::model::checkpoint::params_from_tensors(&model, &params_t)?;
    let m = crate::model::checkpoint::params_from_tensors(&model, &m_t)?;
    let v = crate::model::checkpoint::params_from_tensors(&model, &v_t)?;
    Ok((
        TrainState {
            params,
            opt: AdamState { m, v, t: adam_t },
            step,
        },
        model,
        meta,
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub n_probes: usize,
    /// Worst probe: (tensor name, flat element index, analytic, numeric).
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares analytic gradients against central finite differences on
/// `n_probes` randomly chosen scalar parameters. The batch loss is the mean
/// over the given layouts. Relative error uses a denominator floored at
/// 1e-6 so near-zero gradient pairs do not divide to noise.
pub fn finite_difference_grad_check(
    params: &Parameters,
    model: &ModelConfig,
    batch: &[(ChunkLayout, BTreeSet<usize>)],
    spec: &LossSpec,
    epsilon: f64,
    n_probes: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty gradient-check batch".into()));
    }
    let n = batch.len() as f64;
    let mut analytic = Parameters::zeros(model);
    for (layout, positives) in batch {
        let (_, grads, _) = forward_backward(params, model, layout, positives, spec)?;
        analytic.add_scaled(&grads, 1.0 / n);
    }

    let loss_at = |p: &Parameters| -> Result<f64> {
        let mut total = 0.0;
        for (layout, positives) in batch {
            total += evaluate_loss(p, model, layout, positives, spec)?.total;
        }
        Ok(total / n)
    };

    let sizes: Vec<(String, usize)> = params
        .named_tensors()
        .into_iter()
        .map(|(name, t)| (name, t.len()))
        .collect();
    let total_elems: usize = sizes.iter().map(|(_, l)| l).sum();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perturbed = params.clone();
    let mut max_rel: f64 = 0.0;
    let mut worst = None;
    for _ in 0..n_probes {
        let mut flat = rng.random_range(0..total_elems);
        let mut tensor_idx = 0;
        while flat >= sizes[tensor_idx].1 {
            flat -= sizes[tensor_idx].1;
            tensor_idx += 1;
        }

        let original = {
            let views = perturbed.named_tensors();
            *views[tensor_idx].1.iter().nth(flat).expect("in range")
        };
        set_flat(&mut perturbed, tensor_idx, flat, original + epsilon);
        let up = loss_at(&perturbed)?;
        set_flat(&mut perturbed, tensor_idx, flat, original - epsilon);
        let down = loss_at(&perturbed)?;
        set_flat(&mut perturbed, tensor_idx, flat, original);

        let numeric = (up - down) / (2.0 * epsilon);
        let a = {
            let views = analytic.named_tensors();
            *views[tensor_idx].1.iter().nth(flat).expect("in range")
        };
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > max_rel {
            max_rel = rel;
            worst = Some((sizes[tensor_idx].0.clone(), flat, a, numeric));
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        n_probes,
        worst,
    })
}

fn set_flat(params: &mut Parameters, tensor_idx: usize, flat: usize, value: f64) {
    let mut views = params.named_tensors_mut();
    if let Some(v) = views[tensor_idx].1.iter_mut().nth(flat) {
        *v = value;
    }
}
