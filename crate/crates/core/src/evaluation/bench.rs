//! Latency scaling benchmarks and the curve fits used to judge them.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Candidate, RetrievalExample, TemplateConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::EvalOptions;
use crate::inference::{greedy_decode_id, rank_by_attention, DecodeContext, InferenceMethod};
use crate::layout::{assign_positions, assign_sequential_positions, chunk_segments, with_default_signal_tokens};
use crate::model::{AttentionMode, ModelConfig, Parameters};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub n_values: Vec<usize>,
    pub modes: Vec<AttentionMode>,
    pub methods: Vec<InferenceMethod>,
    /// Timed repetitions per point; the median is reported.
    pub repeats: usize,
    /// Untimed runs before measurement starts.
    pub warmup: usize,
    pub doc_len: usize,
    pub query_span_len: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            n_values: vec![16, 32, 64, 128],
            modes: vec![AttentionMode::Blockwise],
            methods: vec![InferenceMethod::Attention, InferenceMethod::Greedy],
            repeats: 9,
            warmup: 3,
            doc_len: 12,
            query_span_len: 5,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub n_docs: usize,
    pub mode: AttentionMode,
    pub method: InferenceMethod,
    pub median_seconds: f64,
    pub repeats: usize,
}

/// Builds one ranking example over the vocabulary's corpus words (so any
/// loaded model/vocab pair can be benchmarked at any N).
fn sample_example(
    vocab: &Vocabulary,
    rng: &mut ChaCha8Rng,
    n_docs: usize,
    doc_len: usize,
    span: usize,
) -> Result<RetrievalExample> {
    let words: Vec<String> = (vocab.n_reserved()..vocab.len())
        .map(|id| vocab.token(id as u32).expect("in range").to_string())
        .collect();
    if words.is_empty() {
        return Err(Error::InvalidConfig(
            "vocabulary has no corpus words to benchmark with".into(),
        ));
    }
    let width = crate::corpus::id_width(n_docs);
    let candidates: Vec<Candidate> = (0..n_docs)
        .map(|slot| Candidate {
            doc_id: format!("{:0width$}", slot, width = width),
            tokens: (0..doc_len)
                .map(|_| words[rng.random_range(0..words.len())].clone())
                .collect(),
        })
        .collect();
    let positive = rng.random_range(0..n_docs);
    let start = rng.random_range(0..=doc_len.saturating_sub(span));
    let query = candidates[positive].tokens[start..start + span].to_vec();
    Ok(RetrievalExample {
        query,
        candidates,
        positive_indices: BTreeSet::from([positive]),
    })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median wall-clock per query across candidate-list sizes and modes.
/// Attention-based inference times the prefill to `l_star` plus scoring;
/// decoding times the full-depth prefills and every decode step. Runs on
/// one thread; warmup iterations are discarded.
pub fn scaling_benchmark(
    params: &Parameters,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    template: &TemplateConfig,
    opts: &EvalOptions,
    spec: &BenchmarkSpec,
) -> Result<Vec<LatencyRecord>> {
    let mut records = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for &mode in &spec.modes {
        for &n in &spec.n_values {
            let example = sample_example(vocab, &mut rng, n, spec.doc_len, spec.query_span_len)?;
            let segments = crate::corpus::assemble_prompt(&example, vocab, template)?;
            let mut mode_cfg = cfg.clone();
            mode_cfg.attention_mode = mode;
            let required = match mode {
                AttentionMode::Blockwise => opts.query_offset + opts.l_chunk + 1,
                AttentionMode::DenseCausal => (n + 2) * opts.l_chunk + 1,
            };
            mode_cfg.max_position = mode_cfg.max_position.max(required);

            for &method in &spec.methods {
                let mut times = Vec::with_capacity(spec.repeats);
                for rep in 0..spec.warmup + spec.repeats {
                    let start = Instant::now();
                    match method {
                        InferenceMethod::Attention => {
                            let layout = chunk_segments(&segments, opts.l_chunk)?;
                            let layout = match mode {
                                AttentionMode::Blockwise => {
                                    assign_positions(layout, opts.query_offset)?
                                }
                                AttentionMode::DenseCausal => assign_sequential_positions(layout),
                            };
                            let layout = with_default_signal_tokens(layout, vocab)?;
                            rank_by_attention(
                                params,
                                &mode_cfg,
                                &layout,
                                opts.l_star,
                                1,
                                opts.aggregation,
                            )?;
                        }
                        InferenceMethod::Greedy => {
                            let ctx = DecodeContext {
                                params,
                                cfg: &mode_cfg,
                                vocab,
                                segments: &segments,
                                l_chunk: opts.l_chunk,
                                query_offset: opts.query_offset,
                                step_cap: opts.step_cap,
                            };
                            greedy_decode_id(&ctx)?;
                        }
                        InferenceMethod::Beam => {
                            let ctx = DecodeContext {
                                params,
                                cfg: &mode_cfg,
                                vocab,
                                segments: &segments,
                                l_chunk: opts.l_chunk,
                                query_offset: opts.query_offset,
                                step_cap: opts.step_cap,
                            };
                            crate::inference::constrained_beam_decode(&ctx, opts.beam)?;
                        }
                    }
                    if rep >= spec.warmup {
                        times.push(start.elapsed().as_secs_f64());
                    }
                }
                records.push(LatencyRecord {
                    n_docs: n,
                    mode,
                    method,
                    median_seconds: median(times),
                    repeats: spec.repeats,
                });
            }
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
    pub rss: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let tss: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let r_squared = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
    LinearFit {
        intercept,
        slope,
        r_squared,
        rss,
    }
}

/// Least-squares quadratic `a + b x + c x²`; returns `([a, b, c], rss)`.
pub fn quadratic_fit(xs: &[f64], ys: &[f64]) -> ([f64; 3], f64) {
    // Normal equations for the 3-parameter polynomial.
    let mut ata = [[0.0f64; 3]; 3];
    let mut atb = [0.0f64; 3];
    for (&x, &y) in xs.iter().zip(ys) {
        let basis = [1.0, x, x * x];
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += basis[i] * basis[j];
            }
            atb[i] += basis[i] * y;
        }
    }
    // Gaussian elimination with partial pivoting.
    let mut a = ata;
    let mut b = atb;
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut coeffs = [0.0f64; 3];
    for row in (0..3).rev() {
        let mut acc = b[row];
        for k in row + 1..3 {
            acc -= a[row][k] * coeffs[k];
        }
        coeffs[row] = acc / a[row][row];
    }
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let e = y - (coeffs[0] + coeffs[1] * x + coeffs[2] * x * x);
            e * e
        })
        .sum();
    (coeffs, rss)
}

/// Akaike information criterion for a least-squares fit with `k` parameters.
pub fn aic(rss: f64, n: usize, k: usize) -> f64 {
    let n = n as f64;
    n * (rss.max(1e-300) / n).ln() + 2.0 * k as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_fit_recovers_a_line_exactly() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 + 2.0 * x).collect();
        let fit = linear_fit(&xs, &ys);
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!((fit.intercept - 3.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_beats_linear_on_aic_for_quadratic_data() {
        let xs: Vec<f64> = (1..=8).map(|x| x as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 + 0.5 * x + 0.3 * x * x).collect();
        let lin = linear_fit(&xs, &ys);
        let (_, qrss) = quadratic_fit(&xs, &ys);
        assert!(qrss < lin.rss);
        assert!(aic(qrss, xs.len(), 3) < aic(lin.rss, xs.len(), 2));
    }

    #[test]
    fn median_of_odd_and_even_counts() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
