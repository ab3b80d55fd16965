//! Command implementations behind the argument parser.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use blockrank_core::corpus::{
    build_candidate_list, generate_synthetic_dataset, ingest_examples, reserved_tokens,
    write_examples, RetrievalExample, Vocabulary,
};
use blockrank_core::error::Error as CoreError;
use blockrank_core::evaluation::{
    aic, default_grid, evaluate_dataset, export_attention_heatmaps, layerwise_attention_precision,
    linear_fit, quadratic_fit, run_ablation_grid, scaling_benchmark, write_matrix_csv,
    AblationContext, LatencyRecord,
};
use blockrank_core::inference::InferenceMethod;
use blockrank_core::layout::{ChunkLayout, PositionScheme};
use blockrank_core::model::{
    forward, AttentionMode, ModelConfig, Parameters, QkCachePolicy, TraceOptions,
};
use blockrank_core::training::{load_train_state, train, TrainState};

use crate::config::RunConfig;

pub type CmdResult = Result<(), String>;

fn fail(msg: impl std::fmt::Display) -> String {
    msg.to_string()
}

pub fn write_snapshot(out: &Path, body: &str) -> CmdResult {
    fs::write(out.join("config.json"), body).map_err(fail)
}

pub fn load_dataset(data: &Path) -> Result<(Vocabulary, Vec<RetrievalExample>), String> {
    let vocab_path = data.join("vocab.json");
    let vocab = Vocabulary::from_json(
        &fs::read_to_string(&vocab_path)
            .map_err(|e| format!("cannot read {}: {e}", vocab_path.display()))?,
    )
    .map_err(fail)?;
    let dataset_path = data.join("dataset.jsonl");
    let examples = ingest_examples(&dataset_path)
        .map_err(|e| format!("{}: {e}", dataset_path.display()))?;
    Ok((vocab, examples))
}

/// Resolves `vocab_size = 0` against the dataset vocabulary and checks an
/// explicit size for consistency.
pub fn resolve_model(mut model: ModelConfig, vocab: &Vocabulary) -> Result<ModelConfig, String> {
    if model.vocab_size == 0 {
        model.vocab_size = vocab.len();
    } else if model.vocab_size != vocab.len() {
        return Err(format!(
            "model.vocab_size {} does not match the dataset vocabulary ({} tokens)",
            model.vocab_size,
            vocab.len()
        ));
    }
    model.validate().map_err(fail)?;
    Ok(model)
}

fn raise_max_position(model: &mut ModelConfig, cfg: &RunConfig, n_docs: usize) {
    let needed = match model.attention_mode {
        AttentionMode::Blockwise => cfg.train.query_offset + cfg.train.l_chunk + 1,
        AttentionMode::DenseCausal => (n_docs + 2) * cfg.train.l_chunk + 1,
    };
    model.max_position = model.max_position.max(needed);
}

pub fn ckpt_path(arg: &Path) -> PathBuf {
    if arg.is_dir() {
        arg.join("checkpoint.bin")
    } else {
        arg.to_path_buf()
    }
}

pub fn load_params(arg: &Path) -> Result<(Parameters, ModelConfig), String> {
    let path = ckpt_path(arg);
    let (state, model, _) =
        load_train_state(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok((state.params, model))
}

// ---- gen-data ----

pub fn gen_data(cfg: &RunConfig, out: &Path) -> CmdResult {
    cfg.task.validate().map_err(fail)?;
    cfg.template.validate().map_err(fail)?;
    let examples = generate_synthetic_dataset(&cfg.task, cfg.n_examples).map_err(fail)?;
    let vocab = Vocabulary::build(&cfg.task.corpus_texts(), &reserved_tokens(&cfg.template))
        .map_err(fail)?;
    write_examples(out.join("dataset.jsonl"), &examples).map_err(fail)?;
    fs::write(out.join("vocab.json"), vocab.to_json().map_err(fail)?).map_err(fail)?;
    println!(
        "wrote {} examples (N={}, vocab {} tokens) to {}",
        examples.len(),
        cfg.task.n_docs,
        vocab.len(),
        out.display()
    );
    Ok(())
}

// ---- train ----

pub fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path) -> CmdResult {
    let (vocab, dataset) = load_dataset(data)?;
    let mut model = resolve_model(cfg.model.clone(), &vocab)?;
    raise_max_position(&mut model, cfg, cfg.train.n_candidates);
    let mut state = TrainState::new(&model, cfg.train.seed);
    let logs = train(
        &mut state,
        &model,
        &vocab,
        &cfg.template,
        &dataset,
        &cfg.train,
        Some(out),
    )
    .map_err(fail)?;
    if let Some(last) = logs.last() {
        println!(
            "trained {} steps: total {:.4} (ntp {:.4}, aux {:.4}); checkpoint at {}",
            last.step + 1,
            last.total,
            last.ntp,
            last.aux,
            out.join("checkpoint.bin").display()
        );
    }
    Ok(())
}

// ---- eval ----

fn eval_lists(
    examples: &[RetrievalExample],
    rebuild_n: Option<usize>,
) -> Result<Vec<RetrievalExample>, String> {
    match rebuild_n {
        None | Some(0) => Ok(examples.to_vec()),
        Some(n) => examples
            .iter()
            .enumerate()
            .map(|(i, ex)| build_candidate_list(ex, n, 0xEA5E ^ i as u64).map_err(fail))
            .collect(),
    }
}

pub fn eval_cmd(
    cfg: &RunConfig,
    data: &Path,
    ckpt: &Path,
    method: InferenceMethod,
    rebuild_n: Option<usize>,
    out: &Path,
    digest: &str,
) -> CmdResult {
    let (vocab, examples) = load_dataset(data)?;
    let (params, model) = load_params(ckpt)?;
    let examples = eval_lists(&examples, rebuild_n)?;
    let (predictions, report) = evaluate_dataset(
        &params,
        &model,
        &vocab,
        &cfg.template,
        &examples,
        method,
        &cfg.eval,
    )
    .map_err(fail)?;

    let mut pred_file =
        fs::File::create(out.join("predictions.jsonl")).map_err(fail)?;
    for (qid, p) in predictions.iter().enumerate() {
        let line = json!({
            "qid": qid,
            "method": p.method,
            "ranking": p.ranked_ids,
            "scores": p.scores,
            "layers_executed": p.layers_executed,
            "decode_steps": p.decode_steps,
            "valid": p.valid,
        });
        writeln!(pred_file, "{line}").map_err(fail)?;
    }
    let summary = json!({
        "method": method,
        "p_at_1": report.p_at_1,
        "mrr_at_10": report.mrr_at_10,
        "ndcg_at_10": report.ndcg_at_10,
        "n_queries": report.n_queries,
    });
    fs::write(
        out.join(format!("metrics_{digest}.json")),
        serde_json::to_string_pretty(&summary).map_err(fail)?,
    )
    .map_err(fail)?;
    let rows: Vec<Vec<f64>> = report
        .per_query
        .iter()
        .map(|q| vec![q.top1_hit as u8 as f64, q.reciprocal_rank, q.ndcg])
        .collect();
    write_matrix_csv(
        out.join(format!("per_query_{digest}.csv")),
        &["top1_hit".into(), "reciprocal_rank".into(), "ndcg".into()],
        None,
        &rows,
    )
    .map_err(fail)?;
    println!(
        "P@1 {:.4}  MRR@10 {:.4}  nDCG@10 {:.4}  over {} queries",
        report.p_at_1, report.mrr_at_10, report.ndcg_at_10, report.n_queries
    );
    Ok(())
}

// ---- bench ----

pub fn bench_cmd(cfg: &RunConfig, data: &Path, ckpt: &Path, out: &Path, digest: &str) -> CmdResult {
    let (vocab, _) = load_dataset(data)?;
    let (params, model) = load_params(ckpt)?;
    let records = scaling_benchmark(
        &params,
        &model,
        &vocab,
        &cfg.template,
        &cfg.eval,
        &cfg.bench,
    )
    .map_err(fail)?;

    let rows: Vec<Vec<f64>> = records
        .iter()
        .map(|r| vec![r.n_docs as f64, r.median_seconds, r.repeats as f64])
        .collect();
    let labels: Vec<String> = records
        .iter()
        .map(|r| format!("{:?}/{:?}", r.mode, r.method))
        .collect();
    write_matrix_csv(
        out.join(format!("latency_{digest}.csv")),
        &["n_docs".into(), "median_seconds".into(), "repeats".into()],
        Some(&labels),
        &rows,
    )
    .map_err(fail)?;

    let mut fits = Vec::new();
    for mode in &cfg.bench.modes {
        for method in &cfg.bench.methods {
            let points: Vec<&LatencyRecord> = records
                .iter()
                .filter(|r| r.mode == *mode && r.method == *method)
                .collect();
            if points.len() < 3 {
                continue;
            }
            let xs: Vec<f64> = points.iter().map(|r| r.n_docs as f64).collect();
            let ys: Vec<f64> = points.iter().map(|r| r.median_seconds).collect();
            let lin = linear_fit(&xs, &ys);
            let (quad, qrss) = quadratic_fit(&xs, &ys);
            fits.push(json!({
                "mode": mode,
                "method": method,
                "linear": {"slope": lin.slope, "intercept": lin.intercept, "r_squared": lin.r_squared},
                "quadratic": {"coeffs": quad, "rss": qrss},
                "aic_linear": aic(lin.rss, xs.len(), 2),
                "aic_quadratic": aic(qrss, xs.len(), 3),
            }));
        }
    }
    fs::write(
        out.join(format!("bench_{digest}.json")),
        serde_json::to_string_pretty(&json!({"records": records, "fits": fits})).map_err(fail)?,
    )
    .map_err(fail)?;
    for r in &records {
        println!(
            "N={:<4} {:?}/{:?}: median {:.4} ms",
            r.n_docs,
            r.mode,
            r.method,
            r.median_seconds * 1e3
        );
    }
    Ok(())
}

// ---- analyze ----

fn layout_json(layout: &ChunkLayout) -> Value {
    let scheme = match layout.scheme {
        PositionScheme::Unassigned => json!("unassigned"),
        PositionScheme::SharedDocument { query_offset } => {
            json!({"shared_document": {"query_offset": query_offset}})
        }
        PositionScheme::Sequential => json!("sequential"),
    };
    json!({
        "l_chunk": layout.l_chunk,
        "l_inst": layout.l_inst,
        "n_docs": layout.n_docs(),
        "doc_ids": layout.doc_ids,
        "scheme": scheme,
        "signal_token_indices": layout.signal_token_indices,
        "answer_len": layout.answer_len,
        "truncated_tokens": layout.truncated_tokens,
        "chunks": layout.chunks.iter().zip(&layout.position_ids).map(|(c, p)| json!({
            "role": format!("{:?}", c.role),
            "n_valid": c.n_valid,
            "tokens": c.tokens,
            "position_ids": p,
        })).collect::<Vec<_>>(),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn analyze_cmd(
    cfg: &RunConfig,
    data: &Path,
    ckpt: &Path,
    layers: Option<Vec<usize>>,
    example_index: usize,
    n_eval: usize,
    dump_layout: bool,
    out: &Path,
    digest: &str,
) -> CmdResult {
    let (vocab, examples) = load_dataset(data)?;
    let (params, model) = load_params(ckpt)?;
    if examples.is_empty() {
        return Err("dataset is empty".into());
    }
    let example = examples
        .get(example_index)
        .ok_or_else(|| format!("--example {example_index} out of range"))?;
    let layout = blockrank_core::evaluation::inference_layout(
        example,
        &vocab,
        &cfg.template,
        &model,
        &cfg.eval,
    )
    .map_err(fail)?;
    if dump_layout {
        fs::write(
            out.join("layout.json"),
            serde_json::to_string_pretty(&layout_json(&layout)).map_err(fail)?,
        )
        .map_err(fail)?;
    }

    let trace = forward(
        &params,
        &model,
        &layout,
        &TraceOptions {
            retain_attention: true,
            qk_cache: QkCachePolicy::AllLayers,
            ..TraceOptions::default()
        },
    )
    .map_err(fail)?;
    let layers = layers.unwrap_or_else(|| (1..=trace.layers_executed).collect());
    let bundle = export_attention_heatmaps(&trace, &layout, &layers).map_err(fail)?;

    let chunk_labels: Vec<String> = std::iter::once("instruction".to_string())
        .chain(layout.doc_ids.iter().map(|d| format!("doc_{d}")))
        .chain(std::iter::once("query".to_string()))
        .collect();
    let doc_labels: Vec<String> = layout.doc_ids.iter().map(|d| format!("doc_{d}")).collect();
    for (i, &layer) in bundle.layers.iter().enumerate() {
        write_matrix_csv(
            out.join(format!("segment_attention_l{layer}_{digest}.csv")),
            &chunk_labels,
            Some(&chunk_labels),
            &bundle.segment_by_segment[i],
        )
        .map_err(fail)?;
        write_matrix_csv(
            out.join(format!("query_token_doc_mass_l{layer}_{digest}.csv")),
            &doc_labels,
            None,
            &bundle.query_token_to_doc[i],
        )
        .map_err(fail)?;
    }
    for (s, matrix) in bundle.layer_by_doc_per_signal.iter().enumerate() {
        let slot = bundle.signal_token_indices[s];
        write_matrix_csv(
            out.join(format!("signal_slot{slot}_layer_doc_mass_{digest}.csv")),
            &doc_labels,
            None,
            matrix,
        )
        .map_err(fail)?;
    }

    let probe: Vec<RetrievalExample> = examples.iter().take(n_eval).cloned().collect();
    let curve = layerwise_attention_precision(
        &params,
        &model,
        &vocab,
        &cfg.template,
        &probe,
        &cfg.eval,
    )
    .map_err(fail)?;
    write_matrix_csv(
        out.join(format!("layerwise_p_at_1_{digest}.csv")),
        &["layer".into(), "p_at_1".into()],
        None,
        &curve
            .iter()
            .enumerate()
            .map(|(i, &p)| vec![(i + 1) as f64, p])
            .collect::<Vec<_>>(),
    )
    .map_err(fail)?;
    fs::write(
        out.join(format!("analyze_{digest}.json")),
        serde_json::to_string_pretty(&json!({
            "example_index": example_index,
            "layers": bundle.layers,
            "signal_token_indices": bundle.signal_token_indices,
            "doc_ids": bundle.doc_ids,
            "layerwise_p_at_1": curve,
            "n_probe_examples": probe.len(),
        }))
        .map_err(fail)?,
    )
    .map_err(fail)?;
    println!(
        "analysis written for example {example_index} ({} layers) to {}",
        bundle.layers.len(),
        out.display()
    );
    Ok(())
}

// ---- ablate ----

pub fn ablate_cmd(
    cfg: &RunConfig,
    n_train: usize,
    n_eval: usize,
    out: &Path,
    digest: &str,
) -> CmdResult {
    let ctx = AblationContext {
        task: cfg.task.clone(),
        model_shape: {
            let mut m = cfg.model.clone();
            if m.vocab_size == 0 {
                // Each cell resolves its own vocabulary; the shape just needs
                // to validate.
                m.vocab_size = 1;
            }
            m
        },
        train: cfg.train.clone(),
        n_train,
        n_eval,
    };
    let report = run_ablation_grid(&ctx, &default_grid());

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for cell in &report.cells {
        for (method, metrics) in &cell.metrics {
            labels.push(format!("{}/{:?}", cell.spec.label, method));
            rows.push(vec![metrics.p_at_1, metrics.mrr_at_10, metrics.ndcg_at_10]);
        }
        if let Some(err) = &cell.error {
            eprintln!("cell {} failed: {err}", cell.spec.label);
        }
    }
    write_matrix_csv(
        out.join(format!("ablation_{digest}.csv")),
        &["p_at_1".into(), "mrr_at_10".into(), "ndcg_at_10".into()],
        Some(&labels),
        &rows,
    )
    .map_err(fail)?;
    fs::write(
        out.join(format!("ablation_{digest}.json")),
        serde_json::to_string_pretty(&report).map_err(fail)?,
    )
    .map_err(fail)?;
    for (label, row) in labels.iter().zip(&rows) {
        println!("{label:40} P@1 {:.3}  MRR@10 {:.3}  nDCG@10 {:.3}", row[0], row[1], row[2]);
    }
    Ok(())
}

pub fn core_err(e: CoreError) -> String {
    e.to_string()
}
