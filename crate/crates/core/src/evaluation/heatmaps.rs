//! Attention-map exports: segment-by-segment mass, per-query-token document
//! mass, and the layerwise view for chosen query tokens.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::layout::ChunkLayout;
use crate::model::ForwardTrace;

#[derive(Debug, Clone, Serialize)]
pub struct HeatmapBundle {
    /// Layers the per-layer matrices were taken from (1-indexed).
    pub layers: Vec<usize>,
    /// Per requested layer: `[n_chunks, n_chunks]` mean attention mass from
    /// each segment's valid tokens to each segment.
    pub segment_by_segment: Vec<Vec<Vec<f64>>>,
    /// Per requested layer: `[valid query tokens, n_docs]` document mass.
    pub query_token_to_doc: Vec<Vec<Vec<f64>>>,
    /// Per signal token: `[executed layers, n_docs]` document mass by layer.
    pub layer_by_doc_per_signal: Vec<Vec<Vec<f64>>>,
    pub signal_token_indices: Vec<usize>,
    pub doc_ids: Vec<String>,
}

fn doc_mass_row(map: &Array2<f64>, layout: &ChunkLayout, row: usize) -> Vec<f64> {
    (0..layout.n_docs())
        .map(|k| {
            let chunk = k + 1;
            (0..layout.chunks[chunk].n_valid)
                .map(|t| map[[row, layout.global_index(chunk, t)]])
                .sum()
        })
        .collect()
}

/// Builds the analysis matrices from a trace that retained attention maps.
pub fn export_attention_heatmaps(
    trace: &ForwardTrace,
    layout: &ChunkLayout,
    layers: &[usize],
) -> Result<HeatmapBundle> {
    if trace.attention.is_empty() {
        return Err(Error::MissingTrace(
            "attention maps (run the forward in analysis mode)".into(),
        ));
    }
    for &l in layers {
        if l == 0 || l > trace.attention.len() {
            return Err(Error::InvalidConfig(format!(
                "layer {l} outside executed range 1..={}",
                trace.attention.len()
            )));
        }
    }
    let l_chunk = layout.l_chunk;
    let n_chunks = layout.chunks.len();
    let q_chunk = layout.query_chunk_index();

    let mut segment_by_segment = Vec::with_capacity(layers.len());
    let mut query_token_to_doc = Vec::with_capacity(layers.len());
    for &l in layers {
        let map = &trace.attention[l - 1];
        let mut seg = vec![vec![0.0; n_chunks]; n_chunks];
        for (a, seg_row) in seg.iter_mut().enumerate() {
            let n_valid = layout.chunks[a].n_valid.max(1);
            for (b, cell) in seg_row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for i in 0..layout.chunks[a].n_valid {
                    for j in 0..layout.chunks[b].n_valid {
                        acc += map[[layout.global_index(a, i), layout.global_index(b, j)]];
                    }
                }
                *cell = acc / n_valid as f64;
            }
        }
        segment_by_segment.push(seg);

        let rows = (0..layout.query_chunk().n_valid)
            .map(|slot| doc_mass_row(map, layout, q_chunk * l_chunk + slot))
            .collect();
        query_token_to_doc.push(rows);
    }

    let layer_by_doc_per_signal = layout
        .signal_token_indices
        .iter()
        .map(|&slot| {
            trace
                .attention
                .iter()
                .map(|map| doc_mass_row(map, layout, q_chunk * l_chunk + slot))
                .collect()
        })
        .collect();

    Ok(HeatmapBundle {
        layers: layers.to_vec(),
        segment_by_segment,
        query_token_to_doc,
        layer_by_doc_per_signal,
        signal_token_indices: layout.signal_token_indices.clone(),
        doc_ids: layout.doc_ids.clone(),
    })
}

/// Writes one matrix as CSV with optional row labels.
pub fn write_matrix_csv<P: AsRef<Path>>(
    path: P,
    col_labels: &[String],
    row_labels: Option<&[String]>,
    matrix: &[Vec<f64>],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header: Vec<String> = match row_labels {
        Some(_) => std::iter::once(String::new())
            .chain(col_labels.iter().cloned())
            .collect(),
        None => col_labels.to_vec(),
    };
    writeln!(w, "{}", header.join(","))?;
    for (r, row) in matrix.iter().enumerate() {
        let mut cells: Vec<String> = Vec::with_capacity(row.len() + 1);
        if let Some(labels) = row_labels {
            cells.push(labels[r].clone());
        }
        cells.extend(row.iter().map(|v| format!("{v:.10}")));
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{assign_positions, chunk_segments, DocumentSegment, PromptSegments};
    use crate::model::{forward, AttentionMode, ModelConfig, Parameters, TraceOptions};

    fn setup() -> (ModelConfig, Parameters, ChunkLayout) {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            head_dim: 8,
            vocab_size: 30,
            mlp_hidden: 32,
            rotary_base: 10_000.0,
            max_position: 8300,
            attention_mode: AttentionMode::Blockwise,
        };
        let tok = |n: usize, base: u32| (0..n as u32).map(|i| (i + base) % 28 + 2).collect();
        let segments = PromptSegments {
            instruction: tok(4, 0),
            documents: (0..3)
                .map(|k| DocumentSegment {
                    doc_id: format!("{k:02}"),
                    tokens: tok(6, k as u32 * 3),
                })
                .collect(),
            query: tok(5, 9),
            answer_target: vec![],
        };
        let mut layout = assign_positions(chunk_segments(&segments, 8).unwrap(), 8192).unwrap();
        layout.signal_token_indices = vec![4];
        let params = Parameters::init(&cfg, 5);
        (cfg, params, layout)
    }

    #[test]
    fn blockwise_cross_document_segments_are_exactly_zero() {
        let (cfg, params, layout) = setup();
        let trace = forward(
            &params,
            &cfg,
            &layout,
            &TraceOptions {
                retain_attention: true,
                ..TraceOptions::default()
            },
        )
        .unwrap();
        let bundle = export_attention_heatmaps(&trace, &layout, &[1, 2]).unwrap();
        for seg in &bundle.segment_by_segment {
            for a in 1..=3usize {
                for b in 1..=3usize {
                    if a != b {
                        assert_eq!(seg[a][b], 0.0, "doc {a} -> doc {b}");
                    }
                }
                assert_eq!(seg[a][4], 0.0, "doc -> query masked");
            }
        }
    }

    #[test]
    fn query_token_document_mass_rows_stay_within_one() {
        let (cfg, params, layout) = setup();
        let trace = forward(
            &params,
            &cfg,
            &layout,
            &TraceOptions {
                retain_attention: true,
                ..TraceOptions::default()
            },
        )
        .unwrap();
        let bundle = export_attention_heatmaps(&trace, &layout, &[2]).unwrap();
        for row in &bundle.query_token_to_doc[0] {
            let total: f64 = row.iter().sum();
            assert!(total <= 1.0 + 1e-9, "document mass {total} exceeds 1");
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        assert_eq!(bundle.layer_by_doc_per_signal.len(), 1);
        assert_eq!(bundle.layer_by_doc_per_signal[0].len(), 2, "one row per layer");
    }

    #[test]
    fn analysis_mode_off_is_an_error() {
        let (cfg, params, layout) = setup();
        let trace = forward(&params, &cfg, &layout, &TraceOptions::default()).unwrap();
        assert!(matches!(
            export_attention_heatmaps(&trace, &layout, &[1]),
            Err(Error::MissingTrace(_))
        ));
    }
}
