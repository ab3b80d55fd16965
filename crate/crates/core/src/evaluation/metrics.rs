//! Ranking metrics: Precision@1, MRR@10, and binary-gain nDCG@10.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::RankedPrediction;

pub const METRIC_CUTOFF: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub reciprocal_rank: f64,
    pub ndcg: f64,
    pub top1_hit: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub p_at_1: f64,
    pub mrr_at_10: f64,
    pub ndcg_at_10: f64,
    pub n_queries: usize,
    pub per_query: Vec<QueryMetrics>,
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// Metrics for one ranked list against a positive-id set. An empty ranking
/// (e.g. an invalid greedy decode) scores zero across the board.
pub fn query_metrics(ranked_ids: &[String], positives: &BTreeSet<String>) -> QueryMetrics {
    let top = ranked_ids.iter().take(METRIC_CUTOFF);
    let mut reciprocal_rank = 0.0;
    let mut dcg = 0.0;
    for (i, id) in top.enumerate() {
        let rank = i + 1;
        if positives.contains(id) {
            if reciprocal_rank == 0.0 {
                reciprocal_rank = 1.0 / rank as f64;
            }
            dcg += discount(rank);
        }
    }
    let ideal: f64 = (1..=positives.len().min(METRIC_CUTOFF)).map(discount).sum();
    let ndcg = if ideal > 0.0 { dcg / ideal } else { 0.0 };
    QueryMetrics {
        reciprocal_rank,
        ndcg,
        top1_hit: ranked_ids
            .first()
            .map(|id| positives.contains(id))
            .unwrap_or(false),
    }
}

pub fn compute_metrics(
    predictions: &[RankedPrediction],
    labels: &[BTreeSet<String>],
) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(Error::EmptyPredictions);
    }
    if predictions.len() != labels.len() {
        return Err(Error::InvalidConfig(format!(
            "{} predictions vs {} label sets",
            predictions.len(),
            labels.len()
        )));
    }
    let per_query: Vec<QueryMetrics> = predictions
        .iter()
        .zip(labels)
        .map(|(p, l)| query_metrics(&p.ranked_ids, l))
        .collect();
    let n = per_query.len() as f64;
    Ok(MetricsReport {
        p_at_1: per_query.iter().filter(|q| q.top1_hit).count() as f64 / n,
        mrr_at_10: per_query.iter().map(|q| q.reciprocal_rank).sum::<f64>() / n,
        ndcg_at_10: per_query.iter().map(|q| q.ndcg).sum::<f64>() / n,
        n_queries: per_query.len(),
        per_query,
    })
}
