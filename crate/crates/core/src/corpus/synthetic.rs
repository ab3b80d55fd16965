//! Synthetic in-context-ranking task.
//!
//! Each example has one relevant document, a query copied verbatim from a
//! contiguous span of it, and distractors that share a configurable fraction
//! of their tokens with the relevant document (hard negatives). Generation is
//! reproducible from the seed and independent of call order: example `i`
//! draws from its own RNG stream.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{id_width, Candidate, RetrievalExample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticTaskConfig {
    pub vocab_size: usize,
    pub n_docs: usize,
    pub doc_len: usize,
    pub query_span_len: usize,
    pub distractor_overlap: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self {
            vocab_size: 500,
            n_docs: 8,
            doc_len: 16,
            query_span_len: 6,
            distractor_overlap: 0.25,
            seed: 0,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::InvalidConfig("vocab_size must be positive".into()));
        }
        if self.n_docs < 2 {
            return Err(Error::InvalidConfig("n_docs must be at least 2".into()));
        }
        if self.doc_len == 0 || self.query_span_len == 0 {
            return Err(Error::InvalidConfig(
                "doc_len and query_span_len must be positive".into(),
            ));
        }
        if self.query_span_len > self.doc_len {
            return Err(Error::InvalidConfig(format!(
                "query_span_len {} exceeds doc_len {}",
                self.query_span_len, self.doc_len
            )));
        }
        if !(0.0..=1.0).contains(&self.distractor_overlap) {
            return Err(Error::InvalidConfig(format!(
                "distractor_overlap must be in [0,1], got {}",
                self.distractor_overlap
            )));
        }
        Ok(())
    }

    /// All task words, one text per word; feed to vocabulary building so every
    /// generated token is known.
    pub fn corpus_texts(&self) -> Vec<String> {
        (0..self.vocab_size).map(word).collect()
    }
}

pub fn word(i: usize) -> String {
    format!("w{i}")
}

pub fn generate_synthetic_dataset(
    cfg: &SyntheticTaskConfig,
    n_examples: usize,
) -> Result<Vec<RetrievalExample>> {
    cfg.validate()?;
    (0..n_examples).map(|i| generate_example(cfg, i)).collect()
}

fn generate_example(cfg: &SyntheticTaskConfig, index: usize) -> Result<RetrievalExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);

    let relevant: Vec<String> = (0..cfg.doc_len)
        .map(|_| word(rng.random_range(0..cfg.vocab_size)))
        .collect();
    let span_start = rng.random_range(0..=cfg.doc_len - cfg.query_span_len);
    let query: Vec<String> = relevant[span_start..span_start + cfg.query_span_len].to_vec();

    let n_forced = (cfg.distractor_overlap * cfg.doc_len as f64).round() as usize;
    let n_forced = n_forced.min(cfg.doc_len);
    let mut docs: Vec<Vec<String>> = Vec::with_capacity(cfg.n_docs);
    for _ in 0..cfg.n_docs - 1 {
        let mut doc: Vec<String> = (0..cfg.doc_len)
            .map(|_| word(rng.random_range(0..cfg.vocab_size)))
            .collect();
        // Resample a fixed set of positions from the relevant document.
        let mut positions: Vec<usize> = (0..cfg.doc_len).collect();
        for k in 0..n_forced {
            let j = rng.random_range(k..cfg.doc_len);
            positions.swap(k, j);
        }
        for &p in &positions[..n_forced] {
            doc[p] = relevant[rng.random_range(0..cfg.doc_len)].clone();
        }
        docs.push(doc);
    }

    let positive_slot = rng.random_range(0..cfg.n_docs);
    docs.insert(positive_slot, relevant);

    let width = id_width(cfg.n_docs);
    let candidates = docs
        .into_iter()
        .enumerate()
        .map(|(slot, tokens)| Candidate {
            doc_id: format!("{:0width$}", slot, width = width),
            tokens,
        })
        .collect();

    Ok(RetrievalExample {
        query,
        candidates,
        positive_indices: BTreeSet::from([positive_slot]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SyntheticTaskConfig {
        SyntheticTaskConfig {
            vocab_size: 500,
            n_docs: 8,
            doc_len: 16,
            query_span_len: 6,
            distractor_overlap: 0.25,
            seed: 7,
        }
    }

    #[test]
    fn every_example_has_exactly_one_positive() {
        let data = generate_synthetic_dataset(&cfg(), 100).unwrap();
        assert_eq!(data.len(), 100);
        for ex in &data {
            assert_eq!(ex.positive_indices.len(), 1);
            assert_eq!(ex.candidates.len(), 8);
            let pos = *ex.positive_indices.iter().next().unwrap();
            // The query is a contiguous span of the positive document.
            let found = ex.candidates[pos]
                .tokens
                .windows(ex.query.len())
                .any(|w| w == ex.query.as_slice());
            assert!(found, "query must be a span of the positive document");
        }
    }

    #[test]
    fn zero_overlap_is_separable_by_token_overlap() {
        // Independent oracle: count query tokens appearing in each candidate.
        // With no forced overlap the positive must win every time.
        let mut c = cfg();
        c.distractor_overlap = 0.0;
        let data = generate_synthetic_dataset(&c, 200).unwrap();
        for ex in &data {
            let overlap = |cand: &Candidate| {
                ex.query
                    .iter()
                    .filter(|q| cand.tokens.contains(q))
                    .count()
            };
            let best = ex
                .candidates
                .iter()
                .enumerate()
                .max_by_key(|(i, cand)| (overlap(cand), usize::MAX - i))
                .map(|(i, _)| i)
                .unwrap();
            assert_eq!(
                Some(&best),
                ex.positive_indices.iter().next(),
                "bag-of-words oracle must rank the positive first"
            );
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = generate_synthetic_dataset(&cfg(), 20).unwrap();
        let b = generate_synthetic_dataset(&cfg(), 20).unwrap();
        assert_eq!(a, b);
        let mut other = cfg();
        other.seed = 8;
        let c = generate_synthetic_dataset(&other, 20).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn positive_slot_is_not_biased_to_one_position() {
        let data = generate_synthetic_dataset(&cfg(), 400).unwrap();
        let mut counts = vec![0usize; 8];
        for ex in &data {
            counts[*ex.positive_indices.iter().next().unwrap()] += 1;
        }
        for (slot, &c) in counts.iter().enumerate() {
            assert!(c > 10, "slot {slot} starved: {counts:?}");
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = cfg();
        c.query_span_len = 17;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.n_docs = 1;
        assert!(c.validate().is_err());
    }
}
