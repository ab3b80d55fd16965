//! Datasets: vocabulary building, synthetic task generation, JSONL ingest,
//! candidate-list construction with teacher forcing, and prompt assembly.

pub mod jsonl;
pub mod synthetic;
pub mod template;
pub mod vocab;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use jsonl::{ingest_examples, parse_examples, write_examples};
pub use synthetic::{generate_synthetic_dataset, SyntheticTaskConfig};
pub use template::{assemble_prompt, id_width, reserved_tokens, TemplateConfig};
pub use vocab::{TokenId, Vocabulary, BOS_ID, BOS_TOKEN, PAD_ID, PAD_TOKEN};

/// One candidate document: a zero-padded decimal id and word tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub doc_id: String,
    pub tokens: Vec<String>,
}

/// A query with an ordered candidate list and the indices labeled relevant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalExample {
    pub query: Vec<String>,
    pub candidates: Vec<Candidate>,
    pub positive_indices: BTreeSet<usize>,
}

impl RetrievalExample {
    /// Candidate ids of the labeled positives, in index order.
    pub fn positive_ids(&self) -> Vec<String> {
        self.positive_indices
            .iter()
            .filter_map(|&i| self.candidates.get(i).map(|c| c.doc_id.clone()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for c in &self.candidates {
            if !seen.insert(&c.doc_id) {
                return Err(Error::DuplicateDocId(c.doc_id.clone()));
            }
        }
        for &i in &self.positive_indices {
            if i >= self.candidates.len() {
                return Err(Error::InvalidConfig(format!(
                    "positive index {i} out of range for {} candidates",
                    self.candidates.len()
                )));
            }
        }
        Ok(())
    }
}

/// Builds a fixed-size candidate list with teacher forcing: every labeled
/// positive is kept, the remaining slots take the example's leading
/// negatives, and the result is placed by a seed-determined permutation.
/// Ids are reassigned as zero-padded decimals `00..n-1` after shuffling, so
/// the positive's id carries no information about its original slot.
pub fn build_candidate_list(
    example: &RetrievalExample,
    n: usize,
    shuffle_seed: u64,
) -> Result<RetrievalExample> {
    example.validate()?;
    if example.positive_indices.is_empty() {
        return Err(Error::NoPositives);
    }
    let n_pos = example.positive_indices.len();
    if n < n_pos {
        return Err(Error::CandidateListTooSmall {
            requested: n,
            positives: n_pos,
        });
    }
    if n > example.candidates.len() {
        return Err(Error::NotEnoughCandidates {
            requested: n,
            available: example.candidates.len(),
        });
    }

    // Positives first (index order), then leading negatives.
    let mut picked: Vec<(usize, bool)> = example
        .positive_indices
        .iter()
        .map(|&i| (i, true))
        .collect();
    picked.extend(
        (0..example.candidates.len())
            .filter(|i| !example.positive_indices.contains(i))
            .take(n - n_pos)
            .map(|i| (i, false)),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(&mut rng);

    let width = id_width(n);
    let mut candidates = vec![
        Candidate {
            doc_id: String::new(),
            tokens: Vec::new()
        };
        n
    ];
    let mut positive_indices = BTreeSet::new();
    for (slot, &(orig, is_pos)) in slots.iter().zip(&picked) {
        candidates[*slot] = Candidate {
            doc_id: format!("{:0width$}", slot, width = width),
            tokens: example.candidates[orig].tokens.clone(),
        };
        if is_pos {
            positive_indices.insert(*slot);
        }
    }

    Ok(RetrievalExample {
        query: example.query.clone(),
        candidates,
        positive_indices,
    })
}
