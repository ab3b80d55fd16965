//! Digit-entropy analysis of beam-decoded id lists.
//!
//! For a list of ten unique two-digit ids, the Shannon entropy (bits) of the
//! digit multiset at each position measures how diverse the predictions are
//! beyond the top candidate. The uniform-random baseline draws ten unique
//! ids from 00–99 per list; both the per-list standard deviation and the
//! standard error of the mean are reported.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DigitEntropyStats {
    pub mean_id0: f64,
    pub std_id0: f64,
    pub se_id0: f64,
    pub mean_id1: f64,
    pub std_id1: f64,
    pub se_id1: f64,
    pub n_lists: usize,
}

fn entropy_bits(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.log2()
        })
        .sum()
}

fn digit_entropy(list: &[String], position: usize) -> f64 {
    let mut counts = [0usize; 10];
    for id in list {
        let d = id.as_bytes()[position] - b'0';
        counts[d as usize] += 1;
    }
    entropy_bits(&counts)
}

fn validate_list(list: &[String]) -> Result<()> {
    if list.len() != 10 {
        return Err(Error::EntropyInput(format!(
            "expected 10 ids per list, got {}",
            list.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for id in list {
        if id.len() != 2 || !id.bytes().all(|b| b.is_ascii_digit()) {
            return Err(Error::EntropyInput(format!("malformed id {id:?}")));
        }
        if !seen.insert(id) {
            return Err(Error::EntropyInput(format!("duplicate id {id:?}")));
        }
    }
    Ok(())
}

/// Per-digit-position entropy statistics over prediction lists.
pub fn id_digit_entropy(lists: &[Vec<String>]) -> Result<DigitEntropyStats> {
    if lists.is_empty() {
        return Err(Error::EntropyInput("no prediction lists".into()));
    }
    let mut h0 = Vec::with_capacity(lists.len());
    let mut h1 = Vec::with_capacity(lists.len());
    for list in lists {
        validate_list(list)?;
        h0.push(digit_entropy(list, 0));
        h1.push(digit_entropy(list, 1));
    }
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        (mean, std, std / n.sqrt())
    };
    let (mean_id0, std_id0, se_id0) = stats(&h0);
    let (mean_id1, std_id1, se_id1) = stats(&h1);
    Ok(DigitEntropyStats {
        mean_id0,
        std_id0,
        se_id0,
        mean_id1,
        std_id1,
        se_id1,
        n_lists: lists.len(),
    })
}

/// Draws `n_lists` lists of 10 unique ids uniformly from 00–99.
pub fn random_id_lists(n_lists: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_lists)
        .map(|_| {
            let picked = rand::seq::index::sample(&mut rng, 100, 10);
            picked.iter().map(|v| format!("{v:02}")).collect()
        })
        .collect()
}

/// Monte Carlo baseline over uniform-random unique id lists.
pub fn random_baseline(n_lists: usize, seed: u64) -> DigitEntropyStats {
    id_digit_entropy(&random_id_lists(n_lists, seed)).expect("generated lists are valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_distinct_first_digits_hit_log2_ten() {
        let list: Vec<String> = (0..10).map(|d| format!("{d}{d}")).collect();
        let s = id_digit_entropy(&[list]).unwrap();
        assert!((s.mean_id0 - 10.0f64.log2()).abs() < 1e-12);
        assert!((s.mean_id0 - 3.3219).abs() < 1e-4);
    }

    #[test]
    fn shared_first_digit_gives_zero_entropy() {
        let list: Vec<String> = (0..10).map(|d| format!("3{d}")).collect();
        let s = id_digit_entropy(&[list]).unwrap();
        assert_eq!(s.mean_id0, 0.0);
        assert!((s.mean_id1 - 10.0f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn bad_lists_are_rejected() {
        let nine: Vec<String> = (0..9).map(|d| format!("0{d}")).collect();
        assert!(id_digit_entropy(&[nine]).is_err());
        let mut dup: Vec<String> = (0..9).map(|d| format!("0{d}")).collect();
        dup.push("00".into());
        assert!(id_digit_entropy(&[dup]).is_err());
    }

    #[test]
    fn entropy_stays_within_bounds() {
        for list in random_id_lists(200, 11) {
            let s = id_digit_entropy(&[list]).unwrap();
            for v in [s.mean_id0, s.mean_id1] {
                assert!((0.0..=10.0f64.log2() + 1e-12).contains(&v));
            }
        }
    }
}
