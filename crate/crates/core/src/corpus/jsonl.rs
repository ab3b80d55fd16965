//! JSONL dataset ingest and export.
//!
//! One object per line:
//! `{"query": "<text>", "candidates": [{"id": "...", "text": "..."}], "positives": [0, ...]}`
//! UTF-8, LF line endings. Text fields are whitespace-tokenized on ingest.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Candidate, RetrievalExample};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct LineCandidate {
    id: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct Line {
    query: String,
    candidates: Vec<LineCandidate>,
    #[serde(default)]
    positives: Vec<usize>,
}

fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_string()).collect()
}

/// Parses a JSONL dataset from any reader. Errors carry the 1-based line
/// number of the offending record.
pub fn parse_examples<R: BufRead>(reader: R) -> Result<Vec<RetrievalExample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let raw = line.map_err(|e| Error::Jsonl {
            line: line_no,
            message: e.to_string(),
        })?;
        if raw.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&raw).map_err(|e| Error::Jsonl {
            line: line_no,
            message: e.to_string(),
        })?;
        let example = RetrievalExample {
            query: words(&parsed.query),
            candidates: parsed
                .candidates
                .into_iter()
                .map(|c| Candidate {
                    doc_id: c.id,
                    tokens: words(&c.text),
                })
                .collect(),
            positive_indices: parsed.positives.into_iter().collect(),
        };
        example.validate().map_err(|e| Error::Jsonl {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(example);
    }
    Ok(out)
}

pub fn ingest_examples<P: AsRef<Path>>(path: P) -> Result<Vec<RetrievalExample>> {
    let file = File::open(path)?;
    parse_examples(BufReader::new(file))
}

pub fn write_examples<P: AsRef<Path>>(path: P, examples: &[RetrievalExample]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let line = Line {
            query: ex.query.join(" "),
            candidates: ex
                .candidates
                .iter()
                .map(|c| LineCandidate {
                    id: c.doc_id.clone(),
                    text: c.tokens.join(" "),
                })
                .collect(),
            positives: ex.positive_indices.iter().copied().collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn two_valid_lines_in_order() {
        let data = "\
{\"query\":\"a b\",\"candidates\":[{\"id\":\"00\",\"text\":\"x y\"},{\"id\":\"01\",\"text\":\"z\"}],\"positives\":[1]}
{\"query\":\"c\",\"candidates\":[{\"id\":\"00\",\"text\":\"w\"}],\"positives\":[0]}
";
        let got = parse_examples(Cursor::new(data)).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].query, vec!["a", "b"]);
        assert_eq!(got[0].candidates[1].doc_id, "01");
        assert_eq!(got[1].positive_indices.iter().next(), Some(&0));
    }

    #[test]
    fn missing_query_cites_line_number() {
        let data = "{\"candidates\":[],\"positives\":[]}\n";
        match parse_examples(Cursor::new(data)) {
            Err(Error::Jsonl { line: 1, message }) => {
                assert!(message.contains("query"), "message: {message}")
            }
            other => panic!("expected line-1 error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_candidate_id_rejected() {
        let data = "{\"query\":\"q\",\"candidates\":[{\"id\":\"03\",\"text\":\"a\"},{\"id\":\"03\",\"text\":\"b\"}],\"positives\":[0]}\n";
        match parse_examples(Cursor::new(data)) {
            Err(Error::Jsonl { line: 1, message }) => {
                assert!(message.contains("03"), "message: {message}")
            }
            other => panic!("expected duplicate-id error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let examples = vec![RetrievalExample {
            query: vec!["hello".into(), "there".into()],
            candidates: vec![
                Candidate {
                    doc_id: "00".into(),
                    tokens: vec!["one".into()],
                },
                Candidate {
                    doc_id: "01".into(),
                    tokens: vec!["two".into(), "three".into()],
                },
            ],
            positive_indices: [1].into_iter().collect(),
        }];
        write_examples(&path, &examples).unwrap();
        let got = ingest_examples(&path).unwrap();
        assert_eq!(got, examples);
    }
}
