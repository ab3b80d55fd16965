//! Prompt template: reserved phrases, document markup, and the answer scaffold.
//!
//! The prompt is assembled from typed segments. Each document renders as
//! `ID : <digits> | CONTENT : <words> | END ID : <digits>`; the query segment
//! closes with the answer scaffold `Final Answer : ['`, and the answer target
//! is the positive id's digit tokens followed by `'` `]`. Multi-word template
//! phrases are single vocabulary entries, so they can never collide with
//! whitespace-tokenized corpus words.

use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{TokenId, Vocabulary, BOS_ID};
use crate::corpus::RetrievalExample;
use crate::error::{Error, Result};
use crate::layout::{DocumentSegment, PromptSegments};

pub const COLON: &str = ":";
pub const PIPE: &str = "|";
pub const BRACKET_OPEN: &str = "[";
pub const QUOTE: &str = "'";
pub const BRACKET_CLOSE: &str = "]";
/// Scaffold opener rendered as one token, mirroring `Final Answer: ['`.
pub const SCAFFOLD_OPEN: &str = "['";
pub const ID_MARKER: &str = "ID";
pub const CONTENT_MARKER: &str = "CONTENT";
pub const END_ID_MARKER: &str = "END ID";
pub const LETS_START: &str = "====== Now let's start! ======";
pub const QUERY_PROMPT: &str =
    "Which document is most relevant to answer the query? Print out the ID of the document. Query";
pub const CLOSING_PROMPT: &str = "The following document(s) can help answer the query";
pub const FINAL_ANSWER: &str = "Final Answer";

/// Placeholder in `instruction_text` where the query is spliced in.
pub const QUERY_PLACEHOLDER: &str = "{query}";

pub const DEFAULT_INSTRUCTION: &str = "You will be given a query and a list of documents. \
Each document will be formatted as ID: <id> | CONTENT: <content> | END ID: <id>. \
You need to read carefully and understand all of them. The query is: {query}, and your goal \
is to find all document(s) from the list that can help answer the query.";

/// Default signal-carrier query tokens: the trailing delimiter and the
/// answer-scaffold opener.
pub const DEFAULT_SIGNAL_TOKENS: [&str; 2] = [COLON, SCAFFOLD_OPEN];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateConfig {
    pub instruction_text: String,
    pub query_in_prefix: bool,
    pub id_digits: usize,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            instruction_text: DEFAULT_INSTRUCTION.to_string(),
            query_in_prefix: true,
            id_digits: 2,
        }
    }
}

impl TemplateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.id_digits == 0 || self.id_digits > 6 {
            return Err(Error::InvalidConfig(format!(
                "id_digits must be in 1..=6, got {}",
                self.id_digits
            )));
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let t: TemplateConfig = serde_json::from_str(json)?;
        t.validate()?;
        Ok(t)
    }

    /// Instruction text pieces around the `{query}` placeholder, trimmed;
    /// each piece is one reserved phrase token.
    pub fn instruction_phrases(&self) -> Vec<String> {
        self.instruction_text
            .split(QUERY_PLACEHOLDER)
            .map(|p| p.trim())
            .filter(|p| !p.is_empty())
            .map(|p| p.to_string())
            .collect()
    }

    /// Number of candidate ids representable at this digit width.
    pub fn max_candidates(&self) -> usize {
        10usize.pow(self.id_digits as u32)
    }
}

/// The full reserved token list for a template: digits, punctuation, the
/// scaffold opener, document markers, query-section phrases, and the
/// instruction phrases.
pub fn reserved_tokens(template: &TemplateConfig) -> Vec<String> {
    let mut out: Vec<String> = (0..10u8).map(|d| d.to_string()).collect();
    for t in [
        COLON,
        PIPE,
        BRACKET_OPEN,
        QUOTE,
        BRACKET_CLOSE,
        SCAFFOLD_OPEN,
        ID_MARKER,
        CONTENT_MARKER,
        END_ID_MARKER,
        LETS_START,
        QUERY_PROMPT,
        CLOSING_PROMPT,
        FINAL_ANSWER,
    ] {
        out.push(t.to_string());
    }
    for p in template.instruction_phrases() {
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

/// Zero-padded width for assigning ids `00..N-1`: two digits up to 100
/// candidates, growing as needed beyond that.
pub fn id_width(n_candidates: usize) -> usize {
    let mut width = 2;
    while 10usize.pow(width as u32) < n_candidates {
        width += 1;
    }
    width
}

fn doc_id_digits(vocab: &Vocabulary, doc_id: &str, id_digits: usize) -> Result<Vec<TokenId>> {
    if doc_id.len() != id_digits || !doc_id.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::InvalidDocId(doc_id.to_string(), id_digits));
    }
    doc_id
        .bytes()
        .map(|b| vocab.digit_id(b - b'0'))
        .collect::<Result<Vec<_>>>()
}

/// Assembles one example into typed prompt segments.
///
/// A pure function of `(example, template)`: the instruction carries the task
/// phrases (and the query, when `query_in_prefix` is set), every candidate
/// becomes one document segment, and the query segment ends with the answer
/// scaffold. The answer target is empty when the example has no positives.
pub fn assemble_prompt(
    example: &RetrievalExample,
    vocab: &Vocabulary,
    template: &TemplateConfig,
) -> Result<PromptSegments> {
    template.validate()?;
    let query_tokens = vocab.encode_text(&example.query)?;

    let mut instruction = vec![BOS_ID];
    let pieces: Vec<&str> = template.instruction_text.split(QUERY_PLACEHOLDER).collect();
    for (i, piece) in pieces.iter().enumerate() {
        let piece = piece.trim();
        if !piece.is_empty() {
            instruction.push(vocab.require(piece)?);
        }
        let at_placeholder = i + 1 < pieces.len();
        if at_placeholder && template.query_in_prefix {
            instruction.extend_from_slice(&query_tokens);
        }
    }
    if pieces.len() == 1 && template.query_in_prefix {
        // No placeholder in the configured text: append the query at the end.
        instruction.extend_from_slice(&query_tokens);
    }

    let colon = vocab.require(COLON)?;
    let pipe = vocab.require(PIPE)?;
    let id_marker = vocab.require(ID_MARKER)?;
    let content_marker = vocab.require(CONTENT_MARKER)?;
    let end_id_marker = vocab.require(END_ID_MARKER)?;

    let mut documents = Vec::with_capacity(example.candidates.len());
    for cand in &example.candidates {
        let digits = doc_id_digits(vocab, &cand.doc_id, template.id_digits)?;
        let content = vocab.encode_text(&cand.tokens)?;
        let mut tokens = vec![id_marker, colon];
        tokens.extend_from_slice(&digits);
        tokens.push(pipe);
        tokens.push(content_marker);
        tokens.push(colon);
        tokens.extend_from_slice(&content);
        tokens.push(pipe);
        tokens.push(end_id_marker);
        tokens.push(colon);
        tokens.extend_from_slice(&digits);
        documents.push(DocumentSegment {
            doc_id: cand.doc_id.clone(),
            tokens,
        });
    }

    let mut query = vec![
        vocab.require(LETS_START)?,
        vocab.require(QUERY_PROMPT)?,
        colon,
    ];
    query.extend_from_slice(&query_tokens);
    query.push(vocab.require(CLOSING_PROMPT)?);
    query.push(colon);
    query.push(vocab.require(FINAL_ANSWER)?);
    query.push(colon);
    query.push(vocab.require(SCAFFOLD_OPEN)?);

    let answer_target = match example.positive_indices.iter().next() {
        Some(&first_positive) => {
            let cand = example.candidates.get(first_positive).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "positive index {first_positive} out of range for {} candidates",
                    example.candidates.len()
                ))
            })?;
            let mut t = doc_id_digits(vocab, &cand.doc_id, template.id_digits)?;
            t.push(vocab.require(QUOTE)?);
            t.push(vocab.require(BRACKET_CLOSE)?);
            t
        }
        None => Vec::new(),
    };

    Ok(PromptSegments {
        instruction,
        documents,
        query,
        answer_target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Candidate, RetrievalExample};
    use std::collections::BTreeSet;

    fn fixture(query_in_prefix: bool) -> (RetrievalExample, Vocabulary, TemplateConfig) {
        let template = TemplateConfig {
            query_in_prefix,
            ..TemplateConfig::default()
        };
        let texts = ["alpha beta gamma delta epsilon zeta"];
        let vocab = Vocabulary::build(&texts, &reserved_tokens(&template)).unwrap();
        let example = RetrievalExample {
            query: vec!["alpha".into(), "beta".into()],
            candidates: vec![
                Candidate {
                    doc_id: "20".into(),
                    tokens: vec!["gamma".into(), "delta".into()],
                },
                Candidate {
                    doc_id: "01".into(),
                    tokens: vec!["alpha".into(), "beta".into(), "epsilon".into()],
                },
                Candidate {
                    doc_id: "02".into(),
                    tokens: vec!["zeta".into()],
                },
            ],
            positive_indices: BTreeSet::from([0]),
        };
        (example, vocab, template)
    }

    #[test]
    fn answer_target_for_positive_id_20() {
        let (example, vocab, template) = fixture(true);
        let segments = assemble_prompt(&example, &vocab, &template).unwrap();
        let expected = vec![
            vocab.id("2").unwrap(),
            vocab.id("0").unwrap(),
            vocab.id(QUOTE).unwrap(),
            vocab.id(BRACKET_CLOSE).unwrap(),
        ];
        assert_eq!(segments.answer_target, expected);
    }

    #[test]
    fn query_in_prefix_false_strips_query_from_instruction() {
        let (example, vocab, template) = fixture(false);
        let segments = assemble_prompt(&example, &vocab, &template).unwrap();
        let alpha = vocab.id("alpha").unwrap();
        let beta = vocab.id("beta").unwrap();
        assert!(!segments.instruction.contains(&alpha));
        assert!(!segments.instruction.contains(&beta));
        // The query segment still carries it.
        assert!(segments.query.contains(&alpha));

        let (example, vocab, template) = fixture(true);
        let segments = assemble_prompt(&example, &vocab, &template).unwrap();
        assert!(segments.instruction.contains(&vocab.id("alpha").unwrap()));
    }

    #[test]
    fn document_segments_in_candidate_order() {
        let (example, vocab, template) = fixture(true);
        let segments = assemble_prompt(&example, &vocab, &template).unwrap();
        assert_eq!(segments.documents.len(), 3);
        assert_eq!(segments.documents[0].doc_id, "20");
        assert_eq!(segments.documents[1].doc_id, "01");
        let zeta = vocab.id("zeta").unwrap();
        assert!(segments.documents[2].tokens.contains(&zeta));
    }

    #[test]
    fn assembly_is_pure() {
        let (example, vocab, template) = fixture(true);
        let a = assemble_prompt(&example, &vocab, &template).unwrap();
        let b = assemble_prompt(&example, &vocab, &template).unwrap();
        assert_eq!(a.instruction, b.instruction);
        assert_eq!(a.query, b.query);
        assert_eq!(a.answer_target, b.answer_target);
    }

    #[test]
    fn doc_id_digits_appear_exactly_twice_per_segment() {
        let (example, vocab, template) = fixture(true);
        let segments = assemble_prompt(&example, &vocab, &template).unwrap();
        for (seg, cand) in segments.documents.iter().zip(&example.candidates) {
            let digits: Vec<TokenId> = cand
                .doc_id
                .bytes()
                .map(|b| vocab.digit_id(b - b'0').unwrap())
                .collect();
            let occurrences = seg
                .tokens
                .windows(digits.len())
                .filter(|w| *w == digits.as_slice())
                .count();
            assert_eq!(occurrences, 2, "doc {} digit runs", cand.doc_id);
        }
    }

    #[test]
    fn malformed_doc_id_rejected() {
        let (mut example, vocab, template) = fixture(true);
        example.candidates[0].doc_id = "7".into();
        assert!(matches!(
            assemble_prompt(&example, &vocab, &template),
            Err(Error::InvalidDocId(_, 2))
        ));
    }
}
