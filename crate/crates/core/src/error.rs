//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("reserved token {0:?} collides with a corpus token")]
    ReservedTokenCollision(String),

    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),

    #[error("token {0:?} is reserved and cannot appear in corpus text")]
    ReservedTokenInText(String),

    #[error("line {line}: {message}")]
    Jsonl { line: usize, message: String },

    #[error("duplicate candidate id {0:?}")]
    DuplicateDocId(String),

    #[error("invalid document id {0:?}: expected {1} decimal digits")]
    InvalidDocId(String, usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("candidate list of size {requested} cannot hold {positives} positives")]
    CandidateListTooSmall { requested: usize, positives: usize },

    #[error("not enough candidates: requested {requested}, example has {available}")]
    NotEnoughCandidates { requested: usize, available: usize },

    #[error("example has no positive candidates")]
    NoPositives,

    #[error(
        "query offset {offset} collides with document positions (must be at least {required})"
    )]
    PositionCollision { offset: usize, required: usize },

    #[error("position id {position} exceeds max_position {max}")]
    PositionOverflow { position: usize, max: usize },

    #[error("layout has no assigned position ids")]
    PositionsUnassigned,

    #[error("signal token {0:?} not found in the query chunk (malformed template)")]
    SignalTokenMissing(String),

    #[error("signal token set is empty")]
    EmptySignalSet,

    #[error("prompt has no document chunks")]
    NoDocuments,

    #[error("answer alignment mismatch: {0}")]
    AlignmentMismatch(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("stop layer {requested} exceeds model depth {depth}")]
    StopLayerOutOfRange { requested: usize, depth: usize },

    #[error("forward trace is missing {0}")]
    MissingTrace(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty prediction list")]
    EmptyPredictions,

    #[error("digit entropy input: {0}")]
    EntropyInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
