//! Desk-scale blockwise in-context ranking.
//!
//! A decoder transformer reads a prompt holding an instruction, a list of
//! candidate documents, and a query, and ranks the documents. The attention
//! is structured: document chunks attend only to themselves and the
//! instruction, the query chunk attends to everything, and every document
//! shares one local position space so its representation does not depend on
//! list order. A contrastive loss on mid-layer attention mass teaches
//! specific query tokens to point at the relevant document, which lets the
//! model rank by attention alone during prefill instead of decoding ids.
//!
//! Modules follow the pipeline: [`corpus`] builds vocabularies and prompts,
//! [`layout`] grids them into fixed-length chunks with position ids,
//! [`model`] runs (and differentiates) the transformer, [`objective`] scores
//! documents and computes losses, [`training`] fits parameters, [`inference`]
//! produces rankings, and [`evaluation`] measures quality, complexity, and
//! latency.

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod layout;
pub mod model;
pub mod objective;
pub mod training;

pub use error::{Error, Result};
