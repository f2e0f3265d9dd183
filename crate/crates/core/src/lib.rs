//! Retrieve-then-read question answering for yes/no/unknown health
//! questions over a corpus of biomedical abstracts.
//!
//! The stages are separate modules: [`corpus`] ingests and stores abstracts,
//! [`index`] ranks them with BM25, [`filter`] applies year and citation
//! constraints, [`sentences`] selects evidence sentences, [`reader`] labels
//! evidence and votes, and [`eval`] scores predictions and runs sweeps.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod filter;
pub mod index;
pub mod pipeline;
pub mod reader;
pub mod sentences;
pub mod service;
pub mod tokenize;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
