//! Few-shot annotation of dataset metadata records with division codes
//! from a controlled research-classification vocabulary.
//!
//! The pipeline: load a [`taxonomy`], read and split a [`corpus`], pick
//! demonstrations ([`prompting`], optionally ranked by [`embedding`]
//! similarity), send the prompt through the [`gateway`], read the
//! reply with [`parser`] and score the predictions in [`evaluation`].

pub mod corpus;
pub mod embedding;
pub mod evaluation;
pub mod fixtures;
pub mod gateway;
pub mod parser;
pub mod prompting;
pub mod seed;
pub mod taxonomy;

pub use corpus::MetadataRecord;
pub use taxonomy::{SubjectCode, Taxonomy};
