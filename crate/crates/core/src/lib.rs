//! Claims-to-readmission-risk pipeline.
//!
//! Claims ETL and labeling, vocabulary reduction and sequence assembly, a
//! small transformer encoder with masked-token pretraining and a readmission
//! classifier, and the evaluation, explanation and audit tooling around it.

pub mod claims;
pub mod labeler;
pub mod vocab;
pub mod kv;
pub mod synth;
pub mod train;
pub mod prep;
pub mod encoder;
pub mod eval;
