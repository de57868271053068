//! Vocabulary reduction and sequence assembly.
//!
//! Raw claim variables are turned into coarse token strings (code rollups,
//! quantile bins, categorical values), a frequency-capped vocabulary is fit on
//! training beneficiaries, and each labeled inpatient event becomes a bounded
//! sequence `[CLS] personal [SEP] county [SEP] history [SEP] index [SEP]`.

mod features;
mod grouping;
mod quantizer;
mod sample;
mod vocabulary;

use std::path::PathBuf;

use thiserror::Error;

pub use features::{
    age_years, categorical_token, claim_tokens, county_tokens, county_variable, personal_tokens, raw_claim_strings,
    raw_county_strings, raw_personal_strings, AGE_VAR, LOS_VAR, PAY_VAR,
};
pub use grouping::{group_hcpcs, group_icd, icd_chapter_count, icd_chapter_range};
pub use quantizer::{fit_quantizer, fit_variable, quantize, QuantizerSpec, VariableBins, DEFAULT_BINS};
pub use sample::{
    assemble_sequence, assemble_tokens, encode_sequence, gap_bucket, leakage_scan, read_samples, write_samples, LabeledSample, Segment,
    TokenSequence, DEFAULT_MAX_LEN, GAP_TOKENS, HISTORY_WINDOW_DAYS, N_TIME_BUCKETS,
};
pub use vocabulary::{token_family, Vocabulary, DEFAULT_MIN_COUNT, DEFAULT_VOCAB_CAP};

pub const PAD_TOKEN: &str = "[PAD]";
pub const MASK_TOKEN: &str = "[MASK]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";

pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const CLS_ID: usize = 3;
pub const SEP_ID: usize = 4;

/// Specials in id order.
pub const SPECIAL_TOKENS: [&str; 5] = [PAD_TOKEN, MASK_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN];
pub const N_SPECIALS: usize = SPECIAL_TOKENS.len();

pub fn is_special(id: usize) -> bool {
    id < N_SPECIALS
}

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("variable {variable} has {distinct} distinct values, fewer than {bins} bins")]
    DegenerateVariable { variable: String, distinct: usize, bins: usize },
    #[error("no quantizer fitted for variable {0}")]
    UnknownVariable(String),
    #[error("bin count must be at least 2, got {0}")]
    InvalidBinCount(usize),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("claim {claim_id} is not an inpatient claim of beneficiary {beneficiary_id}")]
    EventNotInTimeline { claim_id: String, beneficiary_id: String },
    #[error("vocabulary hash mismatch: header says {expected}, content hashes to {found}")]
    HashMismatch { expected: String, found: String },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
