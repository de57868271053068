//! Metrics, threshold selection, experiments and explanation reports.

mod audit;
mod experiments;
mod metrics;
mod report;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderError, EncoderState};
use crate::vocab::{LabeledSample, Vocabulary};

pub use audit::{bias_audit, top_variable_frequencies, BiasAuditReport, ModelAudit, SubgroupDelta, SubgroupMetrics};
pub use experiments::{drift_check, scaling_experiment, subset_fraction, DriftReport, ScalingOutcome, ScalingReport, ScalingRow};
pub use metrics::{gmean, roc_auc, select_threshold, Confusion, Threshold};
pub use report::{attention_html, rank_tokens};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric needs both classes present")]
    SingleClassInput,
    #[error("{scores} scores for {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("label {0} is not 0 or 1")]
    InvalidLabel(u8),
    #[error("score is NaN")]
    NanScore,
    #[error("sample {0} has no race or gender tag")]
    MissingSubgroupTags(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("sizes must be positive and ascending")]
    InvalidSizes,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("training failed: {0}")]
    Training(String),
}

pub const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auc: f64,
    pub recall: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    /// Threshold chosen on validation scores.
    pub chosen_alpha: f64,
    pub validation_gmean: f64,
    pub confusion: Confusion,
    pub n_samples: usize,
}

impl EvalResult {
    /// Test metrics at a fixed threshold.
    pub fn at_threshold(scores: &[f64], labels: &[u8], threshold: Threshold) -> Result<Self, EvalError> {
        let auc = roc_auc(scores, labels)?;
        let confusion = Confusion::at(scores, labels, threshold.alpha);
        Ok(Self {
            auc,
            recall: confusion.sensitivity(),
            sensitivity: confusion.sensitivity(),
            specificity: confusion.specificity(),
            precision: confusion.precision(),
            chosen_alpha: threshold.alpha,
            validation_gmean: threshold.gmean,
            confusion,
            n_samples: scores.len(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }
}

pub fn labels_of(samples: &[LabeledSample]) -> Vec<u8> {
    samples.iter().map(|s| s.label).collect()
}

/// Picks the threshold on validation scores only, then scores the test set.
pub fn evaluate_scores(
    validate_scores: &[f64],
    validate_labels: &[u8],
    test_scores: &[f64],
    test_labels: &[u8],
) -> Result<EvalResult, EvalError> {
    let threshold = select_threshold(validate_scores, validate_labels)?;
    EvalResult::at_threshold(test_scores, test_labels, threshold)
}

/// Scores `validate` and `test` with the classifier and reports test
/// metrics at the validation-optimal threshold.
pub fn evaluate(
    state: &EncoderState,
    vocab: &Vocabulary,
    validate: &[LabeledSample],
    test: &[LabeledSample],
) -> Result<EvalResult, EvalError> {
    state.check_vocab(vocab)?;
    let vs = state.predict_proba(validate, EVAL_BATCH)?;
    let ts = state.predict_proba(test, EVAL_BATCH)?;
    evaluate_scores(&vs, &labels_of(validate), &ts, &labels_of(test))
}
