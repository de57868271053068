use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{evaluate, labels_of, EvalError, EvalResult, Threshold, EVAL_BATCH};
use crate::encoder::EncoderState;
use crate::vocab::{LabeledSample, Vocabulary};

/// Samples of the first `ceil(fraction * n)` beneficiaries in id order.
pub fn subset_fraction(samples: &[LabeledSample], fraction: f64) -> Vec<LabeledSample> {
    let ids: BTreeSet<&str> = samples.iter().map(|s| s.beneficiary_id.as_str()).collect();
    let keep = ((fraction.clamp(0.0, 1.0) * ids.len() as f64).ceil() as usize).min(ids.len());
    let chosen: BTreeSet<&str> = ids.into_iter().take(keep).collect();
    samples.iter().filter(|s| chosen.contains(s.beneficiary_id.as_str())).cloned().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    /// Requested number of events.
    pub size: usize,
    pub n_train: usize,
    pub n_validate: usize,
    pub n_test: usize,
    pub auc: f64,
    pub recall: f64,
    pub specificity: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
}

impl ScalingReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("size\tn_train\tn_validate\tn_test\tauc\trecall\tspecificity\talpha\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                r.size, r.n_train, r.n_validate, r.n_test, r.auc, r.recall, r.specificity, r.alpha
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    /// True when AUC never drops by more than `tolerance` from one size to the next.
    pub fn is_monotone(&self, tolerance: f64) -> bool {
        self.rows.windows(2).all(|w| w[1].auc >= w[0].auc - tolerance)
    }
}

pub struct ScalingOutcome {
    pub report: ScalingReport,
    /// One trained model per size, in the same order as the rows.
    pub models: Vec<EncoderState>,
}

/// Trains one model per size on beneficiary-level subsets of the training
/// and validation data, each taking the fraction `size / total events` of
/// its split, and scores every model on the same full test set. Sizes must
/// be positive and ascending.
pub fn scaling_experiment(
    sizes: &[usize],
    train: &[LabeledSample],
    validate: &[LabeledSample],
    test: &[LabeledSample],
    vocab: &Vocabulary,
    fit: &mut dyn FnMut(usize, &[LabeledSample], &[LabeledSample]) -> Result<EncoderState, EvalError>,
) -> Result<ScalingOutcome, EvalError> {
    if sizes.is_empty() || sizes[0] == 0 || sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(EvalError::InvalidSizes);
    }
    let total = (train.len() + validate.len() + test.len()) as f64;
    let mut report = ScalingReport::default();
    let mut models = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let fraction = size as f64 / total;
        let tr = subset_fraction(train, fraction);
        let va = subset_fraction(validate, fraction);
        let state = fit(size, &tr, &va)?;
        let r = evaluate(&state, vocab, &va, test)?;
        report.rows.push(ScalingRow {
            size,
            n_train: tr.len(),
            n_validate: va.len(),
            n_test: test.len(),
            auc: r.auc,
            recall: r.recall,
            specificity: r.specificity,
            alpha: r.chosen_alpha,
        });
        models.push(state);
    }
    Ok(ScalingOutcome { report, models })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub reference_auc: f64,
    pub later: EvalResult,
    /// later minus reference
    pub auc_delta: f64,
}

impl DriftReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }
}

/// Scores later-era samples with a frozen model at the reference threshold.
pub fn drift_check(
    state: &EncoderState,
    vocab: &Vocabulary,
    reference: &EvalResult,
    later: &[LabeledSample],
) -> Result<DriftReport, EvalError> {
    state.check_vocab(vocab)?;
    let scores = state.predict_proba(later, EVAL_BATCH)?;
    let threshold = Threshold { alpha: reference.chosen_alpha, gmean: reference.validation_gmean };
    let later = EvalResult::at_threshold(&scores, &labels_of(later), threshold)?;
    Ok(DriftReport { reference_auc: reference.auc, auc_delta: later.auc - reference.auc, later })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(bene: &str) -> LabeledSample {
        LabeledSample {
            tokens: vec![3],
            segment_ids: vec![0],
            time_bucket_ids: vec![0],
            label: 0,
            beneficiary_id: bene.into(),
            race: "1".into(),
            gender: "F".into(),
            index_claim_id: format!("{bene}-c"),
            history_claim_ids: Vec::new(),
        }
    }

    #[test]
    fn subsets_are_nested_and_whole_beneficiary() {
        let samples: Vec<LabeledSample> = ["d", "a", "c", "a", "b", "d", "e"].iter().map(|b| sample(b)).collect();
        let ids = |v: &[LabeledSample]| v.iter().map(|s| s.beneficiary_id.clone()).collect::<BTreeSet<_>>();
        let small = subset_fraction(&samples, 0.3);
        let big = subset_fraction(&samples, 0.6);
        assert_eq!(ids(&small), ["a", "b"].iter().map(|s| s.to_string()).collect());
        assert_eq!(small.len(), 3);
        assert!(ids(&small).is_subset(&ids(&big)));
        assert_eq!(big.len(), 4);
        assert_eq!(subset_fraction(&samples, 1.0).len(), samples.len());
        assert!(subset_fraction(&samples, 0.0).is_empty());
    }

    #[test]
    fn sizes_must_ascend() {
        let vocab = Vocabulary::from_counts(&[("AGE_Q1".to_string(), 1)].into_iter().collect(), 1, 0).unwrap();
        let mut fit = |_: usize, _: &[LabeledSample], _: &[LabeledSample]| -> Result<EncoderState, EvalError> {
            unreachable!()
        };
        for sizes in [&[][..], &[0, 10][..], &[10, 10][..], &[20, 10][..]] {
            assert!(matches!(
                scaling_experiment(sizes, &[], &[], &[], &vocab, &mut fit),
                Err(EvalError::InvalidSizes)
            ));
        }
    }

    #[test]
    fn monotone_check_uses_tolerance() {
        let row = |size, auc| ScalingRow {
            size,
            n_train: 0,
            n_validate: 0,
            n_test: 0,
            auc,
            recall: 0.0,
            specificity: 0.0,
            alpha: 0.5,
        };
        let r = ScalingReport { rows: vec![row(1, 0.80), row(2, 0.79), row(3, 0.85)] };
        assert!(r.is_monotone(0.02));
        assert!(!r.is_monotone(0.0));
        assert!(r.to_tsv().lines().count() == 4);
    }
}
