use serde::{Deserialize, Serialize};

use super::EvalError;

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    (pos, labels.len() - pos)
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(EvalError::InvalidLabel(*bad));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::NanScore);
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClassInput);
    }
    Ok((pos, neg))
}

/// Area under the ROC curve from the Mann-Whitney rank statistic; tied
/// scores receive their average rank.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let pos_f = pos as f64;
    Ok((rank_sum - pos_f * (pos_f + 1.0) / 2.0) / (pos_f * neg as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
}

impl Confusion {
    /// Counts with the rule `predict 1 iff score > alpha`.
    pub fn at(scores: &[f64], labels: &[u8], alpha: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &y) in scores.iter().zip(labels) {
            match (s > alpha, y == 1) {
                (true, true) => c.true_positive += 1,
                (true, false) => c.false_positive += 1,
                (false, false) => c.true_negative += 1,
                (false, true) => c.false_negative += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.true_positive + self.false_positive + self.true_negative + self.false_negative
    }

    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn sensitivity(&self) -> f64 {
        Self::ratio(self.true_positive, self.true_positive + self.false_negative)
    }

    pub fn specificity(&self) -> f64 {
        Self::ratio(self.true_negative, self.true_negative + self.false_positive)
    }

    pub fn precision(&self) -> f64 {
        Self::ratio(self.true_positive, self.true_positive + self.false_positive)
    }

    pub fn positive_rate(&self) -> f64 {
        Self::ratio(self.true_positive + self.false_positive, self.total())
    }

    pub fn gmean(&self) -> f64 {
        gmean(self.sensitivity(), self.specificity())
    }
}

/// Geometric mean of sensitivity and specificity.
pub fn gmean(sensitivity: f64, specificity: f64) -> f64 {
    (sensitivity * specificity).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub alpha: f64,
    pub gmean: f64,
}

/// Threshold maximizing the G-mean over the midpoints between distinct
/// scores plus 0 and 1. Ties go to the smallest threshold.
pub fn select_threshold(scores: &[f64], labels: &[u8]) -> Result<Threshold, EvalError> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut candidates: Vec<f64> = distinct.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0).collect();
    candidates.extend([0.0, 1.0]);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let mut pos_scores: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(&s, _)| s).collect();
    let mut neg_scores: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y == 0).map(|(&s, _)| s).collect();
    pos_scores.sort_by(f64::total_cmp);
    neg_scores.sort_by(f64::total_cmp);
    let mut best = Threshold { alpha: f64::NAN, gmean: -1.0 };
    for alpha in candidates {
        let tp = pos - pos_scores.partition_point(|&s| s <= alpha);
        let tn = neg_scores.partition_point(|&s| s <= alpha);
        let g = gmean(tp as f64 / pos as f64, tn as f64 / neg as f64);
        if g > best.gmean {
            best = Threshold { alpha, gmean: g };
        }
    }
    Ok(best)
}
