use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{labels_of, rank_tokens, roc_auc, select_threshold, Confusion, EvalError, Threshold, EVAL_BATCH};
use crate::encoder::EncoderState;
use crate::vocab::{token_family, LabeledSample, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupMetrics {
    pub attribute: String,
    pub group: String,
    pub n: usize,
    pub positives: usize,
    /// `None` when the subgroup holds a single class.
    pub auc: Option<f64>,
    pub recall: f64,
    pub positive_prediction_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelAudit {
    pub alpha: f64,
    pub subgroups: Vec<SubgroupMetrics>,
    /// Share of samples whose three highest-attention variables include each variable.
    pub top3_frequency: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupDelta {
    pub attribute: String,
    pub group: String,
    /// masked minus full
    pub auc: Option<f64>,
    pub recall: f64,
    pub positive_prediction_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasAuditReport {
    pub n_samples: usize,
    pub full: ModelAudit,
    pub masked: ModelAudit,
    pub deltas: Vec<SubgroupDelta>,
}

impl BiasAuditReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }
}

fn attribute_value<'a>(s: &'a LabeledSample, attribute: &str) -> &'a str {
    match attribute {
        "race" => &s.race,
        _ => &s.gender,
    }
}

/// Per race and per gender group metrics at a fixed threshold.
pub fn subgroup_metrics(
    samples: &[LabeledSample],
    scores: &[f64],
    alpha: f64,
) -> Result<Vec<SubgroupMetrics>, EvalError> {
    if let Some(s) = samples.iter().find(|s| s.race.is_empty() || s.gender.is_empty()) {
        return Err(EvalError::MissingSubgroupTags(s.index_claim_id.clone()));
    }
    let mut out = Vec::new();
    for attribute in ["race", "gender"] {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            groups.entry(attribute_value(s, attribute)).or_default().push(i);
        }
        for (group, idx) in groups {
            let sc: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let y: Vec<u8> = idx.iter().map(|&i| samples[i].label).collect();
            let c = Confusion::at(&sc, &y, alpha);
            out.push(SubgroupMetrics {
                attribute: attribute.to_string(),
                group: group.to_string(),
                n: idx.len(),
                positives: y.iter().filter(|&&v| v == 1).count(),
                auc: match roc_auc(&sc, &y) {
                    Ok(a) => Some(a),
                    Err(EvalError::SingleClassInput) => None,
                    Err(e) => return Err(e),
                },
                recall: c.sensitivity(),
                positive_prediction_rate: c.positive_rate(),
            });
        }
    }
    Ok(out)
}

/// For each sample, the variable families of its three highest-attention
/// non-special tokens (distinct families, in rank order); returns each
/// family's share of samples, most frequent first.
pub fn top_variable_frequencies(
    state: &EncoderState,
    vocab: &Vocabulary,
    samples: &[LabeledSample],
) -> Result<Vec<(String, f64)>, EvalError> {
    let tops: Vec<Vec<String>> = samples
        .par_iter()
        .map(|s| {
            let report = state.extract_attention(s, vocab)?;
            let mut families: Vec<String> = Vec::new();
            for e in rank_tokens(&report, usize::MAX) {
                let f = token_family(&e.token).to_string();
                if !families.contains(&f) {
                    families.push(f);
                }
                if families.len() == 3 {
                    break;
                }
            }
            Ok(families)
        })
        .collect::<Result<_, EvalError>>()?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for f in tops.into_iter().flatten() {
        *counts.entry(f).or_default() += 1;
    }
    let n = samples.len().max(1) as f64;
    let mut out: Vec<(String, f64)> = counts.into_iter().map(|(f, c)| (f, c as f64 / n)).collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

fn audit_model(
    state: &EncoderState,
    vocab: &Vocabulary,
    validate: &[LabeledSample],
    test: &[LabeledSample],
) -> Result<ModelAudit, EvalError> {
    state.check_vocab(vocab)?;
    let vs = state.predict_proba(validate, EVAL_BATCH)?;
    let Threshold { alpha, .. } = select_threshold(&vs, &labels_of(validate))?;
    let ts = state.predict_proba(test, EVAL_BATCH)?;
    Ok(ModelAudit {
        alpha,
        subgroups: subgroup_metrics(test, &ts, alpha)?,
        top3_frequency: top_variable_frequencies(state, vocab, test)?,
    })
}

/// Compares a model with its retrain on demographics-masked data over the
/// same test events. Each model's threshold comes from its own validation set.
#[allow(clippy::too_many_arguments)]
pub fn bias_audit(
    full: &EncoderState,
    full_vocab: &Vocabulary,
    full_data: (&[LabeledSample], &[LabeledSample]),
    masked: &EncoderState,
    masked_vocab: &Vocabulary,
    masked_data: (&[LabeledSample], &[LabeledSample]),
) -> Result<BiasAuditReport, EvalError> {
    let (full_test, masked_test) = (full_data.1, masked_data.1);
    if full_test.len() != masked_test.len()
        || full_test.iter().zip(masked_test).any(|(a, b)| a.index_claim_id != b.index_claim_id)
    {
        return Err(EvalError::Mismatch("full and masked test sets cover different events".into()));
    }
    let full_audit = audit_model(full, full_vocab, full_data.0, full_test)?;
    // masked samples carry UNK tokens, but their subgroup tags come from the records
    let masked_audit = audit_model(masked, masked_vocab, masked_data.0, masked_test)?;
    let deltas = full_audit
        .subgroups
        .iter()
        .zip(&masked_audit.subgroups)
        .map(|(f, m)| SubgroupDelta {
            attribute: f.attribute.clone(),
            group: f.group.clone(),
            auc: f.auc.zip(m.auc).map(|(a, b)| b - a),
            recall: m.recall - f.recall,
            positive_prediction_rate: m.positive_prediction_rate - f.positive_prediction_rate,
        })
        .collect();
    Ok(BiasAuditReport { n_samples: full_test.len(), full: full_audit, masked: masked_audit, deltas })
}
