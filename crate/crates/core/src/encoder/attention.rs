use std::collections::BTreeMap;

use claimrisk_tensor::Scalar;
use serde::{Deserialize, Serialize};

use super::{EncoderError, EncoderState};
use crate::vocab::{is_special, token_family, LabeledSample, Segment, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionEntry {
    pub position: usize,
    pub token: String,
    pub segment: String,
    pub probability: f64,
}

/// CLS-row attention of one head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadAttention {
    pub layer: usize,
    pub head: usize,
    pub entries: Vec<AttentionEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub sample_id: String,
    pub beneficiary_id: String,
    pub label: u8,
    pub probability: f64,
    pub heads: Vec<HeadAttention>,
    /// Final-layer CLS attention averaged over heads.
    pub aggregate: Vec<AttentionEntry>,
    /// Variable families by summed aggregate attention, specials excluded.
    pub variables: Vec<(String, f64)>,
}

impl AttentionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }
}

impl<F: Scalar> EncoderState<F> {
    /// Attention the CLS position pays to every input token, per layer and
    /// head, with detokenized strings and segment names.
    pub fn extract_attention(&self, sample: &LabeledSample, vocab: &Vocabulary) -> Result<AttentionReport, EncoderError> {
        let (hidden, att) = self.encode(sample)?;
        let logit = self.classify(&hidden)?.to_f64().unwrap_or(f64::NAN);
        let len = sample.len();
        let n_heads = self.config.n_heads;
        let tokens = vocab.detokenize(&sample.token_ids());
        let entry = |j: usize, probability: f64| AttentionEntry {
            position: j,
            token: tokens[j].clone(),
            segment: Segment::from_id(sample.segment_ids[j]).map_or("unknown", Segment::as_str).to_string(),
            probability,
        };
        let a = att.data();
        let mut heads = Vec::new();
        for layer in 0..self.config.n_layers {
            for head in 0..n_heads {
                let row = &a[(layer * n_heads + head) * len * len..][..len];
                let entries = (0..len).map(|j| entry(j, row[j].to_f64().unwrap_or(f64::NAN))).collect();
                heads.push(HeadAttention { layer, head, entries });
            }
        }
        let last = self.config.n_layers - 1;
        let aggregate: Vec<AttentionEntry> = (0..len)
            .map(|j| {
                let total: f64 = heads
                    .iter()
                    .filter(|h| h.layer == last)
                    .map(|h| h.entries[j].probability)
                    .sum();
                entry(j, total / n_heads as f64)
            })
            .collect();
        let mut by_family: BTreeMap<String, f64> = BTreeMap::new();
        for (e, &id) in aggregate.iter().zip(&sample.tokens) {
            if !is_special(id as usize) {
                *by_family.entry(token_family(&e.token).to_string()).or_default() += e.probability;
            }
        }
        let mut variables: Vec<(String, f64)> = by_family.into_iter().collect();
        variables.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(AttentionReport {
            sample_id: sample.index_claim_id.clone(),
            beneficiary_id: sample.beneficiary_id.clone(),
            label: sample.label,
            probability: 1.0 / (1.0 + (-logit).exp()),
            heads,
            aggregate,
            variables,
        })
    }
}
