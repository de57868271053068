//! 30-day readmission labels for inpatient claims.
//!
//! An inpatient claim is positive when the chronologically next inpatient
//! admission of the same beneficiary starts at most 30 days after its
//! discharge, or when it was discharged as a transfer and the next admission
//! falls on the discharge day. Overlapping stays (negative gap) are positive.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::claims::{BeneficiaryTimeline, ClaimRecord, Day, DischargeStatus};

pub const READMISSION_WINDOW_DAYS: i32 = 30;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("timeline of {0} is not sorted")]
    UnsortedTimeline(String),
    #[error("inpatient claim {0} lacks an admission or discharge date")]
    MissingDates(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledInpatientEvent {
    pub index_claim_id: String,
    pub beneficiary_id: String,
    pub admission_date: Day,
    pub discharge_date: Day,
    pub label: u8,
    pub next_admission_date: Option<Day>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub total_claims: usize,
    pub inpatient_claims: usize,
    pub positives: usize,
}

impl LabelSummary {
    pub fn positive_rate(&self) -> f64 {
        if self.inpatient_claims == 0 {
            0.0
        } else {
            self.positives as f64 / self.inpatient_claims as f64
        }
    }
}

fn dates(c: &ClaimRecord) -> Result<(Day, Day), LabelError> {
    match (c.admission_date, c.discharge_date) {
        (Some(a), Some(d)) => Ok((a, d)),
        _ => Err(LabelError::MissingDates(c.claim_id.clone())),
    }
}

/// The rule applied to one (index, next) pair.
pub fn readmission_label(index: &ClaimRecord, next_admission: Option<Day>) -> Result<u8, LabelError> {
    let (_, discharge) = dates(index)?;
    let Some(next) = next_admission else { return Ok(0) };
    let gap = next.days_since(discharge);
    let transfer = index.discharge_status == Some(DischargeStatus::Transfer) && gap == 0;
    Ok(u8::from(gap <= READMISSION_WINDOW_DAYS || transfer))
}

pub fn label_timeline(timeline: &BeneficiaryTimeline) -> Result<Vec<LabeledInpatientEvent>, LabelError> {
    if !timeline.is_sorted() {
        return Err(LabelError::UnsortedTimeline(timeline.id().to_string()));
    }
    let inpatient: Vec<&ClaimRecord> = timeline.inpatient_claims().collect();
    inpatient
        .iter()
        .enumerate()
        .map(|(i, claim)| {
            let (admission, discharge) = dates(claim)?;
            let next_admission = match inpatient.get(i + 1) {
                Some(next) => Some(dates(next)?.0),
                None => None,
            };
            Ok(LabeledInpatientEvent {
                index_claim_id: claim.claim_id.clone(),
                beneficiary_id: claim.beneficiary_id.clone(),
                admission_date: admission,
                discharge_date: discharge,
                label: readmission_label(claim, next_admission)?,
                next_admission_date: next_admission,
            })
        })
        .collect()
}

pub fn label_dataset(
    timelines: &[BeneficiaryTimeline],
) -> Result<(Vec<LabeledInpatientEvent>, LabelSummary), LabelError> {
    let mut events = Vec::new();
    let mut summary = LabelSummary::default();
    for tl in timelines {
        summary.total_claims += tl.claims.len();
        let labeled = label_timeline(tl)?;
        summary.inpatient_claims += labeled.len();
        summary.positives += labeled.iter().filter(|e| e.label == 1).count();
        events.extend(labeled);
    }
    Ok((events, summary))
}

/// Writes `index_claim_id,beneficiary_id,label` lines with a header.
pub fn write_labels(path: &Path, events: &[LabeledInpatientEvent]) -> Result<(), LabelError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "index_claim_id,beneficiary_id,label")?;
    for e in events {
        writeln!(out, "{},{},{}", e.index_claim_id, e.beneficiary_id, e.label)?;
    }
    out.flush()?;
    Ok(())
}
