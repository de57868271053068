//! Per-event sequence assembly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::claims::{BeneficiaryTimeline, ClaimRecord, CountyStats, Day};
use crate::labeler::LabeledInpatientEvent;

use super::{
    claim_tokens, county_tokens, personal_tokens, QuantizerSpec, VocabError, Vocabulary, CLS_TOKEN, SEP_TOKEN,
};

pub const DEFAULT_MAX_LEN: usize = 256;
/// History window before the index admission, inclusive.
pub const HISTORY_WINDOW_DAYS: i32 = 90;
/// Gap tokens for time buckets 1..=5; bucket 0 marks tokens outside the history segment.
pub const GAP_TOKENS: [&str; 5] = ["GAP_0", "GAP_1_7", "GAP_8_30", "GAP_31_60", "GAP_61_90"];
pub const N_TIME_BUCKETS: usize = GAP_TOKENS.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Segment {
    Personal = 0,
    County = 1,
    History = 2,
    Index = 3,
}

impl Segment {
    pub const ALL: [Segment; 4] = [Segment::Personal, Segment::County, Segment::History, Segment::Index];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(usize::from(id)).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Segment::Personal => "personal",
            Segment::County => "county",
            Segment::History => "history",
            Segment::Index => "index",
        }
    }
}

/// Time bucket (1..=5) of a claim `days_before` the index admission, or
/// `None` outside the history window.
pub fn gap_bucket(days_before: i32) -> Option<u8> {
    match days_before {
        0 => Some(1),
        1..=7 => Some(2),
        8..=30 => Some(3),
        31..=60 => Some(4),
        61..=HISTORY_WINDOW_DAYS => Some(5),
        _ => None,
    }
}

/// Token strings of one event before vocabulary lookup.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub segments: Vec<Segment>,
    pub time_buckets: Vec<u8>,
    /// History claims that contributed tokens, oldest first.
    pub history_claim_ids: Vec<String>,
}

impl TokenSequence {
    fn push(&mut self, token: String, segment: Segment, bucket: u8) {
        self.tokens.push(token);
        self.segments.push(segment);
        self.time_buckets.push(bucket);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Model-ready sample: parallel id sequences plus label and provenance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub tokens: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub time_bucket_ids: Vec<u8>,
    pub label: u8,
    pub beneficiary_id: String,
    pub race: String,
    pub gender: String,
    pub index_claim_id: String,
    pub history_claim_ids: Vec<String>,
}

impl LabeledSample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|&t| t as usize).collect()
    }
}

fn index_claim<'a>(
    event: &LabeledInpatientEvent,
    timeline: &'a BeneficiaryTimeline,
) -> Result<&'a ClaimRecord, VocabError> {
    let missing = || VocabError::EventNotInTimeline {
        claim_id: event.index_claim_id.clone(),
        beneficiary_id: timeline.id().to_string(),
    };
    if event.beneficiary_id != timeline.id() {
        return Err(missing());
    }
    timeline
        .claim(&event.index_claim_id)
        .filter(|c| c.is_inpatient() && c.admission_date.is_some())
        .ok_or_else(missing)
}

/// Whether `claim` may feed the history of an index stay admitted on `admission`:
/// strictly earlier in timeline order, fully dated on or before the admission
/// day, and inside the window.
fn history_bucket(claim: &ClaimRecord, index: &ClaimRecord, admission: Day) -> Option<u8> {
    if claim.claim_id == index.claim_id || claim.sort_key() >= index.sort_key() || claim.last_date() > admission {
        return None;
    }
    gap_bucket(admission.days_since(claim.event_date()))
}

/// Builds `[CLS] personal [SEP] county [SEP] (history [SEP]) index [SEP]`.
///
/// Each history claim is prefixed by its gap token. When the sequence exceeds
/// `max_len` the oldest history claims go first; the index tail is trimmed only
/// if the sequence is still too long with no history left.
pub fn assemble_tokens(
    event: &LabeledInpatientEvent,
    timeline: &BeneficiaryTimeline,
    county: &CountyStats,
    quantizer: &QuantizerSpec,
    max_len: usize,
) -> Result<TokenSequence, VocabError> {
    let index = index_claim(event, timeline)?;
    let admission = index.admission_date.expect("checked by index_claim");

    let personal = personal_tokens(&timeline.beneficiary, admission, quantizer)?;
    let county = county_tokens(county, quantizer)?;
    let mut history: Vec<(&str, u8, Vec<String>)> = Vec::new();
    for claim in &timeline.claims {
        if let Some(bucket) = history_bucket(claim, index, admission) {
            history.push((&claim.claim_id, bucket, claim_tokens(claim, quantizer)?));
        }
    }
    let mut index_tokens = claim_tokens(index, quantizer)?;

    let fixed = personal.len() + county.len() + 4;
    let history_len = |h: &[(&str, u8, Vec<String>)]| {
        if h.is_empty() {
            0
        } else {
            h.iter().map(|(_, _, t)| t.len() + 1).sum::<usize>() + 1
        }
    };
    let mut first = 0;
    while first < history.len() && fixed + history_len(&history[first..]) + index_tokens.len() > max_len {
        first += 1;
    }
    let history = &history[first..];
    let room = max_len.saturating_sub(fixed + history_len(history));
    index_tokens.truncate(room);

    let mut seq = TokenSequence {
        tokens: Vec::with_capacity(max_len),
        segments: Vec::with_capacity(max_len),
        time_buckets: Vec::with_capacity(max_len),
        history_claim_ids: history.iter().map(|(id, _, _)| id.to_string()).collect(),
    };
    seq.push(CLS_TOKEN.into(), Segment::Personal, 0);
    for t in personal {
        seq.push(t, Segment::Personal, 0);
    }
    seq.push(SEP_TOKEN.into(), Segment::Personal, 0);
    for t in county {
        seq.push(t, Segment::County, 0);
    }
    seq.push(SEP_TOKEN.into(), Segment::County, 0);
    if !history.is_empty() {
        for (_, bucket, tokens) in history {
            seq.push(GAP_TOKENS[usize::from(*bucket) - 1].into(), Segment::History, *bucket);
            for t in tokens {
                seq.push(t.clone(), Segment::History, *bucket);
            }
        }
        seq.push(SEP_TOKEN.into(), Segment::History, 0);
    }
    for t in index_tokens {
        seq.push(t, Segment::Index, 0);
    }
    seq.push(SEP_TOKEN.into(), Segment::Index, 0);
    Ok(seq)
}

/// Converts assembled strings to ids.
pub fn encode_sequence(
    event: &LabeledInpatientEvent,
    timeline: &BeneficiaryTimeline,
    seq: &TokenSequence,
    vocab: &Vocabulary,
) -> LabeledSample {
    LabeledSample {
        tokens: seq.tokens.iter().map(|t| vocab.id(t) as u32).collect(),
        segment_ids: seq.segments.iter().map(|s| s.id()).collect(),
        time_bucket_ids: seq.time_buckets.clone(),
        label: event.label,
        beneficiary_id: event.beneficiary_id.clone(),
        race: timeline.beneficiary.race.clone(),
        gender: timeline.beneficiary.gender.clone(),
        index_claim_id: event.index_claim_id.clone(),
        history_claim_ids: seq.history_claim_ids.clone(),
    }
}

pub fn assemble_sequence(
    event: &LabeledInpatientEvent,
    timeline: &BeneficiaryTimeline,
    county: &CountyStats,
    vocab: &Vocabulary,
    quantizer: &QuantizerSpec,
    max_len: usize,
) -> Result<LabeledSample, VocabError> {
    let seq = assemble_tokens(event, timeline, county, quantizer, max_len)?;
    Ok(encode_sequence(event, timeline, &seq, vocab))
}

/// Audits one sample against its source timeline. Returns every violation
/// found: malformed layout, history claims dated after the index admission
/// or outside the window, and gap tokens that disagree with their claims.
pub fn leakage_scan(sample: &LabeledSample, timeline: &BeneficiaryTimeline, vocab: &Vocabulary) -> Vec<String> {
    let mut problems = Vec::new();
    let n = sample.tokens.len();
    if sample.segment_ids.len() != n || sample.time_bucket_ids.len() != n {
        problems.push("parallel sequences differ in length".to_string());
        return problems;
    }
    if sample.tokens.first().map(|&t| t as usize) != Some(super::CLS_ID) {
        problems.push("first token is not CLS".to_string());
    }
    if sample.tokens.iter().any(|&t| t as usize >= vocab.len()) {
        problems.push("token id outside vocabulary".to_string());
    }
    if sample.segment_ids.windows(2).any(|w| w[0] > w[1]) || sample.segment_ids.iter().any(|&s| s > 3) {
        problems.push("segments out of order".to_string());
    }
    let Some(index) = timeline.claim(&sample.index_claim_id).filter(|c| c.is_inpatient()) else {
        problems.push(format!("index claim {} not in timeline", sample.index_claim_id));
        return problems;
    };
    let Some(admission) = index.admission_date else {
        problems.push("index claim lacks an admission date".to_string());
        return problems;
    };
    let gap_buckets: Vec<u8> = sample
        .tokens
        .iter()
        .zip(&sample.segment_ids)
        .filter(|(_, &s)| s == Segment::History.id())
        .filter_map(|(&t, _)| {
            let token = vocab.token(t as usize)?;
            GAP_TOKENS.iter().position(|g| *g == token).map(|p| p as u8 + 1)
        })
        .collect();
    if gap_buckets.len() != sample.history_claim_ids.len() {
        problems.push(format!(
            "{} gap tokens for {} history claims",
            gap_buckets.len(),
            sample.history_claim_ids.len()
        ));
    }
    for (i, id) in sample.history_claim_ids.iter().enumerate() {
        let Some(claim) = timeline.claim(id) else {
            problems.push(format!("history claim {id} not in timeline"));
            continue;
        };
        if claim.last_date() > admission || claim.sort_key() >= index.sort_key() {
            problems.push(format!("history claim {id} is dated after index admission {admission}"));
        }
        let bucket = gap_bucket(admission.days_since(claim.event_date()));
        match bucket {
            None => problems.push(format!("history claim {id} lies outside the window")),
            Some(b) if gap_buckets.get(i).is_some_and(|&g| g != b) => {
                problems.push(format!("history claim {id} has gap bucket {} but token says {}", b, gap_buckets[i]))
            }
            Some(_) => {}
        }
    }
    problems
}

const SAMPLE_HEADER: [&str; 9] = [
    "tokens",
    "segment_ids",
    "time_bucket_ids",
    "label",
    "beneficiary_id",
    "race",
    "gender",
    "index_claim_id",
    "history_claim_ids",
];

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

pub fn write_samples(path: &Path, samples: &[LabeledSample]) -> Result<(), VocabError> {
    let csv_err = |source| VocabError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(SAMPLE_HEADER).map_err(csv_err)?;
    for s in samples {
        w.write_record([
            join(&s.tokens),
            join(&s.segment_ids),
            join(&s.time_bucket_ids),
            s.label.to_string(),
            s.beneficiary_id.clone(),
            s.race.clone(),
            s.gender.clone(),
            s.index_claim_id.clone(),
            s.history_claim_ids.join(" "),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<LabeledSample>, VocabError> {
    let csv_err = |source| VocabError::Csv { path: path.to_path_buf(), source };
    let format = |row: usize, detail: &str| VocabError::Format {
        path: path.to_path_buf(),
        detail: format!("row {row}: {detail}"),
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(SAMPLE_HEADER) {
        return Err(format(0, "unexpected header"));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(csv_err)?;
        fn ints<T: std::str::FromStr>(field: &str) -> Option<Vec<T>> {
            field.split_whitespace().map(|v| v.parse().ok()).collect()
        }
        let sample = LabeledSample {
            tokens: ints(&rec[0]).ok_or_else(|| format(row, "bad tokens"))?,
            segment_ids: ints(&rec[1]).ok_or_else(|| format(row, "bad segment_ids"))?,
            time_bucket_ids: ints(&rec[2]).ok_or_else(|| format(row, "bad time_bucket_ids"))?,
            label: rec[3].parse().ok().filter(|l| *l <= 1).ok_or_else(|| format(row, "bad label"))?,
            beneficiary_id: rec[4].to_string(),
            race: rec[5].to_string(),
            gender: rec[6].to_string(),
            index_claim_id: rec[7].to_string(),
            history_claim_ids: rec[8].split_whitespace().map(str::to_string).collect(),
        };
        if sample.segment_ids.len() != sample.tokens.len() || sample.time_bucket_ids.len() != sample.tokens.len() {
            return Err(format(row, "parallel sequences differ in length"));
        }
        out.push(sample);
    }
    Ok(out)
}
