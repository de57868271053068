//! Synthetic cohorts with a planted, analytically known readmission hazard.
//!
//! Every beneficiary carries up to five risky diagnosis slots, one per risky
//! ICD chapter. A present slot puts one code of that chapter on every
//! inpatient claim of the beneficiary, and the hazard of each stay being
//! followed by a readmission within 30 days is
//! `sigmoid(logit(base) + signal·k + w_demo·z_age + w_county·z_obesity)` with
//! `k` the number of present slots. The slot probability is calibrated so the
//! event-level positive rate hits `1 / (1 + label_skew_target)`.
//!
//! Everything else (filler diagnoses, procedures, payments, other claim
//! types) is noise. Other claim types draw codes from every chapter, risky
//! ones included, so chapter tokens outside the index stay are decoys.
//!
//! `shift_strength` simulates a later coding era: each present slot is
//! recorded under a substitute non-risky chapter with that probability while
//! the hazard keeps counting it.

mod analytic;
mod codes;
mod files;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::claims::{
    Beneficiary, BeneficiaryTimeline, ClaimRecord, ClaimType, ClaimsError, CountyStats, Day, DischargeStatus,
    SchemaEra,
};
use crate::kv::{parse_value, ConfigError, KvConfig};

pub use analytic::{logit, sigmoid, ChainModel};
pub use codes::{CodeUniverse, RISKY_CHAPTERS, SUBSTITUTE_CHAPTERS};
pub use files::{load_cohort_dir, read_ground_truth, write_cohort, GROUND_TRUTH_FILE};

/// First calendar year written in the v2011 schema.
pub const V2011_FIRST_YEAR: i32 = 2011;
const NEGATIVE_GAP: (i32, i32) = (31, 120);
const HISTORY_LEAD_DAYS: i32 = 120;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid cohort config: {0}")]
    InvalidConfig(String),
    #[error("unknown beneficiary {0}")]
    UnknownBeneficiary(String),
    #[error(transparent)]
    Claims(#[from] ClaimsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub n_beneficiaries: usize,
    pub start: Day,
    pub end: Day,
    pub seed: u64,
    pub base_readmission_rate: f64,
    /// Log-odds added per present risky slot.
    pub signal_strength: f64,
    /// Negatives per positive at the event level.
    pub label_skew_target: f64,
    /// Probability that a present risky slot is recorded under its substitute chapter.
    pub shift_strength: f64,
    /// Log-odds per standard deviation of age.
    pub demographic_weight: f64,
    /// Log-odds per standard deviation of county obesity rate.
    pub county_weight: f64,
    pub n_counties: usize,
    pub max_inpatient_claims: usize,
    pub max_other_claims: usize,
    /// Probability that a stay without readmission is followed by a later admission.
    pub continue_probability: f64,
    pub id_prefix: String,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_beneficiaries: 10_000,
            start: Day::from_ymd(2008, 1, 1).expect("valid date"),
            end: Day::from_ymd(2013, 12, 31).expect("valid date"),
            seed: 7,
            base_readmission_rate: 1e-3,
            signal_strength: 2.0,
            label_skew_target: 3.0,
            shift_strength: 0.0,
            demographic_weight: 0.0,
            county_weight: 0.0,
            n_counties: 100,
            max_inpatient_claims: 12,
            max_other_claims: 8,
            continue_probability: 0.25,
            id_prefix: "B".to_string(),
        }
    }
}

impl KvConfig for CohortConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        let day = |v: &str| v.parse::<Day>().map_err(|_| ConfigError::InvalidValue { key: key.into(), value: v.into() });
        match key {
            "n_beneficiaries" => self.n_beneficiaries = parse_value(key, value)?,
            "start" => self.start = day(value)?,
            "end" => self.end = day(value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "base_readmission_rate" => self.base_readmission_rate = parse_value(key, value)?,
            "signal_strength" => self.signal_strength = parse_value(key, value)?,
            "label_skew_target" => self.label_skew_target = parse_value(key, value)?,
            "shift_strength" => self.shift_strength = parse_value(key, value)?,
            "demographic_weight" => self.demographic_weight = parse_value(key, value)?,
            "county_weight" => self.county_weight = parse_value(key, value)?,
            "n_counties" => self.n_counties = parse_value(key, value)?,
            "max_inpatient_claims" => self.max_inpatient_claims = parse_value(key, value)?,
            "max_other_claims" => self.max_other_claims = parse_value(key, value)?,
            "continue_probability" => self.continue_probability = parse_value(key, value)?,
            "id_prefix" => self.id_prefix = value.to_string(),
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        let open_unit = |p: f64| p > 0.0 && p < 1.0;
        if self.n_beneficiaries == 0 {
            return bad("n_beneficiaries must be positive");
        }
        if self.start >= self.end {
            return bad("start must precede end");
        }
        if !open_unit(self.base_readmission_rate) {
            return bad("base_readmission_rate must lie in (0, 1)");
        }
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            return bad("signal_strength must be a nonnegative number");
        }
        if !(self.label_skew_target > 0.0 && self.label_skew_target.is_finite()) {
            return bad("label_skew_target must be positive");
        }
        if !(0.0..=1.0).contains(&self.shift_strength) {
            return bad("shift_strength must lie in [0, 1]");
        }
        if !open_unit(self.continue_probability) {
            return bad("continue_probability must lie in (0, 1)");
        }
        if self.max_inpatient_claims == 0 || self.max_inpatient_claims + self.max_other_claims > 20 {
            return bad("claims per beneficiary must stay within 1..=20");
        }
        if self.n_counties == 0 {
            return bad("n_counties must be positive");
        }
        if !self.demographic_weight.is_finite() || !self.county_weight.is_finite() {
            return bad("hazard weights must be finite");
        }
        if self.id_prefix.is_empty() || self.id_prefix.contains([',', '-', ' ', '|']) {
            return bad("id_prefix must be non-empty and free of separators");
        }
        Ok(())
    }

    /// Target event-level positive rate.
    pub fn target_positive_rate(&self) -> f64 {
        1.0 / (1.0 + self.label_skew_target)
    }

    pub fn chain_model(&self, slot_probability: f64) -> ChainModel {
        ChainModel {
            base_rate: self.base_readmission_rate,
            signal: self.signal_strength,
            slot_probability,
            slots: RISKY_CHAPTERS.len(),
            continue_probability: self.continue_probability,
            cap: self.max_inpatient_claims,
        }
    }

    /// Calibrated slot probability. Without signal the slots carry no risk
    /// and the probability is fixed at one half.
    pub fn slot_probability(&self) -> Result<f64, SynthError> {
        if self.signal_strength == 0.0 {
            return Ok(0.5);
        }
        self.chain_model(0.5).calibrate(self.target_positive_rate()).ok_or_else(|| {
            SynthError::InvalidConfig(format!(
                "positive rate {:.3} is unreachable with base rate {} and signal {}",
                self.target_positive_rate(),
                self.base_readmission_rate,
                self.signal_strength
            ))
        })
    }
}

/// Generation-time facts about one beneficiary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeneficiaryTruth {
    pub beneficiary_id: String,
    pub hazard: f64,
    /// Number of present risky slots.
    pub risky_count: u8,
    /// Present slots still recorded under their risky chapter.
    pub observed_risky_count: u8,
    /// Risky-slot codes as they appear on the claims.
    pub planted_codes: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Cohort {
    pub config: CohortConfig,
    pub slot_probability: f64,
    pub timelines: Vec<BeneficiaryTimeline>,
    pub counties: Vec<CountyStats>,
    pub truth: Vec<BeneficiaryTruth>,
    index: HashMap<String, usize>,
}

impl Cohort {
    pub fn new(
        config: CohortConfig,
        slot_probability: f64,
        timelines: Vec<BeneficiaryTimeline>,
        counties: Vec<CountyStats>,
        truth: Vec<BeneficiaryTruth>,
    ) -> Self {
        let index = truth.iter().enumerate().map(|(i, t)| (t.beneficiary_id.clone(), i)).collect();
        Self { config, slot_probability, timelines, counties, truth, index }
    }

    pub fn truth_of(&self, beneficiary_id: &str) -> Option<&BeneficiaryTruth> {
        self.index.get(beneficiary_id).map(|&i| &self.truth[i])
    }

    pub fn chain_model(&self) -> ChainModel {
        self.config.chain_model(self.slot_probability)
    }

    pub fn n_claims(&self) -> usize {
        self.timelines.iter().map(|t| t.claims.len()).sum()
    }
}

/// Exact hazard used for `beneficiary_id` during generation.
pub fn ground_truth_risk(beneficiary_id: &str, cohort: &Cohort) -> Result<f64, SynthError> {
    cohort
        .truth_of(beneficiary_id)
        .map(|t| t.hazard)
        .ok_or_else(|| SynthError::UnknownBeneficiary(beneficiary_id.to_string()))
}

const GENDERS: [(&str, f64); 2] = [("F", 0.56), ("M", 0.44)];
const RACES: [(&str, f64); 5] = [("white", 0.80), ("black", 0.10), ("hispanic", 0.05), ("asian", 0.03), ("other", 0.02)];
const ENTITLEMENTS: [(&str, f64); 4] = [("OASI", 0.85), ("DIB", 0.12), ("ESRD", 0.02), ("DIB_ESRD", 0.01)];
const DISCHARGE: [(DischargeStatus, f64); 3] =
    [(DischargeStatus::Home, 0.75), (DischargeStatus::Transfer, 0.10), (DischargeStatus::Other, 0.15)];
const OTHER_TYPES: [(ClaimType, f64); 6] = [
    (ClaimType::Car, 0.45),
    (ClaimType::Out, 0.25),
    (ClaimType::Dme, 0.10),
    (ClaimType::Hha, 0.07),
    (ClaimType::Snf, 0.08),
    (ClaimType::Hosp, 0.05),
];
const SPECIALTIES: [&str; 12] = [
    "internal medicine",
    "family practice",
    "cardiology",
    "pulmonology",
    "nephrology",
    "oncology",
    "general surgery",
    "orthopedics",
    "radiology",
    "pathology",
    "emergency medicine",
    "geriatrics",
];
const TYPES_OF_SERVICE: [&str; 8] = ["1", "2", "3", "4", "5", "6", "7", "9"];
const PLACES_OF_SERVICE: [&str; 7] = ["11", "12", "21", "22", "23", "31", "81"];
const AGE_MEAN: f64 = 78.0;
const AGE_SD: f64 = 8.0;
const OBESITY_MEAN: f64 = 0.30;
const OBESITY_SD: f64 = 0.058;

fn weighted<'a, T>(rng: &mut ChaCha8Rng, table: &'a [(T, f64)]) -> &'a T {
    let mut u = rng.gen::<f64>();
    for (v, w) in table {
        if u < *w {
            return v;
        }
        u -= w;
    }
    &table[table.len() - 1].0
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    items.choose(rng).expect("non-empty table")
}

/// Per-beneficiary stream so output does not depend on thread count.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn county_id(i: usize) -> (String, String) {
    (format!("C{i:04}"), format!("S{:02}", i % 10))
}

fn generate_counties(config: &CohortConfig) -> Vec<CountyStats> {
    let mut rng = stream_rng(config.seed, u64::MAX);
    (0..config.n_counties)
        .map(|i| {
            let (county_id, state_id) = county_id(i);
            let mut indicators = std::collections::BTreeMap::new();
            let obesity = OBESITY_MEAN + OBESITY_SD * 3f64.sqrt() * rng.gen_range(-1.0..1.0);
            indicators.insert("obesity_rate".to_string(), Some((obesity * 1e4).round() / 1e4));
            indicators.insert("smoking_rate".to_string(), Some((rng.gen_range(0.08..0.28f64) * 1e4).round() / 1e4));
            indicators.insert("median_income".to_string(), Some(rng.gen_range(28_000..95_000) as f64));
            CountyStats { county_id, state_id, indicators }
        })
        .collect()
}

struct ClaimFactory<'a> {
    bene: &'a str,
    county: (&'a str, &'a str),
    next: usize,
}

impl ClaimFactory<'_> {
    fn base(&mut self, rng: &mut ChaCha8Rng, claim_type: ClaimType, service: Day) -> ClaimRecord {
        self.next += 1;
        let u = CodeUniverse::get();
        let n_px = rng.gen_range(1..=3);
        ClaimRecord {
            claim_id: format!("{}-{:02}", self.bene, self.next),
            beneficiary_id: self.bene.to_string(),
            claim_type,
            admission_date: None,
            discharge_date: None,
            service_date: service,
            diagnosis_codes: Vec::new(),
            procedure_codes: (0..n_px).map(|_| pick(rng, &u.hcpcs).clone()).collect(),
            discharge_status: None,
            provider_specialty: pick(rng, &SPECIALTIES).to_string(),
            type_of_service: pick(rng, &TYPES_OF_SERVICE).to_string(),
            place_of_service: pick(rng, &PLACES_OF_SERVICE).to_string(),
            payment_amount: 0.0,
            county_id: self.county.0.to_string(),
            state_id: self.county.1.to_string(),
            schema_era: SchemaEra::V2011,
            extra: Default::default(),
        }
    }
}

/// Log-uniform amount in dollars and cents.
fn payment(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let v = (rng.gen_range(lo.ln()..hi.ln())).exp();
    (v * 100.0).round() / 100.0
}

fn set_era(claim: &mut ClaimRecord, rng: &mut ChaCha8Rng) {
    let pre = claim.service_date.year() < V2011_FIRST_YEAR;
    claim.schema_era = if pre { SchemaEra::Pre2011 } else { SchemaEra::V2011 };
    let (util, physician) = if pre {
        ("clm_utlztn_day_cnt", "at_physn_upin")
    } else {
        ("utilization_days", "attending_physician")
    };
    if let Some(los) = claim.length_of_stay() {
        claim.extra.insert(util.to_string(), los.to_string());
    }
    claim.extra.insert(physician.to_string(), format!("P{:05}", rng.gen_range(0..20_000)));
}

fn generate_beneficiary(
    config: &CohortConfig,
    slot_probability: f64,
    counties: &[CountyStats],
    i: usize,
) -> (BeneficiaryTimeline, BeneficiaryTruth) {
    let mut rng = stream_rng(config.seed, i as u64);
    let u = CodeUniverse::get();
    let id = format!("{}{:07}", config.id_prefix, i);

    let age = (AGE_MEAN + AGE_SD * 3f64.sqrt() * rng.gen_range(-1.0..1.0)).max(65.0);
    let beneficiary = Beneficiary {
        beneficiary_id: id.clone(),
        date_of_birth: config.start.offset(-((age * 365.25) as i32)),
        gender: weighted(&mut rng, &GENDERS).to_string(),
        race: weighted(&mut rng, &RACES).to_string(),
        entitlement_reason: weighted(&mut rng, &ENTITLEMENTS).to_string(),
    };

    // a small share of beneficiaries live in counties missing from the census table
    let county_idx = if rng.gen::<f64>() < 0.03 { None } else { Some(rng.gen_range(0..counties.len())) };
    let (home_county, home_state) = match county_idx {
        Some(c) => (counties[c].county_id.clone(), counties[c].state_id.clone()),
        None => (format!("X{:04}", rng.gen_range(0..1000)), "S99".to_string()),
    };
    let obesity = county_idx
        .and_then(|c| counties[c].indicators.get("obesity_rate").copied().flatten())
        .unwrap_or(OBESITY_MEAN);

    let mut planted = Vec::new();
    let mut risky_count = 0u8;
    let mut observed = 0u8;
    for (slot, chapter) in RISKY_CHAPTERS.iter().enumerate() {
        if rng.gen::<f64>() < slot_probability {
            risky_count += 1;
            let shifted = rng.gen::<f64>() < config.shift_strength;
            let source = if shifted { SUBSTITUTE_CHAPTERS[slot] } else { chapter };
            if !shifted {
                observed += 1;
            }
            planted.push(pick(&mut rng, u.chapter(source)).clone());
        }
    }
    let z_age = (age - AGE_MEAN) / AGE_SD;
    let z_county = (obesity - OBESITY_MEAN) / OBESITY_SD;
    let hazard = sigmoid(
        logit(config.base_readmission_rate)
            + config.signal_strength * f64::from(risky_count)
            + config.demographic_weight * z_age
            + config.county_weight * z_county,
    );

    // inpatient chain in days relative to the first admission
    let mut stays: Vec<(i32, i32)> = Vec::new();
    let mut admission = 0;
    loop {
        let los = (1.0 - 3.0 * rng.gen::<f64>().max(1e-12).ln()).floor().min(30.0) as i32;
        stays.push((admission, admission + los));
        if stays.len() == config.max_inpatient_claims {
            break;
        }
        let discharge = admission + los;
        if rng.gen::<f64>() < hazard {
            admission = discharge + rng.gen_range(0..=30);
        } else if rng.gen::<f64>() < config.continue_probability {
            admission = discharge + rng.gen_range(NEGATIVE_GAP.0..=NEGATIVE_GAP.1);
        } else {
            break;
        }
    }
    let span = stays.last().map_or(0, |s| s.1);
    let range = config.end.days_since(config.start);
    let earliest = HISTORY_LEAD_DAYS.min(range);
    let latest = (range - span).max(earliest);
    let origin = config.start.offset(rng.gen_range(earliest..=latest));

    let mut factory = ClaimFactory { bene: &id, county: (&home_county, &home_state), next: 0 };
    let mut claims = Vec::new();
    let fillers = u.filler_chapters();
    for &(a, d) in &stays {
        let (adm, dis) = (origin.offset(a), origin.offset(d));
        if dis > config.end {
            break;
        }
        let mut c = factory.base(&mut rng, ClaimType::Inp, adm);
        c.admission_date = Some(adm);
        c.discharge_date = Some(dis);
        c.discharge_status = Some(*weighted(&mut rng, &DISCHARGE));
        c.payment_amount = payment(&mut rng, 3_000.0, 60_000.0);
        let mut dx = planted.clone();
        for _ in 0..rng.gen_range(1..=3) {
            let chapter = *pick(&mut rng, &fillers);
            dx.push(pick(&mut rng, chapter).clone());
        }
        dx.shuffle(&mut rng);
        c.diagnosis_codes = dx;
        c.procedure_codes.push(pick(&mut rng, &u.hcpcs).clone());
        set_era(&mut c, &mut rng);
        claims.push(c);
    }

    let first = origin.offset(-HISTORY_LEAD_DAYS).max(config.start);
    let last = origin.offset(span).min(config.end);
    let all: Vec<&[String]> = u.icd.iter().map(|(_, c)| c.as_slice()).collect();
    for _ in 0..rng.gen_range(0..=config.max_other_claims) {
        let day = config.start.offset(rng.gen_range(first.days_since(config.start)..=last.days_since(config.start)));
        let ty = *weighted(&mut rng, &OTHER_TYPES);
        let mut c = factory.base(&mut rng, ty, day);
        if matches!(ty, ClaimType::Snf | ClaimType::Hha | ClaimType::Hosp) {
            let end = day.offset(rng.gen_range(1..=20)).min(config.end);
            c.admission_date = Some(day);
            c.discharge_date = Some(end);
        }
        c.payment_amount = payment(&mut rng, 20.0, 5_000.0);
        c.diagnosis_codes = (0..rng.gen_range(1..=3))
            .map(|_| {
                let chapter = *pick(&mut rng, &all);
                pick(&mut rng, chapter).clone()
            })
            .collect();
        set_era(&mut c, &mut rng);
        claims.push(c);
    }

    let truth = BeneficiaryTruth {
        beneficiary_id: id,
        hazard,
        risky_count,
        observed_risky_count: observed,
        planted_codes: planted,
    };
    let timeline = BeneficiaryTimeline::new(beneficiary, claims).expect("claims carry the beneficiary id");
    (timeline, truth)
}

/// Deterministic in `config.seed`; beneficiaries are generated in parallel
/// from independent streams.
pub fn generate_cohort(config: &CohortConfig) -> Result<Cohort, SynthError> {
    config.validate()?;
    let p = config.slot_probability()?;
    let counties = generate_counties(config);
    let (timelines, truth): (Vec<_>, Vec<_>) = (0..config.n_beneficiaries)
        .into_par_iter()
        .map(|i| generate_beneficiary(config, p, &counties, i))
        .unzip();
    Ok(Cohort::new(config.clone(), p, timelines, counties, truth))
}
