//! Canonical claims data model.
//!
//! One [`ClaimRecord`] per claim event, one [`Beneficiary`] per person and a
//! county indicator table. Dates are whole days since 1970-01-01.

mod census;
mod io;
mod schema;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use census::join_census;
pub use io::{
    parse_claim_file, read_beneficiaries, read_counties, write_beneficiaries, write_claim_file,
    write_counties, CORE_COLUMNS,
};
pub use schema::{consolidate_schema, AliasTable};

#[derive(Debug, Error)]
pub enum ClaimsError {
    #[error("{path}: missing column {column}")]
    MissingColumn { path: PathBuf, column: String },
    #[error("row {row}: field {field}: unparsable date {value:?}")]
    UnparsableDate { row: usize, field: String, value: String },
    #[error("row {row}: field {field}: discharge precedes admission")]
    InvalidInterval { row: usize, field: String },
    #[error("row {row}: field {field}: negative amount {value}")]
    NegativeAmount { row: usize, field: String, value: String },
    #[error("row {row}: field {field}: required value missing")]
    MissingValue { row: usize, field: String },
    #[error("row {row}: field {field}: invalid value {value:?}")]
    InvalidValue { row: usize, field: String, value: String },
    #[error("row {row}: duplicate claim id {claim_id}")]
    DuplicateClaimId { row: usize, claim_id: String },
    #[error("claim {claim_id}: field {field} has no entry in the alias table")]
    UnmappableField { claim_id: String, field: String },
    #[error("timeline for {expected} contains a claim of {found}")]
    MixedBeneficiary { expected: String, found: String },
    #[error("claim {claim_id} references unknown beneficiary {beneficiary_id}")]
    UnknownBeneficiary { claim_id: String, beneficiary_id: String },
    #[error("duplicate key {0}")]
    DuplicateKey(String),
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Calendar day as a count of days since 1970-01-01.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Day(pub i32);

impl Day {
    fn epoch() -> NaiveDate {
        NaiveDate::from_ymd_opt(1970, 1, 1).unwrap()
    }

    pub fn from_ymd(year: i32, month: u32, day: u32) -> Option<Self> {
        NaiveDate::from_ymd_opt(year, month, day).map(Self::from_date)
    }

    pub fn from_date(date: NaiveDate) -> Self {
        Day((date - Self::epoch()).num_days() as i32)
    }

    pub fn to_date(self) -> NaiveDate {
        Self::epoch() + chrono::Duration::days(self.0 as i64)
    }

    pub fn year(self) -> i32 {
        self.to_date().year()
    }

    pub fn days_since(self, earlier: Day) -> i32 {
        self.0 - earlier.0
    }

    pub fn offset(self, days: i32) -> Day {
        Day(self.0 + days)
    }
}

impl fmt::Display for Day {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_date().format("%Y-%m-%d"))
    }
}

impl FromStr for Day {
    type Err = chrono::ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").map(Day::from_date)
    }
}

macro_rules! text_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!("unknown {} {other:?}", stringify!($name))),
                }
            }
        }
    };
}

text_enum!(ClaimType {
    Dme => "DME",
    Car => "CAR",
    Hha => "HHA",
    Hosp => "HOSP",
    Inp => "INP",
    Out => "OUT",
    Snf => "SNF",
});

text_enum!(SchemaEra {
    Pre2011 => "pre2011",
    V2011 => "v2011",
});

text_enum!(DischargeStatus {
    Home => "home",
    Transfer => "transfer",
    Expired => "expired",
    Other => "other",
});

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaimRecord {
    pub claim_id: String,
    pub beneficiary_id: String,
    pub claim_type: ClaimType,
    pub admission_date: Option<Day>,
    pub discharge_date: Option<Day>,
    pub service_date: Day,
    pub diagnosis_codes: Vec<String>,
    pub procedure_codes: Vec<String>,
    pub discharge_status: Option<DischargeStatus>,
    pub provider_specialty: String,
    pub type_of_service: String,
    pub place_of_service: String,
    pub payment_amount: f64,
    pub county_id: String,
    pub state_id: String,
    pub schema_era: SchemaEra,
    /// Non-core columns keyed by their era-specific field name.
    pub extra: BTreeMap<String, String>,
}

impl ClaimRecord {
    /// Date used for ordering: admission when present, else service date.
    pub fn event_date(&self) -> Day {
        self.admission_date.unwrap_or(self.service_date)
    }

    /// Latest date any information on this claim refers to.
    pub fn last_date(&self) -> Day {
        self.discharge_date.unwrap_or(self.service_date).max(self.event_date())
    }

    pub fn sort_key(&self) -> (Day, &str) {
        (self.event_date(), self.claim_id.as_str())
    }

    pub fn is_inpatient(&self) -> bool {
        self.claim_type == ClaimType::Inp
    }

    pub fn length_of_stay(&self) -> Option<i32> {
        Some(self.discharge_date?.days_since(self.admission_date?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Beneficiary {
    pub beneficiary_id: String,
    pub date_of_birth: Day,
    pub gender: String,
    pub race: String,
    pub entitlement_reason: String,
}

/// County-level indicators. `None` marks an indicator as unknown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountyStats {
    pub county_id: String,
    pub state_id: String,
    pub indicators: BTreeMap<String, Option<f64>>,
}

pub const UNKNOWN_COUNTY: &str = "UNKNOWN";

impl CountyStats {
    /// Sentinel for a beneficiary whose county has no census row.
    pub fn unknown<'a>(indicator_names: impl IntoIterator<Item = &'a str>) -> Self {
        Self {
            county_id: UNKNOWN_COUNTY.to_string(),
            state_id: UNKNOWN_COUNTY.to_string(),
            indicators: indicator_names.into_iter().map(|n| (n.to_string(), None)).collect(),
        }
    }

    pub fn is_unknown(&self) -> bool {
        self.county_id == UNKNOWN_COUNTY && self.indicators.values().all(Option::is_none)
    }

    pub fn key(&self) -> (&str, &str) {
        (&self.county_id, &self.state_id)
    }
}

/// Checks the value range of a named indicator: rates lie in [0, 1], everything else is non-negative.
pub fn indicator_in_range(name: &str, value: f64) -> bool {
    if !value.is_finite() {
        return false;
    }
    if name.ends_with("_rate") {
        (0.0..=1.0).contains(&value)
    } else {
        value >= 0.0
    }
}

/// All claims of one beneficiary in ascending `(event date, claim id)` order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeneficiaryTimeline {
    pub beneficiary: Beneficiary,
    pub claims: Vec<ClaimRecord>,
}

impl BeneficiaryTimeline {
    pub fn new(beneficiary: Beneficiary, mut claims: Vec<ClaimRecord>) -> Result<Self, ClaimsError> {
        if let Some(c) = claims.iter().find(|c| c.beneficiary_id != beneficiary.beneficiary_id) {
            return Err(ClaimsError::MixedBeneficiary {
                expected: beneficiary.beneficiary_id.clone(),
                found: c.beneficiary_id.clone(),
            });
        }
        claims.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        Ok(Self { beneficiary, claims })
    }

    pub fn id(&self) -> &str {
        &self.beneficiary.beneficiary_id
    }

    pub fn is_sorted(&self) -> bool {
        self.claims.windows(2).all(|w| w[0].sort_key() <= w[1].sort_key())
    }

    pub fn inpatient_claims(&self) -> impl Iterator<Item = &ClaimRecord> {
        self.claims.iter().filter(|c| c.is_inpatient())
    }

    pub fn claim(&self, claim_id: &str) -> Option<&ClaimRecord> {
        self.claims.iter().find(|c| c.claim_id == claim_id)
    }
}

/// Groups claims under their beneficiaries; output follows the beneficiary order given.
pub fn build_timelines(
    beneficiaries: Vec<Beneficiary>,
    claims: Vec<ClaimRecord>,
) -> Result<Vec<BeneficiaryTimeline>, ClaimsError> {
    let index: BTreeMap<String, usize> = beneficiaries
        .iter()
        .enumerate()
        .map(|(i, b)| (b.beneficiary_id.clone(), i))
        .collect();
    if index.len() != beneficiaries.len() {
        return Err(ClaimsError::DuplicateKey("beneficiary_id".into()));
    }
    let mut grouped: Vec<Vec<ClaimRecord>> = vec![Vec::new(); beneficiaries.len()];
    for c in claims {
        let Some(&i) = index.get(&c.beneficiary_id) else {
            return Err(ClaimsError::UnknownBeneficiary {
                claim_id: c.claim_id,
                beneficiary_id: c.beneficiary_id,
            });
        };
        grouped[i].push(c);
    }
    beneficiaries
        .into_iter()
        .zip(grouped)
        .map(|(b, cs)| BeneficiaryTimeline::new(b, cs))
        .collect()
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn beneficiary(id: &str) -> Beneficiary {
        Beneficiary {
            beneficiary_id: id.into(),
            date_of_birth: Day::from_ymd(1940, 5, 17).unwrap(),
            gender: "F".into(),
            race: "white".into(),
            entitlement_reason: "OASI".into(),
        }
    }

    pub fn claim(id: &str, bene: &str, ty: ClaimType, start: i32, end: Option<i32>) -> ClaimRecord {
        let facility = end.is_some();
        ClaimRecord {
            claim_id: id.into(),
            beneficiary_id: bene.into(),
            claim_type: ty,
            admission_date: facility.then_some(Day(start)),
            discharge_date: end.map(Day),
            service_date: Day(start),
            diagnosis_codes: vec!["410.01".into(), "250.00".into()],
            procedure_codes: vec!["99213".into()],
            discharge_status: (ty == ClaimType::Inp).then_some(DischargeStatus::Home),
            provider_specialty: "11".into(),
            type_of_service: "1".into(),
            place_of_service: "21".into(),
            payment_amount: 1234.5,
            county_id: "001".into(),
            state_id: "10".into(),
            schema_era: SchemaEra::V2011,
            extra: BTreeMap::new(),
        }
    }
}
