//! Token strings for beneficiaries, counties and claims.

use crate::claims::{Beneficiary, ClaimRecord, CountyStats, Day};

use super::{group_hcpcs, group_icd, quantize, QuantizerSpec, VocabError};

pub const AGE_VAR: &str = "AGE";
pub const PAY_VAR: &str = "PAY";
pub const LOS_VAR: &str = "LOS";

/// `PREFIX_VALUE` with the value upper-cased and anything outside
/// `[A-Z0-9.-]` replaced by `-`. Empty values become `PREFIX_NA`.
pub fn categorical_token(prefix: &str, value: &str) -> String {
    let value = value.trim();
    if value.is_empty() {
        return format!("{prefix}_NA");
    }
    let clean: String = value
        .chars()
        .map(|c| {
            let c = c.to_ascii_uppercase();
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '-'
            }
        })
        .collect();
    format!("{prefix}_{clean}")
}

/// Quantizer variable name for a county indicator: `obesity_rate` -> `OBESITY-RATE`.
pub fn county_variable(indicator: &str) -> String {
    indicator.to_ascii_uppercase().replace('_', "-")
}

pub fn age_years(date_of_birth: Day, at: Day) -> f64 {
    f64::from(at.days_since(date_of_birth)) / 365.25
}

pub fn personal_tokens(
    beneficiary: &Beneficiary,
    at: Day,
    quantizer: &QuantizerSpec,
) -> Result<Vec<String>, VocabError> {
    Ok(vec![
        quantize(AGE_VAR, age_years(beneficiary.date_of_birth, at), quantizer)?,
        categorical_token("GENDER", &beneficiary.gender),
        categorical_token("RACE", &beneficiary.race),
        categorical_token("ENTITLE", &beneficiary.entitlement_reason),
    ])
}

/// One token per indicator in name order; unknown indicators give `<VAR>_UNK`.
pub fn county_tokens(county: &CountyStats, quantizer: &QuantizerSpec) -> Result<Vec<String>, VocabError> {
    county
        .indicators
        .iter()
        .map(|(name, value)| {
            let var = county_variable(name);
            match value {
                Some(v) => quantize(&var, *v, quantizer),
                None => Ok(format!("{var}_UNK")),
            }
        })
        .collect()
}

fn push_unique(out: &mut Vec<String>, start: usize, token: String) {
    if !out[start..].contains(&token) {
        out.push(token);
    }
}

/// Claim type, grouped diagnosis and procedure codes (each group once),
/// provider and service categoricals, payment bin, and for inpatient claims
/// the length-of-stay bin and discharge status.
pub fn claim_tokens(claim: &ClaimRecord, quantizer: &QuantizerSpec) -> Result<Vec<String>, VocabError> {
    let mut out = vec![categorical_token("CLAIM", claim.claim_type.as_str())];
    let start = out.len();
    for code in &claim.diagnosis_codes {
        push_unique(&mut out, start, group_icd(code));
    }
    let start = out.len();
    for code in &claim.procedure_codes {
        push_unique(&mut out, start, group_hcpcs(code));
    }
    out.push(categorical_token("SPEC", &claim.provider_specialty));
    out.push(categorical_token("TOS", &claim.type_of_service));
    out.push(categorical_token("POS", &claim.place_of_service));
    out.push(quantize(PAY_VAR, claim.payment_amount, quantizer)?);
    if claim.is_inpatient() {
        if let Some(los) = claim.length_of_stay() {
            out.push(quantize(LOS_VAR, f64::from(los), quantizer)?);
        }
        out.push(categorical_token("DISCH", claim.discharge_status.map_or("", |s| s.as_str())));
    }
    Ok(out)
}

/// Ungrouped `VARIABLE=value` strings of a claim, the pre-compression view.
pub fn raw_claim_strings(claim: &ClaimRecord) -> Vec<String> {
    let mut out = vec![format!("TYPE={}", claim.claim_type)];
    out.extend(claim.diagnosis_codes.iter().map(|c| format!("DX={c}")));
    out.extend(claim.procedure_codes.iter().map(|c| format!("PX={c}")));
    out.push(format!("SPEC={}", claim.provider_specialty));
    out.push(format!("TOS={}", claim.type_of_service));
    out.push(format!("POS={}", claim.place_of_service));
    out.push(format!("PAY={}", claim.payment_amount));
    if let Some(los) = claim.length_of_stay() {
        out.push(format!("LOS={los}"));
    }
    if let Some(s) = claim.discharge_status {
        out.push(format!("DISCH={s}"));
    }
    out
}

pub fn raw_personal_strings(beneficiary: &Beneficiary) -> Vec<String> {
    vec![
        format!("DOB={}", beneficiary.date_of_birth),
        format!("GENDER={}", beneficiary.gender),
        format!("RACE={}", beneficiary.race),
        format!("ENTITLE={}", beneficiary.entitlement_reason),
    ]
}

pub fn raw_county_strings(county: &CountyStats) -> Vec<String> {
    county
        .indicators
        .iter()
        .map(|(name, v)| match v {
            Some(v) => format!("{name}={v}"),
            None => format!("{name}=UNK"),
        })
        .collect()
}
