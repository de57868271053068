#![allow(dead_code)]

use std::collections::BTreeMap;

use claimrisk::claims::{Beneficiary, ClaimRecord, ClaimType, Day, DischargeStatus, SchemaEra};
use rand::Rng;

pub fn beneficiary(id: &str) -> Beneficiary {
    Beneficiary {
        beneficiary_id: id.to_string(),
        date_of_birth: Day::from_ymd(1940, 6, 1).unwrap(),
        gender: "F".into(),
        race: "white".into(),
        entitlement_reason: "age".into(),
    }
}

pub fn claim(id: &str, bene: &str, ty: ClaimType, start: i32, end: Option<i32>) -> ClaimRecord {
    let inpatient = ty == ClaimType::Inp;
    ClaimRecord {
        claim_id: id.to_string(),
        beneficiary_id: bene.to_string(),
        claim_type: ty,
        admission_date: inpatient.then_some(Day(start)),
        discharge_date: end.map(Day),
        service_date: Day(start),
        diagnosis_codes: vec!["I10".into()],
        procedure_codes: Vec::new(),
        discharge_status: inpatient.then_some(DischargeStatus::Home),
        provider_specialty: "01".into(),
        type_of_service: "1".into(),
        place_of_service: "21".into(),
        payment_amount: 1000.0,
        county_id: "001".into(),
        state_id: "01".into(),
        schema_era: SchemaEra::V2011,
        extra: BTreeMap::new(),
    }
}

/// Random beneficiaries and claims in shuffled order. Admission dates are
/// packed densely so gaps near the 30-day edge, same-day readmissions,
/// overlaps and equal admission dates all occur.
pub fn random_claims<R: Rng>(rng: &mut R, max_inpatient: usize) -> (Vec<Beneficiary>, Vec<ClaimRecord>) {
    let n_bene = rng.gen_range(1..=60);
    let bens: Vec<Beneficiary> = (0..n_bene).map(|i| beneficiary(&format!("b{i:03}"))).collect();
    let n_inp = rng.gen_range(1..=max_inpatient);
    let mut claims = Vec::new();
    for i in 0..n_inp {
        let b = &bens[rng.gen_range(0..n_bene)].beneficiary_id;
        let start = rng.gen_range(0..400);
        let mut c = claim(&format!("c{i:05}"), b, ClaimType::Inp, start, Some(start + rng.gen_range(0..12)));
        if rng.gen_bool(0.3) {
            c.discharge_status = Some(DischargeStatus::Transfer);
        }
        claims.push(c);
    }
    for i in 0..rng.gen_range(0..n_inp) {
        let b = &bens[rng.gen_range(0..n_bene)].beneficiary_id;
        claims.push(claim(&format!("o{i:05}"), b, ClaimType::Car, rng.gen_range(0..400), None));
    }
    // shuffle
    for i in (1..claims.len()).rev() {
        let j = rng.gen_range(0..=i);
        claims.swap(i, j);
    }
    (bens, claims)
}

/// Pairwise reference labeler: for each inpatient claim, looks at every
/// other inpatient claim of the same beneficiary and keeps the earliest one
/// ordered after it by (admission date, claim id).
pub fn brute_force_labels(claims: &[ClaimRecord]) -> BTreeMap<String, u8> {
    let mut out = BTreeMap::new();
    for c in claims.iter().filter(|c| c.claim_type == ClaimType::Inp) {
        let key = (c.admission_date.unwrap(), c.claim_id.as_str());
        let mut next: Option<(Day, &str)> = None;
        for d in claims {
            if d.claim_type != ClaimType::Inp || d.beneficiary_id != c.beneficiary_id {
                continue;
            }
            let k = (d.admission_date.unwrap(), d.claim_id.as_str());
            if k > key && next.is_none_or(|n| k < n) {
                next = Some(k);
            }
        }
        let label = match next {
            None => 0,
            Some((adm, _)) => {
                let gap = adm.0 - c.discharge_date.unwrap().0;
                let transfer = c.discharge_status == Some(DischargeStatus::Transfer);
                u8::from(gap <= 30 || (transfer && gap == 0))
            }
        };
        out.insert(c.claim_id.clone(), label);
    }
    out
}
