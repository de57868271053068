//! Cohort directories: one claim file per (type, era), plus the beneficiary
//! and county tables and a ground-truth sidecar for tests.

use std::collections::BTreeMap;
use std::path::Path;

use crate::claims::{
    build_timelines, consolidate_schema, parse_claim_file, read_beneficiaries, read_counties, write_beneficiaries,
    write_claim_file, write_counties, AliasTable, BeneficiaryTimeline, ClaimRecord, ClaimType, CountyStats, SchemaEra,
};

use super::{BeneficiaryTruth, Cohort, SynthError};

pub const BENEFICIARY_FILE: &str = "beneficiaries.csv";
pub const COUNTY_FILE: &str = "counties.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const COHORT_META_FILE: &str = "cohort.json";

fn claim_file_name(ty: ClaimType, era: SchemaEra) -> String {
    format!("claims_{ty}_{era}.csv")
}

fn parse_claim_file_name(name: &str) -> Option<(ClaimType, SchemaEra)> {
    let (ty, era) = name.strip_prefix("claims_")?.strip_suffix(".csv")?.split_once('_')?;
    Some((ty.parse().ok()?, era.parse().ok()?))
}

/// Writes every table of `cohort` into `dir`, returning the file names written.
pub fn write_cohort(dir: &Path, cohort: &Cohort) -> Result<Vec<String>, SynthError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let beneficiaries: Vec<_> = cohort.timelines.iter().map(|t| t.beneficiary.clone()).collect();
    write_beneficiaries(&dir.join(BENEFICIARY_FILE), &beneficiaries)?;
    written.push(BENEFICIARY_FILE.to_string());
    write_counties(&dir.join(COUNTY_FILE), &cohort.counties)?;
    written.push(COUNTY_FILE.to_string());

    let mut groups: BTreeMap<(ClaimType, SchemaEra), Vec<ClaimRecord>> = BTreeMap::new();
    for c in cohort.timelines.iter().flat_map(|t| &t.claims) {
        groups.entry((c.claim_type, c.schema_era)).or_default().push(c.clone());
    }
    for ((ty, era), records) in &groups {
        let name = claim_file_name(*ty, *era);
        write_claim_file(&dir.join(&name), records, *era)?;
        written.push(name);
    }

    let mut w = csv::Writer::from_path(dir.join(GROUND_TRUTH_FILE)).map_err(|e| SynthError::Format(e.to_string()))?;
    let csv_err = |e: csv::Error| SynthError::Format(e.to_string());
    w.write_record(["beneficiary_id", "hazard", "risky_count", "observed_risky_count", "planted_codes"])
        .map_err(csv_err)?;
    for t in &cohort.truth {
        w.write_record([
            t.beneficiary_id.clone(),
            format!("{:?}", t.hazard),
            t.risky_count.to_string(),
            t.observed_risky_count.to_string(),
            t.planted_codes.join("|"),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    written.push(GROUND_TRUTH_FILE.to_string());

    let meta = serde_json::json!({
        "config": cohort.config,
        "slot_probability": cohort.slot_probability,
        "bayes_auc": cohort.chain_model().bayes_auc(),
        "shifted_auc": cohort.chain_model().auc(cohort.config.shift_strength),
    });
    std::fs::write(dir.join(COHORT_META_FILE), serde_json::to_string_pretty(&meta).expect("plain json"))?;
    written.push(COHORT_META_FILE.to_string());
    Ok(written)
}

/// Reads every claim file in `dir`, consolidates them to the v2011 schema and
/// groups them into timelines in beneficiary-file order.
pub fn load_cohort_dir(dir: &Path) -> Result<(Vec<BeneficiaryTimeline>, Vec<CountyStats>), SynthError> {
    let beneficiaries = read_beneficiaries(&dir.join(BENEFICIARY_FILE))?;
    let counties = read_counties(&dir.join(COUNTY_FILE))?;
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| parse_claim_file_name(n).is_some())
        .collect();
    names.sort();
    let mut claims = Vec::new();
    for name in &names {
        let (ty, era) = parse_claim_file_name(name).expect("filtered above");
        claims.extend(parse_claim_file(&dir.join(name), ty, era)?);
    }
    let claims = consolidate_schema(claims, &AliasTable::default())?;
    Ok((build_timelines(beneficiaries, claims)?, counties))
}

pub fn read_ground_truth(dir: &Path) -> Result<Vec<BeneficiaryTruth>, SynthError> {
    let path = dir.join(GROUND_TRUTH_FILE);
    let mut r = csv::Reader::from_path(&path).map_err(|e| SynthError::Format(e.to_string()))?;
    let bad = |row: usize| SynthError::Format(format!("{}: row {row} is malformed", path.display()));
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| SynthError::Format(e.to_string()))?;
        if rec.len() != 5 {
            return Err(bad(i + 1));
        }
        out.push(BeneficiaryTruth {
            beneficiary_id: rec[0].to_string(),
            hazard: rec[1].parse().map_err(|_| bad(i + 1))?,
            risky_count: rec[2].parse().map_err(|_| bad(i + 1))?,
            observed_risky_count: rec[3].parse().map_err(|_| bad(i + 1))?,
            planted_codes: rec[4].split('|').filter(|s| !s.is_empty()).map(str::to_string).collect(),
        });
    }
    Ok(out)
}
