//! Comma-delimited claim, beneficiary and county files.
//!
//! Code lists are pipe-delimited inside a single field; dates are ISO-8601.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{
    indicator_in_range, AliasTable, Beneficiary, ClaimRecord, ClaimType, ClaimsError, CountyStats, Day,
    SchemaEra,
};

/// Core claim columns under their v2011 names, in file order.
pub const CORE_COLUMNS: [&str; 14] = [
    "claim_id",
    "beneficiary_id",
    "admission_date",
    "discharge_date",
    "service_date",
    "diagnosis_codes",
    "procedure_codes",
    "discharge_status",
    "provider_specialty",
    "type_of_service",
    "place_of_service",
    "payment_amount",
    "county_id",
    "state_id",
];

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> ClaimsError + '_ {
    move |source| ClaimsError::Csv { path: path.to_path_buf(), source }
}

fn column_name<'a>(column: &'a str, era: SchemaEra, aliases: &'a AliasTable) -> &'a str {
    match era {
        SchemaEra::V2011 => column,
        SchemaEra::Pre2011 => aliases.pre2011_name(column).unwrap_or(column),
    }
}

struct Row<'a> {
    index: usize,
    record: &'a csv::StringRecord,
}

impl Row<'_> {
    fn get(&self, col: usize) -> &str {
        self.record.get(col).unwrap_or("").trim()
    }

    fn required(&self, col: usize, field: &str) -> Result<String, ClaimsError> {
        let v = self.get(col);
        if v.is_empty() {
            return Err(ClaimsError::MissingValue { row: self.index, field: field.into() });
        }
        Ok(v.to_string())
    }

    fn date(&self, col: usize, field: &str) -> Result<Option<Day>, ClaimsError> {
        let v = self.get(col);
        if v.is_empty() {
            return Ok(None);
        }
        v.parse().map(Some).map_err(|_| ClaimsError::UnparsableDate {
            row: self.index,
            field: field.into(),
            value: v.into(),
        })
    }

    fn parsed<T: std::str::FromStr>(&self, col: usize, field: &str) -> Result<T, ClaimsError> {
        let v = self.get(col);
        v.parse().map_err(|_| ClaimsError::InvalidValue { row: self.index, field: field.into(), value: v.into() })
    }
}

fn split_codes(field: &str) -> Vec<String> {
    field.split('|').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

/// Reads one claim file of a single claim type and schema era.
pub fn parse_claim_file(path: &Path, claim_type: ClaimType, era: SchemaEra) -> Result<Vec<ClaimRecord>, ClaimsError> {
    let file = File::open(path)?;
    parse_claims(file, path, claim_type, era, &AliasTable::default())
}

pub(crate) fn parse_claims(
    reader: impl Read,
    path: &Path,
    claim_type: ClaimType,
    era: SchemaEra,
    aliases: &AliasTable,
) -> Result<Vec<ClaimRecord>, ClaimsError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(reader);
    let headers = rdr.headers().map_err(csv_err(path))?.clone();
    let position = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut cols = [0usize; CORE_COLUMNS.len()];
    for (slot, column) in cols.iter_mut().zip(CORE_COLUMNS) {
        let name = column_name(column, era, aliases);
        *slot = position(name).or_else(|| position(column)).ok_or_else(|| ClaimsError::MissingColumn {
            path: path.to_path_buf(),
            column: name.to_string(),
        })?;
    }
    let core: HashSet<usize> = cols.iter().copied().collect();
    let extra_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| !core.contains(i))
        .map(|(i, h)| (i, h.trim().to_string()))
        .collect();

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, result) in rdr.records().enumerate() {
        let record = result.map_err(csv_err(path))?;
        let row = Row { index: i + 1, record: &record };
        let [c_id, c_bene, c_adm, c_dis, c_svc, c_dx, c_px, c_status, c_spec, c_tos, c_pos, c_pay, c_county, c_state] =
            cols;

        let claim_id = row.required(c_id, "claim_id")?;
        let beneficiary_id = row.required(c_bene, "beneficiary_id")?;
        let admission_date = row.date(c_adm, "admission_date")?;
        let discharge_date = row.date(c_dis, "discharge_date")?;
        let service_date =
            row.date(c_svc, "service_date")?.ok_or(ClaimsError::MissingValue { row: row.index, field: "service_date".into() })?;
        if claim_type == ClaimType::Inp {
            if admission_date.is_none() {
                return Err(ClaimsError::MissingValue { row: row.index, field: "admission_date".into() });
            }
            if discharge_date.is_none() {
                return Err(ClaimsError::MissingValue { row: row.index, field: "discharge_date".into() });
            }
        }
        if let (Some(a), Some(d)) = (admission_date, discharge_date) {
            if d < a {
                return Err(ClaimsError::InvalidInterval { row: row.index, field: "discharge_date".into() });
            }
        }
        let discharge_status =
            if row.get(c_status).is_empty() { None } else { Some(row.parsed(c_status, "discharge_status")?) };
        let payment_amount: f64 = row.parsed(c_pay, "payment_amount")?;
        if !payment_amount.is_finite() {
            return Err(ClaimsError::InvalidValue {
                row: row.index,
                field: "payment_amount".into(),
                value: row.get(c_pay).into(),
            });
        }
        if payment_amount < 0.0 {
            return Err(ClaimsError::NegativeAmount {
                row: row.index,
                field: "payment_amount".into(),
                value: row.get(c_pay).into(),
            });
        }
        if !seen.insert(claim_id.clone()) {
            return Err(ClaimsError::DuplicateClaimId { row: row.index, claim_id });
        }
        let extra = extra_cols
            .iter()
            .filter(|(c, _)| !row.get(*c).is_empty())
            .map(|(c, name)| (name.clone(), row.get(*c).to_string()))
            .collect();
        out.push(ClaimRecord {
            claim_id,
            beneficiary_id,
            claim_type,
            admission_date,
            discharge_date,
            service_date,
            diagnosis_codes: split_codes(row.get(c_dx)),
            procedure_codes: split_codes(row.get(c_px)),
            discharge_status,
            provider_specialty: row.get(c_spec).to_string(),
            type_of_service: row.get(c_tos).to_string(),
            place_of_service: row.get(c_pos).to_string(),
            payment_amount,
            county_id: row.get(c_county).to_string(),
            state_id: row.get(c_state).to_string(),
            schema_era: era,
            extra,
        });
    }
    Ok(out)
}

fn opt_day(d: Option<Day>) -> String {
    d.map(|d| d.to_string()).unwrap_or_default()
}

/// Writes records in the header vocabulary of `era`. Extra columns are the
/// sorted union of every record's extra fields.
pub fn write_claim_file(path: &Path, records: &[ClaimRecord], era: SchemaEra) -> Result<(), ClaimsError> {
    let mut buf = Vec::new();
    write_claims(&mut buf, path, records, era, &AliasTable::default())?;
    File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub(crate) fn write_claims(
    writer: impl Write,
    path: &Path,
    records: &[ClaimRecord],
    era: SchemaEra,
    aliases: &AliasTable,
) -> Result<(), ClaimsError> {
    let extras: BTreeSet<&str> = records.iter().flat_map(|r| r.extra.keys().map(String::as_str)).collect();
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = CORE_COLUMNS.iter().map(|c| column_name(c, era, aliases)).collect();
    header.extend(extras.iter().copied());
    w.write_record(&header).map_err(csv_err(path))?;
    for r in records {
        let mut fields = vec![
            r.claim_id.clone(),
            r.beneficiary_id.clone(),
            opt_day(r.admission_date),
            opt_day(r.discharge_date),
            r.service_date.to_string(),
            r.diagnosis_codes.join("|"),
            r.procedure_codes.join("|"),
            r.discharge_status.map(|s| s.to_string()).unwrap_or_default(),
            r.provider_specialty.clone(),
            r.type_of_service.clone(),
            r.place_of_service.clone(),
            r.payment_amount.to_string(),
            r.county_id.clone(),
            r.state_id.clone(),
        ];
        fields.extend(extras.iter().map(|k| r.extra.get(*k).cloned().unwrap_or_default()));
        w.write_record(&fields).map_err(csv_err(path))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_beneficiaries(path: &Path) -> Result<Vec<Beneficiary>, ClaimsError> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let headers = rdr.headers().map_err(csv_err(path))?.clone();
    let cols = ["beneficiary_id", "date_of_birth", "gender", "race", "entitlement_reason"].map(|name| {
        headers.iter().position(|h| h == name).ok_or_else(|| ClaimsError::MissingColumn {
            path: path.to_path_buf(),
            column: name.to_string(),
        })
    });
    let [c_id, c_dob, c_gender, c_race, c_ent] = cols;
    let (c_id, c_dob, c_gender, c_race, c_ent) = (c_id?, c_dob?, c_gender?, c_race?, c_ent?);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, result) in rdr.records().enumerate() {
        let record = result.map_err(csv_err(path))?;
        let row = Row { index: i + 1, record: &record };
        let id = row.required(c_id, "beneficiary_id")?;
        if !seen.insert(id.clone()) {
            return Err(ClaimsError::DuplicateKey(format!("beneficiary_id {id}")));
        }
        out.push(Beneficiary {
            beneficiary_id: id,
            date_of_birth: row
                .date(c_dob, "date_of_birth")?
                .ok_or(ClaimsError::MissingValue { row: row.index, field: "date_of_birth".into() })?,
            gender: row.get(c_gender).to_string(),
            race: row.get(c_race).to_string(),
            entitlement_reason: row.get(c_ent).to_string(),
        });
    }
    Ok(out)
}

pub fn write_beneficiaries(path: &Path, beneficiaries: &[Beneficiary]) -> Result<(), ClaimsError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["beneficiary_id", "date_of_birth", "gender", "race", "entitlement_reason"])
        .map_err(csv_err(path))?;
    for b in beneficiaries {
        w.write_record([
            b.beneficiary_id.as_str(),
            &b.date_of_birth.to_string(),
            &b.gender,
            &b.race,
            &b.entitlement_reason,
        ])
        .map_err(csv_err(path))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `county_id,state_id,<indicator>...`; every indicator must be present and in range.
pub fn read_counties(path: &Path) -> Result<Vec<CountyStats>, ClaimsError> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let headers = rdr.headers().map_err(csv_err(path))?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| ClaimsError::MissingColumn {
            path: path.to_path_buf(),
            column: name.to_string(),
        })
    };
    let (c_county, c_state) = (find("county_id")?, find("state_id")?);
    let indicator_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != c_county && *i != c_state)
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, result) in rdr.records().enumerate() {
        let record = result.map_err(csv_err(path))?;
        let row = Row { index: i + 1, record: &record };
        let county_id = row.required(c_county, "county_id")?;
        let state_id = row.required(c_state, "state_id")?;
        if !seen.insert((county_id.clone(), state_id.clone())) {
            return Err(ClaimsError::DuplicateKey(format!("county {state_id}/{county_id}")));
        }
        let mut indicators = BTreeMap::new();
        for (c, name) in &indicator_cols {
            let v: f64 = row.parsed(*c, name)?;
            if !indicator_in_range(name, v) {
                return Err(ClaimsError::InvalidValue { row: row.index, field: name.clone(), value: row.get(*c).into() });
            }
            indicators.insert(name.clone(), Some(v));
        }
        out.push(CountyStats { county_id, state_id, indicators });
    }
    Ok(out)
}

pub fn write_counties(path: &Path, counties: &[CountyStats]) -> Result<(), ClaimsError> {
    let names: BTreeSet<&str> = counties.iter().flat_map(|c| c.indicators.keys().map(String::as_str)).collect();
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header = vec!["county_id", "state_id"];
    header.extend(names.iter().copied());
    w.write_record(&header).map_err(csv_err(path))?;
    for c in counties {
        let mut fields = vec![c.county_id.clone(), c.state_id.clone()];
        fields.extend(names.iter().map(|n| {
            c.indicators.get(*n).copied().flatten().map(|v| v.to_string()).unwrap_or_default()
        }));
        w.write_record(&fields).map_err(csv_err(path))?;
    }
    w.flush()?;
    Ok(())
}
