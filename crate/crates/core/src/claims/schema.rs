use std::collections::BTreeMap;

use super::{ClaimRecord, ClaimsError, SchemaEra};

const DEFAULT_ALIASES: &str = include_str!("../../data/schema_aliases.csv");

/// Static pre2011 -> v2011 field rename map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AliasTable {
    to_v2011: BTreeMap<String, String>,
    to_pre2011: BTreeMap<String, String>,
}

impl Default for AliasTable {
    fn default() -> Self {
        Self::parse(DEFAULT_ALIASES).expect("bundled alias table is well formed")
    }
}

impl AliasTable {
    /// Parses `pre2011,v2011` lines with a header row.
    pub fn parse(text: &str) -> Result<Self, ClaimsError> {
        let mut to_v2011 = BTreeMap::new();
        let mut to_pre2011 = BTreeMap::new();
        for (row, line) in text.lines().enumerate().skip(1) {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((old, new)) = line.split_once(',') else {
                return Err(ClaimsError::InvalidValue { row, field: "alias".into(), value: line.into() });
            };
            if to_v2011.insert(old.to_string(), new.to_string()).is_some()
                || to_pre2011.insert(new.to_string(), old.to_string()).is_some()
            {
                return Err(ClaimsError::DuplicateKey(line.to_string()));
            }
        }
        Ok(Self { to_v2011, to_pre2011 })
    }

    pub fn v2011_name<'a>(&'a self, pre2011: &str) -> Option<&'a str> {
        self.to_v2011.get(pre2011).map(String::as_str)
    }

    pub fn pre2011_name<'a>(&'a self, v2011: &str) -> Option<&'a str> {
        self.to_pre2011.get(v2011).map(String::as_str)
    }
}

/// Converts every record to the v2011 schema, renaming pre2011 fields.
pub fn consolidate_schema(records: Vec<ClaimRecord>, aliases: &AliasTable) -> Result<Vec<ClaimRecord>, ClaimsError> {
    records
        .into_iter()
        .map(|mut r| {
            if r.schema_era == SchemaEra::V2011 {
                return Ok(r);
            }
            let mut renamed = BTreeMap::new();
            for (field, value) in std::mem::take(&mut r.extra) {
                let Some(new) = aliases.v2011_name(&field) else {
                    return Err(ClaimsError::UnmappableField { claim_id: r.claim_id.clone(), field });
                };
                renamed.insert(new.to_string(), value);
            }
            r.extra = renamed;
            r.schema_era = SchemaEra::V2011;
            Ok(r)
        })
        .collect()
}
