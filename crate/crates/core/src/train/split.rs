use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainError;

pub const MIN_BENEFICIARIES: usize = 10;
pub const DEFAULT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validate,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validate, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validate => "validate",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL.into_iter().find(|x| x.as_str() == s).ok_or_else(|| format!("unknown split {s:?}"))
    }
}

/// Beneficiary id -> split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn get(&self, beneficiary_id: &str) -> Option<Split> {
        self.assignment.get(beneficiary_id).copied()
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignment.values().filter(|s| **s == split).count()
    }

    pub fn members(&self, split: Split) -> impl Iterator<Item = &str> {
        self.assignment.iter().filter(move |(_, s)| **s == split).map(|(id, _)| id.as_str())
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }
}

fn seeded_hash(seed: u64, id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    h.finalize().into()
}

/// Ranks beneficiaries by a seeded SHA-256 of their id and cuts the ranking
/// at the cumulative ratios (rounded to the nearest beneficiary). The result
/// depends only on the id set and the seed, not on input order.
pub fn split_by_beneficiary<'a>(
    ids: impl IntoIterator<Item = &'a str>,
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitAssignment, TrainError> {
    let mut unique: Vec<&str> = ids.into_iter().collect();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() < MIN_BENEFICIARIES {
        return Err(TrainError::TooFewBeneficiaries(unique.len()));
    }
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) || total <= 0.0 {
        return Err(TrainError::InvalidConfig(format!("bad split ratios {ratios:?}")));
    }
    let hashes: HashMap<&str, [u8; 32]> = unique.iter().map(|id| (*id, seeded_hash(seed, id))).collect();
    unique.sort_by(|a, b| hashes[a].cmp(&hashes[b]).then_with(|| a.cmp(b)));
    let n = unique.len() as f64;
    let n_train = (n * ratios[0] / total).round() as usize;
    let n_val = ((n * (ratios[0] + ratios[1]) / total).round() as usize).saturating_sub(n_train);
    let assignment = unique
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let s = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Validate
            } else {
                Split::Test
            };
            (id.to_string(), s)
        })
        .collect();
    Ok(SplitAssignment { assignment })
}
