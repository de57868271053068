//! Cohort to model-ready samples.
//!
//! Labels every inpatient stay, splits beneficiaries, fits the quantizer and
//! vocabulary on the training split only, and assembles every event into a
//! [`LabeledSample`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::claims::{join_census, BeneficiaryTimeline, CountyStats};
use crate::kv::{parse_value, ConfigError, KvConfig};
use crate::labeler::{label_timeline, LabelError, LabelSummary, LabeledInpatientEvent};
use crate::train::{split_by_beneficiary, Split, SplitAssignment, TrainError, DEFAULT_RATIOS};
use crate::vocab::{
    age_years, assemble_tokens, claim_tokens, county_tokens, county_variable, encode_sequence, leakage_scan,
    personal_tokens, raw_claim_strings, raw_county_strings, raw_personal_strings, read_samples, write_samples,
    LabeledSample, QuantizerSpec, TokenSequence, VocabError, Vocabulary, AGE_VAR, DEFAULT_BINS, DEFAULT_MAX_LEN,
    DEFAULT_MIN_COUNT, DEFAULT_VOCAB_CAP, LOS_VAR, PAY_VAR, UNK_TOKEN,
};

#[derive(Debug, Error)]
pub enum PrepError {
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrepConfig {
    pub bins: usize,
    pub max_len: usize,
    pub min_count: usize,
    pub vocab_cap: usize,
    pub split_ratios: [f64; 3],
    pub split_seed: u64,
    /// Replace race and gender tokens by UNK everywhere.
    pub mask_demographics: bool,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            max_len: DEFAULT_MAX_LEN,
            min_count: DEFAULT_MIN_COUNT,
            vocab_cap: DEFAULT_VOCAB_CAP,
            split_ratios: DEFAULT_RATIOS,
            split_seed: 17,
            mask_demographics: false,
        }
    }
}

impl KvConfig for PrepConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        match key {
            "bins" => self.bins = parse_value(key, value)?,
            "max_len" => self.max_len = parse_value(key, value)?,
            "min_count" => self.min_count = parse_value(key, value)?,
            "vocab_cap" => self.vocab_cap = parse_value(key, value)?,
            "split_seed" => self.split_seed = parse_value(key, value)?,
            "mask_demographics" => self.mask_demographics = parse_value(key, value)?,
            "split_ratios" => {
                let parts: Vec<f64> =
                    value.split(',').map(|v| parse_value(key, v.trim())).collect::<Result<_, _>>()?;
                self.split_ratios = parts
                    .try_into()
                    .map_err(|_| ConfigError::InvalidValue { key: key.into(), value: value.into() })?;
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Samples with their split, vocabulary and quantizer.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub vocab: Vocabulary,
    pub quantizer: QuantizerSpec,
    pub splits: SplitAssignment,
    pub samples: Vec<LabeledSample>,
    pub sample_splits: Vec<Split>,
    pub summary: LabelSummary,
}

impl PreparedData {
    pub fn split(&self, split: Split) -> Vec<&LabeledSample> {
        self.samples.iter().zip(&self.sample_splits).filter(|(_, s)| **s == split).map(|(x, _)| x).collect()
    }

    pub fn split_owned(&self, split: Split) -> Vec<LabeledSample> {
        self.split(split).into_iter().cloned().collect()
    }
}

fn mask_demographic_tokens(seq: &mut TokenSequence) {
    for t in &mut seq.tokens {
        if t.starts_with("RACE_") || t.starts_with("GENDER_") {
            *t = UNK_TOKEN.to_string();
        }
    }
}

/// Numeric values of the training split per quantized variable.
fn quantizer_inputs(
    timelines: &[&BeneficiaryTimeline],
    counties: &BTreeMap<String, CountyStats>,
) -> BTreeMap<String, Vec<f64>> {
    let mut data: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for tl in timelines {
        for c in &tl.claims {
            data.entry(PAY_VAR.into()).or_default().push(c.payment_amount);
            if c.is_inpatient() {
                if let (Some(los), Some(adm)) = (c.length_of_stay(), c.admission_date) {
                    data.entry(LOS_VAR.into()).or_default().push(f64::from(los));
                    data.entry(AGE_VAR.into()).or_default().push(age_years(tl.beneficiary.date_of_birth, adm));
                }
            }
        }
        if let Some(county) = counties.get(tl.id()) {
            for (name, v) in &county.indicators {
                let values = data.entry(county_variable(name)).or_default();
                values.extend(*v);
            }
        }
    }
    data
}

fn fit_quantizer_on(
    timelines: &[&BeneficiaryTimeline],
    counties: &BTreeMap<String, CountyStats>,
    bins: usize,
) -> Result<QuantizerSpec, VocabError> {
    let mut spec = QuantizerSpec::new(bins)?;
    for (name, values) in quantizer_inputs(timelines, counties) {
        spec.fit(&name, &values)?;
    }
    // every quantized variable needs an entry even when the training split lacks values
    for var in [AGE_VAR, PAY_VAR, LOS_VAR] {
        if spec.edges(var).is_none() {
            spec.fit(var, &[])?;
        }
    }
    for county in counties.values() {
        for name in county.indicators.keys() {
            let var = county_variable(name);
            if spec.edges(&var).is_none() {
                spec.fit(&var, &[])?;
            }
        }
    }
    Ok(spec)
}

fn timeline_sequences(
    tl: &BeneficiaryTimeline,
    county: &CountyStats,
    quantizer: &QuantizerSpec,
    config: &PrepConfig,
) -> Result<Vec<(LabeledInpatientEvent, TokenSequence)>, PrepError> {
    label_timeline(tl)?
        .into_iter()
        .map(|e| {
            let mut seq = assemble_tokens(&e, tl, county, quantizer, config.max_len)?;
            if config.mask_demographics {
                mask_demographic_tokens(&mut seq);
            }
            Ok((e, seq))
        })
        .collect()
}

fn sentinel_for(counties: &[CountyStats]) -> CountyStats {
    let names: std::collections::BTreeSet<&str> =
        counties.iter().flat_map(|c| c.indicators.keys().map(String::as_str)).collect();
    CountyStats::unknown(names)
}

/// Assembles and encodes every event of `timelines` with a fixed vocabulary
/// and quantizer. Output follows timeline order, then stay order.
pub fn encode_timelines(
    timelines: &[BeneficiaryTimeline],
    counties: &[CountyStats],
    vocab: &Vocabulary,
    quantizer: &QuantizerSpec,
    config: &PrepConfig,
) -> Result<(Vec<LabeledSample>, LabelSummary), PrepError> {
    let joined = join_census(timelines, counties);
    let sentinel = sentinel_for(counties);
    let per_timeline: Vec<Vec<LabeledSample>> = timelines
        .par_iter()
        .map(|tl| {
            let county = joined.get(tl.id()).unwrap_or(&sentinel);
            Ok(timeline_sequences(tl, county, quantizer, config)?
                .into_iter()
                .map(|(e, seq)| encode_sequence(&e, tl, &seq, vocab))
                .collect())
        })
        .collect::<Result<_, PrepError>>()?;
    let summary = LabelSummary {
        total_claims: timelines.iter().map(|t| t.claims.len()).sum(),
        inpatient_claims: per_timeline.iter().map(Vec::len).sum(),
        positives: per_timeline.iter().flatten().filter(|s| s.label == 1).count(),
    };
    Ok((per_timeline.into_iter().flatten().collect(), summary))
}

pub fn prepare_dataset(
    timelines: &[BeneficiaryTimeline],
    counties: &[CountyStats],
    config: &PrepConfig,
) -> Result<PreparedData, PrepError> {
    let splits = split_by_beneficiary(timelines.iter().map(|t| t.id()), config.split_ratios, config.split_seed)?;
    let joined = join_census(timelines, counties);
    let sentinel = sentinel_for(counties);
    let train: Vec<&BeneficiaryTimeline> =
        timelines.iter().filter(|t| splits.get(t.id()) == Some(Split::Train)).collect();
    let train_counties: BTreeMap<String, CountyStats> =
        train.iter().filter_map(|t| joined.get(t.id()).map(|c| (t.id().to_string(), c.clone()))).collect();
    let quantizer = fit_quantizer_on(&train, &train_counties, config.bins)?;

    let counts = train
        .par_iter()
        .map(|tl| {
            let county = joined.get(tl.id()).unwrap_or(&sentinel);
            let mut counts: HashMap<String, usize> = HashMap::new();
            for (_, seq) in timeline_sequences(tl, county, &quantizer, config)? {
                for t in seq.tokens {
                    *counts.entry(t).or_default() += 1;
                }
            }
            Ok(counts)
        })
        .try_reduce(HashMap::new, |mut a, b| {
            for (k, v) in b {
                *a.entry(k).or_default() += v;
            }
            Ok::<_, PrepError>(a)
        })?;
    let vocab = Vocabulary::from_counts(&counts, config.min_count, config.vocab_cap)?;

    let (samples, summary) = encode_timelines(timelines, counties, &vocab, &quantizer, config)?;
    let sample_splits = samples
        .iter()
        .map(|s| splits.get(&s.beneficiary_id).expect("every beneficiary is assigned"))
        .collect();
    Ok(PreparedData { vocab, quantizer, splits, samples, sample_splits, summary })
}

/// Distinct variable-value strings before and after grouping and quantization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompressionStats {
    pub raw_distinct: usize,
    pub grouped_distinct: usize,
}

impl CompressionStats {
    pub fn ratio(&self) -> f64 {
        self.raw_distinct as f64 / self.grouped_distinct.max(1) as f64
    }
}

/// Compares the raw `VARIABLE=value` strings of every beneficiary, claim and
/// joined county with the tokens the same records produce.
pub fn compression_stats(
    timelines: &[BeneficiaryTimeline],
    counties: &[CountyStats],
    quantizer: &QuantizerSpec,
) -> Result<CompressionStats, PrepError> {
    let joined = join_census(timelines, counties);
    let mut raw: HashSet<String> = HashSet::new();
    let mut grouped: HashSet<String> = HashSet::new();
    for tl in timelines {
        raw.extend(raw_personal_strings(&tl.beneficiary));
        if let Some(county) = joined.get(tl.id()) {
            raw.extend(raw_county_strings(county));
            grouped.extend(county_tokens(county, quantizer)?);
        }
        for c in &tl.claims {
            raw.extend(raw_claim_strings(c));
            grouped.extend(claim_tokens(c, quantizer)?);
            if c.is_inpatient() {
                if let Some(adm) = c.admission_date {
                    grouped.extend(personal_tokens(&tl.beneficiary, adm, quantizer)?);
                }
            }
        }
    }
    Ok(CompressionStats { raw_distinct: raw.len(), grouped_distinct: grouped.len() })
}

/// Runs the leakage scan over every sample, returning `(index claim, problem)` pairs.
pub fn scan_samples(
    samples: &[LabeledSample],
    timelines: &[BeneficiaryTimeline],
    vocab: &Vocabulary,
) -> Vec<(String, String)> {
    let by_id: HashMap<&str, &BeneficiaryTimeline> = timelines.iter().map(|t| (t.id(), t)).collect();
    samples
        .par_iter()
        .flat_map_iter(|s| {
            let problems = match by_id.get(s.beneficiary_id.as_str()) {
                Some(tl) => leakage_scan(s, tl, vocab),
                None => vec![format!("beneficiary {} not found", s.beneficiary_id)],
            };
            problems.into_iter().map(|p| (s.index_claim_id.clone(), p)).collect::<Vec<_>>()
        })
        .collect()
}

pub const VOCAB_FILE: &str = "vocab.tsv";
pub const QUANTIZER_FILE: &str = "quantizer.json";
pub const SPLITS_FILE: &str = "splits.csv";

pub fn samples_file(split: Split) -> String {
    format!("samples_{split}.csv")
}

/// Writes vocabulary, quantizer, split assignment and one sample file per split.
pub fn write_prepared(dir: &Path, data: &PreparedData) -> Result<Vec<String>, PrepError> {
    std::fs::create_dir_all(dir)?;
    data.vocab.save(&dir.join(VOCAB_FILE))?;
    data.quantizer.save(&dir.join(QUANTIZER_FILE))?;
    let mut text = String::from("beneficiary_id,split\n");
    for (id, s) in &data.splits.assignment {
        text.push_str(&format!("{id},{s}\n"));
    }
    std::fs::write(dir.join(SPLITS_FILE), text)?;
    let mut names = vec![VOCAB_FILE.to_string(), QUANTIZER_FILE.to_string(), SPLITS_FILE.to_string()];
    for split in Split::ALL {
        let samples = data.split_owned(split);
        write_samples(&dir.join(samples_file(split)), &samples)?;
        names.push(samples_file(split));
    }
    Ok(names)
}

pub fn read_prepared(dir: &Path) -> Result<PreparedData, PrepError> {
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    let quantizer = QuantizerSpec::load(&dir.join(QUANTIZER_FILE))?;
    let mut assignment = BTreeMap::new();
    let text = std::fs::read_to_string(dir.join(SPLITS_FILE))?;
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let (id, s) = line.split_once(',').ok_or_else(|| PrepError::Format(format!("bad split line {line:?}")))?;
        assignment.insert(id.to_string(), s.parse().map_err(PrepError::Format)?);
    }
    let mut samples = Vec::new();
    let mut sample_splits = Vec::new();
    for split in Split::ALL {
        let part = read_samples(&dir.join(samples_file(split)))?;
        sample_splits.extend(std::iter::repeat_n(split, part.len()));
        samples.extend(part);
    }
    let summary = LabelSummary {
        total_claims: 0,
        inpatient_claims: samples.len(),
        positives: samples.iter().filter(|s| s.label == 1).count(),
    };
    Ok(PreparedData { vocab, quantizer, splits: SplitAssignment { assignment }, samples, sample_splits, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_cohort, CohortConfig};

    fn cohort(n: usize) -> crate::synth::Cohort {
        generate_cohort(&CohortConfig { n_beneficiaries: n, ..CohortConfig::default() }).unwrap()
    }

    #[test]
    fn prepared_samples_are_well_formed() {
        let c = cohort(400);
        let data = prepare_dataset(&c.timelines, &c.counties, &PrepConfig::default()).unwrap();
        assert_eq!(data.samples.len(), data.summary.inpatient_claims);
        assert!(data.samples.iter().all(|s| s.len() <= DEFAULT_MAX_LEN));
        assert!(scan_samples(&data.samples, &c.timelines, &data.vocab).is_empty());
        for split in Split::ALL {
            assert!(!data.split(split).is_empty(), "{split}");
        }
    }

    #[test]
    fn vocabulary_ignores_held_out_beneficiaries() {
        let c = cohort(300);
        let config = PrepConfig::default();
        let base = prepare_dataset(&c.timelines, &c.counties, &config).unwrap();
        // perturb every held-out claim; vocabulary and quantizer must not move
        let mut altered = c.timelines.clone();
        for tl in &mut altered {
            if base.splits.get(tl.id()) != Some(Split::Train) {
                for claim in &mut tl.claims {
                    claim.payment_amount *= 7.3;
                    claim.provider_specialty = "held out specialty".into();
                }
            }
        }
        let other = prepare_dataset(&altered, &c.counties, &config).unwrap();
        assert_eq!(base.vocab, other.vocab);
        assert_eq!(base.quantizer, other.quantizer);
    }

    #[test]
    fn demographic_masking_removes_race_and_gender() {
        let c = cohort(200);
        let config = PrepConfig { mask_demographics: true, ..PrepConfig::default() };
        let data = prepare_dataset(&c.timelines, &c.counties, &config).unwrap();
        assert!(data.vocab.tokens().iter().all(|t| !t.starts_with("RACE_") && !t.starts_with("GENDER_")));
        let plain = prepare_dataset(&c.timelines, &c.counties, &PrepConfig::default()).unwrap();
        assert!(plain.vocab.get("GENDER_F").is_some());
    }

    #[test]
    fn prepared_round_trips_through_directory() {
        let c = cohort(150);
        let data = prepare_dataset(&c.timelines, &c.counties, &PrepConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_prepared(dir.path(), &data).unwrap();
        let back = read_prepared(dir.path()).unwrap();
        assert_eq!(back.vocab, data.vocab);
        assert_eq!(back.quantizer, data.quantizer);
        assert_eq!(back.splits, data.splits);
        for split in Split::ALL {
            assert_eq!(back.split_owned(split), data.split_owned(split));
        }
    }

    #[test]
    fn compression_is_large_on_a_cohort() {
        let c = cohort(1000);
        let data = prepare_dataset(&c.timelines, &c.counties, &PrepConfig::default()).unwrap();
        let stats = compression_stats(&c.timelines, &c.counties, &data.quantizer).unwrap();
        assert!(stats.ratio() > 10.0, "{stats:?}");
    }
}
