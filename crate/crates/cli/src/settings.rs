//! Pipeline settings from one `key=value` file with stage prefixes.

use std::collections::BTreeMap;

use anyhow::{bail, Context};
use claimrisk::encoder::EncoderConfig;
use claimrisk::kv::{parse_value, KvConfig};
use claimrisk::prep::PrepConfig;
use claimrisk::synth::CohortConfig;
use claimrisk::train::TrainConfig;

pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_D_MODEL: usize = 64;
pub const DEFAULT_SIZES: [usize; 3] = [10_000, 50_000, 100_000];

#[derive(Clone, Debug)]
pub struct Settings {
    pub seed: u64,
    pub cohort: CohortConfig,
    pub prep: PrepConfig,
    encoder: BTreeMap<String, String>,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Start fine-tuning from the pretrained checkpoint.
    pub from_pretrained: bool,
    pub drift: CohortConfig,
    pub sizes: Vec<usize>,
}

pub fn parse_sizes(text: &str) -> anyhow::Result<Vec<usize>> {
    text.split(',')
        .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad size {s:?}")))
        .collect()
}

fn apply<C: KvConfig>(target: &mut C, prefix: &str, entries: &BTreeMap<String, String>) -> anyhow::Result<()> {
    for (k, v) in entries {
        if !target.set(k, v)? {
            bail!("unknown config key {prefix}.{k}");
        }
    }
    Ok(())
}

impl Settings {
    /// Defaults, then the file's `seed`, then prefixed keys, then the
    /// command-line seed, which overrides every per-stage seed.
    pub fn from_entries(entries: &BTreeMap<String, String>, seed_flag: Option<u64>) -> anyhow::Result<Self> {
        let seed = match entries.get("seed") {
            Some(v) => parse_value("seed", v)?,
            None => DEFAULT_SEED,
        };
        let mut groups: BTreeMap<&str, BTreeMap<String, String>> = BTreeMap::new();
        for (k, v) in entries {
            if k == "seed" {
                continue;
            }
            let Some((prefix, key)) = k.split_once('.') else { bail!("config key {k} needs a stage prefix") };
            groups.entry(prefix).or_default().insert(key.to_string(), v.clone());
        }
        let mut s = Settings {
            seed,
            cohort: CohortConfig { seed, ..CohortConfig::default() },
            prep: PrepConfig::default(),
            encoder: BTreeMap::new(),
            pretrain: TrainConfig { lr_peak: 2e-3, max_epochs: 6, seed, ..TrainConfig::default() },
            finetune: TrainConfig { max_epochs: 4, seed, ..TrainConfig::default() },
            from_pretrained: true,
            drift: CohortConfig::default(),
            sizes: DEFAULT_SIZES.to_vec(),
        };
        let empty = BTreeMap::new();
        for (prefix, group) in &groups {
            match *prefix {
                "synth" => apply(&mut s.cohort, prefix, group)?,
                "prep" => apply(&mut s.prep, prefix, group)?,
                "encoder" => {
                    // validated against a throwaway config so bad keys fail early
                    apply(&mut EncoderConfig::with_width(DEFAULT_D_MODEL, 8), prefix, group)?;
                    s.encoder = group.clone();
                }
                "pretrain" => apply(&mut s.pretrain, prefix, group)?,
                "finetune" => {
                    let mut rest = group.clone();
                    if let Some(v) = rest.remove("from_pretrained") {
                        s.from_pretrained = parse_value("finetune.from_pretrained", &v)?;
                    }
                    apply(&mut s.finetune, prefix, &rest)?;
                }
                "scale" => {
                    for (k, v) in group {
                        match k.as_str() {
                            "sizes" => s.sizes = parse_sizes(v)?,
                            _ => bail!("unknown config key scale.{k}"),
                        }
                    }
                }
                "drift" => {}
                _ => bail!("unknown config prefix {prefix}"),
            }
        }
        if let Some(seed) = seed_flag {
            s.seed = seed;
            s.cohort.seed = seed;
            s.pretrain.seed = seed;
            s.finetune.seed = seed;
        }
        s.drift = CohortConfig {
            seed: s.cohort.seed.wrapping_add(1),
            id_prefix: "L".to_string(),
            shift_strength: 0.2,
            ..s.cohort.clone()
        };
        apply(&mut s.drift, "drift", groups.get("drift").unwrap_or(&empty))?;
        s.cohort.validate()?;
        s.drift.validate()?;
        s.pretrain.validate()?;
        s.finetune.validate()?;
        Ok(s)
    }

    /// Encoder shape for a vocabulary of `vocab_size`; `d_model` applies first
    /// so an explicit `d_ff` survives.
    pub fn encoder_config(&self, vocab_size: usize) -> anyhow::Result<EncoderConfig> {
        let mut c = EncoderConfig::with_width(DEFAULT_D_MODEL, vocab_size);
        if let Some(v) = self.encoder.get("d_model") {
            c.set("d_model", v)?;
        }
        for (k, v) in self.encoder.iter().filter(|(k, _)| *k != "d_model") {
            c.set(k, v)?;
        }
        c.vocab_size = vocab_size;
        c.validate()?;
        Ok(c)
    }

    /// Seed for weight initialisation.
    pub fn init_seed(&self) -> u64 {
        self.pretrain.seed
    }
}
