use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::vocab::{is_special, MASK_ID, N_SPECIALS};

/// What happens to a selected position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorruptionMode {
    /// 80% MASK, 10% random token, 10% unchanged.
    MaskRandomKeep,
    /// 80% MASK, 20% random token; nothing selected stays unchanged.
    MaskOrRandom,
}

impl std::str::FromStr for CorruptionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mask_random_keep" => Ok(Self::MaskRandomKeep),
            "mask_or_random" => Ok(Self::MaskOrRandom),
            _ => Err(format!("unknown corruption mode {s:?}")),
        }
    }
}

/// A corrupted copy of a token sequence and the targets to recover.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedTokens {
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
    pub originals: Vec<usize>,
}

/// Number of positions selected from `maskable`: `round(fraction * n)`, at least one.
pub fn n_selected(maskable: usize, fraction: f64) -> usize {
    ((fraction * maskable as f64).round() as usize).clamp(1, maskable.max(1))
}

/// Selects `mask_fraction` of the non-special positions and corrupts them.
/// Random replacements are drawn uniformly from the non-special ids.
pub fn mask_tokens<R: Rng + ?Sized>(
    tokens: &[u32],
    vocab_size: usize,
    mask_fraction: f64,
    mode: CorruptionMode,
    rng: &mut R,
) -> Result<MaskedTokens, TrainError> {
    let maskable: Vec<usize> = (0..tokens.len()).filter(|&i| !is_special(tokens[i] as usize)).collect();
    if maskable.is_empty() {
        return Err(TrainError::NothingToMask);
    }
    let k = n_selected(maskable.len(), mask_fraction);
    let mut positions: Vec<usize> = sample(rng, maskable.len(), k).into_iter().map(|i| maskable[i]).collect();
    positions.sort_unstable();
    let mut out = tokens.to_vec();
    let random_share = match mode {
        CorruptionMode::MaskRandomKeep => 0.1,
        CorruptionMode::MaskOrRandom => 0.2,
    };
    for &p in &positions {
        let r: f64 = rng.gen();
        if r < 0.8 {
            out[p] = MASK_ID as u32;
        } else if r < 0.8 + random_share && vocab_size > N_SPECIALS {
            out[p] = rng.gen_range(N_SPECIALS..vocab_size) as u32;
        }
    }
    let originals = positions.iter().map(|&p| tokens[p] as usize).collect();
    Ok(MaskedTokens { tokens: out, positions, originals })
}
