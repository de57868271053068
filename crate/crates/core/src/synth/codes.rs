//! Fixed synthetic code universes.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::vocab::{icd_chapter_count, icd_chapter_range};

const UNIVERSE_SEED: u64 = 0x1CD9_C0DE;
const CODES_PER_CHAPTER: usize = 27;
const V_CODES: usize = 25;
const E_CODES: usize = 16;

/// Chapter tokens whose presence on inpatient claims raises the hazard, in slot order.
pub const RISKY_CHAPTERS: [&str; 5] = ["ICD_CH_02", "ICD_CH_03", "ICD_CH_07", "ICD_CH_08", "ICD_CH_10"];
/// Chapter a risky slot's code is drawn from when drift remaps it.
pub const SUBSTITUTE_CHAPTERS: [&str; 5] = ["ICD_CH_06", "ICD_CH_09", "ICD_CH_13", "ICD_CH_16", "ICD_CH_12"];

pub struct CodeUniverse {
    /// Codes per chapter token, `ICD_CH_01`..`ICD_CH_17` then `ICD_SUPP_V`, `ICD_SUPP_E`.
    pub icd: Vec<(String, Vec<String>)>,
    pub hcpcs: Vec<String>,
}

impl CodeUniverse {
    pub fn get() -> &'static CodeUniverse {
        static U: OnceLock<CodeUniverse> = OnceLock::new();
        U.get_or_init(build)
    }

    pub fn chapter(&self, token: &str) -> &[String] {
        self.icd.iter().find(|(t, _)| t == token).map(|(_, c)| c.as_slice()).unwrap_or(&[])
    }

    /// Chapters that never carry planted risk, including the supplemental groups.
    pub fn filler_chapters(&self) -> Vec<&[String]> {
        self.icd
            .iter()
            .filter(|(t, _)| !RISKY_CHAPTERS.contains(&t.as_str()))
            .map(|(_, c)| c.as_slice())
            .collect()
    }

    pub fn all_icd(&self) -> impl Iterator<Item = &String> {
        self.icd.iter().flat_map(|(_, c)| c)
    }
}

fn suffix(rng: &mut ChaCha8Rng) -> String {
    match rng.gen_range(0..3) {
        0 => String::new(),
        1 => format!(".{}", rng.gen_range(0..10)),
        _ => format!(".{:02}", rng.gen_range(0..100)),
    }
}

fn distinct(rng: &mut ChaCha8Rng, n: usize, mut draw: impl FnMut(&mut ChaCha8Rng) -> String) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let code = draw(rng);
        if seen.insert(code.clone()) {
            out.push(code);
        }
    }
    out
}

fn build() -> CodeUniverse {
    let mut rng = ChaCha8Rng::seed_from_u64(UNIVERSE_SEED);
    let mut icd = Vec::new();
    for ch in 1..=icd_chapter_count() {
        let token = format!("ICD_CH_{ch:02}");
        let (lo, hi) = icd_chapter_range(&token).expect("chapter table is contiguous");
        let codes = distinct(&mut rng, CODES_PER_CHAPTER, |r| {
            let cat = r.gen_range(lo..=hi);
            format!("{cat:03}{}", suffix(r))
        });
        icd.push((token, codes));
    }
    let v = distinct(&mut rng, V_CODES, |r| format!("V{:02}.{}", r.gen_range(1..=91), r.gen_range(0..10)));
    icd.push(("ICD_SUPP_V".to_string(), v));
    let e = distinct(&mut rng, E_CODES, |r| format!("E{}.{}", r.gen_range(800..=999), r.gen_range(0..10)));
    icd.push(("ICD_SUPP_E".to_string(), e));

    // (count, generator) per HCPCS bucket; 300 codes in total
    let mut hcpcs = Vec::new();
    let numeric: [(usize, u32, u32); 6] = [
        (10, 100, 1999),
        (90, 10004, 69990),
        (40, 70010, 79999),
        (40, 80047, 89398),
        (40, 90281, 99199),
        (20, 99201, 99499),
    ];
    for (n, lo, hi) in numeric {
        hcpcs.extend(distinct(&mut rng, n, |r| format!("{:05}", r.gen_range(lo..=hi))));
    }
    for letter in ['A', 'E', 'G', 'J', 'K', 'L'] {
        hcpcs.extend(distinct(&mut rng, 8, |r| format!("{letter}{:04}", r.gen_range(0..10_000))));
    }
    for kind in ['F', 'T'] {
        hcpcs.extend(distinct(&mut rng, 6, |r| format!("{:04}{kind}", r.gen_range(1..10_000))));
    }
    hcpcs.shuffle(&mut rng);
    CodeUniverse { icd, hcpcs }
}
