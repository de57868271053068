//! Diagnosis and procedure code rollups.

use std::sync::OnceLock;

use super::UNK_TOKEN;

struct RangeRow {
    token: String,
    low: u32,
    high: u32,
}

fn parse_ranges(text: &str) -> Vec<RangeRow> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut parts = l.split(',');
            let token = parts.next().expect("token").to_string();
            let low = parts.next().and_then(|v| v.parse().ok()).expect("low");
            let high = parts.next().and_then(|v| v.parse().ok()).expect("high");
            RangeRow { token, low, high }
        })
        .collect()
}

fn icd_chapters() -> &'static [RangeRow] {
    static TABLE: OnceLock<Vec<RangeRow>> = OnceLock::new();
    TABLE.get_or_init(|| parse_ranges(include_str!("../../data/icd9_chapters.csv")))
}

fn hcpcs_sections() -> &'static [RangeRow] {
    static TABLE: OnceLock<Vec<RangeRow>> = OnceLock::new();
    TABLE.get_or_init(|| parse_ranges(include_str!("../../data/hcpcs_sections.csv")))
}

fn lookup(table: &[RangeRow], value: u32) -> Option<&str> {
    table.iter().find(|r| (r.low..=r.high).contains(&value)).map(|r| r.token.as_str())
}

fn all_digits(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

/// Splits `head.tail` or undotted codes into (category digits, valid?).
/// `head_len` is the category width; undotted codes may carry up to
/// `max_tail` extra digits.
fn icd_category(body: &str, head_len: usize, max_tail: usize) -> Option<&str> {
    match body.split_once('.') {
        Some((head, tail)) => {
            (head.len() == head_len && all_digits(head) && all_digits(tail) && tail.len() <= max_tail).then_some(head)
        }
        None => (all_digits(body) && (head_len..=head_len + max_tail).contains(&body.len())).then(|| &body[..head_len]),
    }
}

/// Rolls an ICD-9-CM diagnosis code up to its chapter token.
///
/// `410.01` -> `ICD_CH_07`; V codes -> `ICD_SUPP_V`; E codes -> `ICD_SUPP_E`;
/// anything not shaped like an ICD-9-CM code -> `[UNK]`.
pub fn group_icd(code: &str) -> String {
    let code = code.trim();
    let upper = code.to_ascii_uppercase();
    if let Some(body) = upper.strip_prefix('V') {
        return match icd_category(body, 2, 2) {
            Some(_) => "ICD_SUPP_V".to_string(),
            None => UNK_TOKEN.to_string(),
        };
    }
    if let Some(body) = upper.strip_prefix('E') {
        return match icd_category(body, 3, 1) {
            Some(_) => "ICD_SUPP_E".to_string(),
            None => UNK_TOKEN.to_string(),
        };
    }
    icd_category(&upper, 3, 2)
        .and_then(|head| head.parse::<u32>().ok())
        .and_then(|n| lookup(icd_chapters(), n))
        .map(str::to_string)
        .unwrap_or_else(|| UNK_TOKEN.to_string())
}

/// Rolls a HCPCS code up to a coarse bucket.
///
/// Level I (five digits) maps to its CPT section, e.g. `99213` -> `HCPCS_EM`;
/// category II/III codes (`dddd F` / `dddd T`) map to `HCPCS_CAT2` / `HCPCS_CAT3`;
/// level II codes (letter + four digits) map to their letter, e.g. `E0110` -> `HCPCS_E`.
pub fn group_hcpcs(code: &str) -> String {
    let code = code.trim().to_ascii_uppercase();
    let bytes = code.as_bytes();
    if bytes.len() != 5 {
        return UNK_TOKEN.to_string();
    }
    if all_digits(&code) {
        return code
            .parse::<u32>()
            .ok()
            .and_then(|n| lookup(hcpcs_sections(), n))
            .map(str::to_string)
            .unwrap_or_else(|| UNK_TOKEN.to_string());
    }
    if all_digits(&code[..4]) {
        return match bytes[4] {
            b'F' => "HCPCS_CAT2".to_string(),
            b'T' => "HCPCS_CAT3".to_string(),
            _ => UNK_TOKEN.to_string(),
        };
    }
    if bytes[0].is_ascii_uppercase() && all_digits(&code[1..]) {
        return format!("HCPCS_{}", bytes[0] as char);
    }
    UNK_TOKEN.to_string()
}

/// Number of chapter tokens in the bundled ICD-9-CM table.
pub fn icd_chapter_count() -> usize {
    icd_chapters().len()
}

/// Inclusive numeric range of an ICD chapter token, e.g. `ICD_CH_07` -> (390, 459).
pub fn icd_chapter_range(token: &str) -> Option<(u32, u32)> {
    icd_chapters().iter().find(|r| r.token == token).map(|r| (r.low, r.high))
}
