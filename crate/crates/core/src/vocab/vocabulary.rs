use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{VocabError, N_SPECIALS, SPECIAL_TOKENS, UNK_ID};

pub const DEFAULT_MIN_COUNT: usize = 2;
pub const DEFAULT_VOCAB_CAP: usize = 25_000;

const HASH_HEADER: &str = "# vocab_hash=";

/// Bijective token <-> id map with the five specials at ids 0..5.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    hash: u64,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_count` times, most frequent first,
    /// ties broken by token text, truncated so the total size is at most `cap`.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        min_count: usize,
        cap: usize,
    ) -> Result<Self, VocabError> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for token in corpus {
            match counts.get_mut(token) {
                Some(c) => *c += 1,
                None => {
                    counts.insert(token.to_string(), 1);
                }
            }
        }
        Self::from_counts(&counts, min_count, cap)
    }

    /// Same as [`Vocabulary::build`] from precomputed token frequencies.
    pub fn from_counts(counts: &HashMap<String, usize>, min_count: usize, cap: usize) -> Result<Self, VocabError> {
        if counts.values().all(|&c| c == 0) {
            return Err(VocabError::EmptyCorpus);
        }
        let mut kept: Vec<(&str, usize)> = counts
            .iter()
            .map(|(t, c)| (t.as_str(), *c))
            .filter(|(t, c)| *c >= min_count && !SPECIAL_TOKENS.contains(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        kept.truncate(cap.saturating_sub(N_SPECIALS));
        let tokens = SPECIAL_TOKENS
            .iter()
            .copied()
            .chain(kept.into_iter().map(|(t, _)| t))
            .map(str::to_string)
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let hash = content_hash(&tokens);
        Self { tokens, index, hash }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or the UNK id.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Token strings of `ids`; out-of-range ids render as UNK.
    pub fn detokenize(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK_ID]).to_string()).collect()
    }

    pub fn hash(&self) -> u64 {
        self.hash
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash)
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{HASH_HEADER}{}", self.hash_hex())?;
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(out, "{t}\t{i}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let format = |detail: String| VocabError::Format { path: path.to_path_buf(), detail };
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        let expected = header
            .strip_prefix(HASH_HEADER)
            .ok_or_else(|| format(format!("missing `{HASH_HEADER}` header")))?
            .trim()
            .to_string();
        let mut tokens = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (token, id) = line.split_once('\t').ok_or_else(|| format(format!("line {}: no tab", n + 2)))?;
            let id: usize = id.parse().map_err(|_| format(format!("line {}: bad id {id:?}", n + 2)))?;
            if id != tokens.len() {
                return Err(format(format!("line {}: id {id} out of sequence", n + 2)));
            }
            tokens.push(token.to_string());
        }
        if tokens.len() < N_SPECIALS || tokens.iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s) {
            return Err(format("special tokens missing or misplaced".into()));
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.hash_hex() != expected {
            return Err(VocabError::HashMismatch { expected, found: vocab.hash_hex() });
        }
        Ok(vocab)
    }
}

/// First 8 bytes (big-endian) of SHA-256 over `id\ttoken\n` lines.
fn content_hash(tokens: &[String]) -> u64 {
    let mut text = String::new();
    for (i, t) in tokens.iter().enumerate() {
        let _ = writeln!(text, "{i}\t{t}");
    }
    let digest = Sha256::digest(text.as_bytes());
    u64::from_be_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

/// Variable family of a token: the text before the first `_`
/// (`ICD_CH_07` -> `ICD`, `OBESITY-RATE_Q3` -> `OBESITY-RATE`).
pub fn token_family(token: &str) -> &str {
    token.split_once('_').map_or(token, |(head, _)| head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{CLS_ID, MASK_ID, PAD_ID, SEP_ID};
    use proptest::prelude::*;

    #[test]
    fn min_count_filters_rare_tokens() {
        let v = Vocabulary::build(["a", "a", "b"], 2, 100).unwrap();
        assert_eq!(v.get("a"), Some(5));
        assert_eq!(v.get("b"), None);
        assert_eq!(v.id("b"), UNK_ID);
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn specials_sit_at_fixed_ids() {
        for corpus in [vec!["x"; 3], vec!["[CLS]", "[CLS]", "zz", "zz"]] {
            let v = Vocabulary::build(corpus.iter().copied(), 2, 100).unwrap();
            assert_eq!(v.id("[PAD]"), PAD_ID);
            assert_eq!(v.id("[MASK]"), MASK_ID);
            assert_eq!(v.id("[UNK]"), UNK_ID);
            assert_eq!(v.id("[CLS]"), CLS_ID);
            assert_eq!(v.id("[SEP]"), SEP_ID);
        }
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(Vocabulary::build(std::iter::empty(), 2, 10), Err(VocabError::EmptyCorpus)));
    }

    #[test]
    fn cap_keeps_most_frequent() {
        let corpus = ["c", "c", "c", "b", "b", "b", "b", "a", "a", "d", "d"];
        let v = Vocabulary::build(corpus, 2, 7).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.token(5), Some("b"));
        assert_eq!(v.token(6), Some("c"));
        assert_eq!(v.get("a"), None);
    }

    #[test]
    fn save_load_round_trip_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocabulary::build(["ICD_CH_07", "ICD_CH_07", "PAY_Q3", "PAY_Q3", "x"], 2, 100).unwrap();
        let path = dir.path().join("vocab.tsv");
        v.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(back, v);
        let text = std::fs::read_to_string(&path).unwrap().replace("PAY_Q3", "PAY_Q4");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(Vocabulary::load(&path), Err(VocabError::HashMismatch { .. })));
    }

    #[test]
    fn hash_depends_on_content() {
        let a = Vocabulary::build(["a", "a"], 2, 10).unwrap();
        let b = Vocabulary::build(["b", "b"], 2, 10).unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), Vocabulary::build(["a", "a"], 2, 10).unwrap().hash());
    }

    #[test]
    fn families() {
        assert_eq!(token_family("ICD_CH_07"), "ICD");
        assert_eq!(token_family("OBESITY-RATE_Q3"), "OBESITY-RATE");
        assert_eq!(token_family("GAP_8_30"), "GAP");
        assert_eq!(token_family("PLAIN"), "PLAIN");
    }

    proptest! {
        #[test]
        fn detokenize_inverts_tokenize(corpus in prop::collection::vec("[A-Z]{1,3}_[a-z0-9]{1,2}", 1..200)) {
            let v = Vocabulary::build(corpus.iter().map(String::as_str), 2, 1000).unwrap();
            let in_vocab: Vec<&String> = corpus.iter().filter(|t| v.get(t).is_some()).collect();
            let ids = v.tokenize(&in_vocab);
            let back = v.detokenize(&ids);
            prop_assert!(back.iter().zip(&in_vocab).all(|(a, b)| a == *b));
            prop_assert!(ids.iter().all(|&i| i < v.len()));
        }

        #[test]
        fn build_is_order_independent(mut corpus in prop::collection::vec("[a-e]{1,2}", 1..100)) {
            let a = Vocabulary::build(corpus.iter().map(String::as_str), 2, 1000).unwrap();
            corpus.reverse();
            let b = Vocabulary::build(corpus.iter().map(String::as_str), 2, 1000).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
