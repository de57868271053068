//! Bidirectional transformer encoder over claim-token sequences.
//!
//! Post-norm blocks (`x = LN(x + Attn(x))`, `x = LN(x + FFN(x))`), input
//! embeddings summed from token, position, segment and time-bucket tables, a
//! masked-token head tied to the token table and a one-logit classifier read
//! from the CLS position.

mod attention;
mod forward;

use std::collections::BTreeMap;
use std::path::Path;

use claimrisk_tensor::{read_checkpoint, write_checkpoint, Checkpoint, Scalar, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kv::{parse_value, ConfigError, KvConfig};
use crate::vocab::{Vocabulary, DEFAULT_MAX_LEN, N_TIME_BUCKETS};

pub use attention::{AttentionEntry, AttentionReport, HeadAttention};
pub use forward::{Batch, Forward};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("{table} id {id} out of range for {rows} rows")]
    IdOutOfRange { table: &'static str, id: usize, rows: usize },
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("masked position {position} out of range for {rows} rows")]
    PositionOutOfRange { position: usize, rows: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("vocabulary hash mismatch: checkpoint has {expected}, data has {found}")]
    VocabHashMismatch { expected: String, found: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub n_segments: usize,
    pub n_time_buckets: usize,
    pub dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::with_width(64, 0)
    }
}

impl EncoderConfig {
    /// Two blocks, two heads, `d_ff = 4 d_model`.
    pub fn with_width(d_model: usize, vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model,
            d_ff: 4 * d_model,
            max_len: DEFAULT_MAX_LEN,
            vocab_size,
            n_segments: 4,
            n_time_buckets: N_TIME_BUCKETS,
            dropout_rate: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
            ("n_segments", self.n_segments),
            ("n_time_buckets", self.n_time_buckets),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(EncoderError::InvalidConfig(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(EncoderError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(EncoderError::InvalidConfig(format!("dropout_rate {} not in [0,1)", self.dropout_rate)));
        }
        Ok(())
    }

    fn header(&self) -> BTreeMap<String, String> {
        [
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_model", self.d_model.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("max_len", self.max_len.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("n_segments", self.n_segments.to_string()),
            ("n_time_buckets", self.n_time_buckets.to_string()),
            ("dropout_rate", format!("{:?}", self.dropout_rate)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

impl KvConfig for EncoderConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        match key {
            "n_layers" => self.n_layers = parse_value(key, value)?,
            "n_heads" => self.n_heads = parse_value(key, value)?,
            "d_model" => {
                self.d_model = parse_value(key, value)?;
                self.d_ff = 4 * self.d_model;
            }
            "d_ff" => self.d_ff = parse_value(key, value)?,
            "max_len" => self.max_len = parse_value(key, value)?,
            "n_segments" => self.n_segments = parse_value(key, value)?,
            "n_time_buckets" => self.n_time_buckets = parse_value(key, value)?,
            "dropout_rate" => self.dropout_rate = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub(crate) const TOKEN_EMB: usize = 0;
pub(crate) const POS_EMB: usize = 1;
pub(crate) const SEG_EMB: usize = 2;
pub(crate) const TIME_EMB: usize = 3;
pub(crate) const EMB_LN_G: usize = 4;
pub(crate) const EMB_LN_B: usize = 5;
const N_EMBED_PARAMS: usize = 6;

/// Offsets inside one block.
pub(crate) mod block {
    pub const WQ: usize = 0;
    pub const BQ: usize = 1;
    pub const WK: usize = 2;
    pub const BK: usize = 3;
    pub const WV: usize = 4;
    pub const BV: usize = 5;
    pub const WO: usize = 6;
    pub const BO: usize = 7;
    pub const LN1_G: usize = 8;
    pub const LN1_B: usize = 9;
    pub const W1: usize = 10;
    pub const B1: usize = 11;
    pub const W2: usize = 12;
    pub const B2: usize = 13;
    pub const LN2_G: usize = 14;
    pub const LN2_B: usize = 15;
    pub const LEN: usize = 16;
    pub const NAMES: [&str; LEN] =
        ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b"];
}

/// Offsets after the blocks.
pub(crate) mod head {
    pub const MTL_W: usize = 0;
    pub const MTL_B: usize = 1;
    pub const MTL_LN_G: usize = 2;
    pub const MTL_LN_B: usize = 3;
    pub const MTL_BIAS: usize = 4;
    pub const CLS_W: usize = 5;
    pub const CLS_B: usize = 6;
    pub const LEN: usize = 7;
    pub const NAMES: [&str; LEN] =
        ["mtl.dense_w", "mtl.dense_b", "mtl.ln_g", "mtl.ln_b", "mtl.bias", "classifier.w", "classifier.b"];
}

pub(crate) fn block_param(layer: usize, k: usize) -> usize {
    N_EMBED_PARAMS + layer * block::LEN + k
}

pub(crate) fn head_param(n_layers: usize, k: usize) -> usize {
    N_EMBED_PARAMS + n_layers * block::LEN + k
}

/// Which parameter group a training stage updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Embeddings, blocks and the masked-token head.
    Pretrain,
    /// Embeddings, blocks and the classifier.
    Finetune,
}

/// Parameter tensors in a fixed order: embeddings, blocks, heads.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState<F: Scalar = f32> {
    pub config: EncoderConfig,
    pub vocab_hash: u64,
    params: Vec<(String, Tensor<F>)>,
}

fn shapes(c: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = c.d_model;
    let mut out = vec![
        ("embedding.token".to_string(), vec![c.vocab_size, d]),
        ("embedding.position".to_string(), vec![c.max_len, d]),
        ("embedding.segment".to_string(), vec![c.n_segments, d]),
        // row 0 is "not history"
        ("embedding.time_bucket".to_string(), vec![c.n_time_buckets + 1, d]),
        ("embedding.ln_g".to_string(), vec![d]),
        ("embedding.ln_b".to_string(), vec![d]),
    ];
    for l in 0..c.n_layers {
        let block_shapes = [
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, c.d_ff],
            vec![c.d_ff],
            vec![c.d_ff, d],
            vec![d],
            vec![d],
            vec![d],
        ];
        for (name, shape) in block::NAMES.iter().zip(block_shapes) {
            out.push((format!("block{l}.{name}"), shape));
        }
    }
    let head_shapes = [vec![d, d], vec![d], vec![d], vec![d], vec![c.vocab_size], vec![d, 1], vec![1]];
    for (name, shape) in head::NAMES.iter().zip(head_shapes) {
        out.push((name.to_string(), shape));
    }
    out
}

fn is_gain(name: &str) -> bool {
    name.ends_with("ln_g") || name.ends_with("ln1_g") || name.ends_with("ln2_g")
}

impl<F: Scalar> EncoderState<F> {
    /// Embedding tables uniform with std 0.02, dense weights Glorot-uniform,
    /// biases zero, layer-norm gains one.
    pub fn init(config: EncoderConfig, vocab_hash: u64, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb_limit = 0.02 * 3f64.sqrt();
        let params = shapes(&config)
            .into_iter()
            .map(|(name, shape)| {
                let t = if is_gain(&name) {
                    Tensor::from_fn(shape, |_| F::one())
                } else if name.starts_with("embedding.") && shape.len() == 2 {
                    Tensor::from_fn(shape, |_| F::of(rng.gen_range(-emb_limit..emb_limit)))
                } else if shape.len() == 2 {
                    let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    Tensor::from_fn(shape, |_| F::of(rng.gen_range(-limit..limit)))
                } else {
                    Tensor::zeros(shape)
                };
                (name, t)
            })
            .collect();
        Ok(Self { config, vocab_hash, params })
    }

    pub fn params(&self) -> &[(String, Tensor<F>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor<F>)] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Indices of the parameters trained in `stage`.
    pub fn stage_params(&self, stage: Stage) -> Vec<usize> {
        let heads = head_param(self.config.n_layers, 0);
        let cls = head_param(self.config.n_layers, head::CLS_W);
        (0..self.params.len())
            .filter(|&i| match stage {
                Stage::Pretrain => i < cls,
                Stage::Finetune => i < heads || i >= cls,
            })
            .collect()
    }

    /// Marks exactly the parameters of `stage` as requiring gradients.
    pub fn set_stage(&mut self, stage: Stage) {
        let active = self.stage_params(stage);
        for (i, (_, t)) in self.params.iter_mut().enumerate() {
            t.set_requires_grad(active.contains(&i));
        }
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    pub fn cast<G: Scalar>(&self) -> EncoderState<G> {
        EncoderState {
            config: self.config.clone(),
            vocab_hash: self.vocab_hash,
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Errors unless `vocab` is the vocabulary this state was built for.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<(), EncoderError> {
        if vocab.hash() != self.vocab_hash || vocab.len() != self.config.vocab_size {
            return Err(EncoderError::VocabHashMismatch {
                expected: format!("{:016x}", self.vocab_hash),
                found: vocab.hash_hex(),
            });
        }
        Ok(())
    }
}

impl EncoderState<f32> {
    pub fn to_checkpoint(&self, extra: &BTreeMap<String, String>) -> Checkpoint {
        let mut header = self.config.header();
        header.insert("vocab_hash".into(), format!("{:016x}", self.vocab_hash));
        for (k, v) in extra {
            header.entry(k.clone()).or_insert_with(|| v.clone());
        }
        let tensors = self.params.iter().map(|(n, t)| (n.clone(), Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("consistent"))).collect();
        Checkpoint { header, tensors }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, EncoderError> {
        let get = |k: &str| -> Result<&str, EncoderError> {
            ckpt.header.get(k).map(String::as_str).ok_or_else(|| EncoderError::Checkpoint(format!("missing header {k}")))
        };
        let num = |k: &str| -> Result<usize, EncoderError> {
            get(k)?.parse().map_err(|_| EncoderError::Checkpoint(format!("bad header {k}")))
        };
        let config = EncoderConfig {
            n_layers: num("n_layers")?,
            n_heads: num("n_heads")?,
            d_model: num("d_model")?,
            d_ff: num("d_ff")?,
            max_len: num("max_len")?,
            vocab_size: num("vocab_size")?,
            n_segments: num("n_segments")?,
            n_time_buckets: num("n_time_buckets")?,
            dropout_rate: get("dropout_rate")?
                .parse()
                .map_err(|_| EncoderError::Checkpoint("bad header dropout_rate".into()))?,
        };
        config.validate()?;
        let vocab_hash = u64::from_str_radix(get("vocab_hash")?, 16)
            .map_err(|_| EncoderError::Checkpoint("bad header vocab_hash".into()))?;
        let mut params = Vec::new();
        for (name, shape) in shapes(&config) {
            let t = ckpt.tensor(&name).ok_or_else(|| EncoderError::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(EncoderError::Checkpoint(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            params.push((name, Tensor::new(shape, t.data().to_vec())?));
        }
        Ok(Self { config, vocab_hash, params })
    }

    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<(), EncoderError> {
        Ok(write_checkpoint(path, &self.to_checkpoint(extra))?)
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }

    /// Loads a checkpoint and checks it against `vocab`.
    pub fn load_for_vocab(path: &Path, vocab: &Vocabulary) -> Result<Self, EncoderError> {
        let state = Self::load(path)?;
        state.check_vocab(vocab)?;
        Ok(state)
    }
}
