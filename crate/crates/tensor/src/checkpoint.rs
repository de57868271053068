//! Checkpoint container: a UTF-8 text header followed by raw tensor data.
//!
//! ```text
//! CLAIMRISK-CHECKPOINT 1
//! key=value            (sorted metadata, e.g. architecture and vocab hash)
//! tensor<TAB>name<TAB>d0,d1<TAB>element_count
//! payload_sha256=<hex>
//! END
//! <little-endian f32 values of every tensor, in header order>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::{Result, Tensor, TensorError};

const MAGIC: &str = "CLAIMRISK-CHECKPOINT 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        for (_, t) in &self.tensors {
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(payload.len() + 4096);
        writeln!(out, "{MAGIC}")?;
        for (k, v) in &self.header {
            if k.contains(['=', '\n', '\t']) || v.contains('\n') || k == "payload_sha256" {
                return Err(TensorError::Format(format!("invalid header entry {k:?}")));
            }
            writeln!(out, "{k}={v}")?;
        }
        for (name, t) in &self.tensors {
            if name.contains(['\t', '\n']) {
                return Err(TensorError::Format(format!("invalid tensor name {name:?}")));
            }
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            writeln!(out, "tensor\t{name}\t{}\t{}", dims.join(","), t.len())?;
        }
        writeln!(out, "payload_sha256={}", hex::encode(Sha256::digest(&payload)))?;
        writeln!(out, "END")?;
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| TensorError::Format(m.to_string());
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| fmt("truncated header"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| fmt("header is not UTF-8"))
        };
        if next_line()? != MAGIC {
            return Err(fmt("bad magic line"));
        }
        let mut header = BTreeMap::new();
        let mut index = Vec::new();
        let mut checksum = None;
        loop {
            let line = next_line()?;
            if line == "END" {
                break;
            }
            if let Some(rest) = line.strip_prefix("tensor\t") {
                let parts: Vec<&str> = rest.split('\t').collect();
                let [name, dims, count] = parts[..] else {
                    return Err(fmt("malformed tensor line"));
                };
                let shape = if dims.is_empty() {
                    Vec::new()
                } else {
                    dims.split(',')
                        .map(|d| d.parse::<usize>().map_err(|_| fmt("bad dimension")))
                        .collect::<Result<Vec<_>>>()?
                };
                let count: usize = count.parse().map_err(|_| fmt("bad element count"))?;
                index.push((name.to_string(), shape, count));
            } else if let Some(hex) = line.strip_prefix("payload_sha256=") {
                checksum = Some(hex.to_string());
            } else if let Some((k, v)) = line.split_once('=') {
                header.insert(k.to_string(), v.to_string());
            } else {
                return Err(fmt("malformed header line"));
            }
        }
        let payload = &bytes[pos..];
        let checksum = checksum.ok_or_else(|| fmt("missing payload checksum"))?;
        if hex::encode(Sha256::digest(payload)) != checksum {
            return Err(TensorError::ChecksumMismatch);
        }
        let expected: usize = index.iter().map(|(_, _, c)| c * 4).sum();
        if expected != payload.len() {
            return Err(fmt("payload length does not match the tensor index"));
        }
        let mut tensors = Vec::with_capacity(index.len());
        let mut off = 0;
        for (name, shape, count) in index {
            let data: Vec<f32> = payload[off..off + count * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            off += count * 4;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { header, tensors })
    }
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut header = BTreeMap::new();
        header.insert("d_model".into(), "8".into());
        header.insert("vocab_hash".into(), "00ff".into());
        Checkpoint {
            header,
            tensors: vec![
                ("a".into(), Tensor::new(vec![2, 2], vec![1.0, -0.5, f32::MIN_POSITIVE, 3.25]).unwrap()),
                ("b".into(), Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()),
            ],
        }
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    }

    #[test]
    fn tampered_payload_is_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(TensorError::ChecksumMismatch)));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        write_checkpoint(&path, &sample()).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), sample());
    }
}
