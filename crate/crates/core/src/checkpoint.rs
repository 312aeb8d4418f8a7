//! Checkpoint binary format.
//!
//! Little-endian layout:
//!
//! ```text
//! magic  b"W2SD"
//! u32    format version (1)
//! u32    record count
//! records, each:
//!   u32      name length, then that many UTF-8 bytes
//!   u32      shape rank, then rank u32 dims
//!   f64 * prod(dims)   payload
//! u32    CRC32 of the records region (everything between the header and
//!        this footer)
//! ```
//!
//! The decoder is hardened against untrusted input: every length is
//! checked against the remaining buffer before any allocation, and the
//! CRC must match. Parameter values must be finite.

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{Layout, ParamVector};

pub const MAGIC: &[u8; 4] = b"W2SD";
pub const VERSION: u32 = 1;

const MAX_NAME_LEN: u32 = 4096;
const MAX_RANK: u32 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn encode(tensors: &[CheckpointTensor]) -> Vec<u8> {
    let mut records = Vec::new();
    for t in tensors {
        records.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        records.extend_from_slice(t.name.as_bytes());
        records.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            records.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.values {
            records.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&records);
    let mut out = Vec::with_capacity(12 + records.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    out.extend_from_slice(&records);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<CheckpointTensor>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    if bytes.len() < 16 {
        return Err(Error::Checkpoint("missing footer".into()));
    }
    let records_start = r.pos;
    let records_end = bytes.len() - 4;
    if records_end < records_start {
        return Err(Error::Checkpoint("missing footer".into()));
    }
    let stored_crc = u32::from_le_bytes(bytes[records_end..].try_into().unwrap());
    let actual_crc = crc32fast::hash(&bytes[records_start..records_end]);
    if stored_crc != actual_crc {
        return Err(Error::Checkpoint(format!(
            "crc mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )));
    }
    let mut tensors = Vec::new();
    for i in 0..count {
        let name_len = r.u32()?;
        if name_len > MAX_NAME_LEN {
            return Err(Error::Checkpoint(format!("record {i}: name length {name_len} too large")));
        }
        let name = std::str::from_utf8(r.take(name_len as usize)?)
            .map_err(|_| Error::Checkpoint(format!("record {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u32()?;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("record {i}: rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut len: usize = 1;
        for _ in 0..rank {
            let d = r.u32()? as usize;
            len = len
                .checked_mul(d)
                .ok_or_else(|| Error::Checkpoint(format!("record {i}: shape overflow")))?;
            shape.push(d);
        }
        // every element takes 8 bytes; reject before allocating
        if len > (records_end.saturating_sub(r.pos)) / 8 {
            return Err(Error::Checkpoint(format!(
                "record {i}: payload of {len} elements exceeds remaining bytes"
            )));
        }
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            let v = r.f64()?;
            if !v.is_finite() {
                return Err(Error::Checkpoint(format!("record {i} ({name}): non-finite value {v}")));
            }
            values.push(v);
        }
        tensors.push(CheckpointTensor { name, shape, values });
    }
    if r.pos != records_end {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last record",
            records_end - r.pos
        )));
    }
    Ok(tensors)
}

pub fn save(path: &Path, tensors: &[CheckpointTensor]) -> Result<()> {
    std::fs::write(path, encode(tensors))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<CheckpointTensor>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes)
}

/// Tensor records for a parameter vector, names prefixed with a role tag
/// such as `gen/` or `pre/`.
pub fn tensors_from_params(prefix: &str, params: &ParamVector) -> Vec<CheckpointTensor> {
    params
        .layout()
        .tensors()
        .iter()
        .map(|d| CheckpointTensor {
            name: format!("{prefix}{}", d.name),
            shape: d.shape.clone(),
            values: params.tensor(&d.name).to_vec(),
        })
        .collect()
}

/// Rebuild a parameter vector from prefixed records. Every tensor of the
/// layout must be present with the exact shape, otherwise the checkpoint
/// does not match the configuration.
pub fn params_from_tensors(prefix: &str, layout: Arc<Layout>, tensors: &[CheckpointTensor]) -> Result<ParamVector> {
    let mut params = ParamVector::zeros(layout.clone());
    for d in layout.tensors() {
        let want = format!("{prefix}{}", d.name);
        let t = tensors
            .iter()
            .find(|t| t.name == want)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {want}")))?;
        if t.shape != d.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {want}: shape {:?} does not match configured {:?}",
                t.shape, d.shape
            )));
        }
        params.tensor_mut(&d.name).copy_from_slice(&t.values);
    }
    Ok(params)
}

/// True when the records contain any tensor under the given role prefix.
pub fn has_prefix(tensors: &[CheckpointTensor], prefix: &str) -> bool {
    tensors.iter().any(|t| t.name.starts_with(prefix))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Activation, MlpNet};

    fn sample_tensors() -> Vec<CheckpointTensor> {
        vec![
            CheckpointTensor {
                name: "pre/layer0/w".into(),
                shape: vec![2, 3],
                values: vec![0.5, -1.25, 3.0, 0.0, 1e-8, -42.0],
            },
            CheckpointTensor {
                name: "pre/layer0/b".into(),
                shape: vec![2],
                values: vec![0.125, -0.5],
            },
        ]
    }

    #[test]
    fn roundtrip_preserves_tensors_exactly() {
        let ts = sample_tensors();
        let bytes = encode(&ts);
        assert_eq!(&bytes[..4], MAGIC);
        let back = decode(&bytes).unwrap();
        assert_eq!(ts, back);
    }

    #[test]
    fn corrupted_inputs_are_rejected() {
        let ts = sample_tensors();
        let good = encode(&ts);
        // bad magic
        let mut b = good.clone();
        b[0] = b'X';
        assert!(decode(&b).is_err());
        // bad version
        let mut b = good.clone();
        b[4] = 9;
        assert!(decode(&b).is_err());
        // flipped payload bit breaks the crc
        let mut b = good.clone();
        b[20] ^= 1;
        assert!(matches!(decode(&b), Err(Error::Checkpoint(m)) if m.contains("crc")));
        // truncation
        assert!(decode(&good[..good.len() - 5]).is_err());
        assert!(decode(&good[..10]).is_err());
        assert!(decode(b"").is_err());
    }

    #[test]
    fn oversized_claims_do_not_allocate() {
        // a record that claims 2^30 elements in a tiny buffer must be
        // rejected by the remaining-bytes check, not by OOM
        let mut records = Vec::new();
        records.extend_from_slice(&4u32.to_le_bytes());
        records.extend_from_slice(b"huge");
        records.extend_from_slice(&1u32.to_le_bytes());
        records.extend_from_slice(&(1u32 << 30).to_le_bytes());
        let crc = crc32fast::hash(&records);
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&records);
        b.extend_from_slice(&crc.to_le_bytes());
        let err = decode(&b).unwrap_err().to_string();
        assert!(err.contains("exceeds remaining"), "{err}");
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let ts = vec![CheckpointTensor {
            name: "x".into(),
            shape: vec![1],
            values: vec![f64::NAN],
        }];
        let bytes = encode(&ts);
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn params_roundtrip_through_prefixed_records() {
        let net = MlpNet::new(2, &[4], 4, 0, Activation::Silu).unwrap();
        let params = net.init_params(3);
        let ts = tensors_from_params("gen/", &params);
        let back = params_from_tensors("gen/", net.layout(), &ts).unwrap();
        assert_eq!(params.values(), back.values());
        // wrong prefix is a mismatch
        assert!(params_from_tensors("pre/", net.layout(), &ts).is_err());
        // wrong architecture is a mismatch
        let other = MlpNet::new(2, &[5], 4, 0, Activation::Silu).unwrap();
        assert!(params_from_tensors("gen/", other.layout(), &ts).is_err());
    }
}
