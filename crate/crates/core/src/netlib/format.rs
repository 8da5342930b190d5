//! Binary model files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "NNZM" | u16 version (=1) | u32 header_len | header JSON (UTF-8) | payloads...
//! ```
//!
//! The header lists every tensor with its name, shape, role, storage kind and
//! whether it carries a prune mask. Payloads follow in header order:
//!
//! * dense: `numel × f32`, then for masked tensors a packed mask bitmap
//!   (`ceil(numel/8)` bytes, LSB first).
//! * sparse: `u64 nnz | nnz × u32 flat index | nnz × f32 value` holding the
//!   nonzero effective weights. Unmasked positions that are exactly zero are
//!   listed in the header entry's `kept_zeros`, so the payload stays at
//!   `8 + 8·nnz` bytes.

use std::collections::BTreeMap;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::model::Model;
use super::spec::ModelSpec;
use crate::error::{Error, Result};
use crate::json;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NNZM";
pub const VERSION: u16 = 1;
/// Magic, version and header length.
pub const PREAMBLE_BYTES: u64 = 4 + 2 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Storage {
    Dense,
    Sparse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    pub storage: Storage,
    pub masked: bool,
    /// Sparse storage only: kept positions whose value is exactly zero.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kept_zeros: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub spec: ModelSpec,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub tensors: Vec<TensorEntry>,
}

/// Bytes of a sparse weight payload with `nnz` stored values.
pub fn sparse_payload_bytes(nnz: u64) -> u64 {
    8 + nnz * (4 + 4)
}

pub fn dense_payload_bytes(numel: u64) -> u64 {
    4 * numel
}

pub fn mask_bitmap_bytes(numel: u64) -> u64 {
    numel.div_ceil(8)
}

fn header_for(model: &Model, storage: Storage) -> Header {
    let mut tensors = Vec::new();
    for (name, t) in model.params() {
        let mask = model.mask(name);
        let masked = mask.is_some();
        let storage = if masked { storage } else { Storage::Dense };
        let kept_zeros = match (storage, mask) {
            (Storage::Sparse, Some(mask)) => t
                .data()
                .iter()
                .zip(mask)
                .enumerate()
                .filter(|(_, (v, keep))| **keep && **v == 0.0)
                .map(|(i, _)| i as u32)
                .collect(),
            _ => Vec::new(),
        };
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            role: Role::Param,
            storage,
            masked,
            kept_zeros,
        });
    }
    for (name, t) in model.buffers() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            role: Role::Buffer,
            storage: Storage::Dense,
            masked: false,
            kept_zeros: Vec::new(),
        });
    }
    Header {
        spec: model.spec().clone(),
        embedding_dim: model.spec().embedding_dim,
        num_classes: model.spec().num_classes,
        tensors,
    }
}

/// Serializes a model. Under sparse storage only prunable (masked) tensors are
/// stored sparsely; everything else stays dense.
pub fn encode(model: &Model, storage: Storage) -> Result<Vec<u8>> {
    let header = header_for(model, storage);
    let header_json = json::to_sorted_string(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(header_json.as_bytes());
    for entry in &header.tensors {
        let t = match entry.role {
            Role::Param => &model.params()[entry.name.as_str()],
            Role::Buffer => &model.buffers()[entry.name.as_str()],
        };
        let mask = model.mask(&entry.name);
        match entry.storage {
            Storage::Dense => {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                if let Some(mask) = mask {
                    let mut bits = vec![0u8; mask.len().div_ceil(8)];
                    for (i, keep) in mask.iter().enumerate() {
                        if *keep {
                            bits[i / 8] |= 1 << (i % 8);
                        }
                    }
                    out.extend_from_slice(&bits);
                }
            }
            Storage::Sparse => {
                let mask = mask.expect("sparse storage only for masked tensors");
                let mut idx = Vec::new();
                let mut vals = Vec::new();
                for (i, (v, keep)) in t.data().iter().zip(mask).enumerate() {
                    if *keep && *v != 0.0 {
                        idx.push(i as u32);
                        vals.push(*v);
                    }
                }
                out.extend_from_slice(&(idx.len() as u64).to_le_bytes());
                idx.iter().for_each(|i| out.extend_from_slice(&i.to_le_bytes()));
                vals.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.fail("length overflow"))?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    /// Strictly ascending indices below `numel`.
    fn indices(&mut self, n: usize, numel: usize, what: &str) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(n.min(numel));
        for _ in 0..n {
            let at = self.pos;
            let i = self.u32(what)? as usize;
            if i >= numel || out.last().is_some_and(|&prev| prev >= i) {
                return Err(Error::Format {
                    offset: at as u64,
                    reason: format!("{what}: index {i} out of order or >= {numel}"),
                });
            }
            out.push(i);
        }
        Ok(out)
    }

    fn count(&mut self, limit: usize, what: &str) -> Result<usize> {
        let at = self.pos;
        let n = self.u64(what)?;
        if n > limit as u64 {
            return Err(Error::Format {
                offset: at as u64,
                reason: format!("{what}: count {n} exceeds tensor size {limit}"),
            });
        }
        Ok(n as usize)
    }
}

/// Parses the preamble and JSON header, returning it with the payload offset.
pub fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: format!("bad magic {magic:?}"),
        });
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let len = r.u32("header length")? as usize;
    let start = r.pos;
    let raw = r.take(len, "header")?;
    let header: Header = serde_json::from_slice(raw).map_err(|e| Error::Format {
        offset: start as u64,
        reason: format!("invalid header JSON: {e}"),
    })?;
    Ok((header, r.pos))
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let (header, start) = read_header(bytes)?;
    let mut r = Reader { buf: bytes, pos: start };
    let mut params = IndexMap::new();
    let mut buffers = IndexMap::new();
    let mut masks = BTreeMap::new();
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        let what = entry.name.as_str();
        let (data, mask) = match entry.storage {
            Storage::Dense => {
                let data = r.f32s(numel, what)?;
                let mask = if entry.masked {
                    let bits = r.take(numel.div_ceil(8), what)?;
                    Some((0..numel).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect::<Vec<_>>())
                } else {
                    None
                };
                (data, mask)
            }
            Storage::Sparse => {
                if !entry.masked {
                    return Err(r.fail(format!("{what}: sparse storage requires a mask")));
                }
                let nnz = r.count(numel, what)?;
                let idx = r.indices(nnz, numel, what)?;
                let vals = r.f32s(nnz, what)?;
                let mut data = vec![0.0f32; numel];
                let mut mask = vec![false; numel];
                for (i, v) in idx.iter().zip(vals) {
                    data[*i] = v;
                    mask[*i] = true;
                }
                for &i in &entry.kept_zeros {
                    let i = i as usize;
                    if i >= numel || data[i] != 0.0 {
                        return Err(r.fail(format!("{what}: bad kept-zero index {i}")));
                    }
                    mask[i] = true;
                }
                (data, Some(mask))
            }
        };
        let tensor = Tensor::new(entry.shape.clone(), data)?;
        match entry.role {
            Role::Param => {
                params.insert(entry.name.clone(), tensor);
            }
            Role::Buffer => {
                buffers.insert(entry.name.clone(), tensor);
            }
        }
        if let Some(mask) = mask {
            masks.insert(entry.name.clone(), mask);
        }
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Model::from_parts(header.spec, params, masks, buffers)
}

pub fn save(model: &Model, path: impl AsRef<Path>, storage: Storage) -> Result<u64> {
    let bytes = encode(model, storage)?;
    std::fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netlib::spec::{student_depthwise, InputShape};

    fn model() -> Model {
        Model::build(student_depthwise(InputShape::default(), 8, 4), 11).unwrap()
    }

    #[test]
    fn sparse_payload_arithmetic() {
        assert_eq!(sparse_payload_bytes(125), 1008);
        assert_eq!(dense_payload_bytes(1000), 4000);
        assert_eq!(sparse_payload_bytes(0), 8);
    }

    #[test]
    fn dense_and_sparse_round_trip() {
        let mut m = model();
        let name = "sep2_pw.weight";
        let n = m.param(name).unwrap().numel();
        m.set_mask(name, (0..n).map(|i| i % 4 == 0).collect()).unwrap();
        // an unmasked weight that happens to be zero must survive sparse storage
        m.params_mut().get_mut(name).unwrap().data_mut()[4] = 0.0;
        for storage in [Storage::Dense, Storage::Sparse] {
            let back = decode(&encode(&m, storage).unwrap()).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let bytes = encode(&model(), Storage::Dense).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 4, .. })));
        let cut = bytes.len() - 3;
        match decode(&bytes[..cut]) {
            Err(Error::Format { offset, reason }) => {
                assert!(reason.contains("truncated"));
                assert!(offset < cut as u64);
            }
            other => panic!("expected format error, got {other:?}"),
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Format { .. })));
    }
}
