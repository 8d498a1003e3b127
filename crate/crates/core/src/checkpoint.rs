//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TAUF"  u32 version
//! u32 config_len   config JSON (UTF-8)
//! u32 tensor_count
//! per tensor: u32 name_len, name, u32 rank, u32 dims[rank],
//!             u64 offset, u64 byte_len, u32 crc32
//! u64 payload_len  payload (f32 LE)
//! ```
//!
//! Tensor offsets are relative to the start of the payload.

use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::TauFlowNet;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TAUF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
    crc: u32,
    /// Where the entry starts in the file, for diagnostics.
    at: u64,
}

impl Checkpoint {
    pub fn from_store(config: &ModelConfig, store: &ParamStore<f32>) -> Self {
        Checkpoint {
            config: config.clone(),
            tensors: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let config = self.config.to_json().into_bytes();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());

        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let start = payload.len() as u64;
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            let bytes = &payload[start as usize..];
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&start.to_le_bytes());
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&crc32fast::hash(bytes).to_le_bytes());
        }
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad(0, "bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(4, format!("unsupported format version {version}, expected {VERSION}")));
        }
        let config_len = r.u32()? as usize;
        let config_at = r.pos;
        let text = std::str::from_utf8(r.take(config_len)?).map_err(|e| bad(config_at, format!("config is not UTF-8: {e}")))?;
        let config = ModelConfig::from_json(text).map_err(|e| bad(config_at, format!("config: {e}")))?;

        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.pos as u64;
            let name_len = r.u32()? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| bad(name_at, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(bad(name_at + name_len, format!("tensor {name} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let (offset, len, crc) = (r.u64()?, r.u64()?, r.u32()?);
            entries.push(Entry { name, shape, offset, len, crc, at });
        }

        let payload_len_at = r.pos;
        let payload_len = r.u64()?;
        let payload_at = r.pos;
        let remaining = (bytes.len() - payload_at) as u64;
        if payload_len != remaining {
            return Err(bad(payload_len_at, format!("payload length {payload_len} but {remaining} bytes follow")));
        }
        let declared: u64 = entries.iter().map(|e| e.len).sum();
        if declared != payload_len {
            return Err(bad(payload_len_at, format!("manifest covers {declared} bytes, payload has {payload_len}")));
        }
        let payload = &bytes[payload_at..];

        let mut tensors = Vec::with_capacity(entries.len());
        for e in entries {
            let numel: usize = e.shape.iter().product();
            if e.len != 4 * numel as u64 {
                return Err(bad(e.at, format!("tensor {} has shape {:?} but {} bytes", e.name, e.shape, e.len)));
            }
            let end = e.offset.checked_add(e.len).filter(|&end| end <= payload_len);
            let Some(end) = end else {
                return Err(bad(e.at, format!("tensor {} extends past the payload", e.name)));
            };
            let raw = &payload[e.offset as usize..end as usize];
            if crc32fast::hash(raw) != e.crc {
                return Err(bad(payload_at as u64 + e.offset, format!("checksum mismatch in tensor {}", e.name)));
            }
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Checkpoint { config, tensors })
    }

    /// Copies every tensor into `store`. Names and shapes must match exactly.
    pub fn restore_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Invalid(format!(
                "checkpoint holds {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, t) in &self.tensors {
            let Some(dst) = store.by_name_mut(name) else {
                return Err(Error::Invalid(format!("checkpoint tensor {name} has no counterpart in the model")));
            };
            if dst.shape() != t.shape() {
                return Err(Error::Invalid(format!(
                    "shape conflict for {name}: checkpoint {:?}, model {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t.clone();
        }
        Ok(())
    }

    /// The network described by the stored config, with the stored weights.
    pub fn into_model(self) -> Result<(TauFlowNet, ParamStore<f32>)> {
        self.model_with(&self.config.clone())
    }

    /// Builds the network from `config` and loads the stored weights into it.
    pub fn model_with(&self, config: &ModelConfig) -> Result<(TauFlowNet, ParamStore<f32>)> {
        let (net, mut store) = TauFlowNet::build::<f32>(config, 0)?;
        self.restore_into(&mut store)?;
        Ok((net, store))
    }
}

fn bad(offset: impl TryInto<u64>, reason: impl Into<String>) -> Error {
    Error::Checkpoint { offset: offset.try_into().unwrap_or(u64::MAX), reason: reason.into() }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let have = self.bytes.len() - self.pos;
        if n > have {
            return Err(bad(self.pos, format!("truncated: need {n} bytes, {have} left")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save(path: &Path, config: &ModelConfig, store: &ParamStore<f32>) -> Result<()> {
    std::fs::write(path, Checkpoint::from_store(config, store).encode()).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { input_size: 16, base_channel: 8, hidden_channels: 8, group_embed_dim: 4, norm_groups: 4, ..ModelConfig::default() }
    }

    fn encoded() -> (ModelConfig, ParamStore<f32>, Vec<u8>) {
        let cfg = small();
        let (_, store) = TauFlowNet::build::<f32>(&cfg, 3).unwrap();
        let bytes = Checkpoint::from_store(&cfg, &store).encode();
        (cfg, store, bytes)
    }

    #[test]
    fn weights_survive_bit_exactly() {
        let (cfg, store, bytes) = encoded();
        let ck = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(ck.config, cfg);
        let (_, restored) = ck.into_model().unwrap();
        for ((na, a), (nb, b)) in store.iter().zip(restored.iter()) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn corrupt_payload_byte_is_caught() {
        let (_, _, mut bytes) = encoded();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        let err = Checkpoint::decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum mismatch"), "{err}");
    }

    #[test]
    fn truncation_magic_and_version() {
        let (_, _, bytes) = encoded();
        let err = Checkpoint::decode(&bytes[..bytes.len() - 1]).unwrap_err().to_string();
        assert!(err.contains("payload length"), "{err}");
        let err = Checkpoint::decode(&bytes[..10]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { offset: 8, .. }), "{err}");
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(Checkpoint::decode(&b), Err(Error::Checkpoint { offset: 0, .. })));
        let mut b = bytes;
        b[4] = 2;
        let err = Checkpoint::decode(&b).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
    }

    #[test]
    fn group_count_mismatch_is_a_shape_conflict() {
        let (_, _, bytes) = encoded();
        let ck = Checkpoint::decode(&bytes).unwrap();
        let runtime = ModelConfig { max_groups: 7, ..small() };
        let err = ck.model_with(&runtime).unwrap_err().to_string();
        assert!(err.contains("shape conflict for grouping.pattern_head"), "{err}");
    }
}
