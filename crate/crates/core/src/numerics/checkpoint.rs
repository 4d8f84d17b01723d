//! Tensor container: `u64` little-endian header length, a JSON header mapping
//! tensor names to `{dtype, shape, offsets}`, then raw little-endian `f32` data.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";

#[derive(Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: ParamStore,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(tensors: ParamStore) -> Self {
        Self {
            tensors,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            header.insert(METADATA_KEY.into(), serde_json::to_value(&self.metadata)?);
        }
        let mut offset = 0;
        for (name, t) in self.tensors.iter() {
            if name == METADATA_KEY {
                return Err(Error::Checkpoint(format!("reserved tensor name `{name}`")));
            }
            let bytes = t.numel() * 4;
            let entry = Entry {
                dtype: "F32".into(),
                shape: t.shape().to_vec(),
                data_offsets: [offset, offset + bytes],
            };
            header.insert(name.to_string(), serde_json::to_value(entry)?);
            offset += bytes;
        }
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.tensors.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| bad("file shorter than header length prefix"))?;
        let hlen = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| bad("header length overflow"))?;
        let header_end = 8usize.checked_add(hlen).ok_or_else(|| bad("header length overflow"))?;
        let header = bytes.get(8..header_end).ok_or_else(|| bad("truncated header"))?;
        let mut map: BTreeMap<String, serde_json::Value> = serde_json::from_slice(header)?;
        let metadata = match map.remove(METADATA_KEY) {
            Some(v) => serde_json::from_value(v)?,
            None => BTreeMap::new(),
        };
        let payload = &bytes[header_end..];
        let mut tensors = ParamStore::new();
        let mut expected_end = 0;
        for (name, v) in map {
            let e: Entry = serde_json::from_value(v)?;
            if e.dtype != "F32" {
                return Err(Error::Checkpoint(format!("tensor `{name}` has unsupported dtype {}", e.dtype)));
            }
            let [start, end] = e.data_offsets;
            let n: usize = e.shape.iter().product();
            if end < start || end - start != n * 4 || end > payload.len() {
                return Err(Error::Checkpoint(format!("tensor `{name}` has inconsistent offsets")));
            }
            expected_end = expected_end.max(end);
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, Tensor::new(e.shape, data)?);
        }
        if expected_end != payload.len() {
            return Err(bad("trailing bytes after tensor payload"));
        }
        Ok(Self { tensors, metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut s = ParamStore::new();
        s.insert("b", Tensor::new([2], vec![f32::MIN_POSITIVE, -0.0]).unwrap());
        s.insert("a/w", Tensor::new([2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.5, -6.25]).unwrap());
        let mut c = Checkpoint::new(s);
        c.metadata.insert("k".into(), "{\"x\":1}".into());
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..4]).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_bits_survive(bits in proptest::collection::vec(any::<u32>(), 1..64)) {
            let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            let mut s = ParamStore::new();
            s.insert("t", Tensor::new([data.len()], data).unwrap());
            let bytes = Checkpoint::new(s).to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
