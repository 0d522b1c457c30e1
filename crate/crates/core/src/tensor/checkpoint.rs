//! Single-file parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "EGOCKPT\0"
//! version    u32       currently 1
//! dtype      u32       value width in bytes: 4 (f32) or 8 (f64)
//! meta_len   u32       followed by meta_len bytes of UTF-8 `key=value` lines
//! count      u32       number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, ndim x u64 extents
//!   values   product(extents) x dtype bytes, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EGOCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint<S> {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn from_store(store: &ParamStore<S>, metadata: BTreeMap<String, String>) -> Self {
        Checkpoint {
            metadata,
            tensors: store
                .iter()
                .map(|(_, name, t)| {
                    let mut t = t.clone();
                    t.zero_grad();
                    (name.to_string(), t)
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(S::BYTES as u32).to_le_bytes());
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint(format!(
                    "metadata entry {k:?} cannot be encoded"
                )));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let width = r.u32()? as usize;
        if width != 4 && width != 8 {
            return Err(Error::Checkpoint(format!("unsupported value width {width}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let metadata = meta
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Checkpoint(format!("bad metadata line {l:?}")))
            })
            .collect::<Result<_>>()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(width).ok_or_else(|| {
                Error::Checkpoint(format!("tensor {name} is implausibly large"))
            })?)?;
            let values = raw
                .chunks_exact(width)
                .map(|c| match width {
                    4 => S::from_f64(f32::read_le(c) as f64),
                    _ => S::from_f64(f64::read_le(c)),
                })
                .collect();
            let t = Tensor::new(&shape, values)
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Checkpoint { metadata, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn write_checkpoint<S: Scalar>(path: &Path, ckpt: &Checkpoint<S>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 1..64),
                            key in "[a-z.]{1,12}", val in "[ -~]{0,20}") {
            let n = values.len();
            let t = Tensor::new(&[n], values).unwrap();
            let mut metadata = BTreeMap::new();
            metadata.insert(key, val.replace('\n', ""));
            let c = Checkpoint { metadata: metadata.clone(), tensors: vec![("w".into(), t.clone())] };
            let back = Checkpoint::<f64>::from_bytes(&c.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.metadata, metadata);
            prop_assert_eq!(back.tensors[0].1.data(), t.data());
        }
    }

    #[test]
    fn header_layout() {
        let c = Checkpoint::<f32> {
            metadata: BTreeMap::new(),
            tensors: vec![("b".into(), Tensor::new(&[2], vec![1.0, -2.0]).unwrap())],
        };
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 4);
        assert_eq!(&bytes[bytes.len() - 4..], &(-2.0f32).to_le_bytes());
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let c = Checkpoint::<f64> {
            metadata: BTreeMap::new(),
            tensors: vec![("w".into(), Tensor::zeros(&[3, 2]))],
        };
        let bytes = c.to_bytes().unwrap();
        assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f64>::from_bytes(&bad).is_err());
    }
}
