//! Flat parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"TPCK"
//! version  u32 (= 1)
//! meta     u32 length + UTF-8 bytes (free-form, holds the config echo)
//! count    u32
//! per parameter:
//!   name      u32 length + UTF-8 bytes
//!   trainable u8
//!   ndim      u32, then ndim × u64 dims
//!   values    numel × f64 (IEEE-754 bits)
//! ```
//!
//! Values are stored as raw bit patterns, so a round trip is bit-exact.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TPCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: impl Into<String>) -> Self {
        Self::from_store_filtered(store, meta, |_| true)
    }

    pub fn from_store_filtered(
        store: &ParamStore,
        meta: impl Into<String>,
        keep: impl Fn(&str) -> bool,
    ) -> Self {
        let entries = store
            .iter()
            .filter(|(_, p)| keep(&p.name))
            .map(|(_, p)| Entry {
                name: p.name.clone(),
                trainable: p.trainable,
                value: p.value.clone(),
            })
            .collect();
        Self {
            meta: meta.into(),
            entries,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.meta);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            put_str(&mut out, &e.name);
            out.push(u8::from(e.trainable));
            out.extend_from_slice(&(e.value.shape().len() as u32).to_le_bytes());
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let meta = r.string()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let trainable = r.take(1)?[0] != 0;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_bits(r.u64()?));
            }
            let value = Tensor::new(shape, data).map_err(|e| e.to_string())?;
            entries.push(Entry {
                name,
                trainable,
                value,
            });
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self { meta, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|detail| Error::Checkpoint {
            path: path.to_path_buf(),
            detail,
        })
    }

    /// Writes stored values into `store` by name. Every entry must name an
    /// existing parameter of the same shape; trainable flags are left alone.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        for e in &self.entries {
            let id = store.require(&e.name)?;
            if store.value(id).shape() != e.value.shape() {
                return Err(Error::dim(
                    "restore_into",
                    format!(
                        "`{}`: checkpoint {:?} vs model {:?}",
                        e.name,
                        e.value.shape(),
                        store.value(id).shape()
                    ),
                ));
            }
            *store.value_mut(id) = e.value.clone();
        }
        Ok(())
    }

    /// SHA-256 over the parameter section (metadata excluded), hex encoded.
    pub fn fingerprint(&self) -> String {
        let bare = Checkpoint {
            meta: String::new(),
            entries: self.entries.clone(),
        };
        hex::encode(Sha256::digest(bare.to_bytes()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> std::result::Result<&'b [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(any::<f64>(), 1..40), meta in ".{0,20}") {
            let mut store = ParamStore::new();
            let n = values.len();
            store.add("a.weight", Tensor::new(vec![n], values.clone()).unwrap(), true).unwrap();
            store.add("b", Tensor::scalar(-0.0), false).unwrap();
            let ck = Checkpoint::from_store(&store, meta.clone());
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(&back.meta, &meta);
            prop_assert_eq!(back.entries.len(), 2);
            for (x, y) in back.entries[0].value.data().iter().zip(&values) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
            prop_assert_eq!(back.entries[1].value.data()[0].to_bits(), (-0.0f64).to_bits());
            prop_assert!(back.entries[0].trainable && !back.entries[1].trainable);
        }
    }

    #[test]
    fn corrupt_input_is_rejected() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[3]), true).unwrap();
        let bytes = Checkpoint::from_store(&store, "").to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn fingerprint_ignores_meta() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let a = Checkpoint::from_store(&store, "x").fingerprint();
        let b = Checkpoint::from_store(&store, "y").fingerprint();
        assert_eq!(a, b);
        *store.value_mut(store.id("w").unwrap()) = Tensor::vector(vec![1.0, 2.5]);
        assert_ne!(a, Checkpoint::from_store(&store, "x").fingerprint());
    }
}
