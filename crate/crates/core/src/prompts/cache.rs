//! Persistent prompt-encoding cache.
//!
//! File layout (little-endian), append-only:
//!
//! ```text
//! magic  b"TPCBANK1"
//! records, each:
//!   key    u32 length + UTF-8 bytes  ("<start>|<end>|<granularity s>|<fingerprint>")
//!   width  u32
//!   values width × f64 (IEEE-754 bits)
//! ```
//!
//! A truncated trailing record (an interrupted write) is dropped on load.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{encode_span, TemporalSpan};
use crate::backbone::Backbone;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TPCBANK1";

#[derive(Debug, Default)]
pub struct BankCache {
    entries: HashMap<String, Vec<f64>>,
    file: Option<(PathBuf, BufWriter<File>)>,
    hits: usize,
    misses: usize,
}

impl BankCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) the cache file at `path` and loads its records.
    pub fn open(path: &Path) -> Result<Self> {
        let err = |detail: String| Error::Checkpoint {
            path: path.to_path_buf(),
            detail,
        };
        let mut entries = HashMap::new();
        let mut valid_len = MAGIC.len() as u64;
        if path.exists() {
            let mut bytes = Vec::new();
            File::open(path)?.read_to_end(&mut bytes)?;
            if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
                return Err(err("not a bank cache file".into()));
            }
            let mut pos = MAGIC.len();
            while let Some((key, values, next)) = read_record(&bytes, pos) {
                entries.insert(key, values);
                pos = next;
            }
            valid_len = pos as u64;
        } else {
            let mut f = File::create(path)?;
            f.write_all(MAGIC)?;
        }
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(valid_len)?;
        let mut f = BufWriter::new(f);
        use std::io::Seek;
        f.seek(std::io::SeekFrom::End(0))?;
        Ok(Self {
            entries,
            file: Some((path.to_path_buf(), f)),
            hits: 0,
            misses: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hits(&self) -> usize {
        self.hits
    }

    pub fn misses(&self) -> usize {
        self.misses
    }

    pub fn key(span: &TemporalSpan, backbone: &Backbone) -> String {
        format!("{}|{}", span.key(), backbone.fingerprint())
    }

    pub fn get(&self, span: &TemporalSpan, backbone: &Backbone) -> Option<&[f64]> {
        self.entries.get(&Self::key(span, backbone)).map(Vec::as_slice)
    }

    pub fn get_or_encode(&mut self, span: &TemporalSpan, backbone: &Backbone) -> Result<Vec<f64>> {
        let key = Self::key(span, backbone);
        if let Some(v) = self.entries.get(&key) {
            self.hits += 1;
            return Ok(v.clone());
        }
        self.misses += 1;
        let v = encode_span(span, backbone)?;
        if let Some((_, w)) = &mut self.file {
            write_record(w, &key, &v)?;
            w.flush()?;
        }
        self.entries.insert(key, v.clone());
        Ok(v)
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }
}

fn write_record<W: Write>(w: &mut W, key: &str, values: &[f64]) -> std::io::Result<()> {
    w.write_all(&(key.len() as u32).to_le_bytes())?;
    w.write_all(key.as_bytes())?;
    w.write_all(&(values.len() as u32).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_bits().to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(bytes: &[u8], pos: usize) -> Option<u32> {
    bytes
        .get(pos..pos + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

fn read_record(bytes: &[u8], pos: usize) -> Option<(String, Vec<f64>, usize)> {
    let klen = read_u32(bytes, pos)? as usize;
    let key = std::str::from_utf8(bytes.get(pos + 4..pos + 4 + klen)?).ok()?.to_string();
    let mut p = pos + 4 + klen;
    let width = read_u32(bytes, p)? as usize;
    p += 4;
    let raw = bytes.get(p..p + 8 * width)?;
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    Some((key, values, p + 8 * width))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::DecoderConfig;
    use crate::prompts::build_bank;
    use crate::series::{parse_timestamp, Granularity};

    fn backbone(seed: u64) -> Backbone {
        let cfg = DecoderConfig {
            depth: 1,
            width: 8,
            heads: 2,
            ffn_mult: 2,
            max_seq: 128,
            ..DecoderConfig::default()
        };
        Backbone::new(&cfg, seed).unwrap()
    }

    fn spans(n: usize) -> Vec<TemporalSpan> {
        let t0 = parse_timestamp("2017-03-01").unwrap();
        (0..n)
            .map(|i| {
                let g = Granularity::HOURLY;
                TemporalSpan::new(g.advance(t0, i as i64), g.advance(t0, i as i64 + 3), g).unwrap()
            })
            .collect()
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.cache");
        let bb = backbone(1);
        let s = spans(4);
        let first = {
            let mut c = BankCache::open(&path).unwrap();
            let bank = build_bank(&s, &bb, &mut c).unwrap();
            assert_eq!((c.hits(), c.misses()), (0, 4));
            bank
        };
        let mut c = BankCache::open(&path).unwrap();
        assert_eq!(c.len(), 4);
        let second = build_bank(&s, &bb, &mut c).unwrap();
        assert_eq!((c.hits(), c.misses()), (4, 0));
        assert_eq!(first, second);
        let fresh = build_bank(&s, &bb, &mut BankCache::in_memory()).unwrap();
        assert_eq!(fresh, second);
    }

    #[test]
    fn other_backbone_misses() {
        let mut c = BankCache::in_memory();
        let s = spans(1);
        build_bank(&s, &backbone(1), &mut c).unwrap();
        build_bank(&s, &backbone(2), &mut c).unwrap();
        assert_eq!(c.misses(), 2);
    }

    #[test]
    fn truncated_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.cache");
        let bb = backbone(1);
        {
            let mut c = BankCache::open(&path).unwrap();
            build_bank(&spans(2), &bb, &mut c).unwrap();
        }
        let len = std::fs::metadata(&path).unwrap().len();
        OpenOptions::new().write(true).open(&path).unwrap().set_len(len - 5).unwrap();
        let mut c = BankCache::open(&path).unwrap();
        assert_eq!(c.len(), 1);
        build_bank(&spans(2), &bb, &mut c).unwrap();
        drop(c);
        assert_eq!(BankCache::open(&path).unwrap().len(), 2);
    }

    #[test]
    fn foreign_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        std::fs::write(&path, b"hello world").unwrap();
        assert!(BankCache::open(&path).is_err());
    }
}
