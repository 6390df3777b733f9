//! Binary files exchanged with the record extractor.
//!
//! Teacher records (`TSE1`), all integers little-endian:
//!
//! ```text
//! header: "TSE1" | u32 version | u32 Dt | u32 delta | u64 count | 16-byte vocab digest
//! record: u64 position key | u32 center id | u8 m | m x (i8 offset | u32 word id | Dt x f32)
//! ```
//!
//! Posterior store (`TPO1`): `"TPO1" | u32 K | u64 count`, then `count` entries
//! of `u64 key | K x f32`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::corpus::{Vocabulary, WordId};
use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic, ByteReader};

pub const RECORD_MAGIC: [u8; 4] = *b"TSE1";
pub const RECORD_VERSION: u32 = 1;
pub const RECORD_HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8 + 16;
pub const POSTERIOR_MAGIC: [u8; 4] = *b"TPO1";
pub const POSTERIOR_HEADER_LEN: usize = 4 + 4 + 8;

/// One pooled contextual vector of a word in the window.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordEntry {
    /// Position relative to the center, in `[-delta, delta]`.
    pub offset: i8,
    pub word: WordId,
    pub vector: Vec<f32>,
}

/// Contextual vectors of one context window. The entry with offset 0 is the
/// center word.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherRecord {
    pub key: u64,
    pub center: WordId,
    pub entries: Vec<RecordEntry>,
}

impl TeacherRecord {
    pub fn center_vector(&self) -> Option<&[f32]> {
        self.entries
            .iter()
            .find(|e| e.offset == 0)
            .map(|e| e.vector.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordStore {
    pub dim: usize,
    pub delta: usize,
    pub digest: [u8; 16],
    pub records: Vec<TeacherRecord>,
}

impl RecordStore {
    pub fn new(dim: usize, delta: usize, digest: [u8; 16]) -> Self {
        RecordStore {
            dim,
            delta,
            digest,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks one record against the store shape.
    pub fn check_record(&self, rec: &TeacherRecord, vocab_size: Option<usize>) -> Result<()> {
        if rec.entries.is_empty() || rec.entries.len() > u8::MAX as usize {
            return Err(Error::Format(format!(
                "record holds {} vectors",
                rec.entries.len()
            )));
        }
        let mut centers = 0;
        for e in &rec.entries {
            if e.vector.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    what: "record vector",
                    expected: self.dim,
                    found: e.vector.len(),
                });
            }
            if (e.offset as i64).unsigned_abs() as usize > self.delta {
                return Err(Error::Format(format!("offset {} outside window", e.offset)));
            }
            if e.offset == 0 {
                centers += 1;
                if e.word != rec.center {
                    return Err(Error::Format("center entry names another word".into()));
                }
            }
            if let Some(v) = vocab_size {
                if e.word as usize >= v {
                    return Err(Error::Format(format!("word id {} out of range", e.word)));
                }
            }
            if e.vector.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("record vector"));
            }
        }
        if centers != 1 {
            return Err(Error::Format(format!("{centers} center vectors")));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&RECORD_MAGIC);
        out.extend_from_slice(&RECORD_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.delta as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.digest);
        for (i, rec) in self.records.iter().enumerate() {
            self.check_record(rec, None)
                .map_err(|e| Error::Format(format!("record {i}: {e}")))?;
            out.extend_from_slice(&rec.key.to_le_bytes());
            out.extend_from_slice(&rec.center.to_le_bytes());
            out.push(rec.entries.len() as u8);
            for e in &rec.entries {
                out.push(e.offset as u8);
                out.extend_from_slice(&e.word.to_le_bytes());
                for x in &e.vector {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    /// Parses and fully validates a record file. With a vocabulary, the
    /// digest and every word id are checked against it. Errors inside the
    /// record section name the offending record index.
    pub fn from_bytes(bytes: &[u8], vocab: Option<&Vocabulary>) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(RECORD_MAGIC)?;
        let version = r.u32()?;
        if version != RECORD_VERSION {
            return Err(Error::Format(format!(
                "unsupported record version {version}"
            )));
        }
        let dim = r.u32()? as usize;
        let delta = r.u32()? as usize;
        let count = r.u64()?;
        let digest = r.digest()?;
        if dim == 0 {
            return Err(Error::Format("record dimension is zero".into()));
        }
        if delta == 0 || delta > i8::MAX as usize {
            return Err(Error::Format(format!("unsupported window size {delta}")));
        }
        if let Some(v) = vocab {
            if v.digest() != digest {
                return Err(Error::DigestMismatch);
            }
        }
        let entry_len = 1 + 4 + 4 * dim;
        let min_record = 8 + 4 + 1 + entry_len;
        if count.saturating_mul(min_record as u64) > r.remaining() as u64 {
            return Err(Error::Truncated {
                expected: RECORD_HEADER_LEN as u64 + count.saturating_mul(min_record as u64),
                actual: bytes.len() as u64,
            });
        }
        let mut store = RecordStore::new(dim, delta, digest);
        store.records.reserve(count as usize);
        for i in 0..count {
            let rec = read_record(&mut r, dim)
                .and_then(|rec| {
                    store.check_record(&rec, vocab.map(|v| v.len()))?;
                    Ok(rec)
                })
                .map_err(|e| Error::Format(format!("record {i}: {e}")))?;
            store.records.push(rec);
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} trailing bytes after {count} records",
                r.remaining()
            )));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path, vocab: Option<&Vocabulary>) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, vocab)
    }
}

fn read_record(r: &mut ByteReader<'_>, dim: usize) -> Result<TeacherRecord> {
    let key = r.u64()?;
    let center = r.u32()?;
    let m = r.u8()? as usize;
    if m == 0 {
        return Err(Error::Format("record holds no vectors".into()));
    }
    if m * (1 + 4 + 4 * dim) > r.remaining() {
        return Err(Error::Truncated {
            expected: (r.position() + m * (1 + 4 + 4 * dim)) as u64,
            actual: (r.position() + r.remaining()) as u64,
        });
    }
    let mut entries = Vec::with_capacity(m);
    for _ in 0..m {
        let offset = r.i8()?;
        let word = r.u32()?;
        let vector = r.scalars::<f32>(dim)?;
        entries.push(RecordEntry {
            offset,
            word,
            vector,
        });
    }
    Ok(TeacherRecord {
        key,
        center,
        entries,
    })
}

/// Counts reported by [`validate_records`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub records: usize,
    pub vectors: usize,
    pub dim: usize,
    pub delta: usize,
}

/// Format checker for record files: magic, digest against `vocab`, record
/// shapes and finiteness. The error names the first offending record.
pub fn validate_records(path: &Path, vocab: &Vocabulary) -> Result<ValidationReport> {
    let store = RecordStore::load(path, Some(vocab))?;
    Ok(ValidationReport {
        records: store.len(),
        vectors: store.records.iter().map(|r| r.entries.len()).sum(),
        dim: store.dim,
        delta: store.delta,
    })
}

/// Teacher sense posteriors keyed by window position.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStore {
    senses: usize,
    entries: BTreeMap<u64, Vec<f64>>,
}

impl PosteriorStore {
    pub fn new(senses: usize) -> Self {
        PosteriorStore {
            senses,
            entries: BTreeMap::new(),
        }
    }

    pub fn senses(&self) -> usize {
        self.senses
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts a posterior after checking it lies on the simplex (1e-6).
    pub fn insert(&mut self, key: u64, probs: Vec<f64>) -> Result<()> {
        if probs.len() != self.senses {
            return Err(Error::DimensionMismatch {
                what: "posterior",
                expected: self.senses,
                found: probs.len(),
            });
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Format(format!(
                "posterior for key {key} has invalid entries"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Format(format!(
                "posterior for key {key} sums to {total}"
            )));
        }
        self.entries.insert(key, probs);
        Ok(())
    }

    pub fn get(&self, key: u64) -> Option<&[f64]> {
        self.entries.get(&key).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[f64])> + '_ {
        self.entries.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(POSTERIOR_HEADER_LEN + self.len() * (8 + 4 * self.senses));
        out.extend_from_slice(&POSTERIOR_MAGIC);
        out.extend_from_slice(&(self.senses as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (key, probs) in &self.entries {
            out.extend_from_slice(&key.to_le_bytes());
            for &p in probs {
                out.extend_from_slice(&(p as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(POSTERIOR_MAGIC)?;
        let senses = r.u32()? as usize;
        let count = r.u64()?;
        if senses == 0 {
            return Err(Error::Format("posterior store with zero senses".into()));
        }
        let expected = (POSTERIOR_HEADER_LEN as u64)
            .saturating_add(count.saturating_mul(8 + 4 * senses as u64));
        let actual = bytes.len() as u64;
        if actual < expected {
            return Err(Error::Truncated { expected, actual });
        }
        if actual > expected {
            return Err(Error::Format("trailing bytes after posterior store".into()));
        }
        let mut store = PosteriorStore::new(senses);
        for _ in 0..count {
            let key = r.u64()?;
            let probs: Vec<f64> = r
                .scalars::<f32>(senses)?
                .into_iter()
                .map(f64::from)
                .collect();
            if store.get(key).is_some() {
                return Err(Error::Format(format!("duplicate posterior key {key}")));
            }
            store.insert(key, probs)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
