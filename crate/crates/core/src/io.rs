//! Model persistence.
//!
//! Binary model layout, all integers little-endian:
//!
//! ```text
//! magic "SNS1" | u32 version | u32 V | u32 K | u32 D | u8 float width | 16-byte vocab digest
//! g rows (V x D) | v rows (V x K x D) | d rows (V x K x D)
//! ```
//!
//! Fitted teacher parameters use the same header under magic "TSP1", with
//! `D` the encoder width, followed by u rows then dt rows (both V x K x D).

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::SenseModelParams;
use crate::scalar::Scalar;
use crate::teacher::TeacherSenseParams;

pub const MODEL_MAGIC: [u8; 4] = *b"SNS1";
pub const MODEL_VERSION: u32 = 1;
pub const MODEL_HEADER_LEN: usize = 4 + 4 + 4 * 3 + 1 + 16;
pub const TEACHER_MAGIC: [u8; 4] = *b"TSP1";

/// Writes `bytes` to a temporary file next to `path`, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Cursor over an untrusted byte buffer; every read is bounds checked.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                expected: (self.pos + n) as u64,
                actual: self.buf.len() as u64,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn i8(&mut self) -> Result<i8> {
        Ok(self.take(1)?[0] as i8)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn digest(&mut self) -> Result<[u8; 16]> {
        Ok(self.take(16)?.try_into().unwrap())
    }

    pub fn scalars<F: Scalar>(&mut self, n: usize) -> Result<Vec<F>> {
        let w = F::WIDTH as usize;
        let bytes = self.take(
            n.checked_mul(w)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(bytes.chunks_exact(w).map(F::read_le).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelFileHeader {
    pub version: u32,
    pub vocab_size: u32,
    pub senses: u32,
    pub dim: u32,
    pub float_width: u8,
    pub digest: [u8; 16],
}

impl ModelFileHeader {
    pub fn payload_len(&self) -> u64 {
        self.float_width as u64
            * self.vocab_size as u64
            * self.dim as u64
            * (1 + 2 * self.senses as u64)
    }

    fn parse(r: &mut ByteReader<'_>) -> Result<Self> {
        Self::parse_with(r, MODEL_MAGIC)
    }

    fn parse_with(r: &mut ByteReader<'_>, magic: [u8; 4]) -> Result<Self> {
        r.magic(magic)?;
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "unsupported model version {version}"
            )));
        }
        let header = ModelFileHeader {
            version,
            vocab_size: r.u32()?,
            senses: r.u32()?,
            dim: r.u32()?,
            float_width: r.u8()?,
            digest: r.digest()?,
        };
        if header.float_width != 4 && header.float_width != 8 {
            return Err(Error::Format(format!(
                "unsupported float width {}",
                header.float_width
            )));
        }
        if header.vocab_size == 0 || header.senses == 0 || header.dim == 0 {
            return Err(Error::Format("zero model dimension in header".into()));
        }
        Ok(header)
    }
}

/// Reads and validates only the header of a model file.
pub fn read_model_header(path: &Path) -> Result<ModelFileHeader> {
    let bytes = read_file(path)?;
    ModelFileHeader::parse(&mut ByteReader::new(&bytes))
}

pub fn model_to_bytes<F: Scalar>(
    params: &SenseModelParams<F>,
    vocab: &Vocabulary,
) -> Result<Vec<u8>> {
    if vocab.len() != params.vocab_size() {
        return Err(Error::DimensionMismatch {
            what: "vocabulary size",
            expected: params.vocab_size(),
            found: vocab.len(),
        });
    }
    let header = ModelFileHeader {
        version: MODEL_VERSION,
        vocab_size: params.vocab_size() as u32,
        senses: params.senses() as u32,
        dim: params.dim() as u32,
        float_width: F::WIDTH,
        digest: vocab.digest(),
    };
    let mut out = Vec::with_capacity(MODEL_HEADER_LEN + header.payload_len() as usize);
    write_header(&mut out, MODEL_MAGIC, &header);
    for &x in params
        .global
        .iter()
        .chain(&params.sense)
        .chain(&params.disamb)
    {
        x.write_le(&mut out);
    }
    Ok(out)
}

pub fn model_from_bytes<F: Scalar>(
    bytes: &[u8],
    vocab: &Vocabulary,
) -> Result<SenseModelParams<F>> {
    let mut r = ByteReader::new(bytes);
    let header = ModelFileHeader::parse(&mut r)?;
    if header.float_width != F::WIDTH {
        return Err(Error::Format(format!(
            "model stores {}-byte floats, requested {}-byte",
            header.float_width,
            F::WIDTH
        )));
    }
    let expected = MODEL_HEADER_LEN as u64 + header.payload_len();
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after model payload",
            actual - expected
        )));
    }
    if header.vocab_size as usize != vocab.len() {
        return Err(Error::DimensionMismatch {
            what: "vocabulary size",
            expected: header.vocab_size as usize,
            found: vocab.len(),
        });
    }
    if header.digest != vocab.digest() {
        return Err(Error::DigestMismatch);
    }
    let (v, k, d) = (
        header.vocab_size as usize,
        header.senses as usize,
        header.dim as usize,
    );
    let global = r.scalars(v * d)?;
    let sense = r.scalars(v * k * d)?;
    let disamb = r.scalars(v * k * d)?;
    SenseModelParams::from_parts(v, k, d, global, sense, disamb)
}

pub fn save_model<F: Scalar>(
    params: &SenseModelParams<F>,
    vocab: &Vocabulary,
    path: &Path,
) -> Result<()> {
    write_atomic(path, &model_to_bytes(params, vocab)?)
}

pub fn load_model<F: Scalar>(path: &Path, vocab: &Vocabulary) -> Result<SenseModelParams<F>> {
    model_from_bytes(&read_file(path)?, vocab)
}

fn push_row<F: Scalar>(out: &mut String, name: &str, row: &[F]) {
    out.push_str(name);
    for x in row {
        let _ = write!(out, " {:.8e}", x.f64());
    }
    out.push('\n');
}

/// Word2vec-style text export: a `count dim` line, then for every word its
/// global vector under `word` and its sense vectors under `word#k`.
pub fn export_text_string<F: Scalar>(params: &SenseModelParams<F>, vocab: &Vocabulary) -> String {
    let (v, k) = (params.vocab_size(), params.senses());
    let mut out = String::new();
    let _ = writeln!(out, "{} {}", v * (k + 1), params.dim());
    for w in 0..v as u32 {
        let word = vocab.word(w);
        push_row(&mut out, word, params.global_row(w));
        for s in 0..k {
            push_row(&mut out, &format!("{word}#{s}"), params.sense_row(w, s));
        }
    }
    out
}

pub fn export_text<F: Scalar>(
    params: &SenseModelParams<F>,
    vocab: &Vocabulary,
    path: &Path,
) -> Result<()> {
    if vocab.len() != params.vocab_size() {
        return Err(Error::DimensionMismatch {
            what: "vocabulary size",
            expected: params.vocab_size(),
            found: vocab.len(),
        });
    }
    write_atomic(path, export_text_string(params, vocab).as_bytes())
}

/// Parses the text export back into `(name, vector)` rows.
pub fn parse_text_embeddings(text: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut lines = text.lines();
    let head = lines
        .next()
        .ok_or_else(|| Error::Format("empty embedding file".into()))?;
    let mut it = head.split_whitespace();
    let mut num = || -> Result<usize> {
        it.next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad header line {head:?}")))
    };
    let (count, dim) = (num()?, num()?);
    let mut rows = Vec::with_capacity(count.min(1 << 24));
    for (n, line) in lines.enumerate() {
        let mut parts = line.split(' ');
        let name = parts.next().unwrap_or_default().to_string();
        let values: Vec<f64> = parts
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("line {}: bad number", n + 2)))?;
        if values.len() != dim {
            return Err(Error::DimensionMismatch {
                what: "text embedding row",
                expected: dim,
                found: values.len(),
            });
        }
        rows.push((name, values));
    }
    if rows.len() != count {
        return Err(Error::Format(format!(
            "header announces {count} rows, found {}",
            rows.len()
        )));
    }
    Ok(rows)
}

fn write_header(out: &mut Vec<u8>, magic: [u8; 4], h: &ModelFileHeader) {
    out.extend_from_slice(&magic);
    out.extend_from_slice(&h.version.to_le_bytes());
    out.extend_from_slice(&h.vocab_size.to_le_bytes());
    out.extend_from_slice(&h.senses.to_le_bytes());
    out.extend_from_slice(&h.dim.to_le_bytes());
    out.push(h.float_width);
    out.extend_from_slice(&h.digest);
}

pub fn teacher_to_bytes<F: Scalar>(
    params: &TeacherSenseParams<F>,
    vocab: &Vocabulary,
) -> Result<Vec<u8>> {
    if vocab.len() != params.vocab_size() {
        return Err(Error::DimensionMismatch {
            what: "vocabulary size",
            expected: params.vocab_size(),
            found: vocab.len(),
        });
    }
    let header = ModelFileHeader {
        version: MODEL_VERSION,
        vocab_size: params.vocab_size() as u32,
        senses: params.senses() as u32,
        dim: params.dim() as u32,
        float_width: F::WIDTH,
        digest: vocab.digest(),
    };
    let mut out = Vec::with_capacity(MODEL_HEADER_LEN + F::WIDTH as usize * 2 * params.sense.len());
    write_header(&mut out, TEACHER_MAGIC, &header);
    for &x in params.sense.iter().chain(&params.disamb) {
        x.write_le(&mut out);
    }
    Ok(out)
}

pub fn teacher_from_bytes<F: Scalar>(
    bytes: &[u8],
    vocab: &Vocabulary,
) -> Result<TeacherSenseParams<F>> {
    let mut r = ByteReader::new(bytes);
    let header = ModelFileHeader::parse_with(&mut r, TEACHER_MAGIC)?;
    if header.float_width != F::WIDTH {
        return Err(Error::Format(format!(
            "teacher file stores {}-byte floats, requested {}-byte",
            header.float_width,
            F::WIDTH
        )));
    }
    let (v, k, d) = (
        header.vocab_size as usize,
        header.senses as usize,
        header.dim as usize,
    );
    let expected = (MODEL_HEADER_LEN + header.float_width as usize * 2 * v * k * d) as u64;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after teacher payload",
            actual - expected
        )));
    }
    if v != vocab.len() {
        return Err(Error::DimensionMismatch {
            what: "vocabulary size",
            expected: v,
            found: vocab.len(),
        });
    }
    if header.digest != vocab.digest() {
        return Err(Error::DigestMismatch);
    }
    let sense = r.scalars(v * k * d)?;
    let disamb = r.scalars(v * k * d)?;
    TeacherSenseParams::from_parts(v, k, d, sense, disamb)
}

pub fn save_teacher<F: Scalar>(
    params: &TeacherSenseParams<F>,
    vocab: &Vocabulary,
    path: &Path,
) -> Result<()> {
    write_atomic(path, &teacher_to_bytes(params, vocab)?)
}

pub fn load_teacher<F: Scalar>(path: &Path, vocab: &Vocabulary) -> Result<TeacherSenseParams<F>> {
    teacher_from_bytes(&read_file(path)?, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(n: usize) -> Vocabulary {
        Vocabulary::from_entries((0..n).map(|i| (format!("w{i}"), 1u64))).unwrap()
    }

    #[test]
    fn round_trip_f32_and_f64() {
        let dir = tempfile::tempdir().unwrap();
        let voc = vocab(7);
        let p32 = SenseModelParams::<f32>::init(7, 3, 5, 1).unwrap();
        let path = dir.path().join("m32.bin");
        save_model(&p32, &voc, &path).unwrap();
        let back: SenseModelParams<f32> = load_model(&path, &voc).unwrap();
        assert_eq!(back, p32);
        let len = fs::metadata(&path).unwrap().len();
        assert_eq!(len, (MODEL_HEADER_LEN + 4 * 7 * 5 * 7) as u64);

        let p64 = SenseModelParams::<f64>::init(7, 2, 3, 2).unwrap();
        let path = dir.path().join("m64.bin");
        save_model(&p64, &voc, &path).unwrap();
        let back: SenseModelParams<f64> = load_model(&path, &voc).unwrap();
        assert!(back
            .global
            .iter()
            .zip(&p64.global)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(read_model_header(&path).unwrap().float_width, 8);
        assert!(load_model::<f32>(&path, &voc).is_err());
    }

    #[test]
    fn teacher_round_trip() {
        let voc = vocab(5);
        let t = TeacherSenseParams::<f64>::init(5, 2, 6, 9).unwrap();
        let bytes = teacher_to_bytes(&t, &voc).unwrap();
        assert_eq!(teacher_from_bytes::<f64>(&bytes, &voc).unwrap(), t);
        assert!(matches!(
            teacher_from_bytes::<f64>(&bytes[..bytes.len() - 3], &voc),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            model_from_bytes::<f64>(&bytes, &voc),
            Err(Error::BadMagic { .. })
        ));
        assert!(teacher_from_bytes::<f32>(&bytes, &voc).is_err());
    }

    #[test]
    fn wrong_vocabulary_is_rejected() {
        let voc = vocab(4);
        let p = SenseModelParams::<f32>::init(4, 1, 2, 0).unwrap();
        let bytes = model_to_bytes(&p, &voc).unwrap();
        let other = Vocabulary::from_entries((0..4).map(|i| (format!("x{i}"), 1u64))).unwrap();
        assert!(matches!(
            model_from_bytes::<f32>(&bytes, &other),
            Err(Error::DigestMismatch)
        ));
        assert!(matches!(
            model_from_bytes::<f32>(&bytes, &vocab(5)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn corrupt_inputs_give_distinct_errors() {
        let voc = vocab(3);
        let p = SenseModelParams::<f32>::init(3, 2, 2, 0).unwrap();
        let bytes = model_to_bytes(&p, &voc).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            model_from_bytes::<f32>(&bad, &voc),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            model_from_bytes::<f32>(&bytes[..bytes.len() - 1], &voc),
            Err(Error::Truncated { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            model_from_bytes::<f32>(&long, &voc),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn huge_header_does_not_allocate() {
        let voc = vocab(3);
        let mut bytes =
            model_to_bytes(&SenseModelParams::<f32>::init(3, 1, 1, 0).unwrap(), &voc).unwrap();
        // claim D = u32::MAX
        bytes[16..20].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            model_from_bytes::<f32>(&bytes, &voc),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn text_export_layout() {
        let voc = Vocabulary::from_entries([("apple", 3u64), ("plant", 1)]).unwrap();
        let p = SenseModelParams::<f32>::init(2, 3, 4, 9).unwrap();
        let text = export_text_string(&p, &voc);
        assert_eq!(text.lines().count(), 1 + 2 * 4);
        assert!(text.starts_with("8 4\n"));
        let rows = parse_text_embeddings(&text).unwrap();
        let names: Vec<&str> = rows.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(&names[..4], &["apple", "apple#0", "apple#1", "apple#2"]);
        for (i, x) in rows[2].1.iter().enumerate() {
            assert!((x - p.sense_row(0, 1)[i] as f64).abs() < 1e-6);
        }
    }
}
