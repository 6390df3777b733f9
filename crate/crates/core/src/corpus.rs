//! Tokenization, vocabulary, paragraph-bounded context windows and negative
//! sampling.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type WordId = u32;

/// Line separating documents inside a concatenated corpus file.
pub const DOC_SEPARATOR: &str = "<<<DOC>>>";

/// Splits `text` into lowercase tokens, dropping tokens without any
/// alphanumeric character.
///
/// Whitespace separates chunks; leading and trailing punctuation runs are
/// split off each chunk (and then usually dropped by the filter), while
/// punctuation inside a chunk (`lo-fi`, `don't`) is kept.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chunk = chunk.to_lowercase();
        let start = chunk
            .char_indices()
            .find(|(_, c)| c.is_alphanumeric())
            .map(|(i, _)| i);
        let Some(start) = start else {
            continue;
        };
        let end = chunk
            .char_indices()
            .rev()
            .find(|(_, c)| c.is_alphanumeric())
            .map(|(i, c)| i + c.len_utf8())
            .unwrap();
        out.push(chunk[start..end].to_string());
    }
    out
}

/// Tokenizes each blank-line separated paragraph. Paragraphs that contain no
/// tokens at all are dropped, so paragraph indices count only non-empty ones.
pub fn tokenize_paragraphs(text: &str) -> Vec<Vec<String>> {
    let mut paragraphs = Vec::new();
    let mut current = String::new();
    let flush = |buf: &mut String, out: &mut Vec<Vec<String>>| {
        let tokens = tokenize(buf);
        if !tokens.is_empty() {
            out.push(tokens);
        }
        buf.clear();
    };
    for line in text.lines() {
        if line.trim().is_empty() {
            flush(&mut current, &mut paragraphs);
        } else {
            current.push_str(line);
            current.push('\n');
        }
    }
    flush(&mut current, &mut paragraphs);
    paragraphs
}

/// A tokenized document: a list of paragraphs.
pub type Document = Vec<Vec<String>>;

/// Splits a corpus text on `<<<DOC>>>` lines and tokenizes each document.
pub fn parse_documents(text: &str) -> Vec<Document> {
    let mut docs = Vec::new();
    let mut current = String::new();
    for line in text.lines() {
        if line.trim() == DOC_SEPARATOR {
            docs.push(tokenize_paragraphs(&current));
            current.clear();
        } else {
            current.push_str(line);
            current.push('\n');
        }
    }
    docs.push(tokenize_paragraphs(&current));
    docs.retain(|d| !d.is_empty());
    docs
}

/// Reads corpus files in order; every file may hold one or several documents.
pub fn read_documents<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        docs.extend(parse_documents(&text));
    }
    Ok(docs)
}

/// How a vocabulary decides which words to keep.
#[derive(Debug, Clone)]
pub enum VocabMode {
    MinCount(u64),
    /// Keep exactly these words, in this order; unseen words get count 0.
    Fixed(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    id_of: HashMap<String, WordId>,
    counts: Vec<u64>,
}

impl Vocabulary {
    /// Builds a vocabulary from explicit `(word, count)` pairs; order defines ids.
    pub fn from_entries<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, u64)>,
        S: Into<String>,
    {
        let mut words = Vec::new();
        let mut counts = Vec::new();
        let mut id_of = HashMap::new();
        for (word, count) in entries {
            let word = word.into();
            if word.is_empty() || word.contains(char::is_whitespace) {
                return Err(Error::Format(format!("invalid vocabulary word {word:?}")));
            }
            if id_of.insert(word.clone(), words.len() as WordId).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary word {word:?}")));
            }
            words.push(word);
            counts.push(count);
        }
        if words.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        Ok(Vocabulary {
            words,
            id_of,
            counts,
        })
    }

    /// Counts tokens and keeps words according to `mode`.
    ///
    /// In min-count mode ids are assigned by descending count, ties broken
    /// alphabetically.
    pub fn build<'a, I>(tokens: I, mode: &VocabMode) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut tally: HashMap<&str, u64> = HashMap::new();
        for t in tokens {
            *tally.entry(t).or_default() += 1;
        }
        match mode {
            VocabMode::MinCount(min) => {
                let mut kept: Vec<(&str, u64)> =
                    tally.into_iter().filter(|&(_, c)| c >= *min).collect();
                kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
                Self::from_entries(kept.into_iter().map(|(w, c)| (w.to_string(), c)))
            }
            VocabMode::Fixed(list) => Self::from_entries(
                list.iter()
                    .map(|w| (w.clone(), tally.get(w.as_str()).copied().unwrap_or(0))),
            ),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<WordId> {
        self.id_of.get(word).copied()
    }

    pub fn word(&self, id: WordId) -> &str {
        &self.words[id as usize]
    }

    pub fn count(&self, id: WordId) -> u64 {
        self.counts[id as usize]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// First 16 bytes of SHA-256 over every word followed by `\n`, in id order.
    ///
    /// Counts are not part of the digest: two vocabularies index embeddings
    /// identically iff their word lists are equal.
    pub fn digest(&self) -> [u8; 16] {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update(b"\n");
        }
        let full = h.finalize();
        full[..16].try_into().unwrap()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (w, c) in self.words.iter().zip(&self.counts) {
            s.push_str(w);
            s.push('\t');
            s.push_str(&c.to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (word, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("vocabulary line {}: missing tab", n + 1)))?;
            let count: u64 = count.trim().parse().map_err(|_| {
                Error::Format(format!("vocabulary line {}: bad count {count:?}", n + 1))
            })?;
            entries.push((word.to_string(), count));
        }
        Self::from_entries(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_tsv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }
}

/// Where a window's center token sits in the corpus.
///
/// `offset` counts in-vocabulary tokens of the paragraph, since
/// out-of-vocabulary tokens are removed before windowing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WindowPosition {
    pub doc: u32,
    pub paragraph: u32,
    pub offset: u32,
}

const OFFSET_BITS: u32 = 20;
const PARAGRAPH_BITS: u32 = 20;
const DOC_BITS: u32 = 24;

impl WindowPosition {
    /// Packs the position into a `u64`: doc (24 bits) | paragraph (20) | offset (20).
    pub fn key(&self) -> u64 {
        debug_assert!(self.doc < (1 << DOC_BITS));
        debug_assert!(self.paragraph < (1 << PARAGRAPH_BITS));
        debug_assert!(self.offset < (1 << OFFSET_BITS));
        ((self.doc as u64) << (PARAGRAPH_BITS + OFFSET_BITS))
            | ((self.paragraph as u64) << OFFSET_BITS)
            | self.offset as u64
    }

    pub fn from_key(key: u64) -> Self {
        WindowPosition {
            doc: (key >> (PARAGRAPH_BITS + OFFSET_BITS)) as u32,
            paragraph: ((key >> OFFSET_BITS) & ((1 << PARAGRAPH_BITS) - 1)) as u32,
            offset: (key & ((1 << OFFSET_BITS) - 1)) as u32,
        }
    }
}

impl fmt::Display for WindowPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "doc {} paragraph {} token {}",
            self.doc, self.paragraph, self.offset
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextWindow {
    pub center: WordId,
    pub context: Vec<WordId>,
    pub position: WindowPosition,
}

/// Paragraph positions that form the context of the token at `pos`.
pub fn context_range(len: usize, pos: usize, delta: usize) -> impl Iterator<Item = usize> {
    let lo = pos.saturating_sub(delta);
    let hi = (pos + delta + 1).min(len);
    (lo..hi).filter(move |&j| j != pos)
}

/// One window per token of the paragraph, truncated at the paragraph edges.
/// Tokens without any neighbour (single-token paragraphs) yield nothing.
pub fn iter_windows(
    ids: &[WordId],
    delta: usize,
    doc: u32,
    paragraph: u32,
) -> impl Iterator<Item = ContextWindow> + '_ {
    (0..ids.len()).filter_map(move |pos| {
        let context: Vec<WordId> = context_range(ids.len(), pos, delta)
            .map(|j| ids[j])
            .collect();
        if context.is_empty() {
            return None;
        }
        Some(ContextWindow {
            center: ids[pos],
            context,
            position: WindowPosition {
                doc,
                paragraph,
                offset: pos as u32,
            },
        })
    })
}

/// A corpus mapped to word ids, out-of-vocabulary tokens removed.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub docs: Vec<Vec<Vec<WordId>>>,
}

impl Corpus {
    pub fn from_documents(docs: &[Document], vocab: &Vocabulary) -> Self {
        let docs = docs
            .iter()
            .map(|doc| {
                doc.iter()
                    .map(|para| para.iter().filter_map(|t| vocab.id(t)).collect())
                    .collect()
            })
            .collect();
        Corpus { docs }
    }

    /// Paragraphs with their `(doc, paragraph)` indices.
    pub fn paragraphs(&self) -> impl Iterator<Item = (u32, u32, &[WordId])> + '_ {
        self.docs.iter().enumerate().flat_map(|(d, doc)| {
            doc.iter()
                .enumerate()
                .map(move |(p, para)| (d as u32, p as u32, para.as_slice()))
        })
    }

    pub fn windows(&self, delta: usize) -> impl Iterator<Item = ContextWindow> + '_ {
        self.paragraphs()
            .flat_map(move |(d, p, ids)| iter_windows(ids, delta, d, p))
    }

    pub fn window_count(&self) -> usize {
        self.paragraphs()
            .map(|(_, _, ids)| if ids.len() >= 2 { ids.len() } else { 0 })
            .sum()
    }

    pub fn paragraph(&self, doc: u32, paragraph: u32) -> &[WordId] {
        &self.docs[doc as usize][paragraph as usize]
    }

    pub fn is_empty(&self) -> bool {
        self.window_count() == 0
    }
}

/// Draws negative samples from the unigram distribution raised to `exponent`.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    cumulative: Vec<f64>,
    exponent: f64,
    seed: u64,
}

pub const DEFAULT_SAMPLING_EXPONENT: f64 = 0.75;

impl NegativeSampler {
    pub fn new(counts: &[u64], exponent: f64, seed: u64) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::InvalidArgument(
                "negative sampling needs at least two words".into(),
            ));
        }
        let weights: Vec<f64> = counts.iter().map(|&c| (c as f64).powf(exponent)).collect();
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidArgument("all word counts are zero".into()));
        }
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        *cumulative.last_mut().unwrap() = 1.0;
        Ok(NegativeSampler {
            cumulative,
            exponent,
            seed,
        })
    }

    pub fn from_vocab(vocab: &Vocabulary, seed: u64) -> Result<Self> {
        Self::new(vocab.counts(), DEFAULT_SAMPLING_EXPONENT, seed)
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn probability(&self, id: WordId) -> f64 {
        let i = id as usize;
        let prev = if i == 0 { 0.0 } else { self.cumulative[i - 1] };
        self.cumulative[i] - prev
    }

    /// Independent random stream for shard `stream`.
    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> WordId {
        let u: f64 = rng.gen();
        let i = self.cumulative.partition_point(|&c| c <= u);
        // Skip zero-mass words that share the cumulative value.
        let mut i = i.min(self.cumulative.len() - 1);
        while self.probability(i as WordId) == 0.0 && i + 1 < self.cumulative.len() {
            i += 1;
        }
        i as WordId
    }

    /// `n` i.i.d. samples, redrawing any sample equal to `exclude`.
    pub fn draw_negatives<R: Rng + ?Sized>(
        &self,
        n: usize,
        exclude: WordId,
        rng: &mut R,
    ) -> Result<Vec<WordId>> {
        if (exclude as usize) < self.cumulative.len() && self.probability(exclude) >= 1.0 - 1e-12 {
            return Err(Error::InvalidArgument(
                "every word other than the excluded one has zero sampling mass".into(),
            ));
        }
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let s = self.sample(rng);
            if s != exclude {
                out.push(s);
            }
        }
        Ok(out)
    }
}
