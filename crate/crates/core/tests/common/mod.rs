//! Synthetic fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sensekit::corpus::{Document, WindowPosition};
use sensekit::eval::ResolvedContext;
use sensekit::teacher::{PosteriorStore, RecordEntry, RecordStore, TeacherRecord};
use sensekit::{Corpus, Vocabulary, WordId};

/// Pseudowords whose occurrences draw context words from one pool per
/// sense; pools are shared across pseudowords.
pub struct Polysemy {
    pub vocab: Vocabulary,
    pub corpus: Corpus,
    pub pseudowords: Vec<WordId>,
    /// True sense of the pseudoword in each training paragraph, by position key
    /// of the pseudoword's window.
    pub train_senses: Vec<(u64, usize)>,
    /// Held-out contexts per pseudoword with their true senses.
    pub held_out: Vec<Vec<(ResolvedContext, usize)>>,
    pub delta: usize,
}

pub struct PolysemyConfig {
    pub pseudowords: usize,
    pub senses: usize,
    pub pool: usize,
    /// Number of distinct context-word pools. Sense `s` of pseudoword `p`
    /// draws from pool `(p + s * stride) % topics`, so pools are shared
    /// between pseudowords the way topics are shared between real words.
    pub topics: usize,
    pub stride: usize,
    pub occurrences: usize,
    pub held_out: usize,
    pub delta: usize,
    /// Tokens per paragraph, the pseudoword included.
    pub paragraph_len: usize,
    pub seed: u64,
}

impl Default for PolysemyConfig {
    fn default() -> Self {
        PolysemyConfig {
            pseudowords: 20,
            senses: 2,
            pool: 50,
            topics: 5,
            stride: 2,
            occurrences: 500,
            held_out: 50,
            delta: 5,
            paragraph_len: 11,
            seed: 2024,
        }
    }
}

fn pool_word(cfg: &PolysemyConfig, p: usize, s: usize, j: usize) -> String {
    format!("t{}w{j}", (p + s * cfg.stride) % cfg.topics)
}

/// Pool words with the pseudoword at a random position; returns the tokens
/// and that position.
fn paragraph(
    rng: &mut ChaCha8Rng,
    cfg: &PolysemyConfig,
    p: usize,
    s: usize,
) -> (Vec<String>, usize) {
    let at = rng.gen_range(0..cfg.paragraph_len);
    let mut out = Vec::with_capacity(cfg.paragraph_len);
    for i in 0..cfg.paragraph_len {
        if i == at {
            out.push(format!("pseudo{p}"));
        } else {
            out.push(pool_word(cfg, p, s, rng.gen_range(0..cfg.pool)));
        }
    }
    (out, at)
}

impl Polysemy {
    pub fn generate(cfg: &PolysemyConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        // one document per pseudoword, senses interleaved at random
        let mut docs: Vec<Document> = Vec::new();
        let mut senses_in_order = Vec::new();
        let mut offsets = Vec::new();
        for p in 0..cfg.pseudowords {
            let mut labels: Vec<usize> = (0..cfg.senses)
                .flat_map(|s| std::iter::repeat(s).take(cfg.occurrences))
                .collect();
            for i in (1..labels.len()).rev() {
                labels.swap(i, rng.gen_range(0..=i));
            }
            let (paras, at): (Vec<_>, Vec<_>) = labels
                .iter()
                .map(|&s| paragraph(&mut rng, cfg, p, s))
                .unzip();
            docs.push(paras);
            offsets.push(at);
            senses_in_order.push(labels);
        }
        let vocab = Vocabulary::build(
            docs.iter().flatten().flatten().map(String::as_str),
            &sensekit::VocabMode::MinCount(1),
        )
        .unwrap();
        let corpus = Corpus::from_documents(&docs, &vocab);
        let pseudowords: Vec<WordId> = (0..cfg.pseudowords)
            .map(|p| vocab.id(&format!("pseudo{p}")).unwrap())
            .collect();
        let mut train_senses = Vec::new();
        for (d, labels) in senses_in_order.iter().enumerate() {
            for (para, &s) in labels.iter().enumerate() {
                let key = WindowPosition {
                    doc: d as u32,
                    paragraph: para as u32,
                    offset: offsets[d][para] as u32,
                }
                .key();
                train_senses.push((key, s));
            }
        }
        let mut held_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xdead_beef);
        let held_out = (0..cfg.pseudowords)
            .map(|p| {
                (0..cfg.senses)
                    .flat_map(|s| std::iter::repeat(s).take(cfg.held_out))
                    .map(|s| {
                        let (toks, at) = paragraph(&mut held_rng, cfg, p, s);
                        let ids = toks.iter().map(|t| vocab.id(t).unwrap()).collect();
                        (
                            ResolvedContext {
                                target: pseudowords[p],
                                ids,
                                position: at,
                            },
                            s,
                        )
                    })
                    .collect()
            })
            .collect();
        Polysemy {
            vocab,
            corpus,
            pseudowords,
            train_senses,
            held_out,
            delta: cfg.delta,
        }
    }

    /// Teacher posteriors that are one-hot on the true sense for pseudoword
    /// windows and uniform elsewhere.
    pub fn oracle_posteriors(&self, senses: usize) -> PosteriorStore {
        let mut store = PosteriorStore::new(senses);
        let truth: std::collections::HashMap<u64, usize> =
            self.train_senses.iter().copied().collect();
        for w in self.corpus.windows(self.delta) {
            let key = w.position.key();
            let probs = match truth.get(&key) {
                Some(&s) => (0..senses)
                    .map(|k| if k == s { 1.0 } else { 0.0 })
                    .collect(),
                None => vec![1.0 / senses as f64; senses],
            };
            store.insert(key, probs).unwrap();
        }
        store
    }
}

/// Records for `words` words whose center vectors sit in one of `clusters`
/// well separated clusters; neighbours share the center's cluster offset so
/// the context mean identifies the cluster.
pub struct ClusterRecords {
    pub store: RecordStore,
    pub labels: Vec<usize>,
    /// Exact per-word mean of the center vectors.
    pub center_means: Vec<Vec<f64>>,
}

pub fn cluster_records(
    words: usize,
    clusters: usize,
    per_cluster: usize,
    dim: usize,
    noise: f64,
    seed: u64,
) -> ClusterRecords {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = RecordStore::new(dim, 2, [0u8; 16]);
    let mut labels = Vec::new();
    let mut sums = vec![vec![0.0f64; dim]; words];
    let mut counts = vec![0usize; words];
    let mut key = 0u64;
    for w in 0..words {
        let centers: Vec<Vec<f64>> = (0..clusters)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        for c in 0..clusters {
            for _ in 0..per_cluster {
                let mut entries = Vec::new();
                for offset in -2i8..=2 {
                    let vector: Vec<f32> = centers[c]
                        .iter()
                        .map(|&x| (x + noise * rng.gen_range(-1.0..1.0)) as f32)
                        .collect();
                    if offset == 0 {
                        for (s, &x) in sums[w].iter_mut().zip(&vector) {
                            *s += x as f64;
                        }
                    }
                    let word = if offset == 0 { w } else { (w + 1) % words };
                    entries.push(RecordEntry {
                        offset,
                        word: word as WordId,
                        vector,
                    });
                }
                store.records.push(TeacherRecord {
                    key,
                    center: w as WordId,
                    entries,
                });
                labels.push(c);
                counts[w] += 1;
                key += 1;
            }
        }
    }
    let center_means = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| s.into_iter().map(|x| x / n as f64).collect())
        .collect();
    ClusterRecords {
        store,
        labels,
        center_means,
    }
}
