//! Word sense induction, contextual word similarity and nearest neighbours.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use crate::corpus::{context_range, tokenize, Vocabulary, WordId};
use crate::error::{Error, Result};
use crate::model::{
    context_embedding_iterative_with, sense_posterior, shared_window_step1, IterContext,
    SenseModelParams, SensePosterior,
};
use crate::scalar::{cosine, Scalar};

/// Adjusted Rand index from the contingency table of two labelings.
///
/// Returns 1.0 when the chance-corrected denominator vanishes, which only
/// happens when both labelings are identical partitions (all in one cluster
/// or all singletons).
pub fn ari<A, B>(labels_a: &[A], labels_b: &[B]) -> Result<f64>
where
    A: Eq + std::hash::Hash,
    B: Eq + std::hash::Hash,
{
    if labels_a.len() != labels_b.len() {
        return Err(Error::LengthMismatch(labels_a.len(), labels_b.len()));
    }
    let n = labels_a.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "ARI needs at least two items".into(),
        ));
    }
    let pairs = |c: u64| (c * c.saturating_sub(1) / 2) as f64;
    let mut ids_a: HashMap<&A, usize> = HashMap::new();
    let mut ids_b: HashMap<&B, usize> = HashMap::new();
    let mut cells: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: Vec<u64> = Vec::new();
    let mut cols: Vec<u64> = Vec::new();
    for (a, b) in labels_a.iter().zip(labels_b) {
        let na = ids_a.len();
        let ia = *ids_a.entry(a).or_insert(na);
        if ia == rows.len() {
            rows.push(0);
        }
        let nb = ids_b.len();
        let ib = *ids_b.entry(b).or_insert(nb);
        if ib == cols.len() {
            cols.push(0);
        }
        rows[ia] += 1;
        cols[ib] += 1;
        *cells.entry((ia, ib)).or_default() += 1;
    }
    let index: f64 = cells.values().map(|&c| pairs(c)).sum();
    let sum_a: f64 = rows.iter().map(|&c| pairs(c)).sum();
    let sum_b: f64 = cols.iter().map(|&c| pairs(c)).sum();
    let total = pairs(n as u64);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(Error::InvalidArgument(
            "spearman needs at least two items".into(),
        ));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "spearman inputs must be finite".into(),
        ));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Which tokens around the target feed its context embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextSpan {
    /// `±Δ` in-vocabulary tokens around the target.
    Window(usize),
    /// Every in-vocabulary token of the provided context.
    Full,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub span: ContextSpan,
    pub iter_context: IterContext,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            span: ContextSpan::Window(5),
            iter_context: IterContext::SharedWindow,
        }
    }
}

/// A target word inside a tokenized context.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetInContext {
    pub target: String,
    pub tokens: Vec<String>,
    /// Token index of a marked occurrence; the first occurrence otherwise.
    pub marked: Option<usize>,
}

impl TargetInContext {
    /// Tokenizes `text`, honouring a `<b>…</b>` marker around the target.
    pub fn parse(target: &str, text: &str) -> Self {
        let target = tokenize(target).into_iter().next().unwrap_or_default();
        if let Some((pre, rest)) = text.split_once("<b>") {
            if let Some((mid, post)) = rest.split_once("</b>") {
                let mut tokens = tokenize(pre);
                let marked = tokens.len();
                let mid = tokenize(mid);
                let has_mid = !mid.is_empty();
                tokens.extend(mid);
                tokens.extend(tokenize(post));
                return TargetInContext {
                    target,
                    tokens,
                    marked: has_mid.then_some(marked),
                };
            }
        }
        TargetInContext {
            target,
            tokens: tokenize(text),
            marked: None,
        }
    }

    /// Maps to in-vocabulary ids and locates the target among them.
    pub fn resolve(&self, vocab: &Vocabulary) -> Result<ResolvedContext> {
        let target = vocab
            .id(&self.target)
            .ok_or_else(|| Error::OutOfVocabulary(self.target.clone()))?;
        let wanted = match self.marked {
            Some(m) => Some(m),
            None => self.tokens.iter().position(|t| *t == self.target),
        }
        .filter(|&m| {
            self.tokens
                .get(m)
                .map(|t| t == &self.target)
                .unwrap_or(false)
        })
        .ok_or(Error::TargetNotInContext)?;
        let mut ids = Vec::with_capacity(self.tokens.len());
        let mut position = 0;
        for (i, t) in self.tokens.iter().enumerate() {
            if i == wanted {
                position = ids.len();
            }
            if let Some(id) = vocab.id(t) {
                ids.push(id);
            }
        }
        Ok(ResolvedContext {
            target,
            ids,
            position,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedContext {
    pub target: WordId,
    pub ids: Vec<WordId>,
    /// Index of the target in `ids`.
    pub position: usize,
}

/// Sense posterior of the target from the iterative context embedding.
pub fn context_posterior<F: Scalar>(
    ctx: &ResolvedContext,
    params: &SenseModelParams<F>,
    opts: &EvalOptions,
) -> Result<SensePosterior<F>> {
    let len = ctx.ids.len();
    if ctx.position >= len || ctx.ids[ctx.position] != ctx.target {
        return Err(Error::TargetNotInContext);
    }
    let positions: Vec<usize> = match opts.span {
        ContextSpan::Window(delta) => context_range(len, ctx.position, delta).collect(),
        ContextSpan::Full => (0..len).filter(|&j| j != ctx.position).collect(),
    };
    if positions.is_empty() {
        return Err(Error::EmptyContext);
    }
    let context: Vec<WordId> = positions.iter().map(|&j| ctx.ids[j]).collect();
    let step1 = match opts.iter_context {
        IterContext::SharedWindow => shared_window_step1(ctx.target, &context),
        IterContext::WordCentered => {
            let delta = match opts.span {
                ContextSpan::Window(d) => d,
                ContextSpan::Full => len,
            };
            positions
                .iter()
                .map(|&j| context_range(len, j, delta).map(|i| ctx.ids[i]).collect())
                .collect()
        }
    };
    let c = context_embedding_iterative_with(&context, &step1, params)?.embedding;
    sense_posterior(ctx.target, &c, params, F::one())
}

/// Most probable sense of the target in its context (lowest index on ties).
pub fn assign_sense<F: Scalar>(
    ctx: &ResolvedContext,
    params: &SenseModelParams<F>,
    opts: &EvalOptions,
) -> Result<usize> {
    Ok(context_posterior(ctx, params, opts)?.best())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WsiInstance {
    pub context: TargetInContext,
    pub gold: String,
}

/// Parses `target<TAB>gold_label<TAB>context…` lines.
pub fn parse_wsi(text: &str) -> Result<Vec<WsiInstance>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (Some(target), Some(gold), Some(context)) = (parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::Format(format!(
                "wsi line {}: expected 3 fields",
                n + 1
            )));
        };
        out.push(WsiInstance {
            context: TargetInContext::parse(target, &context.replace('\t', " ")),
            gold: gold.to_string(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordAri {
    pub word: String,
    pub ari: f64,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WsiReport {
    pub words: Vec<WordAri>,
    /// Unweighted mean over scored words.
    pub mean_ari: f64,
    /// Instances that could not be scored (out of vocabulary, no context).
    pub skipped_instances: usize,
    /// Words left with fewer than two scorable instances.
    pub skipped_words: usize,
}

/// ARI between model senses and gold labels, per target word, averaged
/// without weighting.
pub fn eval_wsi<F: Scalar>(
    instances: &[WsiInstance],
    vocab: &Vocabulary,
    params: &SenseModelParams<F>,
    opts: &EvalOptions,
) -> Result<WsiReport> {
    let assigned: Vec<Option<usize>> = instances
        .par_iter()
        .map(|inst| {
            inst.context
                .resolve(vocab)
                .and_then(|ctx| assign_sense(&ctx, params, opts))
                .ok()
        })
        .collect();
    let mut groups: BTreeMap<&str, (Vec<usize>, Vec<&str>)> = BTreeMap::new();
    let mut skipped_instances = 0;
    for (inst, sense) in instances.iter().zip(&assigned) {
        match sense {
            Some(s) => {
                let g = groups.entry(inst.context.target.as_str()).or_default();
                g.0.push(*s);
                g.1.push(inst.gold.as_str());
            }
            None => skipped_instances += 1,
        }
    }
    let mut words = Vec::new();
    let mut skipped_words = 0;
    for (word, (model, gold)) in groups {
        if model.len() < 2 {
            log::warn!("skipping {word}: fewer than two scorable instances");
            skipped_words += 1;
            continue;
        }
        words.push(WordAri {
            word: word.to_string(),
            ari: ari(&model, &gold)?,
            instances: model.len(),
        });
    }
    let mean_ari = if words.is_empty() {
        f64::NAN
    } else {
        words.iter().map(|w| w.ari).sum::<f64>() / words.len() as f64
    };
    Ok(WsiReport {
        words,
        mean_ari,
        skipped_instances,
        skipped_words,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScwsPair {
    pub first: TargetInContext,
    pub second: TargetInContext,
    pub score: f64,
}

/// Parses `word1<TAB>word2<TAB>score<TAB>context1<TAB>context2` lines.
pub fn parse_scws(text: &str) -> Result<Vec<ScwsPair>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(Error::Format(format!(
                "scws line {}: expected 5 fields",
                n + 1
            )));
        }
        let score: f64 = f[2]
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("scws line {}: bad score {:?}", n + 1, f[2])))?;
        if !score.is_finite() {
            return Err(Error::Format(format!(
                "scws line {}: score not finite",
                n + 1
            )));
        }
        out.push(ScwsPair {
            first: TargetInContext::parse(f[0], f[3]),
            second: TargetInContext::parse(f[1], f[4]),
            score,
        });
    }
    Ok(out)
}

/// Posterior-weighted cosine over all sense pairs. Weights sum to one.
pub fn avg_simc<F: Scalar>(
    first: &ResolvedContext,
    second: &ResolvedContext,
    params: &SenseModelParams<F>,
    opts: &EvalOptions,
) -> Result<F> {
    let p1 = context_posterior(first, params, opts)?;
    let p2 = context_posterior(second, params, opts)?;
    let mut total = F::zero();
    for (i, &a) in p1.probs.iter().enumerate() {
        for (j, &b) in p2.probs.iter().enumerate() {
            total += a
                * b
                * cosine(
                    params.sense_row(first.target, i),
                    params.sense_row(second.target, j),
                );
        }
    }
    Ok(total)
}

/// Cosine between the most probable senses of both words.
pub fn max_simc<F: Scalar>(
    first: &ResolvedContext,
    second: &ResolvedContext,
    params: &SenseModelParams<F>,
    opts: &EvalOptions,
) -> Result<F> {
    let i = assign_sense(first, params, opts)?;
    let j = assign_sense(second, params, opts)?;
    Ok(cosine(
        params.sense_row(first.target, i),
        params.sense_row(second.target, j),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScwsReport {
    pub avg_simc: f64,
    pub max_simc: f64,
    pub scored: usize,
    pub skipped: usize,
}

/// Spearman correlation of AvgSimC and MaxSimC with the human scores.
pub fn eval_scws<F: Scalar>(
    pairs: &[ScwsPair],
    vocab: &Vocabulary,
    params: &SenseModelParams<F>,
    opts: &EvalOptions,
) -> Result<ScwsReport> {
    let sims: Vec<Option<(f64, f64, f64)>> = pairs
        .par_iter()
        .map(|pair| {
            let a = pair.first.resolve(vocab).ok()?;
            let b = pair.second.resolve(vocab).ok()?;
            let avg = avg_simc(&a, &b, params, opts).ok()?.f64();
            let max = max_simc(&a, &b, params, opts).ok()?.f64();
            Some((pair.score, avg, max))
        })
        .collect();
    let scored: Vec<(f64, f64, f64)> = sims.iter().flatten().copied().collect();
    let human: Vec<f64> = scored.iter().map(|s| s.0).collect();
    let avg: Vec<f64> = scored.iter().map(|s| s.1).collect();
    let max: Vec<f64> = scored.iter().map(|s| s.2).collect();
    Ok(ScwsReport {
        avg_simc: spearman(&human, &avg)?,
        max_simc: spearman(&human, &max)?,
        scored: scored.len(),
        skipped: pairs.len() - scored.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors<F> {
    pub sense: usize,
    pub probability: F,
    /// `(word, cosine)`, most similar first.
    pub ranked: Vec<(WordId, F)>,
}

/// Picks the most probable sense of `word` in `context` and ranks the
/// vocabulary by cosine between that sense vector and each global embedding.
/// The query word itself is ranked like any other word.
///
/// When `word` does not occur in `context`, all context tokens are used as
/// its context.
pub fn nearest_neighbors<F: Scalar>(
    word: &str,
    context: &str,
    vocab: &Vocabulary,
    params: &SenseModelParams<F>,
    top_n: usize,
    opts: &EvalOptions,
) -> Result<Neighbors<F>> {
    let target = vocab
        .id(word)
        .ok_or_else(|| Error::OutOfVocabulary(word.to_string()))?;
    let query = TargetInContext::parse(word, context);
    let resolved = match query.resolve(vocab) {
        Ok(r) => r,
        Err(Error::TargetNotInContext) => {
            let mut ids: Vec<WordId> = query.tokens.iter().filter_map(|t| vocab.id(t)).collect();
            ids.insert(0, target);
            ResolvedContext {
                target,
                ids,
                position: 0,
            }
        }
        Err(e) => return Err(e),
    };
    let opts = match query.tokens.contains(&query.target) {
        true => *opts,
        false => EvalOptions {
            span: ContextSpan::Full,
            iter_context: IterContext::SharedWindow,
        },
    };
    let post = context_posterior(&resolved, params, &opts)?;
    let sense = post.best();
    let query_vec = params.sense_row(target, sense);
    let mut ranked: Vec<(WordId, F)> = (0..params.vocab_size() as WordId)
        .map(|w| (w, cosine(query_vec, params.global_row(w))))
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    ranked.truncate(top_n);
    Ok(Neighbors {
        sense,
        probability: post.prob(sense),
        ranked,
    })
}
