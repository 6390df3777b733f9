//! Sense embedding parameters and the forward computations of the model.
//!
//! Every word owns a global embedding, `K` sense embeddings and `K`
//! disambiguation embeddings. A context embedding is matched against the
//! disambiguation embeddings of the center word (dot-product attention) to
//! get a posterior over its senses; the context word likelihood is the
//! posterior-weighted mixture of per-sense sigmoid scores.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{context_range, ContextWindow, WordId};
use crate::error::{Error, Result};
use crate::scalar::{argmax, axpy, dot, sigmoid, softmax, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct SenseModelParams<F> {
    vocab_size: usize,
    senses: usize,
    dim: usize,
    /// `V x D`
    pub global: Vec<F>,
    /// `V x K x D`, word-major then sense.
    pub sense: Vec<F>,
    /// `V x K x D`, same layout as `sense`.
    pub disamb: Vec<F>,
}

fn check_dims(v: usize, k: usize, d: usize) -> Result<()> {
    if v == 0 || k == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!(
            "model dimensions must be positive (V={v}, K={k}, D={d})"
        )));
    }
    Ok(())
}

impl<F: Scalar> SenseModelParams<F> {
    pub fn zeros(vocab_size: usize, senses: usize, dim: usize) -> Result<Self> {
        check_dims(vocab_size, senses, dim)?;
        Ok(SenseModelParams {
            vocab_size,
            senses,
            dim,
            global: vec![F::zero(); vocab_size * dim],
            sense: vec![F::zero(); vocab_size * senses * dim],
            disamb: vec![F::zero(); vocab_size * senses * dim],
        })
    }

    /// Every entry i.i.d. uniform on `[-1/D, 1/D]`, filled in the order
    /// global, sense, disambiguation.
    pub fn init(vocab_size: usize, senses: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(vocab_size, senses, dim)?;
        let bound = 1.0 / dim as f64;
        fill_uniform(&mut p.global, bound, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        fill_uniform(&mut p.sense, bound, &mut rng);
        rng.set_stream(2);
        fill_uniform(&mut p.disamb, bound, &mut rng);
        Ok(p)
    }

    /// Wraps existing buffers, checking their lengths.
    pub fn from_parts(
        vocab_size: usize,
        senses: usize,
        dim: usize,
        global: Vec<F>,
        sense: Vec<F>,
        disamb: Vec<F>,
    ) -> Result<Self> {
        check_dims(vocab_size, senses, dim)?;
        let block = vocab_size * senses * dim;
        for (what, expected, found) in [
            ("global", vocab_size * dim, global.len()),
            ("sense", block, sense.len()),
            ("disambiguation", block, disamb.len()),
        ] {
            if expected != found {
                return Err(Error::DimensionMismatch {
                    what,
                    expected,
                    found,
                });
            }
        }
        Ok(SenseModelParams {
            vocab_size,
            senses,
            dim,
            global,
            sense,
            disamb,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn senses(&self) -> usize {
        self.senses
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn global_row(&self, w: WordId) -> &[F] {
        let d = self.dim;
        &self.global[w as usize * d..(w as usize + 1) * d]
    }

    #[inline]
    pub fn sense_row(&self, w: WordId, k: usize) -> &[F] {
        let d = self.dim;
        let at = (w as usize * self.senses + k) * d;
        &self.sense[at..at + d]
    }

    #[inline]
    pub fn disamb_row(&self, w: WordId, k: usize) -> &[F] {
        let d = self.dim;
        let at = (w as usize * self.senses + k) * d;
        &self.disamb[at..at + d]
    }

    pub fn global_row_mut(&mut self, w: WordId) -> &mut [F] {
        let d = self.dim;
        &mut self.global[w as usize * d..(w as usize + 1) * d]
    }

    pub fn sense_row_mut(&mut self, w: WordId, k: usize) -> &mut [F] {
        let d = self.dim;
        let at = (w as usize * self.senses + k) * d;
        &mut self.sense[at..at + d]
    }

    pub fn disamb_row_mut(&mut self, w: WordId, k: usize) -> &mut [F] {
        let d = self.dim;
        let at = (w as usize * self.senses + k) * d;
        &mut self.disamb[at..at + d]
    }

    pub fn is_finite(&self) -> bool {
        self.global
            .iter()
            .chain(&self.sense)
            .chain(&self.disamb)
            .all(|x| x.is_finite())
    }

    pub fn convert<G: Scalar>(&self) -> SenseModelParams<G> {
        let conv = |xs: &[F]| xs.iter().map(|x| G::of(x.f64())).collect();
        SenseModelParams {
            vocab_size: self.vocab_size,
            senses: self.senses,
            dim: self.dim,
            global: conv(&self.global),
            sense: conv(&self.sense),
            disamb: conv(&self.disamb),
        }
    }
}

pub(crate) fn fill_uniform<F: Scalar>(buf: &mut [F], bound: f64, rng: &mut ChaCha8Rng) {
    let dist = Uniform::new_inclusive(-bound, bound);
    for x in buf {
        *x = F::of(dist.sample(rng)).max(F::of(-bound)).min(F::of(bound));
    }
}

/// Probability distribution over the senses of one word in one context.
#[derive(Debug, Clone, PartialEq)]
pub struct SensePosterior<F> {
    pub probs: Vec<F>,
}

impl<F: Scalar> SensePosterior<F> {
    /// Most probable sense, lowest index on ties.
    pub fn best(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn prob(&self, k: usize) -> F {
        self.probs[k]
    }
}

/// Mean of the global embeddings of `context`.
pub fn context_embedding_global<F: Scalar>(
    context: &[WordId],
    params: &SenseModelParams<F>,
) -> Result<Vec<F>> {
    if context.is_empty() {
        return Err(Error::EmptyContext);
    }
    let mut c = vec![F::zero(); params.dim()];
    let inv = F::one() / F::of(context.len() as f64);
    for &w in context {
        axpy(inv, params.global_row(w), &mut c);
    }
    Ok(c)
}

/// Attention logits `<d_word^k, c>` for every sense `k`.
pub fn sense_logits<F: Scalar>(word: WordId, c: &[F], params: &SenseModelParams<F>) -> Vec<F> {
    (0..params.senses())
        .map(|k| dot(params.disamb_row(word, k), c))
        .collect()
}

/// Softmax over `logits / temperature`, rejecting non-finite logits.
pub fn posterior_from_logits<F: Scalar>(logits: &[F], temperature: F) -> Result<SensePosterior<F>> {
    if !(temperature > F::zero()) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("sense logits"));
    }
    Ok(SensePosterior {
        probs: softmax(logits, temperature),
    })
}

pub fn sense_posterior<F: Scalar>(
    word: WordId,
    c: &[F],
    params: &SenseModelParams<F>,
    temperature: F,
) -> Result<SensePosterior<F>> {
    posterior_from_logits(&sense_logits(word, c, params), temperature)
}

/// Which context the first pass of iterative disambiguation uses for each
/// context word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IterContext {
    /// The remaining words of the same window, center included.
    #[default]
    SharedWindow,
    /// A fresh `±Δ` window around the context word in its paragraph.
    WordCentered,
}

/// First-pass contexts in shared-window mode: for context word `l`, every
/// other word of the window including the center.
pub fn shared_window_step1(center: WordId, context: &[WordId]) -> Vec<Vec<WordId>> {
    (0..context.len())
        .map(|l| {
            std::iter::once(center)
                .chain(
                    context
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != l)
                        .map(|(_, &w)| w),
                )
                .collect()
        })
        .collect()
}

/// First-pass contexts in word-centered mode for the window centered at
/// `pos` of `paragraph`.
pub fn word_centered_step1(paragraph: &[WordId], pos: usize, delta: usize) -> Vec<Vec<WordId>> {
    context_range(paragraph.len(), pos, delta)
        .map(|j| {
            context_range(paragraph.len(), j, delta)
                .map(|i| paragraph[i])
                .collect()
        })
        .collect()
}

/// Result of iterative disambiguation: the context embedding together with
/// the first-pass posteriors used to weight each context word's senses.
#[derive(Debug, Clone)]
pub struct IterativeContext<F> {
    pub embedding: Vec<F>,
    pub weights: Vec<Vec<F>>,
}

/// Iterative context embedding with explicit first-pass contexts
/// (`step1[l]` is the context used to disambiguate `context[l]`).
pub fn context_embedding_iterative_with<F: Scalar>(
    context: &[WordId],
    step1: &[Vec<WordId>],
    params: &SenseModelParams<F>,
) -> Result<IterativeContext<F>> {
    if context.is_empty() {
        return Err(Error::EmptyContext);
    }
    if step1.len() != context.len() {
        return Err(Error::LengthMismatch(context.len(), step1.len()));
    }
    let mut embedding = vec![F::zero(); params.dim()];
    let inv = F::one() / F::of(context.len() as f64);
    let mut weights = Vec::with_capacity(context.len());
    for (&w, own) in context.iter().zip(step1) {
        let c_own = context_embedding_global(own, params)?;
        let post = sense_posterior(w, &c_own, params, F::one())?;
        for (k, &p) in post.probs.iter().enumerate() {
            axpy(inv * p, params.sense_row(w, k), &mut embedding);
        }
        weights.push(post.probs);
    }
    Ok(IterativeContext { embedding, weights })
}

/// Iterative context embedding of a window in shared-window mode.
pub fn context_embedding_iterative<F: Scalar>(
    window: &ContextWindow,
    params: &SenseModelParams<F>,
) -> Result<Vec<F>> {
    let step1 = shared_window_step1(window.center, &window.context);
    Ok(context_embedding_iterative_with(&window.context, &step1, params)?.embedding)
}

/// `sigma(<g_context, v_center^k>)`
pub fn score_context_word<F: Scalar>(
    context_word: WordId,
    center: WordId,
    k: usize,
    params: &SenseModelParams<F>,
) -> F {
    sigmoid(dot(
        params.global_row(context_word),
        params.sense_row(center, k),
    ))
}

/// Mixture probability of `target` under an already computed posterior of `center`.
pub fn mixture_prob<F: Scalar>(
    target: WordId,
    center: WordId,
    posterior: &SensePosterior<F>,
    params: &SenseModelParams<F>,
) -> F {
    posterior
        .probs
        .iter()
        .enumerate()
        .map(|(k, &p)| p * score_context_word(target, center, k, params))
        .sum()
}

/// Probability of `context_word` given the window's center word, with the
/// sense posterior driven by the global context embedding.
pub fn mixture_context_prob<F: Scalar>(
    context_word: WordId,
    window: &ContextWindow,
    params: &SenseModelParams<F>,
) -> Result<F> {
    let c = context_embedding_global(&window.context, params)?;
    let post = sense_posterior(window.center, &c, params, F::one())?;
    Ok(mixture_prob(context_word, window.center, &post, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::WindowPosition;
    use proptest::prelude::*;

    fn window(center: WordId, context: Vec<WordId>) -> ContextWindow {
        ContextWindow {
            center,
            context,
            position: WindowPosition {
                doc: 0,
                paragraph: 0,
                offset: 0,
            },
        }
    }

    fn random_params(v: usize, k: usize, d: usize, seed: u64, scale: f64) -> SenseModelParams<f64> {
        let mut p = SenseModelParams::<f64>::init(v, k, d, seed).unwrap();
        let s = scale * d as f64;
        for x in p.global.iter_mut().chain(&mut p.sense).chain(&mut p.disamb) {
            *x *= s;
        }
        p
    }

    #[test]
    fn init_bounds_and_determinism() {
        let a = SenseModelParams::<f32>::init(20, 3, 300, 5).unwrap();
        let b = SenseModelParams::<f32>::init(20, 3, 300, 5).unwrap();
        assert_eq!(a, b);
        let bound = 1.0f32 / 300.0;
        assert!(a
            .global
            .iter()
            .chain(&a.sense)
            .chain(&a.disamb)
            .all(|x| x.abs() <= bound));
        assert!(SenseModelParams::<f32>::init(0, 3, 4, 0).is_err());
        assert!(SenseModelParams::<f32>::init(2, 0, 4, 0).is_err());
    }

    #[test]
    fn init_mean_is_centered() {
        let p = SenseModelParams::<f64>::init(300, 3, 50, 11).unwrap();
        let all: Vec<f64> = p
            .global
            .iter()
            .chain(&p.sense)
            .chain(&p.disamb)
            .copied()
            .collect();
        let n = all.len() as f64;
        assert!(n >= 1e5);
        let mean = all.iter().sum::<f64>() / n;
        let range = 2.0 / 50.0;
        let tol = 4.0 * (range / 12f64.sqrt()) / n.sqrt();
        assert!(mean.abs() < tol, "mean {mean} tol {tol}");
    }

    #[test]
    fn global_context_is_mean() {
        let mut p = SenseModelParams::<f64>::zeros(3, 1, 2).unwrap();
        p.global_row_mut(0).copy_from_slice(&[1.0, 0.0]);
        p.global_row_mut(1).copy_from_slice(&[0.0, 1.0]);
        assert_eq!(
            context_embedding_global(&[0, 1], &p).unwrap(),
            vec![0.5, 0.5]
        );
        assert_eq!(
            context_embedding_global(&[1, 1, 1], &p).unwrap(),
            vec![0.0, 1.0]
        );
        assert!(matches!(
            context_embedding_global::<f64>(&[], &p),
            Err(Error::EmptyContext)
        ));
    }

    #[test]
    fn posterior_examples() {
        let mut p = SenseModelParams::<f64>::zeros(1, 2, 1).unwrap();
        p.disamb_row_mut(0, 0)[0] = 1.0;
        let post = sense_posterior(0, &[1.0], &p, 1.0).unwrap();
        assert!((post.probs[0] - 0.731_06).abs() < 1e-5);
        assert!((post.probs[1] - 0.268_94).abs() < 1e-5);
        // identical disambiguation rows give the uniform distribution
        let q = SenseModelParams::<f64>::zeros(1, 3, 2).unwrap();
        for t in [0.5, 1.0, 4.0] {
            let post = sense_posterior(0, &[0.3, -2.0], &q, t).unwrap();
            assert!(post.probs.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        }
        assert!(sense_posterior(0, &[1.0], &p, 0.0).is_err());
        assert!(matches!(
            sense_posterior(0, &[f64::NAN], &p, 1.0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn score_examples() {
        let mut p = SenseModelParams::<f64>::zeros(2, 1, 1).unwrap();
        assert_eq!(score_context_word(0, 1, 0, &p), 0.5);
        p.global_row_mut(0)[0] = 3f64.ln();
        p.sense_row_mut(1, 0)[0] = 1.0;
        assert!((score_context_word(0, 1, 0, &p) - 0.75).abs() < 1e-15);
        let pos = score_context_word(0, 1, 0, &p);
        p.sense_row_mut(1, 0)[0] = -1.0;
        assert!((pos + score_context_word(0, 1, 0, &p) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mixture_with_one_sense_is_the_score() {
        let p = random_params(6, 1, 4, 3, 0.5);
        let w = window(2, vec![0, 4, 5]);
        let m = mixture_context_prob(4, &w, &p).unwrap();
        assert!((m - score_context_word(4, 2, 0, &p)).abs() < 1e-15);
    }

    #[test]
    fn mixture_follows_a_dominant_sense() {
        let mut p = random_params(4, 3, 2, 9, 0.5);
        // c = mean(g_1, g_2); make d^1 . c exceed the others by 50
        let w = window(0, vec![1, 2]);
        let c = context_embedding_global(&w.context, &p).unwrap();
        let cc = dot(&c, &c);
        for k in 0..3 {
            let row = p.disamb_row_mut(0, k);
            for (x, ci) in row.iter_mut().zip(&c) {
                *x = if k == 1 { 50.0 * ci / cc } else { 0.0 };
            }
        }
        let m = mixture_context_prob(3, &w, &p).unwrap();
        assert!((m - score_context_word(3, 0, 1, &p)).abs() < 1e-6);
    }

    #[test]
    fn mixture_of_equal_scores() {
        let mut p = random_params(4, 3, 2, 1, 0.5);
        for k in 1..3 {
            let first = p.sense_row(0, 0).to_vec();
            p.sense_row_mut(0, k).copy_from_slice(&first);
        }
        let w = window(0, vec![1, 2]);
        let s = score_context_word(3, 0, 0, &p);
        assert!((mixture_context_prob(3, &w, &p).unwrap() - s).abs() < 1e-15);
    }

    #[test]
    fn iterative_with_one_sense_averages_sense_vectors() {
        let p = random_params(5, 1, 3, 4, 0.5);
        let w = window(0, vec![1, 3, 4]);
        let c = context_embedding_iterative(&w, &p).unwrap();
        for i in 0..3 {
            let expected =
                (p.sense_row(1, 0)[i] + p.sense_row(3, 0)[i] + p.sense_row(4, 0)[i]) / 3.0;
            assert!((c[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn iterative_with_identical_senses_ignores_posteriors() {
        let mut p = random_params(5, 3, 3, 8, 0.5);
        for w in 0..5 {
            let first = p.sense_row(w, 0).to_vec();
            for k in 1..3 {
                p.sense_row_mut(w, k).copy_from_slice(&first);
            }
        }
        let w = window(0, vec![1, 2]);
        let c = context_embedding_iterative(&w, &p).unwrap();
        for i in 0..3 {
            let expected = (p.sense_row(1, 0)[i] + p.sense_row(2, 0)[i]) / 2.0;
            assert!((c[i] - expected).abs() < 1e-12);
        }
    }

    /// Hand-built V=3, K=2, D=2 instance checked against a step-by-step
    /// evaluation written out with scalar arithmetic.
    #[test]
    fn iterative_matches_hand_oracle() {
        let g = [[1.0, 0.0], [0.0, 2.0], [-1.0, 1.0]];
        let v = [
            [[0.5, 0.5], [1.0, -1.0]],
            [[2.0, 0.0], [0.0, 2.0]],
            [[-1.0, 0.0], [0.3, 0.7]],
        ];
        let d = [
            [[1.0, 0.0], [0.0, 1.0]],
            [[1.0, 1.0], [-1.0, 0.0]],
            [[0.0, -1.0], [2.0, 0.0]],
        ];
        let flat3 = |a: &[[[f64; 2]; 2]; 3]| a.iter().flatten().flatten().copied().collect();
        let p = SenseModelParams::from_parts(
            3,
            2,
            2,
            g.iter().flatten().copied().collect(),
            flat3(&v),
            flat3(&d),
        )
        .unwrap();
        // window: center 0, context [1, 2]
        // word 1's own context: {0, 2}; word 2's own context: {0, 1}
        let c1 = [(g[0][0] + g[2][0]) / 2.0, (g[0][1] + g[2][1]) / 2.0];
        let c2 = [(g[0][0] + g[1][0]) / 2.0, (g[0][1] + g[1][1]) / 2.0];
        let post = |dd: &[[f64; 2]; 2], c: &[f64; 2]| {
            let z0 = dd[0][0] * c[0] + dd[0][1] * c[1];
            let z1 = dd[1][0] * c[0] + dd[1][1] * c[1];
            let e0 = z0.exp();
            let e1 = z1.exp();
            [e0 / (e0 + e1), e1 / (e0 + e1)]
        };
        let p1 = post(&d[1], &c1);
        let p2 = post(&d[2], &c2);
        let mut expected = [0.0; 2];
        for i in 0..2 {
            expected[i] =
                (p1[0] * v[1][0][i] + p1[1] * v[1][1][i] + p2[0] * v[2][0][i] + p2[1] * v[2][1][i])
                    / 2.0;
        }
        let c = context_embedding_iterative(&window(0, vec![1, 2]), &p).unwrap();
        assert!((c[0] - expected[0]).abs() < 1e-14);
        assert!((c[1] - expected[1]).abs() < 1e-14);
    }

    #[test]
    fn word_centered_step1_uses_paragraph_neighbourhoods() {
        let para = [10, 11, 12, 13, 14];
        let s = word_centered_step1(&para, 2, 1);
        assert_eq!(s, vec![vec![10, 12], vec![12, 14]]);
        let shared = shared_window_step1(12, &[11, 13]);
        assert_eq!(shared, vec![vec![12, 13], vec![12, 11]]);
    }

    proptest! {
        #[test]
        fn posterior_normalized_and_shift_invariant(
            logits in proptest::collection::vec(-20.0f64..20.0, 1..6),
            shift in -100.0f64..100.0,
            t in 0.1f64..10.0,
        ) {
            let a = posterior_from_logits(&logits, t).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
            let b = posterior_from_logits(&shifted, t).unwrap();
            prop_assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (x, y) in a.probs.iter().zip(&b.probs) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn mixture_prob_in_open_unit_interval(seed in 0u64..1000) {
            let p = random_params(6, 3, 4, seed, 0.5);
            let w = window((seed % 6) as u32, vec![0, 1, 5]);
            let m = mixture_context_prob(2, &w, &p).unwrap();
            prop_assert!(m > 0.0 && m < 1.0);
        }
    }
}
