//! Training: losses, gradients, Adam and the mini-batch loop.

mod adam;
mod grad;
mod loss;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use grad::{GradientSet, SparseRows};
pub use loss::{
    combined_loss, distill_loss, distill_loss_and_grad, sense_loss, sense_loss_grad,
    student_posterior, window_loss, KdDirection, LossConfig, LossParts, Transfer, WindowContext,
    LOG_FLOOR,
};

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{iter_windows, ContextWindow, Corpus, NegativeSampler, Vocabulary, WordId};
use crate::error::{Error, Result};
use crate::model::{shared_window_step1, word_centered_step1, IterContext, SenseModelParams};
use crate::scalar::Scalar;
use crate::teacher::PosteriorStore;

/// Context embedding used for the center word's posterior while training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainContext {
    /// Mean of the context words' global embeddings.
    #[default]
    Global,
    /// Iterative disambiguation, first-pass posteriors held constant.
    Iterative,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Context words on each side of the center.
    pub window: usize,
    pub negatives: usize,
    pub senses: usize,
    pub dim: usize,
    pub lr: f64,
    pub alpha: f64,
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub distill: bool,
    pub kd_direction: KdDirection,
    pub train_context: TrainContext,
    pub iter_context: IterContext,
    pub sampling_exponent: f64,
    /// Worker threads for gradient computation. Results only depend on this
    /// through floating point summation order.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            window: 5,
            negatives: 10,
            senses: 3,
            dim: 300,
            lr: 0.001,
            alpha: 1.0,
            temperature: 4.0,
            epochs: 2,
            batch_size: 2048,
            seed: 0,
            distill: false,
            kd_direction: KdDirection::StudentOutside,
            train_context: TrainContext::Global,
            iter_context: IterContext::SharedWindow,
            sampling_exponent: crate::corpus::DEFAULT_SAMPLING_EXPONENT,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window", self.window),
            ("negatives", self.negatives),
            ("senses", self.senses),
            ("dim", self.dim),
            ("batch_size", self.batch_size),
            ("threads", self.threads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0) || !(self.temperature > 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::InvalidArgument(
                "lr and temperature must be positive, alpha non-negative".into(),
            ));
        }
        Ok(())
    }

    fn loss_config<F: Scalar>(&self) -> LossConfig<F> {
        LossConfig {
            distill: self.distill,
            alpha: F::of(self.alpha),
            temperature: F::of(self.temperature),
            direction: self.kd_direction,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean of `L_sense + alpha * L_transfer` per window.
    pub mean_loss: f64,
    pub mean_transfer_loss: f64,
    pub windows: usize,
}

impl fmt::Display for EpochStats {
    /// `epoch<TAB>mean_loss<TAB>mean_transfer_loss<TAB>windows`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6}\t{:.6}\t{}",
            self.epoch, self.mean_loss, self.mean_transfer_loss, self.windows
        )
    }
}

/// A window with everything needed to compute its loss.
struct Prepared<F> {
    window: ContextWindow,
    negatives: Vec<Vec<WordId>>,
    step1: Option<Vec<Vec<WordId>>>,
    teacher: Option<Vec<F>>,
}

/// Owns the parameters and optimizer state across epochs.
pub struct Trainer<F> {
    params: SenseModelParams<F>,
    adam: AdamState<F>,
    sampler: NegativeSampler,
    config: TrainConfig,
    epochs_done: usize,
    pool: Option<rayon::ThreadPool>,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(vocab: &Vocabulary, config: TrainConfig) -> Result<Self> {
        let params = SenseModelParams::init(vocab.len(), config.senses, config.dim, config.seed)?;
        Self::with_params(vocab, config, params)
    }

    /// Starts from given parameters instead of a fresh initialization.
    pub fn with_params(
        vocab: &Vocabulary,
        config: TrainConfig,
        params: SenseModelParams<F>,
    ) -> Result<Self> {
        config.validate()?;
        if params.vocab_size() != vocab.len()
            || params.senses() != config.senses
            || params.dim() != config.dim
        {
            return Err(Error::InvalidArgument(
                "parameter shapes do not match vocabulary and config".into(),
            ));
        }
        let sampler = NegativeSampler::new(vocab.counts(), config.sampling_exponent, config.seed)?;
        let pool = if config.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.threads)
                    .build()
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Trainer {
            adam: AdamState::for_model(&params),
            params,
            sampler,
            config,
            epochs_done: 0,
            pool,
        })
    }

    pub fn params(&self) -> &SenseModelParams<F> {
        &self.params
    }

    pub fn into_params(self) -> SenseModelParams<F> {
        self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// One pass over every window of the corpus.
    ///
    /// Paragraph order is shuffled per epoch; negatives are drawn fresh for
    /// every (center, context word) pair. With distillation on, every window
    /// needs a teacher posterior in `teacher`.
    pub fn run_epoch(
        &mut self,
        corpus: &Corpus,
        teacher: Option<&PosteriorStore>,
    ) -> Result<EpochStats> {
        let cfg = self.config.clone();
        if cfg.distill {
            let store = teacher.ok_or_else(|| {
                Error::InvalidArgument("distillation needs a posterior store".into())
            })?;
            if store.senses() != cfg.senses {
                return Err(Error::DimensionMismatch {
                    what: "posterior senses",
                    expected: cfg.senses,
                    found: store.senses(),
                });
            }
        }
        let epoch = self.epochs_done;
        let mut paragraphs: Vec<(u32, u32)> = corpus.paragraphs().map(|(d, p, _)| (d, p)).collect();
        let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0000);
        order_rng.set_stream(epoch as u64);
        paragraphs.shuffle(&mut order_rng);
        let mut neg_rng = self.sampler.rng(1 + epoch as u64);

        let mut stats = EpochStats {
            epoch: epoch + 1,
            mean_loss: 0.0,
            mean_transfer_loss: 0.0,
            windows: 0,
        };
        let (mut total, mut total_transfer) = (0.0, 0.0);
        let mut batch: Vec<Prepared<F>> = Vec::with_capacity(cfg.batch_size);
        for &(d, p) in &paragraphs {
            let ids = corpus.paragraph(d, p);
            for window in iter_windows(ids, cfg.window, d, p) {
                let negatives = window
                    .context
                    .iter()
                    .map(|&ctx| {
                        self.sampler
                            .draw_negatives(cfg.negatives, ctx, &mut neg_rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let step1 = match (cfg.train_context, cfg.iter_context) {
                    (TrainContext::Global, _) => None,
                    (TrainContext::Iterative, IterContext::SharedWindow) => {
                        Some(shared_window_step1(window.center, &window.context))
                    }
                    (TrainContext::Iterative, IterContext::WordCentered) => Some(
                        word_centered_step1(ids, window.position.offset as usize, cfg.window),
                    ),
                };
                let teacher = if cfg.distill {
                    let post = teacher
                        .and_then(|s| s.get(window.position.key()))
                        .ok_or(Error::MissingTeacherPosterior(window.position))?;
                    Some(post.iter().map(|&x| F::of(x)).collect())
                } else {
                    None
                };
                batch.push(Prepared {
                    window,
                    negatives,
                    step1,
                    teacher,
                });
                if batch.len() == cfg.batch_size {
                    let (l, t) = self.step_batch(&batch)?;
                    total += l;
                    total_transfer += t;
                    stats.windows += batch.len();
                    batch.clear();
                }
            }
        }
        if !batch.is_empty() {
            let (l, t) = self.step_batch(&batch)?;
            total += l;
            total_transfer += t;
            stats.windows += batch.len();
        }
        if stats.windows > 0 {
            stats.mean_loss = total / stats.windows as f64;
            stats.mean_transfer_loss = total_transfer / stats.windows as f64;
        }
        self.epochs_done += 1;
        log::info!("{stats}");
        Ok(stats)
    }

    /// Loss sums `(combined, transfer)` over the batch, then one Adam step on
    /// the mean gradient.
    fn step_batch(&mut self, batch: &[Prepared<F>]) -> Result<(f64, f64)> {
        let cfg = &self.config;
        let params = &self.params;
        let alpha = F::of(cfg.alpha);
        let temperature = F::of(cfg.temperature);
        let run = |chunk: &[Prepared<F>]| -> Result<(GradientSet<F>, f64, f64)> {
            let mut grads = GradientSet::new(params.senses(), params.dim());
            let (mut l, mut t) = (0.0, 0.0);
            for item in chunk {
                let context = match &item.step1 {
                    Some(s) => WindowContext::Iterative(s),
                    None => WindowContext::Global,
                };
                let transfer = item.teacher.as_deref().map(|teacher| Transfer {
                    teacher,
                    alpha,
                    temperature,
                    direction: cfg.kd_direction,
                });
                let parts = window_loss(
                    &item.window,
                    &item.negatives,
                    params,
                    context,
                    transfer,
                    Some(&mut grads),
                )?;
                let eff_alpha = if transfer.is_some() { alpha } else { F::zero() };
                l += parts.total(eff_alpha).f64();
                t += parts.transfer.f64();
            }
            Ok((grads, l, t))
        };
        let (mut grads, l, t) = match &self.pool {
            None => run(batch)?,
            Some(pool) => {
                let chunk = batch.len().div_ceil(cfg.threads);
                let parts: Vec<_> = pool.install(|| {
                    batch
                        .par_chunks(chunk.max(1))
                        .map(run)
                        .collect::<Result<Vec<_>>>()
                })?;
                let mut iter = parts.into_iter();
                let (mut g, mut l, mut t) = iter.next().expect("non-empty batch");
                for (g2, l2, t2) in iter {
                    g.merge(&g2);
                    l += l2;
                    t += t2;
                }
                (g, l, t)
            }
        };
        let scale = F::one() / F::of(batch.len() as f64);
        for rows in [&mut grads.global, &mut grads.sense, &mut grads.disamb] {
            let ids: Vec<WordId> = rows.iter().map(|(id, _)| id).collect();
            for id in ids {
                for x in rows.row_mut(id) {
                    *x *= scale;
                }
            }
        }
        let lr = F::of(cfg.lr);
        adam_step(&mut self.params, &grads, &mut self.adam, lr)?;
        Ok((l, t))
    }
}

/// Output of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutput<F> {
    pub params: SenseModelParams<F>,
    pub epochs: Vec<EpochStats>,
}

/// Trains a fresh model for `config.epochs` epochs.
pub fn train<F: Scalar>(
    corpus: &Corpus,
    vocab: &Vocabulary,
    config: &TrainConfig,
    teacher: Option<&PosteriorStore>,
) -> Result<TrainOutput<F>> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument(
            "corpus has no training windows".into(),
        ));
    }
    let mut trainer = Trainer::<F>::new(vocab, config.clone())?;
    let mut epochs = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        epochs.push(trainer.run_epoch(corpus, teacher)?);
    }
    Ok(TrainOutput {
        params: trainer.into_params(),
        epochs,
    })
}

/// Combined loss of one window under `config`; see [`combined_loss`].
pub fn window_objective<F: Scalar>(
    window: &ContextWindow,
    negatives: &[Vec<WordId>],
    params: &SenseModelParams<F>,
    teacher: Option<&[F]>,
    config: &TrainConfig,
) -> Result<F> {
    combined_loss(window, negatives, params, teacher, &config.loss_config())
}
