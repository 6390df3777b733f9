//! Teacher sense model: a linear decomposition of contextual encoder vectors
//! into per-word sense vectors, with attention over the mean contextual vector
//! of the window. Its posteriors are the distillation targets of the student.

mod format;

pub use format::{
    validate_records, PosteriorStore, RecordEntry, RecordStore, TeacherRecord, ValidationReport,
    POSTERIOR_MAGIC, RECORD_MAGIC, RECORD_VERSION,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::WordId;
use crate::error::{Error, Result};
use crate::model::{fill_uniform, posterior_from_logits, SensePosterior};
use crate::scalar::{axpy, dot, Scalar};
use crate::train::{AdamState, SparseRows};

/// Default width of encoder output vectors.
pub const DEFAULT_TEACHER_DIM: usize = 768;

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSenseParams<F> {
    vocab_size: usize,
    senses: usize,
    dim: usize,
    /// Sense vectors in encoder space, `V x K x Dt`.
    pub sense: Vec<F>,
    /// Disambiguation vectors in encoder space, `V x K x Dt`.
    pub disamb: Vec<F>,
}

impl<F: Scalar> TeacherSenseParams<F> {
    pub fn init(vocab_size: usize, senses: usize, dim: usize, seed: u64) -> Result<Self> {
        if vocab_size == 0 || senses == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "teacher dimensions must be positive (V={vocab_size}, K={senses}, Dt={dim})"
            )));
        }
        let n = vocab_size * senses * dim;
        let mut p = TeacherSenseParams {
            vocab_size,
            senses,
            dim,
            sense: vec![F::zero(); n],
            disamb: vec![F::zero(); n],
        };
        let bound = 1.0 / dim as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        fill_uniform(&mut p.sense, bound, &mut rng);
        rng.set_stream(4);
        fill_uniform(&mut p.disamb, bound, &mut rng);
        Ok(p)
    }

    /// Assembles parameters from flat `V x K x Dt` buffers.
    pub fn from_parts(
        vocab_size: usize,
        senses: usize,
        dim: usize,
        sense: Vec<F>,
        disamb: Vec<F>,
    ) -> Result<Self> {
        let n = vocab_size * senses * dim;
        if n == 0 {
            return Err(Error::InvalidArgument(
                "teacher dimensions must be positive".into(),
            ));
        }
        for (what, len) in [
            ("teacher sense rows", sense.len()),
            ("teacher disambiguation rows", disamb.len()),
        ] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: n,
                    found: len,
                });
            }
        }
        Ok(TeacherSenseParams {
            vocab_size,
            senses,
            dim,
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

    pub fn sense_row(&self, w: WordId, k: usize) -> &[F] {
        let at = (w as usize * self.senses + k) * self.dim;
        &self.sense[at..at + self.dim]
    }

    pub fn sense_row_mut(&mut self, w: WordId, k: usize) -> &mut [F] {
        let at = (w as usize * self.senses + k) * self.dim;
        &mut self.sense[at..at + self.dim]
    }

    pub fn disamb_row(&self, w: WordId, k: usize) -> &[F] {
        let at = (w as usize * self.senses + k) * self.dim;
        &self.disamb[at..at + self.dim]
    }

    pub fn disamb_row_mut(&mut self, w: WordId, k: usize) -> &mut [F] {
        let at = (w as usize * self.senses + k) * self.dim;
        &mut self.disamb[at..at + self.dim]
    }
}

/// Mean of every vector present in the record, the center included.
pub fn teacher_context_embedding<F: Scalar>(record: &TeacherRecord) -> Result<Vec<F>> {
    let first = record.entries.first().ok_or(Error::EmptyContext)?;
    let mut c = vec![F::zero(); first.vector.len()];
    let inv = 1.0 / record.entries.len() as f64;
    for e in &record.entries {
        if e.vector.len() != c.len() {
            return Err(Error::DimensionMismatch {
                what: "record vector",
                expected: c.len(),
                found: e.vector.len(),
            });
        }
        for (ci, &x) in c.iter_mut().zip(&e.vector) {
            *ci += F::of(x as f64 * inv);
        }
    }
    Ok(c)
}

fn check_record_dim<F: Scalar>(
    record: &TeacherRecord,
    tparams: &TeacherSenseParams<F>,
) -> Result<()> {
    if (record.center as usize) >= tparams.vocab_size() {
        return Err(Error::Format(format!(
            "center id {} out of range",
            record.center
        )));
    }
    match record.entries.first() {
        Some(e) if e.vector.len() != tparams.dim() => Err(Error::DimensionMismatch {
            what: "teacher dimension",
            expected: tparams.dim(),
            found: e.vector.len(),
        }),
        Some(_) => Ok(()),
        None => Err(Error::EmptyContext),
    }
}

fn teacher_logits<F: Scalar>(center: WordId, c: &[F], tparams: &TeacherSenseParams<F>) -> Vec<F> {
    (0..tparams.senses())
        .map(|k| dot(tparams.disamb_row(center, k), c))
        .collect()
}

pub fn teacher_sense_posterior<F: Scalar>(
    center: WordId,
    record: &TeacherRecord,
    tparams: &TeacherSenseParams<F>,
    temperature: F,
) -> Result<SensePosterior<F>> {
    check_record_dim(record, tparams)?;
    let c = teacher_context_embedding(record)?;
    posterior_from_logits(&teacher_logits(center, &c, tparams), temperature)
}

/// Gradients of the reconstruction loss.
#[derive(Debug, Clone)]
pub struct TeacherGradients<F> {
    pub sense: SparseRows<F>,
    pub disamb: SparseRows<F>,
}

impl<F: Scalar> TeacherGradients<F> {
    pub fn new(senses: usize, dim: usize) -> Self {
        TeacherGradients {
            sense: SparseRows::new(senses * dim),
            disamb: SparseRows::new(senses * dim),
        }
    }
}

/// Squared reconstruction error of the center vector by the
/// posterior-weighted teacher sense vectors; gradient accumulated into
/// `grads` when given.
pub fn bert_sense_loss_with_grad<F: Scalar>(
    record: &TeacherRecord,
    tparams: &TeacherSenseParams<F>,
    grads: Option<&mut TeacherGradients<F>>,
) -> Result<F> {
    check_record_dim(record, tparams)?;
    let b = record
        .center_vector()
        .ok_or_else(|| Error::Format("record has no center vector".into()))?;
    let (senses, dim, center) = (tparams.senses(), tparams.dim(), record.center);
    let c = teacher_context_embedding::<F>(record)?;
    let post = posterior_from_logits(&teacher_logits(center, &c, tparams), F::one())?.probs;
    let mut resid: Vec<F> = b.iter().map(|&x| -F::of(x as f64)).collect();
    for (k, &p) in post.iter().enumerate() {
        axpy(p, tparams.sense_row(center, k), &mut resid);
    }
    let loss = dot(&resid, &resid);
    if let Some(g) = grads {
        let two = F::of(2.0);
        let u_block = g.sense.row_mut(center);
        for (k, &p) in post.iter().enumerate() {
            axpy(two * p, &resid, &mut u_block[k * dim..(k + 1) * dim]);
        }
        let a: Vec<F> = (0..senses)
            .map(|k| two * dot(tparams.sense_row(center, k), &resid))
            .collect();
        let mean = dot(&post, &a);
        let d_block = g.disamb.row_mut(center);
        for k in 0..senses {
            axpy(
                post[k] * (a[k] - mean),
                &c,
                &mut d_block[k * dim..(k + 1) * dim],
            );
        }
    }
    Ok(loss)
}

pub fn bert_sense_loss<F: Scalar>(
    record: &TeacherRecord,
    tparams: &TeacherSenseParams<F>,
) -> Result<F> {
    bert_sense_loss_with_grad(record, tparams, None)
}

#[derive(Debug, Clone)]
pub struct TeacherFitConfig {
    pub vocab_size: usize,
    pub senses: usize,
    /// Expected encoder width; must match the record store.
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TeacherFitConfig {
    fn default() -> Self {
        TeacherFitConfig {
            vocab_size: 0,
            senses: 3,
            dim: DEFAULT_TEACHER_DIM,
            epochs: 5,
            lr: 0.001,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TeacherFit<F> {
    pub params: TeacherSenseParams<F>,
    /// Mean reconstruction loss of each epoch, measured while training.
    pub epoch_losses: Vec<f64>,
}

/// Fits the teacher sense model by Adam on the mean reconstruction loss.
/// Record order is reshuffled every epoch from `seed`.
pub fn fit_teacher<F: Scalar>(
    store: &RecordStore,
    config: &TeacherFitConfig,
) -> Result<TeacherFit<F>> {
    if store.is_empty() {
        return Err(Error::InvalidArgument("record store is empty".into()));
    }
    if store.dim != config.dim {
        return Err(Error::DimensionMismatch {
            what: "teacher dimension",
            expected: config.dim,
            found: store.dim,
        });
    }
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::InvalidArgument(
            "batch size and learning rate must be positive".into(),
        ));
    }
    let mut params =
        TeacherSenseParams::<F>::init(config.vocab_size, config.senses, config.dim, config.seed)?;
    let mut adam = AdamState::new(&[params.sense.len(), params.disamb.len()]);
    let mut order: Vec<usize> = (0..store.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lr = F::of(config.lr);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = TeacherGradients::new(config.senses, config.dim);
            for &i in batch {
                total +=
                    bert_sense_loss_with_grad(&store.records[i], &params, Some(&mut grads))?.f64();
            }
            let scale = F::one() / F::of(batch.len() as f64);
            scale_rows(&mut grads.sense, scale);
            scale_rows(&mut grads.disamb, scale);
            adam.apply(
                lr,
                &mut [&mut params.sense, &mut params.disamb],
                &[&grads.sense, &grads.disamb],
            )?;
        }
        let mean = total / store.len() as f64;
        log::info!("teacher epoch loss {mean}");
        epoch_losses.push(mean);
    }
    Ok(TeacherFit {
        params,
        epoch_losses,
    })
}

fn scale_rows<F: Scalar>(rows: &mut SparseRows<F>, scale: F) {
    let ids: Vec<WordId> = rows.iter().map(|(id, _)| id).collect();
    for id in ids {
        for x in rows.row_mut(id) {
            *x *= scale;
        }
    }
}

/// Temperature-`T` teacher posterior for every record, keyed by position.
pub fn export_posteriors<F: Scalar>(
    store: &RecordStore,
    tparams: &TeacherSenseParams<F>,
    temperature: F,
) -> Result<PosteriorStore> {
    let mut out = PosteriorStore::new(tparams.senses());
    for rec in &store.records {
        let post = teacher_sense_posterior(rec.center, rec, tparams, temperature)?;
        out.insert(rec.key, post.probs.iter().map(|p| p.f64()).collect())?;
    }
    Ok(out)
}
