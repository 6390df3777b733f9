//! Negative-sampling sense loss, distillation loss and their analytic
//! gradients.

use crate::corpus::{ContextWindow, WordId};
use crate::error::{Error, Result};
use crate::model::{
    context_embedding_global, context_embedding_iterative_with, posterior_from_logits,
    sense_logits, SenseModelParams,
};
use crate::scalar::{axpy, dot, sigmoid, softmax, Scalar};
use crate::train::grad::GradientSet;

/// Smallest argument passed to `ln` by any loss.
pub const LOG_FLOOR: f64 = 1e-12;

/// Order of the two distributions in the transfer cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KdDirection {
    /// `-T^2 sum_k p_student(k) log p_teacher(k)`: student weights, teacher
    /// inside the log.
    #[default]
    StudentOutside,
    /// `-T^2 sum_k p_teacher(k) log p_student(k)`, the usual distillation form.
    TeacherOutside,
}

/// How the center word's sense posterior sees its context.
#[derive(Debug, Clone, Copy)]
pub enum WindowContext<'a> {
    /// Mean of the context words' global embeddings.
    Global,
    /// Iterative disambiguation; `step1[l]` is the first-pass context of
    /// context word `l`. First-pass posteriors are constants for the gradient.
    Iterative(&'a [Vec<WordId>]),
}

/// Distillation target for one window.
#[derive(Debug, Clone, Copy)]
pub struct Transfer<'a, F> {
    pub teacher: &'a [F],
    pub alpha: F,
    pub temperature: F,
    pub direction: KdDirection,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts<F> {
    pub sense: F,
    /// Unweighted transfer loss; zero without a teacher.
    pub transfer: F,
}

impl<F: Scalar> LossParts<F> {
    pub fn total(&self, alpha: F) -> F {
        if alpha == F::zero() {
            self.sense
        } else {
            self.sense + alpha * self.transfer
        }
    }
}

fn check_teacher<F: Scalar>(teacher: &[F], senses: usize) -> Result<()> {
    if teacher.len() != senses {
        return Err(Error::DimensionMismatch {
            what: "teacher posterior",
            expected: senses,
            found: teacher.len(),
        });
    }
    if teacher.iter().any(|&p| !p.is_finite() || p < F::zero()) {
        return Err(Error::Format(
            "teacher posterior has invalid entries".into(),
        ));
    }
    let total: F = teacher.iter().copied().sum();
    if (total - F::one()).abs().f64() > 1e-6 {
        return Err(Error::Format(format!(
            "teacher posterior sums to {total}, not 1"
        )));
    }
    Ok(())
}

fn log_softmax<F: Scalar>(logits: &[F], temperature: F) -> Vec<F> {
    let max = logits
        .iter()
        .fold(F::neg_infinity(), |m, &z| if z > m { z } else { m });
    let scaled: Vec<F> = logits.iter().map(|&z| (z - max) / temperature).collect();
    let lse = scaled.iter().map(|s| s.exp()).sum::<F>().ln();
    scaled.into_iter().map(|s| s - lse).collect()
}

/// Temperature-scaled transfer loss between student logits and a teacher
/// posterior, together with its gradient with respect to the logits.
pub fn distill_loss_and_grad<F: Scalar>(
    student_logits: &[F],
    teacher: &[F],
    temperature: F,
    direction: KdDirection,
) -> Result<(F, Vec<F>)> {
    check_teacher(teacher, student_logits.len())?;
    let student = posterior_from_logits(student_logits, temperature)?.probs;
    let t2 = temperature * temperature;
    let floor = F::of(LOG_FLOOR);
    match direction {
        KdDirection::StudentOutside => {
            // a_k = dL/dq_k
            let a: Vec<F> = teacher.iter().map(|&t| -t2 * t.max(floor).ln()).collect();
            let loss = dot(&student, &a);
            let mean = loss;
            let grad = student
                .iter()
                .zip(&a)
                .map(|(&q, &ak)| q * (ak - mean) / temperature)
                .collect();
            Ok((loss, grad))
        }
        KdDirection::TeacherOutside => {
            let logq = log_softmax(student_logits, temperature);
            let loss = -t2 * dot(teacher, &logq);
            let mass: F = teacher.iter().copied().sum();
            let grad = student
                .iter()
                .zip(teacher)
                .map(|(&q, &t)| temperature * (q * mass - t))
                .collect();
            Ok((loss, grad))
        }
    }
}

pub fn distill_loss<F: Scalar>(
    student_logits: &[F],
    teacher: &[F],
    temperature: F,
    direction: KdDirection,
) -> Result<F> {
    distill_loss_and_grad(student_logits, teacher, temperature, direction).map(|(l, _)| l)
}

/// Loss of one window and, when `grads` is given, its gradient accumulated
/// into `grads`.
///
/// `negatives[l]` are the negative samples paired with `window.context[l]`.
/// Negatives are scored through the full sense mixture, like positives.
pub fn window_loss<F: Scalar>(
    window: &ContextWindow,
    negatives: &[Vec<WordId>],
    params: &SenseModelParams<F>,
    context: WindowContext<'_>,
    transfer: Option<Transfer<'_, F>>,
    mut grads: Option<&mut GradientSet<F>>,
) -> Result<LossParts<F>> {
    let ctx = &window.context;
    if ctx.is_empty() {
        return Err(Error::EmptyContext);
    }
    if negatives.len() != ctx.len() {
        return Err(Error::LengthMismatch(ctx.len(), negatives.len()));
    }
    let senses = params.senses();
    let dim = params.dim();
    let center = window.center;

    let (c, step1_weights) = match context {
        WindowContext::Global => (context_embedding_global(ctx, params)?, None),
        WindowContext::Iterative(step1) => {
            let it = context_embedding_iterative_with(ctx, step1, params)?;
            (it.embedding, Some(it.weights))
        }
    };
    let logits = sense_logits(center, &c, params);
    let post = posterior_from_logits(&logits, F::one())?.probs;

    let one = F::one();
    let floor = F::of(LOG_FLOOR);
    let mut loss = F::zero();
    // dL/dpi_k summed over every scored target
    let mut dpost = vec![F::zero(); senses];
    let mut scores = vec![F::zero(); senses];
    for (l, &positive) in ctx.iter().enumerate() {
        let targets =
            std::iter::once((positive, true)).chain(negatives[l].iter().map(|&n| (n, false)));
        for (target, is_positive) in targets {
            let g_t = params.global_row(target);
            for (k, s) in scores.iter_mut().enumerate() {
                *s = sigmoid(dot(g_t, params.sense_row(center, k)));
            }
            let p = dot(&post, &scores);
            let arg = if is_positive { p } else { one - p };
            if arg < floor {
                loss -= floor.ln();
                continue;
            }
            loss -= arg.ln();
            let Some(g) = grads.as_deref_mut() else {
                continue;
            };
            let e = if is_positive {
                -one / p
            } else {
                one / (one - p)
            };
            for k in 0..senses {
                dpost[k] += e * scores[k];
            }
            let g_row = g.global.row_mut(target);
            for k in 0..senses {
                let coef = e * post[k] * scores[k] * (one - scores[k]);
                axpy(coef, params.sense_row(center, k), g_row);
            }
            let v_block = g.sense.row_mut(center);
            for k in 0..senses {
                let coef = e * post[k] * scores[k] * (one - scores[k]);
                axpy(coef, g_t, &mut v_block[k * dim..(k + 1) * dim]);
            }
        }
    }

    let mut parts = LossParts {
        sense: loss,
        transfer: F::zero(),
    };
    let mut dlogits = match grads {
        Some(_) => {
            let mean = dot(&post, &dpost);
            post.iter()
                .zip(&dpost)
                .map(|(&q, &a)| q * (a - mean))
                .collect()
        }
        None => vec![F::zero(); senses],
    };
    if let Some(tr) = transfer {
        let (tl, tgrad) = distill_loss_and_grad(&logits, tr.teacher, tr.temperature, tr.direction)?;
        parts.transfer = tl;
        if tr.alpha != F::zero() {
            for (d, t) in dlogits.iter_mut().zip(&tgrad) {
                *d += tr.alpha * *t;
            }
        }
    }

    let Some(g) = grads else {
        return Ok(parts);
    };
    let d_block = g.disamb.row_mut(center);
    for k in 0..senses {
        axpy(dlogits[k], &c, &mut d_block[k * dim..(k + 1) * dim]);
    }
    let mut dc = vec![F::zero(); dim];
    for k in 0..senses {
        axpy(dlogits[k], params.disamb_row(center, k), &mut dc);
    }
    let inv = one / F::of(ctx.len() as f64);
    match step1_weights {
        None => {
            for &w in ctx {
                axpy(inv, &dc, g.global.row_mut(w));
            }
        }
        Some(weights) => {
            for (&w, wl) in ctx.iter().zip(&weights) {
                let block = g.sense.row_mut(w);
                for k in 0..senses {
                    axpy(inv * wl[k], &dc, &mut block[k * dim..(k + 1) * dim]);
                }
            }
        }
    }
    Ok(parts)
}

/// Negative-sampling loss of one window with the global context embedding.
pub fn sense_loss<F: Scalar>(
    window: &ContextWindow,
    negatives: &[Vec<WordId>],
    params: &SenseModelParams<F>,
) -> Result<F> {
    window_loss(window, negatives, params, WindowContext::Global, None, None).map(|p| p.sense)
}

pub fn sense_loss_grad<F: Scalar>(
    window: &ContextWindow,
    negatives: &[Vec<WordId>],
    params: &SenseModelParams<F>,
) -> Result<GradientSet<F>> {
    let mut g = GradientSet::new(params.senses(), params.dim());
    window_loss(
        window,
        negatives,
        params,
        WindowContext::Global,
        None,
        Some(&mut g),
    )?;
    Ok(g)
}

/// Settings of the combined objective that are not per-window.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig<F> {
    pub distill: bool,
    pub alpha: F,
    pub temperature: F,
    pub direction: KdDirection,
}

/// `L_sense + alpha * L_transfer` for one window (global context).
pub fn combined_loss<F: Scalar>(
    window: &ContextWindow,
    negatives: &[Vec<WordId>],
    params: &SenseModelParams<F>,
    teacher: Option<&[F]>,
    config: &LossConfig<F>,
) -> Result<F> {
    let transfer = if config.distill {
        let teacher = teacher.ok_or(Error::MissingTeacherPosterior(window.position))?;
        Some(Transfer {
            teacher,
            alpha: config.alpha,
            temperature: config.temperature,
            direction: config.direction,
        })
    } else {
        None
    };
    let parts = window_loss(
        window,
        negatives,
        params,
        WindowContext::Global,
        transfer,
        None,
    )?;
    Ok(parts.total(if config.distill {
        config.alpha
    } else {
        F::zero()
    }))
}

/// Softened student posterior for a window, as used by the transfer loss.
pub fn student_posterior<F: Scalar>(
    window: &ContextWindow,
    params: &SenseModelParams<F>,
    context: WindowContext<'_>,
    temperature: F,
) -> Result<Vec<F>> {
    let c = match context {
        WindowContext::Global => context_embedding_global(&window.context, params)?,
        WindowContext::Iterative(step1) => {
            context_embedding_iterative_with(&window.context, step1, params)?.embedding
        }
    };
    Ok(softmax(
        &sense_logits(window.center, &c, params),
        temperature,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::WindowPosition;
    use crate::model::{mixture_context_prob, shared_window_step1};

    fn window(center: WordId, context: Vec<WordId>) -> ContextWindow {
        ContextWindow {
            center,
            context,
            position: WindowPosition {
                doc: 0,
                paragraph: 2,
                offset: 3,
            },
        }
    }

    fn scaled_params(seed: u64) -> SenseModelParams<f64> {
        let mut p = SenseModelParams::<f64>::init(20, 3, 8, seed).unwrap();
        for x in p.global.iter_mut().chain(&mut p.sense).chain(&mut p.disamb) {
            *x *= 4.0;
        }
        p
    }

    #[test]
    fn zero_params_give_ln2_per_term() {
        let p = SenseModelParams::<f64>::zeros(6, 3, 4).unwrap();
        let l = sense_loss(&window(0, vec![1]), &[vec![2, 3]], &p).unwrap();
        assert!((l - 2.079_441_541_679_836).abs() < 1e-12);
        let negs = vec![vec![4, 5, 1, 2]; 3];
        let l = sense_loss(&window(0, vec![1, 2, 3]), &negs, &p).unwrap();
        assert!((l - 3.0 * 5.0 * 2f64.ln()).abs() < 1e-12);
    }

    /// Compositional oracle: rebuilds the loss from the model-level mixture
    /// probability, term by term.
    #[test]
    fn matches_composition_of_model_ops() {
        for seed in 0..5 {
            let p = scaled_params(seed);
            let w = window(3, vec![1, 7, 7, 12]);
            let negs: Vec<Vec<WordId>> = (0..4)
                .map(|l| vec![(l * 3 + 2) as u32, (l * 5 + 9) as u32 % 20])
                .collect();
            let mut expected = 0.0;
            for (l, &ctx) in w.context.iter().enumerate() {
                expected -= mixture_context_prob(ctx, &w, &p).unwrap().ln();
                for &n in &negs[l] {
                    expected -= (1.0 - mixture_context_prob(n, &w, &p).unwrap()).ln();
                }
            }
            let got = sense_loss(&w, &negs, &p).unwrap();
            assert!((got - expected).abs() < 1e-12 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn untouched_rows_have_no_gradient() {
        let p = scaled_params(1);
        let w = window(3, vec![1, 7]);
        let g = sense_loss_grad(&w, &[vec![2], vec![9]], &p).unwrap();
        let touched: Vec<u32> = g.global.iter().map(|(i, _)| i).collect();
        assert_eq!(touched, vec![1, 2, 7, 9]);
        assert_eq!(g.sense.iter().map(|(i, _)| i).collect::<Vec<_>>(), vec![3]);
        assert_eq!(g.disamb.iter().map(|(i, _)| i).collect::<Vec<_>>(), vec![3]);
    }

    #[test]
    fn zero_params_negative_gradients_oppose_positive() {
        // with v = 0 every g gradient vanishes; give v a value so the sign shows
        let mut p = SenseModelParams::<f64>::zeros(4, 1, 1).unwrap();
        p.sense_row_mut(0, 0)[0] = 1.0;
        let g = sense_loss_grad(&window(0, vec![1]), &[vec![2]], &p).unwrap();
        let pos = g.global.row(1).unwrap()[0];
        let neg = g.global.row(2).unwrap()[0];
        assert!(pos < 0.0 && neg > 0.0);
        assert!((pos + neg).abs() < 1e-15);
    }

    #[test]
    fn distill_uniform_and_one_hot() {
        let uniform = [1.0 / 3.0; 3];
        let l = distill_loss(&[0.0f64; 3], &uniform, 4.0, KdDirection::StudentOutside).unwrap();
        assert!((l - 17.577_796_618_689_755).abs() < 1e-9);
        let q = [0.2f64, 0.5, 0.3];
        let l = distill_loss(&[0.0, 60.0, 0.0], &q, 1.0, KdDirection::StudentOutside).unwrap();
        assert!((l + 0.5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn distill_self_is_entropy() {
        let logits = [0.3f64, -1.2, 2.0];
        let student = softmax(&logits, 1.0);
        let entropy: f64 = -student.iter().map(|p| p * p.ln()).sum::<f64>();
        for dir in [KdDirection::StudentOutside, KdDirection::TeacherOutside] {
            let l = distill_loss(&logits, &student, 1.0, dir).unwrap();
            assert!((l - entropy).abs() < 1e-9);
        }
    }

    #[test]
    fn distill_rejects_unnormalized_teacher() {
        assert!(distill_loss(
            &[0.0f64, 0.0],
            &[0.5, 0.6],
            1.0,
            KdDirection::StudentOutside
        )
        .is_err());
        assert!(distill_loss(&[0.0f64, 0.0], &[1.0], 1.0, KdDirection::StudentOutside).is_err());
    }

    #[test]
    fn distill_grad_matches_finite_differences() {
        let teacher = [0.1f64, 0.6, 0.3];
        for dir in [KdDirection::StudentOutside, KdDirection::TeacherOutside] {
            for t in [1.0, 4.0] {
                let z = [0.4f64, -0.7, 1.3];
                let (_, grad) = distill_loss_and_grad(&z, &teacher, t, dir).unwrap();
                for k in 0..3 {
                    let h = 1e-5;
                    let mut zp = z;
                    zp[k] += h;
                    let mut zm = z;
                    zm[k] -= h;
                    let fd = (distill_loss(&zp, &teacher, t, dir).unwrap()
                        - distill_loss(&zm, &teacher, t, dir).unwrap())
                        / (2.0 * h);
                    let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-8);
                    assert!(rel < 1e-4, "{dir:?} T={t} k={k}: {fd} vs {}", grad[k]);
                }
            }
        }
    }

    #[test]
    fn combined_loss_cases() {
        let p = scaled_params(4);
        let w = window(5, vec![1, 2, 3]);
        let negs = vec![vec![8, 9]; 3];
        let teacher = [0.7f64, 0.2, 0.1];
        let a = sense_loss(&w, &negs, &p).unwrap();
        let c = context_embedding_global(&w.context, &p).unwrap();
        let b = distill_loss(
            &sense_logits(5, &c, &p),
            &teacher,
            4.0,
            KdDirection::StudentOutside,
        )
        .unwrap();
        let cfg = |alpha| LossConfig {
            distill: true,
            alpha,
            temperature: 4.0,
            direction: KdDirection::StudentOutside,
        };
        let l0 = combined_loss(&w, &negs, &p, Some(&teacher), &cfg(0.0)).unwrap();
        assert_eq!(l0.to_bits(), a.to_bits());
        let l1 = combined_loss(&w, &negs, &p, Some(&teacher), &cfg(1.0)).unwrap();
        assert!((l1 - (a + b)).abs() < 1e-12);
        let lh = combined_loss(&w, &negs, &p, Some(&teacher), &cfg(0.5)).unwrap();
        assert!((lh - (a + 0.5 * b)).abs() < 1e-12);
        assert!(b > 0.0 && l0 <= lh && lh <= l1);
        match combined_loss(&w, &negs, &p, None, &cfg(1.0)) {
            Err(Error::MissingTeacherPosterior(pos)) => assert_eq!(pos, w.position),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn iterative_gradient_flows_into_context_sense_rows() {
        let p = scaled_params(2);
        let w = window(3, vec![1, 7]);
        let step1 = shared_window_step1(w.center, &w.context);
        let mut g = GradientSet::new(3, 8);
        window_loss(
            &w,
            &[vec![2], vec![9]],
            &p,
            WindowContext::Iterative(&step1),
            None,
            Some(&mut g),
        )
        .unwrap();
        assert!(g.sense.row(1).is_some() && g.sense.row(7).is_some());
        // global rows only from scoring targets, no context averaging term
        let touched: Vec<u32> = g.global.iter().map(|(i, _)| i).collect();
        assert_eq!(touched, vec![1, 2, 7, 9]);
    }
}
