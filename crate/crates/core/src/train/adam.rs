//! Adam with sparse, row-wise updates.

use crate::error::{Error, Result};
use crate::model::SenseModelParams;
use crate::scalar::Scalar;
use crate::train::grad::{GradientSet, SparseRows};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment buffers for a list of tensors.
///
/// Moments are stored densely but only the rows present in a gradient are
/// updated. A row that was never touched keeps zero moments, which is what
/// dense Adam would hold for a parameter whose gradient has always been zero.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    first: Vec<Vec<F>>,
    second: Vec<Vec<F>>,
    step: u64,
    pub beta1: F,
    pub beta2: F,
    pub epsilon: F,
}

impl<F: Scalar> AdamState<F> {
    /// Zero moments for tensors of the given lengths.
    pub fn new(lengths: &[usize]) -> Self {
        AdamState {
            first: lengths.iter().map(|&n| vec![F::zero(); n]).collect(),
            second: lengths.iter().map(|&n| vec![F::zero(); n]).collect(),
            step: 0,
            beta1: F::of(BETA1),
            beta2: F::of(BETA2),
            epsilon: F::of(EPSILON),
        }
    }

    pub fn for_model(params: &SenseModelParams<F>) -> Self {
        Self::new(&[params.global.len(), params.sense.len(), params.disamb.len()])
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self, tensor: usize) -> &[F] {
        &self.first[tensor]
    }

    pub fn second_moments(&self, tensor: usize) -> &[F] {
        &self.second[tensor]
    }

    /// One bias-corrected update of every tensor, restricted to the rows
    /// present in the matching gradient. Fails without touching anything when
    /// a gradient holds a non-finite value.
    pub fn apply(
        &mut self,
        lr: F,
        tensors: &mut [&mut [F]],
        grads: &[&SparseRows<F>],
    ) -> Result<()> {
        if tensors.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::LengthMismatch(self.first.len(), grads.len()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        self.step += 1;
        let t = self.step as i32;
        let one = F::one();
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        for (i, (tensor, grad)) in tensors.iter_mut().zip(grads).enumerate() {
            let w = grad.width();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (id, row) in grad.iter() {
                let at = id as usize * w;
                for j in 0..w {
                    let g = row[j];
                    let mi = b1 * m[at + j] + (one - b1) * g;
                    let vi = b2 * v[at + j] + (one - b2) * g * g;
                    m[at + j] = mi;
                    v[at + j] = vi;
                    let m_hat = mi / c1;
                    let v_hat = vi / c2;
                    tensor[at + j] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Adam update of a sense model from one batch gradient.
pub fn adam_step<F: Scalar>(
    params: &mut SenseModelParams<F>,
    grads: &GradientSet<F>,
    state: &mut AdamState<F>,
    lr: F,
) -> Result<()> {
    state.apply(
        lr,
        &mut [&mut params.global, &mut params.sense, &mut params.disamb],
        &[&grads.global, &grads.sense, &grads.disamb],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut theta = vec![0.5f64];
        let mut g = SparseRows::new(1);
        g.row_mut(0)[0] = 1.0;
        let mut st = AdamState::new(&[1]);
        st.apply(0.001, &mut [&mut theta], &[&g]).unwrap();
        let expected = 0.5 - 0.001 / (1.0 + 1e-8);
        assert!((theta[0] - expected).abs() < 1e-15);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut p = SenseModelParams::<f64>::init(4, 2, 3, 1).unwrap();
        let before = p.clone();
        let mut st = AdamState::for_model(&p);
        let mut g = GradientSet::new(2, 3);
        g.global.row_mut(2);
        adam_step(&mut p, &g, &mut st, 0.001).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = SenseModelParams::<f64>::init(4, 2, 3, 1).unwrap();
        let before = p.clone();
        let mut st = AdamState::for_model(&p);
        let mut g = GradientSet::new(2, 3);
        g.sense.row_mut(1)[4] = f64::INFINITY;
        assert!(matches!(
            adam_step(&mut p, &g, &mut st, 0.001),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(p, before);
        assert_eq!(st.step(), 0);
    }

    /// Textbook dense Adam over the whole tensor.
    fn dense_adam(theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: i32, lr: f64) {
        for i in 0..theta.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * grad[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * grad[i] * grad[i];
            let mh = m[i] / (1.0 - BETA1.powi(t));
            let vh = v[i] / (1.0 - BETA2.powi(t));
            theta[i] -= lr * mh / (vh.sqrt() + EPSILON);
        }
    }

    proptest! {
        #[test]
        fn sparse_equals_dense_on_touched_rows(
            rows in proptest::collection::btree_set(0u32..12, 1..6),
            vals in proptest::collection::vec(-3.0f64..3.0, 72),
            init in proptest::collection::vec(-1.0f64..1.0, 72),
        ) {
            let width = 6;
            let mut grads = SparseRows::new(width);
            for &r in &rows {
                let at = r as usize * width;
                grads.row_mut(r).copy_from_slice(&vals[at..at + width]);
            }
            let mut sparse = init.clone();
            let mut st = AdamState::new(&[72]);
            st.apply(0.01, &mut [&mut sparse], &[&grads]).unwrap();

            let mut dense = init.clone();
            let (mut m, mut v) = (vec![0.0; 72], vec![0.0; 72]);
            dense_adam(&mut dense, &grads.to_dense(12), &mut m, &mut v, 1, 0.01);
            for i in 0..72 {
                prop_assert_eq!(sparse[i].to_bits(), dense[i].to_bits());
                prop_assert_eq!(st.first_moments(0)[i].to_bits(), m[i].to_bits());
            }
        }
    }
}
