use std::collections::HashMap;

use crate::corpus::WordId;
use crate::scalar::{axpy, Scalar};

/// Gradient rows for one parameter tensor, keyed by word id.
///
/// Rows are created on first touch and kept in insertion order so merging
/// and applying are deterministic.
#[derive(Debug, Clone)]
pub struct SparseRows<F> {
    width: usize,
    index: HashMap<WordId, usize>,
    ids: Vec<WordId>,
    data: Vec<F>,
}

impl<F: Scalar> SparseRows<F> {
    pub fn new(width: usize) -> Self {
        SparseRows {
            width,
            index: HashMap::new(),
            ids: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row_mut(&mut self, id: WordId) -> &mut [F] {
        let w = self.width;
        let slot = match self.index.get(&id) {
            Some(&s) => s,
            None => {
                let s = self.ids.len();
                self.index.insert(id, s);
                self.ids.push(id);
                self.data.resize(self.data.len() + w, F::zero());
                s
            }
        };
        &mut self.data[slot * w..(slot + 1) * w]
    }

    pub fn row(&self, id: WordId) -> Option<&[F]> {
        self.index
            .get(&id)
            .map(|&s| &self.data[s * self.width..(s + 1) * self.width])
    }

    pub fn iter(&self) -> impl Iterator<Item = (WordId, &[F])> + '_ {
        self.ids
            .iter()
            .copied()
            .zip(self.data.chunks_exact(self.width.max(1)))
    }

    pub fn merge(&mut self, other: &SparseRows<F>) {
        for (id, row) in other.iter() {
            axpy(F::one(), row, self.row_mut(id));
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Dense copy with `rows` rows; untouched rows are zero.
    pub fn to_dense(&self, rows: usize) -> Vec<F> {
        let mut out = vec![F::zero(); rows * self.width];
        for (id, row) in self.iter() {
            let at = id as usize * self.width;
            out[at..at + self.width].copy_from_slice(row);
        }
        out
    }
}

/// Sparse gradients of the three parameter tensors of a sense model.
#[derive(Debug, Clone)]
pub struct GradientSet<F> {
    pub global: SparseRows<F>,
    /// Whole `K x D` blocks per word.
    pub sense: SparseRows<F>,
    pub disamb: SparseRows<F>,
}

impl<F: Scalar> GradientSet<F> {
    pub fn new(senses: usize, dim: usize) -> Self {
        GradientSet {
            global: SparseRows::new(dim),
            sense: SparseRows::new(senses * dim),
            disamb: SparseRows::new(senses * dim),
        }
    }

    pub fn merge(&mut self, other: &GradientSet<F>) {
        self.global.merge(&other.global);
        self.sense.merge(&other.sense);
        self.disamb.merge(&other.disamb);
    }

    pub fn is_finite(&self) -> bool {
        self.global.is_finite() && self.sense.is_finite() && self.disamb.is_finite()
    }
}
