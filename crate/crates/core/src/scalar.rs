//! Floating point abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar usable for parameters: `f32` or `f64`.
///
/// Besides arithmetic, a scalar knows its on-disk width so model files can be
/// written and read back bit-for-bit.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Bytes per value on disk.
    const WIDTH: u8;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from the first `WIDTH` bytes of `bytes`.
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to any float scalar")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("float scalar converts to f64")
    }
}

impl Scalar for f32 {
    const WIDTH: u8 = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const WIDTH: u8 = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

#[inline]
pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine<F: Scalar>(a: &[F], b: &[F]) -> F {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == F::zero() || nb == F::zero() {
        return F::zero();
    }
    dot(a, b) / (na * nb)
}

/// Numerically stable softmax of `logits / temperature`.
pub fn softmax<F: Scalar>(logits: &[F], temperature: F) -> Vec<F> {
    let max = logits
        .iter()
        .fold(F::neg_infinity(), |m, &z| if z > m { z } else { m });
    let mut out: Vec<F> = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .collect();
    let total: F = out.iter().copied().sum();
    for p in &mut out {
        *p = *p / total;
    }
    out
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<F: Scalar>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in values.iter().enumerate().skip(1) {
        if x > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        for x in [-30.0f64, -1.5, 0.2, 7.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_matches_high_precision() {
        let p = softmax(&[1.0f64, 0.0], 1.0);
        assert!((p[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((p[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
        let p = softmax(&[1.0f64, -1.0], 1000.0);
        assert!(p[0] - p[1] < 0.01);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5f64, 0.5]), 0);
        assert_eq!(argmax(&[0.1f64, 0.7, 0.7]), 1);
    }

    #[test]
    fn le_round_trip() {
        let mut buf = Vec::new();
        1.25f32.write_le(&mut buf);
        (-3.5f64).write_le(&mut buf);
        assert_eq!(f32::read_le(&buf), 1.25);
        assert_eq!(f64::read_le(&buf[4..]), -3.5);
    }
}
