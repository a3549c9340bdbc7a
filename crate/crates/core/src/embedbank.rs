//! Embeddings, the fixed text-embedding classifier and its softmax loss.
//!
//! Class logits are `tau · cos(region, text_b)` for every class row plus a
//! trailing background logit fixed at 0, the cosine against the all-zero
//! background embedding. `tau` multiplies the cosines (CLIP logit-scale
//! convention), so the default of 50 gives a usable softmax.

use alloc::vec::Vec;

use crate::error::{check_dim, Error, Result};
use crate::linalg::Matrix;
use crate::math;

/// Norms at or below this are treated as zero.
pub const EPS_NORM: f64 = 1e-12;
pub const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        math::norm(&self.0)
    }
}

impl From<Vec<f64>> for Embedding {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Unit-norm copy of `v`.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = math::norm(v);
    if n <= EPS_NORM || !n.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Backward pass of `y = v / ‖v‖`: maps `dL/dy` to `dL/dv`.
pub fn l2_normalize_backward(unit: &[f64], norm: f64, grad_unit: &[f64]) -> Vec<f64> {
    let proj = math::dot(unit, grad_unit);
    unit.iter().zip(grad_unit).map(|(u, g)| (g - u * proj) / norm).collect()
}

/// Cosine similarity; 0 when either vector is (numerically) zero.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let (nu, nv) = (math::norm(u), math::norm(v));
    if nu <= EPS_NORM || nv <= EPS_NORM {
        return 0.0;
    }
    (math::dot(u, v) / (nu * nv)).clamp(-1.0, 1.0)
}

/// One unit-norm text embedding per class, class-index order.
///
/// The background embedding is never stored; it is the implied all-zero
/// row at index `num_classes()`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBank {
    rows: Matrix,
    includes_background: bool,
}

impl TextBank {
    /// Normalizes every row; fails on zero rows.
    pub fn new(raw: Matrix, includes_background: bool) -> Result<Self> {
        let mut rows = raw;
        for r in 0..rows.rows() {
            let unit = l2_normalize(rows.row(r)).map_err(|_| Error::RowZeroNorm { row: r })?;
            rows.row_mut(r).copy_from_slice(&unit);
        }
        Ok(Self { rows, includes_background })
    }

    /// Keeps the rows bit for bit; each must already have norm `1 ± 1e-9`.
    pub fn from_unit_rows(rows: Matrix, includes_background: bool) -> Result<Self> {
        for r in 0..rows.rows() {
            if math::abs(math::norm(rows.row(r)) - 1.0) > UNIT_TOLERANCE {
                return Err(Error::NotUnitNorm { row: r });
            }
        }
        Ok(Self { rows, includes_background })
    }

    pub fn num_classes(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn includes_background(&self) -> bool {
        self.includes_background
    }

    pub fn row(&self, class: usize) -> &[f64] {
        self.rows.row(class)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.rows
    }

    /// Index of the background logit when the bank carries one.
    pub fn background_index(&self) -> Option<usize> {
        self.includes_background.then_some(self.num_classes())
    }

    /// Bank restricted to the listed classes, in the listed order.
    pub fn subset(&self, classes: &[usize], includes_background: bool) -> Result<TextBank> {
        let mut rows = Vec::with_capacity(classes.len());
        for &c in classes {
            if c >= self.num_classes() {
                return Err(Error::IndexOutOfRange { index: c, len: self.num_classes() });
            }
            rows.push(self.row(c).to_vec());
        }
        Ok(Self { rows: Matrix::from_rows(&rows)?, includes_background })
    }

    pub fn with_background(&self, includes_background: bool) -> TextBank {
        Self { rows: self.rows.clone(), includes_background }
    }
}

/// `tau · cos(region, T_b)` per class row, plus a 0 background logit when
/// the bank includes background.
pub fn class_logits(region: &[f64], bank: &TextBank, tau: f64) -> Result<Vec<f64>> {
    check_dim(bank.dim(), region.len())?;
    let n = math::norm(region);
    let mut logits: Vec<f64> = if n <= EPS_NORM {
        alloc::vec![0.0; bank.num_classes()]
    } else {
        bank.matrix().iter_rows().map(|t| tau * math::dot(region, t) / n).collect()
    };
    if bank.includes_background() {
        logits.push(0.0);
    }
    Ok(logits)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| math::exp(l - m)).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Softmax cross-entropy and its gradient `softmax − onehot`.
pub fn softmax_ce(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::IndexOutOfRange { index: target, len: logits.len() });
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&l| math::exp(l - m)).sum();
    let lse = m + math::ln(z);
    let loss = (lse - logits[target]).max(0.0);
    let mut grad: Vec<f64> = logits.iter().map(|&l| math::exp(l - lse)).collect();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn normalize_fixtures() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&v).unwrap(), v);
        assert_eq!(l2_normalize(&[0.0, 0.0]), Err(Error::ZeroNorm));
    }

    #[test]
    fn cosine_fixtures() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]) - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    fn bank4() -> TextBank {
        let raw =
            Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![1.0, 1.0, 1.0], vec![-1.0, 0.5, 0.0]])
                .unwrap();
        TextBank::new(raw, true).unwrap()
    }

    #[test]
    fn self_row_logit_is_tau_and_background_is_zero() {
        let bank = bank4();
        let l = class_logits(bank.row(3), &bank, 50.0).unwrap();
        assert_eq!(l.len(), 5);
        assert!((l[3] - 50.0).abs() < 1e-12);
        assert_eq!(l[4], 0.0);
        assert_eq!(bank.background_index(), Some(4));
    }

    #[test]
    fn dimension_mismatch() {
        let bank = bank4();
        assert!(matches!(class_logits(&[1.0, 2.0], &bank, 1.0), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn ce_uniform_and_stable() {
        let (l, g) = softmax_ce(&[0.3, 0.3, 0.3], 1).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
        let (l, _) = softmax_ce(&[1000.0, 0.0], 0).unwrap();
        assert!(l.is_finite() && l < 1e-300);
        assert!(matches!(softmax_ce(&[1.0], 1), Err(Error::IndexOutOfRange { .. })));
    }

    proptest! {
        #[test]
        fn bank_rows_stay_unit(rows in proptest::collection::vec(proptest::collection::vec(-3.0..3.0f64, 5), 1..6)) {
            prop_assume!(rows.iter().all(|r| math::norm(r) > 1e-3));
            let bank = TextBank::new(Matrix::from_rows(&rows).unwrap(), false).unwrap();
            for c in 0..bank.num_classes() {
                prop_assert!((math::norm(bank.row(c)) - 1.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn ce_nonnegative_grad_sums_to_zero(logits in proptest::collection::vec(-30.0..30.0f64, 2..8), t in 0usize..8) {
            let t = t % logits.len();
            let (l, g) = softmax_ce(&logits, t).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
