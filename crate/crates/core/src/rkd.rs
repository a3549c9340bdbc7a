//! Region-based knowledge distillation losses.
//!
//! Student and teacher batches are `K × D` matrices, one embedding per
//! class-agnostic proposal. Every loss returns its value together with the
//! gradient with respect to the student batch; the teacher is frozen.

use crate::error::{check_dim, Error, Result};
use crate::linalg::Matrix;
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct RkdWeights {
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for RkdWeights {
    fn default() -> Self {
        Self { beta1: 0.15, beta2: 0.15 }
    }
}

impl RkdWeights {
    pub const OFF: RkdWeights = RkdWeights { beta1: 0.0, beta2: 0.0 };

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.beta1) && ok(self.beta2) {
            Ok(())
        } else {
            Err(Error::InvalidConfig("distillation weights must be finite and non-negative"))
        }
    }
}

fn check_same_shape(a: &Matrix, b: &Matrix) -> Result<()> {
    check_dim(a.rows(), b.rows())?;
    check_dim(a.cols(), b.cols())
}

/// Point-wise L1 matching: `(1/K) Σ_k ‖s_k − t_k‖₁`, subgradient 0 at ties.
pub fn l1_loss(student: &Matrix, teacher: &Matrix) -> Result<(f64, Matrix)> {
    check_same_shape(student, teacher)?;
    let k = student.rows().max(1) as f64;
    let mut grad = Matrix::zeros(student.rows(), student.cols());
    let mut loss = 0.0;
    for ((g, s), t) in grad.as_mut_slice().iter_mut().zip(student.as_slice()).zip(teacher.as_slice()) {
        let d = s - t;
        loss += math::abs(d);
        *g = if d > 0.0 {
            1.0 / k
        } else if d < 0.0 {
            -1.0 / k
        } else {
            0.0
        };
    }
    Ok((loss / k, grad))
}

/// Gram matrix `x xᵀ`, each row divided by its own L2 norm.
pub fn similarity_matrix(x: &Matrix) -> Result<Matrix> {
    Ok(similarity_parts(x)?.0)
}

// (row-normalized Gram, row norms of the raw Gram)
fn similarity_parts(x: &Matrix) -> Result<(Matrix, alloc::vec::Vec<f64>)> {
    let mut g = x.matmul_t(x)?;
    let mut norms = alloc::vec::Vec::with_capacity(g.rows());
    for r in 0..g.rows() {
        let n = math::norm(g.row(r));
        if n <= crate::embedbank::EPS_NORM {
            return Err(Error::RowZeroNorm { row: r });
        }
        g.row_mut(r).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((g, norms))
}

/// Inter-embedding relationship matching: `(1/K²) ‖S_R − S_I‖²_F`.
///
/// Only the `K × K` similarity matrices are compared, so student and
/// teacher may have different embedding widths.
pub fn irm_loss(student: &Matrix, teacher: &Matrix) -> Result<(f64, Matrix)> {
    check_dim(teacher.rows(), student.rows())?;
    let k = student.rows();
    let (s_r, norms) = similarity_parts(student)?;
    let s_i = similarity_matrix(teacher)?;
    let kk = (k * k) as f64;
    let mut d_s = s_r.clone();
    d_s.axpy(-1.0, &s_i)?;
    let loss = d_s.frobenius_sq() / kk;
    d_s.scale(2.0 / kk);
    // back through row normalization: dG_i = (dS_i − S_i (S_i·dS_i)) / ‖G_i‖
    let mut d_g = Matrix::zeros(k, k);
    for i in 0..k {
        let proj = math::dot(s_r.row(i), d_s.row(i));
        for j in 0..k {
            d_g[(i, j)] = (d_s[(i, j)] - s_r[(i, j)] * proj) / norms[i];
        }
    }
    // G = X Xᵀ  =>  dX = (dG + dGᵀ) X
    let sym = Matrix::from_fn(k, k, |i, j| d_g[(i, j)] + d_g[(j, i)]);
    let grad = sym.matmul(student)?;
    Ok((loss, grad))
}

/// `β1 · L1 + β2 · IRM`, gradients summed.
pub fn rkd_objective(student: &Matrix, teacher: &Matrix, weights: RkdWeights) -> Result<(f64, Matrix)> {
    let (l1, g1) = l1_loss(student, teacher)?;
    let (irm, g2) = irm_loss(student, teacher)?;
    let mut grad = g1.scaled(weights.beta1);
    grad.axpy(weights.beta2, &g2)?;
    Ok((weights.beta1 * l1 + weights.beta2 * irm, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;
    use alloc::vec;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn randn(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = rng_from(&[seed]);
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn l1_fixtures() {
        let t = randn(3, 4, 1);
        assert_eq!(l1_loss(&t, &t).unwrap().0, 0.0);
        assert_eq!(l1_loss(&t, &t).unwrap().1.max_abs(), 0.0);
        let s = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let t = Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        assert_eq!(l1_loss(&s, &t).unwrap().0, 2.0);
        assert!(matches!(l1_loss(&s, &randn(2, 2, 3)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn similarity_fixtures() {
        assert_eq!(similarity_matrix(&Matrix::identity(3)).unwrap(), Matrix::identity(3));
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let s = similarity_matrix(&x).unwrap();
        let (r2, r5) = (2f64.sqrt(), 5f64.sqrt());
        let want = [1.0 / r2, 1.0 / r2, 1.0 / r5, 2.0 / r5];
        for (a, b) in s.as_slice().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let zero_row = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(similarity_matrix(&zero_row), Err(Error::RowZeroNorm { row: 1 }));
    }

    #[test]
    fn irm_zero_on_identity_and_allows_width_mismatch() {
        let t = randn(4, 6, 2);
        assert!(irm_loss(&t, &t).unwrap().0.abs() < 1e-30);
        let s = randn(4, 3, 5);
        let (l, g) = irm_loss(&s, &t).unwrap();
        assert!(l > 0.0);
        assert_eq!(g.shape(), (4, 3));
    }

    #[test]
    fn objective_reductions() {
        let s = randn(3, 5, 10);
        let t = randn(3, 5, 11);
        let (l, g) = rkd_objective(&s, &t, RkdWeights::OFF).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.max_abs(), 0.0);
        let (l, g) = rkd_objective(&s, &t, RkdWeights { beta1: 1.0, beta2: 0.0 }).unwrap();
        let (l1, g1) = l1_loss(&s, &t).unwrap();
        assert_eq!(l, l1);
        assert_eq!(g, g1);
        let w = RkdWeights::default();
        let (l, _) = rkd_objective(&s, &t, w).unwrap();
        let irm = irm_loss(&s, &t).unwrap().0;
        assert!((l - (0.15 * l1 + 0.15 * irm)).abs() < 1e-15);
        let (l2x, g2x) = rkd_objective(&s, &t, RkdWeights { beta1: 0.3, beta2: 0.3 }).unwrap();
        let (_, g) = rkd_objective(&s, &t, w).unwrap();
        assert!((l2x - 2.0 * l).abs() < 1e-14);
        let mut diff = g.scaled(2.0);
        diff.axpy(-1.0, &g2x).unwrap();
        assert!(diff.max_abs() < 1e-14);
    }
}
