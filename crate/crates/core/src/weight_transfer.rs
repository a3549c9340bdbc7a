//! Weight-transfer function from the distilled projection to the
//! image-level-supervision projection.
//!
//! `W_P = W_θ2 · ρ(W_θ1 · W_D)` with ρ a LeakyReLU, `W_D` frozen. Region
//! embeddings on the transferred path add a separate two-layer perceptron
//! over the raw region features: `W_P·x + S2·ρ(S1·x)`.

use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{check_dim, Result};
use crate::linalg::Matrix;
use crate::seeding::Rng;

pub const DEFAULT_SLOPE: f64 = 0.1;
pub const DEFAULT_HIDDEN: usize = 512;
pub const DEFAULT_SKIP_HIDDEN: usize = 1024;

#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        slope
    }
}

/// Linear region-feature → embedding map, `E × F`, no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    pub matrix: Matrix,
    pub frozen: bool,
}

impl ProjectionWeights {
    pub fn new(matrix: Matrix) -> Self {
        Self { matrix, frozen: false }
    }

    pub fn embed_dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.matrix.cols()
    }
}

/// Uniform `±1/√fan_in` initialization.
pub fn uniform_init(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let bound = 1.0 / crate::math::sqrt(cols.max(1) as f64);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferParams {
    /// `H × E`
    pub w_theta1: Matrix,
    /// `E × H`
    pub w_theta2: Matrix,
    pub slope: f64,
}

impl TransferParams {
    /// Independent `±1/√fan_in` draws for both layers.
    pub fn init(embed_dim: usize, hidden: usize, slope: f64, rng: &mut Rng) -> Self {
        Self { w_theta1: uniform_init(hidden, embed_dim, rng), w_theta2: uniform_init(embed_dim, hidden, rng), slope }
    }

    /// `W_θ1` drawn `±1/√E`, `W_θ2 = √(E/H)·W_θ1ᵀ`, so both layers are
    /// uniform at their own `1/√fan_in` bound and `W_P` starts close to a
    /// positive multiple of `W_D` (about `(1+slope)/2 · √(H/E)/3`).
    pub fn init_tied(embed_dim: usize, hidden: usize, slope: f64, rng: &mut Rng) -> Self {
        let w_theta1 = uniform_init(hidden, embed_dim, rng);
        let mut w_theta2 = w_theta1.transpose();
        w_theta2.scale(crate::math::sqrt(embed_dim as f64 / hidden.max(1) as f64));
        Self { w_theta1, w_theta2, slope }
    }

    pub fn identity(embed_dim: usize) -> Self {
        Self { w_theta1: Matrix::identity(embed_dim), w_theta2: Matrix::identity(embed_dim), slope: 1.0 }
    }
}

/// Gradients of the transfer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferGrads {
    pub w_theta1: Matrix,
    pub w_theta2: Matrix,
}

/// `W_P = W_θ2 ρ(W_θ1 W_D)`. `wd` is only read.
pub fn transfer(wd: &ProjectionWeights, params: &TransferParams) -> Result<ProjectionWeights> {
    let pre = params.w_theta1.matmul(&wd.matrix)?;
    let act = pre.map(|v| leaky_relu(v, params.slope));
    Ok(ProjectionWeights::new(params.w_theta2.matmul(&act)?))
}

/// Back-propagates `dL/dW_P` into the transfer parameters. No gradient is
/// produced for `W_D`.
pub fn transfer_backward(wd: &ProjectionWeights, params: &TransferParams, grad_wp: &Matrix) -> Result<TransferGrads> {
    let pre = params.w_theta1.matmul(&wd.matrix)?;
    let act = pre.map(|v| leaky_relu(v, params.slope));
    check_dim(params.w_theta2.rows(), grad_wp.rows())?;
    check_dim(act.cols(), grad_wp.cols())?;
    let d_theta2 = grad_wp.matmul_t(&act)?;
    let mut d_pre = params.w_theta2.t_matmul(grad_wp)?;
    for (d, p) in d_pre.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        *d *= leaky_relu_grad(*p, params.slope);
    }
    let d_theta1 = d_pre.matmul_t(&wd.matrix)?;
    Ok(TransferGrads { w_theta1: d_theta1, w_theta2: d_theta2 })
}

/// Two-layer perceptron `F → H_s → E` across the transferred projection.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipParams {
    /// `H_s × F`
    pub w1: Matrix,
    /// `E × H_s`
    pub w2: Matrix,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkipGrads {
    pub w1: Matrix,
    pub w2: Matrix,
}

/// Intermediate values of one skip forward pass, kept for backward.
#[derive(Debug, Clone)]
pub struct SkipTrace {
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl SkipParams {
    pub fn init(feature_dim: usize, hidden: usize, embed_dim: usize, slope: f64, rng: &mut Rng) -> Self {
        Self { w1: uniform_init(hidden, feature_dim, rng), w2: uniform_init(embed_dim, hidden, rng), slope }
    }

    pub fn zeros(feature_dim: usize, hidden: usize, embed_dim: usize, slope: f64) -> Self {
        Self { w1: Matrix::zeros(hidden, feature_dim), w2: Matrix::zeros(embed_dim, hidden), slope }
    }

    pub fn forward(&self, feature: &[f64]) -> Result<(Vec<f64>, SkipTrace)> {
        let pre = self.w1.mul_vec(feature)?;
        let hidden: Vec<f64> = pre.iter().map(|&v| leaky_relu(v, self.slope)).collect();
        let out = self.w2.mul_vec(&hidden)?;
        Ok((out, SkipTrace { pre, hidden }))
    }

    /// Accumulates the gradient of one sample into `grads`.
    pub fn accumulate_backward(
        &self,
        feature: &[f64],
        trace: &SkipTrace,
        grad_out: &[f64],
        grads: &mut SkipGrads,
    ) -> Result<()> {
        grads.w2.add_outer(1.0, grad_out, &trace.hidden)?;
        let mut d_pre = self.w2.t_mul_vec(grad_out)?;
        for (d, &p) in d_pre.iter_mut().zip(&trace.pre) {
            *d *= leaky_relu_grad(p, self.slope);
        }
        grads.w1.add_outer(1.0, &d_pre, feature)
    }

    pub fn zero_grads(&self) -> SkipGrads {
        SkipGrads {
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
        }
    }
}

/// Region embedding on the transferred path: `W_P·x + skip(x)`.
pub fn ils_region_embed(feature: &[f64], wp: &ProjectionWeights, skip: &SkipParams) -> Result<Vec<f64>> {
    let mut e = wp.matrix.mul_vec(feature)?;
    let (s, _) = skip.forward(feature)?;
    check_dim(e.len(), s.len())?;
    for (a, b) in e.iter_mut().zip(s) {
        *a += b;
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::seeding::rng_from;

    #[test]
    fn leaky_relu_values() {
        assert_eq!(leaky_relu(2.0, 0.1), 2.0);
        assert_eq!(leaky_relu(-1.0, 0.1), -0.1);
        assert_eq!(leaky_relu(0.0, 0.1), 0.0);
    }

    #[test]
    fn identity_configuration_reproduces_wd() {
        let mut rng = rng_from(&[3]);
        let wd = ProjectionWeights { matrix: uniform_init(4, 6, &mut rng), frozen: true };
        let before = wd.clone();
        let wp = transfer(&wd, &TransferParams::identity(4)).unwrap();
        assert_eq!(wp.matrix, wd.matrix);
        assert!(!wp.frozen);
        assert_eq!(wd, before);
    }

    #[test]
    fn zero_theta2_annihilates() {
        let mut rng = rng_from(&[4]);
        let wd = ProjectionWeights::new(uniform_init(4, 6, &mut rng));
        let mut p = TransferParams::init(4, 5, 0.1, &mut rng);
        p.w_theta2 = Matrix::zeros(4, 5);
        assert_eq!(transfer(&wd, &p).unwrap().matrix.max_abs(), 0.0);
    }

    #[test]
    fn transfer_shape_errors() {
        let mut rng = rng_from(&[5]);
        let wd = ProjectionWeights::new(uniform_init(4, 6, &mut rng));
        let p = TransferParams::init(3, 5, 0.1, &mut rng);
        assert!(matches!(transfer(&wd, &p), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn skip_paths() {
        let mut rng = rng_from(&[6]);
        let wp = ProjectionWeights::new(uniform_init(4, 6, &mut rng));
        let x: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 - 0.7).collect();
        let zero = SkipParams::zeros(6, 8, 4, 0.1);
        assert_eq!(ils_region_embed(&x, &wp, &zero).unwrap(), wp.matrix.mul_vec(&x).unwrap());
        let skip = SkipParams::init(6, 8, 4, 0.1, &mut rng);
        assert!(ils_region_embed(&[0.0; 6], &wp, &skip).unwrap().iter().all(|&v| v == 0.0));
        // recompose from the two separate paths
        let direct = wp.matrix.mul_vec(&x).unwrap();
        let hidden: Vec<f64> = skip.w1.mul_vec(&x).unwrap().into_iter().map(|v| leaky_relu(v, 0.1)).collect();
        let side = skip.w2.mul_vec(&hidden).unwrap();
        let got = ils_region_embed(&x, &wp, &skip).unwrap();
        for i in 0..4 {
            assert!((got[i] - (direct[i] + side[i])).abs() < 1e-14);
        }
    }
}
