//! SGD with momentum and weight decay, the step schedule, and the
//! central-difference gradient oracle.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Matrix>,
}

impl SgdState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && (0.0..1.0).contains(&momentum) && weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("sgd needs lr > 0, momentum in [0,1), weight_decay >= 0"));
        }
        Ok(Self { lr, momentum, weight_decay, velocity: BTreeMap::new() })
    }

    pub fn velocity(&self, name: &str) -> Option<&Matrix> {
        self.velocity.get(name)
    }

    /// `g' = g + wd·w;  v ← μ·v + g';  w ← w − lr·v`
    pub fn step(&mut self, name: &str, param: &mut Matrix, grad: &Matrix) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::DimensionMismatch { expected: param.as_slice().len(), got: grad.as_slice().len() });
        }
        let v = self.velocity.entry(String::from(name)).or_insert_with(|| Matrix::zeros(param.rows(), param.cols()));
        if v.shape() != param.shape() {
            return Err(Error::DimensionMismatch { expected: v.as_slice().len(), got: param.as_slice().len() });
        }
        for ((w, g), vel) in param.as_mut_slice().iter_mut().zip(grad.as_slice()).zip(v.as_mut_slice()) {
            let g = g + self.weight_decay * *w;
            *vel = self.momentum * *vel + g;
            *w -= self.lr * *vel;
        }
        Ok(())
    }

    /// Applies [`SgdState::step`] to every named tensor in name order.
    pub fn step_all(&mut self, mut tensors: Vec<(&str, &mut Matrix, &Matrix)>) -> Result<()> {
        tensors.sort_by(|a, b| a.0.cmp(b.0));
        for (name, param, grad) in tensors {
            self.step(name, param, grad)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub drop_factor: f64,
    pub drop_epochs: Vec<usize>,
}

impl StepSchedule {
    pub fn new(base_lr: f64, drop_factor: f64, drop_epochs: Vec<usize>) -> Result<Self> {
        if !(drop_factor > 0.0 && drop_factor < 1.0) {
            return Err(Error::InvalidConfig("drop factor must lie in (0,1)"));
        }
        if drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("drop epochs must be strictly increasing"));
        }
        Ok(Self { base_lr, drop_factor, drop_epochs })
    }

    /// One simulator "1x" schedule: 12 epochs, drops at 8 and 11.
    pub fn one_x(base_lr: f64) -> Self {
        Self { base_lr, drop_factor: 0.1, drop_epochs: alloc::vec![8, 11] }
    }
}

/// `base_lr · drop_factor^(number of drop epochs ≤ epoch)`.
pub fn lr_at(schedule: &StepSchedule, epoch: usize) -> f64 {
    let drops = schedule.drop_epochs.iter().filter(|&&e| e <= epoch).count();
    schedule.base_lr * crate::math::powi(schedule.drop_factor, drops as i32)
}

/// Central differences `(f(w+h) − f(w−h)) / 2h`, one coordinate at a time.
pub fn finite_diff_grad(mut loss: impl FnMut(&[f64]) -> f64, params: &[f64], step: f64) -> Result<Vec<f64>> {
    let mut w = params.to_vec();
    let mut out = Vec::with_capacity(w.len());
    for i in 0..w.len() {
        let orig = w[i];
        w[i] = orig + step;
        let plus = loss(&w);
        w[i] = orig - step;
        let minus = loss(&w);
        w[i] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFiniteLoss);
        }
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scalar(v: f64) -> Matrix {
        Matrix::from_vec(1, 1, vec![v]).unwrap()
    }

    #[test]
    fn sgd_fixtures() {
        let mut s = SgdState::new(0.1, 0.0, 0.0).unwrap();
        let mut w = scalar(1.0);
        s.step("w", &mut w, &scalar(1.0)).unwrap();
        assert!((w[(0, 0)] - 0.9).abs() < 1e-15);

        let mut s = SgdState::new(0.1, 0.9, 0.0).unwrap();
        let mut w = scalar(0.0);
        s.step("w", &mut w, &scalar(1.0)).unwrap();
        assert!((w[(0, 0)] + 0.1).abs() < 1e-15);
        s.step("w", &mut w, &scalar(1.0)).unwrap();
        assert!((s.velocity("w").unwrap()[(0, 0)] - 1.9).abs() < 1e-15);
        assert!((w[(0, 0)] + 0.29).abs() < 1e-15);

        let mut s = SgdState::new(0.1, 0.0, 0.1).unwrap();
        let mut w = scalar(1.0);
        s.step("w", &mut w, &scalar(0.0)).unwrap();
        assert!((w[(0, 0)] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grad_is_identity_and_shapes_checked() {
        let mut s = SgdState::new(0.5, 0.9, 0.0).unwrap();
        let mut w = Matrix::from_vec(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let before = w.clone();
        for _ in 0..3 {
            s.step("w", &mut w, &Matrix::zeros(2, 2)).unwrap();
        }
        assert_eq!(w, before);
        assert!(matches!(s.step("w", &mut w, &Matrix::zeros(1, 2)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn schedule_values() {
        let s = StepSchedule::new(0.02, 0.1, vec![8, 11]).unwrap();
        assert_eq!(lr_at(&s, 0), 0.02);
        assert!((lr_at(&s, 9) - 0.002).abs() < 1e-15);
        assert!((lr_at(&s, 12) - 0.0002).abs() < 1e-15);
        let lrs: Vec<f64> = (0..20).map(|e| lr_at(&s, e)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(StepSchedule::new(0.1, 1.5, vec![1]).is_err());
        assert!(StepSchedule::new(0.1, 0.5, vec![3, 3]).is_err());
    }

    #[test]
    fn finite_differences_exact_on_quadratics() {
        let g = finite_diff_grad(|w| w[0] * w[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        for h in [1e-2, 1e-4] {
            let g = finite_diff_grad(|w| 2.0 * w[0] - 3.0 * w[1], &[0.3, 0.4], h).unwrap();
            assert!((g[0] - 2.0).abs() < 1e-9 && (g[1] + 3.0).abs() < 1e-9);
        }
        let q = |w: &[f64]| 0.5 * w[0] * w[0] + w[0] * w[1] - 2.0 * w[1] * w[1] + w[0];
        let g = finite_diff_grad(q, &[1.5, -0.5], 1e-3).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-9 && (g[1] - 3.5).abs() < 1e-9);
        assert_eq!(finite_diff_grad(|_| f64::NAN, &[1.0], 1e-5), Err(Error::NonFiniteLoss));
    }
}
