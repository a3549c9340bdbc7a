//! Image-level supervision through pseudo-box labels.
//!
//! Class-agnostic top-K selection feeds distillation; class-specific top-1
//! selection turns each image-level label into one pseudo box, which is
//! then trained with the pseudo-max-score loss.

use alloc::vec::Vec;

use crate::embedbank::{l2_normalize, l2_normalize_backward, TextBank};
use crate::error::{check_dim, Error, Result};
use crate::geometry::Proposal;
use crate::linalg::Matrix;
use crate::math;

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoBoxLabel {
    pub class_id: usize,
    pub proposal: Proposal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct IlsWeights {
    pub alpha: f64,
}

impl Default for IlsWeights {
    fn default() -> Self {
        Self { alpha: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchKind {
    Detection,
    Classification,
}

/// Detection-image loss components. `rpn` is kept for the objective's
/// shape; proposal generation is fixed, so callers pass 0.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DetLosses {
    pub rpn: f64,
    pub reg: f64,
    pub cls: f64,
}

/// Indices of the `min(k, n)` highest-scoring proposals, descending,
/// ties broken by lower original index.
pub fn class_agnostic_topk_indices(proposals: &[Proposal], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..proposals.len()).collect();
    // stable sort keeps the lower index first among equal scores
    idx.sort_by(|&a, &b| proposals[b].score.total_cmp(&proposals[a].score));
    idx.truncate(k);
    idx
}

pub fn select_class_agnostic_topk(proposals: &[Proposal], k: usize) -> Vec<Proposal> {
    class_agnostic_topk_indices(proposals, k).into_iter().map(|i| proposals[i]).collect()
}

/// Index of the maximum-score candidate; ties go to the lowest index.
pub fn class_specific_top1_index(candidates: &[Proposal]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        if c.score > candidates[best].score {
            best = i;
        }
    }
    Ok(best)
}

pub fn select_class_specific_top1(candidates: &[Proposal]) -> Result<Proposal> {
    class_specific_top1_index(candidates).map(|i| candidates[i])
}

/// Pseudo-max-score loss.
///
/// For each of the `N` pseudo-labeled region embeddings the cosine row
/// against every class of `bank` is scaled by `tau_b`, passed through a
/// sigmoid and scored with binary cross-entropy against the one-hot
/// label. The per-region BCE is summed over classes; the result is the
/// mean over regions. Background never participates.
pub fn pms_loss(region_embs: &Matrix, bank: &TextBank, labels: &[usize], tau_b: f64) -> Result<(f64, Matrix)> {
    check_dim(bank.dim(), region_embs.cols())?;
    check_dim(region_embs.rows(), labels.len())?;
    let n = region_embs.rows();
    if n == 0 {
        return Err(Error::InvalidConfig("pms_loss needs at least one region"));
    }
    let c = bank.num_classes();
    let mut grad = Matrix::zeros(n, region_embs.cols());
    let mut loss = 0.0;
    let scale = 1.0 / n as f64;
    for (r, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::IndexOutOfRange { index: label, len: c });
        }
        let e = region_embs.row(r);
        let unit = l2_normalize(e)?;
        let norm = math::norm(e);
        let mut g_unit = alloc::vec![0.0; e.len()];
        for class in 0..c {
            let t = bank.row(class);
            let z = tau_b * math::dot(&unit, t);
            let y = if class == label { 1.0 } else { 0.0 };
            // BCE with logits, softplus(z) − y·z, without cancellation
            loss += if class == label { math::softplus(-z) } else { math::softplus(z) };
            let dz = (math::sigmoid(z) - y) * scale * tau_b;
            for (g, tv) in g_unit.iter_mut().zip(t) {
                *g += dz * tv;
            }
        }
        grad.row_mut(r).copy_from_slice(&l2_normalize_backward(&unit, norm, &g_unit));
    }
    Ok((loss * scale, grad))
}

/// Piecewise image-level objective: detection images train the detector
/// losses, classification images only the weighted pseudo-max score.
pub fn ils_objective(kind: BatchKind, det: DetLosses, pms: f64, weights: IlsWeights) -> f64 {
    match kind {
        BatchKind::Detection => det.rpn + det.reg + det.cls,
        BatchKind::Classification => weights.alpha * pms,
    }
}
