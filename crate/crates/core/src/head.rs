//! The detector head: proposal assignment, box refinement, classification
//! against the text bank and the staged training objectives.
//!
//! Stages and what they train:
//!
//! | stage   | embedding path   | losses                              | trainable            |
//! |---------|------------------|-------------------------------------|----------------------|
//! | `base`  | `W_D`            | reg + cls                           | `w_d`, `reg`         |
//! | `rkd`   | `W_D`            | reg + cls + β1·L1 + β2·IRM          | `w_d`, `reg`         |
//! | `pis`   | `W_D`            | reg + cls + α·PMS                   | `w_d`, `reg`         |
//! | `naive` | `W_D`            | all six terms                       | `w_d`, `reg`         |
//! | `wt`    | `W_P` + skip MLP | all six terms                       | transfer, skip, `reg` |
//!
//! The proposal-network loss is identically zero: proposals come from
//! fixed generators.

use alloc::vec;
use alloc::vec::Vec;

use crate::embedbank::{class_logits, l2_normalize, l2_normalize_backward, softmax, softmax_ce, TextBank};
use crate::error::{check_dim, Error, Result};
use crate::geometry::{iou, BBox, Proposal};
use crate::ils::pms_loss;
use crate::ils::IlsWeights;
use crate::linalg::Matrix;
use crate::math;
use crate::rkd::{irm_loss, l1_loss, RkdWeights};
use crate::seeding::Rng;
use crate::weight_transfer::{
    transfer, transfer_backward, uniform_init, ProjectionWeights, SkipGrads, SkipParams, SkipTrace, TransferParams,
};

pub const ASSIGN_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Base,
    Rkd,
    Pis,
    Naive,
    Wt,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Base, Stage::Rkd, Stage::Pis, Stage::Naive, Stage::Wt];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Rkd => "rkd",
            Stage::Pis => "pis",
            Stage::Naive => "naive",
            Stage::Wt => "wt",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(t: u8) -> Option<Stage> {
        Stage::ALL.get(t as usize).copied()
    }

    pub fn uses_transfer(self) -> bool {
        self == Stage::Wt
    }

    pub fn distills(self) -> bool {
        matches!(self, Stage::Rkd | Stage::Naive | Stage::Wt)
    }

    pub fn uses_pseudo_labels(self) -> bool {
        matches!(self, Stage::Pis | Stage::Naive | Stage::Wt)
    }

    /// Stage whose checkpoint this stage initializes from.
    pub fn parent(self) -> Option<Stage> {
        match self {
            Stage::Base => None,
            Stage::Rkd | Stage::Pis => Some(Stage::Base),
            Stage::Naive | Stage::Wt => Some(Stage::Rkd),
        }
    }

    /// Names of the tensors that receive gradients, sorted.
    pub fn trainable(self) -> &'static [&'static str] {
        if self.uses_transfer() {
            &["reg", "skip.w1", "skip.w2", "transfer.theta1", "transfer.theta2"]
        } else {
            &["reg", "w_d"]
        }
    }
}

/// Per-proposal ground-truth match. `None` means background.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub matched_gt: Vec<Option<usize>>,
    pub labels: Vec<Option<usize>>,
    pub iou_at_match: Vec<f64>,
}

/// Matches each proposal to its max-IoU ground truth when that IoU reaches
/// `thresh`; IoU ties go to the lower ground-truth index.
pub fn assign(proposals: &[Proposal], gts: &[(BBox, usize)], thresh: f64) -> Assignment {
    let mut out = Assignment {
        matched_gt: Vec::with_capacity(proposals.len()),
        labels: Vec::with_capacity(proposals.len()),
        iou_at_match: Vec::with_capacity(proposals.len()),
    };
    for p in proposals {
        let mut best: Option<(usize, f64)> = None;
        for (g, (b, _)) in gts.iter().enumerate() {
            let v = iou(&p.bbox, b);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, v)) if v >= thresh => {
                out.matched_gt.push(Some(g));
                out.labels.push(Some(gts[g].1));
                out.iou_at_match.push(v);
            }
            _ => {
                out.matched_gt.push(None);
                out.labels.push(None);
                out.iou_at_match.push(best.map_or(0.0, |(_, v)| v));
            }
        }
    }
    out
}

/// Summed smooth-L1: `0.5 d²` when `|d| < 1`, else `|d| − 0.5`.
pub fn smooth_l1(pred: &[f64; 4], target: &[f64; 4]) -> (f64, [f64; 4]) {
    let mut loss = 0.0;
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let d = pred[i] - target[i];
        if math::abs(d) < 1.0 {
            loss += 0.5 * d * d;
            grad[i] = d;
        } else {
            loss += math::abs(d) - 0.5;
            grad[i] = if d > 0.0 { 1.0 } else { -1.0 };
        }
    }
    (loss, grad)
}

fn side(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        1.0
    }
}

/// Corner-delta regression target of `proposal` towards `gt`.
pub fn box_deltas(proposal: &BBox, gt: &BBox) -> [f64; 4] {
    let (w, h) = (side(proposal.width()), side(proposal.height()));
    [(gt.x1 - proposal.x1) / w, (gt.y1 - proposal.y1) / h, (gt.x2 - proposal.x2) / w, (gt.y2 - proposal.y2) / h]
}

pub fn apply_deltas(proposal: &BBox, d: &[f64], bounds: &BBox) -> BBox {
    let (w, h) = (side(proposal.width()), side(proposal.height()));
    BBox::new(proposal.x1 + d[0] * w, proposal.y1 + d[1] * h, proposal.x2 + d[2] * w, proposal.y2 + d[3] * h)
        .clip_to(bounds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w_d: ProjectionWeights,
    /// `4 × F` corner-delta regressor.
    pub reg: Matrix,
    pub transfer: TransferParams,
    pub skip: SkipParams,
    pub stage: Stage,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadDims {
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub transfer_hidden: usize,
    pub skip_hidden: usize,
    pub slope: f64,
    /// Start the skip perceptron with a zero output layer.
    pub zero_skip_output: bool,
    pub tied_transfer_init: bool,
}

impl HeadParams {
    /// Fresh base-stage parameters; regression starts at zero.
    pub fn init(dims: HeadDims, rng: &mut Rng) -> Self {
        let w_d = ProjectionWeights::new(uniform_init(dims.embed_dim, dims.feature_dim, rng));
        let transfer = if dims.tied_transfer_init {
            TransferParams::init_tied(dims.embed_dim, dims.transfer_hidden, dims.slope, rng)
        } else {
            TransferParams::init(dims.embed_dim, dims.transfer_hidden, dims.slope, rng)
        };
        let mut skip = SkipParams::init(dims.feature_dim, dims.skip_hidden, dims.embed_dim, dims.slope, rng);
        if dims.zero_skip_output {
            skip.w2 = Matrix::zeros(dims.embed_dim, dims.skip_hidden);
        }
        Self { w_d, reg: Matrix::zeros(4, dims.feature_dim), transfer, skip, stage: Stage::Base }
    }

    pub fn dims(&self) -> HeadDims {
        HeadDims {
            embed_dim: self.w_d.embed_dim(),
            feature_dim: self.w_d.feature_dim(),
            transfer_hidden: self.transfer.w_theta1.rows(),
            skip_hidden: self.skip.w1.rows(),
            slope: self.transfer.slope,
            zero_skip_output: false,
            tied_transfer_init: false,
        }
    }

    /// Named tensors in sorted name order.
    pub fn tensors(&self) -> [(&'static str, &Matrix); 6] {
        [
            ("reg", &self.reg),
            ("skip.w1", &self.skip.w1),
            ("skip.w2", &self.skip.w2),
            ("transfer.theta1", &self.transfer.w_theta1),
            ("transfer.theta2", &self.transfer.w_theta2),
            ("w_d", &self.w_d.matrix),
        ]
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        Some(match name {
            "reg" => &mut self.reg,
            "skip.w1" => &mut self.skip.w1,
            "skip.w2" => &mut self.skip.w2,
            "transfer.theta1" => &mut self.transfer.w_theta1,
            "transfer.theta2" => &mut self.transfer.w_theta2,
            "w_d" => &mut self.w_d.matrix,
            _ => return None,
        })
    }

    pub fn trainable_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (name, m) in self.tensors() {
            if self.stage.trainable().contains(&name) {
                out.extend_from_slice(m.as_slice());
            }
        }
        out
    }

    pub fn set_trainable_flat(&mut self, flat: &[f64]) -> Result<()> {
        let mut offset = 0;
        for &name in self.stage.trainable() {
            let m = self.tensor_mut(name).expect("known tensor");
            let n = m.as_slice().len();
            if offset + n > flat.len() {
                return Err(Error::DimensionMismatch { expected: offset + n, got: flat.len() });
            }
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        check_dim(offset, flat.len())
    }

    /// Moves to `stage`, freezing `W_D` once distillation is over.
    pub fn enter_stage(&mut self, stage: Stage) {
        self.stage = stage;
        self.w_d.frozen = stage.uses_transfer();
    }

    pub fn embedder(&self) -> Result<Embedder<'_>> {
        if self.stage.uses_transfer() {
            let wp = transfer(&self.w_d, &self.transfer)?;
            Ok(Embedder { projection: wp.matrix, skip: Some(&self.skip) })
        } else {
            Ok(Embedder { projection: self.w_d.matrix.clone(), skip: None })
        }
    }
}

/// Prepared region-embedding path for one parameter snapshot.
#[derive(Debug, Clone)]
pub struct Embedder<'a> {
    pub projection: Matrix,
    pub skip: Option<&'a SkipParams>,
}

struct EmbedTrace {
    unit: Vec<f64>,
    norm: f64,
    skip: Option<SkipTrace>,
}

impl Embedder<'_> {
    /// Raw (unnormalized) region embedding.
    pub fn embed(&self, feature: &[f64]) -> Result<Vec<f64>> {
        Ok(self.embed_traced(feature)?.0)
    }

    fn embed_traced(&self, feature: &[f64]) -> Result<(Vec<f64>, Option<SkipTrace>)> {
        let mut e = self.projection.mul_vec(feature)?;
        let trace = match self.skip {
            Some(skip) => {
                let (s, t) = skip.forward(feature)?;
                for (a, b) in e.iter_mut().zip(s) {
                    *a += b;
                }
                Some(t)
            }
            None => None,
        };
        Ok((e, trace))
    }

    fn forward_unit(&self, feature: &[f64]) -> Result<(Vec<f64>, EmbedTrace)> {
        let (raw, skip) = self.embed_traced(feature)?;
        let norm = math::norm(&raw);
        let unit = l2_normalize(&raw)?;
        Ok((raw, EmbedTrace { unit, norm, skip }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Classifies and refines every proposal of a scene against the full bank
/// (classes plus background). Background-argmax proposals are dropped.
pub fn forward_detect(
    features: &[Vec<f64>],
    proposals: &[Proposal],
    bounds: &BBox,
    params: &HeadParams,
    bank: &TextBank,
    tau: f64,
) -> Result<Vec<Detection>> {
    check_dim(proposals.len(), features.len())?;
    let embedder = params.embedder()?;
    check_dim(bank.dim(), embedder.projection.rows())?;
    let bg = bank.background_index();
    let mut out = Vec::new();
    for (f, p) in features.iter().zip(proposals) {
        let e = embedder.embed(f)?;
        let probs = softmax(&class_logits(&e, bank, tau)?);
        let best = crate::embedbank::argmax(&probs);
        if Some(best) == bg {
            continue;
        }
        let deltas = params.reg.mul_vec(f)?;
        out.push(Detection { bbox: apply_deltas(&p.bbox, &deltas, bounds), class_id: best, score: probs[best] });
    }
    Ok(out)
}

/// Greedy per-class suppression: keeps a detection unless a higher-scored
/// kept detection of the same class overlaps it at `thresh` IoU or more.
pub fn class_nms(mut dets: Vec<Detection>, thresh: f64) -> Vec<Detection> {
    // stable: equal scores keep proposal order
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if kept.iter().all(|k| k.class_id != d.class_id || iou(&k.bbox, &d.bbox) < thresh) {
            kept.push(d);
        }
    }
    kept
}

/// Precomputed training inputs for one detection image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetSample {
    /// `P × F` proposal features.
    pub feats: Matrix,
    /// Index into the detection bank, `None` for background.
    pub labels: Vec<Option<usize>>,
    pub reg_targets: Vec<Option<[f64; 4]>>,
    /// `K × F` features of the class-agnostic top-K distillation boxes.
    pub distill_feats: Matrix,
    /// `K × D` frozen teacher embeddings of the same boxes.
    pub teacher: Matrix,
}

/// Precomputed pseudo-box inputs for one classification image.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsSample {
    /// `N × F`, one pseudo box per image-level label.
    pub feats: Matrix,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Batch<'a> {
    pub det: Vec<&'a DetSample>,
    pub cls: Vec<&'a ClsSample>,
}

/// Banks used in training: base classes plus background for detection
/// images, every class (no background) for pseudo-labeled images.
#[derive(Debug, Clone, PartialEq)]
pub struct Banks {
    pub det: TextBank,
    pub ils: TextBank,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LossConfig {
    pub tau: f64,
    pub tau_b: f64,
    pub rkd: RkdWeights,
    pub ils: IlsWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: 20.0, tau_b: 50.0, rkd: RkdWeights::default(), ils: IlsWeights::default() }
    }
}

/// Unweighted loss components, each averaged over its images.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub rpn: f64,
    pub reg: f64,
    pub cls: f64,
    pub l1: f64,
    pub irm: f64,
    pub pms: f64,
}

impl LossTerms {
    pub fn total(&self, cfg: &LossConfig) -> f64 {
        self.rpn + self.reg + self.cls + cfg.rkd.beta1 * self.l1 + cfg.rkd.beta2 * self.irm + cfg.ils.alpha * self.pms
    }
}

/// Gradients for every tensor; tensors a stage does not train stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub w_d: Matrix,
    pub reg: Matrix,
    pub w_theta1: Matrix,
    pub w_theta2: Matrix,
    pub skip: SkipGrads,
}

impl HeadGrads {
    pub fn zeros_like(p: &HeadParams) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            w_d: z(&p.w_d.matrix),
            reg: z(&p.reg),
            w_theta1: z(&p.transfer.w_theta1),
            w_theta2: z(&p.transfer.w_theta2),
            skip: p.skip.zero_grads(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        Some(match name {
            "reg" => &self.reg,
            "skip.w1" => &self.skip.w1,
            "skip.w2" => &self.skip.w2,
            "transfer.theta1" => &self.w_theta1,
            "transfer.theta2" => &self.w_theta2,
            "w_d" => &self.w_d,
            _ => return None,
        })
    }

    pub fn trainable_flat(&self, stage: Stage) -> Vec<f64> {
        let mut out = Vec::new();
        for &name in stage.trainable() {
            out.extend_from_slice(self.get(name).expect("known tensor").as_slice());
        }
        out
    }
}

struct Accum<'p> {
    params: &'p HeadParams,
    embedder: Embedder<'p>,
    grads: HeadGrads,
    /// `dL/dW_P` on the transferred path, `dL/dW_D` otherwise.
    d_projection: Matrix,
}

impl<'p> Accum<'p> {
    fn backprop_unit(&mut self, feature: &[f64], trace: &EmbedTrace, g_unit: &[f64]) -> Result<()> {
        let g_raw = l2_normalize_backward(&trace.unit, trace.norm, g_unit);
        self.backprop_raw(feature, trace.skip.as_ref(), &g_raw)
    }

    fn backprop_raw(&mut self, feature: &[f64], skip: Option<&SkipTrace>, g_raw: &[f64]) -> Result<()> {
        self.d_projection.add_outer(1.0, g_raw, feature)?;
        if let (Some(skip_params), Some(t)) = (self.embedder.skip, skip) {
            skip_params.accumulate_backward(feature, t, g_raw, &mut self.grads.skip)?;
        }
        Ok(())
    }
}

/// Stage objective and exact gradients for one batch.
///
/// Detection-image terms are averaged over the batch's detection images
/// and the pseudo-max score over its classification images.
pub fn stage_loss(
    batch: &Batch<'_>,
    params: &HeadParams,
    banks: &Banks,
    cfg: &LossConfig,
) -> Result<(LossTerms, HeadGrads)> {
    let stage = params.stage;
    if !stage.uses_pseudo_labels() && !batch.cls.is_empty() {
        return Err(Error::StageMismatch { stage: stage.name(), what: "classification images" });
    }
    let embedder = params.embedder()?;
    check_dim(banks.det.dim(), embedder.projection.rows())?;
    let d_projection = Matrix::zeros(embedder.projection.rows(), embedder.projection.cols());
    let mut acc = Accum { params, embedder, grads: HeadGrads::zeros_like(params), d_projection };
    let mut terms = LossTerms::default();

    let n_det = batch.det.len().max(1) as f64;
    for sample in &batch.det {
        det_image_loss(sample, &banks.det, cfg, stage, 1.0 / n_det, &mut acc, &mut terms)?;
    }

    if stage.uses_pseudo_labels() && !batch.cls.is_empty() {
        let n_cls = batch.cls.len() as f64;
        for sample in &batch.cls {
            let mut raws = Vec::with_capacity(sample.labels.len());
            let mut traces = Vec::with_capacity(sample.labels.len());
            for f in sample.feats.iter_rows() {
                let (raw, t) = acc.embedder.embed_traced(f)?;
                raws.push(raw);
                traces.push(t);
            }
            let embs = Matrix::from_rows(&raws)?;
            let (pms, g) = pms_loss(&embs, &banks.ils, &sample.labels, cfg.tau_b)?;
            terms.pms += pms / n_cls;
            let scale = cfg.ils.alpha / n_cls;
            for (i, f) in sample.feats.iter_rows().enumerate() {
                let g_raw: Vec<f64> = g.row(i).iter().map(|v| v * scale).collect();
                acc.backprop_raw(f, traces[i].as_ref(), &g_raw)?;
            }
        }
    }

    let Accum { mut grads, d_projection, .. } = acc;
    if stage.uses_transfer() {
        let tg = transfer_backward(&params.w_d, &params.transfer, &d_projection)?;
        grads.w_theta1 = tg.w_theta1;
        grads.w_theta2 = tg.w_theta2;
    } else {
        grads.w_d = d_projection;
        grads.skip = params.skip.zero_grads();
    }
    Ok((terms, grads))
}

fn det_image_loss(
    sample: &DetSample,
    bank: &TextBank,
    cfg: &LossConfig,
    stage: Stage,
    image_weight: f64,
    acc: &mut Accum<'_>,
    terms: &mut LossTerms,
) -> Result<()> {
    let p = sample.feats.rows();
    check_dim(p, sample.labels.len())?;
    check_dim(p, sample.reg_targets.len())?;
    let bg = bank.background_index().ok_or(Error::InvalidConfig("detection bank needs a background row"))?;
    let cls_w = image_weight / p.max(1) as f64;
    let n_fg = sample.reg_targets.iter().filter(|t| t.is_some()).count();
    let reg_w = if n_fg > 0 { image_weight / n_fg as f64 } else { 0.0 };

    for (i, f) in sample.feats.iter_rows().enumerate() {
        let (raw, trace) = acc.embedder.forward_unit(f)?;
        let logits = class_logits(&raw, bank, cfg.tau)?;
        let target = match sample.labels[i] {
            Some(c) if c < bank.num_classes() => c,
            Some(c) => return Err(Error::IndexOutOfRange { index: c, len: bank.num_classes() }),
            None => bg,
        };
        let (ce, g_logits) = softmax_ce(&logits, target)?;
        terms.cls += ce * cls_w;
        let mut g_unit = vec![0.0; raw.len()];
        for (b, gl) in g_logits.iter().take(bank.num_classes()).enumerate() {
            let s = gl * cfg.tau * cls_w;
            for (g, t) in g_unit.iter_mut().zip(bank.row(b)) {
                *g += s * t;
            }
        }
        acc.backprop_unit(f, &trace, &g_unit)?;

        if let Some(target) = sample.reg_targets[i] {
            let d = acc.params.reg.mul_vec(f)?;
            let pred = [d[0], d[1], d[2], d[3]];
            let (l, g) = smooth_l1(&pred, &target);
            terms.reg += l * reg_w;
            acc.grads.reg.add_outer(reg_w, &g, f)?;
        }
    }

    if stage.distills() && sample.distill_feats.rows() > 0 {
        let k = sample.distill_feats.rows();
        check_dim(k, sample.teacher.rows())?;
        // the transferred stage distills the frozen W_D, so these terms
        // are reported but carry no gradient
        let frozen = acc.params.w_d.frozen;
        let direct = Embedder { projection: acc.params.w_d.matrix.clone(), skip: None };
        let embedder = if frozen { &direct } else { &acc.embedder };
        let mut units = Vec::with_capacity(k);
        let mut traces = Vec::with_capacity(k);
        for f in sample.distill_feats.iter_rows() {
            let (_, t) = embedder.forward_unit(f)?;
            units.push(t.unit.clone());
            traces.push(t);
        }
        let student = Matrix::from_rows(&units)?;
        let mut teacher = sample.teacher.clone();
        for r in 0..k {
            let unit = l2_normalize(teacher.row(r))?;
            teacher.row_mut(r).copy_from_slice(&unit);
        }
        let (l1, g1) = l1_loss(&student, &teacher)?;
        let (irm, g2) = irm_loss(&student, &teacher)?;
        terms.l1 += l1 * image_weight;
        terms.irm += irm * image_weight;
        if !frozen {
            for (r, f) in sample.distill_feats.iter_rows().enumerate() {
                let g_unit: Vec<f64> = g1
                    .row(r)
                    .iter()
                    .zip(g2.row(r))
                    .map(|(a, b)| image_weight * (cfg.rkd.beta1 * a + cfg.rkd.beta2 * b))
                    .collect();
                acc.backprop_unit(f, &traces[r], &g_unit)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;

    fn bx(a: [f64; 4]) -> BBox {
        BBox::from_array(a)
    }

    #[test]
    fn smooth_l1_fixtures() {
        let z = [0.0; 4];
        assert_eq!(smooth_l1(&[0.3, -0.2, 1.0, 4.0], &[0.3, -0.2, 1.0, 4.0]).0, 0.0);
        assert_eq!(smooth_l1(&[2.0, 0.0, 0.0, 0.0], &z).0, 1.5);
        assert_eq!(smooth_l1(&[0.5, 0.0, 0.0, 0.0], &z).0, 0.125);
    }

    #[test]
    fn assign_fixtures() {
        let gts = [(bx([0.0, 0.0, 10.0, 10.0]), 3), (bx([20.0, 20.0, 30.0, 30.0]), 1)];
        let props = [
            Proposal::new(bx([0.0, 0.0, 10.0, 10.0]), 0.9),
            // IoU with first gt = 30/(100+60-30)... height 6 strip
            Proposal::new(bx([0.0, 7.0, 10.0, 13.0]), 0.4),
            Proposal::new(bx([50.0, 50.0, 60.0, 60.0]), 0.4),
        ];
        let a = assign(&props, &gts, 0.5);
        assert_eq!(a.labels, vec![Some(3), None, None]);
        assert_eq!(a.matched_gt[0], Some(0));
        assert!(a.iou_at_match[1] < 0.5);
        let empty = assign(&props, &[], 0.5);
        assert!(empty.labels.iter().all(Option::is_none));
        // tie on IoU goes to the lower gt index
        let twins = [(bx([0.0, 0.0, 10.0, 10.0]), 5), (bx([0.0, 0.0, 10.0, 10.0]), 6)];
        assert_eq!(assign(&props[..1], &twins, 0.5).labels, vec![Some(5)]);
    }

    #[test]
    fn stage_table() {
        assert_eq!(Stage::Wt.parent(), Some(Stage::Rkd));
        assert_eq!(Stage::Rkd.parent(), Some(Stage::Base));
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.name()), Some(s));
            assert_eq!(Stage::from_tag(s.tag()), Some(s));
            let mut sorted = s.trainable().to_vec();
            sorted.sort_unstable();
            assert_eq!(sorted, s.trainable());
        }
    }

    fn tiny_params(stage: Stage, seed: u64) -> HeadParams {
        let dims = HeadDims {
            embed_dim: 4,
            feature_dim: 6,
            transfer_hidden: 5,
            skip_hidden: 7,
            slope: 0.1,
            zero_skip_output: false,
            tied_transfer_init: false,
        };
        let mut p = HeadParams::init(dims, &mut rng_from(&[seed]));
        p.enter_stage(stage);
        p
    }

    fn tiny_banks(seed: u64) -> Banks {
        let mut rng = rng_from(&[seed, 9]);
        let all = TextBank::new(uniform_init(3, 4, &mut rng), false).unwrap();
        Banks { det: all.subset(&[0, 1], true).unwrap(), ils: all }
    }

    #[test]
    fn all_background_base_loss_is_mean_ce() {
        let p = tiny_params(Stage::Base, 1);
        let banks = tiny_banks(1);
        let mut rng = rng_from(&[2]);
        let feats = uniform_init(3, 6, &mut rng);
        let sample = DetSample {
            feats: feats.clone(),
            labels: vec![None; 3],
            reg_targets: vec![None; 3],
            distill_feats: Matrix::zeros(0, 6),
            teacher: Matrix::zeros(0, 4),
        };
        let batch = Batch { det: vec![&sample], cls: vec![] };
        let cfg = LossConfig::default();
        let (terms, grads) = stage_loss(&batch, &p, &banks, &cfg).unwrap();
        let mut want = 0.0;
        for f in feats.iter_rows() {
            let e = p.w_d.matrix.mul_vec(f).unwrap();
            let l = class_logits(&e, &banks.det, cfg.tau).unwrap();
            want += softmax_ce(&l, 2).unwrap().0 / 3.0;
        }
        assert!((terms.cls - want).abs() < 1e-12);
        assert_eq!(terms.reg, 0.0);
        assert_eq!(grads.reg.max_abs(), 0.0);
        assert_eq!(grads.w_theta1.max_abs(), 0.0);
    }

    #[test]
    fn transferred_stage_leaves_w_d_without_gradient() {
        let p = tiny_params(Stage::Wt, 6);
        let mut rng = rng_from(&[7]);
        let sample = DetSample {
            feats: uniform_init(3, 6, &mut rng),
            labels: vec![Some(0), None, Some(1)],
            reg_targets: vec![None; 3],
            distill_feats: uniform_init(2, 6, &mut rng),
            teacher: uniform_init(2, 4, &mut rng),
        };
        let cls = ClsSample { feats: uniform_init(2, 6, &mut rng), labels: vec![2, 0] };
        let batch = Batch { det: vec![&sample], cls: vec![&cls] };
        let (terms, grads) = stage_loss(&batch, &p, &tiny_banks(6), &LossConfig::default()).unwrap();
        assert!(terms.l1 > 0.0);
        assert_eq!(grads.w_d.max_abs(), 0.0);
        assert!(grads.w_theta1.max_abs() > 0.0);
        assert!(grads.skip.w1.max_abs() > 0.0);
    }

    #[test]
    fn classification_images_rejected_outside_ils_stages() {
        let p = tiny_params(Stage::Rkd, 1);
        let cls = ClsSample { feats: Matrix::zeros(1, 6), labels: vec![0] };
        let batch = Batch { det: vec![], cls: vec![&cls] };
        let err = stage_loss(&batch, &p, &tiny_banks(1), &LossConfig::default()).unwrap_err();
        assert!(matches!(err, Error::StageMismatch { .. }));
    }

    #[test]
    fn zero_regressor_keeps_boxes() {
        let p = tiny_params(Stage::Base, 3);
        let mut bank_rows = uniform_init(3, 4, &mut rng_from(&[4]));
        bank_rows.scale(3.0);
        let bank = TextBank::new(bank_rows, true).unwrap();
        let bounds = bx([0.0, 0.0, 100.0, 100.0]);
        let mut rng = rng_from(&[5]);
        let feats: Vec<Vec<f64>> = (0..20).map(|_| uniform_init(1, 6, &mut rng).into_vec()).collect();
        let props: Vec<Proposal> =
            (0..20).map(|i| Proposal::new(bx([i as f64, 0.0, i as f64 + 10.0, 10.0]), 0.5)).collect();
        let dets = forward_detect(&feats, &props, &bounds, &p, &bank, 5.0).unwrap();
        for d in &dets {
            assert!(props.iter().any(|q| q.bbox == d.bbox));
            assert!(d.score > 0.0 && d.score < 1.0);
            assert!(d.class_id < 3);
        }
    }

    #[test]
    fn nms_keeps_best_per_class() {
        let d = |x: f64, c: usize, s: f64| Detection { bbox: bx([x, 0.0, x + 10.0, 10.0]), class_id: c, score: s };
        let kept = class_nms(vec![d(0.0, 1, 0.5), d(1.0, 1, 0.9), d(1.0, 2, 0.3), d(40.0, 1, 0.2)], 0.5);
        assert_eq!(kept.len(), 3);
        assert_eq!(kept[0].score, 0.9);
    }
}
