//! Staged training and evaluation over a generated world.
//!
//! Proposal features, assignments, teacher embeddings and pseudo boxes
//! depend only on the frozen world, so they are computed once per run and
//! reused every epoch.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::RngCore as _;

use crate::embedbank::TextBank;
use crate::error::{Error, Result};
use crate::evalkit::{ap50, top1_region_acc, EvalReport};
use crate::geometry::Proposal;
use crate::head::{
    assign, box_deltas, class_nms, forward_detect, stage_loss, Banks, Batch, ClsSample, DetSample, Detection, HeadDims,
    HeadParams, LossConfig, LossTerms, Stage, ASSIGN_IOU,
};
use crate::ils::{class_agnostic_topk_indices, class_specific_top1_index, PseudoBoxLabel};
use crate::linalg::Matrix;
use crate::optim::{lr_at, SgdState, StepSchedule};
use crate::seeding::{rng_from, salt, Rng};
use crate::simworld::{propose, query_class_specific, student_features, teacher_embed, ProposalSource, Scene, World};
use crate::weight_transfer::{DEFAULT_HIDDEN, DEFAULT_SKIP_HIDDEN, DEFAULT_SLOPE};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub drop_factor: f64,
    pub drop_epochs: Vec<usize>,
    pub det_per_batch: usize,
    /// Classification images per detection image in ILS stages.
    pub cls_per_det: usize,
    pub top_k: usize,
    pub loss: LossConfig,
    /// Detector proposals for the classification and regression losses.
    pub train_proposals: ProposalSource,
    /// Class-agnostic proposals for distillation.
    pub distill_proposals: ProposalSource,
    /// Class-specific query proposals for pseudo boxes.
    pub pseudo_proposals: ProposalSource,
    pub eval_proposals: ProposalSource,
    pub nms_iou: f64,
    pub transfer_hidden: usize,
    pub skip_hidden: usize,
    pub slope: f64,
    pub zero_skip_output: bool,
    pub tied_transfer_init: bool,
    #[cfg_attr(feature = "serde", serde(skip))]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            base_lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            drop_factor: 0.1,
            drop_epochs: alloc::vec![8, 11],
            det_per_batch: 4,
            cls_per_det: 4,
            top_k: 5,
            loss: LossConfig::default(),
            train_proposals: ProposalSource::RpnLike,
            distill_proposals: ProposalSource::MvitLike,
            pseudo_proposals: ProposalSource::MvitLike,
            eval_proposals: ProposalSource::RpnLike,
            nms_iou: 0.5,
            transfer_hidden: DEFAULT_HIDDEN,
            skip_hidden: DEFAULT_SKIP_HIDDEN,
            slope: DEFAULT_SLOPE,
            zero_skip_output: true,
            tied_transfer_init: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Result<StepSchedule> {
        StepSchedule::new(self.base_lr, self.drop_factor, self.drop_epochs.clone())
    }

    pub fn head_dims(&self, world: &World) -> HeadDims {
        HeadDims {
            embed_dim: world.config.embed_dim,
            feature_dim: world.config.feature_dim,
            transfer_hidden: self.transfer_hidden,
            skip_hidden: self.skip_hidden,
            slope: self.slope,
            zero_skip_output: self.zero_skip_output,
            tied_transfer_init: self.tied_transfer_init,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.det_per_batch == 0 || self.cls_per_det == 0 || self.top_k == 0 {
            return Err(Error::InvalidConfig("batch sizes, ratio and top_k must be positive"));
        }
        if !(self.loss.tau > 0.0 && self.loss.tau_b > 0.0) {
            return Err(Error::InvalidConfig("temperatures must be positive"));
        }
        self.loss.rkd.validate()?;
        self.schedule().map(|_| ())
    }
}

/// Fresh parameters for a run, deterministic in the run seed.
pub fn init_params(world: &World, cfg: &TrainConfig) -> HeadParams {
    HeadParams::init(cfg.head_dims(world), &mut rng_from(&[cfg.seed, salt::INIT]))
}

/// Training and evaluation banks derived from the full text bank.
pub fn banks(world: &World, full: &TextBank) -> Result<Banks> {
    Ok(Banks { det: full.subset(&world.config.base_classes(), true)?, ils: full.with_background(false) })
}

/// One teacher-cache record: a distillation box and its teacher embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherEntry {
    pub proposal: Proposal,
    pub embedding: Vec<f64>,
}

/// Class-agnostic top-K boxes of a scene with their teacher embeddings.
pub fn distill_targets(world: &World, scene: &Scene, source: ProposalSource, k: usize) -> Vec<TeacherEntry> {
    let props = propose(world, scene, source);
    class_agnostic_topk_indices(&props, k)
        .into_iter()
        .map(|i| TeacherEntry { proposal: props[i], embedding: teacher_embed(world, scene, &props[i].bbox) })
        .collect()
}

/// One pseudo box per image-level label.
pub fn pseudo_label_scene(
    world: &World,
    bank: &TextBank,
    scene: &Scene,
    source: ProposalSource,
) -> Result<Vec<PseudoBoxLabel>> {
    scene
        .image_labels
        .iter()
        .map(|&class_id| {
            let cands = query_class_specific(world, bank, scene, class_id, source)?;
            let best = class_specific_top1_index(&cands)?;
            Ok(PseudoBoxLabel { class_id, proposal: cands[best] })
        })
        .collect()
}

pub fn build_det_sample(
    world: &World,
    scene: &Scene,
    teacher: &[TeacherEntry],
    source: ProposalSource,
) -> Result<DetSample> {
    let props = propose(world, scene, source);
    let a = assign(&props, &scene.annotations, ASSIGN_IOU);
    let feats: Vec<Vec<f64>> = props.iter().map(|p| student_features(world, scene, &p.bbox)).collect();
    let reg_targets =
        props.iter().zip(&a.matched_gt).map(|(p, m)| m.map(|g| box_deltas(&p.bbox, &scene.annotations[g].0))).collect();
    let fdim = world.config.feature_dim;
    let edim = world.config.embed_dim;
    let distill_feats: Vec<Vec<f64>> =
        teacher.iter().map(|t| student_features(world, scene, &t.proposal.bbox)).collect();
    let teacher_rows: Vec<Vec<f64>> = teacher.iter().map(|t| t.embedding.clone()).collect();
    Ok(DetSample {
        feats: if feats.is_empty() { Matrix::zeros(0, fdim) } else { Matrix::from_rows(&feats)? },
        labels: a.labels,
        reg_targets,
        distill_feats: if teacher.is_empty() { Matrix::zeros(0, fdim) } else { Matrix::from_rows(&distill_feats)? },
        teacher: if teacher.is_empty() { Matrix::zeros(0, edim) } else { Matrix::from_rows(&teacher_rows)? },
    })
}

pub fn build_cls_sample(world: &World, scene: &Scene, labels: &[PseudoBoxLabel]) -> Result<ClsSample> {
    let feats: Vec<Vec<f64>> = labels.iter().map(|l| student_features(world, scene, &l.proposal.bbox)).collect();
    Ok(ClsSample {
        feats: if feats.is_empty() { Matrix::zeros(0, world.config.feature_dim) } else { Matrix::from_rows(&feats)? },
        labels: labels.iter().map(|l| l.class_id).collect(),
    })
}

/// Precomputed per-image training inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub det: Vec<DetSample>,
    pub cls: Vec<ClsSample>,
}

impl TrainingData {
    /// Builds samples from externally supplied teacher caches and pseudo
    /// labels (one list per scene, same order as the datasets).
    pub fn from_parts(
        world: &World,
        det_scenes: &[Scene],
        teacher: &[Vec<TeacherEntry>],
        cls_scenes: &[Scene],
        pseudo: &[Vec<PseudoBoxLabel>],
        cfg: &TrainConfig,
    ) -> Result<Self> {
        if teacher.len() != det_scenes.len() || pseudo.len() != cls_scenes.len() {
            return Err(Error::DimensionMismatch { expected: det_scenes.len(), got: teacher.len() });
        }
        let det = det_scenes
            .iter()
            .zip(teacher)
            .map(|(s, t)| build_det_sample(world, s, t, cfg.train_proposals))
            .collect::<Result<Vec<_>>>()?;
        let cls = cls_scenes
            .iter()
            .zip(pseudo)
            .filter(|(_, p)| !p.is_empty())
            .map(|(s, p)| build_cls_sample(world, s, p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { det, cls })
    }

    /// Computes teacher targets and pseudo labels from the world directly.
    pub fn build(
        world: &World,
        bank: &TextBank,
        det_scenes: &[Scene],
        cls_scenes: &[Scene],
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let teacher: Vec<Vec<TeacherEntry>> =
            det_scenes.iter().map(|s| distill_targets(world, s, cfg.distill_proposals, cfg.top_k)).collect();
        let pseudo = cls_scenes
            .iter()
            .map(|s| pseudo_label_scene(world, bank, s, cfg.pseudo_proposals))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(world, det_scenes, &teacher, cls_scenes, &pseudo, cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub terms: LossTerms,
    pub total: f64,
}

/// Exact position of the sampling stream, recorded in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: HeadParams,
    pub log: Vec<EpochLog>,
    pub rng: RngState,
}

/// Trains `params` for `cfg.epochs` under `stage`.
///
/// Detection images are visited in a seeded shuffled order,
/// `det_per_batch` per step; stages with pseudo labels add
/// `cls_per_det` classification images per detection image, drawn
/// cyclically from their own shuffled order.
pub fn train_stage(
    params: HeadParams,
    stage: Stage,
    data: &TrainingData,
    banks: &Banks,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_stage_with(params, stage, data, banks, cfg, &mut |_| {})
}

/// [`train_stage`] with a hook called after every epoch.
pub fn train_stage_with(
    mut params: HeadParams,
    stage: Stage,
    data: &TrainingData,
    banks: &Banks,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    params.enter_stage(stage);
    let schedule = cfg.schedule()?;
    let mut sgd = SgdState::new(cfg.base_lr, cfg.momentum, cfg.weight_decay)?;
    let mut rng = rng_from(&[cfg.seed, salt::SCHEDULE, stage.tag() as u64]);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut det_order: Vec<usize> = (0..data.det.len()).collect();
    let mut cls_order: Vec<usize> = (0..data.cls.len()).collect();
    let mut cls_cursor = 0usize;
    let use_cls = stage.uses_pseudo_labels() && !data.cls.is_empty();
    cls_order.shuffle(&mut rng);

    for epoch in 0..cfg.epochs {
        sgd.lr = lr_at(&schedule, epoch);
        det_order.shuffle(&mut rng);
        let mut sum = LossTerms::default();
        let mut steps = 0usize;
        for chunk in det_order.chunks(cfg.det_per_batch) {
            let mut batch = Batch { det: chunk.iter().map(|&i| &data.det[i]).collect(), cls: Vec::new() };
            if use_cls {
                for _ in 0..chunk.len() * cfg.cls_per_det {
                    if cls_cursor == cls_order.len() {
                        cls_order.shuffle(&mut rng);
                        cls_cursor = 0;
                    }
                    batch.cls.push(&data.cls[cls_order[cls_cursor]]);
                    cls_cursor += 1;
                }
            }
            let (terms, grads) = stage_loss(&batch, &params, banks, &cfg.loss)?;
            if !terms.total(&cfg.loss).is_finite() {
                return Err(Error::NonFiniteLoss);
            }
            let mut tensors = Vec::new();
            let trainable = stage.trainable();
            let HeadParams { w_d, reg, transfer, skip, .. } = &mut params;
            for (name, m) in [
                ("reg", reg),
                ("skip.w1", &mut skip.w1),
                ("skip.w2", &mut skip.w2),
                ("transfer.theta1", &mut transfer.w_theta1),
                ("transfer.theta2", &mut transfer.w_theta2),
                ("w_d", &mut w_d.matrix),
            ] {
                if trainable.contains(&name) {
                    tensors.push((name, m, grads.get(name).expect("known tensor")));
                }
            }
            sgd.step_all(tensors)?;
            sum.reg += terms.reg;
            sum.cls += terms.cls;
            sum.l1 += terms.l1;
            sum.irm += terms.irm;
            sum.pms += terms.pms;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        let terms = LossTerms {
            rpn: 0.0,
            reg: sum.reg / n,
            cls: sum.cls / n,
            l1: sum.l1 / n,
            irm: sum.irm / n,
            pms: sum.pms / n,
        };
        let entry = EpochLog { epoch, lr: sgd.lr, terms, total: terms.total(&cfg.loss) };
        on_epoch(&entry);
        log.push(entry);
    }
    // keep the generator advanced past its last use so the state is exact
    let _ = rng.next_u32();
    Ok(TrainOutcome { params, rng: RngState::capture(&rng), log })
}

/// Detections for every scene, after per-class NMS.
pub fn detect_scenes(
    world: &World,
    scenes: &[Scene],
    params: &HeadParams,
    bank: &TextBank,
    cfg: &TrainConfig,
) -> Result<Vec<Vec<Detection>>> {
    scenes
        .iter()
        .map(|s| {
            let props = propose(world, s, cfg.eval_proposals);
            let feats: Vec<Vec<f64>> = props.iter().map(|p| student_features(world, s, &p.bbox)).collect();
            let dets = forward_detect(&feats, &props, &s.bounds, params, bank, cfg.loss.tau)?;
            Ok(class_nms(dets, cfg.nms_iou))
        })
        .collect()
}

/// AP50 over the evaluation scenes plus zero-shot top-1 accuracy on their
/// ground-truth boxes, always against the full base + novel bank.
pub fn evaluate(
    world: &World,
    scenes: &[Scene],
    params: &HeadParams,
    full_bank: &TextBank,
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    let bank = full_bank.with_background(true);
    let dets = detect_scenes(world, scenes, params, &bank, cfg)?;
    let gts: Vec<Vec<_>> = scenes.iter().map(|s| s.annotations.clone()).collect();
    let mut report = ap50(&dets, &gts, world.config.num_classes(), world.config.num_base)?;
    let embedder = params.embedder()?;
    let mut embs = Vec::new();
    for s in scenes {
        for (b, c) in &s.annotations {
            embs.push((embedder.embed(&student_features(world, s, b))?, *c));
        }
    }
    report.top1 = Some(top1_region_acc(&embs, &bank, world.config.num_base)?);
    Ok(report)
}
