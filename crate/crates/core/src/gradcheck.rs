//! Central-difference verification of every analytic gradient.
//!
//! Instances are drawn from a seeded generator. Any instance closer than
//! [`KINK_MARGIN`] to a non-differentiable point (L1 sign flips, LeakyReLU
//! at zero, smooth-L1 at `|d| = 1`) is redrawn.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::embedbank::{l2_normalize, softmax_ce, TextBank};
use crate::error::{Error, Result};
use crate::head::{smooth_l1, stage_loss, Banks, Batch, ClsSample, DetSample, HeadDims, HeadParams, LossConfig, Stage};
use crate::ils::pms_loss;
use crate::linalg::Matrix;
use crate::math;
use crate::optim::finite_diff_grad;
use crate::rkd::{irm_loss, l1_loss};
use crate::seeding::{rng_from, Rng};
use crate::weight_transfer::{
    transfer, transfer_backward, uniform_init, ProjectionWeights, SkipParams, TransferParams,
};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so that near-zero gradient
/// coordinates are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;
pub const KINK_MARGIN: f64 = 1e-3;
pub const DEFAULT_INSTANCES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckEntry {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

/// Largest coordinate-wise `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| math::abs(a - n) / math::abs(a).max(math::abs(n)).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| normal(rng))
}

fn random_bank(classes: usize, dim: usize, bg: bool, rng: &mut Rng) -> TextBank {
    loop {
        if let Ok(b) = TextBank::new(normal_matrix(classes, dim, rng), bg) {
            return b;
        }
    }
}

/// Evaluates `f` as loss-and-gradient on a flat parameter vector and
/// compares against central differences of its loss.
fn compare(f: impl Fn(&[f64]) -> Result<(f64, Vec<f64>)>, at: &[f64]) -> Result<f64> {
    let (_, analytic) = f(at)?;
    let numeric = finite_diff_grad(|w| f(w).map_or(f64::NAN, |r| r.0), at, FD_STEP)?;
    Ok(rel_err(&analytic, &numeric))
}

fn run(name: &'static str, instances: usize, mut one: impl FnMut() -> Result<f64>) -> Result<GradCheckEntry> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        worst = worst.max(one()?);
    }
    Ok(GradCheckEntry { name, instances, max_rel_err: worst })
}

fn check_softmax_ce(rng: &mut Rng) -> Result<f64> {
    let logits: Vec<f64> = (0..6).map(|_| 2.0 * normal(rng)).collect();
    let target = rng.random_range(0..6);
    compare(|w| softmax_ce(w, target), &logits)
}

fn check_l1(rng: &mut Rng) -> Result<f64> {
    let (k, d) = (4, 6);
    let teacher = normal_matrix(k, d, rng);
    let student = loop {
        let s = normal_matrix(k, d, rng);
        if s.as_slice().iter().zip(teacher.as_slice()).all(|(a, b)| math::abs(a - b) > KINK_MARGIN) {
            break s;
        }
    };
    compare(
        |w| {
            let (l, g) = l1_loss(&Matrix::from_vec(k, d, w.to_vec())?, &teacher)?;
            Ok((l, g.into_vec()))
        },
        student.as_slice(),
    )
}

fn check_irm(rng: &mut Rng) -> Result<f64> {
    let (k, d) = (4, 5);
    let teacher = normal_matrix(k, d, rng);
    let student = normal_matrix(k, d, rng);
    compare(
        |w| {
            let (l, g) = irm_loss(&Matrix::from_vec(k, d, w.to_vec())?, &teacher)?;
            Ok((l, g.into_vec()))
        },
        student.as_slice(),
    )
}

fn check_pms(rng: &mut Rng) -> Result<f64> {
    let (n, c, d) = (3, 5, 8);
    let bank = random_bank(c, d, false, rng);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let embs = normal_matrix(n, d, rng);
    compare(
        |w| {
            let (l, g) = pms_loss(&Matrix::from_vec(n, d, w.to_vec())?, &bank, &labels, 10.0)?;
            Ok((l, g.into_vec()))
        },
        embs.as_slice(),
    )
}

fn check_smooth_l1(rng: &mut Rng) -> Result<f64> {
    let target = [normal(rng), normal(rng), normal(rng), normal(rng)];
    let pred = loop {
        let p = [
            target[0] + 1.5 * normal(rng),
            target[1] + 1.5 * normal(rng),
            target[2] + 1.5 * normal(rng),
            target[3] + 1.5 * normal(rng),
        ];
        if p.iter().zip(&target).all(|(a, b)| math::abs(math::abs(a - b) - 1.0) > KINK_MARGIN) {
            break p;
        }
    };
    compare(
        |w| {
            let (l, g) = smooth_l1(&[w[0], w[1], w[2], w[3]], &target);
            Ok((l, g.to_vec()))
        },
        &pred,
    )
}

fn min_abs(values: &[f64]) -> f64 {
    values.iter().map(|v| math::abs(*v)).fold(f64::INFINITY, f64::min)
}

/// Fixed linear read-out of `[W_P ; skip(xs)]`, differentiated through the
/// transfer function and the skip perceptron together.
fn check_transfer_skip(rng: &mut Rng) -> Result<f64> {
    let (e, f, h, hs, n) = (4, 6, 5, 7, 3);
    let wd = ProjectionWeights { matrix: normal_matrix(e, f, rng), frozen: true };
    let xs = normal_matrix(n, f, rng);
    let c_wp = normal_matrix(e, f, rng);
    let c_out = normal_matrix(n, e, rng);
    let (tp, sp) = loop {
        let tp = TransferParams { w_theta1: normal_matrix(h, e, rng), w_theta2: normal_matrix(e, h, rng), slope: 0.1 };
        let sp = SkipParams { w1: normal_matrix(hs, f, rng), w2: normal_matrix(e, hs, rng), slope: 0.1 };
        let pre = tp.w_theta1.matmul(&wd.matrix)?;
        let skip_pre = xs.matmul_t(&sp.w1)?;
        if min_abs(pre.as_slice()) > KINK_MARGIN && min_abs(skip_pre.as_slice()) > KINK_MARGIN {
            break (tp, sp);
        }
    };
    let sizes = [h * e, e * h, hs * f, e * hs];
    let unpack = |w: &[f64]| -> Result<(TransferParams, SkipParams)> {
        let mut o = 0;
        let mut take = |r: usize, c: usize| {
            let m = Matrix::from_vec(r, c, w[o..o + r * c].to_vec());
            o += r * c;
            m
        };
        let t = TransferParams { w_theta1: take(h, e)?, w_theta2: take(e, h)?, slope: 0.1 };
        let s = SkipParams { w1: take(hs, f)?, w2: take(e, hs)?, slope: 0.1 };
        Ok((t, s))
    };
    let f_eval = |w: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (t, s) = unpack(w)?;
        let wp = transfer(&wd, &t)?;
        let mut loss = wp.matrix.as_slice().iter().zip(c_wp.as_slice()).map(|(a, b)| a * b).sum::<f64>();
        let mut d_wp = c_wp.clone();
        let mut sg = s.zero_grads();
        for (i, x) in xs.iter_rows().enumerate() {
            let (out, trace) = s.forward(x)?;
            let emb: Vec<f64> = wp.matrix.mul_vec(x)?.iter().zip(&out).map(|(a, b)| a + b).collect();
            loss += math::dot(&emb, c_out.row(i));
            d_wp.add_outer(1.0, c_out.row(i), x)?;
            s.accumulate_backward(x, &trace, c_out.row(i), &mut sg)?;
        }
        let tg = transfer_backward(&wd, &t, &d_wp)?;
        let mut g = Vec::with_capacity(sizes.iter().sum());
        for m in [tg.w_theta1, tg.w_theta2, sg.w1, sg.w2] {
            g.extend(m.into_vec());
        }
        Ok((loss, g))
    };
    let mut at = Vec::new();
    for m in [&tp.w_theta1, &tp.w_theta2, &sp.w1, &sp.w2] {
        at.extend_from_slice(m.as_slice());
    }
    compare(f_eval, &at)
}

struct StageInstance {
    params: HeadParams,
    banks: Banks,
    det: Vec<DetSample>,
    cls: Vec<ClsSample>,
}

fn stage_instance(stage: Stage, rng: &mut Rng) -> Result<StageInstance> {
    let dims = HeadDims {
        embed_dim: 4,
        feature_dim: 6,
        transfer_hidden: 5,
        skip_hidden: 7,
        slope: 0.1,
        zero_skip_output: false,
        tied_transfer_init: false,
    };
    let mut params = HeadParams::init(dims, rng);
    params.reg = uniform_init(4, dims.feature_dim, rng);
    params.enter_stage(stage);
    let all = random_bank(3, dims.embed_dim, false, rng);
    let banks = Banks { det: all.subset(&[0, 1], true)?, ils: all };
    let det = (0..2)
        .map(|_| {
            let labels: Vec<Option<usize>> =
                (0..4).map(|_| if rng.random_bool(0.5) { Some(rng.random_range(0..2)) } else { None }).collect();
            let reg_targets = labels
                .iter()
                .map(|l| l.map(|_| [0.3 * normal(rng), 0.3 * normal(rng), 0.3 * normal(rng), 0.3 * normal(rng)]))
                .collect();
            DetSample {
                feats: normal_matrix(4, dims.feature_dim, rng),
                labels,
                reg_targets,
                distill_feats: normal_matrix(3, dims.feature_dim, rng),
                teacher: normal_matrix(3, dims.embed_dim, rng),
            }
        })
        .collect();
    let cls = if stage.uses_pseudo_labels() {
        (0..2)
            .map(|_| ClsSample {
                feats: normal_matrix(2, dims.feature_dim, rng),
                labels: vec![rng.random_range(0..3), rng.random_range(0..3)],
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(StageInstance { params, banks, det, cls })
}

/// Smallest distance of any active kink to its switching point.
fn stage_kink_margin(inst: &StageInstance) -> Result<f64> {
    let p = &inst.params;
    let mut margin = f64::INFINITY;
    if p.stage.uses_transfer() {
        margin = margin.min(min_abs(p.transfer.w_theta1.matmul(&p.w_d.matrix)?.as_slice()));
    }
    let embedder = p.embedder()?;
    if p.stage.uses_transfer() {
        let det_rows = inst.det.iter().flat_map(|s| s.feats.iter_rows().chain(s.distill_feats.iter_rows()));
        for x in det_rows.chain(inst.cls.iter().flat_map(|c| c.feats.iter_rows())) {
            margin = margin.min(min_abs(&p.skip.w1.mul_vec(x)?));
        }
    }
    for s in &inst.det {
        for (x, t) in s.feats.iter_rows().zip(&s.reg_targets) {
            if let Some(t) = t {
                let d = p.reg.mul_vec(x)?;
                for i in 0..4 {
                    margin = margin.min(math::abs(math::abs(d[i] - t[i]) - 1.0));
                }
            }
        }
        if p.stage.distills() {
            for (x, t) in s.distill_feats.iter_rows().zip(s.teacher.iter_rows()) {
                let u = l2_normalize(&embedder.embed(x)?)?;
                let tu = l2_normalize(t)?;
                for (a, b) in u.iter().zip(&tu) {
                    margin = margin.min(math::abs(a - b));
                }
            }
        }
    }
    Ok(margin)
}

fn check_stage(stage: Stage, rng: &mut Rng) -> Result<f64> {
    let inst = loop {
        let inst = stage_instance(stage, rng)?;
        if stage_kink_margin(&inst)? > KINK_MARGIN {
            break inst;
        }
    };
    let cfg = LossConfig::default();
    let f = |w: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut p = inst.params.clone();
        p.set_trainable_flat(w)?;
        let batch = Batch { det: inst.det.iter().collect(), cls: inst.cls.iter().collect() };
        let (terms, grads) = stage_loss(&batch, &p, &inst.banks, &cfg)?;
        Ok((terms.total(&cfg), grads.trainable_flat(stage)))
    };
    compare(f, &inst.params.trainable_flat())
}

/// Runs every check with `instances` seeded instances each.
pub fn run_suite(seed: u64, instances: usize) -> Result<Vec<GradCheckEntry>> {
    if instances == 0 {
        return Err(Error::InvalidConfig("gradient check needs at least one instance"));
    }
    let mut rng = rng_from(&[seed, 0x4752_4144]);
    let r = &mut rng;
    let mut out = vec![
        run("softmax_ce", instances, || check_softmax_ce(r))?,
        run("l1", instances, || check_l1(r))?,
        run("irm", instances, || check_irm(r))?,
        run("pms", instances, || check_pms(r))?,
        run("transfer_skip", instances, || check_transfer_skip(r))?,
        run("smooth_l1", instances, || check_smooth_l1(r))?,
    ];
    for stage in Stage::ALL {
        let name = match stage {
            Stage::Base => "stage_base",
            Stage::Rkd => "stage_rkd",
            Stage::Pis => "stage_pis",
            Stage::Naive => "stage_naive",
            Stage::Wt => "stage_wt",
        };
        out.push(run(name, instances, || check_stage(stage, r))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(&[1.0], &[1.0]), 0.0);
        assert!((rel_err(&[1e-9], &[0.0]) - 1e-3).abs() < 1e-15);
        assert!((rel_err(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn suite_passes_and_lists_each_loss_once() {
        let entries = run_suite(7, 3).unwrap();
        let mut names: Vec<&str> = entries.iter().map(|e| e.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), entries.len());
        for e in &entries {
            assert!(e.passed(), "{} {}", e.name, e.max_rel_err);
        }
    }
}
