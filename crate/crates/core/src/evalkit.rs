//! AP50 with greedy IoU matching and zero-shot region classification.

use alloc::vec;
use alloc::vec::Vec;

use crate::embedbank::{argmax, class_logits, TextBank};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::head::Detection;

pub const AP_IOU: f64 = 0.5;
const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassGroup {
    Base,
    Novel,
}

impl ClassGroup {
    pub fn name(self) -> &'static str {
        match self {
            ClassGroup::Base => "base",
            ClassGroup::Novel => "novel",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassAp {
    pub class_id: usize,
    pub group: ClassGroup,
    /// `None` when the class has no ground truth in the evaluation split.
    pub ap: Option<f64>,
    pub num_gt: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Top1 {
    pub base: f64,
    pub novel: f64,
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_class: Vec<ClassAp>,
    pub ap_base: f64,
    pub ap_novel: f64,
    pub ap_all: f64,
    pub top1: Option<Top1>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// 101-point interpolated AP from a ranked TP/FP sequence.
pub fn interpolated_ap(is_tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(is_tp.len());
    let mut recall = Vec::with_capacity(is_tp.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in is_tp {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // precision envelope: max precision at any recall ≥ r
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut j = 0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        while j < recall.len() && recall[j] < r - 1e-12 {
            j += 1;
        }
        if j < recall.len() {
            sum += precision[j];
        }
    }
    sum / RECALL_POINTS as f64
}

/// Per-class AP50 over scenes plus base / novel / all group means.
///
/// Classes `< num_base` are base, the rest up to `num_classes` novel.
/// Detections are ranked by score, ties by lower scene then lower
/// detection index; each claims the highest-IoU unmatched ground truth of
/// its class at IoU ≥ 0.5.
pub fn ap50(
    detections: &[Vec<Detection>],
    ground_truths: &[Vec<(BBox, usize)>],
    num_classes: usize,
    num_base: usize,
) -> Result<EvalReport> {
    if detections.len() != ground_truths.len() {
        return Err(Error::DimensionMismatch { expected: ground_truths.len(), got: detections.len() });
    }
    for (c, _) in
        detections.iter().flatten().map(|d| (d.class_id, ())).chain(ground_truths.iter().flatten().map(|g| (g.1, ())))
    {
        if c >= num_classes {
            return Err(Error::UnknownClass(c));
        }
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let group = if class < num_base { ClassGroup::Base } else { ClassGroup::Novel };
        let num_gt = ground_truths.iter().flatten().filter(|g| g.1 == class).count();
        if num_gt == 0 {
            per_class.push(ClassAp { class_id: class, group, ap: None, num_gt });
            continue;
        }
        let mut ranked: Vec<(usize, usize, f64)> = Vec::new();
        for (s, dets) in detections.iter().enumerate() {
            for (i, d) in dets.iter().enumerate() {
                if d.class_id == class {
                    ranked.push((s, i, d.score));
                }
            }
        }
        // stable sort preserves (scene, index) order among equal scores
        ranked.sort_by(|a, b| b.2.total_cmp(&a.2));
        let mut matched: Vec<Vec<bool>> = ground_truths.iter().map(|g| vec![false; g.len()]).collect();
        let mut hits = Vec::with_capacity(ranked.len());
        for &(s, i, _) in &ranked {
            let det = &detections[s][i];
            let mut best: Option<(usize, f64)> = None;
            for (g, (b, c)) in ground_truths[s].iter().enumerate() {
                if *c != class || matched[s][g] {
                    continue;
                }
                let v = iou(&det.bbox, b);
                if v >= AP_IOU && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                matched[s][g] = true;
                hits.push(true);
            } else {
                hits.push(false);
            }
        }
        per_class.push(ClassAp { class_id: class, group, ap: Some(interpolated_ap(&hits, num_gt)), num_gt });
    }
    let group_mean = |g: Option<ClassGroup>| {
        mean_of(per_class.iter().filter(|c| g.is_none_or(|g| c.group == g)).filter_map(|c| c.ap))
    };
    Ok(EvalReport {
        ap_base: group_mean(Some(ClassGroup::Base)),
        ap_novel: group_mean(Some(ClassGroup::Novel)),
        ap_all: group_mean(None),
        per_class,
        top1: None,
    })
}

/// Zero-shot region classification of ground-truth boxes: argmax over
/// every class row of `bank` (background excluded).
pub fn top1_region_acc(embeddings: &[(Vec<f64>, usize)], bank: &TextBank, num_base: usize) -> Result<Top1> {
    let bank = bank.with_background(false);
    let (mut hit_b, mut n_b, mut hit_n, mut n_n) = (0usize, 0usize, 0usize, 0usize);
    for (e, class) in embeddings {
        let pred = argmax(&class_logits(e, &bank, 1.0)?);
        let hit = usize::from(pred == *class);
        if *class < num_base {
            hit_b += hit;
            n_b += 1;
        } else {
            hit_n += hit;
            n_n += 1;
        }
    }
    let frac = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    Ok(Top1 { base: frac(hit_b, n_b), novel: frac(hit_n, n_n), overall: frac(hit_b + hit_n, n_b + n_n) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(b: [f64; 4], c: usize, s: f64) -> Detection {
        Detection { bbox: BBox::from_array(b), class_id: c, score: s }
    }

    const G: [f64; 4] = [0.0, 0.0, 10.0, 10.0];

    #[test]
    fn fixtures() {
        let gts = vec![vec![(BBox::from_array(G), 0)]];
        let r = ap50(&[vec![det(G, 0, 0.9)]], &gts, 1, 1).unwrap();
        assert_eq!(r.per_class[0].ap, Some(1.0));
        let r = ap50(&[vec![]], &gts, 1, 1).unwrap();
        assert_eq!(r.per_class[0].ap, Some(0.0));
        let fp_first = vec![det([50.0, 50.0, 60.0, 60.0], 0, 0.9), det(G, 0, 0.4)];
        let r = ap50(&[fp_first], &gts, 1, 1).unwrap();
        assert_eq!(r.per_class[0].ap, Some(0.5));
    }

    #[test]
    fn duplicates_and_empty_classes() {
        let gts = vec![vec![(BBox::from_array(G), 0), (BBox::from_array(G), 2)]];
        let once = ap50(&[vec![det(G, 0, 0.9), det(G, 2, 0.5)]], &gts, 3, 2).unwrap();
        let twice = ap50(&[vec![det(G, 0, 0.9), det(G, 0, 0.95), det(G, 2, 0.5)]], &gts, 3, 2).unwrap();
        assert!(twice.per_class[0].ap <= once.per_class[0].ap);
        // class 1 has no ground truth and stays out of the base mean
        assert_eq!(once.per_class[1].ap, None);
        assert_eq!(once.ap_base, 1.0);
        assert_eq!(once.ap_novel, 1.0);
        assert!(matches!(ap50(&[vec![det(G, 7, 0.5)]], &gts, 3, 2), Err(Error::UnknownClass(7))));
    }

    #[test]
    fn top1_groups() {
        let bank =
            TextBank::new(crate::linalg::Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), true).unwrap();
        let embs = vec![(vec![1.0, 0.1], 0), (vec![0.2, 1.0], 1), (vec![1.0, 0.0], 1)];
        let t = top1_region_acc(&embs, &bank, 1).unwrap();
        assert_eq!(t.base, 1.0);
        assert_eq!(t.novel, 0.5);
        assert!((t.overall - 2.0 / 3.0).abs() < 1e-15);
    }
}
