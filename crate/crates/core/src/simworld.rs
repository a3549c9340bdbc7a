//! Synthetic world standing in for images, the vision-language teacher and
//! the class-agnostic proposal network.
//!
//! Each class has a unit latent prototype. A frozen teacher map `A`
//! embeds latents into the joint text/image space; a different frozen map
//! `B` produces the student's region features, so the projection into the
//! text space has to be learned. The teacher looks at the best-overlapping
//! object only and mixes in the scene context with weight λ, which is the
//! simulated image-centric bias. Student features blend the latents of
//! every overlapping object by IoU and fill the rest with a background
//! latent, so they are sensitive to localization.
//!
//! Every output is a pure function of the configuration and master seed.

use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::embedbank::{cosine, l2_normalize, TextBank};
use crate::error::{Error, Result};
use crate::geometry::{iou, jitter, BBox, Proposal};
use crate::linalg::Matrix;
use crate::math;
use crate::seeding::{mix, rng_from, salt, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ProposalSource {
    MvitLike,
    RpnLike,
}

impl ProposalSource {
    pub fn name(self) -> &'static str {
        match self {
            ProposalSource::MvitLike => "mvit_like",
            ProposalSource::RpnLike => "rpn_like",
        }
    }

    fn tag(self) -> u64 {
        match self {
            ProposalSource::MvitLike => 1,
            ProposalSource::RpnLike => 2,
        }
    }
}

/// Knobs of one proposal generator.
///
/// Every object gets `per_object` jittered copies of its box; random
/// background boxes are then added until `min_total` proposals exist.
/// Scores are `iou_weight·maxIoU + (1 − iou_weight)·u + score_noise·n`
/// clipped to `[0,1]`, with `u` uniform and `n` standard normal.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ProposalPreset {
    pub per_object: usize,
    pub jitter: f64,
    pub min_total: usize,
    pub iou_weight: f64,
    pub score_noise: f64,
}

impl ProposalPreset {
    pub fn mvit_like() -> Self {
        Self { per_object: 1, jitter: 0.06, min_total: 0, iou_weight: 1.0, score_noise: 0.02 }
    }

    pub fn rpn_like() -> Self {
        Self { per_object: 3, jitter: 0.25, min_total: 32, iou_weight: 0.3, score_noise: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct WorldConfig {
    pub num_base: usize,
    pub num_novel: usize,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    /// σ of the teacher's per-box noise.
    pub teacher_noise: f64,
    /// σ of the student's per-box feature noise.
    pub feature_noise: f64,
    /// Norm scale of within-class latent variation.
    pub intra_class: f64,
    /// λ, weight of the scene context in teacher embeddings.
    pub context_mix: f64,
    pub scene_size: f64,
    pub objects_per_scene: (usize, usize),
    pub cls_objects_per_scene: (usize, usize),
    pub object_size: (f64, f64),
    /// Probability that an object slot in a detection scene holds a
    /// (never annotated) novel class.
    pub det_novel_rate: f64,
    pub separation_cap: f64,
    /// Steepness of the IoU → feature-weight remap; 0 keeps weights linear.
    pub feature_sharpness: f64,
    pub mvit_like: ProposalPreset,
    pub rpn_like: ProposalPreset,
    pub num_det: usize,
    pub num_cls: usize,
    pub num_eval: usize,
    #[cfg_attr(feature = "serde", serde(skip))]
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_base: 20,
            num_novel: 8,
            latent_dim: 32,
            embed_dim: 24,
            feature_dim: 48,
            teacher_noise: 0.05,
            feature_noise: 0.05,
            intra_class: 0.35,
            context_mix: 0.3,
            scene_size: 100.0,
            objects_per_scene: (2, 6),
            cls_objects_per_scene: (1, 3),
            object_size: (12.0, 40.0),
            det_novel_rate: 0.15,
            separation_cap: 0.3,
            feature_sharpness: 20.0,
            mvit_like: ProposalPreset::mvit_like(),
            rpn_like: ProposalPreset::rpn_like(),
            num_det: 500,
            num_cls: 800,
            num_eval: 300,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn num_classes(&self) -> usize {
        self.num_base + self.num_novel
    }

    pub fn is_base(&self, class: usize) -> bool {
        class < self.num_base
    }

    pub fn base_classes(&self) -> Vec<usize> {
        (0..self.num_base).collect()
    }

    pub fn novel_classes(&self) -> Vec<usize> {
        (self.num_base..self.num_classes()).collect()
    }

    pub fn preset(&self, source: ProposalSource) -> &ProposalPreset {
        match source {
            ProposalSource::MvitLike => &self.mvit_like,
            ProposalSource::RpnLike => &self.rpn_like,
        }
    }

    pub fn bounds(&self) -> BBox {
        BBox::new(0.0, 0.0, self.scene_size, self.scene_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_base == 0 || self.latent_dim == 0 || self.embed_dim == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidConfig("class counts and dimensions must be positive"));
        }
        if !(0.0..=1.0).contains(&self.context_mix) {
            return Err(Error::InvalidConfig("context_mix must lie in [0,1]"));
        }
        if !(0.0..=1.0).contains(&self.det_novel_rate) {
            return Err(Error::InvalidConfig("det_novel_rate must lie in [0,1]"));
        }
        let (lo, hi) = self.objects_per_scene;
        let (clo, chi) = self.cls_objects_per_scene;
        if lo == 0 || lo > hi || clo == 0 || clo > chi {
            return Err(Error::InvalidConfig("object count ranges must be non-empty and start at 1 or more"));
        }
        let (smin, smax) = self.object_size;
        if !(smin > 0.0 && smin <= smax && smax <= self.scene_size) {
            return Err(Error::InvalidConfig("object size range must fit in the scene"));
        }
        Ok(())
    }
}

/// Frozen world: prototypes `C × L`, teacher map `D × L`, student map `F × L`.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub prototypes: Matrix,
    pub teacher_map: Matrix,
    pub student_map: Matrix,
    pub background_latent: Vec<f64>,
}

const MAX_SEPARATION_ATTEMPTS: usize = 10_000;

fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    loop {
        if let Ok(v) = l2_normalize(&normal_vec(rng, n)) {
            return v;
        }
    }
}

pub fn gen_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let mut rng = rng_from(&[config.seed, salt::WORLD]);
    let (c, l) = (config.num_classes(), config.latent_dim);
    let cap = config.separation_cap;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(c);
    let mut attempts = 0;
    while rows.len() < c {
        attempts += 1;
        if attempts > MAX_SEPARATION_ATTEMPTS {
            return Err(Error::SeparationUnsatisfiable { attempts: MAX_SEPARATION_ATTEMPTS });
        }
        let v = unit_vec(&mut rng, l);
        if rows.iter().all(|r| math::dot(r, &v) <= cap) {
            rows.push(v);
        }
    }
    let background_latent = loop {
        attempts += 1;
        if attempts > 2 * MAX_SEPARATION_ATTEMPTS {
            return Err(Error::SeparationUnsatisfiable { attempts });
        }
        let v = unit_vec(&mut rng, l);
        if rows.iter().all(|r| math::dot(r, &v) <= cap) {
            break v;
        }
    };
    let scale = 1.0 / math::sqrt(l as f64);
    let teacher_map = Matrix::from_fn(config.embed_dim, l, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    let student_map = Matrix::from_fn(config.feature_dim, l, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    Ok(World {
        config: config.clone(),
        prototypes: Matrix::from_rows(&rows)?,
        teacher_map,
        student_map,
        background_latent,
    })
}

impl World {
    /// 64-bit identifier of the frozen world, stored in checkpoints.
    pub fn fingerprint(&self) -> u64 {
        let mut words: Vec<u64> = Vec::new();
        for m in [&self.prototypes, &self.teacher_map, &self.student_map] {
            words.push(m.rows() as u64);
            words.push(m.cols() as u64);
            words.extend(m.as_slice().iter().map(|v| v.to_bits()));
        }
        words.extend(self.background_latent.iter().map(|v| v.to_bits()));
        mix(&words)
    }
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Detection,
    Classification,
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub bbox: BBox,
    pub class_id: usize,
    pub latent: Vec<f64>,
}

/// A synthetic image.
///
/// `objects` is the hidden ground truth the simulator renders from;
/// `annotations` (detection kind) and `image_labels` (classification kind)
/// are what a learner is allowed to see.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub kind: SceneKind,
    pub bounds: BBox,
    pub objects: Vec<SceneObject>,
    pub context: Vec<f64>,
    pub annotations: Vec<(BBox, usize)>,
    pub image_labels: Vec<usize>,
}

/// The text bank: row `c` is the normalized teacher image of prototype `c`.
pub fn text_embeddings(world: &World) -> Result<TextBank> {
    let p = &world.prototypes;
    let rows = world.teacher_map.matmul_t(p)?.transpose();
    TextBank::new(rows, true)
}

fn max_iou_object(scene: &Scene, bbox: &BBox) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, o) in scene.objects.iter().enumerate() {
        let v = iou(&o.bbox, bbox);
        if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

/// Frozen teacher region embedding (unit norm).
pub fn teacher_embed(world: &World, scene: &Scene, bbox: &BBox) -> Vec<f64> {
    let cfg = &world.config;
    let z = match max_iou_object(scene, bbox) {
        Some((i, _)) => &scene.objects[i].latent,
        None => &scene.context,
    };
    let lambda = cfg.context_mix;
    let mixed: Vec<f64> = z.iter().zip(&scene.context).map(|(a, c)| (1.0 - lambda) * a + lambda * c).collect();
    let mut v = world.teacher_map.mul_vec(&mixed).expect("latent dim matches teacher map");
    if cfg.teacher_noise > 0.0 {
        let [a, b, c, d] = bbox.key_words();
        let mut rng = rng_from(&[cfg.seed, salt::TEACHER, scene.id, a, b, c, d]);
        for x in v.iter_mut() {
            *x += cfg.teacher_noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    l2_normalize(&v).unwrap_or(v)
}

/// Student region features: `B · z_box + σ_s · noise`, with `z_box` the
/// IoU-weighted blend of overlapping object latents topped up with the
/// background latent.
pub fn student_features(world: &World, scene: &Scene, bbox: &BBox) -> Vec<f64> {
    let cfg = &world.config;
    let mut weights: Vec<f64> =
        scene.objects.iter().map(|o| sharpen(iou(&o.bbox, bbox), cfg.feature_sharpness)).collect();
    let total: f64 = weights.iter().sum();
    if total > 1.0 {
        weights.iter_mut().for_each(|w| *w /= total);
    }
    let fill = (1.0 - total).max(0.0);
    let mut z: Vec<f64> = world.background_latent.iter().map(|g| fill * g).collect();
    for (o, w) in scene.objects.iter().zip(&weights) {
        if *w > 0.0 {
            for (zi, li) in z.iter_mut().zip(&o.latent) {
                *zi += w * li;
            }
        }
    }
    let mut f = world.student_map.mul_vec(&z).expect("latent dim matches student map");
    if cfg.feature_noise > 0.0 {
        let [a, b, c, d] = bbox.key_words();
        let mut rng = rng_from(&[cfg.seed, salt::STUDENT, scene.id, a, b, c, d]);
        for x in f.iter_mut() {
            *x += cfg.feature_noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    f
}

/// Logistic remap of `[0,1]` onto itself, steepest at 0.5; `s = 0` is the
/// identity.
fn sharpen(v: f64, s: f64) -> f64 {
    if s <= 0.0 {
        return v;
    }
    let lo = math::sigmoid(-0.5 * s);
    let hi = math::sigmoid(0.5 * s);
    ((math::sigmoid(s * (v - 0.5)) - lo) / (hi - lo)).clamp(0.0, 1.0)
}

fn random_box(rng: &mut Rng, cfg: &WorldConfig) -> BBox {
    let (smin, smax) = cfg.object_size;
    let w = rng.random_range(smin..=smax);
    let h = rng.random_range(smin..=smax);
    let x = rng.random_range(0.0..=(cfg.scene_size - w));
    let y = rng.random_range(0.0..=(cfg.scene_size - h));
    BBox::new(x, y, x + w, y + h)
}

fn proposal_boxes(world: &World, scene: &Scene, source: ProposalSource, rng: &mut Rng) -> Vec<BBox> {
    let cfg = &world.config;
    let preset = cfg.preset(source);
    let mut boxes = Vec::new();
    for o in &scene.objects {
        for _ in 0..preset.per_object {
            boxes.push(jitter(&o.bbox, preset.jitter, rng, &scene.bounds));
        }
    }
    while boxes.len() < preset.min_total {
        boxes.push(random_box(rng, cfg));
    }
    boxes
}

/// Class-agnostic proposals for a scene.
pub fn propose(world: &World, scene: &Scene, source: ProposalSource) -> Vec<Proposal> {
    let cfg = &world.config;
    let preset = cfg.preset(source);
    let mut rng = rng_from(&[cfg.seed, salt::PROPOSE, scene.id, source.tag()]);
    let boxes = proposal_boxes(world, scene, source, &mut rng);
    boxes
        .into_iter()
        .map(|b| {
            let best = max_iou_object(scene, &b).map_or(0.0, |(_, v)| v);
            let u: f64 = rng.random();
            let n: f64 = rng.sample(StandardNormal);
            let raw = preset.iou_weight * best + (1.0 - preset.iou_weight) * u + preset.score_noise * n;
            Proposal::new(b, raw)
        })
        .collect()
}

/// Candidates for a class-specific text query; the confidence of each box
/// is `(1 + cos(teacher, text_class)) / 2` plus noise.
pub fn query_class_specific(
    world: &World,
    bank: &TextBank,
    scene: &Scene,
    class_id: usize,
    source: ProposalSource,
) -> Result<Vec<Proposal>> {
    if class_id >= bank.num_classes() {
        return Err(Error::UnknownClass(class_id));
    }
    let cfg = &world.config;
    let preset = cfg.preset(source);
    let boxes = {
        let mut rng = rng_from(&[cfg.seed, salt::PROPOSE, scene.id, source.tag()]);
        proposal_boxes(world, scene, source, &mut rng)
    };
    let mut rng = rng_from(&[cfg.seed, salt::QUERY, scene.id, source.tag(), class_id as u64]);
    Ok(boxes
        .into_iter()
        .map(|b| {
            let t = teacher_embed(world, scene, &b);
            let conf = 0.5 * (1.0 + cosine(&t, bank.row(class_id)));
            let n: f64 = rng.sample(StandardNormal);
            Proposal::new(b, conf + preset.score_noise * n)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub det: Vec<Scene>,
    pub cls: Vec<Scene>,
    /// Fully annotated detection scenes over base and novel classes.
    pub eval: Vec<Scene>,
}

const SPLIT_DET: u64 = 0;
const SPLIT_CLS: u64 = 1;
const SPLIT_EVAL: u64 = 2;

fn make_scene(
    world: &World,
    rng: &mut Rng,
    id: u64,
    kind: SceneKind,
    count: usize,
    mut pick: impl FnMut(&mut Rng) -> usize,
) -> Scene {
    let cfg = &world.config;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    let spread = cfg.intra_class / math::sqrt(cfg.latent_dim as f64);
    for _ in 0..count {
        let class_id = pick(rng);
        let mut placed = None;
        for _ in 0..50 {
            let b = random_box(rng, cfg);
            if objects.iter().all(|o| iou(&o.bbox, &b) < 0.2) {
                placed = Some(b);
                break;
            }
        }
        let Some(bbox) = placed else { continue };
        let latent: Vec<f64> =
            world.prototypes.row(class_id).iter().map(|p| p + spread * rng.sample::<f64, _>(StandardNormal)).collect();
        objects.push(SceneObject { bbox, class_id, latent });
    }
    let l = cfg.latent_dim;
    let mut context = alloc::vec![0.0; l];
    for o in &objects {
        for (c, v) in context.iter_mut().zip(&o.latent) {
            *c += v / objects.len() as f64;
        }
    }
    Scene { id, kind, bounds: cfg.bounds(), objects, context, annotations: Vec::new(), image_labels: Vec::new() }
}

/// Detection, classification and evaluation splits.
pub fn gen_datasets(world: &World) -> Datasets {
    let cfg = &world.config;
    let (nb, nn, nc) = (cfg.num_base, cfg.num_novel, cfg.num_classes());
    let det = (0..cfg.num_det)
        .map(|i| {
            let mut rng = rng_from(&[cfg.seed, salt::DET, i as u64]);
            let count = rng.random_range(cfg.objects_per_scene.0..=cfg.objects_per_scene.1);
            let mut s = make_scene(world, &mut rng, (SPLIT_DET << 32) | i as u64, SceneKind::Detection, count, |r| {
                if nn > 0 && r.random::<f64>() < cfg.det_novel_rate {
                    nb + r.random_range(0..nn)
                } else {
                    r.random_range(0..nb)
                }
            });
            s.annotations =
                s.objects.iter().filter(|o| cfg.is_base(o.class_id)).map(|o| (o.bbox, o.class_id)).collect();
            s
        })
        .collect();
    let cls = (0..cfg.num_cls)
        .map(|i| {
            let mut rng = rng_from(&[cfg.seed, salt::CLS, i as u64]);
            let count = rng.random_range(cfg.cls_objects_per_scene.0..=cfg.cls_objects_per_scene.1);
            let mut s =
                make_scene(world, &mut rng, (SPLIT_CLS << 32) | i as u64, SceneKind::Classification, count, |r| {
                    r.random_range(0..nc)
                });
            let mut labels: Vec<usize> = s.objects.iter().map(|o| o.class_id).collect();
            labels.sort_unstable();
            labels.dedup();
            s.image_labels = labels;
            s
        })
        .collect();
    let eval = (0..cfg.num_eval)
        .map(|i| {
            let mut rng = rng_from(&[cfg.seed, salt::EVAL, i as u64]);
            let count = rng.random_range(cfg.objects_per_scene.0..=cfg.objects_per_scene.1);
            let mut s = make_scene(world, &mut rng, (SPLIT_EVAL << 32) | i as u64, SceneKind::Detection, count, |r| {
                r.random_range(0..nc)
            });
            s.annotations = s.objects.iter().map(|o| (o.bbox, o.class_id)).collect();
            s
        })
        .collect();
    Datasets { det, cls, eval }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedbank::argmax;

    fn small_config() -> WorldConfig {
        WorldConfig { num_det: 60, num_cls: 80, num_eval: 40, ..WorldConfig::default() }
    }

    fn noiseless(lambda: f64) -> WorldConfig {
        WorldConfig { teacher_noise: 0.0, feature_noise: 0.0, context_mix: lambda, ..small_config() }
    }

    #[test]
    fn world_is_deterministic_and_separated() {
        let cfg = small_config();
        let a = gen_world(&cfg).unwrap();
        assert_eq!(a, gen_world(&cfg).unwrap());
        assert_eq!(a.fingerprint(), gen_world(&cfg).unwrap().fingerprint());
        let other = gen_world(&WorldConfig { seed: 1, ..cfg.clone() }).unwrap();
        assert_ne!(a.fingerprint(), other.fingerprint());
        let p = &a.prototypes;
        let mut max_cos = f64::NEG_INFINITY;
        for i in 0..p.rows() {
            assert!((math::norm(p.row(i)) - 1.0).abs() < 1e-12);
            for j in 0..i {
                max_cos = max_cos.max(math::dot(p.row(i), p.row(j)));
            }
        }
        assert!(max_cos <= 0.5, "max pairwise cosine {max_cos}");
    }

    #[test]
    fn impossible_separation_is_reported() {
        let cfg = WorldConfig { latent_dim: 2, separation_cap: -0.9, ..small_config() };
        assert!(matches!(gen_world(&cfg), Err(Error::SeparationUnsatisfiable { .. })));
    }

    #[test]
    fn text_bank_shape_and_norms() {
        let w = gen_world(&small_config()).unwrap();
        let bank = text_embeddings(&w).unwrap();
        assert_eq!((bank.num_classes(), bank.dim()), (28, 24));
        for c in 0..bank.num_classes() {
            assert!((math::norm(bank.row(c)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn teacher_is_aligned_without_noise_or_context() {
        let cfg = WorldConfig { intra_class: 0.0, ..noiseless(0.0) };
        let w = gen_world(&cfg).unwrap();
        let bank = text_embeddings(&w).unwrap();
        let data = gen_datasets(&w);
        for s in data.eval.iter().chain(&data.det) {
            for o in &s.objects {
                let t = teacher_embed(&w, s, &o.bbox);
                assert!((cosine(&t, bank.row(o.class_id)) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn joint_space_argmax_property() {
        let w = gen_world(&noiseless(0.0)).unwrap();
        let bank = text_embeddings(&w).unwrap().with_background(false);
        let data = gen_datasets(&w);
        for s in data.eval.iter().chain(&data.det).chain(&data.cls) {
            for o in &s.objects {
                let t = teacher_embed(&w, s, &o.bbox);
                let logits = crate::embedbank::class_logits(&t, &bank, 1.0).unwrap();
                assert_eq!(argmax(&logits), o.class_id);
            }
        }
    }

    #[test]
    fn pure_context_teacher_is_box_independent() {
        let w = gen_world(&noiseless(1.0)).unwrap();
        let s = &gen_datasets(&w).eval[0];
        let first = teacher_embed(&w, s, &s.objects[0].bbox);
        for o in &s.objects {
            let t = teacher_embed(&w, s, &o.bbox);
            for (a, b) in t.iter().zip(&first) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn mean_own_cosine(lambda: f64, seed: u64) -> f64 {
        let cfg = WorldConfig { seed, num_eval: 100, ..noiseless(lambda) };
        let w = gen_world(&cfg).unwrap();
        let bank = text_embeddings(&w).unwrap();
        let data = gen_datasets(&w);
        let (mut sum, mut n) = (0.0, 0usize);
        for s in &data.eval {
            for o in &s.objects {
                sum += cosine(&teacher_embed(&w, s, &o.bbox), bank.row(o.class_id));
                n += 1;
            }
        }
        sum / n as f64
    }

    #[test]
    fn context_mix_orders_teacher_quality() {
        for seed in 0..3 {
            let (c0, c3, c6, c1) = (
                mean_own_cosine(0.0, seed),
                mean_own_cosine(0.3, seed),
                mean_own_cosine(0.6, seed),
                mean_own_cosine(1.0, seed),
            );
            assert!(c0 > c3 && c3 > c6 && c6 > c1, "seed {seed}: {c0} {c3} {c6} {c1}");
        }
    }

    #[test]
    fn student_features_are_deterministic_and_sized() {
        let w = gen_world(&small_config()).unwrap();
        let s = &gen_datasets(&w).det[0];
        let b = s.objects[0].bbox;
        let f = student_features(&w, s, &b);
        assert_eq!(f.len(), 48);
        assert_eq!(f, student_features(&w, s, &b));
    }

    #[test]
    fn same_class_features_match_up_to_latent_spread() {
        let cfg = WorldConfig { intra_class: 0.0, ..noiseless(0.3) };
        let w = gen_world(&cfg).unwrap();
        let data = gen_datasets(&w);
        // find two scenes with a lone object of the same class
        let mut seen: alloc::collections::BTreeMap<usize, Vec<f64>> = alloc::collections::BTreeMap::new();
        let mut compared = 0;
        for s in data.eval.iter() {
            for o in &s.objects {
                let overlaps = s.objects.iter().filter(|p| iou(&p.bbox, &o.bbox) > 0.0).count();
                if overlaps != 1 {
                    continue;
                }
                let f = student_features(&w, s, &o.bbox);
                if let Some(prev) = seen.get(&o.class_id) {
                    for (a, b) in f.iter().zip(prev) {
                        assert!((a - b).abs() < 1e-12);
                    }
                    compared += 1;
                } else {
                    seen.insert(o.class_id, f);
                }
            }
        }
        assert!(compared > 0);
    }

    #[test]
    fn mvit_quality_limit_returns_ground_truth() {
        let mut cfg = small_config();
        cfg.mvit_like.jitter = 0.0;
        cfg.mvit_like.score_noise = 0.0;
        let w = gen_world(&cfg).unwrap();
        for s in gen_datasets(&w).det.iter().take(20) {
            let p = propose(&w, s, ProposalSource::MvitLike);
            assert_eq!(p.len(), s.objects.len());
            for (prop, o) in p.iter().zip(&s.objects) {
                assert_eq!(prop.bbox, o.bbox);
                assert_eq!(prop.score, 1.0);
            }
        }
    }

    fn mean_max_iou(w: &World, scenes: &[Scene], src: ProposalSource) -> f64 {
        let (mut sum, mut n) = (0.0, 0usize);
        for s in scenes {
            for p in propose(w, s, src) {
                sum += s.objects.iter().map(|o| iou(&o.bbox, &p.bbox)).fold(0.0, f64::max);
                n += 1;
            }
        }
        sum / n as f64
    }

    #[test]
    fn mvit_proposals_localize_better_than_rpn() {
        let cfg = WorldConfig { num_eval: 200, ..small_config() };
        let w = gen_world(&cfg).unwrap();
        let data = gen_datasets(&w);
        let m = mean_max_iou(&w, &data.eval, ProposalSource::MvitLike);
        let r = mean_max_iou(&w, &data.eval, ProposalSource::RpnLike);
        assert!(m > r, "mvit {m} rpn {r}");
        let s = &data.eval[3];
        assert_eq!(propose(&w, s, ProposalSource::RpnLike), propose(&w, s, ProposalSource::RpnLike));
        assert!(propose(&w, s, ProposalSource::RpnLike).len() >= 32);
    }

    #[test]
    fn class_queries_find_the_object() {
        let mut cfg = WorldConfig { num_eval: 200, ..noiseless(0.3) };
        cfg.mvit_like.jitter = 0.0;
        cfg.mvit_like.score_noise = 0.0;
        let w = gen_world(&cfg).unwrap();
        let bank = text_embeddings(&w).unwrap();
        let data = gen_datasets(&w);
        let (mut present, mut absent, mut np, mut na) = (0.0, 0.0, 0, 0);
        for s in &data.eval {
            for o in &s.objects {
                let same = s.objects.iter().filter(|p| p.class_id == o.class_id).count();
                let cands = query_class_specific(&w, &bank, s, o.class_id, ProposalSource::MvitLike).unwrap();
                assert!(cands.iter().all(|p| (0.0..=1.0).contains(&p.score)));
                let top = crate::ils::select_class_specific_top1(&cands).unwrap();
                if same == 1 {
                    assert_eq!(top.bbox, o.bbox);
                }
                present += top.score;
                np += 1;
            }
            let absent_class = (0..cfg.num_classes()).find(|c| s.objects.iter().all(|o| o.class_id != *c)).unwrap();
            let cands = query_class_specific(&w, &bank, s, absent_class, ProposalSource::MvitLike).unwrap();
            absent += crate::ils::select_class_specific_top1(&cands).unwrap().score;
            na += 1;
        }
        assert!(present / np as f64 > absent / na as f64 + 0.1);
        assert!(matches!(
            query_class_specific(&w, &bank, &data.eval[0], 99, ProposalSource::MvitLike),
            Err(Error::UnknownClass(99))
        ));
    }

    #[test]
    fn datasets_respect_split_contract() {
        let cfg = WorldConfig::default();
        let w = gen_world(&cfg).unwrap();
        let data = gen_datasets(&w);
        assert_eq!((data.det.len(), data.cls.len(), data.eval.len()), (500, 800, 300));
        assert!(data.det.iter().all(|s| s.annotations.iter().all(|(_, c)| cfg.is_base(*c))));
        for novel in cfg.novel_classes() {
            assert!(data.cls.iter().any(|s| s.image_labels.contains(&novel)), "novel {novel} uncovered");
        }
        for s in data.det.iter().chain(&data.cls) {
            let n = s.objects.len() as f64;
            for i in 0..cfg.latent_dim {
                let mean: f64 = s.objects.iter().map(|o| o.latent[i]).sum::<f64>() / n;
                assert!((mean - s.context[i]).abs() < 1e-12);
            }
        }
        assert_eq!(data, gen_datasets(&w));
    }
}
