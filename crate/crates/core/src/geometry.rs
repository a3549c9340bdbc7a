//! Axis-aligned boxes and scored proposals.

use rand::Rng as _;

use crate::seeding::Rng;

/// Corner-encoded axis-aligned box in continuous world units.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, reordering corners so that `x1 <= x2` and `y1 <= y2`.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1: x1.min(x2), y1: y1.min(y2), x2: x1.max(x2), y2: y1.max(y2) }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.x1 <= self.x2 && self.y1 <= self.y2
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clips every corner into `bounds`.
    pub fn clip_to(&self, bounds: &BBox) -> BBox {
        let cx = |v: f64| v.clamp(bounds.x1, bounds.x2);
        let cy = |v: f64| v.clamp(bounds.y1, bounds.y2);
        BBox::new(cx(self.x1), cy(self.y1), cx(self.x2), cy(self.y2))
    }

    /// Bit pattern of the corners, used to key per-box noise streams.
    pub fn key_words(&self) -> [u64; 4] {
        self.to_array().map(f64::to_bits)
    }
}

/// A box with an objectness or confidence score in `[0, 1]`.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
}

impl Proposal {
    pub fn new(bbox: BBox, score: f64) -> Self {
        Self { bbox, score: score.clamp(0.0, 1.0) }
    }
}

/// Intersection over union; 0 when the union has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Perturbs each corner by uniform noise in `±strength · side`, then clips
/// into `bounds` and restores corner ordering.
pub fn jitter(bbox: &BBox, strength: f64, rng: &mut Rng, bounds: &BBox) -> BBox {
    if strength <= 0.0 {
        return *bbox;
    }
    let (w, h) = (bbox.width(), bbox.height());
    let mut d = || rng.random_range(-1.0..=1.0) * strength;
    let out = BBox::new(bbox.x1 + d() * w, bbox.y1 + d() * h, bbox.x2 + d() * w, bbox.y2 + d() * h);
    out.clip_to(bounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;
    use proptest::prelude::*;

    fn b(a: [f64; 4]) -> BBox {
        BBox::from_array(a)
    }

    #[test]
    fn iou_fixtures() {
        assert_eq!(iou(&b([0.0, 0.0, 2.0, 2.0]), &b([0.0, 0.0, 2.0, 2.0])), 1.0);
        assert_eq!(iou(&b([0.0, 0.0, 1.0, 1.0]), &b([2.0, 2.0, 3.0, 3.0])), 0.0);
        // areas 4 and 4, overlap 2
        let v = iou(&b([0.0, 0.0, 2.0, 2.0]), &b([1.0, 0.0, 3.0, 2.0]));
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_area_boxes_never_match() {
        let p = b([1.0, 1.0, 1.0, 1.0]);
        assert_eq!(iou(&p, &p), 0.0);
        assert_eq!(iou(&p, &b([0.0, 0.0, 2.0, 2.0])), 0.0);
    }

    #[test]
    fn jitter_zero_is_identity_and_replay_is_deterministic() {
        let bounds = b([0.0, 0.0, 100.0, 100.0]);
        let bx = b([10.0, 20.0, 30.0, 50.0]);
        let mut rng = rng_from(&[1]);
        assert_eq!(jitter(&bx, 0.0, &mut rng, &bounds), bx);
        let a = jitter(&bx, 0.5, &mut rng_from(&[7, 7]), &bounds);
        let c = jitter(&bx, 0.5, &mut rng_from(&[7, 7]), &bounds);
        assert_eq!(a, c);
        assert_ne!(a, bx);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.0..40.0f64, 0.0..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let ab = iou(&a, &c);
            prop_assert_eq!(ab, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            if a.area() > 0.0 {
                prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn jitter_output_valid_and_inside(bx in arb_box(), s in 0.0..2.0f64, seed in any::<u64>()) {
            let bounds = BBox::new(-60.0, -60.0, 100.0, 100.0);
            let out = jitter(&bx, s, &mut rng_from(&[seed]), &bounds);
            prop_assert!(out.is_valid());
            prop_assert!(bounds.contains(&out));
        }
    }
}
