//! Axis-aligned box algebra: IoU, regression deltas, clipping and greedy NMS.
//!
//! Boxes are corner-form `(x_min, y_min, x_max, y_max)` in continuous pixel
//! coordinates; the right and bottom edges are exclusive, so a box covering
//! pixels `0..10` has `x_max = 10` and width 10.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    /// Builds a box, rejecting non-finite coordinates and empty extents.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BoundingBox { x_min, y_min, x_max, y_max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite coordinate in {self:?}")));
        }
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::InvalidBox(format!("empty extent in {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoundingBox {
            x_min: cx - 0.5 * w,
            y_min: cy - 0.5 * h,
            x_max: cx + 0.5 * w,
            y_max: cy + 0.5 * h,
        }
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clips to `[0, width) x [0, height)`. Returns `None` when nothing of
    /// the box remains inside the image or the remainder is thinner than
    /// `min_size` pixels.
    pub fn clip(&self, width: f64, height: f64, min_size: f64) -> Option<BoundingBox> {
        let b = BoundingBox {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        };
        if b.width() > min_size.max(0.0) && b.height() > min_size.max(0.0) {
            Some(b)
        } else {
            None
        }
    }

    pub fn is_inside(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Largest IoU between `b` and any box in `others` (0 for an empty set).
pub fn max_iou(b: &BoundingBox, others: &[BoundingBox]) -> f64 {
    others.iter().map(|o| iou(b, o)).fold(0.0, f64::max)
}

/// Regression target in the center-offset / log-size parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        BoxDelta { dx: v[0], dy: v[1], dw: v[2], dh: v[3] }
    }
}

pub fn encode_delta(anchor: &BoundingBox, target: &BoundingBox) -> BoxDelta {
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    BoxDelta {
        dx: (tcx - acx) / aw,
        dy: (tcy - acy) / ah,
        dw: (target.width() / aw).ln(),
        dh: (target.height() / ah).ln(),
    }
}

/// Upper bound on decoded log-size ratios; keeps `exp` finite for wild
/// predictions from an untrained regressor.
const MAX_LOG_RATIO: f64 = 8.0;

pub fn decode_delta(anchor: &BoundingBox, delta: &BoxDelta) -> BoundingBox {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + delta.dx * aw;
    let cy = acy + delta.dy * ah;
    let w = aw * delta.dw.min(MAX_LOG_RATIO).exp();
    let h = ah * delta.dh.min(MAX_LOG_RATIO).exp();
    BoundingBox::from_center(cx, cy, w, h)
}

/// Greedy NMS. Returns indices into `dets`, highest score first. Equal
/// scores keep their input order.
pub fn nms_indices(dets: &[(BoundingBox, f64)], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].1.total_cmp(&dets[i].1));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&dets[k].0, &dets[i].0) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

pub fn nms(dets: &[(BoundingBox, f64)], iou_thresh: f64) -> Vec<(BoundingBox, f64)> {
    nms_indices(dets, iou_thresh).into_iter().map(|i| dets[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    /// Counts covered unit cells on an integer grid; exact for integer boxes.
    fn raster_iou(a: &BoundingBox, b: &BoundingBox, grid: usize) -> f64 {
        let inside = |bb: &BoundingBox, x: usize, y: usize| {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            px > bb.x_min && px < bb.x_max && py > bb.y_min && py < bb.y_max
        };
        let (mut inter, mut union) = (0usize, 0usize);
        for y in 0..grid {
            for x in 0..grid {
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as usize;
                union += (ia || ib) as usize;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_fixed_cases() {
        let b = bx(3.0, 4.0, 9.0, 12.0);
        assert_eq!(iou(&b, &b), 1.0);
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        let (a, c) = (bx(0.0, 0.0, 10.0, 10.0), bx(5.0, 0.0, 15.0, 10.0));
        let oracle = raster_iou(&a, &c, 30);
        assert!((oracle - 1.0 / 3.0).abs() < 1e-12);
        assert!((iou(&a, &c) - 0.33333).abs() < 1e-5);
        assert!((iou(&a, &c) - oracle).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BoundingBox::new(1.0, 1.0, 1.0, 2.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
        assert!(BoundingBox::new(0.0, 3.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn delta_fixed_cases() {
        let b = bx(2.0, 3.0, 7.0, 11.0);
        assert_eq!(encode_delta(&b, &b), BoxDelta::default());
        assert_eq!(decode_delta(&b, &BoxDelta::default()), b);

        let anchor = bx(0.0, 0.0, 10.0, 10.0);
        let d = encode_delta(&anchor, &bx(5.0, 5.0, 15.0, 15.0));
        assert_eq!(d, BoxDelta { dx: 0.5, dy: 0.5, dw: 0.0, dh: 0.0 });

        let ln2 = std::f64::consts::LN_2;
        let out = decode_delta(&anchor, &BoxDelta { dx: 0.0, dy: 0.0, dw: ln2, dh: ln2 });
        let expect = bx(-5.0, -5.0, 15.0, 15.0);
        for (u, v) in [(out.x_min, expect.x_min), (out.y_min, expect.y_min), (out.x_max, expect.x_max), (out.y_max, expect.y_max)] {
            assert!((u - v).abs() < 1e-12);
        }
        let back = encode_delta(&anchor, &out);
        assert!((back.dw - ln2).abs() < 1e-12 && back.dx.abs() < 1e-12);
    }

    #[test]
    fn clip_drops_outside_boxes() {
        let b = bx(-5.0, -5.0, 10.0, 70.0);
        assert_eq!(b.clip(64.0, 64.0, 0.0), Some(bx(0.0, 0.0, 10.0, 64.0)));
        assert_eq!(bx(70.0, 0.0, 80.0, 5.0).clip(64.0, 64.0, 0.0), None);
    }

    #[test]
    fn nms_fixed_cases() {
        assert!(nms(&[], 0.5).is_empty());
        let b = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[(b, 0.3)], 0.5), vec![(b, 0.3)]);
        assert_eq!(nms(&[(b, 0.8), (b, 0.9)], 0.5), vec![(b, 0.9)]);
    }

    /// Exhaustive oracle: a candidate survives iff no earlier survivor (in
    /// score order) overlaps it; evaluated by explicit recursion over the
    /// suppression chain rather than by a single forward pass.
    fn nms_oracle(dets: &[(BoundingBox, f64)], thresh: f64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&i, &j| dets[j].1.total_cmp(&dets[i].1));
        fn survives(pos: usize, order: &[usize], dets: &[(BoundingBox, f64)], t: f64) -> bool {
            (0..pos).all(|p| {
                !(survives(p, order, dets, t) && iou(&dets[order[p]].0, &dets[order[pos]].0) > t)
            })
        }
        (0..order.len())
            .filter(|&p| survives(p, &order, dets, thresh))
            .map(|p| order[p])
            .collect()
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..50.0f64, 0.0..50.0f64, 0.5..30.0f64, 0.5..30.0f64)
            .prop_map(|(x, y, w, h)| BoundingBox { x_min: x, y_min: y, x_max: x + w, y_max: y + h })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let (ab, ba) = (iou(&a, &b), iou(&b, &a));
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            if a != b {
                prop_assert!(ab < 1.0);
            }
        }

        #[test]
        fn delta_roundtrip(a in arb_box(), b in arb_box()) {
            let back = decode_delta(&a, &encode_delta(&a, &b));
            prop_assert!((back.x_min - b.x_min).abs() < 1e-9);
            prop_assert!((back.y_min - b.y_min).abs() < 1e-9);
            prop_assert!((back.x_max - b.x_max).abs() < 1e-9);
            prop_assert!((back.y_max - b.y_max).abs() < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn nms_matches_oracle(dets in prop::collection::vec((arb_box(), 0.0..1.0f64), 5)) {
            let got = nms_indices(&dets, 0.5);
            prop_assert_eq!(&got, &nms_oracle(&dets, 0.5));
            for (i, &a) in got.iter().enumerate() {
                for &b in &got[i + 1..] {
                    prop_assert!(iou(&dets[a].0, &dets[b].0) <= 0.5);
                    prop_assert!(dets[a].1 >= dets[b].1);
                }
            }
        }
    }
}
