//! Detection network: a four-block convolutional backbone, an anchor-based
//! proposal stage, RoI-align region features and a two-output detection
//! head (objectness and box deltas).

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{decode_delta, encode_delta, iou, nms_indices, BoundingBox, BoxDelta};
use crate::nn::{bce, smooth_l1, Conv2d, CustomOp, Linear, ParamStore, Tape, Tensor, Var};

/// Where the coarse mask joins the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MaskAttach {
    /// Concatenated to the final feature map.
    #[default]
    #[serde(rename = "b-1")]
    BMinus1,
    /// Concatenated to the penultimate map; the last block consumes it.
    #[serde(rename = "b-2")]
    BMinus2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetNetConfig {
    pub image_size: usize,
    pub widths: [usize; 4],
    /// Channels of the attached mask (C + 1), or 0 without a mask.
    pub mask_channels: usize,
    pub attach: MaskAttach,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    pub rpn_nms: f64,
    pub proposals_per_image: usize,
    pub roi_grid: usize,
    pub roi_pool: usize,
    pub region_dim: usize,
}

impl Default for DetNetConfig {
    fn default() -> Self {
        DetNetConfig {
            image_size: 64,
            widths: [16, 32, 32, 32],
            mask_channels: 0,
            attach: MaskAttach::BMinus1,
            anchor_scales: vec![12.0, 18.0, 26.0],
            anchor_ratios: vec![0.75, 1.33],
            rpn_nms: 0.7,
            proposals_per_image: 64,
            roi_grid: 4,
            roi_pool: 2,
            region_dim: 128,
        }
    }
}

pub const STRIDE: usize = 8;
/// Positive-match IoU for objectness targets.
pub const POS_IOU: f64 = 0.5;
/// Anchors below this IoU with every box are RPN negatives.
pub const RPN_NEG_IOU: f64 = 0.3;
pub const CANDIDATE_THRESH: f64 = 0.05;
/// Regression targets are multiplied by these before the loss.
pub const DELTA_SCALE: [f64; 4] = [10.0, 10.0, 5.0, 5.0];
const MIN_BOX: f64 = 2.0;

impl DetNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % STRIDE != 0 {
            return Err(Error::config("image_size", format!("must be a positive multiple of {STRIDE}")));
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return Err(Error::config("anchor_scales", "need at least one scale and one ratio"));
        }
        if self.roi_grid == 0 || self.roi_pool == 0 || self.roi_grid % self.roi_pool != 0 {
            return Err(Error::config("roi_pool", "must divide roi_grid"));
        }
        Ok(())
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / STRIDE
    }

    /// Channels of the map the RPN and RoI align read.
    pub fn head_channels(&self) -> usize {
        match self.attach {
            MaskAttach::BMinus1 => self.widths[3] + self.mask_channels,
            MaskAttach::BMinus2 => self.widths[3],
        }
    }

    pub fn pooled_dim(&self) -> usize {
        let cells = self.roi_grid / self.roi_pool;
        self.head_channels() * cells * cells
    }
}

/// Anchor boxes in `(a, y, x)` order, matching the RPN output layout.
pub fn anchor_grid(cfg: &DetNetConfig) -> Vec<BoundingBox> {
    let f = cfg.feature_size();
    let mut shapes = Vec::new();
    for &s in &cfg.anchor_scales {
        for &r in &cfg.anchor_ratios {
            shapes.push((s / r.sqrt(), s * r.sqrt()));
        }
    }
    let mut out = Vec::with_capacity(shapes.len() * f * f);
    for &(w, h) in &shapes {
        for y in 0..f {
            for x in 0..f {
                let c = ((x as f64 + 0.5) * STRIDE as f64, (y as f64 + 0.5) * STRIDE as f64);
                out.push(BoundingBox::from_center(c.0, c.1, w, h));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub rpn_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateBox {
    pub bbox: BoundingBox,
    pub objectness: f64,
    pub region_feature: Vec<f64>,
}

/// Objectness label and regression target of one region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalTarget {
    pub label: bool,
    /// Index of the matched supervision box, for positives.
    pub matched: Option<usize>,
    pub delta: Option<BoxDelta>,
}

/// Box supervising objectness, with its denoising weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupervisionBox {
    pub bbox: BoundingBox,
    pub weight: f64,
}

/// `label = max IoU >= pos_iou`; positives regress toward the box with the
/// highest IoU (first on ties).
pub fn assign_targets(rois: &[BoundingBox], gts: &[BoundingBox], pos_iou: f64) -> Vec<ProposalTarget> {
    rois.iter()
        .map(|r| {
            let best = gts.iter().enumerate().map(|(j, g)| (j, iou(r, g))).fold(None::<(usize, f64)>, |acc, x| match acc {
                Some(a) if a.1 >= x.1 => Some(a),
                _ => Some(x),
            });
            match best {
                Some((j, v)) if v >= pos_iou => ProposalTarget { label: true, matched: Some(j), delta: Some(encode_delta(r, &gts[j])) },
                _ => ProposalTarget { label: false, matched: None, delta: None },
            }
        })
        .collect()
}

/// Scalar reference form of the weighted detection loss: summed weighted BCE over all
/// regions and weighted smooth-L1 (beta 1) over positives. Predicted deltas
/// live in the scaled space of [`DELTA_SCALE`].
pub fn detection_loss(objectness: &[f64], deltas: &[[f64; 4]], targets: &[ProposalTarget], weights: &[f64]) -> Result<(f64, f64)> {
    let n = objectness.len();
    if deltas.len() != n || targets.len() != n || weights.len() != n {
        return Err(Error::Shape(format!(
            "detection_loss lengths differ: {n} objectness, {} deltas, {} targets, {} weights",
            deltas.len(),
            targets.len(),
            weights.len()
        )));
    }
    let mut l_obj = 0.0;
    let mut l_reg = 0.0;
    for i in 0..n {
        let t = &targets[i];
        l_obj += weights[i] * bce(objectness[i], if t.label { 1.0 } else { 0.0 });
        if let (true, Some(d)) = (t.label, t.delta) {
            let tgt = scaled(&d);
            l_reg += weights[i] * (0..4).map(|k| smooth_l1(deltas[i][k] - tgt[k], 1.0)).sum::<f64>();
        }
    }
    Ok((l_obj, l_reg))
}

pub fn scaled(d: &BoxDelta) -> [f64; 4] {
    let a = d.to_array();
    [a[0] * DELTA_SCALE[0], a[1] * DELTA_SCALE[1], a[2] * DELTA_SCALE[2], a[3] * DELTA_SCALE[3]]
}

pub fn unscaled(v: &[f64]) -> BoxDelta {
    BoxDelta::from_slice(&[v[0] / DELTA_SCALE[0], v[1] / DELTA_SCALE[1], v[2] / DELTA_SCALE[2], v[3] / DELTA_SCALE[3]])
}

/// Keeps regions whose objectness reaches the (inclusive) threshold.
pub fn filter_candidates(boxes: &[BoundingBox], objectness: &[f64], features: &[Vec<f64>], thresh: f64) -> Vec<CandidateBox> {
    boxes
        .iter()
        .zip(objectness)
        .zip(features)
        .filter(|((_, &o), _)| o >= thresh)
        .map(|((b, &o), f)| CandidateBox { bbox: *b, objectness: o, region_feature: f.clone() })
        .collect()
}

/// Splits `(positives, negatives)` index lists down to at most `max_pos`
/// positives and `neg_ratio` negatives per positive (one positive assumed
/// when there are none).
pub fn sample_regions<R: Rng>(mut pos: Vec<usize>, mut neg: Vec<usize>, max_pos: usize, neg_ratio: usize, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    pos.shuffle(rng);
    pos.truncate(max_pos);
    neg.shuffle(rng);
    neg.truncate(neg_ratio * pos.len().max(1));
    pos.sort_unstable();
    neg.sort_unstable();
    (pos, neg)
}

/// Bilinear sampling of feature maps at fixed points per output cell; the
/// output is linear in the input map so the backward pass scatters the same
/// weights.
struct RoiAlignOp {
    in_shape: [usize; 4],
    /// Image index per region.
    images: Vec<usize>,
    /// Per (region, cell): `(spatial index, weight)` taps.
    taps: Vec<Vec<(usize, f64)>>,
    cells: usize,
}

impl RoiAlignOp {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let [_, c, h, w] = self.in_shape;
        let hw = h * w;
        let r = self.images.len();
        let mut out = vec![0.0; r * c * self.cells];
        for (ri, &img) in self.images.iter().enumerate() {
            for ch in 0..c {
                let plane = &x[(img * c + ch) * hw..][..hw];
                for cell in 0..self.cells {
                    out[(ri * c + ch) * self.cells + cell] = self.taps[ri * self.cells + cell].iter().map(|&(i, wt)| wt * plane[i]).sum();
                }
            }
        }
        out
    }
}

impl CustomOp for RoiAlignOp {
    fn name(&self) -> &'static str {
        "roi_align"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let [_, c, h, w] = self.in_shape;
        let hw = h * w;
        let mut gx = Tensor::zeros(&self.in_shape);
        let g = grad.data();
        let gxd = gx.data_mut();
        for (ri, &img) in self.images.iter().enumerate() {
            for ch in 0..c {
                let plane = &mut gxd[(img * c + ch) * hw..][..hw];
                for cell in 0..self.cells {
                    let gv = g[(ri * c + ch) * self.cells + cell];
                    for &(i, wt) in &self.taps[ri * self.cells + cell] {
                        plane[i] += wt * gv;
                    }
                }
            }
        }
        vec![Some(gx)]
    }
}

fn bilinear_taps(fx: f64, fy: f64, w: usize, h: usize, scale: f64, out: &mut Vec<(usize, f64)>) {
    let fx = fx.clamp(0.0, (w - 1) as f64);
    let fy = fy.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
    for (yy, wy) in [(y0, 1.0 - ay), (y1, ay)] {
        for (xx, wx) in [(x0, 1.0 - ax), (x1, ax)] {
            let wt = scale * wx * wy;
            if wt != 0.0 {
                out.push((yy * w + xx, wt));
            }
        }
    }
}

/// RoI align over `fm` (`[N, C, H, W]`): each region is divided into a
/// `grid x grid` lattice sampled bilinearly at bin centres, then averaged over
/// `pool x pool` blocks. Output is `[R, C * (grid / pool)^2]`, channel-major.
pub fn roi_align(tape: &mut Tape, fm: Var, stride: usize, rois: &[(usize, BoundingBox)], grid: usize, pool: usize) -> Result<Var> {
    let s = tape.value(fm).shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Shape(format!("roi_align expects NCHW, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let side = grid / pool;
    let cells = side * side;
    let st = stride as f64;
    let mut taps = Vec::with_capacity(rois.len() * cells);
    for (img, b) in rois {
        if *img >= n {
            return Err(Error::Shape(format!("roi image index {img} out of range for batch of {n}")));
        }
        if b.x_max <= 0.0 || b.y_max <= 0.0 || b.x_min >= (w * stride) as f64 || b.y_min >= (h * stride) as f64 {
            return Err(Error::InvalidBox(format!("region {b:?} lies outside the image")));
        }
        let (bw, bh) = (b.width() / grid as f64, b.height() / grid as f64);
        for qy in 0..side {
            for qx in 0..side {
                let mut t = Vec::with_capacity(4 * pool * pool);
                for sy in 0..pool {
                    for sx in 0..pool {
                        let px = b.x_min + ((qx * pool + sx) as f64 + 0.5) * bw;
                        let py = b.y_min + ((qy * pool + sy) as f64 + 0.5) * bh;
                        bilinear_taps(px / st - 0.5, py / st - 0.5, w, h, 1.0 / (pool * pool) as f64, &mut t);
                    }
                }
                taps.push(t);
            }
        }
    }
    let op = RoiAlignOp { in_shape: [n, c, h, w], images: rois.iter().map(|r| r.0).collect(), taps, cells };
    let value = Tensor::from_vec(&[rois.len(), c * cells], op.forward(tape.value(fm).data()))?;
    Ok(tape.custom(Box::new(op), vec![fm], value))
}

/// Bilinear resize of `[N, C, H, W]` to `[N, C, out, out]` (identity when the
/// size already matches).
pub fn resample(tape: &mut Tape, x: Var, out: usize) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    if s[2] == out && s[3] == out {
        return Ok(x);
    }
    let full = BoundingBox { x_min: 0.0, y_min: 0.0, x_max: s[3] as f64, y_max: s[2] as f64 };
    let rois: Vec<(usize, BoundingBox)> = (0..s[0]).map(|i| (i, full)).collect();
    let v = roi_align(tape, x, 1, &rois, out, 1)?;
    Ok(tape.reshape(v, &[s[0], s[1], out, out]))
}

/// Network parameters are owned by a [`ParamStore`]; this struct holds the
/// handles.
#[derive(Debug, Clone)]
pub struct DetNet {
    pub cfg: DetNetConfig,
    pub conv: [Conv2d; 4],
    pub rpn_conv: Conv2d,
    pub rpn_obj: Conv2d,
    pub rpn_delta: Conv2d,
    pub proj: Linear,
    pub head_obj: Linear,
    pub head_delta: Linear,
    pub anchors: Vec<BoundingBox>,
}

/// Tape handles of one forward pass through the backbone.
#[derive(Debug, Clone, Copy)]
pub struct Features {
    /// Penultimate map (input of the mask head).
    pub c3: Var,
    /// Map read by the RPN and region features.
    pub fm: Var,
}

impl DetNet {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: DetNetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let [w1, w2, w3, w4] = cfg.widths;
        let c4_in = match cfg.attach {
            MaskAttach::BMinus1 => w3,
            MaskAttach::BMinus2 => w3 + cfg.mask_channels,
        };
        let conv = [
            Conv2d::new(store, "backbone.conv1", 3, w1, 3, 2, rng),
            Conv2d::new(store, "backbone.conv2", w1, w2, 3, 2, rng),
            Conv2d::new(store, "backbone.conv3", w2, w3, 3, 2, rng),
            Conv2d::new(store, "backbone.conv4", c4_in, w4, 3, 1, rng),
        ];
        let hc = cfg.head_channels();
        let a = cfg.anchors_per_cell();
        let rpn_conv = Conv2d::new(store, "rpn.conv", hc, 32, 3, 1, rng);
        let rpn_obj = Conv2d::new(store, "rpn.obj", 32, a, 1, 1, rng);
        let rpn_delta = Conv2d::new(store, "rpn.delta", 32, 4 * a, 1, 1, rng);
        for id in [rpn_obj.w, rpn_delta.w] {
            *store.get_mut(id) = store.get(id).map(|v| v * 0.1);
        }
        let proj = Linear::new(store, "region.proj", cfg.pooled_dim(), cfg.region_dim, rng);
        let head_obj = Linear::new_small(store, "head.obj", cfg.region_dim, 1, 0.01, rng);
        let head_delta = Linear::new_small(store, "head.delta", cfg.region_dim, 4, 0.001, rng);
        let anchors = anchor_grid(&cfg);
        Ok(DetNet { cfg, conv, rpn_conv, rpn_obj, rpn_delta, proj, head_obj, head_delta, anchors })
    }

    /// Checks the image batch shape: `[N, 3, S, S]` with `S` divisible by the stride.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!("expected [N, 3, H, W] images, got {shape:?}")));
        }
        if shape[2] % STRIDE != 0 || shape[3] % STRIDE != 0 {
            return Err(Error::Shape(format!("image size {}x{} is not divisible by stride {STRIDE}", shape[3], shape[2])));
        }
        if shape[2] != self.cfg.image_size || shape[3] != self.cfg.image_size {
            return Err(Error::Shape(format!("network built for {0}x{0} images, got {1}x{2}", self.cfg.image_size, shape[3], shape[2])));
        }
        Ok(())
    }

    /// First three blocks (stride 8).
    pub fn stem(&self, tape: &mut Tape, store: &ParamStore, images: Var) -> Result<Var> {
        self.check_input(tape.value(images).shape())?;
        let mut x = images;
        for conv in &self.conv[..3] {
            let y = conv.forward(tape, store, x);
            x = tape.relu(y);
        }
        Ok(x)
    }

    /// Last block plus mask attachment. `mask` is the coarse mask at the
    /// penultimate resolution, required iff the network was built with mask
    /// channels.
    pub fn finish(&self, tape: &mut Tape, store: &ParamStore, c3: Var, mask: Option<Var>) -> Result<Var> {
        if mask.is_some() != (self.cfg.mask_channels > 0) {
            return Err(Error::Shape(format!("network expects {} mask channels", self.cfg.mask_channels)));
        }
        if let Some(m) = mask {
            let mc = tape.value(m).shape()[1];
            if mc != self.cfg.mask_channels {
                return Err(Error::Shape(format!("mask has {mc} channels, network expects {}", self.cfg.mask_channels)));
            }
        }
        let f = self.cfg.feature_size();
        match (self.cfg.attach, mask) {
            (MaskAttach::BMinus2, Some(m)) => {
                let m = resample(tape, m, f)?;
                let x = tape.concat_channels(c3, m);
                let y = self.conv[3].forward(tape, store, x);
                Ok(tape.relu(y))
            }
            (_, m) => {
                let y = self.conv[3].forward(tape, store, c3);
                let c4 = tape.relu(y);
                match m {
                    Some(m) => enhance_with_mask(tape, c4, m),
                    None => Ok(c4),
                }
            }
        }
    }

    /// RPN objectness probabilities `[N, A, H, W]` and deltas `[N, 4A, H, W]`.
    pub fn rpn(&self, tape: &mut Tape, store: &ParamStore, fm: Var) -> (Var, Var) {
        let h = self.rpn_conv.forward(tape, store, fm);
        let h = tape.relu(h);
        let logits = self.rpn_obj.forward(tape, store, h);
        let obj = tape.sigmoid(logits);
        let deltas = self.rpn_delta.forward(tape, store, h);
        (obj, deltas)
    }

    /// Decodes, clips and suppresses anchors of image `n` into at most
    /// `proposals_per_image` proposals, best first.
    pub fn proposals(&self, obj: &Tensor, deltas: &Tensor, n: usize) -> Vec<Proposal> {
        let a = self.cfg.anchors_per_cell();
        let f = self.cfg.feature_size();
        let hw = f * f;
        let size = self.cfg.image_size as f64;
        let o = &obj.data()[n * a * hw..(n + 1) * a * hw];
        let d = &deltas.data()[n * 4 * a * hw..(n + 1) * 4 * a * hw];
        let mut dets = Vec::with_capacity(a * hw);
        for ai in 0..a {
            for cell in 0..hw {
                let k = ai * hw + cell;
                let v: Vec<f64> = (0..4).map(|j| d[(ai * 4 + j) * hw + cell]).collect();
                let b = decode_delta(&self.anchors[k], &unscaled(&v));
                if let Some(b) = b.clip(size, size, MIN_BOX) {
                    dets.push((b, o[k]));
                }
            }
        }
        let keep = nms_indices(&dets, self.cfg.rpn_nms);
        keep.into_iter().take(self.cfg.proposals_per_image).map(|i| Proposal { bbox: dets[i].0, rpn_score: dets[i].1 }).collect()
    }

    /// Projected region features `[R, region_dim]` (after ReLU).
    pub fn region_features(&self, tape: &mut Tape, store: &ParamStore, fm: Var, rois: &[(usize, BoundingBox)]) -> Result<Var> {
        let pooled = roi_align(tape, fm, STRIDE, rois, self.cfg.roi_grid, self.cfg.roi_pool)?;
        let h = self.proj.forward(tape, store, pooled);
        Ok(tape.relu(h))
    }

    /// Objectness probabilities `[R, 1]` and scaled deltas `[R, 4]`.
    pub fn head(&self, tape: &mut Tape, store: &ParamStore, feats: Var) -> (Var, Var) {
        let logits = self.head_obj.forward(tape, store, feats);
        let obj = tape.sigmoid(logits);
        let deltas = self.head_delta.forward(tape, store, feats);
        (obj, deltas)
    }

    /// Refines each proposal once with the regressor, scores the refined
    /// boxes, drops those below `thresh`, then removes duplicates with NMS.
    /// Returns candidates per image.
    pub fn candidates(&self, tape: &mut Tape, store: &ParamStore, fm: Var, proposals: &[Vec<Proposal>], thresh: f64, nms_iou: f64) -> Result<Vec<Vec<CandidateBox>>> {
        let size = self.cfg.image_size as f64;
        let rois: Vec<(usize, BoundingBox)> = proposals.iter().enumerate().flat_map(|(n, ps)| ps.iter().map(move |p| (n, p.bbox))).collect();
        let mut out: Vec<Vec<CandidateBox>> = vec![Vec::new(); proposals.len()];
        if rois.is_empty() {
            return Ok(out);
        }
        let feats = self.region_features(tape, store, fm, &rois)?;
        let (_, deltas) = self.head(tape, store, feats);
        let dv = tape.value(deltas).data().to_vec();
        let refined: Vec<(usize, BoundingBox)> = rois
            .iter()
            .enumerate()
            .map(|(i, (n, b))| (*n, decode_delta(b, &unscaled(&dv[i * 4..i * 4 + 4])).clip(size, size, MIN_BOX).unwrap_or(*b)))
            .collect();
        let feats2 = self.region_features(tape, store, fm, &refined)?;
        let (obj2, _) = self.head(tape, store, feats2);
        let ov = tape.value(obj2).data().to_vec();
        let fv = tape.value(feats2).data().to_vec();
        let d = self.cfg.region_dim;
        for (n, bucket) in out.iter_mut().enumerate() {
            let idx: Vec<usize> = (0..refined.len()).filter(|&i| refined[i].0 == n).collect();
            let boxes: Vec<BoundingBox> = idx.iter().map(|&i| refined[i].1).collect();
            let obj: Vec<f64> = idx.iter().map(|&i| ov[i]).collect();
            let feats: Vec<Vec<f64>> = idx.iter().map(|&i| fv[i * d..(i + 1) * d].to_vec()).collect();
            let kept = filter_candidates(&boxes, &obj, &feats, thresh);
            let dets: Vec<(BoundingBox, f64)> = kept.iter().map(|c| (c.bbox, c.objectness)).collect();
            *bucket = nms_indices(&dets, nms_iou).into_iter().map(|i| kept[i].clone()).collect();
        }
        Ok(out)
    }
}

/// Appends the mask channels after the feature channels, resampling the
/// mask to the feature resolution first.
pub fn enhance_with_mask(tape: &mut Tape, fm: Var, mask: Var) -> Result<Var> {
    let s = tape.value(fm).shape().to_vec();
    let m = resample(tape, mask, s[2])?;
    Ok(tape.concat_channels(fm, m))
}

/// RPN targets per anchor: `Some(true)` positive (IoU >= 0.5 or the best
/// anchor of some box), `Some(false)` negative (IoU < 0.3 with all), `None`
/// ignored. Also returns the matched box index of positives.
pub fn rpn_targets(anchors: &[BoundingBox], gts: &[BoundingBox]) -> Vec<(Option<bool>, Option<usize>)> {
    let mut out: Vec<(Option<bool>, Option<usize>)> = Vec::with_capacity(anchors.len());
    let mut best_for_gt = vec![(0usize, -1.0f64); gts.len()];
    for (ai, a) in anchors.iter().enumerate() {
        let mut best = (None, 0.0);
        for (j, g) in gts.iter().enumerate() {
            let v = iou(a, g);
            if v > best.1 {
                best = (Some(j), v);
            }
            if v > best_for_gt[j].1 {
                best_for_gt[j] = (ai, v);
            }
        }
        out.push(if best.1 >= POS_IOU {
            (Some(true), best.0)
        } else if best.1 < RPN_NEG_IOU {
            (Some(false), None)
        } else {
            (None, None)
        });
    }
    for (j, &(ai, v)) in best_for_gt.iter().enumerate() {
        if v > 0.0 && out[ai].0 != Some(true) {
            out[ai] = (Some(true), Some(j));
        }
    }
    out
}
