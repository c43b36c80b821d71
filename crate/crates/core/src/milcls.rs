//! Two-branch multiple-instance classifier over candidate regions and
//! pseudo-box mining from its scores.
//!
//! Score matrices are stored one row per region (`[N, C_n]`, row-major).
//! The classification branch is normalised across categories within each
//! row and the detection branch across regions within each column.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, nms_indices, BoundingBox};
use crate::nn::{bce, CustomOp, Linear, ParamStore, Tape, Tensor, Var};
use crate::synthdata::ManifestBox;

pub const MINING_THRESH: f64 = 0.8;
/// Mined label must reach this fraction of the image's best score.
pub const IMAGE_GATE: f64 = 0.5;
pub const MINING_NMS: f64 = 0.3;
pub const SOURCE_IOU_FILTER: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct MilHead {
    pub cls: [Linear; 2],
    pub det: [Linear; 2],
    pub categories: usize,
}

impl MilHead {
    pub fn new<R: Rng>(store: &mut ParamStore, in_dim: usize, hidden: usize, categories: usize, rng: &mut R) -> Self {
        MilHead {
            cls: [Linear::new(store, "mil.cls1", in_dim, hidden, rng), Linear::new_small(store, "mil.cls2", hidden, categories, 0.01, rng)],
            det: [Linear::new(store, "mil.det1", in_dim, hidden, rng), Linear::new_small(store, "mil.det2", hidden, categories, 0.01, rng)],
            categories,
        }
    }

    /// Raw branch outputs `(S_r, S_d)`, each `[R, C_n]`.
    pub fn branches(&self, tape: &mut Tape, store: &ParamStore, feats: Var) -> (Var, Var) {
        let run = |layers: &[Linear; 2], tape: &mut Tape| {
            let h = layers[0].forward(tape, store, feats);
            let h = tape.relu(h);
            layers[1].forward(tape, store, h)
        };
        let sr = run(&self.cls, tape);
        let sd = run(&self.det, tape);
        (sr, sd)
    }
}

/// Plain-value scores of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct MilScores {
    pub n: usize,
    pub categories: usize,
    pub s_r: Vec<f64>,
    pub s_d: Vec<f64>,
    pub s_r_norm: Vec<f64>,
    pub s_d_norm: Vec<f64>,
    pub s_fused: Vec<f64>,
    pub y_mil: Vec<f64>,
}

fn normalise(sr: &[f64], sd: &[f64], n: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = vec![0.0; n * c];
    for i in 0..n {
        let row = &sr[i * c..(i + 1) * c];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        for k in 0..c {
            a[i * c + k] = (row[k] - mx).exp() / z;
        }
    }
    let mut b = vec![0.0; n * c];
    for k in 0..c {
        let mx = (0..n).map(|i| sd[i * c + k]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n).map(|i| (sd[i * c + k] - mx).exp()).sum();
        for i in 0..n {
            b[i * c + k] = (sd[i * c + k] - mx).exp() / z;
        }
    }
    (a, b)
}

fn fuse(a: &[f64], b: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut y = vec![0.0; c];
    for i in 0..n {
        for k in 0..c {
            y[k] += a[i * c + k] * b[i * c + k];
        }
    }
    // A sum of products of probabilities can round a hair above 1.
    y.iter_mut().for_each(|v| *v = v.min(1.0));
    y
}

pub fn mil_scores(s_r: Vec<f64>, s_d: Vec<f64>, categories: usize) -> Result<MilScores> {
    if s_r.is_empty() || categories == 0 {
        return Err(Error::EmptyCandidates);
    }
    if s_r.len() != s_d.len() || s_r.len() % categories != 0 {
        return Err(Error::Shape(format!("branch outputs of {} and {} values for {categories} categories", s_r.len(), s_d.len())));
    }
    let n = s_r.len() / categories;
    let (a, b) = normalise(&s_r, &s_d, n, categories);
    let s_fused: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    let y_mil = fuse(&a, &b, n, categories);
    Ok(MilScores { n, categories, s_r, s_d, s_r_norm: a, s_d_norm: b, s_fused, y_mil })
}

/// `sum_c BCE(y_c, t_c)` with clamped logs.
pub fn mil_loss(y_mil: &[f64], labels: &[f64]) -> f64 {
    y_mil.iter().zip(labels).map(|(&y, &t)| bce(y, t)).sum()
}

/// Fuses branch outputs of several images (row ranges) into `[images, C_n]`
/// image-level scores.
struct MilFuse {
    segments: Vec<(usize, usize)>,
    c: usize,
}

impl CustomOp for MilFuse {
    fn name(&self) -> &'static str {
        "mil_fuse"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let c = self.c;
        let (sr, sd) = (inputs[0].data(), inputs[1].data());
        let mut gr = Tensor::zeros(inputs[0].shape());
        let mut gd = Tensor::zeros(inputs[1].shape());
        for (img, &(lo, hi)) in self.segments.iter().enumerate() {
            let n = hi - lo;
            let (a, b) = normalise(&sr[lo * c..hi * c], &sd[lo * c..hi * c], n, c);
            let g = &grad.data()[img * c..(img + 1) * c];
            for i in 0..n {
                // d/dS_r through the row softmax with upstream g_k * b_ik.
                let dot: f64 = (0..c).map(|k| a[i * c + k] * g[k] * b[i * c + k]).sum();
                for k in 0..c {
                    gr.data_mut()[(lo + i) * c + k] = a[i * c + k] * (g[k] * b[i * c + k] - dot);
                }
            }
            for k in 0..c {
                let dot: f64 = (0..n).map(|i| b[i * c + k] * g[k] * a[i * c + k]).sum();
                for i in 0..n {
                    gd.data_mut()[(lo + i) * c + k] = b[i * c + k] * (g[k] * a[i * c + k] - dot);
                }
            }
        }
        vec![Some(gr), Some(gd)]
    }
}

/// Image-level scores `[images, C_n]` from `[R, C_n]` branch outputs, where
/// image `i` owns rows `segments[i].0..segments[i].1`.
pub fn mil_fuse(tape: &mut Tape, sr: Var, sd: Var, segments: &[(usize, usize)]) -> Result<Var> {
    let c = tape.value(sr).shape()[1];
    let mut out = Vec::with_capacity(segments.len() * c);
    for &(lo, hi) in segments {
        if hi <= lo {
            return Err(Error::EmptyCandidates);
        }
        let (a, b) = normalise(&tape.value(sr).data()[lo * c..hi * c], &tape.value(sd).data()[lo * c..hi * c], hi - lo, c);
        out.extend(fuse(&a, &b, hi - lo, c));
    }
    let value = Tensor::from_vec(&[segments.len(), c], out)?;
    Ok(tape.custom(Box::new(MilFuse { segments: segments.to_vec(), c }), vec![sr, sd], value))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoBox {
    pub bbox: BoundingBox,
    /// Novel category id.
    pub pseudo_label: usize,
    pub mining_score: f64,
    pub weight: f64,
}

impl PseudoBox {
    pub fn to_manifest_box(&self) -> ManifestBox {
        ManifestBox {
            x_min: self.bbox.x_min,
            y_min: self.bbox.y_min,
            x_max: self.bbox.x_max,
            y_max: self.bbox.y_max,
            category: self.pseudo_label,
            pseudo: Some(true),
            mining_score: Some(self.mining_score),
            weight: Some(self.weight),
        }
    }
}

/// Candidate `i` survives when `max_c S_r_norm[i, c] >= thresh` and the
/// image score of that category is at least half the image's best; labels
/// map local category indices to ids. Survivors go through per-category NMS.
/// Returns candidate indices with their pseudo boxes, best first per category.
pub fn mine_pseudo_boxes(scores: &MilScores, boxes: &[BoundingBox], labels: &[usize], thresh: f64) -> Vec<(usize, PseudoBox)> {
    let c = scores.categories;
    let best_image = scores.y_mil.iter().copied().fold(0.0, f64::max);
    let mut per_cat: Vec<Vec<(usize, f64)>> = vec![Vec::new(); c];
    for i in 0..scores.n {
        let row = &scores.s_r_norm[i * c..(i + 1) * c];
        let (k, &s) = row.iter().enumerate().fold((0, &f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        if s >= thresh && scores.y_mil[k] > IMAGE_GATE * best_image {
            per_cat[k].push((i, s));
        }
    }
    let mut out = Vec::new();
    for (k, list) in per_cat.iter().enumerate() {
        let dets: Vec<(BoundingBox, f64)> = list.iter().map(|&(i, s)| (boxes[i], s)).collect();
        for j in nms_indices(&dets, MINING_NMS) {
            let (i, s) = list[j];
            out.push((i, PseudoBox { bbox: boxes[i], pseudo_label: labels[k], mining_score: s, weight: 1.0 }));
        }
    }
    out
}

/// Drops pseudo boxes overlapping any base ground truth by IoU > `thresh`.
pub fn filter_source_pseudo<T: Clone>(pseudo: &[(T, PseudoBox)], base_gt: &[BoundingBox], thresh: f64) -> Vec<(T, PseudoBox)> {
    pseudo.iter().filter(|(_, p)| base_gt.iter().all(|g| iou(&p.bbox, g) <= thresh)).cloned().collect()
}
