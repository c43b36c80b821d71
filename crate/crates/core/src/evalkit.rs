//! Detection metrics: per-category average precision, CorLoc, candidate
//! recall, and binary precision/recall/F1 for similarity predictions.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::synthdata::LabeledBox;

pub const DEFAULT_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BoundingBox,
    pub category: usize,
    pub confidence: f64,
}

/// How the precision/recall curve is integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMode {
    /// Every-point interpolation (area under the monotone envelope).
    #[default]
    Area,
    /// Mean of the interpolated precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

/// Ground truth keyed by image id.
pub type GtIndex = BTreeMap<String, Vec<LabeledBox>>;

pub fn gt_index<'a>(records: impl IntoIterator<Item = (&'a str, &'a [LabeledBox])>) -> GtIndex {
    records.into_iter().map(|(id, b)| (id.to_string(), b.to_vec())).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// True-positive flag per detection, in ranked order.
    pub tp: Vec<bool>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub n_gt: usize,
}

/// Ranks by confidence (stable, so ties keep input order) and matches
/// greedily: each detection takes the highest-IoU ground truth in its image;
/// it is a hit when that IoU reaches `iou_thresh` and the box is still free.
pub fn match_detections(dets: &[&Detection], gts: &BTreeMap<&str, Vec<BoundingBox>>, iou_thresh: f64) -> PrCurve {
    let n_gt: usize = gts.values().map(Vec::len).sum();
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut used: BTreeMap<&str, Vec<bool>> = gts.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
    let mut tp = Vec::with_capacity(dets.len());
    for &i in &order {
        let d = dets[i];
        let hit = match gts.get(d.image_id.as_str()) {
            Some(boxes) if !boxes.is_empty() => {
                let (best, best_iou) = boxes
                    .iter()
                    .enumerate()
                    .map(|(j, g)| (j, iou(&d.bbox, g)))
                    .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
                let flags = used.get_mut(d.image_id.as_str()).expect("flags exist for every gt image");
                if best_iou >= iou_thresh && !flags[best] {
                    flags[best] = true;
                    true
                } else {
                    false
                }
            }
            _ => false,
        };
        tp.push(hit);
    }
    let (mut ctp, mut cfp) = (0usize, 0usize);
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    for &t in &tp {
        if t {
            ctp += 1;
        } else {
            cfp += 1;
        }
        precision.push(ctp as f64 / (ctp + cfp) as f64);
        recall.push(if n_gt == 0 { 0.0 } else { ctp as f64 / n_gt as f64 });
    }
    PrCurve { tp, precision, recall, n_gt }
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Area AP as one correctly rounded division: every interpolated precision
/// is a fraction `tp / rank`, so the sum has an integer numerator over the
/// lcm of ranks. `None` when that lcm gets too large for an exact `f64`.
fn area_exact(tp: &[bool], n_gt: usize) -> Option<f64> {
    const EXACT: u128 = 1 << 53;
    let mut env: Vec<(u128, u128)> = Vec::with_capacity(tp.len());
    let mut ctp = 0u128;
    for (j, &t) in tp.iter().enumerate() {
        ctp += t as u128;
        env.push((ctp, j as u128 + 1));
    }
    for i in (0..env.len().saturating_sub(1)).rev() {
        let (a, b) = (env[i], env[i + 1]);
        if b.0 * a.1 > a.0 * b.1 {
            env[i] = b;
        }
    }
    let mut lcm = 1u128;
    for (&t, &(_, d)) in tp.iter().zip(&env) {
        if t {
            lcm = lcm / gcd(lcm, d) * d;
            if lcm >= EXACT {
                return None;
            }
        }
    }
    let num: u128 = tp.iter().zip(&env).filter(|(t, _)| **t).map(|(_, &(n, d))| n * (lcm / d)).sum();
    let den = lcm * n_gt as u128;
    (num < EXACT && den < EXACT).then(|| num as f64 / den as f64)
}

fn integrate(curve: &PrCurve, mode: ApMode) -> f64 {
    match mode {
        ApMode::Area => {
            if let Some(ap) = area_exact(&curve.tp, curve.n_gt) {
                return ap;
            }
            let mut mpre = curve.precision.clone();
            for i in (0..mpre.len().saturating_sub(1)).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            let mut ap = 0.0;
            let mut prev_r = 0.0;
            for (r, p) in curve.recall.iter().zip(&mpre) {
                if *r > prev_r {
                    ap += (r - prev_r) * p;
                    prev_r = *r;
                }
            }
            ap
        }
        ApMode::ElevenPoint => {
            let mut total = 0.0;
            for k in 0..=10 {
                let t = k as f64 / 10.0;
                let best = curve
                    .recall
                    .iter()
                    .zip(&curve.precision)
                    .filter(|(r, _)| **r >= t - 1e-12)
                    .map(|(_, p)| *p)
                    .fold(0.0, f64::max);
                total += best;
            }
            total / 11.0
        }
    }
}

/// AP for one category; `None` when the category has no ground truth.
pub fn average_precision(dets: &[&Detection], gts: &BTreeMap<&str, Vec<BoundingBox>>, iou_thresh: f64, mode: ApMode) -> Option<f64> {
    let curve = match_detections(dets, gts, iou_thresh);
    (curve.n_gt > 0).then(|| integrate(&curve, mode))
}

fn boxes_of<'a>(gts: &'a GtIndex, category: usize) -> BTreeMap<&'a str, Vec<BoundingBox>> {
    gts.iter()
        .filter_map(|(id, boxes)| {
            let b: Vec<BoundingBox> = boxes.iter().filter(|b| b.category == category).map(|b| b.bbox).collect();
            (!b.is_empty()).then_some((id.as_str(), b))
        })
        .collect()
}

/// CorLoc for one category: over images containing it, the fraction whose
/// single most confident detection of that category hits a ground-truth box.
/// Ties keep input order. `None` when no image contains the category.
pub fn corloc(dets: &[&Detection], gts: &BTreeMap<&str, Vec<BoundingBox>>, iou_thresh: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut top: BTreeMap<&str, &Detection> = BTreeMap::new();
    for d in dets {
        match top.get(d.image_id.as_str()) {
            Some(cur) if cur.confidence >= d.confidence => {}
            _ => {
                top.insert(d.image_id.as_str(), d);
            }
        }
    }
    let hits = gts
        .iter()
        .filter(|(id, boxes)| top.get(*id).is_some_and(|d| boxes.iter().any(|g| iou(&d.bbox, g) >= iou_thresh)))
        .count();
    Some(hits as f64 / gts.len() as f64)
}

/// Fraction of ground-truth boxes covered by at least one candidate
/// (class-agnostic). `None` when there is no ground truth.
pub fn candidate_recall(candidates: &BTreeMap<String, Vec<BoundingBox>>, gts: &GtIndex, iou_thresh: f64) -> Option<f64> {
    let mut total = 0usize;
    let mut covered = 0usize;
    for (id, boxes) in gts {
        let cands = candidates.get(id).map(Vec::as_slice).unwrap_or(&[]);
        for g in boxes {
            total += 1;
            if cands.iter().any(|c| iou(c, &g.bbox) >= iou_thresh) {
                covered += 1;
            }
        }
    }
    (total > 0).then(|| covered as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: usize,
    pub name: String,
    pub ap: Option<f64>,
    pub corloc: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub ap_mode: ApMode,
    pub categories: Vec<CategoryReport>,
    /// Unweighted mean over categories with a defined AP.
    pub map: f64,
    pub mean_corloc: Option<f64>,
    pub candidate_recall: Option<f64>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Evaluates detections for `categories` (id, name). CorLoc is computed
/// only when `corloc_gts` is supplied.
pub fn evaluate(
    split: &str,
    categories: &[(usize, String)],
    dets: &[Detection],
    gts: &GtIndex,
    corloc_input: Option<(&[Detection], &GtIndex)>,
    mode: ApMode,
) -> EvalReport {
    let mut rows = Vec::new();
    for (c, name) in categories {
        let cdets: Vec<&Detection> = dets.iter().filter(|d| d.category == *c).collect();
        let cgts = boxes_of(gts, *c);
        let curve = match_detections(&cdets, &cgts, DEFAULT_IOU);
        let tp = curve.tp.iter().filter(|t| **t).count();
        let ap = (curve.n_gt > 0).then(|| integrate(&curve, mode));
        let corloc = corloc_input.and_then(|(cd, cg)| {
            let cd: Vec<&Detection> = cd.iter().filter(|d| d.category == *c).collect();
            corloc(&cd, &boxes_of(cg, *c), DEFAULT_IOU)
        });
        rows.push(CategoryReport { category: *c, name: name.clone(), ap, corloc, tp, fp: curve.tp.len() - tp, fn_: curve.n_gt - tp });
    }
    let map = mean_defined(rows.iter().map(|r| r.ap)).unwrap_or(0.0);
    let mean_corloc = mean_defined(rows.iter().map(|r| r.corloc));
    EvalReport { split: split.to_string(), ap_mode: mode, categories: rows, map, mean_corloc, candidate_recall: None }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl EvalReport {
    /// One row per category followed by a `mean` summary row.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["category", "name", "ap", "corloc", "tp", "fp", "fn"]).expect("in-memory write");
        for r in &self.categories {
            w.write_record([r.category.to_string(), r.name.clone(), opt(r.ap), opt(r.corloc), r.tp.to_string(), r.fp.to_string(), r.fn_.to_string()])
                .expect("in-memory write");
        }
        let (tp, fp, fn_) = self.categories.iter().fold((0, 0, 0), |a, r| (a.0 + r.tp, a.1 + r.fp, a.2 + r.fn_));
        w.write_record(["mean".into(), String::new(), format!("{:.6}", self.map), opt(self.mean_corloc), tp.to_string(), fp.to_string(), fn_.to_string()])
            .expect("in-memory write");
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        crate::synthdata::write_json(json_path, self)
    }
}

/// One point of the per-iteration training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub map: f64,
    pub corloc: f64,
    pub candidate_recall: f64,
}

pub fn curve_csv(points: &[IterationMetrics]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iteration", "mAP", "corloc", "candidate_recall"]).expect("in-memory write");
    for p in points {
        w.write_record([p.iteration.to_string(), format!("{:.6}", p.map), format!("{:.6}", p.corloc), format!("{:.6}", p.candidate_recall)])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Counts for a binary "same category" decision.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BinaryCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl BinaryCounts {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &BinaryCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// Zero denominators yield zero rather than NaN.
    pub fn metrics(&self) -> BinaryMetrics {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        BinaryMetrics { precision, recall, f1 }
    }
}
