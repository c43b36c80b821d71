//! Iterative training. Step 1 trains the detector and mask generator on
//! base ground truth plus weighted pseudo boxes; step 2 trains the MIL
//! classifier (with backbone and mask generator) on weakly labeled target
//! images; step 3 mines pseudo boxes and weights them by learned similarity.
//! Iteration 0 runs steps 1 and 2 without pseudo boxes; each of the `T`
//! refinement iterations then mines (step 3) and refines steps 1 and 2.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detnet::{self, rpn_targets, sample_regions, scaled, DetNet, DetNetConfig, MaskAttach, Proposal, STRIDE};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::evalkit::{self, ApMode, BinaryMetrics, Detection, EvalReport, GtIndex, IterationMetrics};
use crate::geometry::{decode_delta, encode_delta, nms_indices, BoundingBox};
use crate::maskgen::{mean_pool, soft_margin_loss, MaskGen, MaskOut};
use crate::milcls::{self, filter_source_pseudo, mil_fuse, mil_scores, mine_pseudo_boxes, MilHead, PseudoBox};
use crate::nn::{softmax, softmax_cross_entropy, Linear, ParamStore, Sgd, Tape, Tensor, Var};
use crate::simnet::{self, assign_weights, cosine_matrix, FeaturePool, SimTrainConfig};
use crate::synthdata::{Corpus, HeldOutBoxes, LabeledBox};

/// How pseudo boxes are weighted in step 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    #[default]
    Simnet,
    Cosine,
    /// Every pseudo box keeps weight 1.
    Uniform,
}

/// Confidence of a detection of novel category `c` from candidate `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// `objectness_i * S_r_norm[i, c] * y_mil[c]`.
    #[default]
    ObjectnessMil,
    /// `S_r_norm[i, c] * S_d_norm[i, c]`, the fused MIL score.
    Fused,
}

/// Named configurations of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Mask prior on the final map plus learned similarity weights.
    Full,
    /// Learned similarity weights without a mask prior.
    NoMask,
    /// Mask prior on the final map, uniform weights.
    NoSim,
    /// Cosine-similarity weights without a mask prior.
    CosineSim,
    /// Mask prior on the penultimate map, uniform weights.
    MaskB2,
    /// Neither mask prior nor weighting.
    Plain,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [Ablation::Full, Ablation::NoMask, Ablation::NoSim, Ablation::CosineSim, Ablation::MaskB2, Ablation::Plain];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoMask => "no-mask",
            Ablation::NoSim => "no-sim",
            Ablation::CosineSim => "cosine-sim",
            Ablation::MaskB2 => "mask-b2",
            Ablation::Plain => "plain",
        }
    }

    pub fn parse(s: &str) -> Option<Ablation> {
        Ablation::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn apply(self, cfg: &mut TrainingConfig) {
        let (mask, attach, weighting) = match self {
            Ablation::Full => (true, MaskAttach::BMinus1, Weighting::Simnet),
            Ablation::NoMask => (false, MaskAttach::BMinus1, Weighting::Simnet),
            Ablation::NoSim => (true, MaskAttach::BMinus1, Weighting::Uniform),
            Ablation::CosineSim => (false, MaskAttach::BMinus1, Weighting::Cosine),
            Ablation::MaskB2 => (true, MaskAttach::BMinus2, Weighting::Uniform),
            Ablation::Plain => (false, MaskAttach::BMinus1, Weighting::Uniform),
        };
        cfg.use_mask = mask;
        cfg.attach = attach;
        cfg.weighting = weighting;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Refinement rounds after the initial steps 1 and 2.
    pub iterations: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub k: usize,
    pub m: usize,
    pub candidate_thresh: f64,
    pub mining_thresh: f64,
    /// Mined boxes also need this detector objectness.
    pub mining_objectness: f64,
    pub source_iou_filter: f64,
    pub attach: MaskAttach,
    pub use_mask: bool,
    pub weighting: Weighting,
    pub score_mode: ScoreMode,
    pub step1_epochs_initial: usize,
    pub step1_epochs: usize,
    pub step2_epochs_initial: usize,
    pub step2_epochs: usize,
    /// Source images drawn per step-1 epoch (all when larger than the split).
    pub source_per_epoch: usize,
    pub simnet_iterations: usize,
    pub simnet_lr: f64,
    pub mask_hidden: usize,
    /// Learning-rate multiplier for the mask generator's own parameters.
    pub mask_lr_mult: f64,
    /// Step-1 epochs, counted from the start, whose mask loss pools with a
    /// plain spatial mean instead of nGWP.
    pub mask_warmup_epochs: usize,
    /// Feed the detector a gradient-free copy of the mask, so the mask head
    /// learns from its own loss only.
    pub mask_detached: bool,
    pub mil_hidden: usize,
    pub rpn_max_pos: usize,
    pub roi_max_pos: usize,
    pub neg_ratio: usize,
    pub candidate_nms: f64,
    pub detection_nms: f64,
    pub max_detections: usize,
    pub distill: bool,
    pub distill_epochs: usize,
    pub mine_base_in_target: bool,
    pub base_mining_thresh: f64,
    pub ap_mode: ApMode,
    pub detnet: DetNetConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            alpha: 0.1,
            beta: 0.1,
            gamma: 1.0,
            iterations: 4,
            lr_initial: 8e-3,
            lr_final: 8e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: 10.0,
            batch_size: 16,
            seed: 222,
            k: 8,
            m: 8,
            candidate_thresh: detnet::CANDIDATE_THRESH,
            mining_thresh: milcls::MINING_THRESH,
            mining_objectness: 0.5,
            source_iou_filter: milcls::SOURCE_IOU_FILTER,
            attach: MaskAttach::BMinus1,
            use_mask: true,
            weighting: Weighting::Simnet,
            score_mode: ScoreMode::ObjectnessMil,
            step1_epochs_initial: 6,
            step1_epochs: 2,
            step2_epochs_initial: 6,
            step2_epochs: 3,
            source_per_epoch: 200,
            simnet_iterations: 300,
            simnet_lr: 0.02,
            mask_hidden: 32,
            mask_lr_mult: 40.0,
            mask_warmup_epochs: 3,
            mask_detached: true,
            mil_hidden: 256,
            rpn_max_pos: 32,
            roi_max_pos: 16,
            neg_ratio: 3,
            candidate_nms: 0.7,
            detection_nms: 0.5,
            max_detections: 20,
            distill: false,
            distill_epochs: 8,
            mine_base_in_target: false,
            base_mining_thresh: 0.8,
            ap_mode: ApMode::Area,
            detnet: DetNetConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, "must be a finite value >= 0"));
            }
        }
        for (field, v) in [
            ("candidate_thresh", self.candidate_thresh),
            ("mining_thresh", self.mining_thresh),
            ("mining_objectness", self.mining_objectness),
            ("source_iou_filter", self.source_iou_filter),
            ("candidate_nms", self.candidate_nms),
            ("detection_nms", self.detection_nms),
            ("base_mining_thresh", self.base_mining_thresh),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(field, "must lie strictly between 0 and 1"));
            }
        }
        for (field, v) in [("lr_initial", self.lr_initial), ("lr_final", self.lr_final), ("simnet_lr", self.simnet_lr), ("mask_lr_mult", self.mask_lr_mult)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        for (field, v) in [("batch_size", self.batch_size), ("k", self.k), ("m", self.m), ("max_detections", self.max_detections)] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        self.detnet.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Composed step-1 objective from its parts.
    pub fn step1_loss(&self, l_obj: f64, l_reg: f64, l_mask: f64) -> f64 {
        l_obj + self.gamma * l_reg + self.alpha * l_mask
    }

    /// Composed step-2 objective from its parts.
    pub fn step2_loss(&self, l_mil: f64, l_mask: f64) -> f64 {
        l_mil + self.beta * l_mask
    }
}

/// Every trainable piece of the detector, sharing one parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub det: DetNet,
    pub mask: Option<MaskGen>,
    pub mil: MilHead,
    /// Per-region classifier over all categories plus background. In the
    /// pipeline it reads detached region features, so it only observes the
    /// detector; a distilled detector trains it end to end.
    pub cls: Linear,
    pub cls_detached: bool,
    /// The detector sees the mask as a constant input.
    pub mask_detached: bool,
    pub categories: usize,
    pub novel_ids: Vec<usize>,
}

impl Model {
    pub fn new<R: Rng>(cfg: &TrainingConfig, categories: usize, novel_ids: Vec<usize>, cls_detached: bool, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut dcfg = cfg.detnet.clone();
        dcfg.mask_channels = if cfg.use_mask { categories + 1 } else { 0 };
        dcfg.attach = cfg.attach;
        let det = DetNet::new(&mut store, dcfg, rng)?;
        let mask = cfg.use_mask.then(|| MaskGen::new(&mut store, det.cfg.widths[2], cfg.mask_hidden, categories, rng));
        let mil = MilHead::new(&mut store, det.cfg.region_dim, cfg.mil_hidden, novel_ids.len(), rng);
        let cls = Linear::new_small(&mut store, "head.cls", det.cfg.region_dim, categories + 1, 0.01, rng);
        Ok(Model { store, det, mask, mil, cls, cls_detached, mask_detached: cfg.mask_detached, categories, novel_ids })
    }

    /// Backbone (and mask) forward pass.
    pub fn forward(&self, tape: &mut Tape, images: Var) -> Result<(detnet::Features, Option<MaskOut>)> {
        let c3 = self.det.stem(tape, &self.store, images)?;
        let mask = self.mask.as_ref().map(|m| m.forward(tape, &self.store, c3));
        let fed = mask.map(|m| if self.mask_detached { tape.input(tape.value(m.m).clone()) } else { m.m });
        let fm = self.det.finish(tape, &self.store, c3, fed)?;
        Ok((detnet::Features { c3, fm }, mask))
    }
}

/// One image prepared for training or evaluation.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image_id: String,
    pub pixels: Vec<f64>,
    /// Ground-truth boxes; empty for target training images.
    pub gt: Vec<LabeledBox>,
    /// Mask-head labels over all categories and which of them are known.
    pub mask_labels: Vec<f64>,
    pub mask_active: Vec<bool>,
    /// Image labels over novel categories (local order).
    pub novel_labels: Vec<f64>,
}

/// Training and evaluation splits. Target training samples never carry boxes.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub image_size: usize,
    pub categories: Vec<(usize, String)>,
    pub base_ids: Vec<usize>,
    pub novel_ids: Vec<usize>,
    pub source: Vec<Sample>,
    pub source_val: Vec<Sample>,
    pub target: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        let (w, h) = corpus.image_size();
        if w != h {
            return Err(Error::Shape(format!("square images expected, got {w}x{h}")));
        }
        let c = corpus.num_categories();
        let base_ids = corpus.base_ids();
        let novel_ids = corpus.novel_ids();
        let local: BTreeMap<usize, usize> = novel_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let make = |id: &str, img: &crate::synthdata::Image, gt: Vec<LabeledBox>, labels: &std::collections::BTreeSet<usize>, source: bool| {
            let mut mask_labels = vec![0.0; c];
            let mut novel_labels = vec![0.0; novel_ids.len()];
            for &l in labels {
                mask_labels[l] = 1.0;
                if let Some(&k) = local.get(&l) {
                    novel_labels[k] = 1.0;
                }
            }
            // Source images contain no novel objects, so every label is known
            // there; target images may hold unlabeled base objects.
            let mask_active = (0..c).map(|k| source || local.contains_key(&k)).collect();
            Sample { image_id: id.to_string(), pixels: img.to_chw(), gt, mask_labels, mask_active, novel_labels }
        };
        Ok(Dataset {
            image_size: w,
            categories: corpus.categories.iter().map(|c| (c.id, c.name.clone())).collect(),
            base_ids,
            novel_ids: novel_ids.clone(),
            source: corpus.source.iter().map(|a| make(&a.image_id, &a.image, a.boxes.clone(), &a.image_labels, true)).collect(),
            source_val: corpus.source_val.iter().map(|a| make(&a.image_id, &a.image, a.boxes.clone(), &a.image_labels, true)).collect(),
            target: corpus.target_train.iter().map(|w| make(&w.image_id, &w.image, Vec::new(), &w.image_labels, false)).collect(),
            test: corpus.target_test.iter().map(|a| make(&a.image_id, &a.image, a.boxes.clone(), &a.image_labels, false)).collect(),
        })
    }

    pub fn novel_categories(&self) -> Vec<(usize, String)> {
        self.categories.iter().filter(|(id, _)| self.novel_ids.contains(id)).cloned().collect()
    }
}

/// Input normalisation: pixels in `[0, 1]` are mapped to `(v - MEAN) / STD`.
/// Without centring, the grey background dominates every early activation
/// and plain SGD barely moves.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

fn batch_tensor(samples: &[&Sample], size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(samples.len() * 3 * size * size);
    for s in samples {
        data.extend(s.pixels.iter().map(|v| (v - PIXEL_MEAN) / PIXEL_STD));
    }
    Tensor::from_vec(&[samples.len(), 3, size, size], data)
}

/// Supervision box of step 1 with its class label (for the optional class head).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sup {
    pub bbox: BoundingBox,
    pub weight: f64,
    pub label: usize,
}

/// Sub-losses of one step-1 batch (before coefficients).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Step1Parts {
    pub obj: f64,
    pub reg: f64,
    pub mask: f64,
    pub cls: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub iteration: usize,
    pub step: String,
    pub epoch: usize,
    pub loss: f64,
}

/// Diagnostics of one evaluation round, beyond the curve metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub metrics: IterationMetrics,
    pub report: EvalReport,
    pub pseudo_boxes: usize,
    pub source_pseudo_boxes: usize,
    /// Fraction of target pseudo boxes matching a held-out box of their
    /// label at IoU 0.5 (evaluation-side diagnostic only).
    pub pseudo_precision: f64,
    pub mean_weight: f64,
    /// Mean weights of target pseudo boxes with correct and wrong labels.
    pub mean_weight_correct: f64,
    pub mean_weight_wrong: f64,
    pub mean_weight_source: f64,
    pub singleton_groups: usize,
    pub skipped_images: usize,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub records: Vec<IterationRecord>,
    pub losses: Vec<StepLog>,
    pub model: Model,
    pub pseudo_pool: BTreeMap<String, Vec<PseudoBox>>,
    pub distill: Option<IterationRecord>,
}

impl PipelineOutput {
    pub fn metrics(&self) -> Vec<IterationMetrics> {
        self.records.iter().map(|r| r.metrics).collect()
    }
}

/// Evaluation-only inputs: held-out boxes of the target training split.
pub struct EvalContext {
    pub corloc_gt: GtIndex,
}

impl EvalContext {
    pub fn new(held: &HeldOutBoxes) -> Self {
        EvalContext { corloc_gt: held.images.iter().map(|(id, b)| (id.clone(), b.clone())).collect() }
    }
}

fn sub_rng(seed: u64, iteration: usize, step: u64) -> ChaCha8Rng {
    let mut s = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0000);
    let a: u64 = s.gen();
    ChaCha8Rng::seed_from_u64(a ^ ((iteration as u64) << 32) ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Mutable state of iterative training.
#[derive(Clone)]
pub struct TrainingState<'a> {
    pub cfg: TrainingConfig,
    pub data: &'a Dataset,
    pub model: Model,
    pub iteration: usize,
    /// Novel pseudo boxes per image id (source and target).
    pub pseudo_pool: BTreeMap<String, Vec<PseudoBox>>,
    /// Base pseudo boxes mined in target images (optional).
    pub base_pool: BTreeMap<String, Vec<PseudoBox>>,
    pub losses: Vec<StepLog>,
    pub last_step3: Step3Stats,
    pub last_skipped: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Step3Stats {
    pub singleton_groups: usize,
    pub simnet_final_loss: f64,
}

impl<'a> TrainingState<'a> {
    pub fn new(cfg: TrainingConfig, data: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        let mut cfg = cfg;
        cfg.detnet.image_size = data.image_size;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Model::new(&cfg, data.categories.len(), data.novel_ids.clone(), true, &mut rng)?;
        Self::with_model(cfg, data, model)
    }

    /// State around an existing (e.g. restored) model.
    pub fn with_model(cfg: TrainingConfig, data: &'a Dataset, model: Model) -> Result<Self> {
        if model.categories != data.categories.len() || model.novel_ids != data.novel_ids {
            return Err(Error::Mismatch(format!(
                "model built for {} categories (novel {:?}), corpus has {} (novel {:?})",
                model.categories,
                model.novel_ids,
                data.categories.len(),
                data.novel_ids
            )));
        }
        Ok(TrainingState {
            cfg,
            data,
            model,
            iteration: 0,
            pseudo_pool: BTreeMap::new(),
            base_pool: BTreeMap::new(),
            losses: Vec::new(),
            last_step3: Step3Stats::default(),
            last_skipped: 0,
        })
    }

    /// Step-1 boxes of one image and the weight of its negatives: ground
    /// truth at 1, pseudo boxes at their assigned weight.
    pub fn supervision(&self, s: &Sample, source: bool) -> (Vec<Sup>, f64) {
        let bg = self.model.categories;
        let mut sup: Vec<Sup> = s.gt.iter().map(|g| Sup { bbox: g.bbox, weight: 1.0, label: g.category }).collect();
        if let Some(ps) = self.pseudo_pool.get(&s.image_id) {
            sup.extend(ps.iter().map(|p| Sup { bbox: p.bbox, weight: p.weight, label: p.pseudo_label }));
        }
        if let Some(ps) = self.base_pool.get(&s.image_id) {
            sup.extend(ps.iter().map(|p| Sup { bbox: p.bbox, weight: p.weight, label: p.pseudo_label }));
        }
        debug_assert!(sup.iter().all(|s| s.label < bg));
        let neg = if source {
            1.0
        } else if sup.is_empty() {
            0.0
        } else {
            sup.iter().map(|s| s.weight).sum::<f64>() / sup.len() as f64
        };
        (sup, neg)
    }

    fn optimizer(&self) -> Sgd {
        Sgd::new(self.cfg.lr_initial, self.cfg.momentum, self.cfg.weight_decay).with_clip(self.cfg.clip_norm).with_lr_mult("mask.", self.cfg.mask_lr_mult)
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        if (step as f64) < (total as f64) * 2.0 / 3.0 {
            self.cfg.lr_initial
        } else {
            self.cfg.lr_final
        }
    }

    fn check_finite(&self, stage: &str, loss: f64, ids: &[&str], parts: String) -> Result<()> {
        if loss.is_finite() && self.model.store.all_finite() {
            return Ok(());
        }
        Err(Error::NumericAbort {
            stage: stage.to_string(),
            iteration: self.iteration,
            detail: format!("loss {loss} ({parts}) on batch [{}]", ids.join(", ")),
        })
    }

    /// Records the step-1 objective of one batch on `tape`; returns the loss
    /// var and its parts.
    fn step1_batch(&self, tape: &mut Tape, batch: &[(&Sample, Vec<Sup>, f64)], rng: &mut ChaCha8Rng) -> Result<(Var, Step1Parts)> {
        let m = &self.model;
        let cfg = &self.cfg;
        let n = batch.len();
        let samples: Vec<&Sample> = batch.iter().map(|b| b.0).collect();
        let x = tape.input(batch_tensor(&samples, self.data.image_size)?);
        let (feats, mask) = m.forward(tape, x)?;
        let (rpn_obj, rpn_delta) = m.det.rpn(tape, &m.store, feats.fm);
        let a = m.det.cfg.anchors_per_cell();
        let f = m.det.cfg.feature_size();
        let hw = f * f;
        let bg = m.categories;

        let mut obj_idx = Vec::new();
        let mut obj_t = Vec::new();
        let mut obj_w = Vec::new();
        let mut del_idx = Vec::new();
        let mut del_t = Vec::new();
        let mut del_w = Vec::new();
        let mut rois: Vec<(usize, BoundingBox)> = Vec::new();
        let mut roi_t = Vec::new();
        let mut roi_w = Vec::new();
        let mut roi_reg_t = Vec::new();
        let mut roi_reg_w = Vec::new();
        let mut roi_cls = Vec::new();
        let mut roi_cls_w = Vec::new();
        for (i, (_, sup, neg_w)) in batch.iter().enumerate() {
            if sup.is_empty() {
                continue;
            }
            let boxes: Vec<BoundingBox> = sup.iter().map(|s| s.bbox).collect();
            // Anchor-level targets.
            let t = rpn_targets(&m.det.anchors, &boxes);
            let pos: Vec<usize> = (0..t.len()).filter(|&k| t[k].0 == Some(true)).collect();
            let neg: Vec<usize> = (0..t.len()).filter(|&k| t[k].0 == Some(false)).collect();
            let (pos, neg) = sample_regions(pos, neg, cfg.rpn_max_pos, cfg.neg_ratio, rng);
            let norm = 1.0 / ((pos.len() + neg.len()).max(1) * n) as f64;
            for &k in &pos {
                let j = t[k].1.expect("positive anchors are matched");
                obj_idx.push(i * a * hw + k);
                obj_t.push(1.0);
                obj_w.push(sup[j].weight * norm);
                let (ai, cell) = (k / hw, k % hw);
                let d = scaled(&encode_delta(&m.det.anchors[k], &boxes[j]));
                for (c, dv) in d.iter().enumerate() {
                    del_idx.push(i * 4 * a * hw + (ai * 4 + c) * hw + cell);
                    del_t.push(*dv);
                }
                del_w.push(sup[j].weight * norm);
            }
            for &k in &neg {
                obj_idx.push(i * a * hw + k);
                obj_t.push(0.0);
                obj_w.push(neg_w * norm);
            }
            // Region-level targets on proposals plus the supervision boxes.
            let props = m.det.proposals(tape.value(rpn_obj), tape.value(rpn_delta), i);
            let mut cand: Vec<BoundingBox> = props.iter().map(|p| p.bbox).collect();
            cand.extend(boxes.iter().copied());
            let tg = detnet::assign_targets(&cand, &boxes, detnet::POS_IOU);
            let pos: Vec<usize> = (0..cand.len()).filter(|&k| tg[k].label).collect();
            let neg: Vec<usize> = (0..cand.len()).filter(|&k| !tg[k].label).collect();
            let (pos, neg) = sample_regions(pos, neg, cfg.roi_max_pos, cfg.neg_ratio, rng);
            let norm = 1.0 / ((pos.len() + neg.len()).max(1) * n) as f64;
            for &k in &pos {
                let j = tg[k].matched.expect("positive regions are matched");
                rois.push((i, cand[k]));
                roi_t.push(1.0);
                roi_w.push(sup[j].weight * norm);
                roi_reg_t.extend(scaled(&tg[k].delta.expect("positives carry deltas")));
                roi_reg_w.push(sup[j].weight * norm);
                roi_cls.push(sup[j].label);
                roi_cls_w.push(sup[j].weight * norm);
            }
            for &k in &neg {
                rois.push((i, cand[k]));
                roi_t.push(0.0);
                roi_w.push(neg_w * norm);
                roi_reg_t.extend([0.0; 4]);
                roi_reg_w.push(0.0);
                roi_cls.push(bg);
                roi_cls_w.push(neg_w * norm);
            }
        }

        let mut parts = Step1Parts::default();
        let mut terms = Vec::new();
        if !obj_idx.is_empty() {
            let len = obj_idx.len();
            let o = tape.gather(rpn_obj, obj_idx, &[len]);
            let l = tape.weighted_bce(o, obj_t, obj_w, 1.0);
            parts.obj += tape.value(l).item();
            terms.push(l);
        }
        if !del_idx.is_empty() {
            let rows = del_idx.len() / 4;
            let d = tape.gather(rpn_delta, del_idx, &[rows, 4]);
            let l = tape.weighted_smooth_l1(d, del_t, del_w, 1.0, cfg.gamma);
            parts.reg += tape.value(l).item() / cfg.gamma.max(f64::MIN_POSITIVE);
            terms.push(l);
        }
        if !rois.is_empty() {
            let rf = m.det.region_features(tape, &m.store, feats.fm, &rois)?;
            let (o, d) = m.det.head(tape, &m.store, rf);
            let l = tape.weighted_bce(o, roi_t, roi_w, 1.0);
            parts.obj += tape.value(l).item();
            terms.push(l);
            let l = tape.weighted_smooth_l1(d, roi_reg_t, roi_reg_w, 1.0, cfg.gamma);
            parts.reg += tape.value(l).item() / cfg.gamma.max(f64::MIN_POSITIVE);
            terms.push(l);
            let input = if m.cls_detached { tape.input(tape.value(rf).clone()) } else { rf };
            let logits = m.cls.forward(tape, &m.store, input);
            let l = softmax_cross_entropy(tape, logits, roi_cls, roi_cls_w, 1.0);
            parts.cls += tape.value(l).item();
            terms.push(l);
        }
        if let Some(mo) = mask {
            let labels: Vec<f64> = batch.iter().flat_map(|b| b.0.mask_labels.iter().copied()).collect();
            let active: Vec<bool> = batch.iter().flat_map(|b| b.0.mask_active.iter().copied()).collect();
            let y = self.mask_score(tape, &mo);
            let l = soft_margin_loss(tape, y, &labels, Some(&active), cfg.alpha / n as f64);
            parts.mask = tape.value(l).item() / cfg.alpha.max(f64::MIN_POSITIVE);
            terms.push(l);
        }
        let loss = match tape.sum_all(&terms) {
            Some(l) => l,
            None => tape.input(Tensor::scalar(0.0)),
        };
        Ok((loss, parts))
    }

    /// Image-level mask scores for the loss: the spatial mean during warm-up,
    /// nGWP afterwards.
    fn mask_score(&self, tape: &mut Tape, mo: &MaskOut) -> Var {
        let done = self.losses.iter().filter(|l| l.step == "step1").count();
        if done < self.cfg.mask_warmup_epochs {
            mean_pool(tape, mo.p)
        } else {
            mo.y
        }
    }

    /// Step 1: detector and mask generator on base ground truth and weighted
    /// pseudo boxes. Returns per-epoch mean losses.
    pub fn step1(&mut self, epochs: usize) -> Result<Vec<f64>> {
        let mut rng = sub_rng(self.cfg.seed, self.iteration, 1);
        let mut opt = self.optimizer();
        let n_src = self.cfg.source_per_epoch.min(self.data.source.len());
        let per_epoch = (n_src + self.data.target.len()).div_ceil(self.cfg.batch_size);
        let total = epochs * per_epoch;
        let mut history = Vec::with_capacity(epochs);
        let mut step = 0;
        for epoch in 0..epochs {
            let mut src: Vec<usize> = (0..self.data.source.len()).collect();
            src.shuffle(&mut rng);
            src.truncate(n_src);
            let mut items: Vec<(bool, usize)> = src.into_iter().map(|i| (true, i)).chain((0..self.data.target.len()).map(|i| (false, i))).collect();
            items.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut count = 0;
            for chunk in items.chunks(self.cfg.batch_size) {
                let batch: Vec<(&Sample, Vec<Sup>, f64)> = chunk
                    .iter()
                    .map(|&(is_src, i)| {
                        let s = if is_src { &self.data.source[i] } else { &self.data.target[i] };
                        let (sup, neg) = self.supervision(s, is_src);
                        (s, sup, neg)
                    })
                    .collect();
                opt.lr = self.lr_at(step, total);
                step += 1;
                let mut tape = Tape::new();
                let (loss, parts) = self.step1_batch(&mut tape, &batch, &mut rng)?;
                let lv = tape.value(loss).item();
                let ids: Vec<&str> = batch.iter().map(|b| b.0.image_id.as_str()).collect();
                self.check_finite("step1", lv, &ids, format!("{parts:?}"))?;
                let grads = tape.backward(loss).into_param_map();
                opt.step(&mut self.model.store, &grads, |name| !name.starts_with("mil."));
                self.check_finite("step1", lv, &ids, format!("{parts:?}"))?;
                sum += lv;
                count += 1;
            }
            let mean = sum / count.max(1) as f64;
            self.losses.push(StepLog { iteration: self.iteration, step: "step1".into(), epoch, loss: mean });
            history.push(mean);
        }
        Ok(history)
    }

    /// Candidate boxes (with region features) for each sample, batched.
    pub fn candidates(&self, samples: &[&Sample]) -> Result<Vec<Vec<detnet::CandidateBox>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(16) {
            let mut tape = Tape::new();
            let x = tape.input(batch_tensor(chunk, self.data.image_size)?);
            let (feats, _) = self.model.forward(&mut tape, x)?;
            let (o, d) = self.model.det.rpn(&mut tape, &self.model.store, feats.fm);
            let props: Vec<Vec<Proposal>> = (0..chunk.len()).map(|i| self.model.det.proposals(tape.value(o), tape.value(d), i)).collect();
            out.extend(self.model.det.candidates(&mut tape, &self.model.store, feats.fm, &props, self.cfg.candidate_thresh, self.cfg.candidate_nms)?);
        }
        Ok(out)
    }

    /// Step 2: MIL classifier with backbone and mask generator on target
    /// images; RPN and detection head stay frozen.
    pub fn step2(&mut self, epochs: usize) -> Result<Vec<f64>> {
        let mut rng = sub_rng(self.cfg.seed, self.iteration, 2);
        let targets: Vec<&Sample> = self.data.target.iter().collect();
        let cands = self.candidates(&targets)?;
        let usable: Vec<usize> = (0..targets.len()).filter(|&i| !cands[i].is_empty()).collect();
        self.last_skipped = targets.len() - usable.len();
        if self.last_skipped > 0 {
            log::warn!("step2: {} target images without candidates skipped", self.last_skipped);
        }
        let mut opt = self.optimizer();
        let total = epochs * usable.len().div_ceil(self.cfg.batch_size);
        let mut history = Vec::new();
        let mut step = 0;
        for epoch in 0..epochs {
            let mut order = usable.clone();
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut count = 0;
            for chunk in order.chunks(self.cfg.batch_size) {
                opt.lr = self.lr_at(step, total);
                step += 1;
                let samples: Vec<&Sample> = chunk.iter().map(|&i| targets[i]).collect();
                let boxes: Vec<Vec<BoundingBox>> = chunk.iter().map(|&i| cands[i].iter().map(|c| c.bbox).collect()).collect();
                let mut tape = Tape::new();
                let (loss, l_mil, l_mask) = self.step2_batch(&mut tape, &samples, &boxes)?;
                let lv = tape.value(loss).item();
                let ids: Vec<&str> = samples.iter().map(|s| s.image_id.as_str()).collect();
                self.check_finite("step2", lv, &ids, format!("mil {l_mil}, mask {l_mask}"))?;
                let grads = tape.backward(loss).into_param_map();
                opt.step(&mut self.model.store, &grads, |name| name.starts_with("backbone.") || name.starts_with("mask.") || name.starts_with("mil."));
                self.check_finite("step2", lv, &ids, format!("mil {l_mil}, mask {l_mask}"))?;
                sum += lv;
                count += 1;
            }
            let mean = sum / count.max(1) as f64;
            self.losses.push(StepLog { iteration: self.iteration, step: "step2".into(), epoch, loss: mean });
            history.push(mean);
        }
        Ok(history)
    }

    /// Step-2 objective of one batch: `(total, L_mil, L_mask)`.
    pub fn step2_batch(&self, tape: &mut Tape, samples: &[&Sample], boxes: &[Vec<BoundingBox>]) -> Result<(Var, f64, f64)> {
        let m = &self.model;
        let n = samples.len();
        let x = tape.input(batch_tensor(samples, self.data.image_size)?);
        let (feats, mask) = m.forward(tape, x)?;
        let mut rois = Vec::new();
        let mut segments = Vec::new();
        for (i, bs) in boxes.iter().enumerate() {
            let lo = rois.len();
            rois.extend(bs.iter().map(|b| (i, *b)));
            segments.push((lo, rois.len()));
        }
        let rf = m.det.region_features(tape, &m.store, feats.fm, &rois)?;
        let (sr, sd) = m.mil.branches(tape, &m.store, rf);
        let y = mil_fuse(tape, sr, sd, &segments)?;
        let labels: Vec<f64> = samples.iter().flat_map(|s| s.novel_labels.iter().copied()).collect();
        let ones = vec![1.0; labels.len()];
        let l_mil = tape.weighted_bce(y, labels, ones, 1.0 / n as f64);
        let mut terms = vec![l_mil];
        let mil_v = tape.value(l_mil).item();
        let mut mask_v = 0.0;
        if let Some(mo) = mask {
            let labels: Vec<f64> = samples.iter().flat_map(|s| s.mask_labels.iter().copied()).collect();
            let active: Vec<bool> = samples.iter().flat_map(|s| s.mask_active.iter().copied()).collect();
            let y = self.mask_score(tape, &mo);
            let l = soft_margin_loss(tape, y, &labels, Some(&active), self.cfg.beta / n as f64);
            mask_v = tape.value(l).item() / self.cfg.beta.max(f64::MIN_POSITIVE);
            terms.push(l);
        }
        let loss = tape.sum_all(&terms).expect("at least the MIL term");
        Ok((loss, mil_v, mask_v))
    }

    /// MIL scores of each sample's candidates (`None` without candidates).
    fn mil_outputs(&self, samples: &[&Sample], cands: &[Vec<detnet::CandidateBox>]) -> Result<Vec<Option<milcls::MilScores>>> {
        let c = self.model.novel_ids.len();
        let mut out = Vec::with_capacity(samples.len());
        for cs in cands {
            if cs.is_empty() {
                out.push(None);
                continue;
            }
            let d = self.model.det.cfg.region_dim;
            let flat: Vec<f64> = cs.iter().flat_map(|c| c.region_feature.iter().copied()).collect();
            let mut tape = Tape::new();
            let x = tape.input(Tensor::from_vec(&[cs.len(), d], flat)?);
            let (sr, sd) = self.model.mil.branches(&mut tape, &self.model.store, x);
            out.push(Some(mil_scores(tape.value(sr).data().to_vec(), tape.value(sd).data().to_vec(), c)?));
        }
        Ok(out)
    }

    /// Region features of ground-truth boxes, grouped by category.
    pub fn gt_features(&self, samples: &[Sample]) -> Result<FeaturePool> {
        let mut pool: FeaturePool = BTreeMap::new();
        for chunk in samples.chunks(16) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let mut tape = Tape::new();
            let x = tape.input(batch_tensor(&refs, self.data.image_size)?);
            let (feats, _) = self.model.forward(&mut tape, x)?;
            let rois: Vec<(usize, BoundingBox)> = chunk.iter().enumerate().flat_map(|(i, s)| s.gt.iter().map(move |g| (i, g.bbox))).collect();
            if rois.is_empty() {
                continue;
            }
            let cats: Vec<usize> = chunk.iter().flat_map(|s| s.gt.iter().map(|g| g.category)).collect();
            let rf = self.model.det.region_features(&mut tape, &self.model.store, feats.fm, &rois)?;
            let d = self.model.det.cfg.region_dim;
            for (r, c) in cats.into_iter().enumerate() {
                pool.entry(c).or_default().push(tape.value(rf).data()[r * d..(r + 1) * d].to_vec());
            }
        }
        Ok(pool)
    }

    /// Step 3: mine pseudo boxes on source and target images, train a fresh
    /// similarity network on base ground truth and weight the pseudo boxes.
    pub fn step3(&mut self) -> Result<()> {
        let mut rng = sub_rng(self.cfg.seed, self.iteration, 3);
        let labels = self.model.novel_ids.clone();
        let mut mined: Vec<(String, PseudoBox, Vec<f64>)> = Vec::new();
        for (samples, source) in [(&self.data.source, true), (&self.data.target, false)] {
            let refs: Vec<&Sample> = samples.iter().collect();
            let cands = self.candidates(&refs)?;
            let scores = self.mil_outputs(&refs, &cands)?;
            for ((s, cs), sc) in refs.iter().zip(&cands).zip(&scores) {
                let Some(sc) = sc else { continue };
                let boxes: Vec<BoundingBox> = cs.iter().map(|c| c.bbox).collect();
                let mut found = mine_pseudo_boxes(sc, &boxes, &labels, self.cfg.mining_thresh);
                found.retain(|(i, _)| cs[*i].objectness >= self.cfg.mining_objectness);
                if source {
                    let gt: Vec<BoundingBox> = s.gt.iter().map(|g| g.bbox).collect();
                    found = filter_source_pseudo(&found, &gt, self.cfg.source_iou_filter);
                }
                for (i, p) in found {
                    mined.push((s.image_id.clone(), p, cs[i].region_feature.clone()));
                }
            }
        }
        self.last_step3 = Step3Stats::default();
        let weights: Vec<f64> = match self.cfg.weighting {
            Weighting::Uniform => vec![1.0; mined.len()],
            w => {
                let sim = if w == Weighting::Simnet {
                    let pool = self.gt_features(&self.data.source)?;
                    let scfg = SimTrainConfig {
                        k: self.cfg.k,
                        m: self.cfg.m,
                        iterations: self.cfg.simnet_iterations,
                        lr: self.cfg.simnet_lr,
                        momentum: self.cfg.momentum,
                        weight_decay: self.cfg.weight_decay,
                        hidden: 256,
                    };
                    let (store, net, losses) = simnet::train_simnet(&pool, &scfg, &mut rng)?;
                    self.last_step3.simnet_final_loss = losses.last().copied().unwrap_or(0.0);
                    Some((store, net))
                } else {
                    None
                };
                let mut weights = vec![1.0; mined.len()];
                for &label in &labels {
                    let mut idx: Vec<usize> = (0..mined.len()).filter(|&i| mined[i].1.pseudo_label == label).collect();
                    if idx.is_empty() {
                        log::warn!("iteration {}: no pseudo boxes mined for category {label}", self.iteration);
                        continue;
                    }
                    idx.shuffle(&mut rng);
                    for group in idx.chunks(self.cfg.m) {
                        let feats: Vec<Vec<f64>> = group.iter().map(|&i| mined[i].2.clone()).collect();
                        let a = match &sim {
                            Some((store, net)) => net.similarity_matrix(store, &feats),
                            None => cosine_matrix(&feats),
                        };
                        if group.len() == 1 {
                            self.last_step3.singleton_groups += 1;
                        }
                        for (&i, w) in group.iter().zip(assign_weights(&a, group.len())) {
                            weights[i] = w;
                        }
                    }
                }
                weights
            }
        };
        self.pseudo_pool.clear();
        for ((id, mut p, _), w) in mined.into_iter().zip(weights) {
            p.weight = w;
            self.pseudo_pool.entry(id).or_default().push(p);
        }
        Ok(())
    }

    /// Mines base-category boxes in target images with the class head.
    pub fn mine_base_in_target(&mut self) -> Result<()> {
        let refs: Vec<&Sample> = self.data.target.iter().collect();
        let cands = self.candidates(&refs)?;
        let k = self.model.categories + 1;
        self.base_pool.clear();
        for (s, cs) in refs.iter().zip(&cands) {
            if cs.is_empty() {
                continue;
            }
            let p = self.class_probs(cs)?;
            let mut found = Vec::new();
            for (i, c) in cs.iter().enumerate() {
                let row = &p[i * k..(i + 1) * k];
                for &b in &self.data.base_ids {
                    if row[b] >= self.cfg.base_mining_thresh {
                        found.push(PseudoBox { bbox: c.bbox, pseudo_label: b, mining_score: row[b], weight: 1.0 });
                    }
                }
            }
            if !found.is_empty() {
                self.base_pool.insert(s.image_id.clone(), found);
            }
        }
        Ok(())
    }

    /// Class posteriors `[R, C + 1]` of candidates from the class head.
    pub fn class_probs(&self, cs: &[detnet::CandidateBox]) -> Result<Vec<f64>> {
        let d = self.model.det.cfg.region_dim;
        let flat: Vec<f64> = cs.iter().flat_map(|c| c.region_feature.iter().copied()).collect();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(&[cs.len(), d], flat)?);
        let logits = self.model.cls.forward(&mut tape, &self.model.store, x);
        Ok(softmax(tape.value(logits).data(), self.model.categories + 1))
    }

    /// Detections of `categories` scored by objectness times class posterior.
    pub fn detect_with_classes(&self, samples: &[&Sample], categories: &[usize]) -> Result<(Vec<Detection>, BTreeMap<String, Vec<BoundingBox>>)> {
        let cands = self.candidates(samples)?;
        let k = self.model.categories + 1;
        let mut dets = Vec::new();
        let mut boxes = BTreeMap::new();
        for (s, cs) in samples.iter().zip(&cands) {
            boxes.insert(s.image_id.clone(), cs.iter().map(|c| c.bbox).collect());
            if cs.is_empty() {
                continue;
            }
            let p = self.class_probs(cs)?;
            for &cat in categories {
                let list: Vec<(BoundingBox, f64)> = cs.iter().enumerate().map(|(i, c)| (c.bbox, c.objectness * p[i * k + cat])).collect();
                dets.extend(self.top_detections(&list, &s.image_id, cat));
            }
        }
        Ok((dets, boxes))
    }

    fn top_detections(&self, list: &[(BoundingBox, f64)], image_id: &str, category: usize) -> Vec<Detection> {
        let mut keep: Vec<(BoundingBox, f64)> = nms_indices(list, self.cfg.detection_nms).into_iter().map(|i| list[i]).collect();
        keep.truncate(self.cfg.max_detections);
        keep.into_iter().map(|(bbox, confidence)| Detection { image_id: image_id.to_string(), bbox, category, confidence }).collect()
    }

    /// Detections of novel categories on each sample.
    pub fn detect(&self, samples: &[&Sample]) -> Result<(Vec<Detection>, BTreeMap<String, Vec<BoundingBox>>)> {
        let cands = self.candidates(samples)?;
        let scores = self.mil_outputs(samples, &cands)?;
        let mut dets = Vec::new();
        let mut cand_boxes = BTreeMap::new();
        let c = self.model.novel_ids.len();
        for ((s, cs), sc) in samples.iter().zip(&cands).zip(&scores) {
            cand_boxes.insert(s.image_id.clone(), cs.iter().map(|c| c.bbox).collect());
            let Some(sc) = sc else { continue };
            for (k, &cat) in self.model.novel_ids.iter().enumerate() {
                let list: Vec<(BoundingBox, f64)> = cs
                    .iter()
                    .enumerate()
                    .map(|(i, cb)| {
                        let score = match self.cfg.score_mode {
                            ScoreMode::ObjectnessMil => cb.objectness * sc.s_r_norm[i * c + k] * sc.y_mil[k],
                            ScoreMode::Fused => sc.s_fused[i * c + k],
                        };
                        (cb.bbox, score)
                    })
                    .collect();
                dets.extend(self.top_detections(&list, &s.image_id, cat));
            }
        }
        Ok((dets, cand_boxes))
    }

    /// Novel-category metrics on the target test split (mAP, candidate
    /// recall) and target training split (CorLoc).
    pub fn evaluate(&self, ctx: &EvalContext) -> Result<IterationRecord> {
        let test: Vec<&Sample> = self.data.test.iter().collect();
        let (dets, cand_boxes) = self.detect(&test)?;
        let gts: GtIndex = self.data.test.iter().map(|s| (s.image_id.clone(), s.gt.clone())).collect();
        let train: Vec<&Sample> = self.data.target.iter().collect();
        let (train_dets, _) = self.detect(&train)?;
        let cats = self.data.novel_categories();
        let mut report = evalkit::evaluate("target_test", &cats, &dets, &gts, Some((&train_dets, &ctx.corloc_gt)), self.cfg.ap_mode);
        report.candidate_recall = evalkit::candidate_recall(&cand_boxes, &gts, evalkit::DEFAULT_IOU);
        Ok(self.record(report, ctx))
    }

    fn record(&self, report: EvalReport, ctx: &EvalContext) -> IterationRecord {
        let (mut n, mut correct, mut wsum) = (0usize, 0usize, 0.0);
        let (mut wc, mut nc, mut ww, mut nw) = (0.0, 0usize, 0.0, 0usize);
        let (mut ws, mut ns) = (0.0, 0usize);
        for (id, ps) in &self.pseudo_pool {
            let Some(held) = ctx.corloc_gt.get(id) else {
                ns += ps.len();
                ws += ps.iter().map(|p| p.weight).sum::<f64>();
                continue;
            };
            for p in ps {
                n += 1;
                wsum += p.weight;
                if held.iter().any(|g| g.category == p.pseudo_label && crate::geometry::iou(&g.bbox, &p.bbox) >= 0.5) {
                    correct += 1;
                    wc += p.weight;
                    nc += 1;
                } else {
                    ww += p.weight;
                    nw += 1;
                }
            }
        }
        let ratio = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
        IterationRecord {
            metrics: IterationMetrics {
                iteration: self.iteration,
                map: report.map,
                corloc: report.mean_corloc.unwrap_or(0.0),
                candidate_recall: report.candidate_recall.unwrap_or(0.0),
            },
            report,
            pseudo_boxes: n,
            source_pseudo_boxes: ns,
            pseudo_precision: ratio(correct as f64, n),
            mean_weight: ratio(wsum, n),
            mean_weight_correct: ratio(wc, nc),
            mean_weight_wrong: ratio(ww, nw),
            mean_weight_source: ratio(ws, ns),
            singleton_groups: self.last_step3.singleton_groups,
            skipped_images: self.last_skipped,
        }
    }
}

/// Result of the initial steps 1 and 2, before any refinement round.
#[derive(Clone)]
pub struct InitialPhase<'a> {
    pub state: TrainingState<'a>,
    pub record: IterationRecord,
}

/// Iteration 0: steps 1 and 2 with no pseudo boxes, then evaluation.
/// Pseudo-box weighting plays no part here, so configs differing only in
/// `weighting` can share one initial phase.
pub fn initial_phase<'a>(cfg: &TrainingConfig, data: &'a Dataset, ctx: &EvalContext) -> Result<InitialPhase<'a>> {
    let mut st = TrainingState::new(cfg.clone(), data)?;
    st.step1(st.cfg.step1_epochs_initial)?;
    if st.cfg.mine_base_in_target {
        st.mine_base_in_target()?;
    }
    st.step2(st.cfg.step2_epochs_initial)?;
    let record = st.evaluate(ctx)?;
    log::info!("iteration 0: mAP {:.4} corloc {:.4} recall {:.4}", record.metrics.map, record.metrics.corloc, record.metrics.candidate_recall);
    Ok(InitialPhase { state: st, record })
}

/// Runs refinement iterations 1..=T from an initial phase under
/// `weighting`. Each mines with the previous model (step 3), then refines
/// steps 1 and 2 and evaluates.
pub fn refine_phase(
    init: InitialPhase,
    weighting: Weighting,
    ctx: &EvalContext,
    mut on_iteration: impl FnMut(&TrainingState, &IterationRecord) -> Result<()>,
) -> Result<PipelineOutput> {
    let InitialPhase { state: mut st, record } = init;
    st.cfg.weighting = weighting;
    on_iteration(&st, &record)?;
    let mut records = vec![record];
    for t in 1..=st.cfg.iterations {
        st.iteration = t;
        st.step3()?;
        st.step1(st.cfg.step1_epochs)?;
        if st.cfg.mine_base_in_target {
            st.mine_base_in_target()?;
        }
        st.step2(st.cfg.step2_epochs)?;
        let rec = st.evaluate(ctx)?;
        log::info!(
            "iteration {t}: mAP {:.4} corloc {:.4} recall {:.4} pseudo {} (precision {:.3}, weight ok {:.3} / wrong {:.3})",
            rec.metrics.map,
            rec.metrics.corloc,
            rec.metrics.candidate_recall,
            rec.pseudo_boxes,
            rec.pseudo_precision,
            rec.mean_weight_correct,
            rec.mean_weight_wrong
        );
        on_iteration(&st, &rec)?;
        records.push(rec);
    }
    let distill = if st.cfg.distill {
        // Mine once more so distillation sees the final model's boxes.
        st.iteration = st.cfg.iterations + 1;
        st.step3()?;
        Some(distill(&st.cfg, st.data, &st.pseudo_pool, ctx)?)
    } else {
        None
    };
    Ok(PipelineOutput { records, losses: st.losses, model: st.model, pseudo_pool: st.pseudo_pool, distill })
}

/// Runs the initial steps 1 and 2 without pseudo boxes (iteration 0), then
/// `iterations` refinement rounds of steps 3, 1, 2. `on_iteration` sees the
/// state and record after each evaluation (checkpointing hook).
pub fn run_pipeline_with(
    cfg: &TrainingConfig,
    data: &Dataset,
    ctx: &EvalContext,
    on_iteration: impl FnMut(&TrainingState, &IterationRecord) -> Result<()>,
) -> Result<PipelineOutput> {
    refine_phase(initial_phase(cfg, data, ctx)?, cfg.weighting, ctx, on_iteration)
}

pub fn run_pipeline(cfg: &TrainingConfig, data: &Dataset, ctx: &EvalContext) -> Result<PipelineOutput> {
    run_pipeline_with(cfg, data, ctx, |_, _| Ok(()))
}

/// Trains a fresh detector without mask, MIL or similarity parts on base
/// ground truth plus the given weighted pseudo boxes, with a region class
/// head; evaluates it like the pipeline.
pub fn distill(cfg: &TrainingConfig, data: &Dataset, pool: &BTreeMap<String, Vec<PseudoBox>>, ctx: &EvalContext) -> Result<IterationRecord> {
    let mut dcfg = cfg.clone();
    dcfg.use_mask = false;
    dcfg.mine_base_in_target = false;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD157);
    let model = Model::new(&dcfg, data.categories.len(), data.novel_ids.clone(), false, &mut rng)?;
    let mut st = TrainingState::with_model(dcfg, data, model)?;
    st.pseudo_pool = pool.clone();
    st.iteration = cfg.iterations + 1;
    st.step1(cfg.distill_epochs)?;
    let test: Vec<&Sample> = data.test.iter().collect();
    let train: Vec<&Sample> = data.target.iter().collect();
    let (dets, cand_boxes) = st.detect_with_classes(&test, &data.novel_ids)?;
    let (train_dets, _) = st.detect_with_classes(&train, &data.novel_ids)?;
    let gts: GtIndex = data.test.iter().map(|s| (s.image_id.clone(), s.gt.clone())).collect();
    let mut report = evalkit::evaluate("target_test", &data.novel_categories(), &dets, &gts, Some((&train_dets, &ctx.corloc_gt)), cfg.ap_mode);
    report.candidate_recall = evalkit::candidate_recall(&cand_boxes, &gts, evalkit::DEFAULT_IOU);
    Ok(st.record(report, ctx))
}

/// Proposal recall of base ground truth on `samples` at IoU 0.5 (for
/// checking that the proposal stage learns).
pub fn proposal_recall(st: &TrainingState, samples: &[Sample]) -> Result<f64> {
    let mut props = BTreeMap::new();
    for chunk in samples.chunks(16) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut tape = Tape::new();
        let x = tape.input(batch_tensor(&refs, st.data.image_size)?);
        let (feats, _) = st.model.forward(&mut tape, x)?;
        let (o, d) = st.model.det.rpn(&mut tape, &st.model.store, feats.fm);
        for (i, s) in chunk.iter().enumerate() {
            props.insert(s.image_id.clone(), st.model.det.proposals(tape.value(o), tape.value(d), i).into_iter().map(|p| p.bbox).collect());
        }
    }
    let gts: GtIndex = samples.iter().map(|s| (s.image_id.clone(), s.gt.clone())).collect();
    Ok(evalkit::candidate_recall(&props, &gts, 0.5).unwrap_or(0.0))
}

/// Average mask mass of each ground-truth category inside versus outside
/// its boxes, over `samples`. Returns `(inside, outside)` per-cell means.
pub fn mask_mass(st: &TrainingState, samples: &[Sample]) -> Result<(f64, f64)> {
    let Some(_) = st.model.mask else { return Err(Error::config("use_mask", "model has no mask generator")) };
    let (mut inside, mut ni, mut outside, mut no) = (0.0, 0usize, 0.0, 0usize);
    for chunk in samples.chunks(16) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut tape = Tape::new();
        let x = tape.input(batch_tensor(&refs, st.data.image_size)?);
        let (_, mask) = st.model.forward(&mut tape, x)?;
        let m = tape.value(mask.expect("mask present").m);
        let s = m.shape().to_vec();
        let (c1, h, w) = (s[1], s[2], s[3]);
        for (i, smp) in chunk.iter().enumerate() {
            for g in &smp.gt {
                for y in 0..h {
                    for x in 0..w {
                        let (cx, cy) = ((x as f64 + 0.5) * STRIDE as f64, (y as f64 + 0.5) * STRIDE as f64);
                        let v = m.data()[((i * c1 + g.category) * h + y) * w + x];
                        let inb = cx >= g.bbox.x_min && cx < g.bbox.x_max && cy >= g.bbox.y_min && cy < g.bbox.y_max;
                        if inb {
                            inside += v;
                            ni += 1;
                        } else {
                            outside += v;
                            no += 1;
                        }
                    }
                }
            }
        }
    }
    Ok((inside / ni.max(1) as f64, outside / no.max(1) as f64))
}

/// Decodes scaled deltas for a box (exposed for tools).
pub fn refine(b: &BoundingBox, scaled_delta: &[f64]) -> BoundingBox {
    decode_delta(b, &detnet::unscaled(scaled_delta))
}

/// Sidecar of a parameter checkpoint: enough to rebuild the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    pub iteration: usize,
    pub metrics: IterationMetrics,
    pub config_hash: String,
    pub config: TrainingConfig,
    pub categories: Vec<(usize, String)>,
    pub novel_ids: Vec<usize>,
}

/// Writes `iter_<t>.ckpt` and `iter_<t>.json` into `dir`.
pub fn save_checkpoint(st: &TrainingState, rec: &IterationRecord, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ckpt = dir.join(format!("iter_{}.ckpt", st.iteration));
    let state = ckpt.with_extension("json");
    checkpoint::save(&st.model.store, &ckpt)?;
    let sidecar = CheckpointState {
        iteration: st.iteration,
        metrics: rec.metrics,
        config_hash: st.cfg.hash(),
        config: st.cfg.clone(),
        categories: st.data.categories.clone(),
        novel_ids: st.data.novel_ids.clone(),
    };
    let text = serde_json::to_string_pretty(&sidecar).expect("state serializes");
    std::fs::write(&state, text).map_err(|e| Error::io(&state, e))?;
    Ok((ckpt, state))
}

/// Rebuilds a model from a checkpoint and its sidecar (same stem, `.json`).
pub fn load_checkpoint(ckpt: &Path) -> Result<(CheckpointState, Model)> {
    let state_path = ckpt.with_extension("json");
    let state: CheckpointState = crate::config::from_json_file(&state_path).map_err(|e| match e {
        Error::Config { field, msg } => Error::Checkpoint(format!("{}: field `{field}`: {msg}", state_path.display())),
        other => other,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(state.config.seed);
    let mut model = Model::new(&state.config, state.categories.len(), state.novel_ids.clone(), true, &mut rng)?;
    checkpoint::restore(&mut model.store, checkpoint::load(ckpt)?)?;
    Ok((state, model))
}

/// Same-category classification quality of a similarity network trained on
/// source ground-truth features: rows for base categories (source
/// validation boxes) and novel categories (target test boxes).
pub fn similarity_eval(st: &TrainingState, threshold: f64, cap: usize) -> Result<Vec<(String, BinaryMetrics)>> {
    let mut rng = sub_rng(st.cfg.seed, st.iteration, 4);
    let pool = st.gt_features(&st.data.source)?;
    let scfg = SimTrainConfig {
        k: st.cfg.k,
        m: st.cfg.m,
        iterations: st.cfg.simnet_iterations,
        lr: st.cfg.simnet_lr,
        momentum: st.cfg.momentum,
        weight_decay: st.cfg.weight_decay,
        hidden: 256,
    };
    let (store, net, _) = simnet::train_simnet(&pool, &scfg, &mut rng)?;
    let base = st.gt_features(&st.data.source_val)?;
    let novel = st.gt_features(&st.data.test)?;
    let (_, mb) = simnet::evaluate_similarity_binary(&net, &store, &base, threshold, cap, &mut rng);
    let (_, mn) = simnet::evaluate_similarity_binary(&net, &store, &novel, threshold, cap, &mut rng);
    Ok(vec![("base".to_string(), mb), ("novel".to_string(), mn)])
}
