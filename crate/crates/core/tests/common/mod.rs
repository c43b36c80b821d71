//! Independent oracles and checks shared by the integration tests and the
//! acceptance report. Oracles are written from the defining formulas with
//! plain loops and no shared helpers from the library.
#![allow(dead_code)]

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use weakshot_core::detnet::{roi_align, MaskAttach};
use weakshot_core::evalkit::{average_precision, ApMode, Detection};
use weakshot_core::geometry::BoundingBox;
use weakshot_core::maskgen::{mask_softmax, mean_pool, ngwp, soft_margin_loss, CoarseMask, MaskGen};
use weakshot_core::milcls::{mil_fuse, mil_loss, mil_scores};
use weakshot_core::nn::{softmax_cross_entropy, Conv2d, Linear, ParamId, ParamStore, Sgd, Tape, Tensor, Var};
use weakshot_core::simnet::{assign_weights, build_pairwise, simnet_loss, simnet_loss_var, train_simnet, FeaturePool, SimNet, SimTrainConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn oracle_bce(p: f64, t: f64) -> f64 {
    let lp = p.max(1e-12).ln();
    let lq = (1.0 - p).max(1e-12).ln();
    -(t * lp + (1.0 - t) * lq)
}

/// Row softmax of `S_r`, column softmax of `S_d`, product summed over
/// regions. Inputs are `[n][c]`.
pub fn mil_oracle(sr: &[Vec<f64>], sd: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
    let n = sr.len();
    let c = sr[0].len();
    let mut a = vec![vec![0.0; c]; n];
    for i in 0..n {
        let z: f64 = sr[i].iter().map(|v| v.exp()).sum();
        for k in 0..c {
            a[i][k] = sr[i][k].exp() / z;
        }
    }
    let mut b = vec![vec![0.0; c]; n];
    for k in 0..c {
        let z: f64 = (0..n).map(|i| sd[i][k].exp()).sum();
        for i in 0..n {
            b[i][k] = sd[i][k].exp() / z;
        }
    }
    let y = (0..c).map(|k| (0..n).map(|i| a[i][k] * b[i][k]).sum()).collect();
    (a, b, y)
}

/// Per-pixel softmax over `C` logits plus a zero background logit, then
/// `y_c = sum p_c m_c / (1 + sum m_c)`. `p` is `[c][hw]`.
pub fn ngwp_oracle(p: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let c = p.len();
    let hw = p[0].len();
    let mut m = vec![vec![0.0; hw]; c + 1];
    for s in 0..hw {
        let z: f64 = 1.0 + (0..c).map(|k| p[k][s].exp()).sum::<f64>();
        for k in 0..c {
            m[k][s] = p[k][s].exp() / z;
        }
        m[c][s] = 1.0 / z;
    }
    let y = (0..c)
        .map(|k| {
            let num: f64 = (0..hw).map(|s| p[k][s] * m[k][s]).sum();
            let den: f64 = 1.0 + (0..hw).map(|s| m[k][s]).sum::<f64>();
            num / den
        })
        .collect();
    (m, y)
}

pub fn simloss_oracle(scores: &[f64], labels: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..scores.len() {
        total += oracle_bce(scores[i], labels[i]);
    }
    total / scores.len() as f64
}

/// AP by scanning every rank cutoff in exact rational arithmetic: the
/// interpolated precision at recall level r is the best precision over
/// cutoffs reaching r; AP sums it over recall increments.
pub fn ap_rational_oracle(ranked_hits: &[bool], n_gt: usize) -> Ratio<i64> {
    let n_gt = n_gt as i64;
    let cut: Vec<(Ratio<i64>, Ratio<i64>)> = (1..=ranked_hits.len())
        .map(|k| {
            let tp = ranked_hits[..k].iter().filter(|h| **h).count() as i64;
            (Ratio::new(tp, k as i64), Ratio::new(tp, n_gt))
        })
        .collect();
    let mut levels: Vec<Ratio<i64>> = cut.iter().map(|c| c.1).filter(|r| *r > Ratio::from_integer(0)).collect();
    levels.sort();
    levels.dedup();
    let mut ap = Ratio::from_integer(0);
    let mut prev = Ratio::from_integer(0);
    for r in levels {
        let best = cut.iter().filter(|c| c.1 >= r).map(|c| c.0).max().expect("some cutoff reaches r");
        ap += (r - prev) * best;
        prev = r;
    }
    ap
}

fn to_f64(r: Ratio<i64>) -> f64 {
    // Both parts are far below 2^53, so this single division rounds correctly.
    *r.numer() as f64 / *r.denom() as f64
}

pub struct OracleReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_abs_err: f64,
    pub exact_mismatches: usize,
}

impl OracleReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.instances >= 1000 && self.max_abs_err <= tol && self.exact_mismatches == 0
    }
}

pub fn check_mil(instances: usize, seed: u64) -> OracleReport {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = r.gen_range(1..=8);
        let c = r.gen_range(1..=5);
        let sr: Vec<Vec<f64>> = (0..n).map(|_| (0..c).map(|_| r.gen_range(-4.0..4.0)).collect()).collect();
        let sd: Vec<Vec<f64>> = (0..n).map(|_| (0..c).map(|_| r.gen_range(-4.0..4.0)).collect()).collect();
        let labels: Vec<f64> = (0..c).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let got = mil_scores(sr.concat(), sd.concat(), c).expect("non-empty");
        let (a, b, y) = mil_oracle(&sr, &sd);
        for i in 0..n {
            for k in 0..c {
                worst = worst.max((got.s_r_norm[i * c + k] - a[i][k]).abs());
                worst = worst.max((got.s_d_norm[i * c + k] - b[i][k]).abs());
            }
        }
        for k in 0..c {
            worst = worst.max((got.y_mil[k] - y[k]).abs());
        }
        let want: f64 = (0..c).map(|k| oracle_bce(y[k], labels[k])).sum();
        worst = worst.max((mil_loss(&got.y_mil, &labels) - want).abs());
    }
    OracleReport { name: "mil_forward", instances, max_abs_err: worst, exact_mismatches: 0 }
}

pub fn check_ngwp(instances: usize, seed: u64) -> OracleReport {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let c = r.gen_range(1..=4);
        let (h, w) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let p: Vec<Vec<f64>> = (0..c).map(|_| (0..h * w).map(|_| r.gen_range(-3.0..3.0)).collect()).collect();
        let mask = CoarseMask::from_logits(p.concat(), c, h, w).expect("shape");
        let (m, y) = ngwp_oracle(&p);
        for (k, mk) in m.iter().enumerate() {
            for (s, v) in mk.iter().enumerate() {
                worst = worst.max((mask.channel(k)[s] - v).abs());
            }
        }
        for (a, b) in mask.score().y.iter().zip(&y) {
            worst = worst.max((a - b).abs());
        }
    }
    OracleReport { name: "ngwp_score", instances, max_abs_err: worst, exact_mismatches: 0 }
}

pub fn check_simloss(instances: usize, seed: u64) -> OracleReport {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let b = r.gen_range(1..=6);
        let scores: Vec<f64> = (0..b * b).map(|_| r.gen_range(1e-6..1.0 - 1e-6)).collect();
        let labels: Vec<f64> = (0..b * b).map(|_| if r.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        worst = worst.max((simnet_loss(&scores, &labels) - simloss_oracle(&scores, &labels)).abs());
    }
    OracleReport { name: "simnet_loss", instances, max_abs_err: worst, exact_mismatches: 0 }
}

fn bx(x: f64, y: f64, s: f64) -> BoundingBox {
    BoundingBox::new(x, y, x + s, y + s).expect("valid box")
}

/// Random instances with at most 20 detections whose hit pattern is known
/// by construction: a detection copies a ground-truth box (hit unless that
/// box was already claimed by a better-ranked copy) or sits far away.
pub fn check_ap(instances: usize, seed: u64) -> OracleReport {
    let mut r = rng(seed);
    let mut mismatches = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n_images = r.gen_range(1..=3);
        let mut gts: BTreeMap<String, Vec<BoundingBox>> = BTreeMap::new();
        for i in 0..n_images {
            let k = r.gen_range(0..=3);
            gts.insert(format!("img{i}"), (0..k).map(|j| bx(40.0 * j as f64, 0.0, 20.0)).collect());
        }
        let n_gt: usize = gts.values().map(Vec::len).sum();
        if n_gt == 0 {
            continue;
        }
        let n_det = r.gen_range(0..=20);
        let mut conf: Vec<usize> = (0..n_det).collect();
        conf.shuffle(&mut r);
        let mut dets = Vec::new();
        for (d, &c) in conf.iter().enumerate() {
            let img = format!("img{}", r.gen_range(0..n_images));
            let boxes = &gts[&img];
            let (bbox, target) = if !boxes.is_empty() && r.gen_bool(0.6) {
                let j = r.gen_range(0..boxes.len());
                (boxes[j], Some((img.clone(), j)))
            } else {
                (bx(500.0 + d as f64, 500.0, 10.0), None)
            };
            dets.push((Detection { image_id: img, bbox, category: 0, confidence: c as f64 / 20.0 }, target));
        }
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].0.confidence.partial_cmp(&dets[a].0.confidence).expect("finite"));
        let mut claimed = std::collections::BTreeSet::new();
        let hits: Vec<bool> = order.iter().map(|&i| dets[i].1.clone().is_some_and(|t| claimed.insert(t))).collect();
        let want = ap_rational_oracle(&hits, n_gt);
        let refs: Vec<&Detection> = dets.iter().map(|d| &d.0).collect();
        let view: BTreeMap<&str, Vec<BoundingBox>> = gts.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
        let got = average_precision(&refs, &view, 0.5, ApMode::Area).expect("gt present");
        if got.to_bits() != to_f64(want).to_bits() {
            mismatches += 1;
        }
        worst = worst.max((got - to_f64(want)).abs());
    }
    OracleReport { name: "average_precision", instances, max_abs_err: worst, exact_mismatches: mismatches }
}

/// Central-difference check of every input of a tape-built scalar function.
/// Returns the worst `|a - n| / max(|a| + |n|, 1e-6)`.
pub fn grad_check_inputs(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
        let l = build(&mut tape, &vars);
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss);
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for e in 0..inputs[k].len() {
            let numeric = central(|h| {
                let mut xs = inputs.to_vec();
                xs[k].data_mut()[e] += h;
                eval(&xs)
            });
            worst = worst.max(rel_err(analytic.data()[e], numeric));
        }
    }
    worst
}

/// Same check for parameters; at most `per_tensor` coordinates per tensor.
pub fn grad_check_params(store: &ParamStore, ids: &[ParamId], per_tensor: usize, seed: u64, build: impl Fn(&mut Tape, &ParamStore) -> Var) -> f64 {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    let grads = tape.backward(loss);
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for &id in ids {
        let analytic = grads.param(id).unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        let n = store.get(id).len();
        let mut coords: Vec<usize> = (0..n).collect();
        coords.shuffle(&mut r);
        coords.truncate(per_tensor);
        for e in coords {
            let numeric = central(|h| {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[e] += h;
                let mut t = Tape::new();
                let l = build(&mut t, &s);
                t.value(l).item()
            });
            worst = worst.max(rel_err(analytic.data()[e], numeric));
        }
    }
    worst
}

fn central(f: impl Fn(f64) -> f64) -> f64 {
    const H: f64 = 1e-5;
    (f(H) - f(-H)) / (2.0 * H)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

pub fn randn(shape: &[usize], scale: f64, r: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(-1.0..1.0) * scale).collect()).expect("shape")
}

pub struct GradReport {
    pub name: &'static str,
    pub max_rel_err: f64,
}

/// Every loss of the three training steps, checked through the ops that
/// feed it.
pub fn gradient_suite() -> Vec<GradReport> {
    let mut out = Vec::new();
    let mut r = rng(11);

    // Objectness: region features -> linear -> sigmoid -> weighted BCE.
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "head.obj", 6, 1, &mut r);
    let x = randn(&[5, 6], 1.0, &mut r);
    let targets = vec![1.0, 0.0, 1.0, 0.0, 0.0];
    let weights = vec![1.0, 0.3, 0.7, 1.0, 0.5];
    let obj = |tape: &mut Tape, s: &ParamStore, x: Var| {
        let z = lin.forward(tape, s, x);
        let p = tape.sigmoid(z);
        tape.weighted_bce(p, targets.clone(), weights.clone(), 0.2)
    };
    let a = grad_check_inputs(std::slice::from_ref(&x), |t, v| obj(t, &store, v[0]));
    let b = grad_check_params(&store, &store.ids().collect::<Vec<_>>(), 50, 1, |t, s| {
        let xv = t.input(x.clone());
        obj(t, s, xv)
    });
    out.push(GradReport { name: "L_obj", max_rel_err: a.max(b) });

    // Regression: smooth L1 on deltas with per-row weights.
    let d = randn(&[4, 4], 2.0, &mut r);
    let tgt: Vec<f64> = (0..16).map(|_| r.gen_range(-2.0..2.0)).collect();
    let w = vec![1.0, 0.0, 0.5, 2.0];
    let e = grad_check_inputs(&[d], |t, v| t.weighted_smooth_l1(v[0], tgt.clone(), w.clone(), 1.0, 0.7));
    out.push(GradReport { name: "L_reg", max_rel_err: e });

    // Mask: logits -> background softmax -> nGWP -> soft margin (active subset).
    let p = randn(&[2, 3, 3, 3], 2.0, &mut r);
    let labels = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
    let active = vec![true, true, false, true, true, true];
    let e1 = grad_check_inputs(&[p], |t, v| {
        let m = mask_softmax(t, v[0]);
        let y = ngwp(t, v[0], m);
        soft_margin_loss(t, y, &labels, Some(&active), 0.5)
    });
    let mut store = ParamStore::new();
    let mg = MaskGen::new(&mut store, 4, 5, 3, &mut r);
    let feats = randn(&[2, 4, 4, 4], 1.0, &mut r);
    let e2 = grad_check_params(&store, &store.ids().collect::<Vec<_>>(), 25, 2, |t, s| {
        let f = t.input(feats.clone());
        let o = mg.forward(t, s, f);
        soft_margin_loss(t, o.y, &labels, None, 1.0)
    });
    out.push(GradReport { name: "L_mask (nGWP path)", max_rel_err: e1.max(e2) });

    // Warm-up score: plain spatial mean of the logits.
    let p = randn(&[2, 3, 2, 3], 2.0, &mut r);
    let e = grad_check_inputs(&[p], |t, v| {
        let y = mean_pool(t, v[0]);
        soft_margin_loss(t, y, &labels, Some(&active), 0.5)
    });
    out.push(GradReport { name: "L_mask (mean-pool warm-up)", max_rel_err: e });

    // MIL: both softmax paths, two images of different sizes.
    let sr = randn(&[7, 3], 2.0, &mut r);
    let sd = randn(&[7, 3], 2.0, &mut r);
    let lab = vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
    let e = grad_check_inputs(&[sr, sd], |t, v| {
        let y = mil_fuse(t, v[0], v[1], &[(0, 3), (3, 7)]).expect("segments");
        t.weighted_bce(y, lab.clone(), vec![1.0; 6], 0.5)
    });
    out.push(GradReport { name: "L_mil (S_r and S_d softmax paths)", max_rel_err: e });

    // Similarity: all-pairs network -> mean BCE over B^2 pairs.
    let mut store = ParamStore::new();
    let net = SimNet::new(&mut store, 5, 8, &mut r);
    let f = randn(&[4, 5], 1.0, &mut r);
    let cats = [0usize, 1, 0, 2];
    let pair_labels: Vec<f64> = cats.iter().flat_map(|a| cats.iter().map(move |b| (a == b) as u8 as f64)).collect();
    let sim = |t: &mut Tape, s: &ParamStore, x: Var| {
        let sc = net.forward_all_pairs(t, s, x);
        simnet_loss_var(t, sc, pair_labels.clone())
    };
    let a = grad_check_inputs(std::slice::from_ref(&f), |t, v| sim(t, &store, v[0]));
    let b = grad_check_params(&store, &store.ids().collect::<Vec<_>>(), 40, 3, |t, s| {
        let x = t.input(f.clone());
        sim(t, s, x)
    });
    out.push(GradReport { name: "L_sim", max_rel_err: a.max(b) });

    // Supporting ops: region pooling, convolution, class cross-entropy.
    let fm = randn(&[2, 3, 4, 4], 1.0, &mut r);
    let rois = vec![(0, BoundingBox::new(3.0, 5.0, 20.0, 27.0).unwrap()), (1, BoundingBox::new(0.0, 0.0, 31.0, 31.0).unwrap())];
    let e = grad_check_inputs(&[fm], |t, v| {
        let pooled = roi_align(t, v[0], 8, &rois, 4, 2).expect("rois");
        let sq = t.reshape(pooled, &[24, 1]);
        t.weighted_smooth_l1(sq, vec![0.1; 24], vec![1.0; 24], 1.0, 1.0)
    });
    out.push(GradReport { name: "roi_align", max_rel_err: e });

    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut store, "backbone.conv1", 2, 3, 3, 2, &mut r);
    let img = randn(&[1, 2, 6, 6], 1.0, &mut r);
    let build = |t: &mut Tape, s: &ParamStore, x: Var| {
        let y = conv.forward(t, s, x);
        let y = t.sigmoid(y);
        let n = t.value(y).len();
        t.weighted_bce(y, vec![0.3; n], vec![1.0; n], 1.0)
    };
    let a = grad_check_inputs(std::slice::from_ref(&img), |t, v| build(t, &store, v[0]));
    let b = grad_check_params(&store, &store.ids().collect::<Vec<_>>(), 60, 4, |t, s| {
        let x = t.input(img.clone());
        build(t, s, x)
    });
    out.push(GradReport { name: "conv2d", max_rel_err: a.max(b) });

    let logits = randn(&[5, 4], 2.0, &mut r);
    let e = grad_check_inputs(&[logits], |t, v| softmax_cross_entropy(t, v[0], vec![0, 3, 1, 1, 2], vec![1.0, 0.2, 0.0, 0.9, 0.4], 0.8));
    out.push(GradReport { name: "softmax cross-entropy", max_rel_err: e });
    out
}

/// Attach variants for tests that build small detectors.
pub const ATTACH: [MaskAttach; 2] = [MaskAttach::BMinus1, MaskAttach::BMinus2];

/// Synthetic clusters: `categories` well-separated centres in `dim`
/// dimensions with isotropic noise.
pub fn cluster_pool(categories: usize, per_cat: usize, dim: usize, noise: f64, r: &mut ChaCha8Rng) -> (FeaturePool, Vec<Vec<f64>>) {
    let centres: Vec<Vec<f64>> = (0..categories).map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let mut pool = FeaturePool::new();
    for (c, centre) in centres.iter().enumerate() {
        let items = (0..per_cat).map(|_| centre.iter().map(|v| v + noise * r.gen_range(-1.0..1.0)).collect()).collect();
        pool.insert(c, items);
    }
    (pool, centres)
}

/// Trains a similarity network on base clusters, then scores groups of 7
/// inliers from a held-out cluster plus one outlier from another held-out
/// cluster. Returns the fraction of trials where the outlier gets the
/// strictly smallest weight.
pub fn outlier_trials(trials: usize, seed: u64) -> f64 {
    outlier_trials_with(trials, seed, &OutlierSetup::default())
}

#[derive(Debug, Clone)]
pub struct OutlierSetup {
    pub base: usize,
    pub novel: usize,
    pub per_cat: usize,
    pub dim: usize,
    pub noise: f64,
    pub sim: SimTrainConfig,
}

impl Default for OutlierSetup {
    fn default() -> Self {
        OutlierSetup {
            base: 24,
            novel: 4,
            per_cat: 40,
            dim: 16,
            noise: 0.35,
            sim: SimTrainConfig { k: 8, m: 8, iterations: 1000, lr: 0.05, momentum: 0.9, weight_decay: 1e-4, hidden: 64 },
        }
    }
}

pub fn outlier_trials_with(trials: usize, seed: u64, setup: &OutlierSetup) -> f64 {
    let mut r = rng(seed);
    let (all, _) = cluster_pool(setup.base + setup.novel, setup.per_cat, setup.dim, setup.noise, &mut r);
    let base: FeaturePool = all.iter().filter(|(c, _)| **c < setup.base).map(|(c, v)| (*c, v.clone())).collect();
    let novel: Vec<&Vec<Vec<f64>>> = all.iter().filter(|(c, _)| **c >= setup.base).map(|(_, v)| v).collect();
    let (store, net, _) = train_simnet(&base, &setup.sim, &mut r).expect("enough base categories");
    let mut wins = 0;
    for _ in 0..trials {
        let (a, b) = {
            let mut idx: Vec<usize> = (0..novel.len()).collect();
            idx.shuffle(&mut r);
            (idx[0], idx[1])
        };
        let mut group: Vec<Vec<f64>> = novel[a].choose_multiple(&mut r, 7).cloned().collect();
        let pos = r.gen_range(0..8);
        group.insert(pos, novel[b].choose(&mut r).expect("non-empty").clone());
        let w = assign_weights(&net.similarity_matrix(&store, &group), 8);
        if (0..8).all(|i| i == pos || w[pos] < w[i]) {
            wins += 1;
        }
    }
    wins as f64 / trials as f64
}

/// Unused-import guard for helpers only some test targets touch.
pub fn _touch() {
    let _ = build_pairwise;
    let _ = Sgd::new;
}

/// Randomised sweep over the structural invariants (the proptest suite
/// covers the same ground with shrinking). Returns `(name, held)` pairs.
pub fn invariant_sweep(cases: usize, seed: u64) -> Vec<(&'static str, bool)> {
    use weakshot_core::milcls::{filter_source_pseudo, PseudoBox};
    use weakshot_core::simnet::sample_balanced_batch;
    let mut r = rng(seed);
    let (mut norm, mut range, mut pixels, mut weights, mut balance, mut filter) = (true, true, true, true, true, true);
    for _ in 0..cases {
        let n = r.gen_range(1..=9);
        let c = r.gen_range(1..=6);
        let sr: Vec<f64> = (0..n * c).map(|_| r.gen_range(-30.0..30.0)).collect();
        let sd: Vec<f64> = (0..n * c).map(|_| r.gen_range(-30.0..30.0)).collect();
        let s = mil_scores(sr, sd, c).expect("non-empty");
        norm &= (0..n).all(|i| ((0..c).map(|k| s.s_r_norm[i * c + k]).sum::<f64>() - 1.0).abs() < 1e-9);
        norm &= (0..c).all(|k| ((0..n).map(|i| s.s_d_norm[i * c + k]).sum::<f64>() - 1.0).abs() < 1e-9);
        range &= s.y_mil.iter().all(|y| (0.0..=1.0).contains(y));

        let (h, w) = (r.gen_range(1..=6), r.gen_range(1..=6));
        let p: Vec<f64> = (0..c * h * w).map(|_| r.gen_range(-40.0..40.0)).collect();
        let m = CoarseMask::from_logits(p, c, h, w).expect("shape");
        pixels &= (0..h * w).all(|px| ((0..=c).map(|k| m.channel(k)[px]).sum::<f64>() - 1.0).abs() < 1e-9);

        let mm = r.gen_range(1..=10);
        let a: Vec<f64> = (0..mm * mm).map(|_| r.gen_range(0.0..=1.0)).collect();
        let at: Vec<f64> = (0..mm * mm).map(|i| a[(i % mm) * mm + i / mm]).collect();
        let (wa, wt) = (assign_weights(&a, mm), assign_weights(&at, mm));
        weights &= wa.iter().zip(&wt).all(|(x, y)| (0.0..=1.0).contains(x) && x == y);

        let cats = r.gen_range(2..=12);
        let k = r.gen_range(1..=cats);
        let per = r.gen_range(1..=9);
        let pool: FeaturePool = (0..cats).map(|cat| (cat, (0..r.gen_range(1..15)).map(|i| vec![cat as f64, i as f64]).collect())).collect();
        let b = sample_balanced_batch(&pool, k, per, &mut r).expect("enough categories");
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &cat in &b.category_of_row {
            *counts.entry(cat).or_default() += 1;
        }
        balance &= b.rows() == k * per && counts.len() == k && counts.values().all(|&v| v == per);

        let rand_box = |r: &mut ChaCha8Rng| {
            let (x, y) = (r.gen_range(0.0..50.0), r.gen_range(0.0..50.0));
            BoundingBox::new(x, y, x + r.gen_range(1.0..30.0), y + r.gen_range(1.0..30.0)).expect("valid")
        };
        let gt: Vec<BoundingBox> = (0..r.gen_range(0..6)).map(|_| rand_box(&mut r)).collect();
        let ps: Vec<(usize, PseudoBox)> = (0..r.gen_range(0..12))
            .map(|i| (i, PseudoBox { bbox: rand_box(&mut r), pseudo_label: 0, mining_score: 0.9, weight: 1.0 }))
            .collect();
        let kept = filter_source_pseudo(&ps, &gt, 0.1);
        let worst = |b: &BoundingBox| gt.iter().map(|g| weakshot_core::geometry::iou(b, g)).fold(0.0, f64::max);
        filter &= kept.iter().all(|(_, p)| worst(&p.bbox) <= 0.1);
        filter &= ps.iter().all(|(i, p)| kept.iter().any(|k| k.0 == *i) == (worst(&p.bbox) <= 0.1));
    }
    vec![
        ("MIL softmax normalisations", norm),
        ("y_mil in [0,1]", range),
        ("per-pixel mask sums", pixels),
        ("weights in [0,1], transpose invariant", weights),
        ("sampler balance K x M", balance),
        ("source filter max IoU <= 0.1", filter),
    ]
}
