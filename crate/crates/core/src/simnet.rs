//! Pairwise similarity network: balanced batches of base-category region
//! features, pair construction, training, and average-similarity weights
//! for groups of pseudo boxes sharing a label.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{BinaryCounts, BinaryMetrics};
use crate::nn::{bce, params::he_normal, CustomOp, Linear, ParamId, ParamStore, Sgd, Tape, Tensor, Var};

/// Region features grouped by category id.
pub type FeaturePool = BTreeMap<usize, Vec<Vec<f64>>>;

#[derive(Debug, Clone, PartialEq)]
pub struct SimBatch {
    pub dim: usize,
    /// `B x d`, row-major.
    pub features: Vec<f64>,
    pub category_of_row: Vec<usize>,
}

impl SimBatch {
    pub fn rows(&self) -> usize {
        self.category_of_row.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseBatch {
    /// `B^2 x 2d`; row `i * B + j` is `[F_i, F_j]`.
    pub pairs: Vec<f64>,
    pub labels: Vec<f64>,
}

/// Picks `k` distinct categories, then `m` features from each (without
/// replacement when the category has at least `m`, with replacement
/// otherwise). Rows are grouped by category in the order drawn.
pub fn sample_balanced_batch<R: Rng>(pool: &FeaturePool, k: usize, m: usize, rng: &mut R) -> Result<SimBatch> {
    let avail: Vec<usize> = pool.iter().filter(|(_, v)| !v.is_empty()).map(|(c, _)| *c).collect();
    if avail.len() < k {
        return Err(Error::Sampling(format!("need {k} categories with features, only {} available ({} short)", avail.len(), k - avail.len())));
    }
    let dim = pool[&avail[0]][0].len();
    let cats: Vec<usize> = avail.choose_multiple(rng, k).copied().collect();
    let mut features = Vec::with_capacity(k * m * dim);
    let mut category_of_row = Vec::with_capacity(k * m);
    for c in cats {
        let items = &pool[&c];
        let picks: Vec<usize> = if items.len() >= m {
            rand::seq::index::sample(rng, items.len(), m).into_vec()
        } else {
            (0..m).map(|_| rng.gen_range(0..items.len())).collect()
        };
        for i in picks {
            features.extend_from_slice(&items[i]);
            category_of_row.push(c);
        }
    }
    Ok(SimBatch { dim, features, category_of_row })
}

pub fn build_pairwise(batch: &SimBatch) -> PairwiseBatch {
    let (b, d) = (batch.rows(), batch.dim);
    let mut pairs = Vec::with_capacity(b * b * 2 * d);
    let mut labels = Vec::with_capacity(b * b);
    for i in 0..b {
        for j in 0..b {
            pairs.extend_from_slice(&batch.features[i * d..(i + 1) * d]);
            pairs.extend_from_slice(&batch.features[j * d..(j + 1) * d]);
            labels.push(if batch.category_of_row[i] == batch.category_of_row[j] { 1.0 } else { 0.0 });
        }
    }
    PairwiseBatch { pairs, labels }
}

/// `out[i * B + j] = p[i] + q[j]`: the first layer on `[F_i, F_j]` without
/// materialising the pairs.
struct PairSum {
    b: usize,
    h: usize,
}

impl CustomOp for PairSum {
    fn name(&self) -> &'static str {
        "pair_sum"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (b, h) = (self.b, self.h);
        let mut gp = Tensor::zeros(&[b, h]);
        let mut gq = Tensor::zeros(&[b, h]);
        let g = grad.data();
        for i in 0..b {
            for j in 0..b {
                let row = &g[(i * b + j) * h..][..h];
                for (a, v) in gp.data_mut()[i * h..(i + 1) * h].iter_mut().zip(row) {
                    *a += v;
                }
                for (a, v) in gq.data_mut()[j * h..(j + 1) * h].iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
        vec![Some(gp), Some(gq)]
    }
}

fn pair_sum(tape: &mut Tape, p: Var, q: Var) -> Var {
    let s = tape.value(p).shape().to_vec();
    let (b, h) = (s[0], s[1]);
    let (pv, qv) = (tape.value(p).data(), tape.value(q).data());
    let mut out = Vec::with_capacity(b * b * h);
    for i in 0..b {
        for j in 0..b {
            out.extend(pv[i * h..(i + 1) * h].iter().zip(&qv[j * h..(j + 1) * h]).map(|(x, y)| x + y));
        }
    }
    let value = Tensor::from_vec(&[b * b, h], out).expect("pair shape");
    tape.custom(Box::new(PairSum { b, h }), vec![p, q], value)
}

#[derive(Debug, Clone)]
pub struct SimNet {
    pub dim: usize,
    pub hidden: usize,
    /// `[2d, hidden]` first-layer weight over concatenated pairs.
    pub w1: ParamId,
    pub b1: ParamId,
    pub fc2: Linear,
}

impl SimNet {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, hidden: usize, rng: &mut R) -> Self {
        let w1 = store.add("simnet.fc1.w", he_normal(&[2 * dim, hidden], 2 * dim, rng));
        let b1 = store.add("simnet.fc1.b", Tensor::zeros(&[hidden]));
        let fc2 = Linear::new_small(store, "simnet.fc2", hidden, 1, 0.01, rng);
        SimNet { dim, hidden, w1, b1, fc2 }
    }

    fn tail(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Var {
        let h = tape.relu(h);
        let logits = self.fc2.forward(tape, store, h);
        tape.sigmoid(logits)
    }

    /// Scores `[B^2, 1]` of all ordered pairs of the rows of `feats` (`[B, d]`).
    pub fn forward_all_pairs(&self, tape: &mut Tape, store: &ParamStore, feats: Var) -> Var {
        let (d, h) = (self.dim, self.hidden);
        let w = tape.param(store, self.w1);
        let b = tape.param(store, self.b1);
        let wl = tape.gather(w, (0..d * h).collect(), &[d, h]);
        let wr = tape.gather(w, (d * h..2 * d * h).collect(), &[d, h]);
        let p = tape.linear(feats, wl, Some(b));
        let q = tape.linear(feats, wr, None);
        let s = pair_sum(tape, p, q);
        self.tail(tape, store, s)
    }

    /// Scores `[P, 1]` of explicit pair rows (`[P, 2d]`).
    pub fn forward_pairs(&self, tape: &mut Tape, store: &ParamStore, pairs: Var) -> Var {
        let w = tape.param(store, self.w1);
        let b = tape.param(store, self.b1);
        let h = tape.linear(pairs, w, Some(b));
        self.tail(tape, store, h)
    }

    /// `M x M` similarity matrix of a group of features.
    pub fn similarity_matrix(&self, store: &ParamStore, feats: &[Vec<f64>]) -> Vec<f64> {
        let mut tape = Tape::new();
        let flat: Vec<f64> = feats.iter().flatten().copied().collect();
        let x = tape.input(Tensor::from_vec(&[feats.len(), self.dim], flat).expect("feature rows"));
        let s = self.forward_all_pairs(&mut tape, store, x);
        tape.value(s).data().to_vec()
    }
}

/// Mean binary cross-entropy over pairs.
pub fn simnet_loss(scores: &[f64], labels: &[f64]) -> f64 {
    scores.iter().zip(labels).map(|(&a, &t)| bce(a, t)).sum::<f64>() / scores.len() as f64
}

/// Tape form of [`simnet_loss`].
pub fn simnet_loss_var(tape: &mut Tape, scores: Var, labels: Vec<f64>) -> Var {
    let n = labels.len();
    tape.weighted_bce(scores, labels, vec![1.0; n], 1.0 / n as f64)
}

/// Average symmetrised similarity per row, diagonal included:
/// `w_i = (1/M) sum_j (a_ij + a_ji) / 2`.
pub fn assign_weights(a: &[f64], m: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * m, "similarity matrix must be M x M");
    (0..m).map(|i| (0..m).map(|j| 0.5 * (a[i * m + j] + a[j * m + i])).sum::<f64>() / m as f64).collect()
}

/// Cosine-similarity matrix clipped to `[0, 1]`; the baseline the learned
/// similarity is compared against.
pub fn cosine_matrix(feats: &[Vec<f64>]) -> Vec<f64> {
    let norms: Vec<f64> = feats.iter().map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let m = feats.len();
    let mut a = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            let dot: f64 = feats[i].iter().zip(&feats[j]).map(|(x, y)| x * y).sum();
            let den = norms[i] * norms[j];
            a[i * m + j] = if den > 0.0 { (dot / den).clamp(0.0, 1.0) } else { 0.0 };
        }
    }
    a
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimTrainConfig {
    pub k: usize,
    pub m: usize,
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub hidden: usize,
}

impl Default for SimTrainConfig {
    fn default() -> Self {
        SimTrainConfig { k: 8, m: 8, iterations: 300, lr: 0.02, momentum: 0.9, weight_decay: 1e-4, hidden: 256 }
    }
}

/// Trains a fresh network on balanced batches from `pool`; returns the
/// network with its parameters and the per-iteration losses.
pub fn train_simnet<R: Rng>(pool: &FeaturePool, cfg: &SimTrainConfig, rng: &mut R) -> Result<(ParamStore, SimNet, Vec<f64>)> {
    let dim = pool.values().find_map(|v| v.first()).map(Vec::len).ok_or_else(|| Error::Sampling("empty feature pool".into()))?;
    let mut store = ParamStore::new();
    let net = SimNet::new(&mut store, dim, cfg.hidden, rng);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.iterations);
    let k = cfg.k.min(pool.values().filter(|v| !v.is_empty()).count());
    for it in 0..cfg.iterations {
        opt.lr = if it < cfg.iterations * 3 / 4 { cfg.lr } else { cfg.lr * 0.1 };
        let batch = sample_balanced_batch(pool, k, cfg.m, rng)?;
        let b = batch.rows();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(&[b, dim], batch.features.clone())?);
        let s = net.forward_all_pairs(&mut tape, &store, x);
        let labels = build_pairwise_labels(&batch.category_of_row);
        let loss = simnet_loss_var(&mut tape, s, labels);
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::NumericAbort { stage: "simnet".into(), iteration: it, detail: format!("loss {lv}") });
        }
        losses.push(lv);
        let grads = tape.backward(loss);
        opt.step(&mut store, &grads.into_param_map(), |_| true);
    }
    Ok((store, net, losses))
}

fn build_pairwise_labels(cats: &[usize]) -> Vec<f64> {
    cats.iter().flat_map(|a| cats.iter().map(move |b| if a == b { 1.0 } else { 0.0 })).collect()
}

/// Binary same-category evaluation: for each category with `N_c` features,
/// take all of them plus `N_c` features drawn from other categories and
/// score all `(2 N_c)^2` ordered pairs at `threshold`. Counts are summed
/// over categories (micro average). At most `cap` positives per category.
pub fn evaluate_similarity_binary<R: Rng>(
    net: &SimNet,
    store: &ParamStore,
    pool: &FeaturePool,
    threshold: f64,
    cap: usize,
    rng: &mut R,
) -> (BinaryCounts, BinaryMetrics) {
    let mut counts = BinaryCounts::default();
    for (&c, items) in pool {
        if items.is_empty() {
            log::warn!("category {c} has no features; skipped");
            continue;
        }
        let pos: Vec<&Vec<f64>> = items.choose_multiple(rng, cap.min(items.len())).collect();
        let others: Vec<(usize, &Vec<f64>)> = pool.iter().filter(|(k, _)| **k != c).flat_map(|(k, v)| v.iter().map(move |f| (*k, f))).collect();
        let negs: Vec<&(usize, &Vec<f64>)> = others.choose_multiple(rng, pos.len()).collect();
        let mut feats: Vec<Vec<f64>> = pos.iter().map(|f| (*f).clone()).collect();
        let mut cats = vec![c; pos.len()];
        for (k, f) in negs {
            feats.push((*f).clone());
            cats.push(*k);
        }
        let scores = net.similarity_matrix(store, &feats);
        let labels = build_pairwise_labels(&cats);
        for (s, t) in scores.iter().zip(&labels) {
            counts.add(*s >= threshold, *t == 1.0);
        }
    }
    (counts, counts.metrics())
}

/// CSV with one row per evaluated split.
pub fn similarity_csv(rows: &[(&str, BinaryMetrics)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["split", "precision", "recall", "f1"]).expect("in-memory write");
    for (split, m) in rows {
        w.write_record([split.to_string(), format!("{:.6}", m.precision), format!("{:.6}", m.recall), format!("{:.6}", m.f1)])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool(counts: &[(usize, usize)], dim: usize) -> FeaturePool {
        counts.iter().map(|&(c, n)| (c, (0..n).map(|i| vec![(c * 100 + i) as f64; dim]).collect())).collect()
    }

    #[test]
    fn batch_is_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = pool(&(0..10).map(|c| (c, 5 + c)).collect::<Vec<_>>(), 3);
        let b = sample_balanced_batch(&p, 8, 8, &mut rng).unwrap();
        assert_eq!(b.rows(), 64);
        let mut per: BTreeMap<usize, usize> = BTreeMap::new();
        for c in &b.category_of_row {
            *per.entry(*c).or_default() += 1;
        }
        assert_eq!(per.len(), 8);
        assert!(per.values().all(|&n| n == 8));
        assert!(matches!(sample_balanced_batch(&p, 11, 8, &mut rng), Err(Error::Sampling(_))));
    }

    #[test]
    fn single_category_all_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_balanced_batch(&pool(&[(4, 10)], 2), 1, 8, &mut rng).unwrap();
        assert!(build_pairwise(&b).labels.iter().all(|&t| t == 1.0));
    }

    #[test]
    fn pairwise_layout() {
        let b = SimBatch { dim: 3, features: vec![1., 2., 3., 4., 5., 6.], category_of_row: vec![0, 1] };
        let p = build_pairwise(&b);
        assert_eq!(p.pairs.len(), 4 * 6);
        assert_eq!(&p.pairs[6..12], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(p.labels, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn decomposed_first_layer_matches_explicit_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let net = SimNet::new(&mut store, 4, 16, &mut rng);
        *store.get_mut(net.b1) = Tensor::from_vec(&[16], (0..16).map(|i| 0.1 * i as f64 - 0.5).collect()).unwrap();
        let feats: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let batch = SimBatch { dim: 4, features: feats.clone(), category_of_row: vec![0, 1, 0] };
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(&[3, 4], feats).unwrap());
        let a = net.forward_all_pairs(&mut tape, &store, x);
        let pairs = tape.input(Tensor::from_vec(&[9, 8], build_pairwise(&batch).pairs).unwrap());
        let b = net.forward_pairs(&mut tape, &store, pairs);
        for (u, v) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_params_score_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let net = SimNet::new(&mut store, 3, 8, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            *store.get_mut(id) = store.get(id).map(|_| 0.0);
        }
        let a = net.similarity_matrix(&store, &[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 4.0]]);
        assert!(a.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn loss_fixed_points() {
        assert!(simnet_loss(&[1.0, 0.0], &[1.0, 0.0]) < 1e-10);
        assert!((simnet_loss(&[0.5; 6], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn weight_fixed_cases() {
        assert_eq!(assign_weights(&[1.0; 9], 3), vec![1.0; 3]);
        assert_eq!(assign_weights(&[1.0, 0.0, 0.0, 1.0], 2), vec![0.5, 0.5]);
        let sym = [0.9, 0.2, 0.4, 0.2, 0.7, 0.1, 0.4, 0.1, 0.5];
        let w = assign_weights(&sym, 3);
        for i in 0..3 {
            let mean = (sym[3 * i] + sym[3 * i + 1] + sym[3 * i + 2]) / 3.0;
            assert!((w[i] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn csv_rows() {
        let m = BinaryMetrics { precision: 0.5, recall: 1.0, f1: 2.0 / 3.0 };
        assert_eq!(similarity_csv(&[("base", m)]), "split,precision,recall,f1\nbase,0.500000,1.000000,0.666667\n");
    }
}
