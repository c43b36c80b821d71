//! Coarse mask generator: three convolutions over the penultimate backbone
//! map, a constant background channel, a channel softmax, normalised global
//! weighted pooling to image-level scores, and a multi-label soft-margin loss.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Conv2d, CustomOp, ParamStore, Tape, Tensor, Var};

/// Value of the appended background logit.
pub const BACKGROUND: f64 = 0.0;
/// Denominator offset of the pooling.
pub const EPSILON: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct MaskGen {
    pub convs: [Conv2d; 3],
    pub categories: usize,
}

/// Tape handles of one mask-head pass.
#[derive(Debug, Clone, Copy)]
pub struct MaskOut {
    /// `[N, C, H, W]` pre-softmax maps.
    pub p: Var,
    /// `[N, C + 1, H, W]` soft masks, background last.
    pub m: Var,
    /// `[N, C]` pooled image-level logits.
    pub y: Var,
}

impl MaskGen {
    pub fn new<R: Rng>(store: &mut ParamStore, in_channels: usize, hidden: usize, categories: usize, rng: &mut R) -> Self {
        let convs = [
            Conv2d::new(store, "mask.conv1", in_channels, hidden, 3, 1, rng),
            Conv2d::new(store, "mask.conv2", hidden, hidden, 3, 1, rng),
            Conv2d::new(store, "mask.conv3", hidden, categories, 3, 1, rng),
        ];
        MaskGen { convs, categories }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> MaskOut {
        let mut x = features;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(tape, store, x);
            if i < 2 {
                x = tape.relu(x);
            }
        }
        let p = x;
        let m = mask_softmax(tape, p);
        let y = ngwp(tape, p, m);
        MaskOut { p, m, y }
    }
}

/// Plain-value form of a mask: maps, soft masks and pooled scores for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseMask {
    pub categories: usize,
    pub height: usize,
    pub width: usize,
    pub p: Vec<f64>,
    pub m: Vec<f64>,
    pub background_constant: f64,
}

impl CoarseMask {
    /// Builds the soft masks from `p` (`[C, H, W]`).
    pub fn from_logits(p: Vec<f64>, categories: usize, height: usize, width: usize) -> Result<Self> {
        if p.len() != categories * height * width {
            return Err(Error::Shape(format!("mask logits need {} values, got {}", categories * height * width, p.len())));
        }
        let m = softmax_with_background(&p, 1, categories, height * width);
        Ok(CoarseMask { categories, height, width, p, m, background_constant: BACKGROUND })
    }

    /// Soft mask of channel `c` (`c == categories` is the background).
    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.m[c * hw..(c + 1) * hw]
    }

    pub fn score(&self) -> MaskScore {
        MaskScore { y: ngwp_values(&self.p, &self.m, 1, self.categories, self.height * self.width), epsilon: EPSILON }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskScore {
    pub y: Vec<f64>,
    pub epsilon: f64,
}

/// Mean over categories of `softplus(y) - t * y`, the numerically stable
/// form of the per-category soft-margin term.
pub fn mask_loss(y: &[f64], labels: &[f64]) -> f64 {
    let c = y.len() as f64;
    y.iter().zip(labels).map(|(&y, &t)| softplus(y) - t * y).sum::<f64>() / c
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn softmax_with_background(p: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * (c + 1) * hw];
    for img in 0..n {
        let pi = &p[img * c * hw..(img + 1) * c * hw];
        let mi = &mut m[img * (c + 1) * hw..(img + 1) * (c + 1) * hw];
        for s in 0..hw {
            let mx = (0..c).map(|k| pi[k * hw + s]).fold(BACKGROUND, f64::max);
            let mut z = (BACKGROUND - mx).exp();
            for k in 0..c {
                let e = (pi[k * hw + s] - mx).exp();
                mi[k * hw + s] = e;
                z += e;
            }
            mi[c * hw + s] = (BACKGROUND - mx).exp() / z;
            for k in 0..c {
                mi[k * hw + s] /= z;
            }
        }
    }
    m
}

fn ngwp_values(p: &[f64], m: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * c];
    for img in 0..n {
        for k in 0..c {
            let pk = &p[(img * c + k) * hw..][..hw];
            let mk = &m[(img * (c + 1) + k) * hw..][..hw];
            let num: f64 = pk.iter().zip(mk).map(|(a, b)| a * b).sum();
            let den: f64 = EPSILON + mk.iter().sum::<f64>();
            y[img * c + k] = num / den;
        }
    }
    y
}

fn dims(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2] * s[3])
}

struct MaskSoftmax;

impl CustomOp for MaskSoftmax {
    fn name(&self) -> &'static str {
        "mask_softmax"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (n, c, hw) = dims(inputs[0]);
        let (m, g) = (output.data(), grad.data());
        let mut gp = Tensor::zeros(inputs[0].shape());
        let gpd = gp.data_mut();
        for img in 0..n {
            let base = img * (c + 1) * hw;
            for s in 0..hw {
                let dot: f64 = (0..=c).map(|k| m[base + k * hw + s] * g[base + k * hw + s]).sum();
                for k in 0..c {
                    let i = base + k * hw + s;
                    gpd[(img * c + k) * hw + s] = m[i] * (g[i] - dot);
                }
            }
        }
        vec![Some(gp)]
    }
}

/// Channel softmax over `p` (`[N, C, H, W]`) with a constant background
/// logit appended as channel `C`.
pub fn mask_softmax(tape: &mut Tape, p: Var) -> Var {
    let pv = tape.value(p);
    let (n, c, hw) = dims(pv);
    let s = pv.shape();
    let value = Tensor::from_vec(&[n, c + 1, s[2], s[3]], softmax_with_background(pv.data(), n, c, hw)).expect("mask shape");
    tape.custom(Box::new(MaskSoftmax), vec![p], value)
}

struct Ngwp;

impl CustomOp for Ngwp {
    fn name(&self) -> &'static str {
        "ngwp"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (n, c, hw) = dims(inputs[0]);
        let (p, m, y, g) = (inputs[0].data(), inputs[1].data(), output.data(), grad.data());
        let mut gp = Tensor::zeros(inputs[0].shape());
        let mut gm = Tensor::zeros(inputs[1].shape());
        for img in 0..n {
            for k in 0..c {
                let pi = (img * c + k) * hw;
                let mi = (img * (c + 1) + k) * hw;
                let den = EPSILON + m[mi..mi + hw].iter().sum::<f64>();
                let gy = g[img * c + k] / den;
                let yk = y[img * c + k];
                for s in 0..hw {
                    gp.data_mut()[pi + s] = gy * m[mi + s];
                    gm.data_mut()[mi + s] = gy * (p[pi + s] - yk);
                }
            }
        }
        vec![Some(gp), Some(gm)]
    }
}

/// Normalised global weighted pooling: `y_c = sum(p_c * m_c) / (1 + sum(m_c))`.
pub fn ngwp(tape: &mut Tape, p: Var, m: Var) -> Var {
    let (n, c, hw) = dims(tape.value(p));
    let y = ngwp_values(tape.value(p).data(), tape.value(m).data(), n, c, hw);
    let value = Tensor::from_vec(&[n, c], y).expect("score shape");
    tape.custom(Box::new(Ngwp), vec![p, m], value)
}

struct MeanPool;

impl CustomOp for MeanPool {
    fn name(&self) -> &'static str {
        "mean_pool"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (_, _, hw) = dims(inputs[0]);
        let g: Vec<f64> = grad.data().iter().flat_map(|&v| std::iter::repeat(v / hw as f64).take(hw)).collect();
        vec![Some(Tensor::from_vec(inputs[0].shape(), g).expect("grad shape"))]
    }
}

/// Plain spatial mean of `p` (`[N, C, H, W]` to `[N, C]`), the warm-up
/// score. Unlike nGWP it cannot be raised by emptying a channel, so early
/// training settles on masks that cover the objects.
pub fn mean_pool(tape: &mut Tape, p: Var) -> Var {
    let (n, c, hw) = dims(tape.value(p));
    let y: Vec<f64> = tape.value(p).data().chunks(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect();
    let value = Tensor::from_vec(&[n, c], y).expect("score shape");
    tape.custom(Box::new(MeanPool), vec![p], value)
}

struct SoftMargin {
    labels: Vec<f64>,
    /// Per-entry factor: 1 / (active categories of the image) or 0.
    factors: Vec<f64>,
    scale: f64,
}

impl CustomOp for SoftMargin {
    fn name(&self) -> &'static str {
        "soft_margin"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let s = grad.item() * self.scale;
        let g = inputs[0].data().iter().zip(&self.labels).zip(&self.factors).map(|((&y, &t), &f)| s * f * (sigmoid(y) - t)).collect();
        vec![Some(Tensor::from_vec(inputs[0].shape(), g).expect("grad shape"))]
    }
}

/// `scale * sum over images of mean_{active c} soft-margin(y_c, t_c)`.
/// `active` selects which categories each image is supervised on; `None`
/// supervises all of them.
pub fn soft_margin_loss(tape: &mut Tape, y: Var, labels: &[f64], active: Option<&[bool]>, scale: f64) -> Var {
    let s = tape.value(y).shape().to_vec();
    let (n, c) = (s[0], s[1]);
    assert_eq!(labels.len(), n * c, "soft margin label count");
    let mut factors = vec![0.0; n * c];
    for img in 0..n {
        let act = |k: usize| active.map_or(true, |a| a[img * c + k]);
        let count = (0..c).filter(|&k| act(k)).count();
        for k in 0..c {
            if act(k) {
                factors[img * c + k] = 1.0 / count as f64;
            }
        }
    }
    let yv = tape.value(y).data();
    let loss: f64 = yv.iter().zip(labels).zip(&factors).map(|((&y, &t), &f)| f * (softplus(y) - t * y)).sum();
    tape.custom(Box::new(SoftMargin { labels: labels.to_vec(), factors, scale }), vec![y], Tensor::scalar(scale * loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_when_logits_zero() {
        let m = CoarseMask::from_logits(vec![0.0; 3 * 4], 3, 2, 2).unwrap();
        assert!(m.m.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(m.score().y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturates_on_large_logit() {
        let mut p = vec![0.0; 3 * 4];
        p[4..8].fill(50.0);
        let m = CoarseMask::from_logits(p, 3, 2, 2).unwrap();
        assert!(m.channel(1).iter().all(|&v| v > 1.0 - 1e-15));
    }

    #[test]
    fn constant_channel_factorises() {
        let p: Vec<f64> = (0..2 * 9).map(|i| if i < 9 { 1.7 } else { (i as f64).sin() }).collect();
        let m = CoarseMask::from_logits(p, 2, 3, 3).unwrap();
        let s: f64 = m.channel(0).iter().sum();
        assert!((m.score().y[0] - 1.7 * s / (1.0 + s)).abs() < 1e-14);
    }

    #[test]
    fn soft_margin_fixed_points() {
        assert!((mask_loss(&[0.0; 4], &[1.0, 0.0, 1.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(mask_loss(&[50.0, -50.0], &[1.0, 0.0]) < 1e-20);
    }

    #[test]
    fn active_subset_averages_over_active_only() {
        let mut tape = Tape::new();
        let y = tape.input(Tensor::from_vec(&[1, 3], vec![0.3, -1.0, 2.0]).unwrap());
        let l = soft_margin_loss(&mut tape, y, &[1.0, 0.0, 0.0], Some(&[true, false, true]), 1.0);
        let want = mask_loss(&[0.3, 2.0], &[1.0, 0.0]);
        assert!((tape.value(l).item() - want).abs() < 1e-15);
    }
}
