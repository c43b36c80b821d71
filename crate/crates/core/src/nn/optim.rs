use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// SGD with momentum and decoupled-from-loss L2 weight decay, matching the
/// usual `g + wd * w`, `v = mu * v + g`, `w -= lr * v` update.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Learning-rate multipliers for parameters whose name starts with the
    /// given prefix; the first match wins.
    pub lr_mult: Vec<(String, f64)>,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd { lr, momentum, weight_decay, clip_norm: None, lr_mult: Vec::new(), velocity: Vec::new() }
    }

    pub fn with_clip(mut self, clip: f64) -> Self {
        self.clip_norm = Some(clip);
        self
    }

    pub fn with_lr_mult(mut self, prefix: &str, mult: f64) -> Self {
        self.lr_mult.push((prefix.to_string(), mult));
        self
    }

    /// Applies one update to every parameter in `grads` accepted by `trainable`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], trainable: impl Fn(&str) -> bool) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let active: Vec<&(ParamId, Tensor)> = grads.iter().filter(|(id, _)| trainable(store.name(*id))).collect();
        let norm = active.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt();
        let factor = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (id, g) in active {
            let name = store.name(*id);
            let lr = self.lr * self.lr_mult.iter().find(|(p, _)| name.starts_with(p.as_str())).map_or(1.0, |m| m.1);
            let w = store.get_mut(*id);
            let vel = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(w.shape()));
            for ((wv, vv), gv) in w.data_mut().iter_mut().zip(vel.data_mut()).zip(g.data()) {
                let d = factor * gv + self.weight_decay * *wv;
                *vv = self.momentum * *vv + d;
                *wv -= lr * *vv;
            }
        }
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_update_matches_hand_arithmetic() {
        let mut store = ParamStore::new();
        let id = store.add("m.w", Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        let g = vec![(id, Tensor::scalar(2.0))];
        opt.step(&mut store, &g, |_| true);
        assert!((store.get(id).item() - 0.8).abs() < 1e-15);
        opt.step(&mut store, &g, |_| true);
        // v = 0.9 * 2 + 2 = 3.8
        assert!((store.get(id).item() - 0.42).abs() < 1e-15);
    }

    #[test]
    fn frozen_params_untouched() {
        let mut store = ParamStore::new();
        let a = store.add("head.w", Tensor::scalar(1.0));
        let b = store.add("mil.w", Tensor::scalar(1.0));
        let mut opt = Sgd::new(0.5, 0.0, 0.0);
        opt.step(&mut store, &[(a, Tensor::scalar(1.0)), (b, Tensor::scalar(1.0))], |n| n.starts_with("mil"));
        assert_eq!(store.get(a).item(), 1.0);
        assert_eq!(store.get(b).item(), 0.5);
    }

    #[test]
    fn prefix_multiplier_scales_the_step() {
        let mut store = ParamStore::new();
        let a = store.add("mask.w", Tensor::scalar(1.0));
        let b = store.add("backbone.w", Tensor::scalar(1.0));
        let mut opt = Sgd::new(0.1, 0.0, 0.0).with_lr_mult("mask.", 4.0);
        opt.step(&mut store, &[(a, Tensor::scalar(1.0)), (b, Tensor::scalar(1.0))], |_| true);
        assert!((store.get(a).item() - 0.6).abs() < 1e-15);
        assert!((store.get(b).item() - 0.9).abs() < 1e-15);
    }
}
