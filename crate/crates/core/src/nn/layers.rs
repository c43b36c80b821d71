use rand::Rng;

use super::params::{he_normal, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            he_normal(&[out_channels, in_channels, kernel, kernel], in_channels * kernel * kernel, rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_channels]));
        Conv2d { w, b, stride, pad: kernel / 2, in_channels, out_channels }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.w"), he_normal(&[in_dim, out_dim], in_dim, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    /// Layer with a small-std weight init, for output heads.
    pub fn new_small<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, std: f64, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.w"), super::params::normal(&[in_dim, out_dim], std, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, Some(b))
    }
}
