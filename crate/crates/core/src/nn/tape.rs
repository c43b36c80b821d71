//! Reverse-mode differentiation over a linear tape of tensor operations.

use super::gemm::{gemm, MatRef};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Operation with a hand-written backward pass, defined outside the tape.
///
/// The forward value is computed by the caller and handed to
/// [`Tape::custom`] together with the op, which keeps whatever it needs for
/// the backward pass.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input (in order), or `None` for inputs
    /// that receive no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Scale(Var, f64),
    ConcatChannels(Var, Var),
    Reshape(Var),
    Gather { x: Var, idx: Vec<usize> },
    WeightedBce { p: Var, targets: Vec<f64>, weights: Vec<f64>, scale: f64 },
    WeightedSmoothL1 { x: Var, targets: Vec<f64>, weights: Vec<f64>, beta: f64, scale: f64 },
    Custom { op: Box<dyn CustomOp>, inputs: Vec<Var> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Probability floor used wherever a log of a probability is taken.
pub const LOG_CLAMP: f64 = 1e-12;

pub fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_CLAMP).ln()
}

/// Derivative of `clamped_ln` (zero where the clamp is active).
fn clamped_ln_grad(p: f64) -> f64 {
    if p > LOG_CLAMP {
        1.0 / p
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

/// Binary cross-entropy of probability `p` against target `t` with clamped logs.
pub fn bce(p: f64, t: f64) -> f64 {
    -(t * clamped_ln(p) + (1.0 - t) * clamped_ln(1.0 - p))
}

fn bce_grad(p: f64, t: f64) -> f64 {
    -(t * clamped_ln_grad(p) - (1.0 - t) * clamped_ln_grad(1.0 - p))
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: Vec<Var>, value: Tensor) -> Var {
        self.push(value, Op::Custom { op, inputs })
    }

    /// 2-D convolution over `[N, C, H, W]` input with `[O, C, k, k]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws[1], xs[1], "conv2d channel mismatch");
        let k = ws[2];
        let ho = (xs[2] + 2 * pad - k) / stride + 1;
        let wo = (xs[3] + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { n: xs[0], c: xs[1], h: xs[2], w: xs[3], o: ws[0], k, stride, pad, ho, wo };
        let ckk = geom.c * k * k;
        let hw = ho * wo;
        let mut cols = vec![0.0; geom.n * ckk * hw];
        let mut out = vec![0.0; geom.n * geom.o * hw];
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        for n in 0..geom.n {
            let col = &mut cols[n * ckk * hw..(n + 1) * ckk * hw];
            im2col(&xv[n * geom.c * geom.h * geom.w..], &geom, col);
            let o = &mut out[n * geom.o * hw..(n + 1) * geom.o * hw];
            for (oc, row) in o.chunks_mut(hw).enumerate() {
                row.fill(bv[oc]);
            }
            gemm(1.0, MatRef::new(wv, geom.o, ckk), MatRef::new(col, ckk, hw), 1.0, o);
        }
        let value = Tensor::from_vec(&[geom.n, geom.o, ho, wo], out).expect("conv output shape");
        self.push(value, Op::Conv2d { x, w, b, geom, cols })
    }

    /// `x @ w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (rows, inner) = self.value(x).as_matrix_dims();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws[0], inner, "linear input width mismatch");
        let out_dim = ws[1];
        let mut out = vec![0.0; rows * out_dim];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(out_dim) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            1.0,
            MatRef::new(self.value(x).data(), rows, inner),
            MatRef::new(self.value(w).data(), inner, out_dim),
            1.0,
            &mut out,
        );
        let mut shape = self.value(x).shape().to_vec();
        *shape.last_mut().unwrap() = out_dim;
        let value = Tensor::from_vec(&shape, out).expect("linear output shape");
        self.push(value, Op::Linear { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    /// Sum of scalar-shaped vars; `None` when the list is empty.
    pub fn sum_all(&mut self, vars: &[Var]) -> Option<Var> {
        let mut it = vars.iter().copied();
        let first = it.next()?;
        Some(it.fold(first, |acc, v| self.add(acc, v)))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert!(sa.len() == 4 && sb.len() == 4 && sa[0] == sb[0] && sa[2..] == sb[2..], "concat shape mismatch");
        let hw = sa[2] * sa[3];
        let (ca, cb) = (sa[1], sb[1]);
        let mut out = Vec::with_capacity(sa[0] * (ca + cb) * hw);
        for n in 0..sa[0] {
            out.extend_from_slice(&self.value(a).data()[n * ca * hw..(n + 1) * ca * hw]);
            out.extend_from_slice(&self.value(b).data()[n * cb * hw..(n + 1) * cb * hw]);
        }
        let v = Tensor::from_vec(&[sa[0], ca + cb, sa[2], sa[3]], out).expect("concat shape");
        self.push(v, Op::ConcatChannels(a, b))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshaped(shape).expect("reshape element count");
        self.push(v, Op::Reshape(x))
    }

    /// Picks flat elements of `x` into a tensor of the given shape.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Var {
        let src = self.value(x).data();
        let data: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
        let v = Tensor::from_vec(shape, data).expect("gather shape");
        self.push(v, Op::Gather { x, idx })
    }

    /// `scale * sum_i w_i * BCE(p_i, t_i)` over probabilities `p`.
    pub fn weighted_bce(&mut self, p: Var, targets: Vec<f64>, weights: Vec<f64>, scale: f64) -> Var {
        let pv = self.value(p).data();
        assert!(pv.len() == targets.len() && pv.len() == weights.len(), "weighted_bce length mismatch");
        let loss: f64 = pv.iter().zip(&targets).zip(&weights).map(|((&p, &t), &w)| w * bce(p, t)).sum();
        self.push(Tensor::scalar(scale * loss), Op::WeightedBce { p, targets, weights, scale })
    }

    /// `scale * sum_i w_i * sum_k smoothL1(x_ik - t_ik)` for `x` of shape
    /// `[R, K]`; rows with zero weight contribute nothing.
    pub fn weighted_smooth_l1(&mut self, x: Var, targets: Vec<f64>, weights: Vec<f64>, beta: f64, scale: f64) -> Var {
        let (rows, k) = self.value(x).as_matrix_dims();
        let xv = self.value(x).data();
        assert!(xv.len() == targets.len() && rows == weights.len(), "smooth_l1 length mismatch");
        let mut loss = 0.0;
        for r in 0..rows {
            if weights[r] == 0.0 {
                continue;
            }
            let s: f64 = (0..k).map(|j| smooth_l1(xv[r * k + j] - targets[r * k + j], beta)).sum();
            loss += weights[r] * s;
        }
        self.push(Tensor::scalar(scale * loss), Op::WeightedSmoothL1 { x, targets, weights, beta, scale })
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward expects a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d { x, w, b, geom, cols } => {
                    let (gx, gw, gb) = self.conv_backward(*w, geom, cols, &g);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Linear { x, w, b } => {
                    let (rows, inner) = self.value(*x).as_matrix_dims();
                    let out_dim = self.value(*w).shape()[1];
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    gemm(
                        1.0,
                        MatRef::new(g.data(), rows, out_dim),
                        MatRef::new(self.value(*w).data(), inner, out_dim).t(),
                        0.0,
                        gx.data_mut(),
                    );
                    let mut gw = Tensor::zeros(self.value(*w).shape());
                    gemm(
                        1.0,
                        MatRef::new(self.value(*x).data(), rows, inner).t(),
                        MatRef::new(g.data(), rows, out_dim),
                        0.0,
                        gw.data_mut(),
                    );
                    if let Some(b) = b {
                        let mut gb = Tensor::zeros(&[out_dim]);
                        for row in g.data().chunks(out_dim) {
                            for (a, v) in gb.data_mut().iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    for (gv, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let mut gx = g;
                    for (gv, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        *gv *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.map(|v| v * s)),
                Op::ConcatChannels(a, b) => {
                    let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                    let hw = sa[2] * sa[3];
                    let (ca, cb) = (sa[1], sb[1]);
                    let mut ga = Vec::with_capacity(sa[0] * ca * hw);
                    let mut gb = Vec::with_capacity(sa[0] * cb * hw);
                    for chunk in g.data().chunks((ca + cb) * hw) {
                        ga.extend_from_slice(&chunk[..ca * hw]);
                        gb.extend_from_slice(&chunk[ca * hw..]);
                    }
                    accumulate(&mut grads, *a, Tensor::from_vec(sa, ga).unwrap());
                    accumulate(&mut grads, *b, Tensor::from_vec(sb, gb).unwrap());
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, g.reshaped(&shape).unwrap());
                }
                Op::Gather { x, idx } => {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for (&i, &v) in idx.iter().zip(g.data()) {
                        gx.data_mut()[i] += v;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::WeightedBce { p, targets, weights, scale } => {
                    let s = g.item() * scale;
                    let gx = self.value(*p).data().iter().zip(targets).zip(weights).map(|((&p, &t), &w)| s * w * bce_grad(p, t)).collect();
                    accumulate(&mut grads, *p, Tensor::from_vec(self.value(*p).shape(), gx).unwrap());
                }
                Op::WeightedSmoothL1 { x, targets, weights, beta, scale } => {
                    let s = g.item() * scale;
                    let (_, k) = self.value(*x).as_matrix_dims();
                    let xv = self.value(*x).data();
                    let gx = (0..xv.len()).map(|i| s * weights[i / k] * smooth_l1_grad(xv[i] - targets[i], *beta)).collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(self.value(*x).shape(), gx).unwrap());
                }
                Op::Custom { op, inputs } => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                    let gs = op.backward(&ins, &node.value, &g);
                    debug_assert_eq!(gs.len(), inputs.len(), "{} returned wrong gradient count", op.name());
                    for (v, gi) in inputs.iter().zip(gs) {
                        if let Some(gi) = gi {
                            accumulate(&mut grads, *v, gi);
                        }
                    }
                }
            }
        }
        let mut params = Vec::new();
        let mut leaves = Vec::new();
        for (idx, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            match self.nodes[idx].op {
                Op::Param(id) => params.push((id, g)),
                Op::Leaf => leaves.push((Var(idx), g)),
                _ => {}
            }
        }
        Gradients { params, leaves }
    }

    fn conv_backward(&self, w: Var, geom: &ConvGeom, cols: &[f64], g: &Tensor) -> (Tensor, Tensor, Tensor) {
        let ckk = geom.c * geom.k * geom.k;
        let hw = geom.ho * geom.wo;
        let wv = self.value(w).data();
        let mut gw = Tensor::zeros(&[geom.o, geom.c, geom.k, geom.k]);
        let mut gb = Tensor::zeros(&[geom.o]);
        let mut gx = Tensor::zeros(&[geom.n, geom.c, geom.h, geom.w]);
        let mut gcol = vec![0.0; ckk * hw];
        let chw = geom.c * geom.h * geom.w;
        for n in 0..geom.n {
            let gout = &g.data()[n * geom.o * hw..(n + 1) * geom.o * hw];
            let col = &cols[n * ckk * hw..(n + 1) * ckk * hw];
            for (oc, row) in gout.chunks(hw).enumerate() {
                gb.data_mut()[oc] += row.iter().sum::<f64>();
            }
            gemm(1.0, MatRef::new(gout, geom.o, hw), MatRef::new(col, ckk, hw).t(), 1.0, gw.data_mut());
            gemm(1.0, MatRef::new(wv, geom.o, ckk).t(), MatRef::new(gout, geom.o, hw), 0.0, &mut gcol);
            col2im(&gcol, geom, &mut gx.data_mut()[n * chw..(n + 1) * chw]);
        }
        (gx, gw, gb)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let hw = g.ho * g.wo;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut col[((c * g.k + ky) * g.k + kx) * hw..][..hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let hw = g.ho * g.wo;
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &col[((c * g.k + ky) * g.k + kx) * hw..][..hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: Vec<(ParamId, Tensor)>,
    leaves: Vec<(Var, Tensor)>,
}

impl Gradients {
    /// Gradient of a parameter (summed over every time it was placed on the tape).
    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        let mut acc: Option<Tensor> = None;
        for (pid, g) in &self.params {
            if *pid == id {
                match &mut acc {
                    Some(a) => a.add_assign(g),
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.iter().find(|(l, _)| *l == v).map(|(_, g)| g)
    }

    /// Per-parameter gradients with repeated uses merged.
    pub fn into_param_map(self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for (id, g) in self.params {
            match out.iter_mut().find(|(p, _)| *p == id) {
                Some((_, a)) => a.add_assign(&g),
                None => out.push((id, g)),
            }
        }
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
