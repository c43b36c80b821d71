use super::tape::{clamped_ln, CustomOp, Tape, Var};
use super::tensor::Tensor;

fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(k).zip(out.chunks_mut(k)) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        for (ov, v) in o.iter_mut().zip(row) {
            *ov = (v - mx).exp() / z;
        }
    }
    out
}

struct SoftmaxCe {
    labels: Vec<usize>,
    weights: Vec<f64>,
    scale: f64,
}

impl CustomOp for SoftmaxCe {
    fn name(&self) -> &'static str {
        "softmax_ce"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (_, k) = inputs[0].as_matrix_dims();
        let mut p = softmax_rows(inputs[0].data(), k);
        let s = grad.item() * self.scale;
        for (r, row) in p.chunks_mut(k).enumerate() {
            row[self.labels[r]] -= 1.0;
            for v in row.iter_mut() {
                *v *= s * self.weights[r];
            }
        }
        vec![Some(Tensor::from_vec(inputs[0].shape(), p).expect("grad shape"))]
    }
}

/// `scale * sum_r w_r * -ln softmax(logits_r)[label_r]` over `[R, K]` logits.
pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, labels: Vec<usize>, weights: Vec<f64>, scale: f64) -> Var {
    let (rows, k) = tape.value(logits).as_matrix_dims();
    assert!(labels.len() == rows && weights.len() == rows, "softmax_ce length mismatch");
    let p = softmax_rows(tape.value(logits).data(), k);
    let loss: f64 = (0..rows).map(|r| -weights[r] * clamped_ln(p[r * k + labels[r]])).sum();
    tape.custom(Box::new(SoftmaxCe { labels, weights, scale }), vec![logits], Tensor::scalar(scale * loss))
}

/// Row-wise softmax of a `[R, K]` value.
pub fn softmax(values: &[f64], k: usize) -> Vec<f64> {
    softmax_rows(values, k)
}
