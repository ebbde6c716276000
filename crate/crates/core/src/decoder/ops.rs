//! Dense building blocks shared by the decoder stages.

use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x W + b` with `x` as rows of tokens.
pub fn linear(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    x.dot(&w) + &b
}

/// Max-shifted softmax in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Per-row normalization to zero mean and unit variance, then affine.
pub fn layer_norm(x: &Array2<f64>, gamma: ArrayView1<f64>, beta: ArrayView1<f64>) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (k, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gamma[k] + beta[k];
        }
    }
    out
}

/// Two-layer ReLU block.
pub fn feed_forward(
    x: ArrayView2<f64>,
    w1: ArrayView2<f64>,
    b1: ArrayView1<f64>,
    w2: ArrayView2<f64>,
    b2: ArrayView1<f64>,
) -> Array2<f64> {
    let hidden = linear(x, w1, b1).mapv(|v| v.max(0.0));
    linear(hidden.view(), w2, b2)
}

/// 3x3 convolution with zero padding; `kernel` is `(out, in, 3, 3)`.
pub fn conv3x3_same(input: ArrayView3<f64>, kernel: ArrayView4<f64>, bias: ArrayView1<f64>) -> Array3<f64> {
    let (cin, h, w) = input.dim();
    let cout = kernel.dim().0;
    let mut padded = Array3::<f64>::zeros((cin, h + 2, w + 2));
    padded.slice_mut(s![.., 1..h + 1, 1..w + 1]).assign(&input);
    let mut out = Array3::<f64>::zeros((cout, h, w));
    for o in 0..cout {
        let mut plane = out.index_axis_mut(Axis(0), o);
        plane.fill(bias[o]);
        for i in 0..cin {
            for dr in 0..3 {
                for dc in 0..3 {
                    let k = kernel[[o, i, dr, dc]];
                    if k == 0.0 {
                        continue;
                    }
                    let window = padded.slice(s![i, dr..dr + h, dc..dc + w]);
                    plane.scaled_add(k, &window);
                }
            }
        }
    }
    out
}
