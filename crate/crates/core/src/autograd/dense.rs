//! Forward and backward passes of the dense pieces of the MQAR model.
//!
//! Activations are row-major `n x features` matrices; weights are stored
//! `out x in`, so a linear layer computes `y = x W^T + b`.

use crate::numerics::{dot, gemm, Matrix};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`, evaluated without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `exp(-softplus(x))`, a decay gate in `(0, 1)`.
pub fn decay_gate(x: f64) -> f64 {
    (-softplus(x)).exp()
}

/// `d/dx exp(-softplus(x)) = -exp(-softplus(x)) * sigmoid(x)`.
pub fn decay_gate_grad(x: f64) -> f64 {
    -decay_gate(x) * sigmoid(x)
}

/// `y = x W^T + b`.
pub fn linear(x: &Matrix, w: &Matrix, b: Option<&[f64]>) -> Matrix {
    let mut y = Matrix::zeros(x.rows(), w.rows());
    if let Some(b) = b {
        for i in 0..y.rows() {
            y.row_mut(i).copy_from_slice(b);
        }
        gemm(1.0, x, false, w, true, 1.0, &mut y);
    } else {
        gemm(1.0, x, false, w, true, 0.0, &mut y);
    }
    y
}

/// Accumulates `dW += dy^T x` and `db += colsum(dy)`; returns `dx = dy W`.
pub fn linear_backward(x: &Matrix, w: &Matrix, dy: &Matrix, dw: &mut Matrix, db: Option<&mut [f64]>) -> Matrix {
    gemm(1.0, dy, true, x, false, 1.0, dw);
    if let Some(db) = db {
        for i in 0..dy.rows() {
            for (acc, g) in db.iter_mut().zip(dy.row(i)) {
                *acc += g;
            }
        }
    }
    dy.matmul(w)
}

/// Row-wise L2 normalization. Returns the normalized rows and their norms.
pub fn normalize_rows(x: &Matrix) -> (Matrix, Vec<f64>) {
    let mut y = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let n = dot(x.row(i), x.row(i)).sqrt().max(f64::MIN_POSITIVE);
        y.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    (y, norms)
}

/// `dx = (dy - y (y . dy)) / |x|` per row.
pub fn normalize_rows_backward(y: &Matrix, norms: &[f64], dy: &Matrix) -> Matrix {
    let mut dx = dy.clone();
    for (i, n) in norms.iter().enumerate() {
        let proj = dot(y.row(i), dy.row(i));
        for (d, yi) in dx.row_mut(i).iter_mut().zip(y.row(i)) {
            *d = (*d - yi * proj) / n;
        }
    }
    dx
}

/// Weights of a single-hidden-layer gated MLP:
/// `y = W_down (sigmoid(W_gate x) * (W_up x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedMlp<'a> {
    pub w_gate: &'a Matrix,
    pub w_up: &'a Matrix,
    pub w_down: &'a Matrix,
}

/// Intermediates of [`GatedMlp::forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpCache {
    pub gate: Matrix,
    pub up: Matrix,
    pub hidden: Matrix,
}

/// Weight gradients of a [`GatedMlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &GatedMlp<'_>) -> Self {
        Self {
            w_gate: Matrix::zeros(mlp.w_gate.rows(), mlp.w_gate.cols()),
            w_up: Matrix::zeros(mlp.w_up.rows(), mlp.w_up.cols()),
            w_down: Matrix::zeros(mlp.w_down.rows(), mlp.w_down.cols()),
        }
    }
}

impl GatedMlp<'_> {
    pub fn forward(&self, x: &Matrix) -> (Matrix, MlpCache) {
        let gate = linear(x, self.w_gate, None).map(sigmoid);
        let up = linear(x, self.w_up, None);
        let hidden = gate.hadamard(&up);
        let y = linear(&hidden, self.w_down, None);
        (y, MlpCache { gate, up, hidden })
    }

    /// Accumulates weight gradients into `grads` and returns `dx`.
    pub fn backward(&self, x: &Matrix, cache: &MlpCache, dy: &Matrix, grads: &mut MlpGrads) -> Matrix {
        let dh = linear_backward(&cache.hidden, self.w_down, dy, &mut grads.w_down, None);
        let mut d_gate = dh.hadamard(&cache.up);
        for (d, g) in d_gate.data_mut().iter_mut().zip(cache.gate.data()) {
            *d *= g * (1.0 - g);
        }
        let d_up = dh.hadamard(&cache.gate);
        let mut dx = linear_backward(x, self.w_gate, &d_gate, &mut grads.w_gate, None);
        dx.add_assign(&linear_backward(x, self.w_up, &d_up, &mut grads.w_up, None));
        dx
    }
}

/// Softmax cross-entropy of one logit row. Returns the loss and writes the
/// gradient `softmax - onehot` into `grad`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize, grad: &mut [f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (g, l) in grad.iter_mut().zip(logits) {
        *g = (l - m).exp();
        z += *g;
    }
    grad.iter_mut().for_each(|g| *g /= z);
    grad[label] -= 1.0;
    z.ln() + m - logits[label]
}

/// Index of the largest entry (first on ties).
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}
