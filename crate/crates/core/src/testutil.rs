//! Random instance generators shared by tests, examples and verifiers.

use rand::Rng;

use crate::numerics::{normalize, Matrix};
use crate::recurrence::{Decay, DecayKind, RecurrenceConfig, SequenceBatch};

/// `rows x cols` matrix of unit-norm rows with Gaussian directions.
pub fn random_unit_rows<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let n = normalize(&raw);
        m.row_mut(i).copy_from_slice(&n);
    }
    m
}

/// Random sequence matching `cfg`: unit-norm queries and keys, values in
/// `[-1, 1]`, gains in `[0.05, 0.95]`, decays in `[0.5, 0.99]`, preconditioner
/// decay in `[0.8, 0.99]` and `mu_raw` in `[-1, 1]`. Every gate stays at
/// least 0.01 inside its valid range, so finite-difference probes are legal.
pub fn random_batch<R: Rng + ?Sized>(rng: &mut R, cfg: &RecurrenceConfig, t: usize) -> SequenceBatch {
    let q = random_unit_rows(rng, t, cfg.d_k);
    let k = random_unit_rows(rng, t, cfg.d_k);
    let v = Matrix::from_fn(t, cfg.d_v, |_, _| rng.gen_range(-1.0..1.0));
    let alpha = match cfg.decay {
        DecayKind::None => Decay::None,
        DecayKind::Scalar => Decay::Scalar((0..t).map(|_| rng.gen_range(0.5..0.99)).collect()),
        DecayKind::Diagonal => Decay::Diagonal(Matrix::from_fn(t, cfg.d_k, |_, _| rng.gen_range(0.5..0.99))),
    };
    SequenceBatch {
        q,
        k,
        v,
        beta: (0..t).map(|_| rng.gen_range(0.05..0.95)).collect(),
        alpha,
        beta_p: (0..t).map(|_| rng.gen_range(0.05..0.95)).collect(),
        alpha_p: (0..t).map(|_| rng.gen_range(0.8..0.99)).collect(),
        mu_raw: rng.gen_range(-1.0..1.0),
    }
}
