//! Independent sequential forward pass, generic over the float type, used as
//! the finite-difference oracle. Evaluated in double-double precision the
//! objective carries ~1e-30 rounding noise, so central differences are
//! limited by truncation only.

use num_traits::Float;

use crate::numerics::Matrix;
use crate::precond::LOG_FLOOR;
use crate::recurrence::{Decay, PrecondKind, RecurrenceConfig, SequenceBatch, Solve, StateMatrix};

/// Which scalar input a perturbation targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Slot {
    Q,
    K,
    V,
    Beta,
    Alpha,
    BetaP,
    AlphaP,
    MuRaw,
    S0,
}

impl Slot {
    pub(crate) fn name(self) -> &'static str {
        match self {
            Slot::Q => "q",
            Slot::K => "k",
            Slot::V => "v",
            Slot::Beta => "beta",
            Slot::Alpha => "alpha",
            Slot::BetaP => "beta_p",
            Slot::AlphaP => "alpha_p",
            Slot::MuRaw => "mu_raw",
            Slot::S0 => "s0",
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Inputs<F> {
    t: usize,
    dk: usize,
    dv: usize,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    beta: Vec<F>,
    /// Empty (no decay), one per token (scalar) or `t * dk` (diagonal).
    alpha: Vec<F>,
    beta_p: Vec<F>,
    alpha_p: Vec<F>,
    mu_raw: F,
    s0: Vec<F>,
    weights: Vec<F>,
}

fn lift<F: Float>(xs: &[f64]) -> Vec<F> {
    xs.iter().map(|&x| F::from(x).unwrap()).collect()
}

impl<F: Float> Inputs<F> {
    pub(crate) fn new(cfg: &RecurrenceConfig, seq: &SequenceBatch, s0: &StateMatrix, weights: &Matrix) -> Self {
        let alpha = match &seq.alpha {
            Decay::None => Vec::new(),
            Decay::Scalar(a) => lift(a),
            Decay::Diagonal(a) => lift(a.data()),
        };
        Self {
            t: seq.len(),
            dk: cfg.d_k,
            dv: cfg.d_v,
            q: lift(seq.q.data()),
            k: lift(seq.k.data()),
            v: lift(seq.v.data()),
            beta: lift(&seq.beta),
            alpha,
            beta_p: lift(&seq.beta_p),
            alpha_p: lift(&seq.alpha_p),
            mu_raw: F::from(seq.mu_raw).unwrap(),
            s0: lift(s0.0.data()),
            weights: lift(weights.data()),
        }
    }

    fn slot_mut(&mut self, slot: Slot, idx: usize) -> &mut F {
        match slot {
            Slot::Q => &mut self.q[idx],
            Slot::K => &mut self.k[idx],
            Slot::V => &mut self.v[idx],
            Slot::Beta => &mut self.beta[idx],
            Slot::Alpha => &mut self.alpha[idx],
            Slot::BetaP => &mut self.beta_p[idx],
            Slot::AlphaP => &mut self.alpha_p[idx],
            Slot::MuRaw => &mut self.mu_raw,
            Slot::S0 => &mut self.s0[idx],
        }
    }

    /// `sum_t <G_t, o_t>` with one input shifted by `delta`.
    pub(crate) fn shifted_objective(&self, cfg: &RecurrenceConfig, slot: Slot, idx: usize, delta: F) -> F {
        let mut inp = self.clone();
        let x = inp.slot_mut(slot, idx);
        *x = *x + delta;
        inp.objective(cfg)
    }

    pub(crate) fn objective(&self, cfg: &RecurrenceConfig) -> F {
        let (dk, dv) = (self.dk, self.dv);
        let zero = F::zero();
        let one = F::one();
        let ridge = F::from(cfg.lambda).unwrap();
        let log_x = F::from(cfg.x.max(1.0)).unwrap().ln();
        let mu = self.mu_raw.exp();
        let floor = F::from(LOG_FLOOR).unwrap();

        let mut s = self.s0.clone();
        let mut acc = vec![zero; dk];
        let mut total = zero;
        for t in 0..self.t {
            let q = &self.q[t * dk..(t + 1) * dk];
            let k = &self.k[t * dk..(t + 1) * dk];
            let v = &self.v[t * dv..(t + 1) * dv];

            let mut k_write = k.to_vec();
            let mut q_read = q.to_vec();
            if matches!(cfg.precond, PrecondKind::DiagRaw | PrecondKind::DiagStable) {
                let prev = acc.clone();
                for j in 0..dk {
                    acc[j] = self.alpha_p[t] * acc[j] + self.beta_p[t] * k[j] * k[j];
                }
                if cfg.precond == PrecondKind::DiagStable {
                    let gain: Vec<F> = acc
                        .iter()
                        .map(|&a| {
                            let r = a.max(floor).ln() - mu;
                            (-log_x * r / (one + r.abs())).exp()
                        })
                        .collect();
                    match cfg.solve {
                        Solve::Online => k_write.iter_mut().zip(&gain).for_each(|(x, g)| *x = *x * *g),
                        Solve::Offline => q_read.iter_mut().zip(&gain).for_each(|(x, g)| *x = *x * *g),
                    }
                } else {
                    match cfg.solve {
                        Solve::Online => {
                            let y: Vec<F> = (0..dk).map(|j| k[j] / (prev[j] + ridge)).collect();
                            let n = one + (0..dk).fold(zero, |s, j| s + y[j] * k[j]);
                            k_write = y.into_iter().map(|x| x / n).collect();
                        }
                        Solve::Offline => {
                            for j in 0..dk {
                                q_read[j] = q[j] / (acc[j] + ridge);
                            }
                        }
                    }
                }
            }

            // decay the state columns
            match self.alpha.len() {
                0 => {}
                n if n == self.t => s.iter_mut().for_each(|x| *x = *x * self.alpha[t]),
                _ => {
                    let a = &self.alpha[t * dk..(t + 1) * dk];
                    for row in s.chunks_mut(dk) {
                        row.iter_mut().zip(a).for_each(|(x, ai)| *x = *x * *ai);
                    }
                }
            }
            let beta = self.beta[t];
            for (i, row) in s.chunks_mut(dk).enumerate() {
                let e = match cfg.solve {
                    Solve::Online => v[i] - row.iter().zip(k).fold(zero, |s, (a, b)| s + *a * *b),
                    Solve::Offline => v[i],
                };
                row.iter_mut().zip(&k_write).for_each(|(x, kw)| *x = *x + beta * e * *kw);
                let o = row.iter().zip(&q_read).fold(zero, |s, (a, b)| s + *a * *b);
                total = total + self.weights[t * dv + i] * o;
            }
        }
        total
    }
}
