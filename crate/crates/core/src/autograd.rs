//! Reverse-mode gradients through the sequential recurrences.
//!
//! The forward pass records a [`Tape`] (every state plus the preconditioner
//! intermediates); [`backward_sequential`] sweeps it in reverse, carrying the
//! state cotangent `dS` and the diagonal-accumulator cotangent `dA`.
//! Gradients are taken of `sum_t <G_t, o_t>` for a given `G`.

pub mod dense;
mod highprec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twofloat::TwoFloat;

use self::highprec::{Inputs, Slot};
use crate::error::{mismatch, Error, Result};
use crate::numerics::{dot, Matrix, Vector};
use crate::precond::LOG_FLOOR;
use crate::recurrence::{
    forward, Decay, PrecondKind, RecurrenceConfig, SequenceBatch, Solve, StateMatrix, TokenRecord,
};

/// Forward intermediates of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Tape {
    pub cfg: RecurrenceConfig,
    /// `T + 1` states, `states[0]` being the initial state.
    pub states: Vec<Matrix>,
    pub records: Vec<TokenRecord>,
    pub outputs: Matrix,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Runs the forward pass and keeps everything the backward sweep needs.
pub fn record_tape(cfg: &RecurrenceConfig, seq: &SequenceBatch, s0: &StateMatrix) -> Result<Tape> {
    if cfg.precond == PrecondKind::Exact {
        return Err(Error::Unsupported(
            "gradients through the exact inverse-Gram preconditioner are not implemented".into(),
        ));
    }
    let mut states = Vec::with_capacity(seq.len() + 1);
    let run = forward(cfg, seq, s0, Some(&mut states))?;
    states.push(run.final_state.0);
    Ok(Tape {
        cfg: *cfg,
        states,
        records: run.trace,
        outputs: run.outputs,
    })
}

/// Gradient of the decay gates, shaped like [`Decay`].
#[derive(Clone, Debug, PartialEq)]
pub enum DecayGrad {
    None,
    Scalar(Vector),
    Diagonal(Matrix),
}

/// Gradients with respect to every input of [`SequenceBatch`] and the
/// initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub dq: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
    pub dbeta: Vector,
    pub dalpha: DecayGrad,
    pub dbeta_p: Vector,
    pub dalpha_p: Vector,
    pub dmu_raw: f64,
    pub ds0: StateMatrix,
}

impl GradientBundle {
    fn zeros(cfg: &RecurrenceConfig, seq: &SequenceBatch) -> Self {
        let t = seq.len();
        Self {
            dq: Matrix::zeros(t, cfg.d_k),
            dk: Matrix::zeros(t, cfg.d_k),
            dv: Matrix::zeros(t, cfg.d_v),
            dbeta: vec![0.0; t],
            dalpha: match &seq.alpha {
                Decay::None => DecayGrad::None,
                Decay::Scalar(_) => DecayGrad::Scalar(vec![0.0; t]),
                Decay::Diagonal(_) => DecayGrad::Diagonal(Matrix::zeros(t, cfg.d_k)),
            },
            dbeta_p: vec![0.0; t],
            dalpha_p: vec![0.0; t],
            dmu_raw: 0.0,
            ds0: StateMatrix::zeros(cfg.d_v, cfg.d_k),
        }
    }

    /// All components flattened in a fixed order (q, k, v, beta, alpha,
    /// beta_p, alpha_p, mu_raw, S0).
    pub fn flatten(&self) -> Vector {
        let mut out = Vec::new();
        out.extend_from_slice(self.dq.data());
        out.extend_from_slice(self.dk.data());
        out.extend_from_slice(self.dv.data());
        out.extend_from_slice(&self.dbeta);
        match &self.dalpha {
            DecayGrad::None => {}
            DecayGrad::Scalar(a) => out.extend_from_slice(a),
            DecayGrad::Diagonal(a) => out.extend_from_slice(a.data()),
        }
        out.extend_from_slice(&self.dbeta_p);
        out.extend_from_slice(&self.dalpha_p);
        out.push(self.dmu_raw);
        out.extend_from_slice(self.ds0.data());
        out
    }
}

/// Reverse sweep. `grad_outputs` is `T x d_v`.
pub fn backward_sequential(
    cfg: &RecurrenceConfig,
    seq: &SequenceBatch,
    tape: &Tape,
    grad_outputs: &Matrix,
) -> Result<GradientBundle> {
    let t_len = seq.len();
    if tape.cfg != *cfg {
        return Err(Error::InvalidInput("tape was recorded with a different configuration".into()));
    }
    if tape.len() != t_len || tape.states.len() != t_len + 1 {
        return Err(mismatch("tape length", t_len, tape.len()));
    }
    if grad_outputs.shape() != (t_len, cfg.d_v) {
        return Err(mismatch(
            "output gradients",
            format!("({t_len}, {})", cfg.d_v),
            format!("{:?}", grad_outputs.shape()),
        ));
    }
    let d = cfg.d_k;
    let mut g = GradientBundle::zeros(cfg, seq);
    let mut ds = Matrix::zeros(cfg.d_v, d);
    let mut da = vec![0.0; d];
    let mut dmu = 0.0;
    let mu = seq.mu();
    let log_x = cfg.x.max(1.0).ln();
    let ridge = cfg.lambda;
    let diag_pre = matches!(cfg.precond, PrecondKind::DiagRaw | PrecondKind::DiagStable);

    for t in (0..t_len).rev() {
        let rec = &tape.records[t];
        let (q, k, v) = (seq.q.row(t), seq.k.row(t), seq.v.row(t));
        let beta = seq.beta[t];
        let s_prev = &tape.states[t];
        let s_t = &tape.states[t + 1];
        let gt = grad_outputs.row(t);

        // readout o = S_t q_read
        ds.rank1_update(1.0, gt, &rec.q_read);
        let dq_read = s_t.matvec_t(gt);

        // decayed previous state
        let decay = seq.gates(t).decay;
        let mut sd = s_prev.clone();
        decay.apply(&mut sd);

        let mut dk_write = vec![0.0; d];
        let mut dk_local = vec![0.0; d];
        let dsd = match cfg.solve {
            Solve::Online => {
                let pred = sd.matvec(k);
                let e: Vector = v.iter().zip(&pred).map(|(a, b)| a - b).collect();
                let ds_kw = ds.matvec(&rec.k_write);
                g.dbeta[t] = dot(&e, &ds_kw);
                let de: Vector = ds_kw.iter().map(|x| beta * x).collect();
                dk_write = ds.matvec_t(&e).into_iter().map(|x| beta * x).collect();
                g.dv.row_mut(t).copy_from_slice(&de);
                let mut dsd = ds.clone();
                dsd.rank1_update(-1.0, &de, k);
                for (o, x) in dk_local.iter_mut().zip(sd.matvec_t(&de)) {
                    *o -= x;
                }
                dsd
            }
            Solve::Offline => {
                let ds_k = ds.matvec(&rec.k_write);
                g.dbeta[t] = dot(v, &ds_k);
                g.dv.row_mut(t).iter_mut().zip(&ds_k).for_each(|(o, x)| *o = beta * x);
                dk_write = ds.matvec_t(v).into_iter().map(|x| beta * x).collect();
                ds.clone()
            }
        };

        // S_d = S_{t-1} diag(a)
        match (&mut g.dalpha, &seq.alpha) {
            (DecayGrad::None, _) => ds = dsd,
            (DecayGrad::Scalar(ga), Decay::Scalar(a)) => {
                ga[t] = dot(dsd.data(), s_prev.data());
                ds = dsd.scaled(a[t]);
            }
            (DecayGrad::Diagonal(ga), Decay::Diagonal(a)) => {
                let row = ga.row_mut(t);
                for i in 0..dsd.rows() {
                    for ((gj, x), s) in row.iter_mut().zip(dsd.row(i)).zip(s_prev.row(i)) {
                        *gj += x * s;
                    }
                }
                ds = dsd;
                ds.scale_cols(a.row(t));
            }
            _ => return Err(Error::InvalidInput("decay gradient layout does not match the gates".into())),
        }

        // preconditioner transform back to k / q and to A
        let (dq, dk) = (g.dq.row_mut(t), &mut dk_local);
        match (cfg.precond, cfg.solve) {
            (PrecondKind::None, Solve::Online) | (PrecondKind::Exact, Solve::Online) => {
                dq.copy_from_slice(&dq_read);
                dk.iter_mut().zip(&dk_write).for_each(|(o, x)| *o += x);
            }
            (PrecondKind::None, Solve::Offline) | (PrecondKind::Exact, Solve::Offline) => {
                dq.copy_from_slice(&dq_read);
                dk.iter_mut().zip(&dk_write).for_each(|(o, x)| *o += x);
            }
            (PrecondKind::DiagStable, solve) => {
                let sq = rec
                    .squash
                    .as_ref()
                    .ok_or_else(|| Error::InvalidInput("tape is missing squash intermediates".into()))?;
                let a_t = rec.a.as_ref().expect("stable record stores A_t");
                let (target, dx) = match solve {
                    Solve::Online => {
                        dq.copy_from_slice(&dq_read);
                        (k, &dk_write)
                    }
                    Solve::Offline => {
                        dk.iter_mut().zip(&dk_write).for_each(|(o, x)| *o += x);
                        (q, &dq_read)
                    }
                };
                let mut dtarget = vec![0.0; d];
                for j in 0..d {
                    dtarget[j] = dx[j] * sq.b[j];
                    let db = dx[j] * target[j];
                    let ds_j = -log_x * sq.b[j] * db;
                    let denom = 1.0 + sq.r[j].abs();
                    let dr = ds_j / (denom * denom);
                    dmu -= dr;
                    if a_t[j] > LOG_FLOOR {
                        da[j] += dr / a_t[j];
                    }
                }
                match solve {
                    Solve::Online => dk.iter_mut().zip(&dtarget).for_each(|(o, x)| *o += x),
                    Solve::Offline => dq.copy_from_slice(&dtarget),
                }
            }
            (PrecondKind::DiagRaw, Solve::Offline) => {
                let a_t = rec.a.as_ref().expect("raw record stores A_t");
                dk.iter_mut().zip(&dk_write).for_each(|(o, x)| *o += x);
                for j in 0..d {
                    let p = 1.0 / (a_t[j] + ridge);
                    dq[j] = dq_read[j] * p;
                    da[j] -= dq_read[j] * q[j] * p * p;
                }
            }
            (PrecondKind::DiagRaw, Solve::Online) => {
                dq.copy_from_slice(&dq_read);
            }
        }

        // A_t = alpha_p A_{t-1} + beta_p k*k
        if diag_pre {
            let a_prev = rec.a_prev.as_ref().expect("diagonal record stores A_{t-1}");
            g.dalpha_p[t] = dot(&da, a_prev);
            g.dbeta_p[t] = da.iter().zip(k).map(|(x, kk)| x * kk * kk).sum();
            for j in 0..d {
                dk[j] += 2.0 * seq.beta_p[t] * k[j] * da[j];
                da[j] *= seq.alpha_p[t];
            }
            if cfg.precond == PrecondKind::DiagRaw && cfg.solve == Solve::Online {
                // k_w = y / n, y = p k, n = 1 + sum p k^2, p = 1 / (A_{t-1} + ridge)
                let p: Vector = a_prev.iter().map(|a| 1.0 / (a + ridge)).collect();
                let n = 1.0 + p.iter().zip(k).map(|(pj, kj)| pj * kj * kj).sum::<f64>();
                let dn = -dk_write
                    .iter()
                    .zip(&p)
                    .zip(k)
                    .map(|((dw, pj), kj)| dw * pj * kj)
                    .sum::<f64>()
                    / (n * n);
                for j in 0..d {
                    let dy = dk_write[j] / n;
                    let dp = k[j] * dy + k[j] * k[j] * dn;
                    dk[j] += p[j] * dy + 2.0 * p[j] * k[j] * dn;
                    da[j] -= p[j] * p[j] * dp;
                }
            }
        }
        g.dk.row_mut(t).copy_from_slice(&dk_local);
    }
    g.dmu_raw = dmu * mu;
    g.ds0 = StateMatrix(ds);
    Ok(g)
}

/// Relative error `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Result of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiffReport {
    pub max_relative_error: f64,
    /// Name and index of the worst component.
    pub worst: (String, usize),
    pub components: usize,
}

const FD_STEP: f64 = 1e-5;

/// Compares every gradient component against Richardson-extrapolated
/// central differences (steps `1e-5` and `5e-6`) of a double-double
/// reference forward pass, using random output weights and a random initial
/// state drawn from `seed`.
pub fn finite_diff_check(cfg: &RecurrenceConfig, seq: &SequenceBatch, seed: u64) -> Result<FiniteDiffReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grad_outputs = Matrix::from_fn(seq.len(), cfg.d_v, |_, _| rng.gen_range(-1.0..1.0));
    let s0 = StateMatrix(Matrix::from_fn(cfg.d_v, cfg.d_k, |_, _| rng.gen_range(-0.5..0.5)));
    finite_diff_check_with(cfg, seq, &s0, &grad_outputs)
}

pub fn finite_diff_check_with(
    cfg: &RecurrenceConfig,
    seq: &SequenceBatch,
    s0: &StateMatrix,
    grad_outputs: &Matrix,
) -> Result<FiniteDiffReport> {
    let tape = record_tape(cfg, seq, s0)?;
    let grads = backward_sequential(cfg, seq, &tape, grad_outputs)?;
    let inputs = Inputs::<TwoFloat>::new(cfg, seq, s0, grad_outputs);
    let central = |slot: Slot, idx: usize, h: f64| -> TwoFloat {
        let h = TwoFloat::from(h);
        let up = inputs.shifted_objective(cfg, slot, idx, h);
        let down = inputs.shifted_objective(cfg, slot, idx, -h);
        (up - down) / (h * 2.0)
    };
    let mut report = FiniteDiffReport {
        max_relative_error: 0.0,
        worst: (String::new(), 0),
        components: 0,
    };
    let mut probe = |slot: Slot, analytic: &[f64]| {
        for (idx, &a) in analytic.iter().enumerate() {
            let coarse = central(slot, idx, FD_STEP);
            let fine = central(slot, idx, FD_STEP / 2.0);
            let numeric = f64::from((fine * 4.0 - coarse) / 3.0);
            let err = relative_error(a, numeric);
            report.components += 1;
            if err > report.max_relative_error || err.is_nan() {
                report.max_relative_error = err;
                report.worst = (slot.name().to_string(), idx);
            }
        }
    };

    probe(Slot::Q, grads.dq.data());
    probe(Slot::K, grads.dk.data());
    probe(Slot::V, grads.dv.data());
    probe(Slot::Beta, &grads.dbeta);
    match &grads.dalpha {
        DecayGrad::None => {}
        DecayGrad::Scalar(ga) => probe(Slot::Alpha, ga),
        DecayGrad::Diagonal(ga) => probe(Slot::Alpha, ga.data()),
    }
    if matches!(cfg.precond, PrecondKind::DiagRaw | PrecondKind::DiagStable) {
        probe(Slot::BetaP, &grads.dbeta_p);
        probe(Slot::AlphaP, &grads.dalpha_p);
        probe(Slot::MuRaw, &[grads.dmu_raw]);
    }
    probe(Slot::S0, grads.ds0.data());
    Ok(report)
}

/// Outcome of the gradient-check grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckSummary {
    pub passed: usize,
    pub total: usize,
    pub tolerance: f64,
    pub worst_error: f64,
    pub worst_case: String,
}

impl GradcheckSummary {
    pub fn pass_rate(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.passed as f64 / self.total as f64
        }
    }
}

/// Relative tolerance of the gradient grid.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

/// Finite-difference checks over every solve x decay x preconditioner
/// combination (exact excluded), `T` in `1..=16` and `d` in `{2, 4, 8}`.
/// The raw diagonal preconditioner uses a ridge of 0.5 so that its
/// `1 / (A + ridge)` stays well conditioned.
pub fn gradcheck_grid(seed: u64) -> Result<GradcheckSummary> {
    use crate::recurrence::DecayKind;
    use rayon::prelude::*;

    let mut cases = Vec::new();
    for solve in [Solve::Online, Solve::Offline] {
        for decay in [DecayKind::None, DecayKind::Scalar, DecayKind::Diagonal] {
            for precond in [PrecondKind::None, PrecondKind::DiagRaw, PrecondKind::DiagStable] {
                for t in 1..=16usize {
                    for d in [2usize, 4, 8] {
                        cases.push((solve, decay, precond, t, d));
                    }
                }
            }
        }
    }
    let results: Vec<Result<(String, f64)>> = cases
        .par_iter()
        .enumerate()
        .map(|(i, &(solve, decay, precond, t, d))| {
            let mut cfg = RecurrenceConfig::new(d, d, solve, decay, precond);
            if precond == PrecondKind::DiagRaw {
                cfg = cfg.with_lambda(0.5);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let seq = crate::testutil::random_batch(&mut rng, &cfg, t);
            let r = finite_diff_check(&cfg, &seq, seed ^ i as u64)?;
            let label = format!("{} precond={precond} T={t} d={d} worst={}[{}]", cfg.variant(), r.worst.0, r.worst.1);
            Ok((label, r.max_relative_error))
        })
        .collect();
    let mut summary = GradcheckSummary {
        passed: 0,
        total: 0,
        tolerance: GRADCHECK_TOLERANCE,
        worst_error: 0.0,
        worst_case: String::new(),
    };
    for r in results {
        let (label, err) = r?;
        summary.total += 1;
        if err < GRADCHECK_TOLERANCE {
            summary.passed += 1;
        }
        if err > summary.worst_error || err.is_nan() {
            summary.worst_error = err;
            summary.worst_case = label;
        }
    }
    Ok(summary)
}
