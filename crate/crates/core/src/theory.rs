//! Numerical verifiers for the least-squares view of the recurrences.
//!
//! Each check compares a recurrence against an independent dense oracle
//! (explicit inverses, Cholesky solves, eigen-decompositions) and reports the
//! worst deviation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::numerics::{dense, dot, norm, outer, Matrix, Vector};
use crate::recurrence::{
    forward, run_sequential, DecayGate, DecayKind, PrecondKind, RecurrenceConfig, SequenceBatch, Solve, StateMatrix,
    TokenGates,
};
use crate::testutil::random_unit_rows;

/// Key/value history with a ridge, defining the regularized least-squares
/// map `S* = C G^{-1}` with `G = K^T K + lambda I`, `C = V^T K`.
#[derive(Clone, Debug, PartialEq)]
pub struct LeastSquaresOracle {
    pub k_hist: Matrix,
    pub v_hist: Matrix,
    pub lambda: f64,
}

impl LeastSquaresOracle {
    pub fn new(k_hist: Matrix, v_hist: Matrix, lambda: f64) -> Result<Self> {
        if k_hist.rows() != v_hist.rows() {
            return Err(mismatch("least-squares history", k_hist.rows(), v_hist.rows()));
        }
        if !(lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("ridge must be >= 0, got {lambda}")));
        }
        Ok(Self { k_hist, v_hist, lambda })
    }

    pub fn gram(&self) -> Matrix {
        let mut g = self.k_hist.matmul_tn(&self.k_hist);
        for i in 0..g.rows() {
            g[(i, i)] += self.lambda;
        }
        g
    }

    pub fn cross(&self) -> Matrix {
        self.v_hist.matmul_tn(&self.k_hist)
    }
}

/// `S* = C G^{-1}` by a Cholesky solve.
pub fn least_squares_map(oracle: &LeastSquaresOracle) -> Result<StateMatrix> {
    dense::solve_spd_right(&oracle.gram(), &oracle.cross()).map(StateMatrix)
}

/// One labelled deviation inside a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub label: String,
    pub deviation: f64,
}

/// Outcome of one verifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub name: String,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub samples: usize,
    pub pass: bool,
    pub details: Vec<CaseRecord>,
}

impl TheoremReport {
    pub fn new(name: impl Into<String>, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            max_deviation: 0.0,
            tolerance,
            samples: 0,
            pass: true,
            details: Vec::new(),
        }
    }

    /// Adds a case; `pass` holds while every deviation is within tolerance.
    pub fn record(&mut self, label: impl Into<String>, deviation: f64) {
        self.samples += 1;
        if deviation.is_nan() || deviation > self.max_deviation {
            self.max_deviation = if deviation.is_nan() { f64::NAN } else { deviation };
        }
        self.pass = self.max_deviation <= self.tolerance;
        self.details.push(CaseRecord {
            label: label.into(),
            deviation,
        });
    }

    /// Folds another report's cases into this one.
    pub fn absorb(&mut self, other: TheoremReport) {
        for case in other.details {
            self.record(format!("{}/{}", other.name, case.label), case.deviation);
        }
    }
}

fn exact_pdn_config(d_k: usize, d_v: usize, lambda: f64) -> RecurrenceConfig {
    RecurrenceConfig::new(d_k, d_v, Solve::Online, DecayKind::None, PrecondKind::Exact).with_lambda(lambda)
}

/// Exact-preconditioned online and offline paths against the ridge
/// least-squares map at every token.
///
/// Gains are forced to one and decay is ignored: the identity concerns the
/// undecayed exact recurrence. Checks (a) the online state against
/// `C_t G_t^{-1}`, (b) online against offline outputs and (c) both outputs
/// against `C_t G_t^{-1} q_t`.
pub fn check_theorem1(seq: &SequenceBatch, lambda: f64) -> Result<TheoremReport> {
    let (t_len, d_k, d_v) = (seq.len(), seq.k.cols(), seq.v.cols());
    let mut report = TheoremReport::new("theorem1", 1e-8);
    if t_len == 0 {
        return Ok(report);
    }
    let seq = SequenceBatch {
        beta: vec![1.0; t_len],
        alpha: crate::recurrence::Decay::None,
        ..seq.clone()
    };
    let online = exact_pdn_config(d_k, d_v, lambda);
    let offline = RecurrenceConfig {
        solve: Solve::Offline,
        ..online
    };
    let mut states = Vec::with_capacity(t_len);
    let on = forward(&online, &seq, &StateMatrix::zeros(d_v, d_k), Some(&mut states))?;
    states.push(on.final_state.0.clone());
    let off = run_sequential(&offline, &seq)?;

    let mut g = Matrix::identity(d_k).scaled(lambda);
    let mut c = Matrix::zeros(d_v, d_k);
    let (mut dev_state, mut dev_out, mut dev_ls) = (0.0f64, 0.0f64, 0.0f64);
    for t in 0..t_len {
        let (k, v, q) = (seq.k.row(t), seq.v.row(t), seq.q.row(t));
        g.rank1_update(1.0, k, k);
        c.rank1_update(1.0, v, k);
        let s_star = c.matmul(&dense::inverse(&g)?);
        dev_state = dev_state.max(states[t + 1].max_abs_diff(&s_star));
        dev_out = dev_out.max(crate::numerics::max_abs_diff(on.outputs.row(t), off.outputs.row(t)));
        let o_star = s_star.matvec(q);
        dev_ls = dev_ls
            .max(crate::numerics::max_abs_diff(on.outputs.row(t), &o_star))
            .max(crate::numerics::max_abs_diff(off.outputs.row(t), &o_star));
    }
    report.record("state_vs_ls_map", dev_state);
    report.record("online_vs_offline_outputs", dev_out);
    report.record("outputs_vs_ls_readout", dev_ls);
    Ok(report)
}

/// Random grid of `configs` identity checks with `d_k <= 32`, `T <= 256`
/// and `lambda` cycling through `{0.1, 1, 10}`.
pub fn check_theorem1_grid(configs: usize, seed: u64) -> Result<TheoremReport> {
    let cases: Vec<Result<(String, TheoremReport)>> = (0..configs)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let d_k = rng.gen_range(1..=32);
            let d_v = rng.gen_range(1..=16);
            let t = rng.gen_range(0..=256);
            let lambda = [0.1, 1.0, 10.0][i % 3];
            let seq = SequenceBatch::new(
                random_unit_rows(&mut rng, t, d_k),
                random_unit_rows(&mut rng, t, d_k),
                Matrix::from_fn(t, d_v, |_, _| rng.gen_range(-1.0..1.0)),
            );
            let label = format!("d_k={d_k},d_v={d_v},T={t},lambda={lambda}");
            check_theorem1(&seq, lambda).map(|r| (label, r))
        })
        .collect();
    let mut report = TheoremReport::new("theorem1_grid", 1e-8);
    for case in cases {
        let (label, r) = case?;
        report.record(label, r.max_deviation);
    }
    Ok(report)
}

/// Effective states of the two-dimensional single-token construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    /// Offline readout state `C_1 diag(1 / (A_1 + lambda))`.
    pub s_apla: Vec<Vec<f64>>,
    /// Online state `v k_write^T`.
    pub s_apdn: Vec<Vec<f64>>,
    pub differ: bool,
    /// The same two states under the exact inverse Gram.
    pub exact_apla: Vec<Vec<f64>>,
    pub exact_apdn: Vec<Vec<f64>>,
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Diagonal preconditioning breaks the offline/online equivalence:
/// `lambda = 1`, `k = v = [1, 1]`, one token.
pub fn counterexample_d2() -> Result<Counterexample> {
    let one = Matrix::from_rows(&[[1.0, 1.0]]);
    let seq = SequenceBatch::new(one.clone(), one.clone(), one);
    let online = RecurrenceConfig::new(2, 2, Solve::Online, DecayKind::None, PrecondKind::DiagRaw).with_lambda(1.0);
    let offline = RecurrenceConfig {
        solve: Solve::Offline,
        ..online
    };

    let apdn = run_sequential(&online, &seq)?;
    let apla = run_sequential(&offline, &seq)?;
    let a1 = apla.trace[0].a.clone().unwrap_or_default();
    let mut s_apla = apla.final_state.0.clone();
    s_apla.scale_cols(&a1.iter().map(|a| 1.0 / (a + offline.lambda)).collect::<Vec<_>>());
    let s_apdn = apdn.final_state.0;

    let ex_on = run_sequential(&online.with_precond(PrecondKind::Exact), &seq)?;
    let ex_off = run_sequential(&offline.with_precond(PrecondKind::Exact), &seq)?;
    let p1 = ex_off.trace[0].p.clone().unwrap_or_else(|| Matrix::identity(2));
    let exact_apla = ex_off.final_state.matmul(&p1);

    Ok(Counterexample {
        differ: s_apla != s_apdn,
        s_apla: rows_of(&s_apla),
        s_apdn: rows_of(&s_apdn),
        exact_apla: rows_of(&exact_apla),
        exact_apdn: rows_of(&ex_on.final_state),
    })
}

/// Monte-Carlo estimates at one horizon `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Record {
    pub t: usize,
    pub e_la: f64,
    pub e_la_se: f64,
    pub closed_form_la: f64,
    pub e_dn: f64,
    pub e_dn_se: f64,
    /// Exact recurrence error; only defined once the Gram is invertible.
    pub e_exact: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Result {
    pub d: usize,
    pub beta: f64,
    pub trials: usize,
    pub s_norm2: f64,
    pub records: Vec<Theorem2Record>,
}

impl Theorem2Result {
    /// `|E_LA - closed form|` in standard errors for `d <= t <= 4d`
    /// (tolerance 3).
    pub fn closed_form_report(&self) -> TheoremReport {
        let mut r = TheoremReport::new(format!("theorem2_closed_form_d{}", self.d), 3.0);
        for rec in self.records.iter().filter(|r| r.t >= self.d && r.t <= 4 * self.d) {
            let z = if rec.e_la_se > 0.0 {
                (rec.e_la - rec.closed_form_la).abs() / rec.e_la_se
            } else {
                (rec.e_la - rec.closed_form_la).abs()
            };
            r.record(format!("t={}", rec.t), z);
        }
        r
    }

    /// `max(0, E_DN - E_LA)` for `t >= d + 1` (tolerance 0).
    pub fn dn_bound_report(&self) -> TheoremReport {
        let mut r = TheoremReport::new(format!("theorem2_dn_bound_d{}", self.d), 0.0);
        for rec in self.records.iter().filter(|r| r.t > self.d) {
            r.record(format!("t={}", rec.t), (rec.e_dn - rec.e_la).max(0.0));
        }
        r
    }

    /// Mean exact-recurrence error (tolerance 1e-16).
    pub fn exact_report(&self) -> TheoremReport {
        let mut r = TheoremReport::new(format!("theorem2_exact_d{}", self.d), 1e-16);
        for rec in &self.records {
            if let Some(e) = rec.e_exact {
                r.record(format!("t={}", rec.t), e);
            }
        }
        r
    }

    pub fn reports(&self) -> Vec<TheoremReport> {
        vec![self.closed_form_report(), self.dn_bound_report(), self.exact_report()]
    }
}

/// Closed-form expected squared linear-attention readout error with unit
/// keys and queries: `||S||_F^2 / d (1 - t/d + t(t-1)/d^2)`.
pub fn la_error_closed_form(s_norm2: f64, d: usize, t: usize) -> f64 {
    let (d, t) = (d as f64, t as f64);
    s_norm2 / d * (1.0 - t / d + t * (t - 1.0) / (d * d))
}

const TRIAL_BLOCK: usize = 256;

#[derive(Clone)]
struct Moments {
    la: Vec<(f64, f64)>,
    dn: Vec<(f64, f64)>,
    exact: Vec<f64>,
}

impl Moments {
    fn zeros(t_max: usize) -> Self {
        Self {
            la: vec![(0.0, 0.0); t_max + 1],
            dn: vec![(0.0, 0.0); t_max + 1],
            exact: vec![0.0; t_max + 1],
        }
    }

    fn merge(mut self, other: Moments) -> Self {
        for t in 0..self.la.len() {
            self.la[t].0 += other.la[t].0;
            self.la[t].1 += other.la[t].1;
            self.dn[t].0 += other.dn[t].0;
            self.dn[t].1 += other.dn[t].1;
            self.exact[t] += other.exact[t];
        }
        self
    }
}

fn readout_error(s: &Matrix, s_true: &Matrix, q: &[f64]) -> f64 {
    let a = s.matvec(q);
    let b = s_true.matvec(q);
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Noiseless regression `v_t = S k_t` with keys and queries uniform on the
/// sphere, comparing readout errors of linear attention, the delta rule with
/// gain `beta`, and the exact recurrence (started at `t = d` from the dense
/// inverse Gram). `lambda = 0` throughout.
pub fn theorem2_montecarlo(d: usize, t_max: usize, trials: usize, beta: f64, seed: u64) -> Result<Theorem2Result> {
    if trials < 100 {
        return Err(Error::InvalidConfig(format!("at least 100 trials required, got {trials}")));
    }
    if d == 0 {
        return Err(Error::InvalidConfig("dimension must be positive".into()));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidConfig(format!("gain must lie in (0, 1], got {beta}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s_true = Matrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let s_norm2 = s_true.frobenius_norm().powi(2);

    let blocks = trials.div_ceil(TRIAL_BLOCK);
    let moments = (0..blocks)
        .into_par_iter()
        .map(|b| -> Result<Moments> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1 + b as u64));
            let n = TRIAL_BLOCK.min(trials - b * TRIAL_BLOCK);
            let mut m = Moments::zeros(t_max);
            for _ in 0..n {
                let keys = random_unit_rows(&mut rng, t_max, d);
                let queries = random_unit_rows(&mut rng, t_max, d);
                let mut c = Matrix::zeros(d, d);
                let mut s_dn = Matrix::zeros(d, d);
                let mut exact: Option<(Matrix, Matrix)> = None;
                for t in 1..=t_max {
                    let k = keys.row(t - 1);
                    let q = queries.row(t - 1);
                    let v = s_true.matvec(k);
                    c.rank1_update(1.0, &v, k);
                    let err = s_dn.matvec(k);
                    let e: Vector = v.iter().zip(&err).map(|(a, b)| a - b).collect();
                    s_dn.rank1_update(beta, &e, k);

                    if t == d {
                        // K S^T = V with the square key block; forming C G^{-1}
                        // instead would square its condition number
                        let k_block = keys.slice_rows(0, d);
                        let v_block = k_block.matmul_nt(&s_true);
                        let s = dense::solve(&k_block, &v_block)?.transpose();
                        let p = dense::inverse(&k_block.matmul_tn(&k_block))?;
                        exact = Some((s, p));
                    } else if let Some((s, p)) = exact.as_mut() {
                        let pk = p.matvec(k);
                        let denom = 1.0 + dot(k, &pk);
                        let kw: Vector = pk.iter().map(|x| x / denom).collect();
                        let sk = s.matvec(k);
                        let e: Vector = v.iter().zip(&sk).map(|(a, b)| a - b).collect();
                        s.rank1_update(1.0, &e, &kw);
                        p.rank1_update(-1.0, &kw, &pk);
                    }

                    let e_la = readout_error(&c, &s_true, q);
                    let e_dn = readout_error(&s_dn, &s_true, q);
                    m.la[t].0 += e_la;
                    m.la[t].1 += e_la * e_la;
                    m.dn[t].0 += e_dn;
                    m.dn[t].1 += e_dn * e_dn;
                    if let Some((s, _)) = &exact {
                        m.exact[t] += readout_error(s, &s_true, q);
                    }
                }
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(Moments::zeros(t_max), Moments::merge);

    let n = trials as f64;
    let stats = |(s, s2): (f64, f64)| {
        let mean = s / n;
        let var = ((s2 / n - mean * mean) * n / (n - 1.0)).max(0.0);
        (mean, (var / n).sqrt())
    };
    let records = (1..=t_max)
        .map(|t| {
            let (e_la, e_la_se) = stats(moments.la[t]);
            let (e_dn, e_dn_se) = stats(moments.dn[t]);
            Theorem2Record {
                t,
                e_la,
                e_la_se,
                closed_form_la: la_error_closed_form(s_norm2, d, t),
                e_dn,
                e_dn_se,
                e_exact: (t >= d).then(|| moments.exact[t] / n),
            }
        })
        .collect();
    Ok(Theorem2Result {
        d,
        beta,
        trials,
        s_norm2,
        records,
    })
}

/// Analytic spectrum of `M = alpha (I - beta k k_write^T)` with residuals
/// against the explicit matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionEigs {
    /// `alpha`, multiplicity `d - 1`.
    pub lambda_bulk: f64,
    /// `alpha (1 - beta k_write^T k)`.
    pub lambda_write: f64,
    pub trace_residual: f64,
    pub det_residual: f64,
    /// Largest eigenvalue modulus of the explicit matrix.
    pub spectral_radius: f64,
}

pub fn transition_eigs(alpha: f64, beta: f64, k: &[f64], k_write: &[f64]) -> Result<TransitionEigs> {
    if k.len() != k_write.len() {
        return Err(mismatch("transition_eigs (write key)", k.len(), k_write.len()));
    }
    if k.is_empty() {
        return Err(Error::InvalidInput("empty key".into()));
    }
    if (norm(k) - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidInput(format!("key norm {} is not 1", norm(k))));
    }
    let d = k.len();
    let gates = TokenGates {
        beta,
        decay: DecayGate::Scalar(alpha),
    };
    let m = crate::recurrence::online_transition(k, k_write, gates);
    let lambda_write = alpha * (1.0 - beta * dot(k_write, k));
    let bulk = alpha;
    let trace_residual = (m.trace() - ((d - 1) as f64 * bulk + lambda_write)).abs();
    let det_residual = (dense::determinant(&m) - bulk.powi(d as i32 - 1) * lambda_write).abs();
    let spectral_radius = dense::eigenvalue_moduli(&m)?.into_iter().fold(0.0, f64::max);
    Ok(TransitionEigs {
        lambda_bulk: bulk,
        lambda_write,
        trace_residual,
        det_residual,
        spectral_radius,
    })
}

/// Trace and determinant residuals over random transitions (tolerance
/// 1e-10).
pub fn check_transition_eigs(trials: usize, seed: u64) -> Result<TheoremReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = TheoremReport::new("transition_eigs", 1e-10);
    for i in 0..trials {
        let d = rng.gen_range(1..=16);
        let k = random_unit_rows(&mut rng, 1, d).into_data();
        let kw: Vector = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let e = transition_eigs(rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0), &k, &kw)?;
        report.record(format!("case{i}"), e.trace_residual.max(e.det_residual));
    }
    Ok(report)
}

/// Unit-disk check for stable write keys `B k` with `diag(B)` in
/// `[1/x, x]`. Deviation is `max(0, |lambda| - 1)` over both the analytic
/// write eigenvalue and the numerical spectrum; tolerance 1e-12.
pub fn check_unit_disk(beta: f64, x: f64, trials: usize, seed: u64) -> Result<TheoremReport> {
    if !(x >= 1.0) {
        return Err(Error::InvalidConfig(format!("squash bound must be >= 1, got {x}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = TheoremReport::new(format!("unit_disk_beta{beta}_x{x}"), 1e-12);
    for i in 0..trials {
        let d = rng.gen_range(1..=12);
        let k = random_unit_rows(&mut rng, 1, d).into_data();
        // endpoints are hit a quarter of the time each
        let b: Vector = (0..d)
            .map(|_| match rng.gen_range(0..4) {
                0 => x,
                1 => 1.0 / x,
                _ => rng.gen_range(1.0 / x..=x),
            })
            .collect();
        let alpha = if i % 8 == 0 { 1.0 } else { rng.gen_range(0.0..=1.0) };
        let kw: Vector = b.iter().zip(&k).map(|(b, k)| b * k).collect();
        let e = transition_eigs(alpha, beta, &k, &kw)?;
        let worst = e.lambda_write.abs().max(e.lambda_bulk.abs()).max(e.spectral_radius);
        report.record(format!("case{i}"), (worst - 1.0).max(0.0));
    }
    Ok(report)
}

/// `B = x I`: the write eigenvalue `alpha (1 - beta x)` is negative whenever
/// `beta x > 1`.
pub fn negative_eigenvalue_example(alpha: f64, beta: f64, x: f64, d: usize) -> Result<TransitionEigs> {
    let k = (0..d).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect::<Vector>();
    let kw: Vector = k.iter().map(|v| v * x).collect();
    transition_eigs(alpha, beta, &k, &kw)
}

/// Preconditioned online convex programs with closed-form minimizers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PocpVariant {
    Pgdn,
    PLonghorn,
    KeyPrecondMamba2,
}

impl PocpVariant {
    pub const ALL: [PocpVariant; 3] = [PocpVariant::Pgdn, PocpVariant::PLonghorn, PocpVariant::KeyPrecondMamba2];

    pub fn name(self) -> &'static str {
        match self {
            PocpVariant::Pgdn => "pgdn",
            PocpVariant::PLonghorn => "p_longhorn",
            PocpVariant::KeyPrecondMamba2 => "key_precond_mamba2",
        }
    }
}

/// Inputs of one POCP step. `alpha` is ignored by P-Longhorn.
#[derive(Clone, Debug, PartialEq)]
pub struct PocpProblem {
    pub state: Matrix,
    pub k: Vector,
    pub v: Vector,
    pub alpha: f64,
    pub beta: f64,
    pub p: Matrix,
}

impl PocpProblem {
    fn validate(&self) -> Result<Matrix> {
        let (dv, dk) = self.state.shape();
        if self.k.len() != dk || self.v.len() != dv || self.p.shape() != (dk, dk) {
            return Err(mismatch(
                "pocp problem",
                format!("k: {dk}, v: {dv}, P: ({dk}, {dk})"),
                format!("k: {}, v: {}, P: {:?}", self.k.len(), self.v.len(), self.p.shape()),
            ));
        }
        if self.p.max_abs_diff(&self.p.transpose()) > 1e-12 * (1.0 + self.p.max_abs()) {
            return Err(Error::InvalidInput("P is not symmetric".into()));
        }
        // Cholesky of P doubles as the positive-definiteness check
        dense::solve_spd_right(&self.p, &Matrix::identity(dk))
            .map_err(|_| Error::InvalidInput("P is not positive definite".into()))
    }
}

/// `tr(X P^{-1} X^T)`.
fn p_inv_norm2(x: &Matrix, p_inv: &Matrix) -> f64 {
    x.matmul(p_inv).hadamard(x).data().iter().sum()
}

/// POCP objective at `s`.
pub fn pocp_objective(variant: PocpVariant, prob: &PocpProblem, p_inv: &Matrix, s: &Matrix) -> f64 {
    let k = &prob.k;
    match variant {
        PocpVariant::Pgdn => {
            let prox = s.sub(&prob.state.scaled(prob.alpha));
            let pred = prob.state.matvec(k);
            let target: Vector = prob.v.iter().zip(&pred).map(|(v, p)| prob.beta * (v - prob.alpha * p)).collect();
            p_inv_norm2(&prox, p_inv) - 2.0 * dot(&s.matvec(k), &target)
        }
        PocpVariant::PLonghorn => {
            let prox = s.sub(&prob.state);
            let r: Vector = s.matvec(k).iter().zip(&prob.v).map(|(a, b)| a - b).collect();
            p_inv_norm2(&prox, p_inv) + prob.beta * dot(&r, &r)
        }
        PocpVariant::KeyPrecondMamba2 => {
            let prox = s.sub(&prob.state.scaled(prob.alpha));
            p_inv_norm2(&prox, p_inv) - 2.0 * dot(&s.matvec(k), &prob.v)
        }
    }
}

/// Closed-form minimizer of the POCP.
pub fn pocp_solution(variant: PocpVariant, prob: &PocpProblem) -> Result<Matrix> {
    prob.validate()?;
    let pk = prob.p.matvec(&prob.k);
    let mut s;
    match variant {
        PocpVariant::Pgdn => {
            s = prob.state.scaled(prob.alpha);
            let pred = s.matvec(&prob.k);
            let e: Vector = prob.v.iter().zip(&pred).map(|(v, p)| v - p).collect();
            s.rank1_update(prob.beta, &e, &pk);
        }
        PocpVariant::PLonghorn => {
            s = prob.state.clone();
            let eps = longhorn_gain(prob.beta, &prob.k, &pk);
            let pred = s.matvec(&prob.k);
            let e: Vector = prob.v.iter().zip(&pred).map(|(v, p)| v - p).collect();
            s.rank1_update(eps, &e, &pk);
        }
        PocpVariant::KeyPrecondMamba2 => {
            s = prob.state.scaled(prob.alpha);
            s.rank1_update(1.0, &prob.v, &pk);
        }
    }
    Ok(s)
}

/// Modified gain `beta / (1 + beta k^T P k)`.
pub fn longhorn_gain(beta: f64, k: &[f64], pk: &[f64]) -> f64 {
    beta / (1.0 + beta * dot(k, pk))
}

/// Central-difference gradient of the objective at `s`.
pub fn pocp_fd_gradient(variant: PocpVariant, prob: &PocpProblem, p_inv: &Matrix, s: &Matrix, h: f64) -> Matrix {
    let mut g = Matrix::zeros(s.rows(), s.cols());
    let mut probe = s.clone();
    for i in 0..s.rows() {
        for j in 0..s.cols() {
            let base = probe[(i, j)];
            probe[(i, j)] = base + h;
            let up = pocp_objective(variant, prob, p_inv, &probe);
            probe[(i, j)] = base - h;
            let down = pocp_objective(variant, prob, p_inv, &probe);
            probe[(i, j)] = base;
            g[(i, j)] = (up - down) / (2.0 * h);
        }
    }
    g
}

/// Stationarity and local minimality of the closed-form solution.
///
/// Records the finite-difference gradient norm (tolerance 1e-7) and, for
/// `perturbations` random directions of size 1e-3, the amount by which the
/// objective fails to increase.
pub fn pocp_verify(variant: PocpVariant, prob: &PocpProblem, perturbations: usize, seed: u64) -> Result<TheoremReport> {
    let p_inv = prob.validate()?;
    let s = pocp_solution(variant, prob)?;
    let mut report = TheoremReport::new(format!("pocp_{}", variant.name()), 1e-7);
    let grad = pocp_fd_gradient(variant, prob, &p_inv, &s, 1e-5);
    report.record("fd_gradient_norm", grad.frobenius_norm());
    let f0 = pocp_objective(variant, prob, &p_inv, &s);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..perturbations {
        let delta = Matrix::from_fn(s.rows(), s.cols(), |_, _| rng.gen_range(-1e-3..1e-3));
        let f = pocp_objective(variant, prob, &p_inv, &s.add(&delta));
        worst = worst.max(f0 - f);
    }
    report.record("objective_decrease_under_perturbation", worst.max(0.0));
    Ok(report)
}

/// Random POCP instance with a well-conditioned SPD `P`.
pub fn random_pocp_problem<R: Rng + ?Sized>(rng: &mut R, d_k: usize, d_v: usize) -> PocpProblem {
    let a = Matrix::from_fn(d_k, d_k, |_, _| rng.gen_range(-1.0..1.0));
    let mut p = a.matmul_nt(&a).scaled(1.0 / d_k as f64);
    for i in 0..d_k {
        p[(i, i)] += 0.5;
    }
    PocpProblem {
        state: Matrix::from_fn(d_v, d_k, |_, _| rng.gen_range(-1.0..1.0)),
        k: random_unit_rows(rng, 1, d_k).into_data(),
        v: (0..d_v).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        alpha: rng.gen_range(0.5..1.0),
        beta: rng.gen_range(0.1..1.0),
        p,
    }
}

/// P-Longhorn with `P^{-1} = G_{t-1}` against PGDN (no decay, unit gain)
/// with `P^{-1} = G_t`; returns the largest state difference.
pub fn longhorn_gdn_correspondence(prev_keys: &Matrix, k: &[f64], v: &[f64], state: &Matrix, lambda: f64) -> Result<f64> {
    let d = k.len();
    let mut g_prev = prev_keys.matmul_tn(prev_keys);
    for i in 0..d {
        g_prev[(i, i)] += lambda;
    }
    let mut g = g_prev.clone();
    g.rank1_update(1.0, k, k);
    let base = PocpProblem {
        state: state.clone(),
        k: k.to_vec(),
        v: v.to_vec(),
        alpha: 1.0,
        beta: 1.0,
        p: dense::inverse(&g_prev)?,
    };
    let p_sym = |m: Matrix| m.add(&m.transpose()).scaled(0.5);
    let lh = pocp_solution(
        PocpVariant::PLonghorn,
        &PocpProblem {
            p: p_sym(base.p.clone()),
            ..base.clone()
        },
    )?;
    let gdn = pocp_solution(
        PocpVariant::Pgdn,
        &PocpProblem {
            p: p_sym(dense::inverse(&g)?),
            ..base
        },
    )?;
    Ok(lh.max_abs_diff(&gdn))
}

/// Sherman-Morrison write keys `P_{t-1} k / (1 + k^T P_{t-1} k)` over random
/// histories: records `max(0, -k^T k_w, k^T k_w - 1)` (tolerance 0).
pub fn check_write_key_bounds(draws: usize, seed: u64) -> Result<TheoremReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = TheoremReport::new("write_key_bounds", 0.0);
    for i in 0..draws {
        let d = rng.gen_range(1..=16);
        let lambda = [1e-3, 0.1, 1.0, 10.0][i % 4];
        let hist = rng.gen_range(0..3 * d);
        let mut st = crate::precond::ExactGramState::new(d, lambda)?;
        for _ in 0..hist {
            let scale = rng.gen_range(0.1..3.0);
            let k: Vector = random_unit_rows(&mut rng, 1, d).into_data().into_iter().map(|x| x * scale).collect();
            st.update(&k)?;
        }
        let scale = rng.gen_range(0.01..10.0);
        let k: Vector = random_unit_rows(&mut rng, 1, d).into_data().into_iter().map(|x| x * scale).collect();
        let kw = st.update(&k)?;
        let ip = dot(&k, &kw);
        report.record(format!("draw{i}"), (-ip).max(ip - 1.0).max(0.0));
    }
    Ok(report)
}

/// `v k^T` helper for callers building oracle states.
pub fn rank_one(v: &[f64], k: &[f64]) -> Matrix {
    outer(v, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recurrence::{step_online, TokenGates};

    fn e(i: usize, d: usize) -> Vector {
        (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn least_squares_examples() {
        let w = vec![2.0, -1.0, 0.5];
        let o = LeastSquaresOracle::new(Matrix::from_rows(&[e(0, 2)]), Matrix::from_rows(&[w.clone()]), 1.0).unwrap();
        let s = least_squares_map(&o).unwrap();
        assert!(s.max_abs_diff(&outer(&w, &e(0, 2)).scaled(0.5)) < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = random_unit_rows(&mut rng, 5, 3);
        let v = Matrix::from_fn(5, 2, |_, _| rng.gen_range(-1.0..1.0));
        let big = least_squares_map(&LeastSquaresOracle::new(k.clone(), v.clone(), 1e9).unwrap()).unwrap();
        let c = v.matmul_tn(&k);
        assert!(big.scaled(1e9).max_abs_diff(&c) < 1e-6);

        let s_true = Matrix::from_fn(2, 3, |_, _| rng.gen_range(-1.0..1.0));
        let k = random_unit_rows(&mut rng, 6, 3);
        let v = k.matmul_nt(&s_true);
        let s = least_squares_map(&LeastSquaresOracle::new(k, v, 0.0).unwrap()).unwrap();
        assert!(s.max_abs_diff(&s_true) < 1e-10);

        let deficient = LeastSquaresOracle::new(Matrix::from_rows(&[e(0, 2)]), Matrix::from_rows(&[[1.0]]), 0.0).unwrap();
        assert!(least_squares_map(&deficient).is_err());
        assert!(LeastSquaresOracle::new(Matrix::zeros(2, 2), Matrix::zeros(3, 2), 1.0).is_err());
    }

    #[test]
    fn theorem1_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (t, d, lambda, tol) in [(64, 8, 1.0, 1e-9), (16, 4, 10.0, 1e-9)] {
            let seq = SequenceBatch::new(
                random_unit_rows(&mut rng, t, d),
                random_unit_rows(&mut rng, t, d),
                Matrix::from_fn(t, 3, |_, _| rng.gen_range(-1.0..1.0)),
            );
            let r = check_theorem1(&seq, lambda).unwrap();
            assert!(r.pass && r.max_deviation < tol, "{r:?}");
        }
        let empty = SequenceBatch::new(Matrix::zeros(0, 3), Matrix::zeros(0, 3), Matrix::zeros(0, 2));
        let r = check_theorem1(&empty, 1.0).unwrap();
        assert!(r.pass);
        assert_eq!(r.max_deviation, 0.0);
    }

    #[test]
    fn counterexample_values() {
        let c = counterexample_d2().unwrap();
        assert_eq!(c.s_apla, vec![vec![0.5; 2]; 2]);
        assert!(c.s_apdn.iter().flatten().all(|x| (x - 1.0 / 3.0).abs() < 1e-16));
        assert!(c.differ);
        let diff = c
            .exact_apla
            .iter()
            .flatten()
            .zip(c.exact_apdn.iter().flatten())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-15);
        assert!((c.exact_apdn[0][0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(c, counterexample_d2().unwrap());
    }

    #[test]
    fn closed_form_plug_in() {
        assert!((la_error_closed_form(4.0, 4, 5) - 1.0).abs() < 1e-15);
        assert_eq!(la_error_closed_form(8.0, 4, 0), 2.0);
    }

    #[test]
    fn montecarlo_small() {
        let r = theorem2_montecarlo(4, 16, 2000, 0.7, 3).unwrap();
        assert!(r.dn_bound_report().pass);
        assert!(r.exact_report().pass, "{:?}", r.exact_report());
        let cf = r.closed_form_report();
        assert!(cf.max_deviation < 4.5, "{cf:?}");
        assert!(theorem2_montecarlo(4, 8, 10, 1.0, 0).is_err());
    }

    #[test]
    fn orthonormal_keys_interpolate() {
        let d = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s_true = Matrix::from_fn(3, d, |_, _| rng.gen_range(-1.0..1.0));
        let mut s = StateMatrix::zeros(3, d);
        for i in 0..d {
            let k = e(i, d);
            s = step_online(&s, &k, &k, &s_true.matvec(&k), TokenGates::plain(1.0)).unwrap();
        }
        assert_eq!(s.0, s_true);
    }

    #[test]
    fn eigen_examples() {
        let k = crate::numerics::normalize(&[1.0, 2.0, 2.0]);
        let r = transition_eigs(0.9, 0.5, &k, &k).unwrap();
        assert!((r.lambda_write - 0.45).abs() < 1e-15);
        assert_eq!(r.lambda_bulk, 0.9);
        assert!(r.trace_residual < 1e-12 && r.det_residual < 1e-12);

        let neg = negative_eigenvalue_example(0.8, 1.0, 1.5, 4).unwrap();
        assert!(neg.lambda_write < 0.0);
        assert!((neg.lambda_write - 0.8 * (1.0 - 1.5)).abs() < 1e-15);

        let zero = transition_eigs(0.7, 0.0, &k, &k).unwrap();
        assert_eq!(zero.lambda_write, 0.7);
        assert!((zero.spectral_radius - 0.7).abs() < 1e-12);
        assert!(transition_eigs(0.7, 0.5, &[1.0, 1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn unit_disk_examples() {
        assert!(check_unit_disk(1.0, 2.0, 500, 5).unwrap().pass);
        assert!(check_unit_disk(0.9, 1.0, 200, 6).unwrap().pass);
        let violated = check_unit_disk(1.0, 3.0, 500, 7).unwrap();
        assert!(!violated.pass);
        let boom = negative_eigenvalue_example(0.9, 1.0, 3.0, 3).unwrap();
        assert!(boom.lambda_write.abs() > 1.0);
        assert!(check_transition_eigs(200, 8).unwrap().pass);
    }

    #[test]
    fn pocp_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for variant in PocpVariant::ALL {
            for _ in 0..10 {
                let prob = random_pocp_problem(&mut rng, 5, 3);
                let r = pocp_verify(variant, &prob, 16, 1).unwrap();
                assert!(r.pass, "{r:?}");
            }
        }
    }

    #[test]
    fn pocp_identity_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut prob = random_pocp_problem(&mut rng, 4, 2);
        prob.p = Matrix::identity(4);
        let gates = TokenGates {
            beta: prob.beta,
            decay: DecayGate::Scalar(prob.alpha),
        };
        let gdn = step_online(&StateMatrix(prob.state.clone()), &prob.k, &prob.k, &prob.v, gates).unwrap();
        assert!(pocp_solution(PocpVariant::Pgdn, &prob).unwrap().max_abs_diff(&gdn) < 1e-15);

        let gain = longhorn_gain(prob.beta, &prob.k, &prob.k);
        assert!((gain - prob.beta / (1.0 + prob.beta)).abs() < 1e-15);

        let b = vec![0.7, 1.2, 1.4, 0.9];
        prob.p = Matrix::diag(&b);
        let kw: Vector = b.iter().zip(&prob.k).map(|(b, k)| b * k).collect();
        let want = step_online(&StateMatrix(prob.state.clone()), &prob.k, &kw, &prob.v, gates).unwrap();
        assert!(pocp_solution(PocpVariant::Pgdn, &prob).unwrap().max_abs_diff(&want) < 1e-15);

        prob.p = Matrix::from_rows(&[[1.0, 2.0, 0.0, 0.0], [2.0, 1.0, 0.0, 0.0], [0.0; 4], [0.0; 4]]);
        assert!(pocp_verify(PocpVariant::Pgdn, &prob, 1, 0).is_err());
    }

    #[test]
    fn longhorn_correspondence() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let d = rng.gen_range(2..8);
            let n = rng.gen_range(0..12);
            let prev = random_unit_rows(&mut rng, n, d);
            let k = random_unit_rows(&mut rng, 1, d).into_data();
            let s = Matrix::from_fn(3, d, |_, _| rng.gen_range(-1.0..1.0));
            let dev = longhorn_gdn_correspondence(&prev, &k, &[0.1, 0.2, 0.3], &s, 0.5).unwrap();
            assert!(dev < 1e-10, "{dev}");
        }
    }

    #[test]
    fn write_keys_bounded() {
        assert!(check_write_key_bounds(2000, 12).unwrap().pass);
    }
}
