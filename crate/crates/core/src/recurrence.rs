//! Token-by-token reference recurrences.
//!
//! Every variant is a point in a three-axis grid:
//!
//! | solve   | decay: none | scalar  | diagonal |
//! |---------|-------------|---------|----------|
//! | offline | LA          | Mamba-2 | GLA      |
//! | online  | DeltaNet    | GDN     | KDA      |
//!
//! and a preconditioner axis (`none`, `exact`, `diag_raw`, `diag_stable`).
//! Offline variants apply the preconditioner to the query at readout;
//! online variants apply it to the write key. The chunkwise kernels in
//! [`crate::chunkwise`] are checked against these loops.

use std::fmt;
use std::ops::{Deref, DerefMut};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::numerics::{dot, norm, Matrix, Vector};
use crate::precond::{
    atk_unstable_write_key, atq_transform, squash_traced, DiagGramState, ExactGramState, SquashParams,
    SquashTrace, DEFAULT_DIAG_RIDGE, DEFAULT_X,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solve {
    Online,
    Offline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKind {
    None,
    Scalar,
    Diagonal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecondKind {
    None,
    Exact,
    DiagRaw,
    DiagStable,
}

impl FromStr for PrecondKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "exact" => Ok(Self::Exact),
            "diag-raw" | "diag_raw" => Ok(Self::DiagRaw),
            "diag-stable" | "diag_stable" => Ok(Self::DiagStable),
            other => Err(Error::InvalidConfig(format!("unknown preconditioner '{other}'"))),
        }
    }
}

impl fmt::Display for PrecondKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Exact => "exact",
            Self::DiagRaw => "diag-raw",
            Self::DiagStable => "diag-stable",
        })
    }
}

/// Named base recurrences. The `P`-prefixed names select a preconditioner
/// (diag-stable unless overridden).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    La,
    Mamba2,
    Gla,
    Dn,
    Gdn,
    Kda,
    Pla,
    Pmamba2,
    Pgla,
    Pdn,
    Pgdn,
    Pkda,
}

impl Variant {
    pub const ALL: [Variant; 12] = [
        Variant::La,
        Variant::Mamba2,
        Variant::Gla,
        Variant::Dn,
        Variant::Gdn,
        Variant::Kda,
        Variant::Pla,
        Variant::Pmamba2,
        Variant::Pgla,
        Variant::Pdn,
        Variant::Pgdn,
        Variant::Pkda,
    ];

    pub fn solve(self) -> Solve {
        use Variant::*;
        match self {
            La | Mamba2 | Gla | Pla | Pmamba2 | Pgla => Solve::Offline,
            _ => Solve::Online,
        }
    }

    pub fn decay(self) -> DecayKind {
        use Variant::*;
        match self {
            La | Dn | Pla | Pdn => DecayKind::None,
            Mamba2 | Gdn | Pmamba2 | Pgdn => DecayKind::Scalar,
            Gla | Kda | Pgla | Pkda => DecayKind::Diagonal,
        }
    }

    pub fn is_preconditioned(self) -> bool {
        use Variant::*;
        matches!(self, Pla | Pmamba2 | Pgla | Pdn | Pgdn | Pkda)
    }

    pub fn default_precond(self) -> PrecondKind {
        if self.is_preconditioned() {
            PrecondKind::DiagStable
        } else {
            PrecondKind::None
        }
    }

    pub fn name(self) -> &'static str {
        use Variant::*;
        match self {
            La => "la",
            Mamba2 => "mamba2",
            Gla => "gla",
            Dn => "dn",
            Gdn => "gdn",
            Kda => "kda",
            Pla => "pla",
            Pmamba2 => "pmamba2",
            Pgla => "pgla",
            Pdn => "pdn",
            Pgdn => "pgdn",
            Pkda => "pkda",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant '{s}'")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecurrenceConfig {
    pub d_k: usize,
    pub d_v: usize,
    pub solve: Solve,
    pub decay: DecayKind,
    pub precond: PrecondKind,
    /// Ridge: `lambda I` for the exact Gram, `lambda * 1` inside the raw
    /// diagonal inverses.
    pub lambda: f64,
    /// Squash bound for the stable diagonal preconditioner.
    pub x: f64,
    /// Require unit-norm query and key rows.
    pub normalize_qk: bool,
}

impl RecurrenceConfig {
    pub fn new(d_k: usize, d_v: usize, solve: Solve, decay: DecayKind, precond: PrecondKind) -> Self {
        Self {
            d_k,
            d_v,
            solve,
            decay,
            precond,
            lambda: DEFAULT_DIAG_RIDGE,
            x: DEFAULT_X,
            normalize_qk: false,
        }
    }

    pub fn for_variant(variant: Variant, d_k: usize, d_v: usize) -> Self {
        Self::new(d_k, d_v, variant.solve(), variant.decay(), variant.default_precond())
    }

    pub fn with_precond(mut self, precond: PrecondKind) -> Self {
        self.precond = precond;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_x(mut self, x: f64) -> Self {
        self.x = x;
        self
    }

    pub fn with_normalized_qk(mut self, on: bool) -> Self {
        self.normalize_qk = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_k == 0 || self.d_v == 0 {
            return Err(Error::InvalidConfig("d_k and d_v must be positive".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        match self.precond {
            PrecondKind::Exact if !(self.lambda > 0.0) => Err(Error::InvalidConfig(
                "exact preconditioning needs lambda > 0".into(),
            )),
            PrecondKind::DiagStable if !(1.0..=2.0).contains(&self.x) => Err(Error::InvalidConfig(format!(
                "squash bound x must lie in [1, 2] for a stable transition, got {}",
                self.x
            ))),
            _ => Ok(()),
        }
    }

    /// Human-readable name of the base recurrence for this configuration.
    pub fn variant(&self) -> Variant {
        use Variant::*;
        let p = self.precond != PrecondKind::None;
        match (self.solve, self.decay, p) {
            (Solve::Offline, DecayKind::None, false) => La,
            (Solve::Offline, DecayKind::Scalar, false) => Mamba2,
            (Solve::Offline, DecayKind::Diagonal, false) => Gla,
            (Solve::Online, DecayKind::None, false) => Dn,
            (Solve::Online, DecayKind::Scalar, false) => Gdn,
            (Solve::Online, DecayKind::Diagonal, false) => Kda,
            (Solve::Offline, DecayKind::None, true) => Pla,
            (Solve::Offline, DecayKind::Scalar, true) => Pmamba2,
            (Solve::Offline, DecayKind::Diagonal, true) => Pgla,
            (Solve::Online, DecayKind::None, true) => Pdn,
            (Solve::Online, DecayKind::Scalar, true) => Pgdn,
            (Solve::Online, DecayKind::Diagonal, true) => Pkda,
        }
    }
}

/// Per-token decay gates for the main recurrence.
#[derive(Clone, Debug, PartialEq)]
pub enum Decay {
    None,
    Scalar(Vector),
    /// `T x d_k`, decaying the key dimension of the state.
    Diagonal(Matrix),
}

impl Decay {
    pub fn kind(&self) -> DecayKind {
        match self {
            Decay::None => DecayKind::None,
            Decay::Scalar(_) => DecayKind::Scalar,
            Decay::Diagonal(_) => DecayKind::Diagonal,
        }
    }

    pub fn gate(&self, t: usize) -> DecayGate<'_> {
        match self {
            Decay::None => DecayGate::None,
            Decay::Scalar(a) => DecayGate::Scalar(a[t]),
            Decay::Diagonal(a) => DecayGate::Diagonal(a.row(t)),
        }
    }
}

/// Decay applied by one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecayGate<'a> {
    None,
    Scalar(f64),
    Diagonal(&'a [f64]),
}

impl DecayGate<'_> {
    /// `S <- S diag(alpha)` (or `alpha S`).
    pub fn apply(&self, s: &mut Matrix) {
        match *self {
            DecayGate::None => {}
            DecayGate::Scalar(a) => s.scale(a),
            DecayGate::Diagonal(a) => s.scale_cols(a),
        }
    }

    /// The decay as a length-`d` vector.
    pub fn to_vector(&self, d: usize) -> Vector {
        match *self {
            DecayGate::None => vec![1.0; d],
            DecayGate::Scalar(a) => vec![a; d],
            DecayGate::Diagonal(a) => a.to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenGates<'a> {
    pub beta: f64,
    pub decay: DecayGate<'a>,
}

impl TokenGates<'_> {
    pub fn plain(beta: f64) -> Self {
        Self {
            beta,
            decay: DecayGate::None,
        }
    }
}

/// One sequence of per-token inputs and gate values.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Gain in `[0, 1]`.
    pub beta: Vector,
    pub alpha: Decay,
    /// Preconditioner gain in `[0, 1]`.
    pub beta_p: Vector,
    /// Preconditioner decay in `(0, 1]`.
    pub alpha_p: Vector,
    /// Squash center in log space, stored as `mu = exp(mu_raw)`.
    pub mu_raw: f64,
}

impl SequenceBatch {
    /// Ungated sequence: `beta = 1`, no decay, preconditioner gates 1,
    /// `mu = 1`.
    pub fn new(q: Matrix, k: Matrix, v: Matrix) -> Self {
        let t = q.rows();
        Self {
            q,
            k,
            v,
            beta: vec![1.0; t],
            alpha: Decay::None,
            beta_p: vec![1.0; t],
            alpha_p: vec![1.0; t],
            mu_raw: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mu(&self) -> f64 {
        self.mu_raw.exp()
    }

    pub fn gates(&self, t: usize) -> TokenGates<'_> {
        TokenGates {
            beta: self.beta[t],
            decay: self.alpha.gate(t),
        }
    }

    /// Tokens `start..end` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> SequenceBatch {
        SequenceBatch {
            q: self.q.slice_rows(start, end),
            k: self.k.slice_rows(start, end),
            v: self.v.slice_rows(start, end),
            beta: self.beta[start..end].to_vec(),
            alpha: match &self.alpha {
                Decay::None => Decay::None,
                Decay::Scalar(a) => Decay::Scalar(a[start..end].to_vec()),
                Decay::Diagonal(a) => Decay::Diagonal(a.slice_rows(start, end)),
            },
            beta_p: self.beta_p[start..end].to_vec(),
            alpha_p: self.alpha_p[start..end].to_vec(),
            mu_raw: self.mu_raw,
        }
    }

    pub fn validate(&self, cfg: &RecurrenceConfig) -> Result<()> {
        let t = self.len();
        let shape = |name: &'static str, m: &Matrix, cols: usize| -> Result<()> {
            if m.shape() != (t, cols) {
                return Err(mismatch(name, format!("({t}, {cols})"), format!("{:?}", m.shape())));
            }
            m.check_finite(name)
        };
        shape("queries", &self.q, cfg.d_k)?;
        shape("keys", &self.k, cfg.d_k)?;
        shape("values", &self.v, cfg.d_v)?;
        if self.beta.len() != t {
            return Err(mismatch("beta", t, self.beta.len()));
        }
        if let Some(b) = self.beta.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(Error::InvalidInput(format!("gain {b} outside [0, 1]")));
        }
        if self.alpha.kind() != cfg.decay {
            return Err(Error::InvalidInput(format!(
                "decay gates are {:?} but the configuration expects {:?}",
                self.alpha.kind(),
                cfg.decay
            )));
        }
        let decay_ok = |a: &f64| *a > 0.0 && *a <= 1.0;
        match &self.alpha {
            Decay::None => {}
            Decay::Scalar(a) => {
                if a.len() != t {
                    return Err(mismatch("alpha", t, a.len()));
                }
                if let Some(x) = a.iter().find(|x| !decay_ok(x)) {
                    return Err(Error::InvalidInput(format!("decay {x} outside (0, 1]")));
                }
            }
            Decay::Diagonal(a) => {
                shape("alpha", a, cfg.d_k)?;
                if let Some(x) = a.data().iter().find(|x| !decay_ok(x)) {
                    return Err(Error::InvalidInput(format!("decay {x} outside (0, 1]")));
                }
            }
        }
        if matches!(cfg.precond, PrecondKind::DiagRaw | PrecondKind::DiagStable) {
            if self.beta_p.len() != t || self.alpha_p.len() != t {
                return Err(mismatch("preconditioner gates", t, self.beta_p.len().min(self.alpha_p.len())));
            }
            if let Some(b) = self.beta_p.iter().find(|b| !(0.0..=1.0).contains(*b)) {
                return Err(Error::InvalidInput(format!("preconditioner gain {b} outside [0, 1]")));
            }
            if let Some(a) = self.alpha_p.iter().find(|a| !decay_ok(a)) {
                return Err(Error::InvalidInput(format!("preconditioner decay {a} outside (0, 1]")));
            }
            if !self.mu_raw.is_finite() {
                return Err(Error::NonFinite("mu_raw".into()));
            }
        }
        if cfg.normalize_qk {
            for i in 0..t {
                for (name, row) in [("query", self.q.row(i)), ("key", self.k.row(i))] {
                    if (norm(row) - 1.0).abs() > 1e-8 {
                        return Err(Error::InvalidInput(format!("{name} row {i} is not unit norm")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Recurrent state `S` (`d_v x d_k`).
#[derive(Clone, Debug, PartialEq)]
pub struct StateMatrix(pub Matrix);

impl StateMatrix {
    pub fn zeros(d_v: usize, d_k: usize) -> Self {
        Self(Matrix::zeros(d_v, d_k))
    }
}

impl Deref for StateMatrix {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.0
    }
}

impl DerefMut for StateMatrix {
    fn deref_mut(&mut self) -> &mut Matrix {
        &mut self.0
    }
}

fn check_step_dims(state: &Matrix, k: &[f64], v: &[f64], gates: &TokenGates<'_>) -> Result<()> {
    if k.len() != state.cols() {
        return Err(mismatch("step key", state.cols(), k.len()));
    }
    if v.len() != state.rows() {
        return Err(mismatch("step value", state.rows(), v.len()));
    }
    if let DecayGate::Diagonal(a) = gates.decay {
        if a.len() != state.cols() {
            return Err(mismatch("step decay", state.cols(), a.len()));
        }
    }
    Ok(())
}

/// `S_t = alpha_t S_{t-1} + beta_t v k^T`.
pub fn step_offline(state: &StateMatrix, k: &[f64], v: &[f64], gates: TokenGates<'_>) -> Result<StateMatrix> {
    check_step_dims(state, k, v, &gates)?;
    let mut s = state.0.clone();
    gates.decay.apply(&mut s);
    s.rank1_update(gates.beta, v, k);
    Ok(StateMatrix(s))
}

/// `S_t = alpha_t S_{t-1} + beta_t (v - alpha_t S_{t-1} k_read) k_write^T`.
pub fn step_online(
    state: &StateMatrix,
    k_read: &[f64],
    k_write: &[f64],
    v: &[f64],
    gates: TokenGates<'_>,
) -> Result<StateMatrix> {
    check_step_dims(state, k_read, v, &gates)?;
    if k_write.len() != k_read.len() {
        return Err(mismatch("write key", k_read.len(), k_write.len()));
    }
    let mut s = state.0.clone();
    online_in_place(&mut s, k_read, k_write, v, gates);
    Ok(StateMatrix(s))
}

/// In-place online step; returns the prediction error `v - S_d k_read`.
fn online_in_place(s: &mut Matrix, k_read: &[f64], k_write: &[f64], v: &[f64], gates: TokenGates<'_>) -> Vector {
    gates.decay.apply(s);
    let mut err = v.to_vec();
    for (i, e) in err.iter_mut().enumerate() {
        *e -= dot(s.row(i), k_read);
    }
    s.rank1_update(gates.beta, &err, k_write);
    err
}

/// One diagonal-plus-low-rank transition:
/// `S_t = S_{t-1} (diag(D) - a b^T) + v k^T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DPLRStep {
    pub d: Vector,
    pub a: Vector,
    pub b: Vector,
    pub k: Vector,
    pub v: Vector,
}

impl DPLRStep {
    /// Tying that reproduces [`step_online`]: `D = alpha`, `a = beta (alpha * k_read)`
    /// (the read side), `b = k_write`, and the additive term `(beta v) k_write^T`.
    pub fn from_online(k_read: &[f64], k_write: &[f64], v: &[f64], gates: TokenGates<'_>) -> Self {
        let d = gates.decay.to_vector(k_read.len());
        let a = d.iter().zip(k_read).map(|(di, k)| gates.beta * di * k).collect();
        Self {
            d,
            a,
            b: k_write.to_vec(),
            k: k_write.to_vec(),
            v: v.iter().map(|x| gates.beta * x).collect(),
        }
    }
}

pub fn step_dplr(state: &StateMatrix, step: &DPLRStep) -> Result<StateMatrix> {
    let dk = state.cols();
    for (name, len) in [("D", step.d.len()), ("a", step.a.len()), ("b", step.b.len()), ("k", step.k.len())] {
        if len != dk {
            return Err(Error::DimensionMismatch {
                context: "step_dplr",
                expected: format!("{name} of length {dk}"),
                found: len.to_string(),
            });
        }
    }
    if step.v.len() != state.rows() {
        return Err(mismatch("step_dplr value", state.rows(), step.v.len()));
    }
    let sa = state.matvec(&step.a);
    let mut s = state.0.clone();
    s.scale_cols(&step.d);
    s.rank1_update(-1.0, &sa, &step.b);
    s.rank1_update(1.0, &step.v, &step.k);
    Ok(StateMatrix(s))
}

/// Explicit transition factor `diag(alpha) (I - beta k_read k_write^T)` of an
/// online step, acting on the state from the right.
pub fn online_transition(k_read: &[f64], k_write: &[f64], gates: TokenGates<'_>) -> Matrix {
    let d = k_read.len();
    let mut m = Matrix::identity(d);
    m.rank1_update(-gates.beta, k_read, k_write);
    let mut decay = Matrix::identity(d);
    gates.decay.apply(&mut decay);
    decay.matmul(&m)
}

/// Preconditioner intermediates for one token.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenRecord {
    /// Diagonal accumulator before the token's update.
    pub a_prev: Option<Vector>,
    /// Diagonal accumulator after the token's update.
    pub a: Option<Vector>,
    /// Squash intermediates (stable preconditioner only).
    pub squash: Option<SquashTrace>,
    /// Inverse Gram after the token (exact preconditioner only).
    pub p: Option<Matrix>,
    /// Key used for the write (`k` unless preconditioned online).
    pub k_write: Vector,
    /// Query used for the readout (`q` unless preconditioned offline).
    pub q_read: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequentialRun {
    /// `T x d_v`.
    pub outputs: Matrix,
    pub final_state: StateMatrix,
    pub trace: Vec<TokenRecord>,
}

pub fn run_sequential(cfg: &RecurrenceConfig, seq: &SequenceBatch) -> Result<SequentialRun> {
    run_sequential_from(cfg, seq, &StateMatrix::zeros(cfg.d_v, cfg.d_k))
}

pub fn run_sequential_from(cfg: &RecurrenceConfig, seq: &SequenceBatch, s0: &StateMatrix) -> Result<SequentialRun> {
    forward(cfg, seq, s0, None)
}

/// Per-token preconditioner machine used by the sequential forward.
enum PrecondRunner {
    None,
    Exact(ExactGramState),
    Diag { state: DiagGramState, stable: bool, params: SquashParams },
}

/// Forward pass. When `states` is given, the state before every token is
/// pushed onto it (for the backward pass).
pub(crate) fn forward(
    cfg: &RecurrenceConfig,
    seq: &SequenceBatch,
    s0: &StateMatrix,
    mut states: Option<&mut Vec<Matrix>>,
) -> Result<SequentialRun> {
    cfg.validate()?;
    seq.validate(cfg)?;
    if s0.shape() != (cfg.d_v, cfg.d_k) {
        return Err(mismatch(
            "initial state",
            format!("({}, {})", cfg.d_v, cfg.d_k),
            format!("{:?}", s0.shape()),
        ));
    }
    let t_len = seq.len();
    let ridge = cfg.lambda;
    let mut pre = match cfg.precond {
        PrecondKind::None => PrecondRunner::None,
        PrecondKind::Exact => PrecondRunner::Exact(ExactGramState::new(cfg.d_k, cfg.lambda)?),
        PrecondKind::DiagRaw | PrecondKind::DiagStable => PrecondRunner::Diag {
            state: DiagGramState::zeros(cfg.d_k),
            stable: cfg.precond == PrecondKind::DiagStable,
            params: SquashParams::from_raw(seq.mu_raw, cfg.x.max(1.0))?,
        },
    };

    let mut s = s0.0.clone();
    let mut outputs = Matrix::zeros(t_len, cfg.d_v);
    let mut trace = Vec::with_capacity(t_len);

    for t in 0..t_len {
        let q = seq.q.row(t);
        let k = seq.k.row(t);
        let v = seq.v.row(t);
        let gates = seq.gates(t);
        let mut rec = TokenRecord::default();

        // preconditioner update, then the write-key / query transform
        let (k_write, q_read) = match &mut pre {
            PrecondRunner::None => (k.to_vec(), q.to_vec()),
            PrecondRunner::Exact(st) => {
                let kw = st.update(k)?;
                let out = match cfg.solve {
                    Solve::Online => (kw, q.to_vec()),
                    Solve::Offline => (k.to_vec(), st.transform_query(q)),
                };
                rec.p = Some(st.p.clone());
                out
            }
            PrecondRunner::Diag { state, stable, params } => {
                let a_prev = state.a.clone();
                state.update(k, seq.alpha_p[t], seq.beta_p[t])?;
                let out = if *stable {
                    let sq = squash_traced(&state.a, *params);
                    let target = match cfg.solve {
                        Solve::Online => k,
                        Solve::Offline => q,
                    };
                    let scaled: Vector = sq.b.iter().zip(target).map(|(b, x)| b * x).collect();
                    rec.squash = Some(sq);
                    match cfg.solve {
                        Solve::Online => (scaled, q.to_vec()),
                        Solve::Offline => (k.to_vec(), scaled),
                    }
                } else {
                    match cfg.solve {
                        Solve::Online => (atk_unstable_write_key(&a_prev, k, ridge), q.to_vec()),
                        Solve::Offline => (k.to_vec(), atq_transform(&state.a, q, ridge)),
                    }
                };
                rec.a_prev = Some(a_prev);
                rec.a = Some(state.a.clone());
                out
            }
        };

        if let Some(st) = states.as_deref_mut() {
            st.push(s.clone());
        }
        match cfg.solve {
            Solve::Online => {
                online_in_place(&mut s, k, &k_write, v, gates);
            }
            Solve::Offline => {
                gates.decay.apply(&mut s);
                s.rank1_update(gates.beta, v, &k_write);
            }
        }
        let o = outputs.row_mut(t);
        for (i, oi) in o.iter_mut().enumerate() {
            *oi = dot(s.row(i), &q_read);
        }
        if !o.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("output at token {t}")));
        }
        rec.k_write = k_write;
        rec.q_read = q_read;
        trace.push(rec);
    }

    if !s.is_finite() {
        return Err(Error::NonFinite("final state".into()));
    }
    Ok(SequentialRun {
        outputs,
        final_state: StateMatrix(s),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{normalize, outer};
    use crate::testutil::{random_batch, random_unit_rows};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn e(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn offline_step_examples() {
        let s0 = StateMatrix::zeros(2, 2);
        let s1 = step_offline(&s0, &e(0, 2), &e(0, 2), TokenGates::plain(1.0)).unwrap();
        assert_eq!(s1.0, outer(&e(0, 2), &e(0, 2)));

        let same = step_offline(&s1, &[0.3, 0.7], &[1.0, 2.0], TokenGates::plain(0.0)).unwrap();
        assert_eq!(same, s1);

        let gates = TokenGates {
            beta: 1.0,
            decay: DecayGate::Scalar(0.5),
        };
        let s2 = step_offline(&s1, &e(1, 2), &e(1, 2), gates).unwrap();
        assert_eq!(s2.0, Matrix::from_rows(&[[0.5, 0.0], [0.0, 1.0]]));
        assert!(step_offline(&s1, &[1.0], &[1.0, 0.0], gates).is_err());
    }

    #[test]
    fn online_step_examples() {
        let k = normalize(&[1.0, 2.0, -1.0]);
        let v = vec![0.5, -1.0];
        let s0 = StateMatrix::zeros(2, 3);
        let s1 = step_online(&s0, &k, &k, &v, TokenGates::plain(1.0)).unwrap();
        assert!(s1.max_abs_diff(&outer(&v, &k)) < 1e-15);
        let s2 = step_online(&s1, &k, &k, &v, TokenGates::plain(1.0)).unwrap();
        assert!(s2.max_abs_diff(&s1) < 1e-12);

        let s = StateMatrix(outer(&e(0, 2), &e(0, 2)));
        let out = step_online(&s, &e(0, 2), &[0.5, 0.0], &[0.0, 0.0], TokenGates::plain(1.0)).unwrap();
        assert_eq!(out.0, Matrix::from_rows(&[[0.5, 0.0], [0.0, 0.0]]));
        assert!(step_online(&s, &e(0, 2), &[0.5], &[0.0, 0.0], TokenGates::plain(1.0)).is_err());
    }

    #[test]
    fn dplr_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = StateMatrix(Matrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0)));
        let k: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // GDN: D = alpha, a = alpha beta k, b = k, write beta v k^T
        let (alpha, beta) = (0.8, 0.6);
        let gdn = TokenGates {
            beta,
            decay: DecayGate::Scalar(alpha),
        };
        let step = DPLRStep {
            d: vec![alpha; 4],
            a: k.iter().map(|x| alpha * beta * x).collect(),
            b: k.clone(),
            k: k.clone(),
            v: v.iter().map(|x| beta * x).collect(),
        };
        let want = step_online(&s, &k, &k, &v, gdn).unwrap();
        assert!(step_dplr(&s, &step).unwrap().max_abs_diff(&want) < 1e-14);

        // hand-expanded GDN step alpha S (I - beta k k^T) + beta v k^T
        let mut expanded = s.0.scaled(alpha).matmul(&{
            let mut m = Matrix::identity(4);
            m.rank1_update(-beta, &k, &k);
            m
        });
        expanded.rank1_update(beta, &v, &k);
        assert!(expanded.max_abs_diff(&want) < 1e-14);

        // a = 0 is decayed linear attention
        let la = DPLRStep {
            d: vec![alpha; 4],
            a: vec![0.0; 4],
            b: k.clone(),
            k: k.clone(),
            v: v.clone(),
        };
        let want = step_offline(&s, &k, &v, TokenGates { beta: 1.0, decay: DecayGate::Scalar(alpha) }).unwrap();
        assert!(step_dplr(&s, &la).unwrap().max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn dplr_tying_reproduces_online_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for case in 0..1000 {
            let dk = rng.gen_range(1..8);
            let dv = rng.gen_range(1..6);
            let s = StateMatrix(Matrix::from_fn(dv, dk, |_, _| rng.gen_range(-1.0..1.0)));
            let kr: Vec<f64> = (0..dk).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let kw: Vec<f64> = (0..dk).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let v: Vec<f64> = (0..dv).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let diag: Vec<f64> = (0..dk).map(|_| rng.gen_range(0.1..1.0)).collect();
            let decay = match case % 3 {
                0 => DecayGate::None,
                1 => DecayGate::Scalar(rng.gen_range(0.1..1.0)),
                _ => DecayGate::Diagonal(&diag),
            };
            let gates = TokenGates {
                beta: rng.gen_range(0.0..1.0),
                decay,
            };
            let want = step_online(&s, &kr, &kw, &v, gates).unwrap();
            let got = step_dplr(&s, &DPLRStep::from_online(&kr, &kw, &v, gates)).unwrap();
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn plain_deltanet_matches_hand_unroll() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (dk, dv, t) = (4, 3, 3);
        let k = random_unit_rows(&mut rng, t, dk);
        let q = random_unit_rows(&mut rng, t, dk);
        let v = Matrix::from_fn(t, dv, |_, _| rng.gen_range(-1.0..1.0));
        let mut seq = SequenceBatch::new(q.clone(), k.clone(), v.clone());
        seq.beta = vec![0.9, 0.4, 0.7];
        let cfg = RecurrenceConfig::new(dk, dv, Solve::Online, DecayKind::None, PrecondKind::None);
        let run = run_sequential(&cfg, &seq).unwrap();

        let mut s = Matrix::zeros(dv, dk);
        for i in 0..t {
            let (kk, vv) = (k.row(i), v.row(i));
            let sk = s.matvec(kk);
            let mut i_minus = Matrix::identity(dk);
            i_minus.rank1_update(-seq.beta[i], kk, kk);
            s = s.matmul(&i_minus);
            let _ = sk;
            s.rank1_update(seq.beta[i], vv, kk);
            let o = s.matvec(q.row(i));
            assert!(crate::numerics::max_abs_diff(&o, run.outputs.row(i)) < 1e-14);
        }
        assert!(run.final_state.max_abs_diff(&s) < 1e-14);
    }

    #[test]
    fn unit_squash_bound_matches_unpreconditioned() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for variant in Variant::ALL {
            let base = RecurrenceConfig::for_variant(variant, 5, 3);
            let seq = random_batch(&mut rng, &base, 17);
            let plain = run_sequential(&base.with_precond(PrecondKind::None), &seq).unwrap();
            let squashed = run_sequential(&base.with_precond(PrecondKind::DiagStable).with_x(1.0), &seq).unwrap();
            assert_eq!(plain.outputs, squashed.outputs, "{variant}");
        }
    }

    #[test]
    fn exact_offline_and_online_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (dk, dv, t) = (6, 4, 40);
        let cfg_on = RecurrenceConfig::new(dk, dv, Solve::Online, DecayKind::None, PrecondKind::Exact).with_lambda(1.0);
        let cfg_off = RecurrenceConfig { solve: Solve::Offline, ..cfg_on };
        let seq = SequenceBatch::new(
            random_unit_rows(&mut rng, t, dk),
            random_unit_rows(&mut rng, t, dk),
            Matrix::from_fn(t, dv, |_, _| rng.gen_range(-1.0..1.0)),
        );
        let a = run_sequential(&cfg_on, &seq).unwrap();
        let b = run_sequential(&cfg_off, &seq).unwrap();
        assert!(a.outputs.max_abs_diff(&b.outputs) < 1e-10);
    }

    #[test]
    fn empty_and_degenerate_dims() {
        let cfg = RecurrenceConfig::new(1, 1, Solve::Online, DecayKind::Scalar, PrecondKind::DiagStable);
        let empty = SequenceBatch {
            alpha: Decay::Scalar(vec![]),
            ..SequenceBatch::new(Matrix::zeros(0, 1), Matrix::zeros(0, 1), Matrix::zeros(0, 1))
        };
        let run = run_sequential(&cfg, &empty).unwrap();
        assert_eq!(run.outputs.shape(), (0, 1));
        assert_eq!(run.final_state, StateMatrix::zeros(1, 1));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let seq = random_batch(&mut rng, &cfg, 9);
        let run = run_sequential(&cfg, &seq).unwrap();
        assert_eq!(run.outputs.shape(), (9, 1));
        assert!(run.outputs.is_finite());
    }

    #[test]
    fn config_validation() {
        let cfg = RecurrenceConfig::new(4, 4, Solve::Online, DecayKind::None, PrecondKind::DiagStable);
        assert!(cfg.with_x(2.5).validate().is_err());
        assert!(cfg.with_x(2.0).validate().is_ok());
        assert!(cfg.with_precond(PrecondKind::Exact).with_lambda(0.0).validate().is_err());
        assert_eq!(cfg.variant(), Variant::Pdn);
        assert_eq!("pgdn".parse::<Variant>().unwrap(), Variant::Pgdn);
        assert!("foo".parse::<Variant>().is_err());
        assert_eq!("diag-raw".parse::<PrecondKind>().unwrap(), PrecondKind::DiagRaw);
    }

    #[test]
    fn batch_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = RecurrenceConfig::new(3, 2, Solve::Online, DecayKind::Scalar, PrecondKind::None);
        let mut seq = random_batch(&mut rng, &cfg, 5);
        assert!(seq.validate(&cfg).is_ok());
        seq.beta[0] = 1.5;
        assert!(run_sequential(&cfg, &seq).is_err());
        let mut seq = random_batch(&mut rng, &cfg, 5);
        seq.alpha = Decay::None;
        assert!(run_sequential(&cfg, &seq).is_err());
        let mut seq = random_batch(&mut rng, &cfg, 5);
        seq.q.row_mut(0)[0] = 3.0;
        assert!(run_sequential(&cfg.with_normalized_qk(true), &seq).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn decay_tying_reductions(
            variant_ix in 0usize..12,
            precond_ix in 0usize..3,
            t in 0usize..64,
            seed in any::<u64>(),
        ) {
            let variant = Variant::ALL[variant_ix];
            let precond = [PrecondKind::None, PrecondKind::DiagRaw, PrecondKind::DiagStable][precond_ix];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scalar_cfg = RecurrenceConfig { decay: DecayKind::Scalar, precond, ..RecurrenceConfig::for_variant(variant, 4, 3) };
            let seq = random_batch(&mut rng, &scalar_cfg, t);
            let alphas = match &seq.alpha { Decay::Scalar(a) => a.clone(), _ => unreachable!() };

            // diagonal decay with equal entries == scalar decay
            let diag_cfg = RecurrenceConfig { decay: DecayKind::Diagonal, ..scalar_cfg };
            let diag_seq = SequenceBatch {
                alpha: Decay::Diagonal(Matrix::from_fn(t, 4, |i, _| alphas[i])),
                ..seq.clone()
            };
            let a = run_sequential(&scalar_cfg, &seq).unwrap();
            let b = run_sequential(&diag_cfg, &diag_seq).unwrap();
            prop_assert_eq!(&a.outputs, &b.outputs);

            // scalar decay of one == no decay
            let ones = SequenceBatch { alpha: Decay::Scalar(vec![1.0; t]), ..seq.clone() };
            let none_cfg = RecurrenceConfig { decay: DecayKind::None, ..scalar_cfg };
            let none_seq = SequenceBatch { alpha: Decay::None, ..seq.clone() };
            let c = run_sequential(&scalar_cfg, &ones).unwrap();
            let d = run_sequential(&none_cfg, &none_seq).unwrap();
            prop_assert_eq!(&c.outputs, &d.outputs);
        }

        #[test]
        fn delta_rule_fixed_point(d in 1usize..10, dv in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = StateMatrix(Matrix::from_fn(dv, d, |_, _| rng.gen_range(-1.0..1.0)));
            let k = normalize(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
            let v: Vec<f64> = (0..dv).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s1 = step_online(&s, &k, &k, &v, TokenGates::plain(1.0)).unwrap();
            let s2 = step_online(&s1, &k, &k, &v, TokenGates::plain(1.0)).unwrap();
            prop_assert!(s2.max_abs_diff(&s1) < 1e-12);
        }
    }
}
