//! Chunkwise parallel forms of every recurrence.
//!
//! Within a chunk with inclusive cumulative decay `Lambda_r`, the state is
//! written `S_r = X_r diag(Lambda_r)`. The rescaled state `X` follows an
//! undecayed delta rule with read key `Lambda_r * k_r` and write key
//! `k_write_r / Lambda_r`, so a single UT transform covers all decay modes.
//! Decay ratios are evaluated as exponentials of log differences.
//!
//! Execution is two-phase: a sequential scan over chunks produces the
//! preconditioner and state boundaries (plus the per-chunk factors), then
//! all within-chunk outputs are computed in parallel.

use rayon::prelude::*;

use crate::error::{mismatch, Error, Result};
use crate::numerics::{gemm, solve_unit_lower_triangular, Matrix, Vector};
use crate::precond::{chunk_precond_scan, DiagGramState, PrecondMode, SquashParams};
use crate::recurrence::{Decay, PrecondKind, RecurrenceConfig, SequenceBatch, Solve, StateMatrix};

/// Environment variable bounding the worker threads of the output phase.
pub const THREADS_ENV: &str = "PRECDELTA_THREADS";

/// Below this cumulative log-decay the split `exp(L_r) exp(-L_t)` kernel
/// could overflow, and the pairwise form is used instead.
const SPLIT_LOG_LIMIT: f64 = -300.0;

/// Chunk layout of a length-`T` sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkPlan {
    pub c: usize,
    pub len: usize,
    pub num_chunks: usize,
    /// `C x C` lower-triangular ones.
    pub causal_mask: Matrix,
    /// `causal_mask` with the diagonal zeroed.
    pub strict_mask: Matrix,
}

impl ChunkPlan {
    pub fn new(len: usize, c: usize) -> Result<Self> {
        if c == 0 {
            return Err(Error::InvalidConfig("chunk size must be at least 1".into()));
        }
        Ok(Self {
            c,
            len,
            num_chunks: len.div_ceil(c),
            causal_mask: Matrix::from_fn(c, c, |i, j| if i >= j { 1.0 } else { 0.0 }),
            strict_mask: Matrix::from_fn(c, c, |i, j| if i > j { 1.0 } else { 0.0 }),
        })
    }

    /// Token range of chunk `i`; the last one may be shorter than `c`.
    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        let start = i * self.c;
        start..(start + self.c).min(self.len)
    }
}

/// Cumulative within-chunk log-decays.
#[derive(Clone, Debug, PartialEq)]
pub enum DecayPlan {
    None,
    /// `L_r = sum_{s <= r} log alpha_s`.
    Scalar(Vector),
    /// Same, per key coordinate (`C x d_k`).
    Diagonal(Matrix),
}

impl DecayPlan {
    /// Plan for tokens `range` of the given gates.
    pub fn from_decay(decay: &Decay, range: std::ops::Range<usize>) -> Result<Self> {
        let check = |a: f64| -> Result<f64> {
            if a > 0.0 && a <= 1.0 {
                Ok(a.ln())
            } else {
                Err(Error::InvalidInput(format!("decay {a} outside (0, 1]")))
            }
        };
        Ok(match decay {
            Decay::None => DecayPlan::None,
            Decay::Scalar(a) => {
                let mut acc = 0.0;
                let mut out = Vec::with_capacity(range.len());
                for &x in &a[range] {
                    acc += check(x)?;
                    out.push(acc);
                }
                DecayPlan::Scalar(out)
            }
            Decay::Diagonal(a) => {
                let d = a.cols();
                let mut out = Matrix::zeros(range.len(), d);
                let mut acc = vec![0.0; d];
                for (r, t) in range.enumerate() {
                    for (j, x) in a.row(t).iter().enumerate() {
                        acc[j] += check(*x)?;
                    }
                    out.row_mut(r).copy_from_slice(&acc);
                }
                DecayPlan::Diagonal(out)
            }
        })
    }

    /// Cumulative log-decay of token `r` at key coordinate `j`.
    #[inline]
    pub fn log_at(&self, r: usize, j: usize) -> f64 {
        match self {
            DecayPlan::None => 0.0,
            DecayPlan::Scalar(l) => l[r],
            DecayPlan::Diagonal(l) => l[(r, j)],
        }
    }

    /// Scalar ratio matrix `Gamma_ab = gamma_a / gamma_b` for `a >= b`, else 0.
    pub fn ratio_matrix(&self, c: usize) -> Result<Matrix> {
        match self {
            DecayPlan::None => Ok(Matrix::from_fn(c, c, |a, b| if a >= b { 1.0 } else { 0.0 })),
            DecayPlan::Scalar(l) => Ok(Matrix::from_fn(c, c, |a, b| if a >= b { (l[a] - l[b]).exp() } else { 0.0 })),
            DecayPlan::Diagonal(_) => Err(Error::Unsupported(
                "a single ratio matrix exists only for scalar decay".into(),
            )),
        }
    }

    /// Decay across the whole chunk (`exp(L_last)`), per key coordinate.
    pub fn chunk_decay(&self, c: usize, d: usize) -> Vector {
        if c == 0 {
            return vec![1.0; d];
        }
        (0..d).map(|j| self.log_at(c - 1, j).exp()).collect()
    }

    /// Rows scaled by `exp(L_r)` (decay from the chunk start).
    pub fn from_start(&self, m: &Matrix) -> Matrix {
        self.scale_rows(m, |r, j| self.log_at(r, j))
    }

    /// Rows scaled by `exp(L_last - L_r)` (decay to the chunk end).
    pub fn to_end(&self, m: &Matrix) -> Matrix {
        let c = m.rows();
        if c == 0 {
            return m.clone();
        }
        self.scale_rows(m, |r, j| self.log_at(c - 1, j) - self.log_at(r, j))
    }

    fn scale_rows(&self, m: &Matrix, log: impl Fn(usize, usize) -> f64) -> Matrix {
        match self {
            DecayPlan::None => m.clone(),
            DecayPlan::Scalar(_) => {
                let mut out = m.clone();
                for r in 0..m.rows() {
                    let s = log(r, 0).exp();
                    out.row_mut(r).iter_mut().for_each(|x| *x *= s);
                }
                out
            }
            DecayPlan::Diagonal(_) => Matrix::from_fn(m.rows(), m.cols(), |r, j| m[(r, j)] * log(r, j).exp()),
        }
    }

    fn min_log(&self) -> f64 {
        match self {
            DecayPlan::None => 0.0,
            DecayPlan::Scalar(l) => l.iter().copied().fold(0.0, f64::min),
            DecayPlan::Diagonal(l) => l.data().iter().copied().fold(0.0, f64::min),
        }
    }

    /// Masked decayed kernel
    /// `D_rt = sum_j x_rj y_tj exp(L_rj - L_tj)` for `r > t` (`strict`) or
    /// `r >= t`, zero elsewhere.
    pub fn kernel(&self, x: &Matrix, y: &Matrix, strict: bool) -> Matrix {
        let c = x.rows();
        let keep = |r: usize, t: usize| if strict { r > t } else { r >= t };
        let mut out = Matrix::zeros(c, y.rows());
        match self {
            DecayPlan::None | DecayPlan::Scalar(_) => {
                gemm(1.0, x, false, y, true, 0.0, &mut out);
                for r in 0..c {
                    for t in 0..y.rows() {
                        out[(r, t)] = if keep(r, t) {
                            out[(r, t)] * (self.log_at(r, 0) - self.log_at(t, 0)).exp()
                        } else {
                            0.0
                        };
                    }
                }
            }
            DecayPlan::Diagonal(l) if self.min_log() >= SPLIT_LOG_LIMIT => {
                let xs = Matrix::from_fn(c, x.cols(), |r, j| x[(r, j)] * l[(r, j)].exp());
                let ys = Matrix::from_fn(y.rows(), y.cols(), |t, j| y[(t, j)] * (-l[(t, j)]).exp());
                gemm(1.0, &xs, false, &ys, true, 0.0, &mut out);
                for r in 0..c {
                    for t in 0..y.rows() {
                        if !keep(r, t) {
                            out[(r, t)] = 0.0;
                        }
                    }
                }
            }
            DecayPlan::Diagonal(l) => {
                for r in 0..c {
                    for t in 0..y.rows() {
                        if keep(r, t) {
                            out[(r, t)] = (0..x.cols())
                                .map(|j| x[(r, j)] * y[(t, j)] * (l[(r, j)] - l[(t, j)]).exp())
                                .sum();
                        }
                    }
                }
            }
        }
        out
    }
}

/// UT-transform factors of one chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct UTFactors {
    /// `(I + tril(diag(beta) K K_write^T, -1))^{-1} diag(beta)`.
    pub t: Matrix,
    pub w: Matrix,
    pub u: Matrix,
}

fn check_rows(context: &'static str, c: usize, m: &Matrix, cols: Option<usize>) -> Result<()> {
    if m.rows() != c {
        return Err(mismatch(context, format!("{c} rows"), m.rows()));
    }
    if let Some(cols) = cols {
        if m.cols() != cols {
            return Err(mismatch(context, format!("{cols} columns"), m.cols()));
        }
    }
    Ok(())
}

fn check_decay(decay: &DecayPlan, c: usize, d: usize) -> Result<()> {
    match decay {
        DecayPlan::None => Ok(()),
        DecayPlan::Scalar(l) if l.len() == c => Ok(()),
        DecayPlan::Diagonal(l) if l.shape() == (c, d) => Ok(()),
        DecayPlan::Scalar(l) => Err(mismatch("decay plan", c, l.len())),
        DecayPlan::Diagonal(l) => Err(mismatch("decay plan", format!("({c}, {d})"), format!("{:?}", l.shape()))),
    }
}

/// Unit lower-triangular system matrix `I + tril(diag(beta) D(K, K_write), -1)`.
fn ut_system(k: &Matrix, k_write: &Matrix, beta: &[f64], decay: &DecayPlan) -> Matrix {
    let mut l = decay.kernel(k, k_write, true);
    for (r, b) in beta.iter().enumerate() {
        l.row_mut(r).iter_mut().for_each(|x| *x *= b);
        l[(r, r)] = 1.0;
    }
    l
}

fn diag_beta(beta: &[f64], m: &Matrix) -> Matrix {
    let mut out = m.clone();
    out.scale_rows(beta);
    out
}

/// UT factors for read keys `k`, write keys `k_write`, values `v` and gains
/// `beta`, with `W = T (Lambda * K)` under decay.
pub fn ut_factors(k: &Matrix, k_write: &Matrix, v: &Matrix, beta: &[f64], decay: &DecayPlan) -> Result<UTFactors> {
    let c = k.rows();
    let d = k.cols();
    check_rows("ut_factors (write keys)", c, k_write, Some(d))?;
    check_rows("ut_factors (values)", c, v, None)?;
    if beta.len() != c {
        return Err(mismatch("ut_factors (gains)", c, beta.len()));
    }
    check_decay(decay, c, d)?;
    let l = ut_system(k, k_write, beta, decay);
    let t = solve_unit_lower_triangular(&l, &Matrix::diag(beta))?;
    let w = t.matmul(&decay.from_start(k));
    let u = t.matmul(v);
    Ok(UTFactors { t, w, u })
}

/// Within-chunk quantities that depend on the incoming state only through
/// `s0`.
struct ChunkCore {
    /// Rows `e_r` of the rescaled state increments.
    e: Matrix,
}

fn online_core(
    k: &Matrix,
    k_write: &Matrix,
    v: &Matrix,
    beta: &[f64],
    decay: &DecayPlan,
    s0: &Matrix,
) -> Result<ChunkCore> {
    let kd = decay.from_start(k);
    let l = ut_system(k, k_write, beta, decay);
    // rhs = diag(beta) (V - (Lambda K) S0^T); solving gives U - W S0^T directly
    let mut rhs = v.clone();
    gemm(-1.0, &kd, false, s0, true, 1.0, &mut rhs);
    rhs.scale_rows(beta);
    let e = solve_unit_lower_triangular(&l, &rhs)?;
    Ok(ChunkCore { e })
}

fn chunk_outputs(q: &Matrix, k_write: &Matrix, decay: &DecayPlan, s0: &Matrix, core: &ChunkCore) -> Matrix {
    let qd = decay.from_start(q);
    let mut o = Matrix::zeros(q.rows(), s0.rows());
    gemm(1.0, &qd, false, s0, true, 0.0, &mut o);
    let a = decay.kernel(q, k_write, false);
    gemm(1.0, &a, false, &core.e, false, 1.0, &mut o);
    o
}

fn chunk_boundary(k_write: &Matrix, decay: &DecayPlan, s0: &Matrix, core: &ChunkCore) -> Matrix {
    let c = k_write.rows();
    let mut s = s0.clone();
    s.scale_cols(&decay.chunk_decay(c, s0.cols()));
    gemm(1.0, &core.e, true, &decay.to_end(k_write), false, 1.0, &mut s);
    s
}

/// One online chunk: returns the chunk outputs and the next boundary state.
#[allow(clippy::too_many_arguments)]
pub fn chunk_forward_online(
    q: &Matrix,
    k: &Matrix,
    k_write: &Matrix,
    v: &Matrix,
    beta: &[f64],
    decay: &DecayPlan,
    boundary: &StateMatrix,
) -> Result<(Matrix, StateMatrix)> {
    let c = k.rows();
    let d = boundary.cols();
    check_rows("chunk_forward_online (queries)", c, q, Some(d))?;
    check_rows("chunk_forward_online (keys)", c, k, Some(d))?;
    check_rows("chunk_forward_online (write keys)", c, k_write, Some(d))?;
    check_rows("chunk_forward_online (values)", c, v, Some(boundary.rows()))?;
    if beta.len() != c {
        return Err(mismatch("chunk_forward_online (gains)", c, beta.len()));
    }
    check_decay(decay, c, d)?;
    let core = online_core(k, k_write, v, beta, decay, boundary)?;
    let o = chunk_outputs(q, k_write, decay, boundary, &core);
    let s = chunk_boundary(k_write, decay, boundary, &core);
    Ok((o, StateMatrix(s)))
}

/// One offline chunk. `q` holds the (already transformed) readout queries.
pub fn chunk_forward_offline(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    beta: &[f64],
    decay: &DecayPlan,
    boundary: &StateMatrix,
) -> Result<(Matrix, StateMatrix)> {
    let c = k.rows();
    let d = boundary.cols();
    check_rows("chunk_forward_offline (queries)", c, q, Some(d))?;
    check_rows("chunk_forward_offline (keys)", c, k, Some(d))?;
    check_rows("chunk_forward_offline (values)", c, v, Some(boundary.rows()))?;
    if beta.len() != c {
        return Err(mismatch("chunk_forward_offline (gains)", c, beta.len()));
    }
    check_decay(decay, c, d)?;
    let core = ChunkCore { e: diag_beta(beta, v) };
    let o = chunk_outputs(q, k, decay, boundary, &core);
    let s = chunk_boundary(k, decay, boundary, &core);
    Ok((o, StateMatrix(s)))
}

/// Result of a chunkwise run.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkwiseRun {
    pub outputs: Matrix,
    pub final_state: StateMatrix,
}

/// Outputs of the chunkwise form with chunk size `c`.
pub fn full_chunkwise_run(cfg: &RecurrenceConfig, seq: &SequenceBatch, c: usize) -> Result<Matrix> {
    Ok(chunkwise_run(cfg, seq, c, &StateMatrix::zeros(cfg.d_v, cfg.d_k))?.outputs)
}

struct PreparedChunk {
    q: Matrix,
    k_write: Matrix,
    decay: DecayPlan,
    s0: Matrix,
    core: ChunkCore,
}

/// Chunkwise run from an initial state.
pub fn chunkwise_run(cfg: &RecurrenceConfig, seq: &SequenceBatch, c: usize, s0: &StateMatrix) -> Result<ChunkwiseRun> {
    cfg.validate()?;
    if cfg.precond == PrecondKind::Exact {
        return Err(Error::Unsupported(
            "the exact inverse-Gram preconditioner has no chunk-local affine form; use run_sequential".into(),
        ));
    }
    seq.validate(cfg)?;
    if s0.shape() != (cfg.d_v, cfg.d_k) {
        return Err(mismatch(
            "initial state",
            format!("({}, {})", cfg.d_v, cfg.d_k),
            format!("{:?}", s0.shape()),
        ));
    }
    let plan = ChunkPlan::new(seq.len(), c)?;
    let mode = match (cfg.precond, cfg.solve) {
        (PrecondKind::None, _) | (PrecondKind::Exact, _) => None,
        (PrecondKind::DiagRaw, Solve::Online) => Some(PrecondMode::AtkUnstable),
        (PrecondKind::DiagRaw, Solve::Offline) => Some(PrecondMode::Atq),
        (PrecondKind::DiagStable, Solve::Online) => Some(PrecondMode::AtkStable),
        (PrecondKind::DiagStable, Solve::Offline) => Some(PrecondMode::AtqStable),
    };
    let params = SquashParams::from_raw(seq.mu_raw, cfg.x.max(1.0))?;

    // Phase 1: sequential boundary scan.
    let mut gram = DiagGramState::zeros(cfg.d_k);
    let mut state = s0.0.clone();
    let mut chunks = Vec::with_capacity(plan.num_chunks);
    for i in 0..plan.num_chunks {
        let range = plan.range(i);
        let q = seq.q.slice_rows(range.start, range.end);
        let k = seq.k.slice_rows(range.start, range.end);
        let v = seq.v.slice_rows(range.start, range.end);
        let beta = &seq.beta[range.clone()];
        let decay = DecayPlan::from_decay(&seq.alpha, range.clone())?;

        let (q, k_write) = match mode {
            None => (q, k.clone()),
            Some(m) => {
                let targets = match m {
                    PrecondMode::Atq | PrecondMode::AtqStable => Some(&q),
                    _ => None,
                };
                let (out, next) = chunk_precond_scan(
                    &k,
                    targets,
                    &gram,
                    &seq.alpha_p[range.clone()],
                    &seq.beta_p[range.clone()],
                    m,
                    params,
                    cfg.lambda,
                )?;
                gram = next;
                match cfg.solve {
                    Solve::Online => (q, out),
                    Solve::Offline => (out, k.clone()),
                }
            }
        };

        let core = match cfg.solve {
            Solve::Online => online_core(&k, &k_write, &v, beta, &decay, &state)?,
            Solve::Offline => ChunkCore { e: diag_beta(beta, &v) },
        };
        let next = chunk_boundary(&k_write, &decay, &state, &core);
        chunks.push(PreparedChunk {
            q,
            k_write,
            decay,
            s0: std::mem::replace(&mut state, next),
            core,
        });
    }
    if !state.is_finite() {
        return Err(Error::NonFinite("chunkwise final state".into()));
    }

    // Phase 2: independent within-chunk outputs.
    let compute = || -> Vec<Matrix> {
        chunks
            .par_iter()
            .map(|ch| chunk_outputs(&ch.q, &ch.k_write, &ch.decay, &ch.s0, &ch.core))
            .collect()
    };
    let blocks = match thread_override() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("{THREADS_ENV}: {e}")))?
            .install(compute),
        None => compute(),
    };
    let mut outputs = Matrix::zeros(seq.len(), cfg.d_v);
    for (i, block) in blocks.iter().enumerate() {
        outputs.set_rows(plan.range(i).start, block);
    }
    Ok(ChunkwiseRun {
        outputs,
        final_state: StateMatrix(state),
    })
}

fn thread_override() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.parse().ok().filter(|n| *n > 0)
}
