//! Preconditioner state machines.
//!
//! Three families live here:
//!
//! * the exact inverse key Gram `P_t = (sum k k^T + lambda I)^{-1}`, kept
//!   current with Sherman-Morrison rank-one updates;
//! * the raw diagonal Gram `A_t = alpha^P A_{t-1} + beta^P (k * k)`, inverted
//!   elementwise with a ridge;
//! * the squashed diagonal preconditioner `B_t`, which maps `log(A_t) - mu`
//!   through `r / (1 + |r|)` into `[1/x, x]`.
//!
//! The diagonal forms also have a chunkwise scan that produces every
//! within-chunk state from the chunk boundary with masked matrix products.

use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::numerics::{dot, Matrix, Vector};

/// Floor applied to `A` before taking its logarithm in the squash.
pub const LOG_FLOOR: f64 = 1e-12;

/// Default squash bound.
pub const DEFAULT_X: f64 = 1.5;

/// Default ridge added inside the raw diagonal inverses.
pub const DEFAULT_DIAG_RIDGE: f64 = 1e-4;

/// Inverse of the ridge-regularized key Gram.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactGramState {
    pub p: Matrix,
}

impl ExactGramState {
    /// `P_0 = (lambda I)^{-1}`.
    pub fn new(dim: usize, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "exact preconditioning needs lambda > 0, got {lambda}"
            )));
        }
        let mut p = Matrix::identity(dim);
        p.scale(1.0 / lambda);
        Ok(Self { p })
    }

    pub fn dim(&self) -> usize {
        self.p.rows()
    }

    /// Sherman-Morrison step with key `k`. Returns the normalized write key
    /// `P_{t-1} k / (1 + k^T P_{t-1} k)`, computed before the update.
    pub fn update(&mut self, k: &[f64]) -> Result<Vector> {
        if k.len() != self.dim() {
            return Err(mismatch("ExactGramState::update", self.dim(), k.len()));
        }
        let u = self.p.matvec(k);
        let denom = 1.0 + dot(k, &u);
        if !denom.is_finite() || denom <= 0.0 {
            return Err(Error::NonFinite(format!(
                "Sherman-Morrison denominator {denom}; lambda too small?"
            )));
        }
        let k_write: Vector = u.iter().map(|x| x / denom).collect();
        self.p.rank1_update(-1.0 / denom, &u, &u);
        self.p.check_finite("inverse Gram")?;
        Ok(k_write)
    }

    /// `P_t q`, the query-side transform.
    pub fn transform_query(&self, q: &[f64]) -> Vector {
        self.p.matvec(q)
    }
}

/// Functional form of [`ExactGramState::update`].
pub fn exact_update_and_write_key(
    state: &ExactGramState,
    k: &[f64],
) -> Result<(ExactGramState, Vector)> {
    let mut next = state.clone();
    let kw = next.update(k)?;
    Ok((next, kw))
}

/// Coordinate-wise second moments of the keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGramState {
    pub a: Vector,
}

impl DiagGramState {
    pub fn zeros(dim: usize) -> Self {
        Self { a: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn update(&mut self, k: &[f64], alpha_p: f64, beta_p: f64) -> Result<()> {
        if k.len() != self.a.len() {
            return Err(mismatch("DiagGramState::update", self.a.len(), k.len()));
        }
        for (a, ki) in self.a.iter_mut().zip(k) {
            *a = alpha_p * *a + beta_p * ki * ki;
        }
        Ok(())
    }
}

/// `A' = alpha_p * A + beta_p * (k * k)`.
pub fn diag_update(state: &DiagGramState, k: &[f64], alpha_p: f64, beta_p: f64) -> Result<DiagGramState> {
    let mut next = state.clone();
    next.update(k, alpha_p, beta_p)?;
    Ok(next)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SquashParams {
    /// Center subtracted from `log(A)`.
    pub mu: f64,
    /// Output bound: `B` lies in `[1/x, x]`.
    pub x: f64,
}

impl SquashParams {
    pub fn new(mu: f64, x: f64) -> Result<Self> {
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::InvalidConfig(format!("squash center mu must be > 0, got {mu}")));
        }
        if !(x >= 1.0) || !x.is_finite() {
            return Err(Error::InvalidConfig(format!("squash bound x must be >= 1, got {x}")));
        }
        Ok(Self { mu, x })
    }

    /// `mu = exp(mu_raw)`.
    pub fn from_raw(mu_raw: f64, x: f64) -> Result<Self> {
        Self::new(mu_raw.exp(), x)
    }
}

/// Intermediates of one squash evaluation, kept for the backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SquashTrace {
    pub r: Vector,
    pub s: Vector,
    pub b: Vector,
}

/// `r = log(max(A, floor)) - mu`, `s = r / (1 + |r|)`, `B = exp(-log(x) s)`.
pub fn squash_traced(a: &[f64], params: SquashParams) -> SquashTrace {
    let log_x = params.x.ln();
    let mut out = SquashTrace {
        r: Vec::with_capacity(a.len()),
        s: Vec::with_capacity(a.len()),
        b: Vec::with_capacity(a.len()),
    };
    for ai in a {
        let r = ai.max(LOG_FLOOR).ln() - params.mu;
        let s = r / (1.0 + r.abs());
        out.r.push(r);
        out.s.push(s);
        out.b.push((-log_x * s).exp());
    }
    out
}

/// Squash of strictly positive accumulators.
pub fn squash(a: &[f64], params: SquashParams) -> Result<Vector> {
    if let Some(v) = a.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::NonPositive(format!("squash input {v}")));
    }
    Ok(squash_traced(a, params).b)
}

/// `q / (A + ridge)`, elementwise.
pub fn atq_transform(a: &[f64], q: &[f64], ridge: f64) -> Vector {
    a.iter().zip(q).map(|(ai, qi)| qi / (ai + ridge)).collect()
}

/// Diagonal Sherman-Morrison write key from the previous accumulator:
/// `(k / (A_prev + ridge)) / (1 + sum k^2 / (A_prev + ridge))`.
pub fn atk_unstable_write_key(a_prev: &[f64], k: &[f64], ridge: f64) -> Vector {
    let y: Vector = a_prev.iter().zip(k).map(|(a, ki)| ki / (a + ridge)).collect();
    let n = 1.0 + dot(&y, k);
    y.into_iter().map(|v| v / n).collect()
}

/// Which side the diagonal preconditioner is applied to, and in which form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecondMode {
    /// `q / (A_t + ridge)`, inclusive mask.
    Atq,
    /// `B(A_t) * q`, inclusive mask.
    AtqStable,
    /// Normalized `k / (A_{t-1} + ridge)`, strict (shifted) mask.
    AtkUnstable,
    /// `B(A_t) * k`, inclusive mask.
    AtkStable,
}

/// Within-chunk diagonal states from the chunk boundary.
///
/// With `shifted == false` row `j` is `A` after token `j` of the chunk; with
/// `shifted == true` it is the state before token `j` (row 0 is the boundary).
pub fn chunk_diag_states(
    keys: &Matrix,
    boundary: &DiagGramState,
    alpha_p: &[f64],
    beta_p: &[f64],
    shifted: bool,
) -> Result<Matrix> {
    let c = keys.rows();
    let d = keys.cols();
    if boundary.dim() != d {
        return Err(mismatch("chunk_diag_states (boundary)", d, boundary.dim()));
    }
    if alpha_p.len() < c || beta_p.len() < c {
        return Err(Error::InvalidInput(format!(
            "chunk of {c} tokens but only {} / {} preconditioner gates",
            alpha_p.len(),
            beta_p.len()
        )));
    }

    // Inclusive cumulative log-decay; ratios are differences of these.
    let mut cum = Vec::with_capacity(c);
    let mut acc = 0.0;
    for a in &alpha_p[..c] {
        if !(*a > 0.0) {
            return Err(Error::NonPositive(format!("preconditioner decay {a}")));
        }
        acc += a.ln();
        cum.push(acc);
    }

    // Row j reads the state after token `end(j)`; for the shifted variant this
    // is token j - 1 (none for j == 0).
    let end = |j: usize| -> Option<usize> {
        if shifted {
            j.checked_sub(1)
        } else {
            Some(j)
        }
    };

    let mut mask = Matrix::zeros(c, c);
    let mut lead = vec![1.0; c];
    for j in 0..c {
        if let Some(e) = end(j) {
            lead[j] = cum[e].exp();
            for m in 0..=e {
                mask[(j, m)] = (cum[e] - cum[m]).exp() * beta_p[m];
            }
        }
    }
    let k2 = keys.map(|x| x * x);
    let mut states = mask.matmul(&k2);
    for j in 0..c {
        let row = states.row_mut(j);
        for (s, a0) in row.iter_mut().zip(&boundary.a) {
            *s += lead[j] * a0;
        }
    }
    Ok(states)
}

/// Chunkwise form of the diagonal preconditioners.
///
/// `targets` are the rows to transform: the queries for the ATQ modes and
/// the keys (the default) for the ATK modes. Returns the transformed rows and
/// the end-of-chunk accumulator.
#[allow(clippy::too_many_arguments)]
pub fn chunk_precond_scan(
    keys: &Matrix,
    targets: Option<&Matrix>,
    boundary: &DiagGramState,
    alpha_p: &[f64],
    beta_p: &[f64],
    mode: PrecondMode,
    params: SquashParams,
    ridge: f64,
) -> Result<(Matrix, DiagGramState)> {
    let targets = targets.unwrap_or(keys);
    if targets.shape() != keys.shape() {
        return Err(mismatch(
            "chunk_precond_scan (targets)",
            format!("{:?}", keys.shape()),
            format!("{:?}", targets.shape()),
        ));
    }
    let c = keys.rows();
    let inclusive = chunk_diag_states(keys, boundary, alpha_p, beta_p, false)?;
    let next = if c == 0 {
        boundary.clone()
    } else {
        DiagGramState {
            a: inclusive.row(c - 1).to_vec(),
        }
    };

    let mut out = Matrix::zeros(c, keys.cols());
    match mode {
        PrecondMode::Atq => {
            for j in 0..c {
                out.row_mut(j)
                    .copy_from_slice(&atq_transform(inclusive.row(j), targets.row(j), ridge));
            }
        }
        PrecondMode::AtqStable | PrecondMode::AtkStable => {
            for j in 0..c {
                let b = squash_traced(inclusive.row(j), params).b;
                for ((o, bi), t) in out.row_mut(j).iter_mut().zip(&b).zip(targets.row(j)) {
                    *o = bi * t;
                }
            }
        }
        PrecondMode::AtkUnstable => {
            let pre = chunk_diag_states(keys, boundary, alpha_p, beta_p, true)?;
            for j in 0..c {
                out.row_mut(j)
                    .copy_from_slice(&atk_unstable_write_key(pre.row(j), targets.row(j), ridge));
            }
        }
    }
    Ok((out, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dense;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn first_exact_step() {
        let mut st = ExactGramState::new(2, 1.0).unwrap();
        let kw = st.update(&[1.0, 0.0]).unwrap();
        assert_eq!(kw, vec![0.5, 0.0]);
        assert_eq!(st.p, Matrix::from_rows(&[[0.5, 0.0], [0.0, 1.0]]));
    }

    #[test]
    fn zero_key_leaves_exact_state() {
        let st = ExactGramState::new(3, 0.5).unwrap();
        let (next, kw) = exact_update_and_write_key(&st, &[0.0; 3]).unwrap();
        assert_eq!(kw, vec![0.0; 3]);
        assert_eq!(next, st);
    }

    #[test]
    fn exact_rejects_zero_ridge() {
        assert!(ExactGramState::new(3, 0.0).is_err());
    }

    #[test]
    fn exact_state_tracks_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(d, t, lambda) in &[(4usize, 40usize, 1.0f64), (8, 64, 0.1), (32, 256, 10.0), (32, 256, 0.1)] {
            let mut st = ExactGramState::new(d, lambda).unwrap();
            let mut gram = Matrix::identity(d);
            gram.scale(lambda);
            for step in 0..t {
                let k: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let (kw_expected_p, _) = (st.p.clone(), ());
                let kw = st.update(&k).unwrap();
                gram.rank1_update(1.0, &k, &k);
                // P_t G_t == I
                let id = st.p.matmul(&gram);
                assert!(
                    id.max_abs_diff(&Matrix::identity(d)) < 1e-9,
                    "d={d} step={step}"
                );
                if step < 8 {
                    let inv = dense::inverse(&gram).unwrap();
                    assert!(st.p.max_abs_diff(&inv) < 1e-10);
                    // the write key also equals P_t k
                    let pk = st.p.matvec(&k);
                    assert!(crate::numerics::max_abs_diff(&pk, &kw) < 1e-10);
                    let u = kw_expected_p.matvec(&k);
                    let den = 1.0 + dot(&k, &u);
                    assert!((kw[0] - u[0] / den).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn diag_update_examples() {
        let a = diag_update(&DiagGramState::zeros(2), &[1.0, 2.0], 1.0, 1.0).unwrap();
        assert_eq!(a.a, vec![1.0, 4.0]);
        let b = diag_update(&a, &[3.0, 3.0], 0.5, 0.0).unwrap();
        assert_eq!(b.a, vec![0.5, 2.0]);
        assert!(diag_update(&a, &[1.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn squash_examples() {
        let p = SquashParams::new(1.0, 1.5).unwrap();
        let b = squash(&[1.0f64.exp()], p).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-15);
        let big = squash(&[1e300], p).unwrap()[0];
        let small = squash(&[1e-300], p).unwrap()[0];
        assert!(big > 1.0 / 1.5 && big < 1.0 / 1.5 + 1e-2);
        // clamped to the log floor, so saturation is only partial
        let floor = squash(&[LOG_FLOOR], p).unwrap()[0];
        assert_eq!(small, floor);
        assert!(small < 1.5 && small > 1.45);
        let flat = squash(&[1e-3, 1.0, 1e3], SquashParams::new(2.0, 1.0).unwrap()).unwrap();
        assert_eq!(flat, vec![1.0; 3]);
        assert!(squash(&[0.0], p).is_err());
        assert!(SquashParams::new(0.0, 1.5).is_err());
        assert!(SquashParams::new(1.0, 0.5).is_err());
    }

    #[test]
    fn chunk_of_one_matches_single_token() {
        let params = SquashParams::new(1.0, 1.5).unwrap();
        let boundary = DiagGramState { a: vec![0.3, 2.0, 0.0] };
        let k = Matrix::from_rows(&[[0.5, -1.0, 0.25]]);
        let q = Matrix::from_rows(&[[1.0, 2.0, -3.0]]);
        let (ap, bp) = ([0.9], [0.7]);
        let after = diag_update(&boundary, k.row(0), ap[0], bp[0]).unwrap();

        let (t, next) =
            chunk_precond_scan(&k, Some(&q), &boundary, &ap, &bp, PrecondMode::Atq, params, 1e-4).unwrap();
        assert_eq!(next, after);
        assert!(crate::numerics::max_abs_diff(t.row(0), &atq_transform(&after.a, q.row(0), 1e-4)) < 1e-15);

        let (t, _) =
            chunk_precond_scan(&k, None, &boundary, &ap, &bp, PrecondMode::AtkUnstable, params, 1e-4).unwrap();
        let want = atk_unstable_write_key(&boundary.a, k.row(0), 1e-4);
        assert!(crate::numerics::max_abs_diff(t.row(0), &want) < 1e-15);

        let (t, _) =
            chunk_precond_scan(&k, None, &boundary, &ap, &bp, PrecondMode::AtkStable, params, 1e-4).unwrap();
        let b = squash_traced(&after.a, params).b;
        for i in 0..3 {
            assert!((t[(0, i)] - b[i] * k[(0, i)]).abs() < 1e-15);
        }
    }

    #[test]
    fn stable_scan_with_unit_bound_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = rand_matrix(&mut rng, 7, 5);
        let ap: Vec<f64> = (0..7).map(|_| rng.gen_range(0.5..1.0)).collect();
        let bp: Vec<f64> = (0..7).map(|_| rng.gen_range(0.0..1.0)).collect();
        let params = SquashParams::new(1.3, 1.0).unwrap();
        let (t, _) = chunk_precond_scan(
            &k,
            None,
            &DiagGramState::zeros(5),
            &ap,
            &bp,
            PrecondMode::AtkStable,
            params,
            0.0,
        )
        .unwrap();
        assert_eq!(t, k);
    }

    #[test]
    fn short_gates_rejected() {
        let k = Matrix::zeros(4, 2);
        let err = chunk_precond_scan(
            &k,
            None,
            &DiagGramState::zeros(2),
            &[1.0; 3],
            &[1.0; 4],
            PrecondMode::Atq,
            SquashParams::new(1.0, 1.5).unwrap(),
            1e-4,
        );
        assert!(err.is_err());
    }

    /// Per-token loop: the oracle for the chunk scan.
    fn sequential_transform(
        keys: &Matrix,
        targets: &Matrix,
        boundary: &DiagGramState,
        ap: &[f64],
        bp: &[f64],
        mode: PrecondMode,
        params: SquashParams,
        ridge: f64,
    ) -> (Matrix, DiagGramState) {
        let mut st = boundary.clone();
        let mut out = Matrix::zeros(keys.rows(), keys.cols());
        for j in 0..keys.rows() {
            let prev = st.clone();
            st.update(keys.row(j), ap[j], bp[j]).unwrap();
            let row = match mode {
                PrecondMode::Atq => atq_transform(&st.a, targets.row(j), ridge),
                PrecondMode::AtkUnstable => atk_unstable_write_key(&prev.a, targets.row(j), ridge),
                PrecondMode::AtqStable | PrecondMode::AtkStable => squash_traced(&st.a, params)
                    .b
                    .iter()
                    .zip(targets.row(j))
                    .map(|(b, t)| b * t)
                    .collect(),
            };
            out.row_mut(j).copy_from_slice(&row);
        }
        (out, st)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn scan_matches_token_loop_and_is_split_invariant(
            c in 1usize..24,
            d in 1usize..6,
            split in 0usize..24,
            mode_ix in 0usize..4,
            seed in any::<u64>(),
        ) {
            let mode = [PrecondMode::Atq, PrecondMode::AtqStable, PrecondMode::AtkUnstable, PrecondMode::AtkStable][mode_ix];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rand_matrix(&mut rng, c, d);
            let q = rand_matrix(&mut rng, c, d);
            let ap: Vec<f64> = (0..c).map(|_| rng.gen_range(0.3..1.0)).collect();
            let bp: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..1.0)).collect();
            let boundary = DiagGramState { a: (0..d).map(|_| rng.gen_range(0.0..2.0)).collect() };
            let params = SquashParams::new(rng.gen_range(0.2..2.0), 1.5).unwrap();
            let targets = match mode { PrecondMode::Atq | PrecondMode::AtqStable => &q, _ => &k };

            let (want, want_end) = sequential_transform(&k, targets, &boundary, &ap, &bp, mode, params, 1e-2);
            let (got, end) = chunk_precond_scan(&k, Some(targets), &boundary, &ap, &bp, mode, params, 1e-2).unwrap();
            prop_assert!(got.max_abs_diff(&want) < 1e-12);
            prop_assert!(crate::numerics::max_abs_diff(&end.a, &want_end.a) < 1e-12);

            // split the chunk at an arbitrary boundary
            let s = split.min(c);
            let (a1, mid) = chunk_precond_scan(
                &k.slice_rows(0, s), Some(&targets.slice_rows(0, s)), &boundary, &ap[..s], &bp[..s], mode, params, 1e-2).unwrap();
            let (a2, end2) = chunk_precond_scan(
                &k.slice_rows(s, c), Some(&targets.slice_rows(s, c)), &mid, &ap[s..], &bp[s..], mode, params, 1e-2).unwrap();
            let mut joined = Matrix::zeros(c, d);
            joined.set_rows(0, &a1);
            joined.set_rows(s, &a2);
            prop_assert!(joined.max_abs_diff(&got) < 1e-12);
            prop_assert!(crate::numerics::max_abs_diff(&end2.a, &end.a) < 1e-12);
        }

        #[test]
        fn squash_range_and_monotonicity(
            a in proptest::collection::vec(1e-8f64..1e8, 2..16),
            mu in 0.01f64..5.0,
            x in 1.0f64..2.0,
        ) {
            let p = SquashParams::new(mu, x).unwrap();
            let b = squash(&a, p).unwrap();
            for (i, bi) in b.iter().enumerate() {
                prop_assert!(*bi >= 1.0 / x && *bi <= x);
                for (j, bj) in b.iter().enumerate() {
                    if a[i] < a[j] {
                        prop_assert!(bi >= bj);
                    }
                }
            }
        }
    }
}
