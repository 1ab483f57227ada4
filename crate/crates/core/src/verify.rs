//! Named verification suites with deterministic, self-describing reports.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::autograd::gradcheck_grid;
use crate::chunkwise::full_chunkwise_run;
use crate::error::{Error, Result};
use crate::numerics::{outer, Matrix};
use crate::recurrence::{
    run_sequential, step_online, DecayGate, PrecondKind, RecurrenceConfig, SequenceBatch, StateMatrix, TokenGates,
    Variant,
};
use crate::testutil::{random_batch, random_unit_rows};
use crate::theory::{
    check_theorem1, check_theorem1_grid, check_transition_eigs, check_unit_disk, check_write_key_bounds,
    counterexample_d2, longhorn_gain, longhorn_gdn_correspondence, negative_eigenvalue_example, pocp_solution,
    pocp_verify, random_pocp_problem, theorem2_montecarlo, PocpVariant, TheoremReport,
};

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Equivalence,
    Theorem1,
    Theorem2,
    Eigs,
    Pocp,
    Gradcheck,
    Counterexample,
    All,
}

impl Suite {
    pub const EACH: [Suite; 7] = [
        Suite::Equivalence,
        Suite::Theorem1,
        Suite::Theorem2,
        Suite::Eigs,
        Suite::Pocp,
        Suite::Gradcheck,
        Suite::Counterexample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Equivalence => "equivalence",
            Suite::Theorem1 => "theorem1",
            Suite::Theorem2 => "theorem2",
            Suite::Eigs => "eigs",
            Suite::Pocp => "pocp",
            Suite::Gradcheck => "gradcheck",
            Suite::Counterexample => "counterexample",
            Suite::All => "all",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::EACH
            .into_iter()
            .chain([Suite::All])
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown suite '{s}'")))
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Suite parameters. Unset fields take each suite's default grid.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteOptions {
    pub seed: u64,
    pub trials: Option<usize>,
    pub d: Option<usize>,
    pub dv: Option<usize>,
    #[serde(rename = "T")]
    pub t: Option<usize>,
    #[serde(rename = "C")]
    pub c: Option<usize>,
    pub lambda: Option<f64>,
    pub x: Option<f64>,
    pub variant: Option<Variant>,
    pub precond: Option<PrecondKind>,
}

impl SuiteOptions {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("trials", self.trials), ("d", self.d), ("dv", self.dv), ("C", self.c)];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == Some(0)) {
            return Err(Error::InvalidConfig(format!("--{name} must be positive")));
        }
        if self.lambda.is_some_and(|l| !(l > 0.0)) {
            return Err(Error::InvalidConfig("--lambda must be positive".into()));
        }
        if self.x.is_some_and(|x| !(x >= 1.0)) {
            return Err(Error::InvalidConfig("--x must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub samples: usize,
    pub pass: bool,
}

impl From<&TheoremReport> for Check {
    fn from(r: &TheoremReport) -> Self {
        Self {
            name: r.name.clone(),
            max_deviation: r.max_deviation,
            tolerance: r.tolerance,
            samples: r.samples,
            pass: r.pass,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub tool_version: String,
    pub suite: Suite,
    pub config_echo: SuiteOptions,
    /// `sha256("blob <len>\0<config json>")`, hex.
    pub input_hash: String,
    pub pass: bool,
    pub first_failure: Option<String>,
    pub checks: Vec<Check>,
    /// Suite-specific values, e.g. the counterexample states.
    pub extras: Value,
}

impl SuiteReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// `suite,check,max_deviation,tolerance,samples,pass` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["suite", "check", "max_deviation", "tolerance", "samples", "pass"])?;
        for c in &self.checks {
            w.write_record([
                self.suite.name().to_string(),
                c.name.clone(),
                crate::format_f64(c.max_deviation),
                crate::format_f64(c.tolerance),
                c.samples.to_string(),
                c.pass.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Git-style content hash of a JSON-serializable input.
pub fn content_hash<T: Serialize>(value: &T) -> Result<String> {
    let body = serde_json::to_vec(value)?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", body.len()).as_bytes());
    h.update(&body);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Runs `suite` and assembles its report.
pub fn run_suite(suite: Suite, opts: &SuiteOptions) -> Result<SuiteReport> {
    opts.validate()?;
    let mut checks = Vec::new();
    let mut extras = serde_json::Map::new();
    let suites: Vec<Suite> = if suite == Suite::All { Suite::EACH.to_vec() } else { vec![suite] };
    for s in suites {
        let (reports, extra) = run_one(s, opts)?;
        checks.extend(reports.iter().map(|r| {
            let mut c = Check::from(r);
            if suite == Suite::All {
                c.name = format!("{s}/{}", c.name);
            }
            c
        }));
        if !extra.is_null() {
            extras.insert(s.name().to_string(), extra);
        }
    }
    let first_failure = checks.iter().find(|c| !c.pass).map(|c| c.name.clone());
    Ok(SuiteReport {
        tool_version: TOOL_VERSION.to_string(),
        suite,
        config_echo: opts.clone(),
        input_hash: content_hash(&json!({"suite": suite, "options": opts}))?,
        pass: first_failure.is_none(),
        first_failure,
        checks,
        extras: Value::Object(extras),
    })
}

fn run_one(suite: Suite, opts: &SuiteOptions) -> Result<(Vec<TheoremReport>, Value)> {
    match suite {
        Suite::Equivalence => Ok((vec![equivalence(opts)?], Value::Null)),
        Suite::Theorem1 => theorem1(opts).map(|r| (r, Value::Null)),
        Suite::Theorem2 => theorem2(opts),
        Suite::Eigs => eigs(opts).map(|r| (r, Value::Null)),
        Suite::Pocp => pocp(opts).map(|r| (r, Value::Null)),
        Suite::Gradcheck => Ok((vec![gradcheck(opts)?], Value::Null)),
        Suite::Counterexample => counterexample(),
        Suite::All => unreachable!("expanded by run_suite"),
    }
}

/// Chunk sizes `{1, 2, 7, 16, T}` unless one is given.
fn chunk_sizes(t: usize, fixed: Option<usize>) -> Vec<usize> {
    match fixed {
        Some(c) => vec![c],
        None => {
            let mut cs = vec![1, 2, 7, 16, t.max(1)];
            cs.dedup();
            cs
        }
    }
}

/// Chunkwise against sequential outputs: one case per variant and
/// preconditioner, deviation is the largest absolute output difference over
/// all instances and chunk sizes (tolerance 1e-10).
pub fn equivalence(opts: &SuiteOptions) -> Result<TheoremReport> {
    let variants = opts.variant.map_or(Variant::ALL.to_vec(), |v| vec![v]);
    let preconds = match opts.precond {
        Some(PrecondKind::Exact) => {
            return Err(Error::Unsupported("the exact preconditioner has no chunkwise form".into()))
        }
        Some(p) => vec![p],
        None => vec![PrecondKind::None, PrecondKind::DiagRaw, PrecondKind::DiagStable],
    };
    let instances = opts.trials.unwrap_or(200);
    let mut cases = Vec::new();
    for &v in &variants {
        for &p in &preconds {
            cases.push((v, p));
        }
    }
    let devs = cases
        .par_iter()
        .enumerate()
        .map(|(ci, &(variant, precond))| -> Result<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(ci as u64);
            let mut worst: f64 = 0.0;
            for _ in 0..instances {
                let d = opts.d.unwrap_or_else(|| [4, 8, 16][rng.gen_range(0..3)]);
                let dv = opts.dv.unwrap_or_else(|| [4, 8, 16][rng.gen_range(0..3)]);
                let t = opts.t.unwrap_or_else(|| rng.gen_range(1..=128));
                let mut cfg = RecurrenceConfig::for_variant(variant, d, dv).with_precond(precond);
                if let Some(x) = opts.x {
                    cfg = cfg.with_x(x);
                }
                if let Some(l) = opts.lambda {
                    cfg = cfg.with_lambda(l);
                }
                let seq = random_batch(&mut rng, &cfg, t);
                let want = run_sequential(&cfg, &seq)?.outputs;
                for c in chunk_sizes(t, opts.c) {
                    let dev = full_chunkwise_run(&cfg, &seq, c)?.max_abs_diff(&want);
                    worst = if dev.is_nan() { f64::NAN } else { worst.max(dev) };
                }
            }
            Ok(worst)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = TheoremReport::new("chunkwise_equivalence", 1e-10);
    for ((v, p), dev) in cases.iter().zip(devs) {
        report.record(format!("{v}/{p}"), dev);
    }
    Ok(report)
}

/// The ridge least-squares identity, either on the random grid or on one
/// instance when a dimension, length or ridge is given; plus the
/// Sherman-Morrison write-key bounds.
pub fn theorem1(opts: &SuiteOptions) -> Result<Vec<TheoremReport>> {
    let identity = if opts.d.is_some() || opts.t.is_some() || opts.lambda.is_some() {
        let d = opts.d.unwrap_or(8);
        let dv = opts.dv.unwrap_or(d);
        let t = opts.t.unwrap_or(64);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let seq = SequenceBatch::new(
            random_unit_rows(&mut rng, t, d),
            random_unit_rows(&mut rng, t, d),
            Matrix::from_fn(t, dv, |_, _| rng.gen_range(-1.0..1.0)),
        );
        let mut r = check_theorem1(&seq, opts.lambda.unwrap_or(1.0))?;
        r.name = format!("theorem1_d{d}_T{t}");
        r
    } else {
        check_theorem1_grid(opts.trials.unwrap_or(50), opts.seed)?
    };
    Ok(vec![identity, check_write_key_bounds(10_000, opts.seed)?])
}

/// Monte-Carlo readout errors of linear attention and the delta rule
/// (`beta = 1`) for `d` in `{4, 8}` over `t <= 4d`.
pub fn theorem2(opts: &SuiteOptions) -> Result<(Vec<TheoremReport>, Value)> {
    let dims = opts.d.map_or(vec![4, 8], |d| vec![d]);
    let trials = opts.trials.unwrap_or(10_000);
    let mut reports = Vec::new();
    let mut curves = serde_json::Map::new();
    for d in dims {
        let r = theorem2_montecarlo(d, 4 * d, trials, 1.0, opts.seed)?;
        reports.extend(r.reports());
        curves.insert(format!("d{d}"), serde_json::to_value(&r.records)?);
    }
    Ok((reports, Value::Object(curves)))
}

/// Transition spectra: trace and determinant residuals, the unit disk for
/// stable write keys with `beta x <= 2`, and a negative write eigenvalue
/// for `B = x I` with `beta x > 1`.
pub fn eigs(opts: &SuiteOptions) -> Result<Vec<TheoremReport>> {
    let trials = opts.trials.unwrap_or(10_000);
    let mut reports = vec![check_transition_eigs(trials, opts.seed)?];
    let grid = match opts.x {
        Some(x) => vec![((2.0 / x).min(1.0), x)],
        None => vec![(1.0, 2.0), (1.0, 1.5), (0.5, 2.0)],
    };
    for (i, (beta, x)) in grid.into_iter().enumerate() {
        reports.push(check_unit_disk(beta, x, trials, opts.seed.wrapping_add(1 + i as u64))?);
    }
    let e = negative_eigenvalue_example(0.8, 1.0, 1.5, 4)?;
    let mut neg = TheoremReport::new("negative_write_eigenvalue", 1e-10);
    neg.record("lambda_write_below_zero", if e.lambda_write < 0.0 { 0.0 } else { 1.0 + e.lambda_write });
    neg.record("lambda_write_closed_form", (e.lambda_write - 0.8 * (1.0 - 1.5)).abs());
    neg.record("residuals", e.trace_residual.max(e.det_residual));
    reports.push(neg);
    Ok(reports)
}

/// Closed-form POCP minimizers: stationarity and local minimality, the
/// `P = I` reductions, and the P-Longhorn / PGDN correspondence.
pub fn pocp(opts: &SuiteOptions) -> Result<Vec<TheoremReport>> {
    let trials = opts.trials.unwrap_or(100);
    let d = opts.d.unwrap_or(4);
    let dv = opts.dv.unwrap_or(3);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::new();
    for variant in PocpVariant::ALL {
        let mut r = TheoremReport::new(format!("pocp_{}", variant.name()), 1e-7);
        for i in 0..trials {
            let prob = random_pocp_problem(&mut rng, d, dv);
            let case = pocp_verify(variant, &prob, 10, opts.seed.wrapping_add(i as u64))?;
            r.absorb(TheoremReport {
                name: format!("trial{i}"),
                ..case
            });
        }
        reports.push(r);
    }

    let mut red = TheoremReport::new("pocp_identity_reductions", 1e-14);
    for i in 0..trials {
        let mut prob = random_pocp_problem(&mut rng, d, dv);
        prob.p = Matrix::identity(d);
        let s = StateMatrix(prob.state.clone());
        let gates = TokenGates {
            beta: prob.beta,
            decay: DecayGate::Scalar(prob.alpha),
        };
        let gdn = step_online(&s, &prob.k, &prob.k, &prob.v, gates)?;
        red.record(format!("pgdn_is_gdn/{i}"), pocp_solution(PocpVariant::Pgdn, &prob)?.max_abs_diff(&gdn));

        let kk: f64 = prob.k.iter().map(|x| x * x).sum();
        let gain = prob.beta / (1.0 + prob.beta * kk);
        red.record(format!("longhorn_gain/{i}"), (longhorn_gain(prob.beta, &prob.k, &prob.k) - gain).abs());
        let sk = prob.state.matvec(&prob.k);
        let err: Vec<f64> = prob.v.iter().zip(&sk).map(|(v, p)| v - p).collect();
        let longhorn = prob.state.add(&outer(&err, &prob.k).scaled(gain));
        red.record(
            format!("longhorn_step/{i}"),
            pocp_solution(PocpVariant::PLonghorn, &prob)?.max_abs_diff(&longhorn),
        );
        let mamba = prob.state.scaled(prob.alpha).add(&outer(&prob.v, &prob.k));
        red.record(
            format!("mamba2_step/{i}"),
            pocp_solution(PocpVariant::KeyPrecondMamba2, &prob)?.max_abs_diff(&mamba),
        );
    }
    reports.push(red);

    let mut corr = TheoremReport::new("longhorn_gdn_correspondence", 1e-10);
    for i in 0..trials {
        let n = rng.gen_range(0..3 * d);
        let prev = random_unit_rows(&mut rng, n, d);
        let k = random_unit_rows(&mut rng, 1, d).into_data();
        let v: Vec<f64> = (0..dv).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = Matrix::from_fn(dv, d, |_, _| rng.gen_range(-1.0..1.0));
        corr.record(format!("case{i}"), longhorn_gdn_correspondence(&prev, &k, &v, &s, opts.lambda.unwrap_or(0.5))?);
    }
    reports.push(corr);
    Ok(reports)
}

/// The autograd finite-difference grid, reported as its worst relative
/// error; every case passes iff that error is within tolerance.
pub fn gradcheck(opts: &SuiteOptions) -> Result<TheoremReport> {
    let g = gradcheck_grid(opts.seed)?;
    let mut r = TheoremReport::new("gradcheck_grid", g.tolerance);
    r.record(format!("worst_relative_error ({})", g.worst_case), g.worst_error);
    r.samples = g.total;
    Ok(r)
}

/// Offline and online diagonal-preconditioned states on the
/// two-dimensional construction, against `0.5` and `1/3`.
pub fn counterexample() -> Result<(Vec<TheoremReport>, Value)> {
    let c = counterexample_d2()?;
    let dev = |m: &[Vec<f64>], want: f64| m.iter().flatten().map(|x| (x - want).abs()).fold(0.0, f64::max);
    let mut apla = TheoremReport::new("counterexample_apla_half", 0.0);
    apla.record("max_abs_diff", dev(&c.s_apla, 0.5));
    let mut apdn = TheoremReport::new("counterexample_apdn_third", 0.0);
    apdn.record("max_abs_diff", dev(&c.s_apdn, 1.0 / 3.0));
    let mut differ = TheoremReport::new("counterexample_states_differ", 0.0);
    differ.record("differ", if c.differ { 0.0 } else { 1.0 });
    let mut exact = TheoremReport::new("counterexample_exact_agree", 1e-15);
    let agree = c
        .exact_apla
        .iter()
        .flatten()
        .zip(c.exact_apdn.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    exact.record("max_abs_diff", agree);
    Ok((vec![apla, apdn, differ, exact], serde_json::to_value(&c)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::EACH.into_iter().chain([Suite::All]) {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn counterexample_report() {
        let r = run_suite(Suite::Counterexample, &SuiteOptions::default()).unwrap();
        assert!(r.pass, "{r:?}");
        let json = r.to_json().unwrap();
        assert!(json.contains("0.5"));
        assert!(json.contains("0.3333333333333333"));
        assert_eq!(r.input_hash.len(), 64);
    }

    #[test]
    fn hash_tracks_options() {
        let a = run_suite(Suite::Counterexample, &SuiteOptions::with_seed(1)).unwrap();
        let b = run_suite(Suite::Counterexample, &SuiteOptions::with_seed(2)).unwrap();
        assert_ne!(a.input_hash, b.input_hash);
        assert_eq!(a.checks, b.checks);
    }

    #[test]
    fn git_blob_hash() {
        // `printf '"x"' | git hash-object --stdin` with sha256 objects
        let h = content_hash(&"x").unwrap();
        let mut s = Sha256::new();
        s.update(b"blob 3\0\"x\"");
        let want: String = s.finalize().iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(h, want);
    }

    #[test]
    fn small_suites_pass() {
        let opts = SuiteOptions {
            trials: Some(20),
            ..SuiteOptions::with_seed(3)
        };
        for s in [Suite::Equivalence, Suite::Eigs, Suite::Pocp] {
            let r = run_suite(s, &opts).unwrap();
            assert!(r.pass, "{s}: {:?}", r.first_failure);
        }
    }

    #[test]
    fn single_theorem1_instance() {
        let opts = SuiteOptions {
            d: Some(8),
            t: Some(64),
            lambda: Some(1.0),
            ..SuiteOptions::default()
        };
        let r = run_suite(Suite::Theorem1, &opts).unwrap();
        assert!(r.checks[0].max_deviation < 1e-9, "{:?}", r.checks[0]);
        assert!(r.pass);
    }

    #[test]
    fn bad_options_rejected() {
        let opts = SuiteOptions {
            c: Some(0),
            ..SuiteOptions::default()
        };
        assert!(run_suite(Suite::Equivalence, &opts).is_err());
        let exact = SuiteOptions {
            precond: Some(PrecondKind::Exact),
            ..SuiteOptions::default()
        };
        assert!(run_suite(Suite::Equivalence, &exact).is_err());
    }
}
