//! Wall-clock comparison of the chunkwise and sequential forms.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chunkwise::full_chunkwise_run;
use crate::error::{Error, Result};
use crate::recurrence::{run_sequential, PrecondKind, RecurrenceConfig, Variant};
use crate::testutil::random_batch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub variant: Variant,
    pub precond: Option<PrecondKind>,
    pub d: usize,
    pub dv: usize,
    pub lengths: Vec<usize>,
    pub chunk_sizes: Vec<usize>,
    pub warmup: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Pgdn,
            precond: None,
            d: 64,
            dv: 64,
            lengths: vec![4096],
            chunk_sizes: vec![64],
            warmup: 1,
            repeats: 5,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn recurrence(&self) -> RecurrenceConfig {
        let cfg = RecurrenceConfig::for_variant(self.variant, self.d, self.dv);
        match self.precond {
            Some(p) => cfg.with_precond(p),
            None => cfg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 || self.d == 0 || self.dv == 0 {
            return Err(Error::InvalidConfig("repeats, d and dv must be positive".into()));
        }
        if self.lengths.is_empty() || self.chunk_sizes.is_empty() || self.chunk_sizes.contains(&0) {
            return Err(Error::InvalidConfig("need at least one length and positive chunk sizes".into()));
        }
        self.recurrence().validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: String,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub median_ns: u128,
    pub sequential_ns: u128,
    /// Set when a single repeat makes the median meaningless.
    pub noisy: bool,
}

fn median(mut xs: Vec<u128>) -> u128 {
    xs.sort_unstable();
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2
    }
}

fn time_ns(mut f: impl FnMut() -> Result<()>) -> Result<u128> {
    let start = Instant::now();
    f()?;
    Ok(start.elapsed().as_nanos())
}

/// Median wall time of `repeats` runs after `warmup` untimed ones, for
/// every length and chunk size. The sequential baseline is timed once per
/// length and repeated on each of its rows.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let rc = cfg.recurrence();
    let label = match cfg.precond {
        Some(p) => format!("{}/{p}", cfg.variant),
        None => cfg.variant.to_string(),
    };
    let mut rows = Vec::new();
    for &t in &cfg.lengths {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let seq = random_batch(&mut rng, &rc, t);
        let seq_run = || run_sequential(&rc, &seq).map(|_| ());
        for _ in 0..cfg.warmup {
            seq_run()?;
        }
        let sequential_ns = median((0..cfg.repeats).map(|_| time_ns(seq_run)).collect::<Result<_>>()?);
        for &c in &cfg.chunk_sizes {
            let chunk_run = || full_chunkwise_run(&rc, &seq, c).map(|_| ());
            for _ in 0..cfg.warmup {
                chunk_run()?;
            }
            let median_ns = median((0..cfg.repeats).map(|_| time_ns(chunk_run)).collect::<Result<_>>()?);
            rows.push(BenchRow {
                variant: label.clone(),
                t,
                c,
                median_ns,
                sequential_ns,
                noisy: cfg.repeats == 1,
            });
        }
    }
    Ok(rows)
}

/// `variant,T,C,median_ns,sequential_ns,noisy`.
pub fn rows_to_csv(rows: &[BenchRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![5, 1, 3]), 3);
        assert_eq!(median(vec![4, 1, 3, 2]), 2);
    }

    #[test]
    fn small_bench_rows_and_csv() {
        let cfg = BenchConfig {
            d: 4,
            dv: 4,
            lengths: vec![32, 40],
            chunk_sizes: vec![1, 8],
            repeats: 1,
            ..BenchConfig::default()
        };
        let rows = run_bench(&cfg).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.noisy && r.median_ns > 0));
        assert_eq!(rows[0].sequential_ns, rows[1].sequential_ns);
        let csv = rows_to_csv(&rows).unwrap();
        assert!(csv.starts_with("variant,T,C,median_ns,sequential_ns,noisy\npgdn,32,1,"));
    }

    #[test]
    fn rejects_exact_and_empty_grids() {
        let exact = BenchConfig {
            precond: Some(PrecondKind::Exact),
            ..BenchConfig::default()
        };
        assert!(run_bench(&exact).is_err());
        let empty = BenchConfig {
            lengths: vec![],
            ..BenchConfig::default()
        };
        assert!(run_bench(&empty).is_err());
    }
}
