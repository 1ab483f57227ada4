use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label at positions that carry no target.
pub const IGNORE_INDEX: i64 = -100;
/// Filler token after the queries.
pub const PAD: u32 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MqarConfig {
    pub vocab_size: usize,
    pub num_kv_pairs: usize,
    pub seq_len: usize,
    pub num_examples: usize,
    pub seed: u64,
}

impl MqarConfig {
    pub fn new(vocab_size: usize, num_kv_pairs: usize, seq_len: usize, num_examples: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            num_kv_pairs,
            seq_len,
            num_examples,
            seed,
        }
    }

    /// Every stored key is queried once.
    pub fn num_queries(&self) -> usize {
        self.num_kv_pairs
    }

    /// Keys are `1..=K`, values `K+1..vocab`, token 0 is padding.
    pub fn key_range(&self) -> std::ops::Range<u32> {
        1..1 + self.num_keys() as u32
    }

    pub fn value_range(&self) -> std::ops::Range<u32> {
        1 + self.num_keys() as u32..self.vocab_size as u32
    }

    fn num_keys(&self) -> usize {
        self.vocab_size.saturating_sub(1) / 2
    }

    pub fn num_values(&self) -> usize {
        self.vocab_size.saturating_sub(1 + self.num_keys())
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_kv_pairs == 0 {
            return Err(Error::InvalidConfig("num_kv_pairs must be positive".into()));
        }
        if self.num_keys() < self.num_kv_pairs || self.num_values() == 0 {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} too small: {} keys available for {} pairs",
                self.vocab_size,
                self.num_keys(),
                self.num_kv_pairs
            )));
        }
        let needed = 2 * self.num_kv_pairs + self.num_queries();
        if self.seq_len < needed {
            return Err(Error::InvalidConfig(format!(
                "seq_len {} shorter than the {needed} tokens of pairs and queries",
                self.seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub labels: Vec<i64>,
}

impl Example {
    /// Positions with a target.
    pub fn query_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, l)| **l != IGNORE_INDEX).map(|(i, _)| i)
    }

    /// One past the last labeled position. A causal model never needs to
    /// look further.
    pub fn effective_len(&self) -> usize {
        self.query_positions().last().map_or(0, |p| p + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: MqarConfig,
    pub examples: Vec<Example>,
}

fn generate_one(cfg: &MqarConfig, index: u64) -> Example {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let n = cfg.num_kv_pairs;
    let keys: Vec<u32> = cfg.key_range().collect::<Vec<_>>().choose_multiple(&mut rng, n).cloned().collect();
    let values: Vec<u32> = (0..n).map(|_| rng.gen_range(cfg.value_range())).collect();

    let mut tokens = vec![PAD; cfg.seq_len];
    let mut labels = vec![IGNORE_INDEX; cfg.seq_len];
    for i in 0..n {
        tokens[2 * i] = keys[i];
        tokens[2 * i + 1] = values[i];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for (j, &i) in order.iter().enumerate() {
        tokens[2 * n + j] = keys[i];
        labels[2 * n + j] = values[i] as i64;
    }
    Example { tokens, labels }
}

/// Deterministic under `cfg.seed`; example `i` depends only on the seed and `i`.
pub fn generate_mqar(cfg: &MqarConfig) -> Result<Dataset> {
    cfg.validate()?;
    let examples = (0..cfg.num_examples as u64).into_par_iter().map(|i| generate_one(cfg, i)).collect();
    Ok(Dataset {
        config: cfg.clone(),
        examples,
    })
}

/// Checks the generator contract for one example: every query key was
/// stored exactly once before the query and the label is its value.
pub fn check_example(ex: &Example, cfg: &MqarConfig) -> Result<()> {
    let bad = |msg: String| Err(Error::InvalidInput(msg));
    if ex.tokens.len() != cfg.seq_len || ex.labels.len() != cfg.seq_len {
        return bad(format!("example length {} != seq_len {}", ex.tokens.len(), cfg.seq_len));
    }
    for pos in ex.query_positions() {
        let key = ex.tokens[pos];
        if !cfg.key_range().contains(&key) {
            return bad(format!("query token {key} at {pos} is not a key"));
        }
        let stored: Vec<usize> = (0..pos)
            .filter(|&i| i % 2 == 0 && i + 1 < pos && ex.labels[i] == IGNORE_INDEX && ex.tokens[i] == key)
            .filter(|&i| cfg.value_range().contains(&ex.tokens[i + 1]))
            .collect();
        if stored.len() != 1 {
            return bad(format!("query key {key} at {pos} stored {} times before", stored.len()));
        }
        if ex.tokens[stored[0] + 1] as i64 != ex.labels[pos] {
            return bad(format!("label at {pos} is not the stored value"));
        }
    }
    if ex.query_positions().count() != cfg.num_queries() {
        return bad("wrong number of queries".into());
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Record {
    tokens: Vec<u32>,
    labels: Vec<i64>,
}

/// One `{"tokens": [...], "labels": [...]}` object per line.
pub fn write_jsonl(examples: &[Example], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        if rec.tokens.len() != rec.labels.len() {
            return Err(Error::InvalidInput(format!("line {}: tokens and labels differ in length", i + 1)));
        }
        out.push(Example {
            tokens: rec.tokens,
            labels: rec.labels,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_layout() {
        let cfg = MqarConfig::new(8, 1, 4, 3, 0);
        for ex in generate_mqar(&cfg).unwrap().examples {
            let (k, v) = (ex.tokens[0], ex.tokens[1]);
            assert_eq!(ex.tokens, vec![k, v, k, PAD]);
            assert_eq!(ex.labels, vec![IGNORE_INDEX, IGNORE_INDEX, v as i64, IGNORE_INDEX]);
            assert_eq!(ex.effective_len(), 3);
        }
    }

    #[test]
    fn generator_contract_holds() {
        let cfg = MqarConfig::new(64, 16, 256, 10_000, 5);
        let data = generate_mqar(&cfg).unwrap();
        assert_eq!(data.examples.len(), 10_000);
        for ex in &data.examples {
            check_example(ex, &cfg).unwrap();
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = MqarConfig::new(64, 4, 64, 50, 9);
        assert_eq!(generate_mqar(&cfg).unwrap(), generate_mqar(&cfg).unwrap());
        let other = MqarConfig { seed: 10, ..cfg };
        assert_ne!(generate_mqar(&cfg).unwrap().examples, generate_mqar(&other).unwrap().examples);
    }

    #[test]
    fn rejects_small_vocab_and_short_sequences() {
        assert!(generate_mqar(&MqarConfig::new(8, 4, 64, 1, 0)).is_err());
        assert!(generate_mqar(&MqarConfig::new(64, 4, 11, 1, 0)).is_err());
        assert!(generate_mqar(&MqarConfig::new(64, 0, 11, 1, 0)).is_err());
    }

    #[test]
    fn check_catches_corruption() {
        let cfg = MqarConfig::new(64, 4, 16, 1, 0);
        let mut ex = generate_mqar(&cfg).unwrap().examples.remove(0);
        ex.labels[8] = if ex.labels[8] == 40 { 41 } else { 40 };
        assert!(check_example(&ex, &cfg).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let cfg = MqarConfig::new(64, 4, 64, 20, 1);
        let data = generate_mqar(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_jsonl(&data.examples, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 20);
        assert!(text.lines().next().unwrap().starts_with("{\"tokens\":["));
        assert_eq!(read_jsonl(&path).unwrap(), data.examples);
    }
}
