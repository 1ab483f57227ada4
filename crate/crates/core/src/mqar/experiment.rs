use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::{generate_mqar, Example, MqarConfig};
use super::model::{ModelConfig, TinyModel};
use super::train::{train, write_curve_csv, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::recurrence::Variant;

/// Everything one training run needs; the JSON form of `mqar train --config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: MqarConfig,
    /// Held-out examples, drawn from the same stream after the training ones.
    pub eval_examples: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub model_seed: u64,
}

impl ExperimentConfig {
    /// Vocabulary 64, 20000 training and 1000 held-out examples, at most
    /// `steps` steps with a stop at 99% held-out accuracy.
    pub fn desk(variant: Variant, pairs: usize, seq_len: usize, steps: usize, seed: u64) -> Self {
        Self {
            data: MqarConfig::new(64, pairs, seq_len, 20_000, seed),
            eval_examples: 1000,
            model: ModelConfig::new(64, variant),
            train: TrainConfig {
                steps,
                stop_at: Some(0.99),
                seed,
                ..TrainConfig::default()
            },
            model_seed: seed,
        }
    }

    /// Same run with every seed (data, initialization, batches) set to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.train.seed = seed;
        self.model_seed = seed;
        self
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.model.variant = variant;
        self.model.precond = variant.default_precond();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.vocab_size != self.data.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "model vocabulary {} differs from data vocabulary {}",
                self.model.vocab_size, self.data.vocab_size
            )));
        }
        if self.eval_examples == 0 || self.data.num_examples == 0 {
            return Err(Error::InvalidConfig("need training and held-out examples".into()));
        }
        Ok(())
    }

    /// Training and held-out splits.
    pub fn datasets(&self) -> Result<(Vec<Example>, Vec<Example>)> {
        let all = MqarConfig {
            num_examples: self.data.num_examples + self.eval_examples,
            ..self.data.clone()
        };
        let mut examples = generate_mqar(&all)?.examples;
        let eval = examples.split_off(self.data.num_examples);
        Ok((examples, eval))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub report: TrainReport,
}

/// Generates the data, trains a fresh model and returns it with the report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(TinyModel, ExperimentOutcome)> {
    cfg.validate()?;
    let (train_set, eval_set) = cfg.datasets()?;
    let mut model = TinyModel::new(cfg.model.clone(), cfg.model_seed)?;
    let report = train(&mut model, &train_set, &eval_set, &cfg.train)?;
    let outcome = ExperimentOutcome {
        config: cfg.clone(),
        report,
    };
    Ok((model, outcome))
}

/// Writes `curve.csv`, `metrics.json` and `model.ckpt` into `dir`.
pub fn write_artifacts(dir: &Path, model: &TinyModel, outcome: &ExperimentOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_curve_csv(&outcome.report.curve, &dir.join("curve.csv"))?;
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(outcome)? + "\n")?;
    model.save(&dir.join("model.ckpt"))
}
