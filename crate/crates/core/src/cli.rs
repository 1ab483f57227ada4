//! Command-line front end shared by the `precdelta` binary and the tests.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{rows_to_csv, run_bench, BenchConfig};
use crate::error::{Error, Result};
use crate::mqar::{
    data, generate_mqar, run_experiment, write_artifacts, ExperimentConfig, MixPath, MqarConfig, TinyModel,
};
use crate::recurrence::{PrecondKind, Variant};
use crate::verify::{run_suite, Suite, SuiteOptions};

/// Exit status for a check that ran and failed.
pub const EXIT_CHECK_FAILED: u8 = 1;
/// Exit status for bad flags, configs or inputs.
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "precdelta", version, about = "Preconditioned delta-rule recurrences: verification, benchmarks and MQAR")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a verification suite and write its report.
    Verify(VerifyArgs),
    /// Time chunkwise against sequential forward passes.
    Bench(BenchArgs),
    /// Generate data, train, or evaluate on associative recall.
    #[command(subcommand)]
    Mqar(MqarCommand),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value = "all")]
    pub suite: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub dv: Option<usize>,
    #[arg(long = "T")]
    pub t: Option<usize>,
    #[arg(long = "C")]
    pub c: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub x: Option<f64>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub precond: Option<String>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value = "pgdn")]
    pub variant: String,
    #[arg(long)]
    pub precond: Option<String>,
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long)]
    pub dv: Option<usize>,
    /// Comma-separated sequence lengths.
    #[arg(long = "T", value_delimiter = ',', default_value = "4096")]
    pub t: Vec<usize>,
    /// Comma-separated chunk sizes.
    #[arg(long = "C", value_delimiter = ',', default_value = "64")]
    pub c: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum MqarCommand {
    /// Write a JSONL dataset.
    Gen(GenArgs),
    /// Train a model and write curve.csv, metrics.json and model.ckpt.
    Train(TrainArgs),
    /// Accuracy of a checkpoint, or of a fresh model, on a dataset.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub len: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// JSON `MqarConfig`; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "mqar.jsonl")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// JSON `ExperimentConfig`; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub precond: Option<String>,
    #[arg(long)]
    pub x: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub eval_examples: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "mqar-run")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSONL dataset to score.
    #[arg(long)]
    pub data: PathBuf,
    /// Trained model; a fresh one is built from --variant and --seed when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "dn")]
    pub variant: String,
    /// Vocabulary of a fresh model.
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluate through the chunkwise form with this chunk size.
    #[arg(long = "C")]
    pub c: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Verify(a) => verify(a),
        Command::Bench(a) => bench(a),
        Command::Mqar(MqarCommand::Gen(a)) => mqar_gen(a),
        Command::Mqar(MqarCommand::Train(a)) => mqar_train(a),
        Command::Mqar(MqarCommand::Eval(a)) => mqar_eval(a),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn parse_opt<T: std::str::FromStr<Err = Error>>(s: &Option<String>) -> Result<Option<T>> {
    s.as_deref().map(str::parse).transpose()
}

fn verify(a: VerifyArgs) -> Result<ExitCode> {
    let suite: Suite = a.suite.parse()?;
    let opts = SuiteOptions {
        seed: a.seed,
        trials: a.trials,
        d: a.d,
        dv: a.dv,
        t: a.t,
        c: a.c,
        lambda: a.lambda,
        x: a.x,
        variant: parse_opt(&a.variant)?,
        precond: parse_opt(&a.precond)?,
    };
    let report = run_suite(suite, &opts)?;
    let text = match a.format {
        Format::Json => report.to_json()?,
        Format::Csv => report.to_csv()?,
    };
    emit(a.out.as_deref(), &text)?;
    match &report.first_failure {
        None => Ok(ExitCode::SUCCESS),
        Some(name) => {
            eprintln!("check failed: {name}");
            Ok(ExitCode::from(EXIT_CHECK_FAILED))
        }
    }
}

fn bench(a: BenchArgs) -> Result<ExitCode> {
    let cfg = BenchConfig {
        variant: a.variant.parse()?,
        precond: parse_opt(&a.precond)?,
        d: a.d,
        dv: a.dv.unwrap_or(a.d),
        lengths: a.t,
        chunk_sizes: a.c,
        warmup: a.warmup,
        repeats: a.repeats,
        seed: a.seed,
    };
    emit(a.out.as_deref(), &rows_to_csv(&run_bench(&cfg)?)?)?;
    Ok(ExitCode::SUCCESS)
}

fn apply_data_flags(cfg: &mut MqarConfig, a: &DataArgs) {
    if let Some(v) = a.vocab {
        cfg.vocab_size = v;
    }
    if let Some(p) = a.pairs {
        cfg.num_kv_pairs = p;
    }
    if let Some(l) = a.len {
        cfg.seq_len = l;
    }
    if let Some(n) = a.n {
        cfg.num_examples = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
}

fn mqar_gen(a: GenArgs) -> Result<ExitCode> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => MqarConfig::new(64, 4, 64, 10_000, 0),
    };
    apply_data_flags(&mut cfg, &a.data);
    let data = generate_mqar(&cfg)?;
    data::write_jsonl(&data.examples, &a.out)?;
    eprintln!("wrote {} examples to {}", data.examples.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn mqar_train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(Variant::Dn, 4, 64, 3000, 0),
    };
    apply_data_flags(&mut cfg.data, &a.data);
    cfg.model.vocab_size = cfg.data.vocab_size;
    if let Some(v) = parse_opt::<Variant>(&a.variant)? {
        cfg.model.variant = v;
        cfg.model.precond = v.default_precond();
    }
    if let Some(p) = parse_opt::<PrecondKind>(&a.precond)? {
        cfg.model.precond = p;
    }
    if let Some(x) = a.x {
        cfg.model.x = x;
    }
    if let Some(s) = a.data.seed {
        cfg.train.seed = s;
        cfg.model_seed = s;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = a.batch {
        cfg.train.batch_size = b;
    }
    if let Some(n) = a.eval_examples {
        cfg.eval_examples = n;
    }
    let (model, outcome) = run_experiment(&cfg)?;
    write_artifacts(&a.out, &model, &outcome)?;
    let r = &outcome.report;
    eprintln!(
        "{}: accuracy {:.4} after {} steps ({:?})",
        cfg.model.variant, r.final_accuracy, r.steps_run, r.status
    );
    Ok(match r.status {
        crate::mqar::TrainStatus::Diverged { .. } => ExitCode::from(EXIT_CHECK_FAILED),
        _ => ExitCode::SUCCESS,
    })
}

#[derive(serde::Serialize)]
struct EvalMetrics {
    checkpoint: Option<PathBuf>,
    variant: Variant,
    examples: usize,
    queries: usize,
    correct: usize,
    accuracy: f64,
    loss: f64,
    /// `1 / number of values` for a vocabulary of the model's size.
    chance: f64,
}

fn mqar_eval(a: EvalArgs) -> Result<ExitCode> {
    let examples = data::read_jsonl(&a.data)?;
    if examples.is_empty() {
        return Err(Error::InvalidInput(format!("{} holds no examples", a.data.display())));
    }
    let model = match &a.checkpoint {
        Some(p) => TinyModel::load(p)?,
        None => TinyModel::new(crate::mqar::ModelConfig::new(a.vocab, a.variant.parse()?), a.seed)?,
    };
    let path = a.c.map_or(MixPath::Sequential, MixPath::Chunkwise);
    let stats = model.evaluate(&examples, path)?;
    let values = MqarConfig::new(model.config.vocab_size, 1, 3, 0, 0).num_values();
    let metrics = EvalMetrics {
        checkpoint: a.checkpoint.clone(),
        variant: model.config.variant,
        examples: examples.len(),
        queries: stats.total,
        correct: stats.correct,
        accuracy: stats.accuracy(),
        loss: stats.loss,
        chance: 1.0 / values.max(1) as f64,
    };
    emit(a.out.as_deref(), &(serde_json::to_string_pretty(&metrics)? + "\n"))?;
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from(["precdelta", "verify", "--suite", "theorem1", "--d", "8", "--T", "64", "--lambda", "1"])
            .unwrap();
        let Command::Verify(a) = cli.command else { panic!() };
        assert_eq!((a.d, a.t, a.lambda), (Some(8), Some(64), Some(1.0)));

        let cli = Cli::try_parse_from(["precdelta", "bench", "--T", "128,256", "--C", "1,16"]).unwrap();
        let Command::Bench(a) = cli.command else { panic!() };
        assert_eq!(a.t, vec![128, 256]);
        assert_eq!(a.c, vec![1, 16]);
        assert!(Cli::try_parse_from(["precdelta", "verify", "--bogus"]).is_err());
    }
}
