//! Trains one model on associative recall and writes curve.csv,
//! metrics.json and model.ckpt.
//!
//! cargo run --release --example mqar_train -- [variant] [pairs] [seq_len] [steps] [seed] [out_dir]

use std::path::PathBuf;

use precdelta::mqar::{run_experiment, write_artifacts, ExperimentConfig};
use precdelta::Variant;

fn main() -> precdelta::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let variant: Variant = arg(0, "dn").parse()?;
    let num = |i, d| arg(i, d).parse::<usize>().expect("numeric argument");
    let cfg = ExperimentConfig::desk(variant, num(1, "4"), num(2, "64"), num(3, "3000"), num(4, "0") as u64);
    let out = PathBuf::from(arg(5, "mqar-run"));

    let (model, outcome) = run_experiment(&cfg)?;
    for p in &outcome.report.curve {
        println!("{:5} loss {:.4} accuracy {:.3}", p.step, p.loss, p.accuracy);
    }
    write_artifacts(&out, &model, &outcome)?;
    println!(
        "{variant}: final accuracy {:.4} ({:?}), artifacts in {}",
        outcome.report.final_accuracy,
        outcome.report.status,
        out.display()
    );
    Ok(())
}
