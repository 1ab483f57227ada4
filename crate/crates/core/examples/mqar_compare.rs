//! DN against PDN (stable diagonal preconditioner, x = 1.5) on a harder
//! recall task, three seeds each.
//!
//! cargo run --release --example mqar_compare -- [pairs] [seq_len] [steps]

use precdelta::mqar::{run_experiment, ExperimentConfig};
use precdelta::Variant;

fn main() -> precdelta::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let pairs = args.first().copied().unwrap_or(8);
    let len = args.get(1).copied().unwrap_or(128);
    let steps = args.get(2).copied().unwrap_or(1500);

    let base = ExperimentConfig::desk(Variant::Dn, pairs, len, steps, 0);
    for variant in [Variant::Dn, Variant::Pdn] {
        let mut finals = Vec::new();
        for seed in 0..3 {
            let cfg = base.clone().with_variant(variant).with_seed(seed);
            let (_, out) = run_experiment(&cfg)?;
            let r = &out.report;
            println!(
                "{variant} seed {seed}: accuracy {:.4} after {} steps, {:.0}s",
                r.final_accuracy, r.steps_run, r.seconds
            );
            finals.push(r.final_accuracy);
        }
        println!("{variant} mean {:.4}", finals.iter().sum::<f64>() / finals.len() as f64);
    }
    Ok(())
}
