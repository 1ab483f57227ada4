//! Runs one verification suite and prints its JSON report.
//!
//! cargo run --release --example verify_report -- [suite] [seed]

use precdelta::verify::{run_suite, Suite, SuiteOptions};

fn main() -> precdelta::Result<()> {
    let mut args = std::env::args().skip(1);
    let suite: Suite = args.next().as_deref().unwrap_or("counterexample").parse()?;
    let seed = args.next().map_or(0, |s| s.parse().expect("numeric seed"));
    let report = run_suite(suite, &SuiteOptions::with_seed(seed))?;
    print!("{}", report.to_json()?);
    if let Some(name) = &report.first_failure {
        eprintln!("failed: {name}");
    }
    Ok(())
}
