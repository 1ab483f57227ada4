//! Chunkwise against sequential: agreement across chunk sizes, then a
//! timing of PGDN with the stable preconditioner at T = 4096, d = 64.
//!
//! cargo run --release --example chunkwise

use precdelta::bench::{rows_to_csv, run_bench, BenchConfig};
use precdelta::chunkwise::full_chunkwise_run;
use precdelta::testutil::random_batch;
use precdelta::{run_sequential, PrecondKind, RecurrenceConfig, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> precdelta::Result<()> {
    let cfg = RecurrenceConfig::for_variant(Variant::Pkda, 16, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let seq = random_batch(&mut rng, &cfg, 100);
    let reference = run_sequential(&cfg, &seq)?.outputs;
    for c in [1, 2, 7, 16, 100] {
        let out = full_chunkwise_run(&cfg, &seq, c)?;
        println!("pkda C={c:3}: max |chunkwise - sequential| = {:.2e}", out.max_abs_diff(&reference));
    }

    let bench = BenchConfig {
        variant: Variant::Pgdn,
        precond: Some(PrecondKind::DiagStable),
        chunk_sizes: vec![16, 64, 128],
        repeats: 3,
        ..BenchConfig::default()
    };
    print!("{}", rows_to_csv(&run_bench(&bench)?)?);
    Ok(())
}
