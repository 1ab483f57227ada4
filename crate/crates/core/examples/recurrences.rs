//! Runs every named recurrence over one random sequence and prints the
//! first output row and the final state norm.

use precdelta::testutil::random_batch;
use precdelta::{run_sequential, RecurrenceConfig, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> precdelta::Result<()> {
    let (d_k, d_v, t) = (8, 4, 32);
    for variant in Variant::ALL {
        let cfg = RecurrenceConfig::for_variant(variant, d_k, d_v);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let seq = random_batch(&mut rng, &cfg, t);
        let run = run_sequential(&cfg, &seq)?;
        let last = run.outputs.row(t - 1);
        println!(
            "{:8} solve={:<8} decay={:<9} precond={:<11} |S_T|={:.4} o_T[0..2]=[{:+.4}, {:+.4}]",
            variant.name(),
            format!("{:?}", cfg.solve),
            format!("{:?}", cfg.decay),
            cfg.precond.to_string(),
            run.final_state.0.frobenius_norm(),
            last[0],
            last[1],
        );
    }
    Ok(())
}
