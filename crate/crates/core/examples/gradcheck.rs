//! Reverse-mode gradients of one recurrence against finite differences,
//! then the full variant x size grid.

use precdelta::autograd::{backward_sequential, finite_diff_check, gradcheck_grid, record_tape};
use precdelta::testutil::random_batch;
use precdelta::{Matrix, RecurrenceConfig, StateMatrix, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> precdelta::Result<()> {
    let cfg = RecurrenceConfig::for_variant(Variant::Pkda, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let seq = random_batch(&mut rng, &cfg, 8);
    let s0 = StateMatrix::zeros(cfg.d_v, cfg.d_k);
    let tape = record_tape(&cfg, &seq, &s0)?;
    let grads = backward_sequential(&cfg, &seq, &tape, &Matrix::from_fn(8, 3, |_, _| 1.0))?;
    println!("d loss / d mu_raw = {:+.6e}", grads.dmu_raw);

    let r = finite_diff_check(&cfg, &seq, 0)?;
    println!("pkda: {} components, worst relative error {:.2e} at {}[{}]", r.components, r.max_relative_error, r.worst.0, r.worst.1);

    let grid = gradcheck_grid(0)?;
    println!(
        "grid: {}/{} cases within {:e}, worst {:.2e} ({})",
        grid.passed, grid.total, grid.tolerance, grid.worst_error, grid.worst_case
    );
    Ok(())
}
