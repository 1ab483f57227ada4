//! The three key-Gram preconditioners on a short stream of keys: exact
//! Sherman-Morrison write keys, raw diagonal write keys, and the squashed
//! diagonal gain bounded in [1/x, x].

use precdelta::precond::{atk_unstable_write_key, squash, DiagGramState, ExactGramState, SquashParams};
use precdelta::testutil::random_unit_rows;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn main() -> precdelta::Result<()> {
    let d = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let keys = random_unit_rows(&mut rng, 12, d);
    let mut exact = ExactGramState::new(d, 1.0)?;
    let mut diag = DiagGramState::zeros(d);
    let params = SquashParams::new(1.0, 1.5)?;

    println!("  t  k.kw(exact)  k.kw(diag raw)  gain range (stable)");
    for t in 0..keys.rows() {
        let k = keys.row(t);
        let raw = atk_unstable_write_key(&diag.a, k, 1.0);
        let kw = exact.update(k)?;
        diag.update(k, 0.95, 1.0)?;
        let gain = squash(&diag.a, params)?;
        let (lo, hi) = gain.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), g| (lo.min(*g), hi.max(*g)));
        println!("{t:3}  {:11.6}  {:14.6}  [{lo:.4}, {hi:.4}]", dot(k, &kw), dot(k, &raw));
    }
    println!("exact write keys satisfy 0 <= k.kw <= 1; stable gains stay inside [1/1.5, 1.5]");
    Ok(())
}
