//! Recurrences as online least-squares solvers: the exact preconditioner
//! reproduces the ridge solution, the diagonal one breaks the
//! offline/online equivalence, and the delta rule beats linear attention
//! past `t = d`. Prints the Monte-Carlo error curves as CSV.

use precdelta::theory::{check_theorem1_grid, counterexample_d2, theorem2_montecarlo};

fn main() -> precdelta::Result<()> {
    let grid = check_theorem1_grid(50, 0)?;
    println!("exact preconditioner vs ridge map: {} configs, max deviation {:.2e}", grid.samples, grid.max_deviation);

    let c = counterexample_d2()?;
    println!("diagonal, offline state: {:?}", c.s_apla);
    println!("diagonal, online state:  {:?}", c.s_apdn);

    let r = theorem2_montecarlo(4, 16, 10_000, 1.0, 0)?;
    println!("t,e_la,e_la_se,closed_form_la,e_dn,e_dn_se");
    for rec in &r.records {
        println!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            rec.t, rec.e_la, rec.e_la_se, rec.closed_form_la, rec.e_dn, rec.e_dn_se
        );
    }
    Ok(())
}
