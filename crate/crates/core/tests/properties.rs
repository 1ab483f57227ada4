use precdelta::autograd::{backward_sequential, record_tape};
use precdelta::chunkwise::{ut_factors, DecayPlan};
use precdelta::mqar::data::check_example;
use precdelta::mqar::{generate_mqar, MqarConfig};
use precdelta::numerics::{dense, prefix_products, PrefixMode};
use precdelta::precond::{exact_update_and_write_key, squash, ExactGramState, SquashParams};
use precdelta::recurrence::{step_dplr, step_online, DPLRStep, DecayGate, TokenGates};
use precdelta::testutil::{random_batch, random_unit_rows};
use precdelta::{Matrix, RecurrenceConfig, StateMatrix, Variant};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prefix_products_relation(values in prop::collection::vec(0.01f64..2.0, 0..40)) {
        let inc = prefix_products(&values, PrefixMode::Inclusive).unwrap();
        let exc = prefix_products(&values, PrefixMode::Exclusive).unwrap();
        for j in 0..values.len() {
            prop_assert_eq!(inc[j], exc[j] * values[j]);
        }
    }

    #[test]
    fn squash_is_bounded_and_antitone(
        a in prop::collection::vec(1e-9f64..1e6, 1..16),
        mu in 0.01f64..5.0,
        x in 1.0f64..4.0,
    ) {
        let b = squash(&a, SquashParams::new(mu, x).unwrap()).unwrap();
        for (i, bi) in b.iter().enumerate() {
            prop_assert!(*bi >= 1.0 / x && *bi <= x, "B = {bi} outside [1/{x}, {x}]");
            for (j, bj) in b.iter().enumerate() {
                if a[i] < a[j] {
                    prop_assert!(bi >= bj);
                }
            }
        }
    }

    #[test]
    fn sherman_morrison_tracks_the_inverse_gram(d in 1usize..=32, t in 0usize..=256, lambda in 0.1f64..10.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let keys = random_unit_rows(&mut r, t, d);
        let mut st = ExactGramState::new(d, lambda).unwrap();
        let mut g = Matrix::identity(d).scaled(lambda);
        for i in 0..t {
            let k = keys.row(i);
            let (next, kw) = exact_update_and_write_key(&st, k).unwrap();
            let ip: f64 = k.iter().zip(&kw).map(|(a, b)| a * b).sum();
            prop_assert!((0.0..=1.0).contains(&ip), "k.kw = {ip}");
            st = next;
            g.rank1_update(1.0, k, k);
        }
        prop_assert!(st.p.matmul(&g).max_abs_diff(&Matrix::identity(d)) < 1e-9);
    }

    #[test]
    fn ut_transform_identity(c in 1usize..24, d in 1usize..10, seed in any::<u64>()) {
        let mut r = rng(seed);
        let k = random_unit_rows(&mut r, c, d);
        let kw = Matrix::from_fn(c, d, |_, _| r.gen_range(-1.0..1.0));
        let v = Matrix::from_fn(c, 3, |_, _| r.gen_range(-1.0..1.0));
        let beta: Vec<f64> = (0..c).map(|_| r.gen_range(0.0..=1.0)).collect();
        let f = ut_factors(&k, &kw, &v, &beta, &DecayPlan::None).unwrap();
        // I + tril(diag(beta) K Kw^T, -1), built entrywise
        let mut a = Matrix::identity(c);
        for i in 0..c {
            for j in 0..i {
                a[(i, j)] = beta[i] * (0..d).map(|m| k[(i, m)] * kw[(j, m)]).sum::<f64>();
            }
        }
        prop_assert!(a.matmul(&f.t).max_abs_diff(&Matrix::diag(&beta)) < 1e-12);
        prop_assert!(f.w.max_abs_diff(&f.t.matmul(&k)) < 1e-12);
        prop_assert!(f.u.max_abs_diff(&f.t.matmul(&v)) < 1e-12);
    }

    #[test]
    fn dplr_tying_reproduces_the_online_step(d in 1usize..10, dv in 1usize..5, diagonal in any::<bool>(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let s = StateMatrix(Matrix::from_fn(dv, d, |_, _| r.gen_range(-1.0..1.0)));
        let k = random_unit_rows(&mut r, 1, d).into_data();
        let kw: Vec<f64> = (0..d).map(|_| r.gen_range(-1.5..1.5)).collect();
        let v: Vec<f64> = (0..dv).map(|_| r.gen_range(-1.0..1.0)).collect();
        let alphas: Vec<f64> = (0..d).map(|_| r.gen_range(0.5..1.0)).collect();
        let gates = TokenGates {
            beta: r.gen_range(0.0..1.0),
            decay: if diagonal { DecayGate::Diagonal(&alphas) } else { DecayGate::Scalar(alphas[0]) },
        };
        let want = step_online(&s, &k, &kw, &v, gates).unwrap();
        let got = step_dplr(&s, &DPLRStep::from_online(&k, &kw, &v, gates)).unwrap();
        prop_assert!(got.0.max_abs_diff(&want.0) < 1e-12);
    }

    #[test]
    fn backward_is_linear_in_the_output_gradient(variant_ix in 0usize..12, t in 1usize..12, seed in any::<u64>()) {
        let cfg = RecurrenceConfig::for_variant(Variant::ALL[variant_ix], 4, 3);
        let mut r = rng(seed);
        let seq = random_batch(&mut r, &cfg, t);
        let s0 = StateMatrix(Matrix::from_fn(3, 4, |_, _| r.gen_range(-0.5..0.5)));
        let g1 = Matrix::from_fn(t, 3, |_, _| r.gen_range(-1.0..1.0));
        let g2 = Matrix::from_fn(t, 3, |_, _| r.gen_range(-1.0..1.0));
        let (a, b) = (r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0));
        let tape = record_tape(&cfg, &seq, &s0).unwrap();
        let back = |g: &Matrix| backward_sequential(&cfg, &seq, &tape, g).unwrap().flatten();
        let combined = back(&g1.scaled(a).add(&g2.scaled(b)));
        let (x1, x2) = (back(&g1), back(&g2));
        for i in 0..combined.len() {
            let want = a * x1[i] + b * x2[i];
            prop_assert!((combined[i] - want).abs() < 1e-12 * (1.0 + want.abs()), "component {i}");
        }
    }

    #[test]
    fn generated_examples_honor_the_contract(pairs in 1usize..12, extra in 0usize..20, seed in any::<u64>()) {
        let cfg = MqarConfig::new(64, pairs, 3 * pairs + extra, 20, seed);
        for ex in generate_mqar(&cfg).unwrap().examples {
            prop_assert!(check_example(&ex, &cfg).is_ok());
        }
    }
}

#[test]
fn unit_lower_solve_recovers_known_solution() {
    let mut r = rng(0);
    for n in [1, 5, 17, 64] {
        let l = Matrix::from_fn(n, n, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Equal => 1.0,
            std::cmp::Ordering::Greater => r.gen_range(-1.0..1.0) / n as f64,
            std::cmp::Ordering::Less => 0.0,
        });
        let x = Matrix::from_fn(n, 3, |_, _| r.gen_range(-1.0..1.0));
        let got = precdelta::numerics::solve_unit_lower_triangular(&l, &l.matmul(&x)).unwrap();
        assert!(got.max_abs_diff(&x) < 1e-12 * x.max_abs().max(1.0));
        assert!((dense::determinant(&l) - 1.0).abs() < 1e-12);
    }
}
