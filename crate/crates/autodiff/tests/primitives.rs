use autodiff::{finite_difference_check, Array, Result, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array {
    Array::from_fn(rows, cols, |_, _| rng.gen_range(-1.5..1.5))
}

/// Reduces a primitive's output to a scalar with fixed random weights so
/// that the test also sees off-diagonal Jacobian structure (a plain sum of a
/// softmax is constant).
fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let [r, c] = t.value(y).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = t.constant(random(&mut rng, r, c));
    let prod = t.hadamard(y, w)?;
    t.sum_all(prod)
}

fn check(name: &str, point: &Array, build: impl Fn(&mut Tape, Var) -> Result<Var>) {
    let report = finite_difference_check(build, point, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-6, "{name}: relative error {} over {:?}", report.max_rel_error, point.shape());
}

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in 0..24u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rng.gen_range(1..5);
        let c = rng.gen_range(1..6);
        let k = rng.gen_range(1..5);
        let x = random(&mut rng, r, c);
        let other = random(&mut rng, c, k);
        let same = random(&mut rng, r, c);
        let bias_row = random(&mut rng, 1, c);
        let bias_col = random(&mut rng, r, 1);
        let positive = x.map(|v| v.abs() + 0.1);

        check("matmul lhs", &x, |t, x| {
            let b = t.constant(other.clone());
            let y = t.matmul(x, b)?;
            weighted_sum(t, y, seed)
        });
        check("matmul rhs", &other, |t, b| {
            let a = t.constant(x.clone());
            let y = t.matmul(a, b)?;
            weighted_sum(t, y, seed)
        });
        check("matmul_transposed rhs", &same, |t, b| {
            let a = t.constant(x.clone());
            let y = t.matmul_transposed(a, b)?;
            weighted_sum(t, y, seed)
        });
        check("matmul_transposed lhs", &x, |t, a| {
            let b = t.constant(same.clone());
            let y = t.matmul_transposed(a, b)?;
            weighted_sum(t, y, seed)
        });
        check("hadamard", &x, |t, x| {
            let b = t.constant(same.clone());
            let y = t.hadamard(x, b)?;
            weighted_sum(t, y, seed)
        });
        check("add row broadcast", &bias_row, |t, b| {
            let a = t.constant(x.clone());
            let y = t.add(a, b)?;
            let y = t.hadamard(y, y)?;
            weighted_sum(t, y, seed)
        });
        check("add column broadcast", &bias_col, |t, b| {
            let a = t.constant(x.clone());
            let y = t.add(a, b)?;
            let y = t.hadamard(y, y)?;
            weighted_sum(t, y, seed)
        });
        check("relu", &x, |t, x| {
            let y = t.relu(x);
            weighted_sum(t, y, seed)
        });
        check("log", &positive, |t, x| {
            let y = t.log(x);
            weighted_sum(t, y, seed)
        });
        check("exp", &x, |t, x| {
            let y = t.exp(x);
            weighted_sum(t, y, seed)
        });
        for axis in 0..2 {
            check("softmax", &x, |t, x| {
                let y = t.softmax(x, axis)?;
                weighted_sum(t, y, seed)
            });
            check("logsumexp", &x, |t, x| {
                let y = t.logsumexp(x, axis)?;
                weighted_sum(t, y, seed)
            });
            check("sum", &x, |t, x| {
                let y = t.sum(x, axis)?;
                let y = t.hadamard(y, y)?;
                weighted_sum(t, y, seed)
            });
        }
        check("gather_rows", &x, |t, x| {
            let rows: Vec<(Var, usize)> = (0..2 * r).map(|i| (x, (i * 7 + 1) % r)).collect();
            let y = t.gather_rows(&rows)?;
            weighted_sum(t, y, seed)
        });
        check("scale per row", &x, |t, x| {
            let factors: Vec<f64> = (0..r).map(|i| 0.5 + i as f64).collect();
            let y = t.scale(x, &factors)?;
            weighted_sum(t, y, seed)
        });
    }
}

#[test]
fn matmul_matches_naive_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, 2, 3);
    let b = random(&mut rng, 3, 4);
    let mut t = Tape::new();
    let av = t.constant(a.clone());
    let bv = t.constant(b.clone());
    let c = t.matmul(av, bv).unwrap();
    let c = t.value(c);
    assert_eq!(c.shape(), [2, 4]);
    for i in 0..2 {
        for j in 0..4 {
            let mut expect = 0.0;
            for k in 0..3 {
                expect += a.get(i, k) * b.get(k, j);
            }
            assert!((c.get(i, j) - expect).abs() < 1e-14);
        }
    }
}

#[test]
fn softmax_gradient_rows_sum_to_zero() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, 3, 5);
        let mut t = Tape::new();
        let xv = t.param(x);
        let y = t.softmax(xv, 1).unwrap();
        let out = weighted_sum(&mut t, y, seed).unwrap();
        let g = t.backward(out).unwrap().get(xv);
        for r in 0..3 {
            let s: f64 = g.row_slice(r).iter().sum();
            assert!(s.abs() < 1e-10, "row {r} sums to {s}");
        }
    }
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let e = random(&mut rng, 6, 4);
        let m1 = random(&mut rng, 4, 4);
        let m2 = random(&mut rng, 4, 3);
        let mut t = Tape::new();
        let e = t.param(e);
        let m1 = t.param(m1);
        let m2 = t.param(m2);
        let h = t.matmul(e, m1).unwrap();
        let h = t.relu(h);
        let o = t.matmul(h, m2).unwrap();
        let o = t.softmax(o, 0).unwrap();
        let o = t.log(o);
        let s = t.sum_all(o).unwrap();
        let g = t.backward(s).unwrap();
        (g.get(e), g.get(m1), g.get(m2))
    };
    let a = run();
    let b = run();
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
    assert_eq!(a.2.data(), b.2.data());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 1..12)) {
            let mut t = Tape::new();
            let x = t.constant(Array::row(vals).unwrap());
            let y = t.softmax(x, 1).unwrap();
            let y = t.value(y);
            prop_assert!((y.sum() - 1.0).abs() < 1e-12);
            prop_assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn logsumexp_bounds(vals in prop::collection::vec(-30.0f64..30.0, 1..12)) {
            let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let n = vals.len() as f64;
            let lse = autodiff::logsumexp_of(vals.iter().cloned());
            prop_assert!(lse >= max - 1e-12);
            prop_assert!(lse <= max + n.ln() + 1e-12);
        }
    }
}
