use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn opts() -> GradCheckOptions {
    GradCheckOptions::default()
}

/// Runs `build` on a fresh graph with the given parameters registered as
/// `p0, p1, ...` and returns (value, gradients) of the resulting scalar.
fn eval<F>(params: &[Tensor], build: F) -> crate::Result<(f64, Vec<Tensor>)>
where
    F: for<'a> Fn(&mut Graph<'a>, &[Var]) -> crate::Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| g.param(&format!("p{i}"), p))
        .collect();
    let out = build(&mut g, &vars)?;
    let value = g.value(out).data()[0];
    let grads = g.backward(out)?;
    Ok((value, grads.into_tensors()))
}

/// Reduces any tensor to a scalar with a fixed random weighting so that
/// every output coordinate contributes a distinct gradient.
fn weighted_sum<'a>(g: &mut Graph<'a>, x: Var, seed: u64) -> crate::Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&shape, &mut rng);
    let mask = w.into_data();
    let y = g.mul_mask(x, mask)?;
    Ok(g.sum(y))
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = vec![random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)];
    let r = grad_check(
        &params,
        |p| {
            eval(p, |g, v| {
                let c = g.matmul(v[0], v[1], false)?;
                weighted_sum(g, c, 9)
            })
        },
        GradCheckOptions { floor: 1e-12, ..opts() },
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-8, "{r:?}");
}

#[test]
fn matmul_transposed_rhs_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = vec![random(&[3, 4], &mut rng), random(&[5, 4], &mut rng)];
    let r = grad_check(
        &params,
        |p| {
            eval(p, |g, v| {
                let c = g.matmul(v[0], v[1], true)?;
                weighted_sum(g, c, 4)
            })
        },
        opts(),
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-8, "{r:?}");
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = vec![
        random(&[4, 6], &mut rng),
        random(&[6], &mut rng),
        random(&[6], &mut rng),
    ];
    let r = grad_check(
        &params,
        |p| {
            eval(p, |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
                weighted_sum(g, y, 5)
            })
        },
        opts(),
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-7, "{r:?}");
}

#[test]
fn layer_norm_constant_row_and_centering() {
    let x = Tensor::from_rows(&[vec![2.0; 5], vec![1.0, 2.0, 3.0, 4.0, 10.0]]).unwrap();
    let gain = Tensor::ones(&[5]);
    let bias = Tensor::new(&[5], vec![0.5, -0.5, 0.25, 0.0, 1.0]).unwrap();
    let zero = Tensor::zeros(&[5]);
    let mut g = Graph::new();
    let (xv, gv, bv, zv) = (
        g.constant(x),
        g.constant(gain),
        g.constant(bias.clone()),
        g.constant(zero),
    );
    let plain = g.layer_norm(xv, gv, zv, 1e-6).unwrap();
    assert!(g.value(plain).row(0).iter().all(|&v| v == 0.0));
    let shifted = g.layer_norm(xv, gv, bv, 1e-6).unwrap();
    let mean: f64 = g.value(shifted).row(1).iter().sum::<f64>() / 5.0;
    let bias_mean = bias.sum() / 5.0;
    assert!((mean - bias_mean).abs() < 1e-9);
}

#[test]
fn softmax_gradients_and_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = vec![random(&[3, 5], &mut rng)];
    let r = grad_check(
        &params,
        |p| {
            eval(p, |g, v| {
                let y = g.softmax_rows(v[0])?;
                weighted_sum(g, y, 6)
            })
        },
        opts(),
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-7, "{r:?}");

    let mut g = Graph::new();
    let u = g.constant(Tensor::filled(&[1, 4], 3.0));
    let s = g.softmax_rows(u).unwrap();
    assert!(g.value(s).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
}

#[test]
fn relu_scale_add_bias_gather_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = vec![
        random(&[6, 3], &mut rng),
        random(&[3], &mut rng),
        random(&[4, 3], &mut rng),
    ];
    let r = grad_check(
        &params,
        |p| {
            eval(p, |g, v| {
                let e = g.gather_rows(v[0], &[1, 4, 1, 5])?;
                let e = g.scale(e, 1.7);
                let h = g.add(e, v[2])?;
                let h = g.add_row_bias(h, v[1])?;
                let h = g.relu(h);
                weighted_sum(g, h, 7)
            })
        },
        opts(),
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-7, "{r:?}");
}

#[test]
fn attention_gradients_with_padding_and_causality() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (batch, tq, tk, d) = (2, 3, 4, 6);
    let params = vec![
        random(&[batch * tq, d], &mut rng),
        random(&[batch * tk, d], &mut rng),
        random(&[batch * tk, d], &mut rng),
    ];
    for causal in [false, true] {
        let spec = AttentionSpec {
            batch,
            q_len: tq,
            k_len: tk,
            heads: 2,
            key_lens: vec![4, 2],
            causal,
        };
        let r = grad_check(
            &params,
            |p| {
                eval(p, |g, v| {
                    let o = g.attention(v[0], v[1], v[2], spec.clone())?;
                    weighted_sum(g, o, 8)
                })
            },
            opts(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "causal={causal}: {r:?}");
    }
}

fn naive_smoothed_ce(logits: &[Vec<f64>], targets: &[usize], s: f64) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        let v = row.len();
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        for (j, x) in row.iter().enumerate() {
            let q = if j == t { 1.0 - s } else { s / (v - 1) as f64 };
            total -= q * (x.exp() / z).ln();
        }
    }
    total / logits.len() as f64
}

#[test]
fn cross_entropy_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rows: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let targets = [3, 0];
    let expected = naive_smoothed_ce(&rows, &targets, 0.1);
    let mut g = Graph::new();
    let l = g.constant(Tensor::from_rows(&rows).unwrap());
    let loss = g.cross_entropy(l, &targets, &[true, true], 0.1).unwrap();
    assert!((g.value(loss).data()[0] - expected).abs() < 1e-12);
}

#[test]
fn cross_entropy_limits_and_masking() {
    let mut g = Graph::new();
    let uniform = g.constant(Tensor::zeros(&[3, 7]));
    let loss = g.cross_entropy(uniform, &[1, 2, 3], &[true, true, true], 0.0).unwrap();
    assert!((g.value(loss).data()[0] - 7f64.ln()).abs() < 1e-12);

    let mut extreme = Tensor::filled(&[1, 4], -500.0);
    extreme.set(&[0, 2], 500.0);
    let e = g.constant(extreme);
    let loss = g.cross_entropy(e, &[2], &[true], 0.0).unwrap();
    assert!(g.value(loss).data()[0] < 1e-12);

    // masked rows do not contribute
    let rows = Tensor::from_rows(&[vec![0.0, 0.0], vec![5.0, -5.0]]).unwrap();
    let r = g.constant(rows);
    let loss = g.cross_entropy(r, &[0, 1], &[true, false], 0.0).unwrap();
    assert!((g.value(loss).data()[0] - 2f64.ln()).abs() < 1e-12);

    let bad = g.constant(Tensor::zeros(&[1, 3]));
    assert!(matches!(
        g.cross_entropy(bad, &[3], &[true], 0.0),
        Err(crate::Error::Range(_))
    ));
}

#[test]
fn cross_entropy_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = vec![random(&[4, 6], &mut rng)];
    let r = grad_check(
        &params,
        |p| {
            eval(p, |g, v| {
                g.cross_entropy(v[0], &[0, 5, 2, 2], &[true, true, false, true], 0.2)
            })
        },
        opts(),
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-7, "{r:?}");
}

#[test]
fn backward_of_sum_and_of_unrelated_parameter() {
    let w = Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
    let other = Tensor::ones(&[2]);
    let mut g = Graph::new();
    let wv = g.param("w", &w);
    let _ov = g.param("other", &other);
    let s = g.sum(wv);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get("w").unwrap(), &Tensor::ones(&[2, 3]));
    assert_eq!(grads.get("other").unwrap(), &Tensor::zeros(&[2]));
}

#[test]
fn backward_rejects_non_scalar() {
    let w = Tensor::ones(&[2, 2]);
    let mut g = Graph::new();
    let wv = g.param("w", &w);
    let y = g.scale(wv, 2.0);
    assert!(matches!(g.backward(y), Err(crate::Error::Contract(_))));
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random(&[3, 3], &mut rng);
    let b = random(&[3, 2], &mut rng);
    let grads_of = |which: u8| {
        let mut g = Graph::new();
        let av = g.param("a", &a);
        let bv = g.param("b", &b);
        let c = g.matmul(av, bv, false).unwrap();
        let l1 = weighted_sum(&mut g, c, 1).unwrap();
        let sm = g.softmax_rows(c).unwrap();
        let l2 = weighted_sum(&mut g, sm, 2).unwrap();
        let out = match which {
            1 => l1,
            2 => l2,
            _ => g.add(l1, l2).unwrap(),
        };
        g.backward(out).unwrap()
    };
    let (g1, g2, g12) = (grads_of(1), grads_of(2), grads_of(3));
    for name in ["a", "b"] {
        let mut sum = g1.get(name).unwrap().clone();
        sum.add_assign(g2.get(name).unwrap()).unwrap();
        assert!(sum.max_abs_diff(g12.get(name).unwrap()) < 1e-12);
    }
}

#[test]
fn grad_check_quadratic_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let w = random(&[10], &mut rng);
    let r = grad_check(
        &[w],
        |p| {
            let v: f64 = p[0].data().iter().map(|x| x * x).sum();
            Ok((v, vec![p[0].map(|x| 2.0 * x)]))
        },
        opts(),
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-9, "{r:?}");
    assert_eq!(r.coordinates_checked, 10);
}

#[test]
fn grad_check_detects_corrupted_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = random(&[10], &mut rng);
    let r = grad_check(
        &[w],
        |p| {
            let v: f64 = p[0].data().iter().map(|x| x * x * x).sum();
            // wrong: should be 3x²
            Ok((v, vec![p[0].map(|x| 2.0 * x * x)]))
        },
        opts(),
    )
    .unwrap();
    assert!(r.max_rel_error > 1e-2, "{r:?}");
}

#[test]
fn grad_check_samples_large_tensors() {
    let w = Tensor::ones(&[200]);
    let r = grad_check(&[w], |p| Ok((p[0].sum(), vec![Tensor::ones(&[200])])), opts()).unwrap();
    assert_eq!(r.coordinates_checked, 64);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        row in proptest::collection::vec(-30.0f64..30.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let n = row.len();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, n], row.clone()).unwrap());
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let xs = g.constant(Tensor::new(&[1, n], shifted).unwrap());
        let p = g.softmax_rows(x).unwrap();
        let ps = g.softmax_rows(xs).unwrap();
        let total: f64 = g.value(p).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(g.value(p).max_abs_diff(g.value(ps)) < 1e-12);
    }
}

#[test]
fn fresh_gemm_matches_accumulating_gemm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (m, k, n) in [(3, 5, 4), (1, 7, 1), (6, 0, 2), (0, 3, 2)] {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut want = vec![0.0; m * n];
            kernels::gemm(m, k, n, &a, ta, &b, tb, &mut want, true);
            assert_eq!(
                kernels::gemm_new(m, k, n, &a, ta, &b, tb),
                want,
                "{m}x{k}x{n} {ta} {tb}"
            );
        }
    }
}
