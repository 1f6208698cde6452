use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Central-difference check of `f` (a scalar-valued graph builder) at the
/// given inputs. Returns the worst relative error over all coordinates.
fn fd_check(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars).unwrap();
        g.scalar(out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars).unwrap();
    g.backward(out).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.len()]);
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    // Random projection so every output coordinate matters.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x).to_vec();
    let w = rand_tensor(&mut rng, &shape);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    g.sum(p)
}

#[test]
fn identity_matmul_is_noop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let mut g = Graph::new();
    let i3 = g.constant(Tensor::eye(3));
    let xv = g.constant(x.clone());
    let y = g.matmul(i3, xv).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn zero_matmul_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[2, 3]));
    let xv = g.constant(x);
    let y = g.matmul(z, xv).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut g: Graph<f64> = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(TensorError::Dimension { .. })));
}

#[test]
fn matmul_sum_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[4, 3]);
    let b = rand_tensor(&mut rng, &[3, 2]);
    let err = fd_check(&[a, b], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        g.sum(y)
    });
    assert!(err <= 1e-4, "rel err {err}");
}

#[test]
fn matmul_t_and_transpose_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&mut rng, &[3, 5]);
    let b = rand_tensor(&mut rng, &[4, 5]);
    let err = fd_check(&[a.clone(), b.clone()], |g, v| {
        let y = g.matmul_t(v[0], v[1])?;
        weighted_sum(g, y, 9)
    });
    assert!(err <= 1e-4, "rel err {err}");
    let err = fd_check(&[a], |g, v| {
        let y = g.transpose(v[0])?;
        weighted_sum(g, y, 10)
    });
    assert!(err <= 1e-4);
}

#[test]
fn softmax_zero_row_is_uniform_and_shift_invariant() {
    let mut g: Graph<f64> = Graph::new();
    let z = g.constant(Tensor::zeros(&[1, 5]));
    let s = g.softmax(z, 1).unwrap();
    for &p in g.value(s).data() {
        assert!((p - 0.2).abs() < 1e-15);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2, 5]);
    let shifted = Tensor::new(vec![2, 5], x.data().iter().map(|v| v + 123.25).collect()).unwrap();
    let a = g.constant(x);
    let b = g.constant(shifted);
    let sa = g.softmax(a, 1).unwrap();
    let sb = g.softmax(b, 1).unwrap();
    for (p, q) in g.value(sa).data().iter().zip(g.value(sb).data()) {
        assert!((p - q).abs() <= 1e-12);
    }
}

#[test]
fn softmax_gradient_both_axes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[2, 5]);
    for axis in 0..2 {
        let err = fd_check(&[x.clone()], |g, v| {
            let y = g.softmax(v[0], axis)?;
            weighted_sum(g, y, 11)
        });
        assert!(err <= 1e-4, "axis {axis}: {err}");
    }
}

#[test]
fn causal_softmax_masks_future_and_differentiates() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[4, 4]);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let s = g.causal_softmax(v).unwrap();
    let out = g.value(s);
    for i in 0..4 {
        let row = out.row(i);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row[i + 1..].iter().all(|&p| p == 0.0));
    }
    let err = fd_check(&[x], |g, v| {
        let y = g.causal_softmax(v[0])?;
        weighted_sum(g, y, 12)
    });
    assert!(err <= 1e-4);
}

#[test]
fn cross_entropy_fixtures() {
    // Confident logits on the target give ~zero loss.
    let mut logits = vec![0.0; 2 * 4];
    logits[1] = 20.0;
    logits[4 + 3] = 20.0;
    let mut g = Graph::new();
    let l = g.constant(Tensor::matrix(2, 4, logits).unwrap());
    let loss = g.cross_entropy(l, &[1, 3], &[true, true], Reduction::Mean).unwrap();
    assert!(g.scalar(loss) <= 1e-8);

    // Uniform logits give ln V.
    let u = g.constant(Tensor::zeros(&[3, 7]));
    let loss = g.cross_entropy(u, &[0, 4, 6], &[true, true, true], Reduction::Mean).unwrap();
    assert!((g.scalar(loss) - 7f64.ln()).abs() < 1e-12);

    let bad = g.cross_entropy(u, &[0, 7, 6], &[true, true, true], Reduction::Mean);
    assert!(matches!(bad, Err(TensorError::Index { index: 7, .. })));
}

#[test]
fn cross_entropy_matches_direct_log_sum_exp() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[3, 7]);
    let targets = [2usize, 6, 0];
    let mask = [true, false, true];
    // Independent oracle: explicit exp/ln summation per unmasked row.
    let mut expected = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if !mask[i] {
            continue;
        }
        let row = x.row(i);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        expected += -(row[t].exp() / z).ln();
    }
    expected /= 2.0;
    let mut g = Graph::new();
    let l = g.constant(x.clone());
    let loss = g.cross_entropy(l, &targets, &mask, Reduction::Mean).unwrap();
    assert!((g.scalar(loss) - expected).abs() < 1e-12);
    let err = fd_check(&[x], |g, v| g.cross_entropy(v[0], &targets, &mask, Reduction::Sum));
    assert!(err <= 1e-4);
}

#[test]
fn reparameterize_fixtures() {
    let mu = Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
    let lv = Tensor::matrix(1, 3, vec![0.3, -0.2, 1.0]).unwrap();
    let mut g = Graph::new();
    let m = g.constant(mu.clone());
    let l = g.constant(lv.clone());
    let z = g.reparameterize(m, l, &[0.0; 3]).unwrap();
    assert_eq!(g.value(z).data(), mu.data());

    let zero = g.constant(Tensor::zeros(&[1, 3]));
    let noise = [0.7, -0.1, 1.3];
    let z = g.reparameterize(zero, zero, &noise).unwrap();
    assert_eq!(g.value(z).data(), &noise);

    assert!(matches!(
        g.reparameterize(m, l, &[0.0; 2]),
        Err(TensorError::Dimension { .. })
    ));

    let err = fd_check(&[mu, lv], |g, v| {
        let z = g.reparameterize(v[0], v[1], &noise)?;
        weighted_sum(g, z, 13)
    });
    assert!(err <= 1e-4);
}

#[test]
fn reparameterize_monte_carlo_mean() {
    let k = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mu: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let lv: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut g = Graph::no_grad();
    let m = g.constant(Tensor::matrix(1, k, mu.clone()).unwrap());
    let l = g.constant(Tensor::matrix(1, k, lv).unwrap());
    let draws = 100_000;
    let mut acc = vec![0.0; k];
    let normal = rand_distr::StandardNormal;
    for _ in 0..draws {
        let noise: Vec<f64> = (0..k).map(|_| rng.sample(normal)).collect();
        let mut g2 = Graph::no_grad();
        let m2 = g2.constant(g.value(m).clone());
        let l2 = g2.constant(g.value(l).clone());
        let z = g2.reparameterize(m2, l2, &noise).unwrap();
        for (a, &v) in acc.iter_mut().zip(g2.value(z).data()) {
            *a += v;
        }
    }
    for (a, m) in acc.iter().zip(&mu) {
        assert!((a / draws as f64 - m).abs() < 0.02);
    }
}

#[test]
fn reparameterize_does_not_touch_noise() {
    let mut g = Graph::new();
    let m = g.leaf(Tensor::zeros(&[1, 2]), true);
    let l = g.leaf(Tensor::zeros(&[1, 2]), true);
    let z = g.reparameterize(m, l, &[1.0, 2.0]).unwrap();
    let s = g.sum(z).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(m).unwrap(), &[1.0, 1.0]);
    assert_eq!(g.grad(l).unwrap(), &[0.5, 1.0]);
}

#[test]
fn backward_analytic_cases_and_contract() {
    let x = Tensor::vector(vec![1.5, -2.0, 0.25]).unwrap();
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let s = g.sum(v).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(v).unwrap(), &[1.0, 1.0, 1.0]);
    assert!(matches!(g.backward(s), Err(TensorError::Contract(_))));
    g.reset_grads();
    g.backward(s).unwrap();

    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let sq = g.mul(v, v).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    let expected: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.grad(v).unwrap(), expected.as_slice());

    let mut g = Graph::new();
    let v = g.leaf(x, true);
    assert!(matches!(g.backward(v), Err(TensorError::Contract(_))));
}

#[test]
fn non_finite_values_are_errors() {
    let mut g = Graph::new();
    let v = g.constant(Tensor::vector(vec![-1.0, 1.0]).unwrap());
    assert!(matches!(g.log(v), Err(TensorError::NonFinite { .. })));
    assert!(Tensor::vector(vec![f64::NAN]).is_err());
}

#[test]
fn elementwise_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let a = rand_tensor(&mut rng, &[2, 3]);
    let b = rand_tensor(&mut rng, &[2, 3]);
    let pos = Tensor::new(vec![2, 3], a.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    type Builder = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;
    let cases: Vec<(&str, Vec<Tensor<f64>>, Builder)> = vec![
        ("add", vec![a.clone(), b.clone()], |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, 1)
        }),
        ("sub", vec![a.clone(), b.clone()], |g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted_sum(g, y, 2)
        }),
        ("mul", vec![a.clone(), b.clone()], |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, 3)
        }),
        ("exp", vec![a.clone()], |g, v| {
            let y = g.exp(v[0])?;
            weighted_sum(g, y, 4)
        }),
        ("log", vec![pos.clone()], |g, v| {
            let y = g.log(v[0])?;
            weighted_sum(g, y, 5)
        }),
        ("tanh", vec![a.clone()], |g, v| {
            let y = g.tanh(v[0])?;
            weighted_sum(g, y, 6)
        }),
        ("sigmoid", vec![a.clone()], |g, v| {
            let y = g.sigmoid(v[0])?;
            weighted_sum(g, y, 7)
        }),
        ("gelu", vec![a.clone()], |g, v| {
            let y = g.gelu(v[0])?;
            weighted_sum(g, y, 8)
        }),
        ("relu", vec![pos.clone()], |g, v| {
            let y = g.relu(v[0])?;
            weighted_sum(g, y, 9)
        }),
        ("affine", vec![a.clone()], |g, v| {
            let y = g.affine(v[0], -1.7, 0.3)?;
            weighted_sum(g, y, 10)
        }),
        ("clamp", vec![a.clone()], |g, v| {
            let y = g.clamp(v[0], -2.0, 2.0)?;
            weighted_sum(g, y, 11)
        }),
        ("mean", vec![a.clone()], |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.mean(y)
        }),
        ("log_softmax", vec![a.clone()], |g, v| {
            let y = g.log_softmax_rows(v[0])?;
            weighted_sum(g, y, 12)
        }),
        ("pick", vec![a.clone()], |g, v| {
            let y = g.pick(v[0], &[(0, 1), (1, 2), (0, 1)])?;
            weighted_sum(g, y, 13)
        }),
        ("reshape", vec![a.clone()], |g, v| {
            let y = g.reshape(v[0], &[3, 2])?;
            weighted_sum(g, y, 14)
        }),
    ];
    for (name, inputs, f) in cases {
        let err = fd_check(&inputs, f);
        assert!(err <= 1e-4, "{name}: rel err {err}");
    }
}

#[test]
fn structural_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let a = rand_tensor(&mut rng, &[2, 3]);
    let b = rand_tensor(&mut rng, &[1, 3]);
    let c = rand_tensor(&mut rng, &[2, 2]);
    let s = rand_tensor(&mut rng, &[1]);
    let err = fd_check(&[a.clone(), b.clone()], |g, v| {
        let y = g.concat_rows(&[v[0], v[1], v[0]])?;
        weighted_sum(g, y, 1)
    });
    assert!(err <= 1e-4);
    let err = fd_check(&[a.clone(), c], |g, v| {
        let y = g.concat_cols(&[v[0], v[1]])?;
        weighted_sum(g, y, 2)
    });
    assert!(err <= 1e-4);
    let err = fd_check(&[a.clone()], |g, v| {
        let r = g.slice_rows(v[0], 1, 1)?;
        let c = g.slice_cols(v[0], 1, 2)?;
        let x = weighted_sum(g, r, 3)?;
        let y = weighted_sum(g, c, 4)?;
        g.add(x, y)
    });
    assert!(err <= 1e-4);
    let err = fd_check(&[a.clone(), b], |g, v| {
        let y = g.add_row(v[0], v[1])?;
        weighted_sum(g, y, 5)
    });
    assert!(err <= 1e-4);
    let err = fd_check(&[a, s], |g, v| {
        let y = g.scale_by(v[0], v[1])?;
        weighted_sum(g, y, 6)
    });
    assert!(err <= 1e-4);
}

#[test]
fn gather_scatter_adds_repeated_ids() {
    let table = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let mut g = Graph::new();
    let t = g.leaf(table.clone(), true);
    let rows = g.gather_rows(t, &[2, 0, 2]).unwrap();
    assert_eq!(g.value(rows).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    let s = g.sum(rows).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(t).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    assert!(matches!(g.gather_rows(t, &[3]), Err(TensorError::Index { .. })));
    let err = fd_check(&[table], |g, v| {
        let y = g.gather_rows(v[0], &[1, 1, 0])?;
        weighted_sum(g, y, 7)
    });
    assert!(err <= 1e-4);
}

#[test]
fn layer_norm_statistics_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_tensor(&mut rng, &[3, 6]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let ones = g.constant(Tensor::filled(&[6], 1.0));
    let zeros = g.constant(Tensor::zeros(&[6]));
    let y = g.layer_norm(xv, ones, zeros, 1e-12).unwrap();
    for i in 0..3 {
        let row = g.value(y).row(i);
        let mean = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() <= 1e-10);
        assert!((var - 1.0).abs() <= 1e-8);
    }
    let gamma = rand_tensor(&mut rng, &[6]);
    let beta = rand_tensor(&mut rng, &[6]);
    let err = fd_check(&[x, gamma, beta], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-9)?;
        weighted_sum(g, y, 8)
    });
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn f32_graphs_work_too() {
    let mut g: Graph<f32> = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0f32, 2.0]).unwrap(), true);
    let y = g.mul(x, x).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0f32, 4.0]);
}

#[test]
fn replay_is_bitwise_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let a = rand_tensor(&mut rng, &[4, 5]);
        let b = rand_tensor(&mut rng, &[5, 3]);
        let mut g = Graph::new();
        let (av, bv) = (g.leaf(a, true), g.leaf(b, true));
        let y = g.matmul(av, bv).unwrap();
        let y = g.softmax(y, 1).unwrap();
        let y = g.log(y).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        (g.scalar(s).to_bits(), g.grad(av).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_gradients_on_random_shapes(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[m, k]);
        let b = rand_tensor(&mut rng, &[k, n]);
        let err = fd_check(&[a, b], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.tanh(y)?;
            weighted_sum(g, y, seed)
        });
        prop_assert!(err <= 1e-4);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..4, cols in 1usize..9, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-30.0..30.0)).collect()).unwrap();
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax(v, 1).unwrap();
        for i in 0..rows {
            let row = g.value(s).row(i);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
