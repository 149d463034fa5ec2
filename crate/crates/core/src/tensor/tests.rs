use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Maclaurin series for erf, independent of libm.
fn erf_series(x: f64) -> f64 {
    let mut sum = 0.0;
    let mut term = x;
    for n in 0..60 {
        sum += term / (2 * n + 1) as f64;
        term *= -x * x / (n + 1) as f64;
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

type Build = dyn Fn(&mut Graph<'static, f64>, &[Var]) -> Result<Var, TensorError>;

/// Compare backward against central differences (step 1e-5) for every input.
/// The op output is contracted with fixed random weights to form a scalar.
fn grad_check(inputs: &[(Vec<usize>, Vec<f64>)], build: &Build) -> f64 {
    let weights_for = |len: usize| -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        random(&mut rng, len)
    };
    let eval = |vals: &[Vec<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> =
            inputs.iter().zip(vals).map(|((s, _), v)| g.param(v.clone(), s).unwrap()).collect();
        let out = build(&mut g, &vars).unwrap();
        let w = weights_for(g.value(out).len());
        g.value(out).iter().zip(&w).map(|(a, b)| a * b).sum()
    };
    let vals: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(s, v)| g.param(v.clone(), s).unwrap()).collect();
    let out = build(&mut g, &vars).unwrap();
    let shape = g.shape(out).to_vec();
    let w = g.input(weights_for(g.value(out).len()), &shape).unwrap();
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zero(v, vals[i].len()).into_owned();
        let mut numeric = vec![0.0; vals[i].len()];
        for j in 0..vals[i].len() {
            let mut plus = vals.clone();
            plus[i][j] += h;
            let mut minus = vals.clone();
            minus[i][j] -= h;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        let scale = analytic.iter().chain(&numeric).map(|x| x.abs()).fold(0.0, f64::max).max(1e-12);
        worst = worst.max(diff / scale);
    }
    worst
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let eye = g.input(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    let a = g.input(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let b = g.input(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]).unwrap();
    let z = g.input(vec![0.0; 4], &[2, 2]).unwrap();
    let ia = g.matmul(eye, a).unwrap();
    assert_eq!(g.value(ia), &[1.0, 2.0, 3.0, 4.0]);
    let ab = g.matmul(a, b).unwrap();
    let oracle = triple_loop(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
    assert_eq!(oracle, vec![19.0, 22.0, 43.0, 50.0]);
    assert_eq!(g.value(ab), &oracle[..]);
    let za = g.matmul(z, a).unwrap();
    assert_eq!(g.value(za), &[0.0; 4]);
}

#[test]
fn matmul_matches_triple_loop_on_rectangles() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (m, k, n) = (5, 7, 3);
    let (av, bv) = (random(&mut rng, m * k), random(&mut rng, k * n));
    let mut g = Graph::<f64>::new();
    let a = g.input(av.clone(), &[m, k]).unwrap();
    let b = g.input(bv.clone(), &[k, n]).unwrap();
    let c = g.matmul(a, b).unwrap();
    for (x, y) in g.value(c).iter().zip(triple_loop(&av, &bv, m, k, n)) {
        assert_abs_diff_eq!(*x, y, epsilon = 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.input(vec![0.0; 6], &[2, 3]).unwrap();
    let b = g.input(vec![0.0; 8], &[4, 2]).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn concat_examples() {
    let mut g = Graph::<f32>::new();
    let d = g.input(vec![1.0; 768], &[1, 768]).unwrap();
    let s = g.input(vec![2.0; 768], &[1, 768]).unwrap();
    let y = g.concat(&[d, s], 1).unwrap();
    assert_eq!(g.shape(y), &[1, 1536]);
    assert_eq!(g.value(y)[767], 1.0);
    assert_eq!(g.value(y)[768], 2.0);

    let r1 = g.input(vec![0.5; 128], &[1, 128]).unwrap();
    let c = g.concat(&[r1, d, s], 1).unwrap();
    assert_eq!(g.shape(c), &[1, 2 * 768 + 128]);

    let single = g.concat(&[r1], 1).unwrap();
    assert_eq!(single, r1);
}

#[test]
fn concat_errors() {
    let mut g = Graph::<f32>::new();
    assert!(matches!(g.concat(&[], 0), Err(TensorError::Empty { .. })));
    let a = g.input(vec![0.0; 6], &[2, 3]).unwrap();
    let b = g.input(vec![0.0; 6], &[3, 2]).unwrap();
    assert!(matches!(g.concat(&[a, b], 1), Err(TensorError::Shape { .. })));
    let rows = g.concat(&[a, a], 0).unwrap();
    assert_eq!(g.shape(rows), &[4, 3]);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let ones = g.input(vec![1.0; 3], &[3]).unwrap();
    let zeros = g.input(vec![0.0; 3], &[3]).unwrap();
    let constant = g.input(vec![3.0; 3], &[1, 3]).unwrap();
    let y = g.layer_norm(constant, ones, zeros, 1e-6).unwrap();
    assert_eq!(g.value(y), &[0.0, 0.0, 0.0]);

    let x = g.input(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
    let y = g.layer_norm(x, ones, zeros, 1e-6).unwrap();
    // mean 2, biased variance 2/3
    let inv = 1.0 / (2.0f64 / 3.0 + 1e-6).sqrt();
    let expected = [-inv, 0.0, inv];
    for (a, b) in g.value(y).iter().zip(expected) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
    }
    assert_abs_diff_eq!(g.value(y)[2], 1.224744, epsilon = 1e-6);

    let bias = g.input(vec![1.0; 3], &[3]).unwrap();
    let y = g.layer_norm(x, zeros, bias, 1e-6).unwrap();
    assert_eq!(g.value(y), &[1.0, 1.0, 1.0]);
}

#[test]
fn layer_norm_rejects_bad_eps() {
    let mut g = Graph::<f64>::new();
    let x = g.input(vec![1.0, 2.0], &[1, 2]).unwrap();
    let one = g.input(vec![1.0; 2], &[2]).unwrap();
    assert!(matches!(g.layer_norm(x, one, one, 0.0), Err(TensorError::Config(_))));
}

#[test]
fn activation_examples() {
    assert_eq!(Activation::Gelu.apply(0.0f64), 0.0);
    let phi1 = 0.5 * (1.0 + erf_series(1.0 / std::f64::consts::SQRT_2));
    assert_abs_diff_eq!(Activation::Gelu.apply(1.0f64), phi1, epsilon = 1e-12);
    assert_abs_diff_eq!(Activation::Gelu.apply(1.0f64), 0.8413447, epsilon = 1e-7);
    assert_eq!(Activation::Relu.apply(-2.0f64), 0.0);
    assert_eq!(Activation::Silu.apply(0.0f64), 0.0);
    for x in [-3.0, -0.7, 0.2, 2.5] {
        let exact = x * 0.5 * (1.0 + erf_series(x / std::f64::consts::SQRT_2));
        assert_abs_diff_eq!(Activation::Gelu.apply(x), exact, epsilon = 1e-12);
    }
    assert!("tanh".parse::<Activation>().is_err());
    assert_eq!("SiLU".parse::<Activation>().unwrap(), Activation::Silu);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.input(vec![0.0, 0.0], &[1, 2]).unwrap();
    let y = g.softmax_masked(x, None).unwrap();
    assert_eq!(g.value(y), &[0.5, 0.5]);

    let x = g.input(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
    let y = g.softmax_masked(x, Some(&[true, true, true])).unwrap();
    let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (a, v) in g.value(y).iter().zip([1.0f64, 2.0, 3.0]) {
        assert_abs_diff_eq!(*a, v.exp() / denom, epsilon = 1e-12);
    }
    assert_abs_diff_eq!(g.value(y)[0], 0.090031, epsilon = 1e-6);
    assert_abs_diff_eq!(g.value(y)[2], 0.665241, epsilon = 1e-6);

    let x = g.input(vec![5.0, 9.0], &[1, 2]).unwrap();
    let y = g.softmax_masked(x, Some(&[true, false])).unwrap();
    assert_eq!(g.value(y), &[1.0, 0.0]);
}

#[test]
fn softmax_fully_masked_row_is_an_error() {
    let mut g = Graph::<f32>::new();
    let x = g.input(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let err = g.softmax_masked(x, Some(&[true, true, false, false])).unwrap_err();
    assert_eq!(err, TensorError::FullyMasked { row: 1 });
}

#[test]
fn dropout_identity_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::<f32>::new();
    let x = g.input(vec![1.0, -2.0, 3.0], &[3]).unwrap();
    assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(g.dropout(x, 0.5, false, &mut rng).unwrap(), x);
    assert!(matches!(g.dropout(x, 1.0, true, &mut rng), Err(TensorError::Config(_))));
}

#[test]
fn dropout_keeps_eighty_percent_and_rescales() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::<f32>::new();
    let n = 100_000;
    let x = g.input(vec![1.0; n], &[n]).unwrap();
    let y = g.dropout(x, 0.2, true, &mut rng).unwrap();
    let kept = g.value(y).iter().filter(|&&v| v != 0.0).count();
    assert!(g.value(y).iter().all(|&v| v == 0.0 || v == 1.25));
    let frac = kept as f64 / n as f64;
    assert!((frac - 0.8).abs() <= 0.01, "kept fraction {frac}");
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let uniform = g.input(vec![0.3; 5], &[1, 5]).unwrap();
    let l = g.cross_entropy(uniform, &[3]).unwrap();
    assert_abs_diff_eq!(g.scalar(l), 5.0f64.ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(g.scalar(l), 1.609438, epsilon = 1e-6);

    let sharp = g.input(vec![0.0, 0.0, 1e6, 0.0, 0.0], &[1, 5]).unwrap();
    let l = g.cross_entropy(sharp, &[2]).unwrap();
    assert_abs_diff_eq!(g.scalar(l), 0.0, epsilon = 1e-12);

    let x = g.input(vec![1.0, 0.0, 0.0, 0.0, 0.0], &[1, 5]).unwrap();
    let l = g.cross_entropy(x, &[0]).unwrap();
    let oracle = -(1.0f64.exp() / (1.0f64.exp() + 4.0)).ln();
    assert_abs_diff_eq!(g.scalar(l), oracle, epsilon = 1e-12);
    assert_abs_diff_eq!(g.scalar(l), 0.904832, epsilon = 1e-6);

    assert!(matches!(g.cross_entropy(x, &[5]), Err(TensorError::LabelOutOfRange { label: 5, classes: 5 })));
}

#[test]
fn backward_of_sum_of_squares_is_twice_x() {
    let mut g = Graph::<f64>::new();
    let x = g.param(vec![1.0, -2.0, 0.5], &[3]).unwrap();
    let unused = g.param(vec![4.0, 4.0], &[2]).unwrap();
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0, 1.0]);
    assert!(grads.get(unused).is_none());
    assert_eq!(&*grads.get_or_zero(unused, 2), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f64>::new();
    let x = g.param(vec![1.0, 2.0], &[2]).unwrap();
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::<f32>::new();
        let a = g.param((0..12).map(|i| (i as f32).sin()).collect::<Vec<_>>(), &[3, 4]).unwrap();
        let b = g.param((0..8).map(|i| (i as f32).cos()).collect::<Vec<_>>(), &[4, 2]).unwrap();
        let c = g.matmul(a, b).unwrap();
        let c = g.dropout(c, 0.2, true, &mut rng).unwrap();
        let c = g.gelu(c).unwrap();
        let l = g.cross_entropy(c, &[0, 1, 1]).unwrap();
        let grads = g.backward(l).unwrap();
        (grads.get(a).unwrap().to_vec(), grads.get(b).unwrap().to_vec())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert_eq!(a1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), a2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(b1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn shared_node_gradients_accumulate() {
    let mut g = Graph::<f64>::new();
    let x = g.param(vec![3.0], &[1]).unwrap();
    let y = g.add(x, x).unwrap();
    let z = g.mul(y, x).unwrap(); // 2x²
    let loss = g.sum(z).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[12.0]);
}

fn rand_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    (shape.to_vec(), random(rng, shape.iter().product()))
}

#[test]
fn gradient_check_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tol = 1e-6;
    let mut check = |name: &str, shapes: &[&[usize]], build: &Build| {
        let inputs: Vec<_> = shapes.iter().map(|s| rand_input(&mut rng, s)).collect();
        let err = grad_check(&inputs, build);
        assert!(err < tol, "{name}: relative error {err:e}");
    };
    check("matmul", &[&[3, 4], &[4, 2]], &|g, v| g.matmul(v[0], v[1]));
    check("matmul_t", &[&[3, 4], &[5, 4]], &|g, v| g.matmul_t(v[0], v[1]));
    check("add", &[&[2, 3], &[2, 3]], &|g, v| g.add(v[0], v[1]));
    check("sub", &[&[2, 3], &[2, 3]], &|g, v| g.sub(v[0], v[1]));
    check("mul", &[&[2, 3], &[2, 3]], &|g, v| g.mul(v[0], v[1]));
    check("add_bias", &[&[4, 3], &[3]], &|g, v| g.add_bias(v[0], v[1]));
    check("scale", &[&[4]], &|g, v| g.scale(v[0], -1.7));
    check("concat0", &[&[2, 3], &[1, 3]], &|g, v| g.concat(&[v[0], v[1]], 0));
    check("concat1", &[&[2, 3], &[2, 2], &[2, 1]], &|g, v| g.concat(&[v[0], v[1], v[2]], 1));
    check("slice_cols", &[&[3, 5]], &|g, v| g.slice_cols(v[0], 1, 3));
    check("select_row", &[&[3, 4]], &|g, v| g.select_row(v[0], 2));
    check("reshape", &[&[2, 6]], &|g, v| g.reshape(v[0], &[3, 4]));
    check("mean_rows", &[&[5, 3]], &|g, v| g.mean_rows(v[0], 3));
    check("mean_rows_masked", &[&[4, 3]], &|g, v| g.mean_rows_masked(v[0], &[true, false, true, true]));
    check("sum", &[&[3, 2]], &|g, v| g.sum(v[0]));
    check("layer_norm", &[&[3, 6], &[6], &[6]], &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-6));
    check("gelu", &[&[3, 4]], &|g, v| g.activation(v[0], Activation::Gelu));
    check("silu", &[&[3, 4]], &|g, v| g.activation(v[0], Activation::Silu));
    check("relu", &[&[3, 4]], &|g, v| g.activation(v[0], Activation::Relu));
    check("sigmoid", &[&[3, 4]], &|g, v| g.sigmoid(v[0]));
    check("tanh", &[&[3, 4]], &|g, v| g.tanh(v[0]));
    check("softmax", &[&[3, 4]], &|g, v| g.softmax_masked(v[0], Some(&[true, false, true, true])));
    check("dropout", &[&[3, 4]], &|g, v| {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        g.dropout(v[0], 0.3, true, &mut r)
    });
    check("cross_entropy", &[&[3, 5]], &|g, v| g.cross_entropy(v[0], &[0, 4, 2]));
}

#[test]
fn leaf_rejects_inconsistent_shape() {
    let mut g = Graph::<f32>::new();
    assert!(matches!(g.input(vec![0.0; 5], &[2, 3]), Err(TensorError::ShapeData { .. })));
    assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
}

#[cfg(debug_assertions)]
#[test]
fn non_finite_outputs_are_detected_in_debug_builds() {
    let mut g = Graph::<f32>::new();
    let x = g.input(vec![f32::MAX, f32::MAX], &[2]).unwrap();
    assert!(matches!(g.add(x, x), Err(TensorError::NonFinite { op: "add" })));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        vals in prop::collection::vec(-30.0f64..30.0, 12),
        mask in prop::collection::vec(any::<bool>(), 4),
    ) {
        let mut mask = mask;
        mask[0] = true;
        let mut g = Graph::<f64>::new();
        let x = g.input(vals, &[3, 4]).unwrap();
        let y = g.softmax_masked(x, Some(&mask)).unwrap();
        for row in g.value(y).chunks(4) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            for (v, &m) in row.iter().zip(&mask) {
                if m { prop_assert!(*v > 0.0); } else { prop_assert_eq!(*v, 0.0); }
            }
        }
    }

    #[test]
    fn layer_norm_rows_have_zero_mean(vals in prop::collection::vec(-100.0f64..100.0, 16)) {
        let mut g = Graph::<f64>::new();
        let x = g.input(vals, &[2, 8]).unwrap();
        let one = g.input(vec![1.0; 8], &[8]).unwrap();
        let zero = g.input(vec![0.0; 8], &[8]).unwrap();
        let y = g.layer_norm(x, one, zero, 1e-6).unwrap();
        for row in g.value(y).chunks(8) {
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-6);
        }
    }
}
