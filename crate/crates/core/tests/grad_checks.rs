//! Central-difference oracle checks for every differentiable tape op,
//! f64 mode, h = 1e-5, max relative error < 1e-4.

use plotforge_core::rng::Prng;
use plotforge_core::tensor::{grad_check, CorefTerm, RowSpan, Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], rng: &mut Prng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Uniform magnitude in [0.2, 1.2] with random sign; keeps ReLU and max-pool
/// inputs away from nondifferentiable points.
fn rand_tensor_off_zero(shape: &[usize], rng: &mut Prng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
            sign * (0.2 + rng.next_f64())
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduce to a scalar through fixed non-uniform weights so the upstream
/// gradient exercises every coordinate differently.
fn weighted_sum(tape: &mut Tape<f64>, x: Var) -> Var {
    let n = tape.value(x).numel();
    let weights: Vec<f64> = (0..n).map(|i| 0.3 + 0.07 * i as f64).collect();
    let w = tape.constant(Tensor::new(tape.value(x).shape().to_vec(), weights).unwrap());
    let prod = tape.mul(x, w).unwrap();
    tape.sum(prod)
}

#[test]
fn linear_function_is_exact() {
    let mut rng = Prng::new(1);
    let x = rand_tensor(&[4, 3], &mut rng);
    let err = grad_check(
        |tape, vars| {
            let s = tape.scale(vars[0], 2.5);
            Ok(tape.sum(s))
        },
        &[x],
        H,
    )
    .unwrap();
    assert!(err < 1e-9, "linear grad check error {err}");
}

#[test]
fn matmul_sum_matches_finite_differences() {
    let mut rng = Prng::new(2);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[4, 2], &mut rng);
    let err = grad_check(
        |tape, vars| {
            let c = tape.matmul(vars[0], vars[1])?;
            Ok(weighted_sum(tape, c))
        },
        &[a, b],
        H,
    )
    .unwrap();
    assert!(err < TOL, "matmul grad check error {err}");
}

#[test]
fn batched_matmul_with_shared_rhs() {
    let mut rng = Prng::new(3);
    let a = rand_tensor(&[2, 3, 4], &mut rng);
    let b = rand_tensor(&[4, 3], &mut rng);
    let err = grad_check(
        |tape, vars| {
            let c = tape.matmul(vars[0], vars[1])?;
            Ok(weighted_sum(tape, c))
        },
        &[a, b],
        H,
    )
    .unwrap();
    assert!(err < TOL, "batched matmul grad check error {err}");
}

#[test]
fn batched_matmul_transpose_b() {
    let mut rng = Prng::new(4);
    let a = rand_tensor(&[2, 3, 4], &mut rng);
    let b = rand_tensor(&[2, 5, 4], &mut rng);
    let err = grad_check(
        |tape, vars| {
            let c = tape.matmul_nt(vars[0], vars[1])?;
            Ok(weighted_sum(tape, c))
        },
        &[a, b],
        H,
    )
    .unwrap();
    assert!(err < TOL, "matmul_nt grad check error {err}");
}

#[test]
fn add_mul_scale_bias() {
    let mut rng = Prng::new(5);
    let x = rand_tensor(&[2, 3], &mut rng);
    let y = rand_tensor(&[2, 3], &mut rng);
    let b = rand_tensor(&[3], &mut rng);
    let err = grad_check(
        |tape, vars| {
            let s = tape.add(vars[0], vars[1])?;
            let m = tape.mul(s, vars[0])?;
            let sc = tape.scale(m, 0.7);
            let wb = tape.add_bias(sc, vars[2])?;
            Ok(weighted_sum(tape, wb))
        },
        &[x, y, b],
        H,
    )
    .unwrap();
    assert!(err < TOL, "elementwise chain grad check error {err}");
}

#[test]
fn relu_away_from_zero() {
    let mut rng = Prng::new(6);
    let x = rand_tensor_off_zero(&[3, 5], &mut rng);
    let err = grad_check(
        |tape, vars| {
            let y = tape.relu(vars[0]);
            Ok(weighted_sum(tape, y))
        },
        &[x],
        H,
    )
    .unwrap();
    assert!(err < TOL, "relu grad check error {err}");
}

#[test]
fn tanh_matches_finite_differences() {
    let mut rng = Prng::new(7);
    let x = rand_tensor(&[4, 4], &mut rng);
    let err = grad_check(
        |tape, vars| {
            let y = tape.tanh(vars[0]);
            Ok(weighted_sum(tape, y))
        },
        &[x],
        H,
    )
    .unwrap();
    assert!(err < TOL, "tanh grad check error {err}");
}

#[test]
fn softmax_jacobian_vector_product() {
    let mut rng = Prng::new(8);
    let x = rand_tensor(&[3, 6], &mut rng);
    let err = grad_check(
        |tape, vars| {
            let y = tape.softmax(vars[0])?;
            Ok(weighted_sum(tape, y))
        },
        &[x],
        H,
    )
    .unwrap();
    assert!(err < TOL, "softmax grad check error {err}");
}

#[test]
fn causal_softmax_matches_finite_differences() {
    let mut rng = Prng::new(9);
    let x = rand_tensor(&[2, 4, 4], &mut rng);
    let err = grad_check(
        |tape, vars| {
            let y = tape.causal_softmax(vars[0])?;
            Ok(weighted_sum(tape, y))
        },
        &[x],
        H,
    )
    .unwrap();
    assert!(err < TOL, "causal softmax grad check error {err}");
}

#[test]
fn layer_norm_matches_finite_differences() {
    let mut rng = Prng::new(10);
    let x = rand_tensor(&[3, 5], &mut rng);
    let gamma = rand_tensor_off_zero(&[5], &mut rng);
    let beta = rand_tensor(&[5], &mut rng);
    let err = grad_check(
        |tape, vars| {
            let y = tape.layer_norm(vars[0], vars[1], vars[2], 1e-5)?;
            Ok(weighted_sum(tape, y))
        },
        &[x, gamma, beta],
        H,
    )
    .unwrap();
    assert!(err < TOL, "layer norm grad check error {err}");
}

#[test]
fn embedding_scatter_gradient() {
    let mut rng = Prng::new(11);
    let table = rand_tensor(&[5, 3], &mut rng);
    let ids = [4usize, 0, 4, 2];
    let err = grad_check(
        |tape, vars| {
            let y = tape.embedding(vars[0], &ids, &[4])?;
            Ok(weighted_sum(tape, y))
        },
        &[table],
        H,
    )
    .unwrap();
    assert!(err < TOL, "embedding grad check error {err}");
}

#[test]
fn head_split_merge_mean() {
    let mut rng = Prng::new(12);
    let x = rand_tensor(&[2, 3, 4], &mut rng);
    let err = grad_check(
        |tape, vars| {
            let split = tape.split_heads(vars[0], 2)?;
            let merged = tape.merge_heads(split)?;
            Ok(weighted_sum(tape, merged))
        },
        &[x.clone()],
        H,
    )
    .unwrap();
    assert!(err < TOL, "split/merge heads grad check error {err}");

    let scores = rand_tensor(&[1, 2, 3, 3], &mut rng);
    let err = grad_check(
        |tape, vars| {
            let avg = tape.mean_heads(vars[0])?;
            Ok(weighted_sum(tape, avg))
        },
        &[scores],
        H,
    )
    .unwrap();
    assert!(err < TOL, "mean_heads grad check error {err}");
}

#[test]
fn rows_max_pool_and_concat() {
    let mut rng = Prng::new(13);
    let x = rand_tensor_off_zero(&[2, 4, 3], &mut rng);
    let spans = [
        RowSpan { batch: 0, start: 0, end: 2 },
        RowSpan { batch: 1, start: 1, end: 4 },
    ];
    let err = grad_check(
        |tape, vars| {
            let pooled = tape.rows_max_pool(vars[0], &spans)?;
            let both = tape.concat_cols(pooled, pooled)?;
            Ok(weighted_sum(tape, both))
        },
        &[x],
        H,
    )
    .unwrap();
    assert!(err < TOL, "max pool + concat grad check error {err}");
}

#[test]
fn masked_cross_entropy_matches_finite_differences() {
    let mut rng = Prng::new(14);
    let logits = rand_tensor(&[4, 5], &mut rng);
    let targets = [1usize, 4, 0, 2];
    let mask = [1.0, 0.0, 1.0, 1.0];
    let err = grad_check(
        |tape, vars| tape.cross_entropy_masked(vars[0], &targets, &mask),
        &[logits],
        H,
    )
    .unwrap();
    assert!(err < TOL, "masked CE grad check error {err}");
}

#[test]
fn softmax_cross_entropy_composite() {
    // The spec's composite case: projection -> masked CE.
    let mut rng = Prng::new(15);
    let h = rand_tensor(&[3, 4], &mut rng);
    let w = rand_tensor(&[4, 6], &mut rng);
    let targets = [5usize, 2, 0];
    let mask = [1.0, 1.0, 0.0];
    let err = grad_check(
        |tape, vars| {
            let logits = tape.matmul(vars[0], vars[1])?;
            tape.cross_entropy_masked(logits, &targets, &mask)
        },
        &[h, w],
        H,
    )
    .unwrap();
    assert!(err < TOL, "softmax+CE composite grad check error {err}");
}

#[test]
fn coref_loss_matches_finite_differences() {
    // Feed raw scores through causal softmax so the attention input is a
    // valid row distribution and gradients flow through the normalization.
    let mut rng = Prng::new(16);
    let scores = rand_tensor(&[1, 5, 5], &mut rng);
    let terms = [
        CorefTerm { batch: 0, position: 3, antecedents: vec![1], weight: 0.5 },
        CorefTerm { batch: 0, position: 4, antecedents: vec![1, 3], weight: 0.25 },
    ];
    let err = grad_check(
        |tape, vars| {
            let attn = tape.causal_softmax(vars[0])?;
            tape.coref_loss(attn, &terms)
        },
        &[scores],
        H,
    )
    .unwrap();
    assert!(err < TOL, "coref loss grad check error {err}");
}

#[test]
fn randomized_shapes_sweep() {
    // Small randomized shapes over the main ops, as the module invariants
    // demand. Each iteration draws fresh shapes and data.
    let mut rng = Prng::new(17);
    for round in 0..5 {
        let m = 2 + rng.next_below(3);
        let k = 2 + rng.next_below(3);
        let n = 2 + rng.next_below(3);
        let a = rand_tensor(&[m, k], &mut rng);
        let b = rand_tensor(&[k, n], &mut rng);
        let bias = rand_tensor(&[n], &mut rng);
        let gamma = rand_tensor_off_zero(&[n], &mut rng);
        let beta = rand_tensor(&[n], &mut rng);
        let err = grad_check(
            |tape, vars| {
                let c = tape.matmul(vars[0], vars[1])?;
                let c = tape.add_bias(c, vars[2])?;
                let c = tape.layer_norm(c, vars[3], vars[4], 1e-5)?;
                let c = tape.tanh(c);
                let c = tape.softmax(c)?;
                Ok(weighted_sum(tape, c))
            },
            &[a, b, bias, gamma, beta],
            H,
        )
        .unwrap();
        assert!(err < TOL, "round {round}: randomized sweep error {err}");
    }
}
