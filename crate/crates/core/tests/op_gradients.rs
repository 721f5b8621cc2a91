//! Tape gradients of every primitive against central finite differences on
//! 20 seeded random instances each.

use duallora::numeric::{finite_diff_grad, relative_error, Rng, Tape, Tensor, Var};
use duallora::Result;

const INSTANCES: u64 = 20;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Contracts `build(inputs)` with a fixed random weight tensor and compares
/// the tape gradient of every input with finite differences.
fn check(label: &str, inputs: Vec<Tensor>, build: &Build, seed: u64) {
    let probe_shape = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.param(x.clone())).collect();
        let out = build(&mut t, &vars).unwrap();
        t.shape(out).to_vec()
    };
    let weights = Rng::new(seed ^ 0xabcdef).normal_tensor(&probe_shape, 1.0);
    let loss_of = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let out = build(&mut t, &vars).unwrap();
        t.value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();

    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad_or_zeros(*v);
        let numeric = finite_diff_grad(
            |x| {
                let mut xs = inputs.clone();
                xs[i] = x.clone();
                loss_of(&xs)
            },
            &inputs[i],
            H,
        )
        .unwrap();
        let err = relative_error(&analytic, &numeric).unwrap();
        assert!(err < TOL, "{label} seed {seed} input {i}: relative error {err:e}");
    }
}

fn dims(rng: &mut Rng) -> (usize, usize, usize) {
    (1 + rng.below(6), 1 + rng.below(8), 1 + rng.below(6))
}

/// Normal tensor with every entry at least 1e-3 away from zero (ReLU kink).
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = rng.normal_tensor(shape, 1.0);
    for v in t.data_mut() {
        while v.abs() < 1e-3 {
            *v = rng.normal();
        }
    }
    t
}

#[test]
fn matmul_and_matmul_nt() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(seed);
        let (m, k, n) = dims(&mut rng);
        let a = rng.normal_tensor(&[m, k], 1.0);
        let b = rng.normal_tensor(&[k, n], 1.0);
        check("matmul", vec![a.clone(), b], &|t, v| t.matmul(v[0], v[1]), seed);
        let bt = rng.normal_tensor(&[n, k], 1.0);
        check("matmul_nt", vec![a, bt], &|t, v| t.matmul_nt(v[0], v[1]), seed);
    }
}

#[test]
fn elementwise_ops() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(seed);
        let (m, n, _) = dims(&mut rng);
        let a = rng.normal_tensor(&[m, n], 1.0);
        let b = rng.normal_tensor(&[m, n], 1.0);
        let ins = vec![a.clone(), b.clone()];
        check("add", ins.clone(), &|t, v| t.add(v[0], v[1]), seed);
        check("sub", ins.clone(), &|t, v| t.sub(v[0], v[1]), seed);
        check("mul", ins.clone(), &|t, v| t.mul(v[0], v[1]), seed);
        check("scale", vec![a.clone()], &|t, v| Ok(t.scale(v[0], -1.7)), seed);
        check("tanh", vec![a.clone()], &|t, v| Ok(t.tanh(v[0])), seed);
        check("mse", ins, &|t, v| t.mse(v[0], v[1]), seed);
        let r = away_from_zero(&mut rng, &[m, n]);
        check("relu", vec![r], &|t, v| Ok(t.relu(v[0])), seed);
    }
}

#[test]
fn broadcast_ops() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(seed);
        let (m, n, _) = dims(&mut rng);
        let a = rng.normal_tensor(&[m, n], 1.0);
        let bias = rng.normal_tensor(&[n], 1.0);
        let g = rng.normal_tensor(&[m], 1.0);
        check("add_row", vec![a.clone(), bias], &|t, v| t.add_row(v[0], v[1]), seed);
        check("mul_col", vec![a, g], &|t, v| t.mul_col(v[0], v[1]), seed);
    }
}

#[test]
fn softmax_and_masked_softmax() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(seed);
        let (m, _, _) = dims(&mut rng);
        let n = 2 + rng.below(8);
        let a = rng.normal_tensor(&[m, n], 2.0);
        check("softmax", vec![a.clone()], &|t, v| Ok(t.softmax(v[0])), seed);
        let mask: Vec<bool> = (0..m * n).map(|i| i % n == 0 || rng.bernoulli(0.5)).collect();
        check(
            "masked_softmax",
            vec![a],
            &move |t, v| t.masked_softmax(v[0], &mask),
            seed,
        );
    }
}

#[test]
fn layer_norm_all_inputs() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(seed);
        let (m, _, _) = dims(&mut rng);
        let n = 2 + rng.below(14);
        let x = rng.normal_tensor(&[m, n], 1.5);
        let g = rng.normal_tensor(&[n], 1.0);
        let b = rng.normal_tensor(&[n], 1.0);
        check(
            "layer_norm",
            vec![x, g, b],
            &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
            seed,
        );
    }
}

#[test]
fn bilinear_map_and_positions() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(seed);
        let (h, w, c) = (2 + rng.below(5), 2 + rng.below(5), 1 + rng.below(4));
        let map = rng.normal_tensor(&[h, w, c], 1.0);
        let n = 1 + rng.below(6);
        let mut pos = Vec::new();
        for _ in 0..n {
            for lim in [h, w] {
                // stay off integer grid lines and the clamp boundary
                let mut p;
                loop {
                    p = rng.uniform(-0.5, lim as f64 - 0.5);
                    let frac = p - p.floor();
                    if frac > 1e-3 && frac < 1.0 - 1e-3 && p.abs() > 1e-3 && (p - (lim - 1) as f64).abs() > 1e-3 {
                        break;
                    }
                }
                pos.push(p);
            }
        }
        let pos = Tensor::new(vec![n, 2], pos).unwrap();
        check("bilinear", vec![map, pos], &|t, v| t.bilinear_sample(v[0], v[1]), seed);
    }
}

#[test]
fn reductions_and_reshapes() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(seed);
        let (m, n, k) = dims(&mut rng);
        let a = rng.normal_tensor(&[m, n], 1.0);
        let b = rng.normal_tensor(&[m, k], 1.0);
        let c = rng.normal_tensor(&[k, n], 1.0);
        check("sum", vec![a.clone()], &|t, v| Ok(t.sum(v[0])), seed);
        check("mean", vec![a.clone()], &|t, v| Ok(t.mean(v[0])), seed);
        check("concat_cols", vec![a.clone(), b], &|t, v| t.concat_cols(v), seed);
        check("concat_rows", vec![a.clone(), c], &|t, v| t.concat_rows(v), seed);
        let start = rng.below(n);
        let len = 1 + rng.below(n - start);
        check("slice_cols", vec![a.clone()], &move |t, v| t.slice_cols(v[0], start, len), seed);
        let idx: Vec<usize> = (0..7).map(|_| rng.below(m)).collect();
        let idx2 = idx.clone();
        check("gather_rows", vec![a.clone()], &move |t, v| t.gather_rows(v[0], &idx), seed);
        let src = rng.normal_tensor(&[7, n], 1.0);
        check("scatter_rows", vec![src], &move |t, v| t.scatter_rows(v[0], &idx2, m), seed);
        check("reshape", vec![a], &move |t, v| t.reshape(v[0], &[n * m]), seed);
    }
}

#[test]
fn attention_blocks() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(seed);
        let seq = 1 + rng.below(5);
        let groups = 1 + rng.below(3);
        let d = 1 + rng.below(6);
        let q = rng.normal_tensor(&[seq * groups, d], 1.0);
        let k = rng.normal_tensor(&[seq * groups, d], 1.0);
        let v = rng.normal_tensor(&[seq * groups, d], 1.0);
        check("attention", vec![q, k, v], &move |t, x| t.attention(x[0], x[1], x[2], seq), seed);
    }
}

#[test]
fn group_weighted_sum() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(seed);
        let (n, k, c) = dims(&mut rng);
        let x = rng.normal_tensor(&[n * k, c], 1.0);
        let w = rng.normal_tensor(&[n, k], 1.0);
        check("group_weighted_sum", vec![x, w], &|t, v| t.group_weighted_sum(v[0], v[1]), seed);
    }
}
