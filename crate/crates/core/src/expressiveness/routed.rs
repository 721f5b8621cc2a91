use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adapters::{init_adapter, AdapterKind, AdapterParams, LoraHyper, Mode};
use crate::error::{shape_err, Error, Result};
use crate::expressiveness::{numerical_rank, VerificationReport, RANK_TOL};
use crate::numeric::{Optimizer, OptimizerKind, Rng, Tape, Tensor};

/// Inputs `[n x d]` that should be mapped by `target [d_out x d]`.
#[derive(Clone, Debug)]
pub struct Cluster {
    pub inputs: Tensor,
    pub target: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Cosine decay of the learning rate to zero over `steps`.
    pub cosine: bool,
    /// Final MSE below this passes.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { steps: 5000, lr: 0.01, optimizer: OptimizerKind::adam(), cosine: true, threshold: 1e-3, seed: 0 }
    }
}

/// Appends the constant coordinate: `[x, 1]`.
fn augment(x: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    let mut data = Vec::with_capacity(n * (d + 1));
    for i in 0..n {
        data.extend_from_slice(x.row(i));
        data.push(1.0);
    }
    Tensor::matrix(n, d + 1, data)
}

fn stack(clusters: &[Cluster]) -> Result<(Tensor, Tensor)> {
    let Some(first) = clusters.first() else {
        return Err(Error::InvalidArgument("no clusters".into()));
    };
    let (d_out, d) = first.target.dims2()?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut n = 0;
    for c in clusters {
        let (ci, cd) = c.inputs.dims2()?;
        if cd != d || c.target.shape() != [d_out, d] {
            return Err(shape_err("routed fit", format!("cluster inputs are {ci}x{cd}, target {:?}", c.target.shape())));
        }
        xs.extend_from_slice(augment(&c.inputs)?.data());
        ys.extend_from_slice(c.inputs.matmul(&c.target.transpose()?)?.data());
        n += ci;
    }
    Ok((Tensor::matrix(n, d + 1, xs)?, Tensor::matrix(n, d_out, ys)?))
}

/// Sets the constant-coordinate column of `T` so every gate is open on the
/// whole input cube `[-1, 1]^d` at initialization; otherwise a channel that
/// starts closed on all data never receives a gradient.
fn open_gates(t: &mut Tensor) {
    let d = t.last_dim();
    for row in t.data_mut().chunks_mut(d) {
        row[d - 1] = row[..d - 1].iter().map(|v| v.abs()).sum::<f64>();
    }
}

/// Trains an adapter of any kind by full-batch gradient descent so that
/// `delta([x, 1]) ~ target_k x` on every cluster. There is no frozen layer.
/// Non-finite losses end training and are reported as a failure.
pub fn fit_adapter_to_routed_target(
    kind: &AdapterKind,
    clusters: &[Cluster],
    cfg: &FitConfig,
) -> Result<VerificationReport> {
    Ok(train_routed(kind, clusters, cfg)?.1)
}

/// As [`fit_adapter_to_routed_target`], also returning the trained adapter.
pub fn train_routed(
    kind: &AdapterKind,
    clusters: &[Cluster],
    cfg: &FitConfig,
) -> Result<(AdapterParams, VerificationReport)> {
    let (x, y) = stack(clusters)?;
    let (d_in, d_out) = (x.shape()[1], y.shape()[1]);
    let mut params = init_adapter(kind, d_in, d_out, cfg.seed)?;
    if let AdapterParams::Dual(p) = &mut params {
        open_gates(Arc::make_mut(&mut p.t));
    }
    let shapes: Vec<Vec<usize>> = params.named_tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut opt = Optimizer::new(cfg.optimizer, &shape_refs);
    let mut rng = Rng::new(cfg.seed).fork(1);

    let mut loss_at = |params: &AdapterParams, train: bool| -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, train);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let pred = params.delta(&mut tape, &vars, xv, Mode::Eval, &mut rng)?;
        let loss = tape.mse(pred, yv)?;
        let value = tape.value(loss).item()?;
        if !train || !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        Ok((value, vars.iter().map(|&v| tape.grad(v)).collect()))
    };

    let mut mse = f64::INFINITY;
    for step in 0..cfg.steps {
        let (loss, grads) = loss_at(&params, true)?;
        if !loss.is_finite() {
            break;
        }
        let lr = if cfg.cosine {
            0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos())
        } else {
            cfg.lr
        };
        let mut ps = params.tensors_mut();
        opt.step(&mut ps, &grads, lr)?;
    }
    let (final_loss, _) = loss_at(&params, false)?;
    if final_loss.is_finite() {
        mse = final_loss;
    }

    let ranks = clusters
        .iter()
        .map(|c| numerical_rank(&c.target, RANK_TOL))
        .collect::<Result<Vec<_>>>()?;
    let report = VerificationReport {
        statement: format!("routed-fit:{}", kind.label()),
        d_in,
        d_out,
        numerical_rank: ranks.iter().sum(),
        ranks,
        rank_budget: kind.total_rank(),
        error: mse,
        tolerance: cfg.threshold,
        pass: mse < cfg.threshold,
    };
    Ok((params, report))
}

/// Dual-LoRA of rank `budget` fitted with the default optimizer settings.
pub fn fit_dual_to_routed_target(clusters: &[Cluster], budget: usize, steps: usize, seed: u64) -> Result<VerificationReport> {
    let kind = AdapterKind::DualLora { hyper: LoraHyper::with_rank(budget).no_dropout() };
    fit_adapter_to_routed_target(&kind, clusters, &FitConfig { steps, seed, ..FitConfig::default() })
}

/// One cluster of `n` points in `[-1, 1]^d` with a random rank-1 target.
pub fn single_cluster_rank1(n: usize, d: usize, d_out: usize, seed: u64) -> Cluster {
    let mut rng = Rng::new(seed);
    let inputs = rng.uniform_tensor(&[n, d], -1.0, 1.0);
    let u = rng.normal_tensor(&[d_out, 1], 1.0 / (d_out as f64).sqrt());
    let v = rng.normal_tensor(&[1, d], 1.0 / (d as f64).sqrt());
    Cluster { inputs, target: u.matmul(&v).expect("rank-1 outer product") }
}

/// Two clusters on the halfspaces `x_1 >= margin` and `x_1 <= -margin` of
/// `[-1, 1]^d`, with targets `+I` and `-I`.
pub fn two_cluster_opposing(n_per_cluster: usize, d: usize, margin: f64, seed: u64) -> [Cluster; 2] {
    let mut rng = Rng::new(seed);
    let mut side = |sign: f64| {
        let mut x = rng.uniform_tensor(&[n_per_cluster, d], -1.0, 1.0);
        for i in 0..n_per_cluster {
            let v = rng.uniform(margin, 1.0);
            x.data_mut()[i * d] = sign * v;
        }
        x
    };
    let pos = side(1.0);
    let neg = side(-1.0);
    [
        Cluster { inputs: pos, target: Tensor::eye(d) },
        Cluster { inputs: neg, target: Tensor::eye(d).scale(-1.0) },
    ]
}
