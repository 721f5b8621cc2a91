use std::sync::Arc;

use crate::adapters::{init_adapter, AdapterKind, AdapterParams, FrozenLinear, GateStrategy, Mode};
use crate::error::{Error, Result};
use crate::numeric::{finite_diff_grad, relative_error, GradCheck, Rng, Tape, Tensor};

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// The kinds covered by [`gradient_suite`]: every family and gate strategy at
/// rank at most 4.
pub fn gradient_suite_kinds() -> Vec<AdapterKind> {
    vec![
        AdapterKind::lora(3),
        AdapterKind::dual(4),
        AdapterKind::moe(&[2, 1, 1], GateStrategy::TopK(2)),
        AdapterKind::moe(&[2, 2], GateStrategy::SoftmaxDense),
        AdapterKind::moe(&[2, 1, 1], GateStrategy::Rectified),
    ]
}

fn quadratic_loss(params: &AdapterParams, layer: &FrozenLinear, x: &Tensor, y: &Tensor) -> Result<f64> {
    let z = params.forward(layer, x, Mode::Eval, &mut Rng::new(0))?;
    Ok(0.5 * z.sub(y)?.data().iter().map(|v| v * v).sum::<f64>())
}

/// Tape gradients of `0.5 |z - y|^2`; errors if the frozen weight gets one.
fn tape_grads(params: &AdapterParams, layer: &FrozenLinear, x: &Tensor, y: &Tensor) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let w = layer.register(&mut tape);
    let vars = params.register(&mut tape, true);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let z = params.apply(&mut tape, layer, w, &vars, xv, Mode::Eval, &mut Rng::new(0))?;
    let d = tape.sub(z, yv)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq);
    let loss = tape.scale(s, 0.5);
    tape.backward(loss)?;
    if tape.grad(w).is_some() {
        return Err(Error::InvalidArgument("frozen weight received a gradient".into()));
    }
    Ok(vars.iter().map(|&v| tape.grad_or_zeros(v)).collect())
}

/// True when a ReLU kink or top-k tie sits within `1e-3` of the instance,
/// where central differences straddle a non-differentiable point.
fn near_kink(params: &AdapterParams, x: &Tensor) -> Result<bool> {
    let near = |v: &Tensor| v.data().iter().any(|a| a.abs() < 1e-3);
    Ok(match params {
        AdapterParams::Lora(_) => false,
        AdapterParams::Dual(p) => near(&x.matmul(&p.t.transpose()?)?),
        AdapterParams::Moe(p) => {
            let logits = x.matmul(&p.router.transpose()?)?;
            match p.strategy {
                GateStrategy::Rectified => near(&logits),
                GateStrategy::TopK(k) => logits.data().chunks(p.experts.len()).any(|row| {
                    let mut s = row.to_vec();
                    s.sort_by(|a, b| b.total_cmp(a));
                    k < s.len() && (s[k - 1] - s[k]).abs() < 1e-3
                }),
                GateStrategy::SoftmaxDense => false,
            }
        }
    })
}

/// Checks every trainable tensor of `kind` on `instances` random problems
/// (dims at most 12, up to 4 tokens, dropout off, parameters `N(0, 0.7)`).
/// Instances near a kink are skipped and replaced by the next seed.
pub fn gradient_suite(kind: &AdapterKind, instances: usize) -> Result<Vec<GradCheck>> {
    let kind = kind.clone().with_dropout(0.0);
    let label = kind.label();
    let mut out = Vec::new();
    let (mut checked, mut seed) = (0, 0u64);
    while checked < instances {
        seed += 1;
        if seed > 100 * instances as u64 + 100 {
            return Err(Error::InvalidArgument(format!("{label}: every instance sits near a kink")));
        }
        let mut rng = Rng::new(1000 + seed);
        let (d_in, d_out, n) = (3 + rng.below(10), 2 + rng.below(10), 1 + rng.below(4));
        let layer = FrozenLinear::new(rng.normal_tensor(&[d_out, d_in], 1.0))?;
        let mut params = init_adapter(&kind, d_in, d_out, seed)?;
        for t in params.tensors_mut() {
            let shape = t.shape().to_vec();
            *t = Arc::new(rng.normal_tensor(&shape, 0.7));
        }
        let x = rng.normal_tensor(&[n, d_in], 1.0);
        if near_kink(&params, &x)? {
            continue;
        }
        let y = rng.normal_tensor(&[n, d_out], 1.0);
        let grads = tape_grads(&params, &layer, &x, &y)?;
        let named: Vec<(String, Tensor)> = params.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        for (i, (g, (name, base))) in grads.iter().zip(&named).enumerate() {
            let mut failed = None;
            let fd = finite_diff_grad(
                |t| {
                    let mut p = params.clone();
                    *p.tensors_mut()[i] = Arc::new(t.clone());
                    quadratic_loss(&p, &layer, &x, &y).unwrap_or_else(|e| {
                        failed = Some(e);
                        f64::NAN
                    })
                },
                base,
                GRAD_STEP,
            )?;
            if let Some(e) = failed {
                return Err(e);
            }
            out.push(GradCheck::new(&label, seed, name, relative_error(g, &fd)?, GRAD_TOL));
        }
        checked += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_every_tensor() {
        let checks = gradient_suite(&AdapterKind::dual(2), 2).unwrap();
        assert_eq!(checks.len(), 2 * 5);
        assert!(checks.iter().all(|c| c.pass), "{checks:?}");
    }
}
