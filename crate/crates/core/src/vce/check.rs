use std::sync::Arc;

use crate::error::Result;
use crate::numeric::{finite_diff_grad, relative_error, GradCheck, Rng, Tape, Tensor, Var};
use crate::vce::{init_vce, record_vce, FeaturePyramid, VceConfig, VceParams};

pub const VCE_GRAD_STEP: f64 = 1e-6;
pub const VCE_GRAD_TOL: f64 = 1e-4;

/// Loss `sum(enhanced * probe)`, and with `grads` the gradient of every
/// parameter.
fn probe_loss(p: &VceParams, pyr: &FeaturePyramid, probe: &Tensor, grads: bool) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = p.register(&mut tape, grads);
    let maps: Vec<Var> = pyr.levels().iter().map(|m| tape.leaf_shared(Arc::clone(m), false)).collect();
    let out = record_vce(&mut tape, p, &vars, &maps, pyr.anchor_index())?;
    let pr = tape.constant(probe.clone());
    let prod = tape.mul(out.enhanced, pr)?;
    let loss = tape.sum(prod);
    let value = tape.value(loss).item()?;
    if !grads {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    Ok((value, vars.flat().iter().map(|&v| tape.grad_or_zeros(v)).collect()))
}

/// Checks every parameter tensor on `instances` random problems: 2 levels,
/// 2 heads, 3 points, 4 channels on a 4x5 grid, parameters `N(0, 0.4)`.
pub fn vce_gradient_suite(instances: usize) -> Result<Vec<GradCheck>> {
    let config = VceConfig { levels: 2, heads: 2, points: 3, channels: 4, ..VceConfig::default() };
    let mut out = Vec::new();
    for seed in 0..instances as u64 {
        let mut p = init_vce(&config, seed)?;
        let mut rng = Rng::new(seed ^ 0x5eed);
        for t in p.tensors_mut() {
            let shape = t.shape().to_vec();
            *t = Arc::new(rng.normal_tensor(&shape, 0.4));
        }
        let mut rng = Rng::new(seed + 10);
        let maps = (0..config.levels).map(|_| rng.normal_tensor(&[4, 5, config.channels], 1.0)).collect();
        let pyr = FeaturePyramid::new(maps, config.levels - 1)?;
        let probe = Rng::new(seed + 20).normal_tensor(&[20, config.channels], 1.0);
        let (_, grads) = probe_loss(&p, &pyr, &probe, true)?;
        let named: Vec<(String, Tensor)> = p.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        for (i, (g, (name, base))) in grads.iter().zip(&named).enumerate() {
            let fd = finite_diff_grad(
                |x| {
                    let mut q = p.clone();
                    *q.tensors_mut()[i] = Arc::new(x.clone());
                    probe_loss(&q, &pyr, &probe, false).map_or(f64::NAN, |r| r.0)
                },
                base,
                VCE_GRAD_STEP,
            )?;
            out.push(GradCheck::new("vce", seed, name, relative_error(g, &fd)?, VCE_GRAD_TOL));
        }
    }
    Ok(out)
}
