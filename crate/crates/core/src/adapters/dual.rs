use crate::adapters::{dropout, AdapterParams, DualLoraParams, FrozenLinear, Mode};
use crate::error::{shape_err, Result};
use crate::numeric::{Rng, Tape, Tensor, Var};

/// Intermediate activations of the Dual-LoRA branch.
pub(crate) struct DualTrace {
    /// `LayerNorm(S x)`, the normalized skill activations.
    pub skill: Var,
    /// `ReLU(T x)`, the task gate.
    pub gate: Var,
    /// `skill * gate`, the rectified skill activations.
    pub rectified: Var,
    pub out: Var,
}

pub(super) fn delta(
    tape: &mut Tape,
    p: &DualLoraParams,
    vars: &[Var],
    x: Var,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    Ok(trace(tape, p, vars, x, mode, rng)?.out)
}

pub(crate) fn trace(
    tape: &mut Tape,
    p: &DualLoraParams,
    vars: &[Var],
    x: Var,
    mode: Mode,
    rng: &mut Rng,
) -> Result<DualTrace> {
    let [s, t, b, gain, bias] = [vars[0], vars[1], vars[2], vars[3], vars[4]];
    let xs = dropout(tape, x, p.hyper.dropout, mode, rng)?;
    let sx = tape.matmul_nt(xs, s)?;
    let tx = tape.matmul_nt(xs, t)?;
    let skill = tape.layer_norm(sx, gain, bias, p.eps)?;
    let gate = tape.relu(tx);
    let rectified = tape.mul(skill, gate)?;
    let up = tape.matmul_nt(rectified, b)?;
    let out = tape.scale(up, p.hyper.scale());
    Ok(DualTrace { skill, gate, rectified, out })
}

/// `z = W x + (r / alpha) B (LayerNorm(S x~) * ReLU(T x~))`.
pub fn dual_lora_forward(
    layer: &FrozenLinear,
    p: &DualLoraParams,
    x: &Tensor,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Tensor> {
    AdapterParams::Dual(p.clone()).forward(layer, x, mode, rng)
}

/// `B diag(gate) S`: the linear map the adapter realizes under a fixed binary
/// rank-channel gate, with the layer norm bypassed and no output scale.
pub fn effective_update(p: &DualLoraParams, gate: &[bool]) -> Result<Tensor> {
    let (r, d_in) = p.s.dims2()?;
    let (d_out, rb) = p.b.dims2()?;
    if gate.len() != r || rb != r {
        return Err(shape_err(
            "effective_update",
            format!("gate of length {} for rank {r} (B has {rb} columns)", gate.len()),
        ));
    }
    let mut out = vec![0.0; d_out * d_in];
    for (k, _) in gate.iter().enumerate().filter(|(_, &g)| g) {
        let srow = p.s.row(k);
        for i in 0..d_out {
            let bik = p.b.at(i, k);
            if bik != 0.0 {
                for (o, s) in out[i * d_in..(i + 1) * d_in].iter_mut().zip(srow) {
                    *o += bik * s;
                }
            }
        }
    }
    Tensor::matrix(d_out, d_in, out)
}
