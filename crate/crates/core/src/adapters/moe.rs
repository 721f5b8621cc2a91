use crate::adapters::{dropout, lora, AdapterParams, FrozenLinear, GateStrategy, Mode, MoeParams};
use crate::error::Result;
use crate::numeric::{Rng, Tape, Tensor, Var};

/// Per-row top-k membership; ties go to the lower expert index.
fn top_k_mask(logits: &Tensor, k: usize) -> Vec<bool> {
    let e = logits.last_dim();
    let mut mask = vec![false; logits.len()];
    let mut order: Vec<usize> = (0..e).collect();
    for (row, chunk) in logits.data().chunks(e).enumerate() {
        order.sort_by(|&a, &b| chunk[b].total_cmp(&chunk[a]).then(a.cmp(&b)));
        for &j in order.iter().take(k) {
            mask[row * e + j] = true;
        }
        order.sort_unstable();
    }
    mask
}

/// Records gate weights `[n x E]` from router logits.
fn gates(tape: &mut Tape, logits: Var, strategy: GateStrategy) -> Result<Var> {
    match strategy {
        GateStrategy::TopK(k) => {
            let mask = top_k_mask(tape.value(logits), k);
            tape.masked_softmax(logits, &mask)
        }
        GateStrategy::SoftmaxDense => Ok(tape.softmax(logits)),
        GateStrategy::Rectified => Ok(tape.relu(logits)),
    }
}

/// Gate weights for router logits `[n x E]` (value level).
pub fn gate_weights(logits: &Tensor, strategy: GateStrategy) -> Result<Tensor> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let g = gates(&mut tape, l, strategy)?;
    Ok(tape.value(g).clone())
}

/// Tokens are routed independently. Top-k and rectified gating dispatch each
/// expert only on the tokens with a nonzero gate; dense softmax runs every
/// expert on every token.
pub(super) fn delta(
    tape: &mut Tape,
    p: &MoeParams,
    vars: &[Var],
    x: Var,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    let n = tape.shape(x)[0];
    let d_out = p.experts[0].b.shape()[0];
    let logits = tape.matmul_nt(x, vars[0])?;
    let g = gates(tape, logits, p.strategy)?;
    let xs = dropout(tape, x, p.dropout, mode, rng)?;
    let sparse = !matches!(p.strategy, GateStrategy::SoftmaxDense);
    let e_count = p.experts.len();

    let mut total: Option<Var> = None;
    for (e, expert) in p.experts.iter().enumerate() {
        let (a, b) = (vars[1 + 2 * e], vars[2 + 2 * e]);
        let ge = tape.slice_cols(g, e, 1)?;
        let contrib = if sparse {
            let gv = tape.value(g).data();
            let rows: Vec<usize> = (0..n).filter(|&i| gv[i * e_count + e] != 0.0).collect();
            if rows.is_empty() {
                continue;
            }
            let xe = tape.gather_rows(xs, &rows)?;
            let he = lora::branch(tape, expert, a, b, xe)?;
            let gsel = tape.gather_rows(ge, &rows)?;
            let weighted = tape.mul_col(he, gsel)?;
            tape.scatter_rows(weighted, &rows, n)?
        } else {
            let he = lora::branch(tape, expert, a, b, xs)?;
            tape.mul_col(he, ge)?
        };
        total = Some(match total {
            Some(t) => tape.add(t, contrib)?,
            None => contrib,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => tape.constant(Tensor::zeros(&[n, d_out])),
    })
}

/// `z = W x + sum_e g_e (r_e / alpha_e) B_e A_e x~`.
pub fn moe_forward(layer: &FrozenLinear, p: &MoeParams, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
    AdapterParams::Moe(p.clone()).forward(layer, x, mode, rng)
}
