use crate::adapters::{dropout, AdapterParams, FrozenLinear, LoraParams, Mode};
use crate::error::Result;
use crate::numeric::{Rng, Tape, Tensor, Var};

pub(super) fn delta(
    tape: &mut Tape,
    p: &LoraParams,
    vars: &[Var],
    x: Var,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    let xs = dropout(tape, x, p.hyper.dropout, mode, rng)?;
    branch(tape, p, vars[0], vars[1], xs)
}

/// `s * (x A^T) B^T` without dropout.
pub(super) fn branch(tape: &mut Tape, p: &LoraParams, a: Var, b: Var, x: Var) -> Result<Var> {
    let down = tape.matmul_nt(x, a)?;
    let up = tape.matmul_nt(down, b)?;
    Ok(tape.scale(up, p.hyper.scale()))
}

/// `z = W x + (r / alpha) B A x~` for one token `[d_in]` or rows `[n x d_in]`.
pub fn lora_forward(layer: &FrozenLinear, p: &LoraParams, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
    AdapterParams::Lora(p.clone()).forward(layer, x, mode, rng)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::adapters::{init_adapter, AdapterKind, LoraHyper};

    #[test]
    fn fresh_init_is_base_layer() {
        let mut rng = Rng::new(1);
        let layer = FrozenLinear::new(rng.normal_tensor(&[5, 4], 1.0)).unwrap();
        let AdapterParams::Lora(p) = init_adapter(&AdapterKind::lora(2), 4, 5, 3).unwrap() else {
            unreachable!()
        };
        let x = rng.normal_tensor(&[4], 1.0);
        let z = lora_forward(&layer, &p, &x, Mode::Train, &mut rng).unwrap();
        let wx = layer.weight().matmul(&x).unwrap();
        assert_eq!(z.data(), wx.data());
    }

    #[test]
    fn identity_example() {
        let layer = FrozenLinear::new(Tensor::eye(2)).unwrap();
        let p = LoraParams {
            a: Arc::new(Tensor::eye(2)),
            b: Arc::new(Tensor::eye(2)),
            hyper: LoraHyper { rank: 2, alpha: 4.0, dropout: 0.05, scale_rule: Default::default() },
        };
        let z = lora_forward(&layer, &p, &Tensor::vector(vec![1.0, 2.0]), Mode::Eval, &mut Rng::new(0)).unwrap();
        assert_eq!(z.data(), &[1.5, 3.0]);
    }

    #[test]
    fn matches_scalar_loop() {
        let mut rng = Rng::new(0);
        let w = rng.normal_tensor(&[4, 4], 1.0);
        let layer = FrozenLinear::new(w.clone()).unwrap();
        let p = LoraParams {
            a: Arc::new(rng.normal_tensor(&[2, 4], 1.0)),
            b: Arc::new(rng.normal_tensor(&[4, 2], 1.0)),
            hyper: LoraHyper::with_rank(2),
        };
        let x = rng.normal_tensor(&[4], 1.0);
        let z = lora_forward(&layer, &p, &x, Mode::Eval, &mut rng).unwrap();
        let s = p.hyper.scale();
        for i in 0..4 {
            let mut want = 0.0;
            for j in 0..4 {
                want += w.at(i, j) * x.data()[j];
            }
            for k in 0..2 {
                let mut ax = 0.0;
                for j in 0..4 {
                    ax += p.a.at(k, j) * x.data()[j];
                }
                want += s * p.b.at(i, k) * ax;
            }
            assert!((z.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let layer = FrozenLinear::new(Tensor::eye(3)).unwrap();
        let AdapterParams::Lora(p) = init_adapter(&AdapterKind::lora(2), 4, 3, 0).unwrap() else {
            unreachable!()
        };
        let err = lora_forward(&layer, &p, &Tensor::zeros(&[4]), Mode::Eval, &mut Rng::new(0));
        assert!(matches!(err, Err(crate::Error::Shape { .. })));
    }
}
