use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numeric::Tensor;

/// First-order update rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        Self::Sgd { momentum: 0.0 }
    }

    pub fn adam() -> Self {
        Self::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, shapes: &[&[usize]]) -> Self {
        let zeros = || shapes.iter().map(|s| vec![0.0; s.iter().product()]).collect::<Vec<_>>();
        let v = if matches!(kind, OptimizerKind::Adam { .. }) { zeros() } else { Vec::new() };
        Self { kind, m: zeros(), v, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates `params` in place with learning rate `lr`. A `None` gradient
    /// means the parameter did not reach the loss and is left untouched.
    pub fn step(&mut self, params: &mut [&mut Arc<Tensor>], grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer holds {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.len() != self.m[i].len() || g.len() != p.len() {
                return Err(shape_err("optimizer", format!("grad {i} has {} elements", g.len())));
            }
            let data = Arc::make_mut(p).data_mut();
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for ((w, m), &gv) in data.iter_mut().zip(&mut self.m[i]).zip(g.data()) {
                        *m = momentum * *m + gv;
                        *w -= lr * *m;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.t as i32);
                    let c2 = 1.0 - beta2.powi(self.t as i32);
                    for (((w, m), v), &gv) in data.iter_mut().zip(&mut self.m[i]).zip(&mut self.v[i]).zip(g.data()) {
                        *m = beta1 * *m + (1.0 - beta1) * gv;
                        *v = beta2 * *v + (1.0 - beta2) * gv * gv;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
