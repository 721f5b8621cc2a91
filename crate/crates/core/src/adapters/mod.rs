//! Low-rank adapters on frozen linear layers.
//!
//! Three families share one calling convention: parameters are registered on
//! a [`Tape`] (yielding one [`Var`] per tensor, in [`AdapterParams::named_tensors`]
//! order) and [`AdapterParams::delta`] records the adapter branch for a batch
//! of row-vector tokens `x [n x d_in]`, returning `[n x d_out]`.
//!
//! * LoRA: `z = Wx + s * B A x`
//! * Dual-LoRA: `z = Wx + s * B (LayerNorm(S x) * ReLU(T x))`
//! * LoRA-MoE: `z = Wx + sum_e g_e(x) * s_e * B_e A_e x` with top-k, dense
//!   softmax or rectified (ReLU) gates.
//!
//! `s` is `r / alpha` by default ([`ScaleRule`]).

mod check;
mod dual;
mod io;
mod lora;
mod moe;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numeric::{Rng, Tape, Tensor, Var, LN_EPS};

pub(crate) use dual::DualTrace;
pub use check::{gradient_suite, gradient_suite_kinds, GRAD_STEP, GRAD_TOL};
pub use dual::{dual_lora_forward, effective_update};
pub use io::{load_adapter, read_tensors, save_adapter, write_tensors, AdapterMeta};
pub use lora::lora_forward;
pub use moe::{gate_weights, moe_forward};

/// Training mode applies dropout to the adapter-branch input; eval does not.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How the adapter output is scaled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScaleRule {
    /// `r / alpha`
    #[default]
    RankOverAlpha,
    /// `alpha / r`
    AlphaOverRank,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraHyper {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    #[serde(default)]
    pub scale_rule: ScaleRule,
}

impl LoraHyper {
    /// `alpha = 2 r`, dropout 0.05.
    pub fn with_rank(rank: usize) -> Self {
        Self {
            rank,
            alpha: 2.0 * rank as f64,
            dropout: 0.05,
            scale_rule: ScaleRule::RankOverAlpha,
        }
    }

    pub fn no_dropout(mut self) -> Self {
        self.dropout = 0.0;
        self
    }

    pub fn scale(&self) -> f64 {
        let r = self.rank as f64;
        match self.scale_rule {
            ScaleRule::RankOverAlpha => r / self.alpha,
            ScaleRule::AlphaOverRank => self.alpha / r,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidArgument("adapter rank must be >= 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Pretrained weight `W [d_out x d_in]`; never registered as trainable.
#[derive(Clone, Debug)]
pub struct FrozenLinear {
    weight: Arc<Tensor>,
}

impl FrozenLinear {
    pub fn new(weight: Tensor) -> Result<Self> {
        weight.dims2()?;
        Ok(Self { weight: Arc::new(weight) })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Records `W` as a constant (shared, not copied).
    pub fn register(&self, tape: &mut Tape) -> Var {
        tape.leaf_shared(Arc::clone(&self.weight), false)
    }

    /// `x W^T` for row tokens `x [n x d_in]`.
    pub fn apply(&self, tape: &mut Tape, w: Var, x: Var) -> Result<Var> {
        tape.matmul_nt(x, w)
    }
}

#[derive(Clone, Debug)]
pub struct LoraParams {
    /// `r x d_in`
    pub a: Arc<Tensor>,
    /// `d_out x r`
    pub b: Arc<Tensor>,
    pub hyper: LoraHyper,
}

#[derive(Clone, Debug)]
pub struct DualLoraParams {
    /// Skill projection, `r x d_in`.
    pub s: Arc<Tensor>,
    /// Task projection, `r x d_in`.
    pub t: Arc<Tensor>,
    /// `d_out x r`
    pub b: Arc<Tensor>,
    pub norm_gain: Arc<Tensor>,
    pub norm_bias: Arc<Tensor>,
    pub hyper: LoraHyper,
    pub eps: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "k", rename_all = "snake_case")]
pub enum GateStrategy {
    /// Softmax over the `k` largest router logits, zero elsewhere.
    TopK(usize),
    /// Softmax over all experts.
    SoftmaxDense,
    /// Unnormalized `ReLU(logit)`.
    Rectified,
}

#[derive(Clone, Debug)]
pub struct MoeParams {
    pub experts: Vec<LoraParams>,
    /// `E x d_in`, bias-free.
    pub router: Arc<Tensor>,
    pub strategy: GateStrategy,
    /// Dropout on the shared expert input (experts' own `dropout` is unused).
    pub dropout: f64,
}

impl MoeParams {
    pub fn total_rank(&self) -> usize {
        self.experts.iter().map(|e| e.hyper.rank).sum()
    }
}

/// Which adapter to build.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterKind {
    Lora { hyper: LoraHyper },
    DualLora { hyper: LoraHyper },
    Moe { experts: Vec<LoraHyper>, strategy: GateStrategy },
}

impl AdapterKind {
    pub fn lora(rank: usize) -> Self {
        Self::Lora { hyper: LoraHyper::with_rank(rank) }
    }

    pub fn dual(rank: usize) -> Self {
        Self::DualLora { hyper: LoraHyper::with_rank(rank) }
    }

    pub fn moe(ranks: &[usize], strategy: GateStrategy) -> Self {
        Self::Moe {
            experts: ranks.iter().map(|&r| LoraHyper::with_rank(r)).collect(),
            strategy,
        }
    }

    /// Same kind with every dropout replaced.
    pub fn with_dropout(mut self, p: f64) -> Self {
        match &mut self {
            Self::Lora { hyper } | Self::DualLora { hyper } => hyper.dropout = p,
            Self::Moe { experts, .. } => experts.iter_mut().for_each(|h| h.dropout = p),
        }
        self
    }

    pub fn total_rank(&self) -> usize {
        match self {
            Self::Lora { hyper } | Self::DualLora { hyper } => hyper.rank,
            Self::Moe { experts, .. } => experts.iter().map(|h| h.rank).sum(),
        }
    }

    /// Short label used in reports.
    pub fn label(&self) -> String {
        match self {
            Self::Lora { hyper } => format!("lora-r{}", hyper.rank),
            Self::DualLora { hyper } => format!("dual-lora-r{}", hyper.rank),
            Self::Moe { experts, strategy } => {
                let ranks: Vec<String> = experts.iter().map(|h| h.rank.to_string()).collect();
                let s = match strategy {
                    GateStrategy::TopK(k) => format!("top{k}"),
                    GateStrategy::SoftmaxDense => "softmax".into(),
                    GateStrategy::Rectified => "rectified".into(),
                };
                format!("moe-{s}-[{}]", ranks.join(","))
            }
        }
    }
}

/// A trained or freshly initialized adapter of any kind.
#[derive(Clone, Debug)]
pub enum AdapterParams {
    Lora(LoraParams),
    Dual(DualLoraParams),
    Moe(MoeParams),
}

/// Fan-in uniform `U(-1/sqrt(d_in), 1/sqrt(d_in))`.
fn fan_in(rng: &mut Rng, rows: usize, d_in: usize) -> Arc<Tensor> {
    let bound = 1.0 / (d_in as f64).sqrt();
    Arc::new(rng.uniform_tensor(&[rows, d_in], -bound, bound))
}

/// Down projections (A, S, T, router) are fan-in uniform, B is zero and the
/// skill-space norm starts as the identity affine map.
pub fn init_adapter(kind: &AdapterKind, d_in: usize, d_out: usize, seed: u64) -> Result<AdapterParams> {
    if d_in == 0 || d_out == 0 {
        return Err(Error::InvalidArgument("adapter dims must be positive".into()));
    }
    let mut rng = Rng::new(seed);
    let lora = |rng: &mut Rng, hyper: &LoraHyper| -> Result<LoraParams> {
        hyper.validate()?;
        Ok(LoraParams {
            a: fan_in(rng, hyper.rank, d_in),
            b: Arc::new(Tensor::zeros(&[d_out, hyper.rank])),
            hyper: *hyper,
        })
    };
    Ok(match kind {
        AdapterKind::Lora { hyper } => AdapterParams::Lora(lora(&mut rng, hyper)?),
        AdapterKind::DualLora { hyper } => {
            hyper.validate()?;
            let r = hyper.rank;
            AdapterParams::Dual(DualLoraParams {
                s: fan_in(&mut rng, r, d_in),
                t: fan_in(&mut rng, r, d_in),
                b: Arc::new(Tensor::zeros(&[d_out, r])),
                norm_gain: Arc::new(Tensor::ones(&[r])),
                norm_bias: Arc::new(Tensor::zeros(&[r])),
                hyper: *hyper,
                eps: LN_EPS,
            })
        }
        AdapterKind::Moe { experts, strategy } => {
            if experts.is_empty() {
                return Err(Error::InvalidArgument("MoE needs at least one expert".into()));
            }
            if let GateStrategy::TopK(k) = strategy {
                if *k == 0 || *k > experts.len() {
                    return Err(Error::InvalidArgument(format!(
                        "top-k needs 1 <= k <= {}, got {k}",
                        experts.len()
                    )));
                }
            }
            let router = fan_in(&mut rng, experts.len(), d_in);
            let experts = experts
                .iter()
                .map(|h| lora(&mut rng, h))
                .collect::<Result<Vec<_>>>()?;
            let dropout = experts[0].hyper.dropout;
            AdapterParams::Moe(MoeParams {
                experts,
                router,
                strategy: *strategy,
                dropout,
            })
        }
    })
}

/// Trainable parameter count.
///
/// LoRA `r (d_in + d_out)`, Dual-LoRA `r (2 d_in + d_out) + 2 r`,
/// MoE `sum_e r_e (d_in + d_out) + E d_in`.
pub fn param_count(params: &AdapterParams) -> usize {
    params.named_tensors().iter().map(|(_, t)| t.len()).sum()
}

/// Closed-form counts from the kind alone.
pub fn param_count_for(kind: &AdapterKind, d_in: usize, d_out: usize) -> usize {
    match kind {
        AdapterKind::Lora { hyper } => hyper.rank * (d_in + d_out),
        AdapterKind::DualLora { hyper } => hyper.rank * (2 * d_in + d_out) + 2 * hyper.rank,
        AdapterKind::Moe { experts, .. } => {
            experts.iter().map(|h| h.rank * (d_in + d_out)).sum::<usize>() + experts.len() * d_in
        }
    }
}

impl AdapterParams {
    pub fn kind(&self) -> AdapterKind {
        match self {
            Self::Lora(p) => AdapterKind::Lora { hyper: p.hyper },
            Self::Dual(p) => AdapterKind::DualLora { hyper: p.hyper },
            Self::Moe(p) => AdapterKind::Moe {
                experts: p.experts.iter().map(|e| e.hyper).collect(),
                strategy: p.strategy,
            },
        }
    }

    pub fn d_in(&self) -> usize {
        match self {
            Self::Lora(p) => p.a.shape()[1],
            Self::Dual(p) => p.s.shape()[1],
            Self::Moe(p) => p.router.shape()[1],
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            Self::Lora(p) => p.b.shape()[0],
            Self::Dual(p) => p.b.shape()[0],
            Self::Moe(p) => p.experts[0].b.shape()[0],
        }
    }

    /// Every trainable tensor with a stable name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        match self {
            Self::Lora(p) => vec![("A".into(), &*p.a), ("B".into(), &*p.b)],
            Self::Dual(p) => vec![
                ("S".into(), &*p.s),
                ("T".into(), &*p.t),
                ("B".into(), &*p.b),
                ("norm_gain".into(), &*p.norm_gain),
                ("norm_bias".into(), &*p.norm_bias),
            ],
            Self::Moe(p) => {
                let mut v = vec![("router".to_string(), &*p.router)];
                for (i, e) in p.experts.iter().enumerate() {
                    v.push((format!("expert{i}.A"), &*e.a));
                    v.push((format!("expert{i}.B"), &*e.b));
                }
                v
            }
        }
    }

    /// Mutable handles in [`Self::named_tensors`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        match self {
            Self::Lora(p) => vec![&mut p.a, &mut p.b],
            Self::Dual(p) => vec![&mut p.s, &mut p.t, &mut p.b, &mut p.norm_gain, &mut p.norm_bias],
            Self::Moe(p) => {
                let mut v = vec![&mut p.router];
                for e in &mut p.experts {
                    v.push(&mut e.a);
                    v.push(&mut e.b);
                }
                v
            }
        }
    }

    fn shared_tensors(&self) -> Vec<&Arc<Tensor>> {
        match self {
            Self::Lora(p) => vec![&p.a, &p.b],
            Self::Dual(p) => vec![&p.s, &p.t, &p.b, &p.norm_gain, &p.norm_bias],
            Self::Moe(p) => {
                let mut v = vec![&p.router];
                for e in &p.experts {
                    v.push(&e.a);
                    v.push(&e.b);
                }
                v
            }
        }
    }

    /// Records every tensor on `tape` without copying.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.shared_tensors()
            .into_iter()
            .map(|t| tape.leaf_shared(Arc::clone(t), trainable))
            .collect()
    }

    /// Records the adapter branch for tokens `x [n x d_in]`.
    pub fn delta(&self, tape: &mut Tape, vars: &[Var], x: Var, mode: Mode, rng: &mut Rng) -> Result<Var> {
        let (_, d) = tape.value(x).dims2()?;
        if d != self.d_in() {
            return Err(shape_err("adapter", format!("input width {d}, adapter expects {}", self.d_in())));
        }
        match self {
            Self::Lora(p) => lora::delta(tape, p, vars, x, mode, rng),
            Self::Dual(p) => dual::delta(tape, p, vars, x, mode, rng),
            Self::Moe(p) => moe::delta(tape, p, vars, x, mode, rng),
        }
    }

    /// As [`Self::delta`], also returning the Dual-LoRA intermediates.
    pub(crate) fn delta_traced(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Var, Option<DualTrace>)> {
        match self {
            Self::Dual(p) => {
                let (_, d) = tape.value(x).dims2()?;
                if d != p.s.shape()[1] {
                    return Err(shape_err("adapter", format!("input width {d}, adapter expects {}", p.s.shape()[1])));
                }
                let t = dual::trace(tape, p, vars, x, mode, rng)?;
                Ok((t.out, Some(t)))
            }
            _ => Ok((self.delta(tape, vars, x, mode, rng)?, None)),
        }
    }

    /// `x W^T + delta(x)` on the tape.
    pub fn apply(
        &self,
        tape: &mut Tape,
        layer: &FrozenLinear,
        w: Var,
        vars: &[Var],
        x: Var,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        if layer.d_in() != self.d_in() || layer.d_out() != self.d_out() {
            return Err(shape_err(
                "adapter",
                format!(
                    "layer is {}x{}, adapter is {}x{}",
                    layer.d_out(),
                    layer.d_in(),
                    self.d_out(),
                    self.d_in()
                ),
            ));
        }
        let base = layer.apply(tape, w, x)?;
        let delta = self.delta(tape, vars, x, mode, rng)?;
        tape.add(base, delta)
    }

    /// Value-level forward of one token `[d_in]` or a batch `[n x d_in]`.
    pub fn forward(&self, layer: &FrozenLinear, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        let (rows, single) = as_rows(x)?;
        let mut tape = Tape::new();
        let w = layer.register(&mut tape);
        let vars = self.register(&mut tape, false);
        let xv = tape.constant(rows);
        let z = self.apply(&mut tape, layer, w, &vars, xv, mode, rng)?;
        let out = tape.value(z).clone();
        if single {
            let n = out.len();
            out.reshape(vec![n])
        } else {
            Ok(out)
        }
    }
}

/// Views a vector as a single row; matrices pass through.
pub(crate) fn as_rows(x: &Tensor) -> Result<(Tensor, bool)> {
    match x.shape() {
        [d] => Ok((x.clone().reshape(vec![1, *d])?, true)),
        [_, _] => Ok((x.clone(), false)),
        s => Err(shape_err("adapter", format!("input must be a vector or matrix, got {s:?}"))),
    }
}

/// Inverted dropout on the adapter input: identity in eval mode or at rate 0.
pub(crate) fn dropout(tape: &mut Tape, x: Var, p: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..n).map(|_| if rng.bernoulli(p) { 0.0 } else { keep }).collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_counts() {
        let d = 4096;
        assert_eq!(param_count_for(&AdapterKind::lora(64), d, d), 524_288);
        assert_eq!(param_count_for(&AdapterKind::dual(64), d, d), 786_560);
        let moe = AdapterKind::moe(&[16, 16, 16, 16], GateStrategy::TopK(2));
        assert_eq!(param_count_for(&moe, d, d), 524_288 + 16_384);
        assert_eq!(param_count_for(&moe, d, d), 540_672);
    }

    #[test]
    fn instantiated_counts_match_closed_form() {
        let kinds = [
            AdapterKind::lora(3),
            AdapterKind::dual(5),
            AdapterKind::moe(&[4, 2, 1, 1], GateStrategy::Rectified),
        ];
        for kind in kinds {
            let p = init_adapter(&kind, 12, 7, 0).unwrap();
            assert_eq!(param_count(&p), param_count_for(&kind, 12, 7), "{}", kind.label());
        }
    }

    #[test]
    fn init_is_deterministic_and_b_is_zero() {
        for kind in [AdapterKind::lora(4), AdapterKind::dual(4), AdapterKind::moe(&[2, 2], GateStrategy::SoftmaxDense)] {
            let p1 = init_adapter(&kind, 8, 6, 99).unwrap();
            let p2 = init_adapter(&kind, 8, 6, 99).unwrap();
            for ((n1, t1), (n2, t2)) in p1.named_tensors().iter().zip(p2.named_tensors()) {
                assert_eq!(n1, &n2);
                assert_eq!(t1.data(), t2.data());
                if n1.ends_with('B') {
                    assert!(t1.data().iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn init_bounds_and_norm_identity() {
        let p = init_adapter(&AdapterKind::dual(6), 25, 3, 1).unwrap();
        let AdapterParams::Dual(d) = p else { unreachable!() };
        assert!(d.s.data().iter().chain(d.t.data()).all(|v| v.abs() <= 0.2));
        assert!(d.norm_gain.data().iter().all(|&v| v == 1.0));
        assert!(d.norm_bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_rejects_bad_config() {
        assert!(init_adapter(&AdapterKind::lora(0), 4, 4, 0).is_err());
        assert!(init_adapter(&AdapterKind::moe(&[2, 2], GateStrategy::TopK(3)), 4, 4, 0).is_err());
        assert!(init_adapter(&AdapterKind::moe(&[], GateStrategy::SoftmaxDense), 4, 4, 0).is_err());
        let bad = AdapterKind::Lora {
            hyper: LoraHyper { dropout: 1.0, ..LoraHyper::with_rank(2) },
        };
        assert!(init_adapter(&bad, 4, 4, 0).is_err());
    }

    #[test]
    fn scale_rules() {
        let h = LoraHyper::with_rank(64);
        assert_eq!(h.scale(), 0.5);
        let h = LoraHyper { scale_rule: ScaleRule::AlphaOverRank, ..h };
        assert_eq!(h.scale(), 2.0);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = Rng::new(0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[3, 4]));
        assert_eq!(dropout(&mut tape, x, 0.5, Mode::Eval, &mut rng).unwrap(), x);
        assert_eq!(dropout(&mut tape, x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        let y = dropout(&mut tape, x, 0.5, Mode::Train, &mut rng).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
