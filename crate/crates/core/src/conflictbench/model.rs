use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adapters::{init_adapter, AdapterKind, AdapterParams, DualTrace, FrozenLinear, Mode};
use crate::conflictbench::data::{Sample, SyntheticTaskSpec, TaskEncoding};
use crate::error::{shape_err, Error, Result};
use crate::numeric::{Rng, Tape, Tensor, Var};
use crate::vce::{init_vce, record_vce, VceConfig, VceParams, VceVars};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub blocks: usize,
    pub d_ff: usize,
    /// Optional cue-enhancement front end; its channel count must equal the
    /// task spec's vision channels.
    pub vce: Option<VceConfig>,
    /// Seed of every frozen tensor.
    pub backbone_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d_model: 64, blocks: 2, d_ff: 64, vce: Some(VceConfig::default()), backbone_seed: 0 }
    }
}

/// One pre-activation-free transformer block:
/// `h = x + Attn(x) W_o^T`, `x' = h + tanh(h W_1^T) W_2^T`, with adapter slots
/// on the query and value projections.
#[derive(Clone, Debug)]
pub struct Block {
    pub wq: FrozenLinear,
    pub wk: FrozenLinear,
    pub wv: FrozenLinear,
    pub wo: FrozenLinear,
    pub w1: FrozenLinear,
    pub w2: FrozenLinear,
    pub q_adapter: Option<AdapterParams>,
    pub v_adapter: Option<AdapterParams>,
}

/// Sequence: one task token followed by the `H W` vision tokens. The
/// prediction is the frozen head applied to the mean of all tokens after the
/// last block.
#[derive(Clone, Debug)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub spec: SyntheticTaskSpec,
    pub adapter: Option<AdapterKind>,
    pub task_embed: Arc<Tensor>,
    pub pos_embed: Arc<Tensor>,
    /// Frozen `[C x C]` maps producing the lower pyramid levels
    /// `tanh(X R_l^T)`; the anchor level is the raw vision grid.
    pub level_maps: Vec<Arc<Tensor>>,
    pub blocks: Vec<Block>,
    pub head: FrozenLinear,
    pub projector: Arc<Tensor>,
    pub projector_bias: Arc<Tensor>,
    pub vce: Option<VceParams>,
}

/// Which parameters a step may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    /// Projector and VCE.
    pub vision: bool,
    pub adapters: bool,
}

impl Trainable {
    pub const NONE: Self = Self { vision: false, adapters: false };
    pub const STAGE1: Self = Self { vision: true, adapters: false };
    pub const STAGE2: Self = Self { vision: true, adapters: true };
}

struct BlockVars {
    w: [Var; 6],
    q: Option<Vec<Var>>,
    v: Option<Vec<Var>>,
}

pub struct ModelVars {
    task_embed: Var,
    blocks: Vec<BlockVars>,
    head: Var,
    projector: Var,
    projector_bias: Var,
    vce: Option<VceVars>,
}

impl ModelVars {
    /// Handles in [`ToyModel::trainable_named`] order.
    pub fn trainable(&self) -> Vec<Var> {
        let mut v = vec![self.projector, self.projector_bias];
        if let Some(vv) = &self.vce {
            v.extend(vv.flat());
        }
        for b in &self.blocks {
            v.extend(b.q.iter().flatten().copied());
            v.extend(b.v.iter().flatten().copied());
        }
        v
    }
}

/// A Dual-LoRA slot's intermediates from one forward pass.
pub struct LayerTrace {
    pub name: String,
    pub(crate) trace: DualTrace,
}

pub struct Forward {
    /// `[B x d_out]`
    pub pred: Var,
    pub traces: Vec<LayerTrace>,
}

/// Query/key init gain; small logits keep attention close to uniform.
const QK_GAIN: f64 = 0.3;
/// Init gain of the MLP output projection.
const MLP_OUT_GAIN: f64 = 0.25;

fn frozen(rng: &mut Rng, d_out: usize, d_in: usize, gain: f64) -> Result<FrozenLinear> {
    FrozenLinear::new(rng.normal_tensor(&[d_out, d_in], gain / (d_in as f64).sqrt()))
}

impl ToyModel {
    /// Frozen tensors come from `config.backbone_seed`; projector, VCE and
    /// adapters from `seed`.
    pub fn new(config: &ModelConfig, spec: &SyntheticTaskSpec, adapter: Option<&AdapterKind>, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (d, c) = (config.d_model, spec.channels);
        if d == 0 || config.blocks == 0 || config.d_ff == 0 {
            return Err(Error::InvalidArgument(format!("bad model sizes: {config:?}")));
        }
        if spec.task_encoding == TaskEncoding::OneHot && spec.tasks > d {
            return Err(Error::InvalidArgument(format!("one-hot task tokens need d_model >= {}", spec.tasks)));
        }
        if let Some(v) = &config.vce {
            v.validate()?;
            if v.channels != c {
                return Err(shape_err("model", format!("VCE has {} channels, vision tokens have {c}", v.channels)));
            }
        }
        let mut rng = Rng::new(config.backbone_seed);
        let task_embed = match spec.task_encoding {
            TaskEncoding::RandomEmbedding => rng.normal_tensor(&[spec.tasks, d], 1.0),
            TaskEncoding::OneHot => {
                let mut t = Tensor::zeros(&[spec.tasks, d]);
                for i in 0..spec.tasks {
                    t.data_mut()[i * d + i] = 1.0;
                }
                t
            }
        };
        let seq = 1 + spec.vision_tokens();
        let pos_embed = rng.normal_tensor(&[seq, d], 0.1);
        let levels = config.vce.map_or(0, |v| v.levels);
        let level_maps = (0..levels.saturating_sub(1))
            .map(|_| Arc::new(rng.normal_tensor(&[c, c], 1.5 / (c as f64).sqrt())))
            .collect();
        let mut blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            blocks.push(Block {
                wq: frozen(&mut rng, d, d, QK_GAIN)?,
                wk: frozen(&mut rng, d, d, QK_GAIN)?,
                wv: frozen(&mut rng, d, d, 1.0)?,
                wo: frozen(&mut rng, d, d, 1.0)?,
                w1: frozen(&mut rng, config.d_ff, d, 1.0)?,
                w2: frozen(&mut rng, d, config.d_ff, MLP_OUT_GAIN)?,
                q_adapter: None,
                v_adapter: None,
            });
        }
        let head = frozen(&mut rng, spec.d_out, d, 1.0)?;

        let mut trng = Rng::new(seed);
        let bound = 1.0 / (c as f64).sqrt();
        let projector = Arc::new(trng.uniform_tensor(&[d, c], -bound, bound));
        let projector_bias = Arc::new(Tensor::zeros(&[d]));
        let vce = match &config.vce {
            Some(v) => Some(init_vce(v, trng.next_u64())?),
            None => None,
        };
        if let Some(kind) = adapter {
            for b in &mut blocks {
                b.q_adapter = Some(init_adapter(kind, d, d, trng.next_u64())?);
                b.v_adapter = Some(init_adapter(kind, d, d, trng.next_u64())?);
            }
        }
        Ok(Self {
            config: config.clone(),
            spec: spec.clone(),
            adapter: adapter.cloned(),
            task_embed: Arc::new(task_embed),
            pos_embed: Arc::new(pos_embed),
            level_maps,
            blocks,
            head,
            projector,
            projector_bias,
            vce,
        })
    }

    pub fn seq_len(&self) -> usize {
        1 + self.spec.vision_tokens()
    }

    /// Every trainable tensor: projector, VCE, then per block the query and
    /// value adapters.
    pub fn trainable_named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("projector".to_string(), &*self.projector), ("projector_bias".to_string(), &*self.projector_bias)];
        if let Some(v) = &self.vce {
            out.extend(v.named_tensors());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (slot, a) in [("q", &b.q_adapter), ("v", &b.v_adapter)] {
                if let Some(a) = a {
                    out.extend(a.named_tensors().into_iter().map(|(n, t)| (format!("block{i}.{slot}.{n}"), t)));
                }
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        let mut out = vec![&mut self.projector, &mut self.projector_bias];
        if let Some(v) = &mut self.vce {
            out.extend(v.tensors_mut());
        }
        for b in &mut self.blocks {
            for a in [&mut b.q_adapter, &mut b.v_adapter].into_iter().flatten() {
                out.extend(a.tensors_mut());
            }
        }
        out
    }

    /// Loads tensors written from [`Self::trainable_named`], checking names
    /// and shapes.
    pub fn load_trainable(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> =
            self.trainable_named().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        if expected.len() != named.len() {
            return Err(Error::Format(format!("checkpoint has {} tensors, model expects {}", named.len(), expected.len())));
        }
        for ((n, s), (gn, gt)) in expected.iter().zip(named) {
            if n != gn || s.as_slice() != gt.shape() {
                return Err(Error::Format(format!("checkpoint tensor {gn} {:?} does not match {n} {s:?}", gt.shape())));
            }
        }
        for (slot, (_, t)) in self.trainable_mut().into_iter().zip(named) {
            *slot = Arc::new(t.clone());
        }
        Ok(())
    }

    /// Every frozen tensor, for integrity checks.
    pub fn frozen_tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&*self.task_embed, &*self.pos_embed, self.head.weight()];
        out.extend(self.level_maps.iter().map(|m| &**m));
        for b in &self.blocks {
            out.extend([&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2].map(|l| l.weight()));
        }
        out
    }

    pub fn register(&self, tape: &mut Tape, train: Trainable) -> ModelVars {
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                w: [&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2].map(|l| l.register(tape)),
                q: b.q_adapter.as_ref().map(|a| a.register(tape, train.adapters)),
                v: b.v_adapter.as_ref().map(|a| a.register(tape, train.adapters)),
            })
            .collect();
        ModelVars {
            task_embed: tape.leaf_shared(Arc::clone(&self.task_embed), false),
            blocks,
            head: self.head.register(tape),
            projector: tape.leaf_shared(Arc::clone(&self.projector), train.vision),
            projector_bias: tape.leaf_shared(Arc::clone(&self.projector_bias), train.vision),
            vce: self.vce.as_ref().map(|v| v.register(tape, train.vision)),
        }
    }

    /// Pyramid levels `[H x W x C]` of one vision input (anchor last).
    pub fn pyramid_levels(&self, input: &[f64]) -> Result<Vec<Tensor>> {
        let (h, w) = self.spec.grid;
        let c = self.spec.channels;
        let x = Tensor::matrix(h * w, c, input.to_vec())?;
        let mut levels = Vec::with_capacity(self.level_maps.len() + 1);
        for r in &self.level_maps {
            let lv = x.matmul(&r.transpose()?)?.map(f64::tanh);
            levels.push(lv.reshape(vec![h, w, c])?);
        }
        levels.push(x.reshape(vec![h, w, c])?);
        Ok(levels)
    }

    fn adapted(
        tape: &mut Tape,
        layer: &FrozenLinear,
        w: Var,
        adapter: Option<(&AdapterParams, &Vec<Var>)>,
        x: Var,
        mode: Mode,
        rng: &mut Rng,
        name: String,
        traces: &mut Vec<LayerTrace>,
    ) -> Result<Var> {
        let base = layer.apply(tape, w, x)?;
        let Some((p, vars)) = adapter else {
            return Ok(base);
        };
        let (delta, trace) = p.delta_traced(tape, vars, x, mode, rng)?;
        if let Some(trace) = trace {
            traces.push(LayerTrace { name, trace });
        }
        tape.add(base, delta)
    }

    /// Records the forward pass for a batch of samples.
    pub fn forward(&self, tape: &mut Tape, vars: &ModelVars, batch: &[&Sample], mode: Mode, rng: &mut Rng) -> Result<Forward> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let (n_vis, c, d) = (self.spec.vision_tokens(), self.spec.channels, self.config.d_model);
        let seq = self.seq_len();
        for s in batch {
            if s.input.len() != n_vis * c || s.task >= self.spec.tasks {
                return Err(shape_err("model", format!("sample with task {} and {} inputs", s.task, s.input.len())));
            }
        }

        let vision = match (&self.vce, &vars.vce) {
            (Some(vp), Some(vv)) => {
                let mut rows = Vec::with_capacity(b);
                for s in batch {
                    let levels = self.pyramid_levels(&s.input)?;
                    let maps: Vec<Var> = levels.into_iter().map(|m| tape.constant(m)).collect();
                    let anchor = maps.len() - 1;
                    rows.push(record_vce(tape, vp, vv, &maps, anchor)?.enhanced);
                }
                tape.concat_rows(&rows)?
            }
            _ => {
                let data: Vec<f64> = batch.iter().flat_map(|s| s.input.iter().copied()).collect();
                tape.constant(Tensor::matrix(b * n_vis, c, data)?)
            }
        };
        let proj = tape.matmul_nt(vision, vars.projector)?;
        let proj = tape.add_row(proj, vars.projector_bias)?;
        let tasks: Vec<usize> = batch.iter().map(|s| s.task).collect();
        let task_rows = tape.gather_rows(vars.task_embed, &tasks)?;

        let task_idx: Vec<usize> = (0..b).map(|i| i * seq).collect();
        let vis_idx: Vec<usize> = (0..b).flat_map(|i| (1..seq).map(move |j| i * seq + j)).collect();
        let t = tape.scatter_rows(task_rows, &task_idx, b * seq)?;
        let v = tape.scatter_rows(proj, &vis_idx, b * seq)?;
        let mut pos = Vec::with_capacity(b * seq * d);
        for _ in 0..b {
            pos.extend_from_slice(self.pos_embed.data());
        }
        let pos = tape.constant(Tensor::matrix(b * seq, d, pos)?);
        let x = tape.add(t, v)?;
        let mut x = tape.add(x, pos)?;

        let mut traces = Vec::new();
        for (i, (blk, bv)) in self.blocks.iter().zip(&vars.blocks).enumerate() {
            let [wq, wk, wv, wo, w1, w2] = bv.w;
            let qa = blk.q_adapter.as_ref().zip(bv.q.as_ref());
            let va = blk.v_adapter.as_ref().zip(bv.v.as_ref());
            let q = Self::adapted(tape, &blk.wq, wq, qa, x, mode, rng, format!("block{i}.q"), &mut traces)?;
            let k = blk.wk.apply(tape, wk, x)?;
            let v = Self::adapted(tape, &blk.wv, wv, va, x, mode, rng, format!("block{i}.v"), &mut traces)?;
            let att = tape.attention(q, k, v, seq)?;
            let att = blk.wo.apply(tape, wo, att)?;
            let h = tape.add(x, att)?;
            let hid = blk.w1.apply(tape, w1, h)?;
            let hid = tape.tanh(hid);
            let mlp = blk.w2.apply(tape, w2, hid)?;
            x = tape.add(h, mlp)?;
        }
        let mut pool = Tensor::zeros(&[b, b * seq]);
        for i in 0..b {
            pool.data_mut()[i * b * seq + i * seq..i * b * seq + (i + 1) * seq].fill(1.0 / seq as f64);
        }
        let pool = tape.constant(pool);
        let read = tape.matmul(pool, x)?;
        let pred = self.head.apply(tape, vars.head, read)?;
        Ok(Forward { pred, traces })
    }

    /// Value-level predictions `[B x d_out]` in eval mode.
    pub fn predict(&self, batch: &[&Sample]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, Trainable::NONE);
        let out = self.forward(&mut tape, &vars, batch, Mode::Eval, &mut Rng::new(0))?;
        Ok(tape.value(out.pred).clone())
    }
}
