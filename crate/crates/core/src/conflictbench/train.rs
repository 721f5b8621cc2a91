use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{param_count, read_tensors, write_tensors, AdapterKind, Mode};
use crate::conflictbench::bench::LatencyRow;
use crate::conflictbench::data::{Dataset, Sample, Split, SyntheticTaskSpec};
use crate::conflictbench::entropy::LayerEntropy;
use crate::conflictbench::model::{ModelConfig, ToyModel, Trainable};
use crate::error::{shape_err, Error, Result};
use crate::numeric::{Optimizer, OptimizerKind, Rng, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Seed of batch order and dropout masks.
    pub seed: u64,
    /// Log every this many steps of each stage (0 logs only stage ends).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { stage1_steps: 200, stage2_steps: 1000, lr: 0.2, batch_size: 32, seed: 0, log_every: 200 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidArgument(format!("bad train config: {self:?}")));
        }
        Ok(())
    }
}

/// How LoRA is sized against Dual-LoRA in a paired comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    /// Both at the same rank.
    TotalRank,
    /// LoRA rank raised until its parameter count reaches Dual-LoRA's.
    ParamCount,
}

/// The LoRA rank paired with Dual-LoRA of rank `rank` on `d x d` layers.
/// LoRA has `2 r d` parameters, Dual-LoRA `3 r d + 2 r`.
pub fn matched_lora_rank(rule: MatchRule, rank: usize, d: usize) -> usize {
    match rule {
        MatchRule::TotalRank => rank,
        MatchRule::ParamCount => (3 * rank * d + 2 * rank).div_ceil(2 * d),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogPoint {
    pub stage: u8,
    pub step: usize,
    /// Eval-mode MSE per task on the training split.
    pub task_losses: Vec<f64>,
    pub total: f64,
    /// Per Dual-LoRA layer, the fraction of positive gate entries on the
    /// training split. Empty for other adapters.
    pub gate_liveness: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub vision: usize,
    pub adapters: usize,
    pub frozen: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub adapter: Option<String>,
    pub log: Vec<LogPoint>,
    /// Per-task MSE on the test split after training.
    pub eval: Vec<f64>,
    pub eval_total: f64,
    pub params: ParamCounts,
    #[serde(default)]
    pub entropy: Vec<LayerEntropy>,
    #[serde(default)]
    pub latency: Vec<LatencyRow>,
}

pub fn param_counts(model: &ToyModel) -> ParamCounts {
    let adapters: usize = model
        .blocks
        .iter()
        .flat_map(|b| [&b.q_adapter, &b.v_adapter])
        .flatten()
        .map(param_count)
        .sum();
    let all: usize = model.trainable_named().iter().map(|(_, t)| t.len()).sum();
    ParamCounts {
        vision: all - adapters,
        adapters,
        frozen: model.frozen_tensors().iter().map(|t| t.len()).sum(),
    }
}

struct EvalPass {
    task_losses: Vec<f64>,
    total: f64,
    gate_liveness: Vec<f64>,
}

/// Eval-mode per-task MSE and, per Dual-LoRA layer, the fraction of positive
/// gate entries, from one forward over `samples`.
fn eval_pass(model: &ToyModel, samples: &[&Sample]) -> Result<EvalPass> {
    let tasks = model.spec.tasks;
    let (mut sum, mut count) = (vec![0.0; tasks], vec![0usize; tasks]);
    let mut alive: Vec<(usize, usize)> = Vec::new();
    for chunk in samples.chunks(64) {
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, Trainable::NONE);
        let out = model.forward(&mut tape, &vars, chunk, Mode::Eval, &mut Rng::new(0))?;
        let pred = tape.value(out.pred);
        for (i, s) in chunk.iter().enumerate() {
            let row = pred.row(i);
            let se: f64 = row.iter().zip(&s.target).map(|(p, t)| (p - t).powi(2)).sum();
            sum[s.task] += se / row.len() as f64;
            count[s.task] += 1;
        }
        alive.resize(out.traces.len(), (0, 0));
        for (a, t) in alive.iter_mut().zip(&out.traces) {
            let g = tape.value(t.trace.gate);
            a.0 += g.data().iter().filter(|&&v| v > 0.0).count();
            a.1 += g.len();
        }
    }
    let task_losses: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect();
    let total = task_losses.iter().sum::<f64>() / tasks as f64;
    let gate_liveness = alive.iter().map(|&(on, n)| on as f64 / n.max(1) as f64).collect();
    Ok(EvalPass { task_losses, total, gate_liveness })
}

/// Per-task mean squared error on the test split, and their mean. Tasks
/// without test samples report 0.
pub fn evaluate(model: &ToyModel, data: &Dataset) -> Result<(Vec<f64>, f64)> {
    check_data(model, data)?;
    let e = eval_pass(model, &data.split(Split::Test))?;
    Ok((e.task_losses, e.total))
}

fn check_data(model: &ToyModel, data: &Dataset) -> Result<()> {
    let (a, b) = (&model.spec, &data.spec);
    if a.tasks != b.tasks || a.grid != b.grid || a.channels != b.channels || a.d_out != b.d_out {
        return Err(shape_err("train", format!("model built for {a:?}, dataset has {b:?}")));
    }
    Ok(())
}

fn log_point(model: &ToyModel, train: &[&Sample], stage: u8, step: usize) -> Result<LogPoint> {
    let e = eval_pass(model, train)?;
    if !e.total.is_finite() {
        return Err(Error::Divergence { stage, step, loss: e.total });
    }
    Ok(LogPoint { stage, step, task_losses: e.task_losses, total: e.total, gate_liveness: e.gate_liveness })
}

/// Two-stage fit by plain SGD on the MSE. Stage 1 updates the projector and
/// VCE only; stage 2 also updates the adapters. Minibatches are drawn from a
/// fresh shuffle of the training split each epoch.
pub fn train(model: &mut ToyModel, cfg: &TrainConfig, data: &Dataset) -> Result<MetricsReport> {
    cfg.validate()?;
    check_data(model, data)?;
    let train_set: Vec<Sample> = data.split(Split::Train).into_iter().cloned().collect();
    let train_refs: Vec<&Sample> = train_set.iter().collect();
    let mut order_rng = Rng::new(cfg.seed);
    let mut drop_rng = Rng::new(cfg.seed).fork(1);
    let mut order: Vec<usize> = Vec::new();
    let mut log = vec![log_point(model, &train_refs, 1, 0)?];

    let shapes: Vec<Vec<usize>> = model.trainable_named().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut opt = Optimizer::new(OptimizerKind::sgd(), &refs);

    for (stage, steps, mask) in [(1u8, cfg.stage1_steps, Trainable::STAGE1), (2, cfg.stage2_steps, Trainable::STAGE2)] {
        for step in 1..=steps {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            while batch.len() < cfg.batch_size {
                if order.is_empty() {
                    order = (0..train_set.len()).collect();
                    order_rng.shuffle(&mut order);
                }
                batch.push(&train_set[order.pop().expect("refilled above")]);
            }
            let mut tape = Tape::new();
            let vars = model.register(&mut tape, mask);
            let out = model.forward(&mut tape, &vars, &batch, Mode::Train, &mut drop_rng)?;
            let target: Vec<f64> = batch.iter().flat_map(|s| s.target.iter().copied()).collect();
            let target = tape.constant(Tensor::matrix(batch.len(), model.spec.d_out, target)?);
            let loss = tape.mse(out.pred, target)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Divergence { stage, step, loss: value });
            }
            tape.backward(loss)?;
            let grads: Vec<Option<Tensor>> = vars.trainable().iter().map(|&v| tape.grad(v)).collect();
            opt.step(&mut model.trainable_mut(), &grads, cfg.lr)?;
            if step == steps || (cfg.log_every > 0 && step % cfg.log_every == 0) {
                log.push(log_point(model, &train_refs, stage, step)?);
            }
        }
    }

    let (eval, eval_total) = evaluate(model, data)?;
    Ok(MetricsReport {
        adapter: model.adapter.as_ref().map(AdapterKind::label),
        log,
        eval,
        eval_total,
        params: param_counts(model),
        entropy: Vec::new(),
        latency: Vec::new(),
    })
}

/// Everything needed to rebuild a model: frozen tensors are regenerated from
/// the backbone seed, trainable tensors live in the binary file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub spec: SyntheticTaskSpec,
    pub model: ModelConfig,
    pub adapter: Option<AdapterKind>,
    pub init_seed: u64,
}

const CHECKPOINT_FORMAT: &str = "duallora-toy-checkpoint";

/// Writes `<stem>.json` and `<stem>.bin`.
pub fn save_checkpoint(stem: &Path, model: &ToyModel, init_seed: u64) -> Result<()> {
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        spec: model.spec.clone(),
        model: model.config.clone(),
        adapter: model.adapter.clone(),
        init_seed,
    };
    std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    write_tensors(BufWriter::new(File::create(stem.with_extension("bin"))?), &model.trainable_named())
}

pub fn load_checkpoint(stem: &Path) -> Result<ToyModel> {
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("not a toy-model checkpoint: {}", meta.format)));
    }
    let mut model = ToyModel::new(&meta.model, &meta.spec, meta.adapter.as_ref(), meta.init_seed)?;
    let tensors = read_tensors(BufReader::new(File::open(stem.with_extension("bin"))?))?;
    model.load_trainable(&tensors)?;
    Ok(model)
}
