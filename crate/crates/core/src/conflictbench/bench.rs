use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::{init_adapter, param_count, AdapterKind, AdapterParams, FrozenLinear, GateStrategy, Mode};
use crate::error::{Error, Result};
use crate::numeric::{Rng, Tensor};
use crate::vce::{init_vce, vce_forward, FeaturePyramid, VceConfig, VceParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchVariant {
    pub label: String,
    pub adapter: AdapterKind,
    /// Also runs the cue-enhancement module once per forward.
    pub vce: bool,
}

/// LoRA, MoE top-2 and dense-softmax over 4 experts, Dual-LoRA and
/// Dual-LoRA with VCE, all at total rank `rank`.
pub fn default_variants(rank: usize) -> Vec<BenchVariant> {
    let quarter = [rank / 4; 4];
    let v = |label: &str, adapter: AdapterKind, vce: bool| BenchVariant { label: label.into(), adapter, vce };
    vec![
        v("lora", AdapterKind::lora(rank), false),
        v("moe-top2", AdapterKind::moe(&quarter, GateStrategy::TopK(2)), false),
        v("moe-softmax-4", AdapterKind::moe(&quarter, GateStrategy::SoftmaxDense), false),
        v("dual-lora", AdapterKind::dual(rank), false),
        v("dual-lora+vce", AdapterKind::dual(rank), true),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub d: usize,
    pub tokens: usize,
    pub layers: usize,
    pub rank: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
    pub vce: VceConfig,
    pub vce_grid: (usize, usize),
    /// Rows whose coefficient of variation exceeds this are unstable.
    pub max_cv: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            d: 1024,
            tokens: 16,
            layers: 2,
            rank: 64,
            reps: 1000,
            warmup: 50,
            seed: 0,
            vce: VceConfig::default(),
            vce_grid: (3, 5),
            max_cv: 0.10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub variant: String,
    pub median_ns: f64,
    /// Median over the first variant's median.
    pub ratio: f64,
    pub cv: f64,
    pub reps: usize,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub rows: Vec<LatencyRow>,
    /// `samples[i]` holds every timed forward of `rows[i]`, in nanoseconds.
    pub samples: Vec<Vec<f64>>,
}

impl LatencyTable {
    pub fn ratio(&self, variant: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == variant).map(|r| r.ratio)
    }

    /// Fails on the first row above `max_cv`.
    pub fn check_stable(&self, max_cv: f64) -> Result<()> {
        match self.rows.iter().find(|r| !(r.cv <= max_cv)) {
            Some(r) => Err(Error::Unstable { variant: r.variant.clone(), cv: r.cv, max_cv }),
            None => Ok(()),
        }
    }

    /// `variant,rep,ns` for every raw sample.
    pub fn samples_csv(&self) -> String {
        let mut s = String::from("variant,rep,ns\n");
        for (row, samples) in self.rows.iter().zip(&self.samples) {
            for (i, ns) in samples.iter().enumerate() {
                s.push_str(&format!("{},{i},{ns}\n", row.variant));
            }
        }
        s
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn coefficient_of_variation(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Rows recomputed from raw samples, ratios against the first row.
pub fn summarize(labels: &[String], params: &[usize], samples: Vec<Vec<f64>>) -> LatencyTable {
    let medians: Vec<f64> = samples.iter().map(|s| median(s)).collect();
    let base = medians.first().copied().unwrap_or(f64::NAN);
    let rows = labels
        .iter()
        .zip(params)
        .zip(samples.iter().zip(&medians))
        .map(|((l, &p), (s, &m))| LatencyRow {
            variant: l.clone(),
            median_ns: m,
            ratio: m / base,
            cv: coefficient_of_variation(s),
            reps: s.len(),
            params: p,
        })
        .collect();
    LatencyTable { rows, samples }
}

struct Stack {
    layers: Vec<(FrozenLinear, AdapterParams)>,
    vce: Option<(FeaturePyramid, VceParams)>,
}

impl Stack {
    fn forward(&self, x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let mut h = x.clone();
        for (layer, adapter) in &self.layers {
            h = adapter.forward(layer, &h, Mode::Eval, rng)?;
        }
        if let Some((pyr, params)) = &self.vce {
            black_box(vce_forward(pyr, params)?);
        }
        Ok(h)
    }
}

/// Median single-threaded forward time of a `layers`-deep stack of `d x d`
/// frozen layers with one adapter each, on one fixed `[tokens x d]` input.
/// Variants are timed round-robin, one forward each per repetition, so slow
/// drift affects every row alike. The first variant is the ratio baseline.
pub fn latency_bench(variants: &[BenchVariant], cfg: &BenchConfig) -> Result<LatencyTable> {
    if cfg.reps < 100 {
        return Err(Error::InvalidArgument(format!("need at least 100 reps, got {}", cfg.reps)));
    }
    if variants.is_empty() || cfg.d == 0 || cfg.tokens == 0 || cfg.layers == 0 {
        return Err(Error::InvalidArgument("empty benchmark".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let bound = 1.0 / (cfg.d as f64).sqrt();
    let frozen: Vec<Tensor> = (0..cfg.layers).map(|_| rng.uniform_tensor(&[cfg.d, cfg.d], -bound, bound)).collect();
    let x = rng.normal_tensor(&[cfg.tokens, cfg.d], 1.0);
    let (gh, gw) = cfg.vce_grid;
    let c = cfg.vce.channels;
    let levels: Vec<Tensor> = (0..cfg.vce.levels).map(|_| rng.normal_tensor(&[gh, gw, c], 1.0)).collect();
    let pyramid = FeaturePyramid::new(levels, cfg.vce.levels - 1)?;

    let mut stacks = Vec::with_capacity(variants.len());
    let mut params = Vec::with_capacity(variants.len());
    for (vi, v) in variants.iter().enumerate() {
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut count = 0;
        for (li, w) in frozen.iter().enumerate() {
            let mut a = init_adapter(&v.adapter, cfg.d, cfg.d, cfg.seed ^ ((vi as u64) << 32 | li as u64))?;
            // A nonzero up projection so the adapter branch does real work.
            for t in a.tensors_mut().into_iter() {
                if t.data().iter().all(|&z| z == 0.0) && t.ndim() == 2 {
                    *t = std::sync::Arc::new(rng.normal_tensor(t.shape(), 0.01));
                }
            }
            count += param_count(&a);
            layers.push((FrozenLinear::new(w.clone())?, a));
        }
        let vce = if v.vce {
            let p = init_vce(&cfg.vce, cfg.seed)?;
            count += p.param_count();
            Some((pyramid.clone(), p))
        } else {
            None
        };
        stacks.push(Stack { layers, vce });
        params.push(count);
    }

    let mut drop_rng = Rng::new(0);
    for _ in 0..cfg.warmup {
        for s in &stacks {
            black_box(s.forward(&x, &mut drop_rng)?);
        }
    }
    let mut samples = vec![Vec::with_capacity(cfg.reps); stacks.len()];
    for _ in 0..cfg.reps {
        for (s, out) in stacks.iter().zip(samples.iter_mut()) {
            let t0 = Instant::now();
            black_box(s.forward(black_box(&x), &mut drop_rng)?);
            out.push(t0.elapsed().as_nanos() as f64);
        }
    }
    let labels: Vec<String> = variants.iter().map(|v| v.label.clone()).collect();
    Ok(summarize(&labels, &params, samples))
}
