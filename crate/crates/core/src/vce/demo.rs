use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Optimizer, OptimizerKind, Rng, Tape, Tensor, Var};
use crate::vce::{init_vce, record_vce, CueHeatmap, FeaturePyramid, VceConfig, VceParams};

/// A pyramid of noise maps where every level except the anchor carries a
/// bright square patch. The fitting target is the normalized anchor with the
/// patch stamped in, so the module has to move the patch from the lower
/// levels into `F*`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    pub vce: VceConfig,
    pub grid: usize,
    /// Top-left corner `(row, col)` of the patch.
    pub patch_origin: (usize, usize),
    pub patch_size: usize,
    pub brightness: f64,
    pub noise: f64,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            vce: VceConfig::default(),
            grid: 8,
            patch_origin: (2, 3),
            patch_size: 2,
            brightness: 3.0,
            noise: 0.3,
            steps: 200,
            lr: 0.01,
            seed: 0,
        }
    }
}

impl DemoConfig {
    pub fn in_patch(&self, row: usize, col: usize) -> bool {
        let (r0, c0) = self.patch_origin;
        (r0..r0 + self.patch_size).contains(&row) && (c0..c0 + self.patch_size).contains(&col)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DemoReport {
    pub losses: Vec<f64>,
    pub heatmap: CueHeatmap,
    pub argmax: (usize, usize),
    pub argmax_in_patch: bool,
}

/// Builds the pyramid and target map `[H W x C]`.
pub fn demo_data(cfg: &DemoConfig) -> Result<(FeaturePyramid, Tensor)> {
    cfg.vce.validate()?;
    let (g, c) = (cfg.grid, cfg.vce.channels);
    let (r0, c0) = cfg.patch_origin;
    if cfg.patch_size == 0 || r0 + cfg.patch_size > g || c0 + cfg.patch_size > g {
        return Err(Error::InvalidArgument(format!("patch {:?}+{} outside {g}x{g} grid", cfg.patch_origin, cfg.patch_size)));
    }
    let mut rng = Rng::new(cfg.seed);
    let dir = rng.normal_tensor(&[c], 1.0);
    let dir = dir.scale(1.0 / dir.frobenius_norm());
    let anchor = cfg.vce.levels - 1;
    let mut levels = Vec::with_capacity(cfg.vce.levels);
    for l in 0..cfg.vce.levels {
        let mut m = rng.normal_tensor(&[g, g, c], cfg.noise);
        if l != anchor {
            stamp(&mut m, cfg, &dir, cfg.brightness);
        }
        levels.push(m);
    }
    let mut target = levels[anchor].clone();
    stamp(&mut target, cfg, &dir, cfg.brightness);
    let target = crate::numeric::layer_norm(&target, &Tensor::ones(&[c]), &Tensor::zeros(&[c]), cfg.vce.eps)?;
    let target = target.reshape(vec![g * g, c])?;
    Ok((FeaturePyramid::new(levels, anchor)?, target))
}

fn stamp(map: &mut Tensor, cfg: &DemoConfig, dir: &Tensor, amount: f64) {
    let (g, c) = (cfg.grid, cfg.vce.channels);
    for r in 0..g {
        for q in 0..g {
            if cfg.in_patch(r, q) {
                let px = &mut map.data_mut()[(r * g + q) * c..(r * g + q + 1) * c];
                for (v, d) in px.iter_mut().zip(dir.data()) {
                    *v += amount * d;
                }
            }
        }
    }
}

/// Fits a fresh module to the patch target by Adam on the MSE and reports
/// where the cue heatmap peaks.
pub fn planted_patch_demo(cfg: &DemoConfig) -> Result<(VceParams, DemoReport)> {
    let (pyramid, target) = demo_data(cfg)?;
    let mut params = init_vce(&cfg.vce, cfg.seed.wrapping_add(1))?;
    let shapes: Vec<Vec<usize>> = params.named_tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut opt = Optimizer::new(OptimizerKind::adam(), &refs);
    let target = Arc::new(target);
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let mut heat = None;
    for step in 0..=cfg.steps {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, true);
        let maps: Vec<Var> = pyramid.levels().iter().map(|m| tape.leaf_shared(Arc::clone(m), false)).collect();
        let out = record_vce(&mut tape, &params, &vars, &maps, pyramid.anchor_index())?;
        let t = tape.leaf_shared(Arc::clone(&target), false);
        let loss = tape.mse(out.enhanced, t)?;
        let value = tape.value(loss).item()?;
        losses.push(value);
        if step == cfg.steps || !value.is_finite() {
            heat = Some(CueHeatmap::from_cue(tape.value(out.cue), cfg.grid, cfg.grid)?);
            break;
        }
        tape.backward(loss)?;
        let grads: Vec<Option<Tensor>> = vars.flat().iter().map(|&v| tape.grad(v)).collect();
        opt.step(&mut params.tensors_mut(), &grads, cfg.lr)?;
    }
    let heatmap = heat.expect("loop always records the final heatmap");
    let argmax = heatmap.argmax();
    let report = DemoReport { losses, argmax, argmax_in_patch: cfg.in_patch(argmax.0, argmax.1), heatmap };
    Ok((params, report))
}
