//! Visual cue enhancement: deformable local attention over a pyramid of
//! feature maps, aggregation across levels and residual fusion into the
//! anchor map.
//!
//! Positions are `(row, col)` in grid units. Each head predicts `K` offsets
//! `(d_row, d_col)` and `K` attention logits from the level's own feature at
//! the anchor position; samples are bilinear and clamp at the border.

mod check;
mod demo;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numeric::{Rng, Tape, Tensor, Var, LN_EPS};

pub use check::{vce_gradient_suite, VCE_GRAD_STEP, VCE_GRAD_TOL};
pub use demo::{planted_patch_demo, DemoConfig, DemoReport};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VceConfig {
    /// Pyramid levels `L`.
    pub levels: usize,
    /// Heads per level `M`.
    pub heads: usize,
    /// Sampling points per head `K`.
    pub points: usize,
    /// Channels `C`.
    pub channels: usize,
    /// Fusion scale.
    pub gamma: f64,
    pub eps: f64,
}

impl Default for VceConfig {
    fn default() -> Self {
        Self { levels: 4, heads: 2, points: 4, channels: 32, gamma: 1.0, eps: LN_EPS }
    }
}

impl VceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.heads == 0 || self.points == 0 || self.channels == 0 {
            return Err(Error::InvalidArgument(format!("VCE sizes must be positive: {self:?}")));
        }
        if !(self.eps > 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidArgument(format!("bad VCE gamma/eps: {self:?}")));
        }
        Ok(())
    }
}

/// Storage precision for size reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp64,
    Fp32,
    Fp16,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Self::Fp64 => 8,
            Self::Fp32 => 4,
            Self::Fp16 => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VceSize {
    pub params: usize,
    pub bytes: usize,
    /// `bytes / 2^20`.
    pub megabytes: f64,
}

/// `L M (C^2 + 3 K C) + L C^2 + 2 C`: per-head value, attention and offset
/// projections, the aggregation matrix and the fusion norm affine.
pub fn count_vce_params(config: &VceConfig, precision: Precision) -> VceSize {
    let VceConfig { levels: l, heads: m, points: k, channels: c, .. } = *config;
    let params = l * m * (c * c + 3 * k * c) + l * c * c + 2 * c;
    let bytes = params * precision.bytes();
    VceSize { params, bytes, megabytes: bytes as f64 / (1u64 << 20) as f64 }
}

/// `L` maps of shape `[H x W x C]` and the index of the anchor map `F*`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    levels: Vec<Arc<Tensor>>,
    anchor_index: usize,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>, anchor_index: usize) -> Result<Self> {
        let Some(first) = levels.first() else {
            return Err(Error::InvalidArgument("pyramid needs at least one level".into()));
        };
        if first.ndim() != 3 {
            return Err(shape_err("pyramid", format!("maps must be H x W x C, got {:?}", first.shape())));
        }
        for (i, m) in levels.iter().enumerate() {
            if m.shape() != first.shape() {
                return Err(shape_err("pyramid", format!("level {i} is {:?}, level 0 is {:?}", m.shape(), first.shape())));
            }
            m.check_finite(&format!("pyramid level {i}"))?;
        }
        if anchor_index >= levels.len() {
            return Err(Error::InvalidArgument(format!("anchor index {anchor_index} for {} levels", levels.len())));
        }
        Ok(Self { levels: levels.into_iter().map(Arc::new).collect(), anchor_index })
    }

    pub fn levels(&self) -> &[Arc<Tensor>] {
        &self.levels
    }

    pub fn anchor(&self) -> &Tensor {
        &self.levels[self.anchor_index]
    }

    pub fn anchor_index(&self) -> usize {
        self.anchor_index
    }

    /// `(H, W, C)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.levels[0].shape();
        (s[0], s[1], s[2])
    }
}

/// Projections of one head on one level, all applied as `x W^T`.
#[derive(Clone, Debug)]
pub struct VceHead {
    /// `[C x C]`
    pub value: Arc<Tensor>,
    /// `[K x C]`
    pub attn: Arc<Tensor>,
    /// `[2K x C]`, rows ordered `(d_row_0, d_col_0, d_row_1, ...)`.
    pub offset: Arc<Tensor>,
}

#[derive(Clone, Debug)]
pub struct VceParams {
    pub config: VceConfig,
    /// `heads[l][m]`
    pub heads: Vec<Vec<VceHead>>,
    /// `[C x L C]`
    pub w_o: Arc<Tensor>,
    pub norm_gain: Arc<Tensor>,
    pub norm_bias: Arc<Tensor>,
}

/// Value projections fan-in uniform; attention, offset and aggregation
/// weights zero, so a fresh module contributes no cue and every head starts
/// at uniform attention on the anchor.
pub fn init_vce(config: &VceConfig, seed: u64) -> Result<VceParams> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let (c, k) = (config.channels, config.points);
    let bound = 1.0 / (c as f64).sqrt();
    let heads = (0..config.levels)
        .map(|_| {
            (0..config.heads)
                .map(|_| VceHead {
                    value: Arc::new(rng.uniform_tensor(&[c, c], -bound, bound)),
                    attn: Arc::new(Tensor::zeros(&[k, c])),
                    offset: Arc::new(Tensor::zeros(&[2 * k, c])),
                })
                .collect()
        })
        .collect();
    Ok(VceParams {
        config: *config,
        heads,
        w_o: Arc::new(Tensor::zeros(&[c, config.levels * c])),
        norm_gain: Arc::new(Tensor::ones(&[c])),
        norm_bias: Arc::new(Tensor::zeros(&[c])),
    })
}

/// Tape handles mirroring [`VceParams`].
#[derive(Clone, Debug)]
pub struct VceVars {
    pub heads: Vec<Vec<[Var; 3]>>,
    pub w_o: Var,
    pub norm_gain: Var,
    pub norm_bias: Var,
}

impl VceVars {
    /// Flattened in [`VceParams::named_tensors`] order.
    pub fn flat(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.heads.iter().flatten().flat_map(|h| h.iter().copied()).collect();
        v.extend([self.w_o, self.norm_gain, self.norm_bias]);
        v
    }
}

impl VceParams {
    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, level) in self.heads.iter().enumerate() {
            for (m, h) in level.iter().enumerate() {
                out.push((format!("vce.l{l}.h{m}.value"), &*h.value));
                out.push((format!("vce.l{l}.h{m}.attn"), &*h.attn));
                out.push((format!("vce.l{l}.h{m}.offset"), &*h.offset));
            }
        }
        out.push(("vce.w_o".into(), &*self.w_o));
        out.push(("vce.norm_gain".into(), &*self.norm_gain));
        out.push(("vce.norm_bias".into(), &*self.norm_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        let mut out = Vec::new();
        for level in &mut self.heads {
            for h in level {
                out.push(&mut h.value);
                out.push(&mut h.attn);
                out.push(&mut h.offset);
            }
        }
        out.push(&mut self.w_o);
        out.push(&mut self.norm_gain);
        out.push(&mut self.norm_bias);
        out
    }

    /// Replaces every tensor from `named` (as produced by
    /// [`Self::named_tensors`]), checking names and shapes.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> =
            self.named_tensors().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        if expected.len() != named.len() {
            return Err(Error::Format(format!("expected {} VCE tensors, got {}", expected.len(), named.len())));
        }
        for ((n, s), (gn, gt)) in expected.iter().zip(named) {
            if n != gn || s.as_slice() != gt.shape() {
                return Err(Error::Format(format!("VCE tensor {gn} {:?} does not match {n} {s:?}", gt.shape())));
            }
        }
        for (slot, (_, t)) in self.tensors_mut().into_iter().zip(named) {
            *slot = Arc::new(t.clone());
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> VceVars {
        let mut leaf = |t: &Arc<Tensor>| tape.leaf_shared(Arc::clone(t), trainable);
        let heads = self
            .heads
            .iter()
            .map(|level| level.iter().map(|h| [leaf(&h.value), leaf(&h.attn), leaf(&h.offset)]).collect())
            .collect();
        VceVars { heads, w_o: leaf(&self.w_o), norm_gain: leaf(&self.norm_gain), norm_bias: leaf(&self.norm_bias) }
    }

    fn check(&self, pyramid: &FeaturePyramid) -> Result<()> {
        let (_, _, c) = pyramid.dims();
        if c != self.config.channels || pyramid.levels.len() != self.config.levels {
            return Err(shape_err(
                "vce",
                format!(
                    "pyramid has {} levels of {c} channels, module expects {} of {}",
                    pyramid.levels.len(),
                    self.config.levels,
                    self.config.channels
                ),
            ));
        }
        Ok(())
    }
}

/// Deformable attention of one level at the given anchor positions.
/// `map` is `[H x W x C]`, `rows` is its features at the anchors `[N x C]`.
/// Returns `[N x C]`.
pub fn record_level(
    tape: &mut Tape,
    map: Var,
    rows: Var,
    anchors: &[(f64, f64)],
    heads: &[[Var; 3]],
    k: usize,
) -> Result<Var> {
    let n = anchors.len();
    let base: Vec<f64> = anchors.iter().flat_map(|&(r, c)| std::iter::repeat_n([r, c], k).flatten()).collect();
    let base = tape.constant(Tensor::matrix(n * k, 2, base)?);
    let mut total: Option<Var> = None;
    for &[value, attn, offset] in heads {
        let off = tape.matmul_nt(rows, offset)?;
        let off = tape.reshape(off, &[n * k, 2])?;
        let pos = tape.add(base, off)?;
        let samples = tape.bilinear_sample(map, pos)?;
        let logits = tape.matmul_nt(rows, attn)?;
        let a = tape.softmax(logits);
        let mixed = tape.group_weighted_sum(samples, a)?;
        let out = tape.matmul_nt(mixed, value)?;
        total = Some(match total {
            Some(t) => tape.add(t, out)?,
            None => out,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("level has no heads".into()))
}

/// Outputs of [`record_vce`].
#[derive(Clone, Copy, Debug)]
pub struct VceOutputs {
    /// `F'` as `[HW x C]`.
    pub cue: Var,
    /// `Norm(F* + gamma F')` as `[HW x C]`.
    pub enhanced: Var,
}

/// Records the full module over every grid position. `maps` are the pyramid
/// levels registered on the tape.
pub fn record_vce(tape: &mut Tape, params: &VceParams, vars: &VceVars, maps: &[Var], anchor: usize) -> Result<VceOutputs> {
    let (h, w, c) = match tape.shape(maps[0]) {
        [h, w, c] => (*h, *w, *c),
        s => return Err(shape_err("vce", format!("maps must be H x W x C, got {s:?}"))),
    };
    if maps.len() != params.config.levels || c != params.config.channels {
        return Err(shape_err("vce", format!("{} maps of {c} channels", maps.len())));
    }
    let anchors: Vec<(f64, f64)> = (0..h).flat_map(|r| (0..w).map(move |q| (r as f64, q as f64))).collect();
    let mut per_level = Vec::with_capacity(maps.len());
    let mut anchor_rows = None;
    for (l, &m) in maps.iter().enumerate() {
        let rows = tape.reshape(m, &[h * w, c])?;
        if l == anchor {
            anchor_rows = Some(rows);
        }
        per_level.push(record_level(tape, m, rows, &anchors, &vars.heads[l], params.config.points)?);
    }
    let cat = tape.concat_cols(&per_level)?;
    let cue = tape.matmul_nt(cat, vars.w_o)?;
    let anchor_rows = anchor_rows.ok_or_else(|| Error::InvalidArgument(format!("anchor index {anchor}")))?;
    let scaled = tape.scale(cue, params.config.gamma);
    let sum = tape.add(anchor_rows, scaled)?;
    let enhanced = tape.layer_norm(sum, vars.norm_gain, vars.norm_bias, params.config.eps)?;
    Ok(VceOutputs { cue, enhanced })
}

/// Per-position `l2` norm of `F'`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CueHeatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major `H x W`.
    pub values: Vec<f64>,
}

impl CueHeatmap {
    /// From `F'` laid out `[H W x C]` or `[H x W x C]`.
    pub fn from_cue(cue: &Tensor, height: usize, width: usize) -> Result<Self> {
        if cue.outer_len() != height * width {
            return Err(shape_err("heatmap", format!("{:?} for a {height}x{width} grid", cue.shape())));
        }
        let c = cue.last_dim();
        let values = cue.data().chunks(c).map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        Ok(Self { height, width, values })
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// `(row, col)` of the largest entry; ties go to the first in row-major order.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.12e}")).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }
}

/// Enhanced map `[H x W x C]` and the cue heatmap.
pub fn vce_forward(pyramid: &FeaturePyramid, params: &VceParams) -> Result<(Tensor, CueHeatmap)> {
    params.check(pyramid)?;
    let (h, w, c) = pyramid.dims();
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let maps: Vec<Var> = pyramid.levels.iter().map(|m| tape.leaf_shared(Arc::clone(m), false)).collect();
    let out = record_vce(&mut tape, params, &vars, &maps, pyramid.anchor_index)?;
    let heat = CueHeatmap::from_cue(tape.value(out.cue), h, w)?;
    let enhanced = tape.value(out.enhanced).clone().reshape(vec![h, w, c])?;
    Ok((enhanced, heat))
}

/// Deformable attention output `[C]` of one level at grid position `p_q`.
pub fn deform_attn_level(map: &Tensor, p_q: (usize, usize), heads: &[VceHead]) -> Result<Tensor> {
    let (h, w, c) = match map.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(shape_err("deform_attn_level", format!("map must be H x W x C, got {s:?}"))),
    };
    if p_q.0 >= h || p_q.1 >= w {
        return Err(Error::InvalidArgument(format!("position {p_q:?} outside {h}x{w} grid")));
    }
    let Some(first) = heads.first() else {
        return Err(Error::InvalidArgument("level has no heads".into()));
    };
    let k = first.attn.shape()[0];
    let mut tape = Tape::new();
    let m = tape.leaf_shared(Arc::new(map.clone()), false);
    let start = (p_q.0 * w + p_q.1) * c;
    let rows = tape.constant(Tensor::matrix(1, c, map.data()[start..start + c].to_vec())?);
    let hv: Vec<[Var; 3]> = heads
        .iter()
        .map(|hd| {
            [
                tape.leaf_shared(Arc::clone(&hd.value), false),
                tape.leaf_shared(Arc::clone(&hd.attn), false),
                tape.leaf_shared(Arc::clone(&hd.offset), false),
            ]
        })
        .collect();
    let out = record_level(&mut tape, m, rows, &[(p_q.0 as f64, p_q.1 as f64)], &hv, k)?;
    tape.value(out).clone().reshape(vec![c])
}

/// `W_o concat(features)`.
pub fn aggregate_levels(features: &[Tensor], w_o: &Tensor) -> Result<Tensor> {
    let Some(first) = features.first() else {
        return Err(Error::InvalidArgument("no level features".into()));
    };
    let c = first.len();
    if features.iter().any(|f| f.len() != c) {
        return Err(shape_err("aggregate_levels", "level features differ in width"));
    }
    let (rows, cols) = w_o.dims2()?;
    if cols != c * features.len() {
        return Err(shape_err("aggregate_levels", format!("W_o is {rows}x{cols}, concat width {}", c * features.len())));
    }
    let cat: Vec<f64> = features.iter().flat_map(|f| f.data().iter().copied()).collect();
    w_o.matmul(&Tensor::vector(cat))
}

/// Per-position `LayerNorm(F* + gamma F')` over channels.
pub fn fuse_residual(
    f_star: &Tensor,
    f_prime: &Tensor,
    gamma: f64,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if f_star.shape() != f_prime.shape() {
        return Err(shape_err("fuse_residual", format!("{:?} vs {:?}", f_star.shape(), f_prime.shape())));
    }
    let sum = f_star.add(&f_prime.scale(gamma))?;
    crate::numeric::layer_norm(&sum, gain, bias, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::layer_norm;

    fn random_params(config: &VceConfig, seed: u64, scale: f64) -> VceParams {
        let mut p = init_vce(config, seed).unwrap();
        let mut rng = Rng::new(seed + 1000);
        for t in p.tensors_mut() {
            let shape = t.shape().to_vec();
            *t = Arc::new(rng.normal_tensor(&shape, scale));
        }
        p
    }

    /// Four-point bilinear read with border clamping, written out directly.
    fn sample(map: &Tensor, row: f64, col: f64) -> Vec<f64> {
        let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
        let r = row.clamp(0.0, (h - 1) as f64);
        let q = col.clamp(0.0, (w - 1) as f64);
        let (r0, q0) = (r.floor() as usize, q.floor() as usize);
        let (r1, q1) = ((r0 + 1).min(h - 1), (q0 + 1).min(w - 1));
        let (fr, fq) = (r - r0 as f64, q - q0 as f64);
        let px = |i: usize, j: usize, ch: usize| map.data()[(i * w + j) * c + ch];
        (0..c)
            .map(|ch| {
                (1.0 - fr) * (1.0 - fq) * px(r0, q0, ch)
                    + (1.0 - fr) * fq * px(r0, q1, ch)
                    + fr * (1.0 - fq) * px(r1, q0, ch)
                    + fr * fq * px(r1, q1, ch)
            })
            .collect()
    }

    fn brute_force(map: &Tensor, p: (usize, usize), heads: &[VceHead]) -> Vec<f64> {
        let c = map.shape()[2];
        let w = map.shape()[1];
        let f = &map.data()[(p.0 * w + p.1) * c..(p.0 * w + p.1 + 1) * c];
        let dot = |m: &Tensor, row: usize| (0..c).map(|j| m.at(row, j) * f[j]).sum::<f64>();
        let mut out = vec![0.0; c];
        for h in heads {
            let k = h.attn.shape()[0];
            let logits: Vec<f64> = (0..k).map(|i| dot(&h.attn, i)).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for i in 0..k {
                let a = (logits[i] - mx).exp() / z;
                let s = sample(map, p.0 as f64 + dot(&h.offset, 2 * i), p.1 as f64 + dot(&h.offset, 2 * i + 1));
                for o in 0..c {
                    out[o] += a * (0..c).map(|j| h.value.at(o, j) * s[j]).sum::<f64>();
                }
            }
        }
        out
    }

    #[test]
    fn zero_projections_return_anchor_feature() {
        let config = VceConfig { levels: 1, heads: 1, points: 3, channels: 4, ..VceConfig::default() };
        let mut p = init_vce(&config, 0).unwrap();
        p.heads[0][0].value = Arc::new(Tensor::eye(4));
        let map = Rng::new(1).normal_tensor(&[3, 4, 4], 1.0);
        let out = deform_attn_level(&map, (1, 2), &p.heads[0]).unwrap();
        let want = &map.data()[(4 + 2) * 4..(4 + 3) * 4];
        assert!(out.data().iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn single_point_sums_heads() {
        let config = VceConfig { levels: 1, heads: 2, points: 1, channels: 3, ..VceConfig::default() };
        let p = random_params(&config, 3, 0.7);
        let map = Rng::new(2).normal_tensor(&[5, 5, 3], 1.0);
        let out = deform_attn_level(&map, (2, 2), &p.heads[0]).unwrap();
        let f = &map.data()[(2 * 5 + 2) * 3..(2 * 5 + 3) * 3];
        let mut want = vec![0.0; 3];
        for h in &p.heads[0] {
            let off: Vec<f64> = (0..2).map(|i| (0..3).map(|j| h.offset.at(i, j) * f[j]).sum()).collect();
            let s = sample(&map, 2.0 + off[0], 2.0 + off[1]);
            for o in 0..3 {
                want[o] += (0..3).map(|j| h.value.at(o, j) * s[j]).sum::<f64>();
            }
        }
        assert!(out.data().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn matches_brute_force_oracle() {
        let config = VceConfig { levels: 1, heads: 2, points: 4, channels: 3, ..VceConfig::default() };
        for seed in 0..5 {
            let p = random_params(&config, seed, 0.8);
            let map = Rng::new(seed + 50).normal_tensor(&[5, 5, 3], 1.0);
            for pos in [(0, 0), (2, 3), (4, 4), (1, 0)] {
                let got = deform_attn_level(&map, pos, &p.heads[0]).unwrap();
                let want = brute_force(&map, pos, &p.heads[0]);
                for (a, b) in got.data().iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn aggregation_cases() {
        let f = Tensor::vector(vec![1.0, -2.0, 3.0]);
        assert_eq!(aggregate_levels(&[f.clone()], &Tensor::eye(3)).unwrap().data(), f.data());
        let z = aggregate_levels(&[f.clone(), f.clone()], &Tensor::zeros(&[3, 6])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let mut rng = Rng::new(8);
        let feats: Vec<Tensor> = (0..3).map(|_| rng.normal_tensor(&[4], 1.0)).collect();
        let w_o = rng.normal_tensor(&[4, 12], 1.0);
        let got = aggregate_levels(&feats, &w_o).unwrap();
        for i in 0..4 {
            let mut s = 0.0;
            for (l, f) in feats.iter().enumerate() {
                for j in 0..4 {
                    s += w_o.at(i, l * 4 + j) * f.data()[j];
                }
            }
            assert!((got.data()[i] - s).abs() < 1e-12);
        }
        assert!(aggregate_levels(&feats, &Tensor::zeros(&[4, 8])).is_err());
    }

    #[test]
    fn fusion_cases() {
        let mut rng = Rng::new(9);
        let (fs, fp) = (rng.normal_tensor(&[3, 3, 5], 1.0), rng.normal_tensor(&[3, 3, 5], 1.0));
        let (g, b) = (rng.normal_tensor(&[5], 1.0), rng.normal_tensor(&[5], 1.0));
        let zero = fuse_residual(&fs, &fp, 0.0, &g, &b, LN_EPS).unwrap();
        assert_eq!(zero.data(), layer_norm(&fs, &g, &b, LN_EPS).unwrap().data());
        let got = fuse_residual(&fs, &fp, 1.0, &g, &b, LN_EPS).unwrap();
        for pos in 0..9 {
            let v: Vec<f64> = (0..5).map(|j| fs.data()[pos * 5 + j] + fp.data()[pos * 5 + j]).collect();
            let mean = v.iter().sum::<f64>() / 5.0;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
            for j in 0..5 {
                let want = (v[j] - mean) / (var + LN_EPS).sqrt() * g.data()[j] + b.data()[j];
                assert!((got.data()[pos * 5 + j] - want).abs() < 1e-12);
            }
        }
        assert!(fuse_residual(&fs, &Tensor::zeros(&[3, 3, 4]), 1.0, &g, &b, LN_EPS).is_err());
        assert_eq!(VceConfig::default().gamma, 1.0);
    }

    #[test]
    fn fresh_module_is_normalized_anchor() {
        let config = VceConfig { levels: 3, heads: 2, points: 4, channels: 6, ..VceConfig::default() };
        let p = init_vce(&config, 4).unwrap();
        let mut rng = Rng::new(5);
        let maps: Vec<Tensor> = (0..3).map(|_| rng.normal_tensor(&[4, 5, 6], 1.0)).collect();
        let pyr = FeaturePyramid::new(maps, 2).unwrap();
        let (enh, heat) = vce_forward(&pyr, &p).unwrap();
        let want = layer_norm(pyr.anchor(), &Tensor::ones(&[6]), &Tensor::zeros(&[6]), LN_EPS).unwrap();
        assert_eq!(enh.data(), want.data());
        assert!(heat.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_level_pyramid_runs() {
        let config = VceConfig { levels: 1, heads: 1, points: 2, channels: 4, ..VceConfig::default() };
        let p = random_params(&config, 1, 0.3);
        let pyr = FeaturePyramid::new(vec![Rng::new(0).normal_tensor(&[3, 3, 4], 1.0)], 0).unwrap();
        let (enh, heat) = vce_forward(&pyr, &p).unwrap();
        assert!(enh.is_finite());
        // cue at each position is W_o applied to the level's own enhancement
        for r in 0..3 {
            for q in 0..3 {
                let f = deform_attn_level(pyr.anchor(), (r, q), &p.heads[0]).unwrap();
                let cue = aggregate_levels(&[f], &p.w_o).unwrap();
                assert!((heat.at(r, q) - cue.frobenius_norm()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parameter_counts() {
        let tiny = VceConfig { levels: 1, heads: 1, points: 1, channels: 2, ..VceConfig::default() };
        // value 4 + attn 2 + offset 4 + W_o 4 + norm 4
        assert_eq!(count_vce_params(&tiny, Precision::Fp32).params, 18);
        assert_eq!(init_vce(&tiny, 0).unwrap().param_count(), 18);
        let d = VceConfig::default();
        let size = count_vce_params(&d, Precision::Fp32);
        assert_eq!(size.params, 4 * 2 * (1024 + 384) + 4 * 1024 + 64);
        assert_eq!(size.params, init_vce(&d, 0).unwrap().param_count());
        assert_eq!(size.bytes, size.params * 4);
        let double = count_vce_params(&VceConfig { levels: 8, ..d }, Precision::Fp32).params;
        assert_eq!(double - 64, 2 * (size.params - 64));
    }

    #[test]
    fn clamped_stencils_stay_inside_grid() {
        let mut rng = Rng::new(11);
        for _ in 0..2000 {
            let (h, w) = (1 + rng.below(7), 1 + rng.below(7));
            let (row, col) = (rng.uniform(-20.0, 20.0), rng.uniform(-20.0, 20.0));
            let st = crate::numeric::Stencil::new(h, w, row, col);
            for (r, q, wgt) in st.weights() {
                assert!(r < h && q < w && (0.0..=1.0).contains(&wgt));
            }
        }
    }

    #[test]
    fn bad_inputs() {
        assert!(FeaturePyramid::new(vec![], 0).is_err());
        assert!(FeaturePyramid::new(vec![Tensor::zeros(&[2, 2, 2])], 1).is_err());
        assert!(FeaturePyramid::new(vec![Tensor::zeros(&[2, 2, 2]), Tensor::zeros(&[2, 3, 2])], 0).is_err());
        let mut nan = Tensor::zeros(&[2, 2, 2]);
        nan.data_mut()[0] = f64::NAN;
        assert!(FeaturePyramid::new(vec![nan], 0).is_err());
        assert!(init_vce(&VceConfig { points: 0, ..VceConfig::default() }, 0).is_err());
        let p = init_vce(&VceConfig { levels: 1, channels: 2, ..VceConfig::default() }, 0).unwrap();
        assert!(deform_attn_level(&Tensor::zeros(&[2, 2, 2]), (2, 0), &p.heads[0]).is_err());
    }
}
