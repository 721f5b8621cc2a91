use serde::{Deserialize, Serialize};

use crate::adapters::Mode;
use crate::conflictbench::data::Sample;
use crate::conflictbench::model::{ToyModel, Trainable};
use crate::error::{Error, Result};
use crate::numeric::{Rng, Tape};

pub const DEFAULT_BINS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntropy {
    pub layer: String,
    pub skill: f64,
    pub rectified: f64,
}

/// Shannon entropy (nats) of the histogram of `values` over `[lo, hi]` with
/// `bins` equal bins. A zero-width range gives 0.
pub fn histogram_entropy(values: &[f64], lo: f64, hi: f64, bins: usize) -> f64 {
    if values.is_empty() || bins == 0 || hi <= lo {
        return 0.0;
    }
    let mut counts = vec![0usize; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = values.len() as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Range of the pooled set.
pub fn pooled_range(a: &[f64], b: &[f64]) -> (f64, f64) {
    a.iter().chain(b).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Entropies of the two activation sets, binned on their pooled range.
pub fn entropy_pair(skill: &[f64], rectified: &[f64], bins: usize) -> (f64, f64) {
    let (lo, hi) = pooled_range(skill, rectified);
    (histogram_entropy(skill, lo, hi, bins), histogram_entropy(rectified, lo, hi, bins))
}

/// Per Dual-LoRA layer, the entropy of `LayerNorm(S x)` and of
/// `LayerNorm(S x) * ReLU(T x)` over all probe tokens, in eval mode.
pub fn entropy_analysis(model: &ToyModel, probes: &[&Sample], bins: usize) -> Result<Vec<LayerEntropy>> {
    if probes.is_empty() {
        return Err(Error::InvalidArgument("no probe samples".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("bin count must be positive".into()));
    }
    let mut names = Vec::new();
    let mut acts: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for chunk in probes.chunks(64) {
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, Trainable::NONE);
        let out = model.forward(&mut tape, &vars, chunk, Mode::Eval, &mut Rng::new(0))?;
        if acts.is_empty() {
            names = out.traces.iter().map(|t| t.name.clone()).collect();
            acts.resize(out.traces.len(), (Vec::new(), Vec::new()));
        }
        for (a, t) in acts.iter_mut().zip(&out.traces) {
            a.0.extend_from_slice(tape.value(t.trace.skill).data());
            a.1.extend_from_slice(tape.value(t.trace.rectified).data());
        }
    }
    if acts.is_empty() {
        return Err(Error::InvalidArgument("model has no Dual-LoRA layers".into()));
    }
    Ok(names
        .into_iter()
        .zip(acts)
        .map(|(layer, (s, r))| {
            let (skill, rectified) = entropy_pair(&s, &r, bins);
            LayerEntropy { layer, skill, rectified }
        })
        .collect())
}

pub fn mean_entropies(layers: &[LayerEntropy]) -> (f64, f64) {
    let n = layers.len().max(1) as f64;
    (
        layers.iter().map(|l| l.skill).sum::<f64>() / n,
        layers.iter().map(|l| l.rectified).sum::<f64>() / n,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_and_uniform() {
        assert_eq!(histogram_entropy(&[2.5; 10], 2.5, 2.5, 64), 0.0);
        assert_eq!(entropy_pair(&[1.0; 4], &[1.0; 3], 64), (0.0, 0.0));
        let uniform: Vec<f64> = (0..64).map(|i| i as f64 + 0.5).collect();
        assert!((histogram_entropy(&uniform, 0.0, 64.0, 64) - 64f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn max_lands_in_last_bin() {
        let h = histogram_entropy(&[0.0, 1.0], 0.0, 1.0, 4);
        assert!((h - 2f64.ln()).abs() < 1e-15);
    }
}
