use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskEncoding {
    /// Frozen random embedding row per task.
    RandomEmbedding,
    /// Unit vector on model dimension `t`.
    OneHot,
}

/// Every task maps the mean vision token `x_bar [C]` to a target `[d_out]`.
/// Task `t` uses `M_t = (1 - c) M_0 + c s_t M_0` with `s_t = (-1)^t`, so
/// conflict 0 gives identical tasks and conflict 1 gives `+-M_0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub tasks: usize,
    /// Vision grid `(H, W)`.
    pub grid: (usize, usize),
    pub channels: usize,
    pub d_out: usize,
    pub conflict: f64,
    pub task_encoding: TaskEncoding,
    /// Seed of the shared map `M_0`.
    pub map_seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            tasks: 2,
            grid: (3, 5),
            channels: 32,
            d_out: 4,
            conflict: 1.0,
            task_encoding: TaskEncoding::RandomEmbedding,
            map_seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.channels == 0 || self.d_out == 0 || self.grid.0 * self.grid.1 == 0 {
            return Err(Error::InvalidArgument(format!("bad task spec sizes: {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.conflict) {
            return Err(Error::InvalidArgument(format!("conflict must lie in [0, 1], got {}", self.conflict)));
        }
        Ok(())
    }

    pub fn vision_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn input_dim(&self) -> usize {
        self.vision_tokens() * self.channels
    }

    /// `M_0 [d_out x C]` with entries of std `sqrt(HW / C)`, which gives
    /// roughly unit target variance for standardized vision tokens.
    pub fn base_map(&self) -> Tensor {
        let std = (self.vision_tokens() as f64 / self.channels as f64).sqrt();
        Rng::new(self.map_seed).normal_tensor(&[self.d_out, self.channels], std)
    }

    pub fn target_maps(&self) -> Vec<Tensor> {
        let m0 = self.base_map();
        (0..self.tasks)
            .map(|t| {
                let s = if t % 2 == 0 { 1.0 } else { -1.0 };
                m0.scale((1.0 - self.conflict) + self.conflict * s)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub task: usize,
    pub split: Split,
    /// Vision grid `[H W x C]`, row-major.
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticTaskSpec,
    pub samples: Vec<Sample>,
}

/// First line of a dataset file.
#[derive(Serialize, Deserialize)]
struct Header {
    spec: SyntheticTaskSpec,
    samples: usize,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// Header line with the spec, then one JSON object per sample.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &Header { spec: self.spec.clone(), samples: self.samples.len() })?;
        w.write_all(b"\n")?;
        for s in &self.samples {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header: Header = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::Format("empty dataset file".into())),
        };
        let mut samples = Vec::with_capacity(header.samples);
        for line in lines {
            let line = line?;
            if !line.trim().is_empty() {
                samples.push(serde_json::from_str(&line)?);
            }
        }
        if samples.len() != header.samples {
            return Err(Error::Format(format!("header lists {} samples, found {}", header.samples, samples.len())));
        }
        Ok(Self { spec: header.spec, samples })
    }
}

/// `n` samples with tasks assigned round-robin. Each cycle of `tasks`
/// consecutive samples shares one vision input, so conflicting tasks disagree
/// on identical inputs. Tokens are `N(0, 1)` draws standardized over channels
/// (zero mean, unit population variance), like layer-normalized encoder
/// features. The first 80% of samples, rounded down to whole task cycles (at
/// least one), are the training split.
pub fn generate_conflict_dataset(spec: &SyntheticTaskSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n < spec.tasks {
        return Err(Error::InvalidArgument(format!("need at least {} samples, got {n}", spec.tasks)));
    }
    let maps = spec.target_maps();
    let (tokens, c) = (spec.vision_tokens(), spec.channels);
    let n_train = (n * 4 / 5 / spec.tasks * spec.tasks).max(spec.tasks);
    let mut rng = Rng::new(seed);
    let mut input = Vec::new();
    let samples = (0..n)
        .map(|i| {
            let task = i % spec.tasks;
            if task == 0 {
                input = rng.normal_tensor(&[tokens * c], 1.0).into_data();
                input.chunks_mut(c).for_each(standardize);
            }
            let input = input.clone();
            let mut mean = vec![0.0; c];
            for tok in input.chunks(c) {
                for (m, v) in mean.iter_mut().zip(tok) {
                    *m += v / tokens as f64;
                }
            }
            let target = maps[task].matmul(&Tensor::vector(mean)).expect("map and mean agree").into_data();
            Sample { task, split: if i < n_train { Split::Train } else { Split::Test }, input, target }
        })
        .collect();
    Ok(Dataset { spec: spec.clone(), samples })
}

fn standardize(tok: &mut [f64]) {
    let n = tok.len() as f64;
    let mean = tok.iter().sum::<f64>() / n;
    let sd = (tok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        tok.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
}
