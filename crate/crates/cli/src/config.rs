//! TOML experiment config. Each subcommand reads its own section; unknown keys
//! are rejected and command-line flags override file values.

use std::path::{Path, PathBuf};

use duallora::adapters::{AdapterKind, GateStrategy, LoraHyper, ScaleRule};
use duallora::conflictbench::{matched_lora_rank, BenchConfig, MatchRule, ModelConfig, SyntheticTaskSpec, TrainConfig, DEFAULT_BINS};
use duallora::vce::{DemoConfig, VceConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub verify: VerifyConfig,
    pub bench: BenchSection,
    pub train_conflict: TrainConflictConfig,
    pub vce_demo: DemoConfig,
    pub entropy: EntropyConfig,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Ok(toml::from_str(&text)?)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// First seed; instances use `seed..seed + instances`.
    pub seed: u64,
    pub instances: usize,
    pub grad_instances: usize,
    /// Terms in the rank-one sum.
    pub k: usize,
    pub d: usize,
    /// Group rank patterns for the grouped statements.
    pub patterns: Vec<Vec<usize>>,
    /// Seeds of the learned-gate fit.
    pub learned_seeds: usize,
    pub learned_steps: usize,
    pub learned_rank: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            grad_instances: 10,
            k: 3,
            d: 8,
            patterns: vec![vec![2, 2, 2, 2], vec![4, 2, 1, 1]],
            learned_seeds: 5,
            learned_steps: 5000,
            learned_rank: 4,
        }
    }
}

/// Mirrors [`BenchConfig`] plus the ordering switch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub d: usize,
    pub tokens: usize,
    pub layers: usize,
    pub rank: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
    pub vce: VceConfig,
    pub vce_grid: (usize, usize),
    pub max_cv: f64,
    /// Exit 1 unless the latency ratios are ordered
    /// dual-lora < moe-top2 < moe-softmax-4 and dual-lora < dual-lora+vce.
    pub assert_ordering: bool,
}

impl Default for BenchSection {
    fn default() -> Self {
        let b = BenchConfig::default();
        Self {
            d: b.d,
            tokens: b.tokens,
            layers: b.layers,
            rank: b.rank,
            reps: b.reps,
            warmup: b.warmup,
            seed: b.seed,
            vce: b.vce,
            vce_grid: b.vce_grid,
            max_cv: b.max_cv,
            assert_ordering: false,
        }
    }
}

impl BenchSection {
    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            d: self.d,
            tokens: self.tokens,
            layers: self.layers,
            rank: self.rank,
            reps: self.reps,
            warmup: self.warmup,
            seed: self.seed,
            vce: self.vce,
            vce_grid: self.vce_grid,
            max_cv: self.max_cv,
        }
    }
}

/// Which adapters a conflict run trains, by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum VariantName {
    None,
    Lora,
    DualLora,
    MoeTop2,
    MoeSoftmax,
    MoeRectified,
}

impl VariantName {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Lora => "lora",
            Self::DualLora => "dual-lora",
            Self::MoeTop2 => "moe-top2",
            Self::MoeSoftmax => "moe-softmax",
            Self::MoeRectified => "moe-rectified",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConflictConfig {
    pub spec: SyntheticTaskSpec,
    pub model: ModelConfig,
    pub samples: usize,
    /// Runs use seeds `seed..seed + seeds` for data, init, batch order and
    /// dropout alike.
    pub seed: u64,
    pub seeds: usize,
    pub variants: Vec<VariantName>,
    /// Total rank of every adapter. MoE splits it over four experts.
    pub rank: usize,
    /// Paired LoRA sizing against Dual-LoRA.
    pub match_rule: MatchRule,
    /// `alpha = alpha_ratio * rank`.
    pub alpha_ratio: f64,
    pub scale_rule: ScaleRule,
    pub dropout: f64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub log_every: usize,
    pub entropy_bins: usize,
    pub checkpoints: bool,
}

impl Default for TrainConflictConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            spec: SyntheticTaskSpec::default(),
            model: ModelConfig::default(),
            samples: 2000,
            seed: 0,
            seeds: 5,
            variants: vec![VariantName::Lora, VariantName::DualLora],
            rank: 64,
            match_rule: MatchRule::TotalRank,
            alpha_ratio: 2.0,
            scale_rule: ScaleRule::default(),
            dropout: 0.05,
            stage1_steps: t.stage1_steps,
            stage2_steps: t.stage2_steps,
            lr: t.lr,
            batch_size: t.batch_size,
            log_every: t.log_every,
            entropy_bins: DEFAULT_BINS,
            checkpoints: true,
        }
    }
}

impl TrainConflictConfig {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            stage1_steps: self.stage1_steps,
            stage2_steps: self.stage2_steps,
            lr: self.lr,
            batch_size: self.batch_size,
            seed,
            log_every: self.log_every,
        }
    }

    fn hyper(&self, rank: usize) -> LoraHyper {
        LoraHyper { rank, alpha: self.alpha_ratio * rank as f64, dropout: self.dropout, scale_rule: self.scale_rule }
    }

    pub fn adapter(&self, v: VariantName) -> Result<Option<AdapterKind>> {
        let moe = |strategy| {
            if !self.rank.is_multiple_of(4) {
                return Err(CliError::Usage(format!("MoE splits rank over 4 experts; {} is not a multiple of 4", self.rank)));
            }
            Ok(AdapterKind::Moe { experts: vec![self.hyper(self.rank / 4); 4], strategy })
        };
        Ok(Some(match v {
            VariantName::None => return Ok(None),
            VariantName::Lora => {
                AdapterKind::Lora { hyper: self.hyper(matched_lora_rank(self.match_rule, self.rank, self.model.d_model)) }
            }
            VariantName::DualLora => AdapterKind::DualLora { hyper: self.hyper(self.rank) },
            VariantName::MoeTop2 => moe(GateStrategy::TopK(2))?,
            VariantName::MoeSoftmax => moe(GateStrategy::SoftmaxDense)?,
            VariantName::MoeRectified => moe(GateStrategy::Rectified)?,
        }))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 || self.variants.is_empty() || self.samples < self.spec.tasks {
            return Err(CliError::Usage("train-conflict needs seeds >= 1, one variant and samples >= tasks".into()));
        }
        for v in &self.variants {
            self.adapter(*v)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropyConfig {
    /// Checkpoint stem (the path without `.json` / `.bin`).
    pub checkpoint: Option<PathBuf>,
    pub bins: usize,
    /// Probe samples drawn from the checkpoint's task spec.
    pub probes: usize,
    pub probe_seed: u64,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self { checkpoint: None, bins: DEFAULT_BINS, probes: 500, probe_seed: 1000 }
    }
}
