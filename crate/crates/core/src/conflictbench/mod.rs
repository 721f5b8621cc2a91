//! Toy two-stage training on synthetic conflicting tasks, activation entropy
//! and adapter latency.

pub mod bench;
pub mod data;
pub mod entropy;
pub mod model;
pub mod train;

pub use bench::{default_variants, latency_bench, BenchConfig, BenchVariant, LatencyRow, LatencyTable};
pub use data::{generate_conflict_dataset, Dataset, Sample, Split, SyntheticTaskSpec, TaskEncoding};
pub use entropy::{entropy_analysis, entropy_pair, histogram_entropy, mean_entropies, LayerEntropy, DEFAULT_BINS};
pub use model::{ModelConfig, ToyModel, Trainable};
pub use train::{
    evaluate, load_checkpoint, matched_lora_rank, param_counts, save_checkpoint, train, LogPoint, MatchRule,
    MetricsReport, ParamCounts, TrainConfig,
};
