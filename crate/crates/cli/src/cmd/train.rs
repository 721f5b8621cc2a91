use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use clap::Args;
use duallora::adapters::AdapterKind;
use duallora::conflictbench::bench::median;
use duallora::conflictbench::{
    entropy_analysis, generate_conflict_dataset, mean_entropies, save_checkpoint, train, MatchRule, MetricsReport, Split,
    ToyModel,
};
use serde::Serialize;
use serde_json::json;

use super::num;
use crate::config::{TrainConflictConfig, VariantName};
use crate::error::{CliError, Result};
use crate::output::{read_csv, Run};
use crate::svg;

#[derive(Args)]
pub struct TrainConflictArgs {
    /// Number of seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// First seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    conflict: Option<f64>,
    #[arg(long, value_enum, value_delimiter = ',')]
    variants: Option<Vec<VariantName>>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    stage1_steps: Option<usize>,
    #[arg(long)]
    stage2_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    log_every: Option<usize>,
    /// Size LoRA to Dual-LoRA's parameter count instead of its rank.
    #[arg(long)]
    match_params: bool,
    /// Drop the cue-enhancement front end.
    #[arg(long)]
    no_vce: bool,
    #[arg(long)]
    no_checkpoints: bool,
    /// Also write every generated dataset as JSON lines under data/.
    #[arg(long)]
    save_datasets: bool,
}

impl TrainConflictArgs {
    fn apply(&self, cfg: &mut TrainConflictConfig) {
        cfg.seeds = self.seeds.unwrap_or(cfg.seeds);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        cfg.spec.conflict = self.conflict.unwrap_or(cfg.spec.conflict);
        if let Some(v) = &self.variants {
            cfg.variants = v.clone();
        }
        cfg.rank = self.rank.unwrap_or(cfg.rank);
        cfg.samples = self.samples.unwrap_or(cfg.samples);
        cfg.stage1_steps = self.stage1_steps.unwrap_or(cfg.stage1_steps);
        cfg.stage2_steps = self.stage2_steps.unwrap_or(cfg.stage2_steps);
        cfg.lr = self.lr.unwrap_or(cfg.lr);
        cfg.log_every = self.log_every.unwrap_or(cfg.log_every);
        if self.match_params {
            cfg.match_rule = MatchRule::ParamCount;
        }
        if self.no_vce {
            cfg.model.vce = None;
        }
        if self.no_checkpoints {
            cfg.checkpoints = false;
        }
    }
}

#[derive(Serialize)]
struct Resolved<'a> {
    #[serde(flatten)]
    config: &'a TrainConflictConfig,
    save_datasets: bool,
}

struct RunResult {
    seed: u64,
    variant: VariantName,
    report: MetricsReport,
}

#[derive(Serialize)]
struct VariantSummary {
    variant: String,
    runs: usize,
    median_eval_total: f64,
    mean_eval_total: f64,
    /// Seeds on which this variant's eval loss is below the baseline's.
    wins_vs_baseline: Option<usize>,
    mean_h_skill: Option<f64>,
    mean_h_rectified: Option<f64>,
    /// Runs whose mean rectified entropy is below the mean skill entropy.
    rectified_lower_runs: Option<usize>,
}

fn task_cols(tasks: usize) -> Vec<String> {
    (0..tasks).map(|t| format!("task_{t}")).collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn summarize(cfg: &TrainConflictConfig, results: &[RunResult]) -> Vec<VariantSummary> {
    let baseline = cfg.variants[0];
    let base_loss: BTreeMap<u64, f64> =
        results.iter().filter(|r| r.variant == baseline).map(|r| (r.seed, r.report.eval_total)).collect();
    cfg.variants
        .iter()
        .map(|&v| {
            let mine: Vec<&RunResult> = results.iter().filter(|r| r.variant == v).collect();
            let losses: Vec<f64> = mine.iter().map(|r| r.report.eval_total).collect();
            let entropies: Vec<(f64, f64)> =
                mine.iter().filter(|r| !r.report.entropy.is_empty()).map(|r| mean_entropies(&r.report.entropy)).collect();
            let n = entropies.len() as f64;
            VariantSummary {
                variant: v.as_str().into(),
                runs: mine.len(),
                median_eval_total: median(&losses),
                mean_eval_total: losses.iter().sum::<f64>() / losses.len() as f64,
                wins_vs_baseline: (v != baseline)
                    .then(|| mine.iter().filter(|r| base_loss.get(&r.seed).is_some_and(|&b| r.report.eval_total < b)).count()),
                mean_h_skill: (!entropies.is_empty()).then(|| entropies.iter().map(|e| e.0).sum::<f64>() / n),
                mean_h_rectified: (!entropies.is_empty()).then(|| entropies.iter().map(|e| e.1).sum::<f64>() / n),
                rectified_lower_runs: (!entropies.is_empty()).then(|| entropies.iter().filter(|e| e.1 < e.0).count()),
            }
        })
        .collect()
}

pub fn run(mut cfg: TrainConflictConfig, args: TrainConflictArgs, out: &Path) -> Result<()> {
    args.apply(&mut cfg);
    cfg.validate()?;
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + cfg.seeds as u64).collect();
    let mut artifacts: Vec<String> =
        ["metrics.jsonl", "curves.csv", "final.csv", "summary.csv", "summary.json", "curves.svg"].map(String::from).into();
    for &s in &seeds {
        if cfg.checkpoints {
            artifacts.extend(cfg.variants.iter().map(|v| format!("checkpoints/{}-seed{s}", v.as_str())));
        }
        if args.save_datasets {
            artifacts.push(format!("data/seed{s}.jsonl"));
        }
    }
    let run = Run::new(out, "train-conflict", &Resolved { config: &cfg, save_datasets: args.save_datasets }, cfg.seed, artifacts)?;
    if cfg.checkpoints {
        std::fs::create_dir_all(run.path("checkpoints"))?;
    }
    if args.save_datasets {
        std::fs::create_dir_all(run.path("data"))?;
    }

    let mut results = Vec::new();
    for &seed in &seeds {
        let data = generate_conflict_dataset(&cfg.spec, cfg.samples, seed)?;
        if args.save_datasets {
            data.write_jsonl(BufWriter::new(File::create(run.path(&format!("data/seed{seed}.jsonl")))?))?;
        }
        let probes = data.split(Split::Test);
        for &variant in &cfg.variants {
            let t0 = Instant::now();
            let kind = cfg.adapter(variant)?;
            let mut model = ToyModel::new(&cfg.model, &cfg.spec, kind.as_ref(), seed)?;
            let mut report = match train(&mut model, &cfg.train_config(seed), &data) {
                Ok(r) => r,
                Err(e @ duallora::Error::Divergence { .. }) => {
                    run.write_json("diagnostics.json", &json!({ "seed": seed, "variant": variant, "error": e.to_string() }))?;
                    return Err(CliError::Failed(format!("{} seed {seed}: {e}", variant.as_str())));
                }
                Err(e) => return Err(e.into()),
            };
            if matches!(kind, Some(AdapterKind::DualLora { .. })) {
                report.entropy = entropy_analysis(&model, &probes, cfg.entropy_bins)?;
            }
            if cfg.checkpoints {
                save_checkpoint(&run.path(&format!("checkpoints/{}-seed{seed}", variant.as_str())), &model, seed)?;
            }
            println!(
                "seed {seed} {:<13} eval {:.5}  adapters {}  ({:.1}s)",
                variant.as_str(),
                report.eval_total,
                report.params.adapters,
                t0.elapsed().as_secs_f64()
            );
            results.push(RunResult { seed, variant, report });
        }
    }

    let lines: Vec<_> =
        results.iter().map(|r| json!({ "seed": r.seed, "variant": r.variant, "report": r.report })).collect();
    run.write_jsonl("metrics.jsonl", &lines)?;

    let tasks = task_cols(cfg.spec.tasks);
    let mut header: Vec<&str> = vec!["seed", "variant", "stage", "step", "global_step", "total"];
    header.extend(tasks.iter().map(String::as_str));
    let mut rows = Vec::new();
    for r in &results {
        for p in &r.report.log {
            let global = if p.stage == 1 { p.step } else { cfg.stage1_steps + p.step };
            let mut row =
                vec![r.seed.to_string(), r.variant.as_str().into(), p.stage.to_string(), p.step.to_string(), global.to_string(), num(p.total)];
            row.extend(p.task_losses.iter().map(|&v| num(v)));
            rows.push(row);
        }
    }
    let curves = run.write_csv("curves.csv", &header, &rows)?;

    let mut header: Vec<&str> = vec!["seed", "variant", "adapter", "eval_total"];
    header.extend(tasks.iter().map(String::as_str));
    header.extend(["adapter_params", "vision_params", "h_skill", "h_rectified"]);
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            let e = (!r.report.entropy.is_empty()).then(|| mean_entropies(&r.report.entropy));
            let mut row = vec![
                r.seed.to_string(),
                r.variant.as_str().into(),
                r.report.adapter.clone().unwrap_or_else(|| "none".into()),
                num(r.report.eval_total),
            ];
            row.extend(r.report.eval.iter().map(|&v| num(v)));
            row.extend([
                r.report.params.adapters.to_string(),
                r.report.params.vision.to_string(),
                opt(e.map(|e| e.0)),
                opt(e.map(|e| e.1)),
            ]);
            row
        })
        .collect();
    run.write_csv("final.csv", &header, &rows)?;

    let summary = summarize(&cfg, &results);
    let rows: Vec<Vec<String>> = summary
        .iter()
        .map(|s| {
            vec![
                s.variant.clone(),
                s.runs.to_string(),
                num(s.median_eval_total),
                num(s.mean_eval_total),
                s.wins_vs_baseline.map(|w| w.to_string()).unwrap_or_default(),
                opt(s.mean_h_skill),
                opt(s.mean_h_rectified),
                s.rectified_lower_runs.map(|w| w.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    run.write_csv(
        "summary.csv",
        &[
            "variant",
            "runs",
            "median_eval_total",
            "mean_eval_total",
            "wins_vs_baseline",
            "mean_h_skill",
            "mean_h_rectified",
            "rectified_lower_runs",
        ],
        &rows,
    )?;
    run.write_json("summary.json", &json!({ "baseline": cfg.variants[0], "variants": summary }))?;
    for s in &summary {
        println!(
            "{:<13} median eval {:.5}{}",
            s.variant,
            s.median_eval_total,
            s.wins_vs_baseline.map(|w| format!("  beats {} on {w}/{} seeds", cfg.variants[0].as_str(), s.runs)).unwrap_or_default()
        );
    }

    run.write_svg("curves.svg", &curves_svg(&curves, &cfg)?)?;
    run.finish()
}

/// Mean training loss over seeds per variant, read back from the CSV.
fn curves_svg(path: &Path, cfg: &TrainConflictConfig) -> Result<String> {
    let (header, rows) = read_csv(path)?;
    let col = |name: &str| header.iter().position(|h| h == name).expect("curves.csv header");
    let (v, g, t) = (col("variant"), col("global_step"), col("total"));
    let mut acc: BTreeMap<(usize, u64), (f64, usize)> = BTreeMap::new();
    let order: Vec<&str> = cfg.variants.iter().map(|v| v.as_str()).collect();
    for r in &rows {
        let vi = order.iter().position(|o| *o == r[v]).unwrap_or(order.len());
        let step: u64 = r[g].parse().map_err(|_| CliError::Failed(format!("bad step {}", r[g])))?;
        let loss: f64 = r[t].parse().map_err(|_| CliError::Failed(format!("bad loss {}", r[t])))?;
        let e = acc.entry((vi, step)).or_insert((0.0, 0));
        e.0 += loss;
        e.1 += 1;
    }
    let series: Vec<(String, Vec<(f64, f64)>)> = order
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let pts = acc.range((i, 0)..(i + 1, 0)).map(|(&(_, s), &(sum, n))| (s as f64, sum / n as f64)).collect();
            (name.to_string(), pts)
        })
        .collect();
    Ok(svg::line_chart(
        &format!("training loss, conflict {} (mean of {} seeds)", cfg.spec.conflict, cfg.seeds),
        "step",
        "train MSE",
        &series,
        true,
    ))
}
