use std::path::{Path, PathBuf};

use clap::Args;
use duallora::conflictbench::{entropy_analysis, generate_conflict_dataset, load_checkpoint, mean_entropies};
use serde_json::json;

use super::num;
use crate::config::EntropyConfig;
use crate::error::{CliError, Result};
use crate::output::{read_csv, Run};
use crate::svg;

#[derive(Args)]
pub struct EntropyArgs {
    /// Checkpoint stem written by train-conflict (without extension).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    probes: Option<usize>,
    #[arg(long)]
    probe_seed: Option<u64>,
}

pub fn run(mut cfg: EntropyConfig, args: EntropyArgs, out: &Path) -> Result<()> {
    if args.checkpoint.is_some() {
        cfg.checkpoint = args.checkpoint;
    }
    cfg.bins = args.bins.unwrap_or(cfg.bins);
    cfg.probes = args.probes.unwrap_or(cfg.probes);
    cfg.probe_seed = args.probe_seed.unwrap_or(cfg.probe_seed);
    let Some(stem) = cfg.checkpoint.clone() else {
        return Err(CliError::Usage("entropy needs --checkpoint".into()));
    };
    if cfg.bins == 0 {
        return Err(CliError::Usage("bins must be positive".into()));
    }
    let model = load_checkpoint(&stem)
        .map_err(|e| CliError::Failed(format!("cannot load checkpoint {}: {e}", stem.display())))?;
    let run = Run::new(out, "entropy", &cfg, cfg.probe_seed, vec!["entropy.csv".into(), "entropy.svg".into(), "summary.json".into()])?;

    let data = generate_conflict_dataset(&model.spec, cfg.probes, cfg.probe_seed)?;
    let probes: Vec<_> = data.samples.iter().collect();
    let layers = entropy_analysis(&model, &probes, cfg.bins)?;
    let rows: Vec<Vec<String>> =
        layers.iter().enumerate().map(|(i, l)| vec![i.to_string(), l.layer.clone(), num(l.skill), num(l.rectified)]).collect();
    let csv = run.write_csv("entropy.csv", &["index", "layer", "h_skill", "h_rectified"], &rows)?;

    let (_, back) = read_csv(&csv)?;
    let parse = |s: &str| s.parse::<f64>().map_err(|e| CliError::Failed(format!("entropy.csv: {e}")));
    let (mut skill, mut rect) = (Vec::new(), Vec::new());
    for r in &back {
        let x = parse(&r[0])?;
        skill.push((x, parse(&r[2])?));
        rect.push((x, parse(&r[3])?));
    }
    run.write_svg(
        "entropy.svg",
        &svg::line_chart(
            "activation entropy per adapted layer",
            "layer index",
            "entropy (nats)",
            &[("skill".into(), skill), ("rectified".into(), rect)],
            false,
        ),
    )?;

    let (ms, mr) = mean_entropies(&layers);
    run.write_json(
        "summary.json",
        &json!({
            "layers": layers,
            "mean_h_skill": ms,
            "mean_h_rectified": mr,
            "rectified_lower": mr < ms,
        }),
    )?;
    for l in &layers {
        println!("{:<10} skill {:.4}  rectified {:.4}", l.layer, l.skill, l.rectified);
    }
    println!("mean skill {ms:.4}  rectified {mr:.4}  rectified lower: {}", mr < ms);
    run.finish()
}
