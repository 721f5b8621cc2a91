use std::path::Path;

use clap::Args;
use duallora::vce::{planted_patch_demo, DemoConfig};
use serde_json::json;

use super::num;
use crate::error::{CliError, Result};
use crate::output::{read_csv, Run};
use crate::svg;

#[derive(Args)]
pub struct VceDemoArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Fusion scale of the cue.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    grid: Option<usize>,
    /// Patch top-left corner as `row,col`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    patch: Option<Vec<usize>>,
}

pub fn run(mut cfg: DemoConfig, args: VceDemoArgs, out: &Path) -> Result<()> {
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.steps = args.steps.unwrap_or(cfg.steps);
    cfg.lr = args.lr.unwrap_or(cfg.lr);
    cfg.vce.gamma = args.gamma.unwrap_or(cfg.vce.gamma);
    cfg.grid = args.grid.unwrap_or(cfg.grid);
    if let Some(p) = &args.patch {
        cfg.patch_origin = (p[0], p[1]);
    }
    let run = Run::new(out, "vce-demo", &cfg, cfg.seed, vec!["heatmap.csv".into(), "heatmap.svg".into(), "report.json".into()])?;
    let (_, report) = planted_patch_demo(&cfg).map_err(|e| match e {
        duallora::Error::InvalidArgument(m) => CliError::Usage(m),
        e => e.into(),
    })?;

    let h = &report.heatmap;
    let rows: Vec<Vec<String>> = (0..h.height)
        .flat_map(|r| (0..h.width).map(move |c| vec![r.to_string(), c.to_string(), num(h.at(r, c))]))
        .collect();
    let csv = run.write_csv("heatmap.csv", &["row", "col", "cue_norm"], &rows)?;

    let (_, back) = read_csv(&csv)?;
    let mut grid = vec![0.0; h.height * h.width];
    for r in &back {
        let parse = |s: &str| s.parse::<f64>().map_err(|e| CliError::Failed(format!("heatmap.csv: {e}")));
        let (row, col) = (parse(&r[0])? as usize, parse(&r[1])? as usize);
        grid[row * h.width + col] = parse(&r[2])?;
    }
    run.write_svg("heatmap.svg", &svg::raster(&format!("cue heatmap, seed {}", cfg.seed), h.height, h.width, &grid))?;

    run.write_json(
        "report.json",
        &json!({
            "argmax": report.argmax,
            "argmax_in_patch": report.argmax_in_patch,
            "patch_origin": cfg.patch_origin,
            "patch_size": cfg.patch_size,
            "initial_loss": report.losses.first(),
            "final_loss": report.losses.last(),
            "losses": report.losses,
        }),
    )?;
    println!(
        "argmax {:?} {} patch at {:?} (size {}); loss {:.4} -> {:.4}",
        report.argmax,
        if report.argmax_in_patch { "inside" } else { "outside" },
        cfg.patch_origin,
        cfg.patch_size,
        report.losses.first().copied().unwrap_or(f64::NAN),
        report.losses.last().copied().unwrap_or(f64::NAN),
    );
    run.finish()
}
