use std::path::Path;

use clap::Args;
use duallora::conflictbench::{default_variants, latency_bench, LatencyTable};
use serde::Serialize;

use super::num;
use crate::config::BenchSection;
use crate::error::{CliError, Result};
use crate::output::{read_csv, Run};
use crate::svg;

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_cv: Option<f64>,
    /// Exit 1 unless dual-lora < moe-top2 < moe-softmax-4 and
    /// dual-lora < dual-lora+vce in latency ratio.
    #[arg(long)]
    assert_ordering: bool,
}

#[derive(Debug, Serialize)]
pub struct Ordering {
    pub relation: String,
    pub holds: bool,
}

/// The pairwise ratio relations checked by `--assert-ordering`.
pub fn orderings(table: &LatencyTable) -> Vec<Ordering> {
    let r = |v: &str| table.ratio(v).unwrap_or(f64::NAN);
    [("dual-lora", "moe-top2"), ("moe-top2", "moe-softmax-4"), ("dual-lora", "dual-lora+vce")]
        .iter()
        .map(|(a, b)| Ordering { relation: format!("{a} < {b}"), holds: r(a) < r(b) })
        .collect()
}

pub fn run(mut cfg: BenchSection, args: BenchArgs, out: &Path) -> Result<()> {
    cfg.reps = args.reps.unwrap_or(cfg.reps);
    cfg.warmup = args.warmup.unwrap_or(cfg.warmup);
    cfg.d = args.d.unwrap_or(cfg.d);
    cfg.rank = args.rank.unwrap_or(cfg.rank);
    cfg.tokens = args.tokens.unwrap_or(cfg.tokens);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.max_cv = args.max_cv.unwrap_or(cfg.max_cv);
    cfg.assert_ordering |= args.assert_ordering;
    if cfg.reps < 100 {
        return Err(CliError::Usage(format!("bench needs at least 100 reps, got {}", cfg.reps)));
    }
    if !cfg.rank.is_multiple_of(4) {
        return Err(CliError::Usage(format!("rank {} does not split over 4 experts", cfg.rank)));
    }
    let run = Run::new(out, "bench", &cfg, cfg.seed, vec![
        "latency.csv".into(),
        "samples.csv".into(),
        "latency.svg".into(),
        "summary.json".into(),
    ])?;
    let table = latency_bench(&default_variants(cfg.rank), &cfg.bench_config())?;

    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| vec![r.variant.clone(), num(r.median_ns), num(r.ratio), num(r.cv), r.reps.to_string(), r.params.to_string()])
        .collect();
    let latency = run.write_csv("latency.csv", &["variant", "median_ns", "ratio", "cv", "reps", "params"], &rows)?;
    let samples: Vec<Vec<String>> = table
        .rows
        .iter()
        .zip(&table.samples)
        .flat_map(|(r, s)| s.iter().enumerate().map(move |(i, ns)| vec![r.variant.clone(), i.to_string(), num(*ns)]))
        .collect();
    run.write_csv("samples.csv", &["variant", "rep", "ns"], &samples)?;

    let (header, csv_rows) = read_csv(&latency)?;
    let ratio_col = header.iter().position(|h| h == "ratio").expect("written above");
    let bars = csv_rows
        .iter()
        .map(|r| Ok((r[0].clone(), r[ratio_col].parse::<f64>().map_err(|e| CliError::Failed(format!("latency.csv: {e}")))?)))
        .collect::<Result<Vec<_>>>()?;
    run.write_svg(
        "latency.svg",
        &svg::bar_chart(&format!("forward latency vs LoRA (d={}, rank {})", cfg.d, cfg.rank), "ratio", &bars, Some(1.0)),
    )?;

    let ordering = orderings(&table);
    let stable = table.check_stable(cfg.max_cv);
    for r in &table.rows {
        println!("{:<14} {:>12.0} ns  ratio {:.3}  cv {:.3}  params {}", r.variant, r.median_ns, r.ratio, r.cv, r.params);
    }
    for o in &ordering {
        println!("{}: {}", o.relation, if o.holds { "holds" } else { "violated" });
    }
    run.write_json(
        "summary.json",
        &serde_json::json!({
            "stable": stable.is_ok(),
            "max_cv": cfg.max_cv,
            "ordering": ordering,
            "rows": table.rows,
        }),
    )?;
    run.finish()?;
    stable?;
    if cfg.assert_ordering && ordering.iter().any(|o| !o.holds) {
        return Err(CliError::Failed("latency ordering violated".into()));
    }
    Ok(())
}
