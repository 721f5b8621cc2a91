use std::path::Path;
use std::time::Instant;

use clap::{Args, ValueEnum};
use duallora::adapters::{gradient_suite, gradient_suite_kinds, AdapterKind, LoraHyper};
use duallora::expressiveness::{
    fit_adapter_to_routed_target, two_cluster_opposing, verify_cor1, verify_cor2_fixed, verify_prop1, FitConfig,
    VerificationReport,
};
use duallora::numeric::{layer_norm, GradCheck, Rng};
use duallora::vce::{count_vce_params, init_vce, vce_forward, vce_gradient_suite, FeaturePyramid, Precision, VceConfig};
use serde::Serialize;

use super::num;
use crate::config::VerifyConfig;
use crate::error::{CliError, Result};
use crate::output::Run;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Grad,
    Prop1,
    Cor1,
    Cor2,
    Vce,
    All,
}

#[derive(Args)]
pub struct VerifyArgs {
    #[arg(value_enum)]
    suite: Suite,
    #[arg(long)]
    seed: Option<u64>,
    /// Seeded instances per statement.
    #[arg(long)]
    instances: Option<usize>,
    /// Terms in the rank-one sum.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
}

/// One measured error against its tolerance. Non-gating checks are reported
/// but do not decide the exit code.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub suite: String,
    pub name: String,
    pub seed: u64,
    pub error: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub gating: bool,
}

impl Check {
    fn from_grad(suite: &str, g: GradCheck) -> Self {
        Self {
            suite: suite.into(),
            name: format!("{}/{}", g.subject, g.tensor),
            seed: g.seed,
            error: g.rel_error,
            tolerance: g.tolerance,
            pass: g.pass,
            gating: true,
        }
    }

    fn from_report(suite: &str, seed: u64, r: &VerificationReport) -> Self {
        let ranks: Vec<String> = r.ranks.iter().map(usize::to_string).collect();
        Self {
            suite: suite.into(),
            name: format!("{} [{}] {}x{}", r.statement, ranks.join(","), r.d_out, r.d_in),
            seed,
            error: r.error,
            tolerance: r.tolerance,
            pass: r.pass,
            gating: true,
        }
    }

    fn below(suite: &str, name: &str, seed: u64, error: f64, tolerance: f64) -> Self {
        Self { suite: suite.into(), name: name.into(), seed, error, tolerance, pass: error < tolerance, gating: true }
    }
}

#[derive(Serialize)]
struct SuiteSummary {
    suite: String,
    checks: usize,
    failed: usize,
    pass: bool,
}

#[derive(Serialize)]
struct Resolved<'a> {
    suite: Suite,
    #[serde(flatten)]
    config: &'a VerifyConfig,
}

fn grad(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for kind in gradient_suite_kinds() {
        out.extend(gradient_suite(&kind, cfg.grad_instances)?.into_iter().map(|g| Check::from_grad("grad", g)));
    }
    out.extend(vce_gradient_suite(cfg.grad_instances)?.into_iter().map(|g| Check::from_grad("grad", g)));
    Ok(out)
}

fn seeds(cfg: &VerifyConfig) -> impl Iterator<Item = u64> {
    cfg.seed..cfg.seed + cfg.instances as u64
}

fn prop1(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    seeds(cfg).map(|s| Ok(Check::from_report("prop1", s, &verify_prop1(cfg.k, cfg.d, cfg.d, s)?))).collect()
}

fn cor1(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for p in &cfg.patterns {
        let d = cfg.d.max(p.iter().sum());
        for s in seeds(cfg) {
            out.push(Check::from_report("cor1", s, &verify_cor1(p, d, d, s)?));
        }
    }
    Ok(out)
}

fn median(v: &[f64]) -> f64 {
    duallora::conflictbench::bench::median(v)
}

/// Fixed-gate construction on every pattern, then learned gates on two
/// opposing clusters: Dual-LoRA must fit in all but one of five seeds and
/// beat plain LoRA's median error tenfold.
fn cor2(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for p in &cfg.patterns {
        let budget: usize = p.iter().sum();
        let d = cfg.d.max(budget);
        for s in seeds(cfg) {
            out.push(Check::from_report("cor2", s, &verify_cor2_fixed(p, budget, d, d, s)?));
        }
    }
    let hyper = LoraHyper::with_rank(cfg.learned_rank).no_dropout();
    let (mut dual, mut lora) = (Vec::new(), Vec::new());
    for s in cfg.seed..cfg.seed + cfg.learned_seeds as u64 {
        let clusters = two_cluster_opposing(64, 2, 0.25, s);
        let fit = FitConfig { steps: cfg.learned_steps, seed: s, ..FitConfig::default() };
        for (kind, errs, label) in [
            (AdapterKind::DualLora { hyper }, &mut dual, "learned dual-lora mse"),
            (AdapterKind::Lora { hyper }, &mut lora, "learned lora mse"),
        ] {
            let r = fit_adapter_to_routed_target(&kind, &clusters, &fit)?;
            errs.push(r.error);
            out.push(Check { gating: false, ..Check::below("cor2", label, s, r.error, fit.threshold) });
        }
    }
    if !dual.is_empty() {
        let threshold = FitConfig::default().threshold;
        let failed = dual.iter().filter(|&&e| !(e < threshold)).count();
        let allowed = dual.len() / 5;
        out.push(Check {
            suite: "cor2".into(),
            name: "learned dual-lora failures".into(),
            seed: cfg.seed,
            error: failed as f64,
            tolerance: allowed as f64,
            pass: failed <= allowed,
            gating: true,
        });
        let ratio = 10.0 * median(&dual) / median(&lora);
        out.push(Check {
            pass: ratio <= 1.0,
            ..Check::below("cor2", "10 x median dual / median lora", cfg.seed, ratio, 1.0)
        });
    }
    Ok(out)
}

/// Gradients, closed-form size, the fusion bypass at gamma 0 and the empty
/// cue of a fresh module.
fn vce(cfg: &VerifyConfig, with_grads: bool) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    if with_grads {
        out.extend(vce_gradient_suite(cfg.grad_instances)?.into_iter().map(|g| Check::from_grad("vce", g)));
    }
    let config = VceConfig::default();
    let counted = init_vce(&config, 0)?.param_count() as f64;
    let closed = count_vce_params(&config, Precision::Fp32).params as f64;
    out.push(Check::below("vce", "param count vs closed form", 0, (counted - closed).abs(), 0.5));

    let small = VceConfig { levels: 3, channels: 8, ..VceConfig::default() };
    for s in seeds(cfg) {
        let mut rng = Rng::new(s);
        let maps = (0..small.levels).map(|_| rng.normal_tensor(&[4, 5, small.channels], 1.0)).collect();
        let pyr = FeaturePyramid::new(maps, small.levels - 1)?;

        let mut p = init_vce(&VceConfig { gamma: 0.0, ..small }, s)?;
        for t in p.tensors_mut() {
            let shape = t.shape().to_vec();
            *t = std::sync::Arc::new(rng.normal_tensor(&shape, 0.5));
        }
        let (enhanced, _) = vce_forward(&pyr, &p)?;
        let want = layer_norm(pyr.anchor(), &p.norm_gain, &p.norm_bias, small.eps)?;
        let diff = enhanced.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        out.push(Check::below("vce", "gamma 0 gives normalized anchor", s, diff, 1e-12));

        let (_, heat) = vce_forward(&pyr, &init_vce(&small, s)?)?;
        let peak = heat.values.iter().copied().fold(0.0, f64::max);
        out.push(Check::below("vce", "fresh module has zero cue", s, peak, 1e-12));
    }
    Ok(out)
}

pub fn run(mut cfg: VerifyConfig, args: VerifyArgs, out: &Path) -> Result<()> {
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.instances = args.instances.unwrap_or(cfg.instances);
    cfg.k = args.k.unwrap_or(cfg.k);
    cfg.d = args.d.unwrap_or(cfg.d);
    if cfg.instances == 0 || cfg.k == 0 || cfg.k > cfg.d {
        return Err(CliError::Usage(format!("need instances >= 1 and 1 <= k <= d, got {cfg:?}")));
    }
    let suites = match args.suite {
        Suite::All => vec![Suite::Grad, Suite::Prop1, Suite::Cor1, Suite::Cor2, Suite::Vce],
        s => vec![s],
    };
    let run = Run::new(out, "verify", &Resolved { suite: args.suite, config: &cfg }, cfg.seed, vec![
        "checks.csv".into(),
        "report.json".into(),
    ])?;

    let mut checks = Vec::new();
    let mut summaries = Vec::new();
    for suite in suites {
        let t0 = Instant::now();
        let got = match suite {
            Suite::Grad => grad(&cfg)?,
            Suite::Prop1 => prop1(&cfg)?,
            Suite::Cor1 => cor1(&cfg)?,
            Suite::Cor2 => cor2(&cfg)?,
            // `all` already covered the module's gradients under grad.
            Suite::Vce => vce(&cfg, args.suite != Suite::All)?,
            Suite::All => unreachable!("expanded above"),
        };
        let name = format!("{suite:?}").to_lowercase();
        let failed = got.iter().filter(|c| c.gating && !c.pass).count();
        let worst = got.iter().filter(|c| c.gating).map(|c| c.error / c.tolerance.max(f64::MIN_POSITIVE)).fold(0.0, f64::max);
        println!(
            "{name}: {}/{} pass, worst error/tolerance {worst:.3e} ({:.1}s)",
            got.iter().filter(|c| c.gating && c.pass).count(),
            got.iter().filter(|c| c.gating).count(),
            t0.elapsed().as_secs_f64()
        );
        for c in got.iter().filter(|c| c.gating && !c.pass) {
            println!("  FAIL {} seed {}: {:e} >= {:e}", c.name, c.seed, c.error, c.tolerance);
        }
        summaries.push(SuiteSummary { suite: name, checks: got.len(), failed, pass: failed == 0 });
        checks.extend(got);
    }

    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|c| {
            vec![
                c.suite.clone(),
                c.name.clone(),
                c.seed.to_string(),
                num(c.error),
                num(c.tolerance),
                c.pass.to_string(),
                c.gating.to_string(),
            ]
        })
        .collect();
    run.write_csv("checks.csv", &["suite", "name", "seed", "error", "tolerance", "pass", "gating"], &rows)?;
    let pass = summaries.iter().all(|s| s.pass);
    run.write_json("report.json", &serde_json::json!({ "pass": pass, "suites": summaries, "checks": checks }))?;
    run.finish()?;
    if pass {
        Ok(())
    } else {
        Err(CliError::Failed("verification failed".into()))
    }
}
