//! `moe-ens`: run, sweep, analyze and cost sparse MoE ensembles.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use moe_ensemble::analyzer::{
    improvement_table, normalized_gain, pareto_frontier, pareto_svg, read_points_file, write_gain_csv, write_improvement_csv,
    write_points_csv, CostPoint, Selector,
};
use moe_ensemble::experiment::{run_experiment, run_sweep, write_atomic, ExperimentConfig, SweepConfig};
use moe_ensemble::metrics::{ensemble_flops, flops_estimate, forward_flops};
use moe_ensemble::model::{ModelSpec, Variant};
use moe_ensemble::par::ExecPolicy;
use moe_ensemble::Error;

#[derive(Parser)]
#[command(name = "moe-ens", version, about = "Sparse mixture-of-experts ensembles at desk scale")]
struct Cli {
    /// Run seeds and grid cells one after another on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every repetition of one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a grid of experiments and write `sweep.csv`.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Analyze a `label,metric,gflops[,family,variant,k,m]` table.
    Analyze {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Baseline cell of the gain map.
        #[arg(long, default_value_t = 1)]
        baseline_k: usize,
        #[arg(long, default_value_t = 1)]
        baseline_m: usize,
        /// Baseline variant of the improvement table.
        #[arg(long, default_value = "vit")]
        baseline_variant: String,
        /// Family whose improvement stays unnormalized; defaults to the costliest baseline.
        #[arg(long)]
        reference: Option<String>,
        #[arg(long, default_value = "NLL")]
        y_label: String,
    },
    /// Print the analytic cost of a preset shape.
    Flops {
        #[arg(long)]
        preset: String,
        #[arg(long, default_value = "vit")]
        variant: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        experts: Option<usize>,
        /// Report the deferred-tiling forward as the headline figure.
        #[arg(long)]
        deferred: bool,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch: Option<u64>,
        /// Largest deep-ensemble size listed.
        #[arg(long, default_value_t = 4)]
        max_members: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Mode {
    GainMap,
    NormalizedImprovement,
    Pareto,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Format(_) | Error::Json(_) | Error::Csv(_) | Error::Fit(_) => 2,
            Error::Divergence { .. } => 3,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

fn config_failure(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

fn policy(sequential: bool) -> ExecPolicy {
    if sequential {
        ExecPolicy::Sequential
    } else {
        ExecPolicy::Parallel
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let policy = policy(cli.sequential);
    let outcome = match cli.command {
        Command::Run { config } => cmd_run(&config, policy),
        Command::Sweep { config } => cmd_sweep(&config, policy),
        Command::Analyze { mode, input, out, baseline_k, baseline_m, baseline_variant, reference, y_label } => {
            cmd_analyze(mode, &input, &out, (baseline_k, baseline_m), &baseline_variant, reference, &y_label)
        }
        Command::Flops { preset, variant, k, m, experts, deferred, steps, batch, max_members } => {
            cmd_flops(&preset, &variant, k, m, experts, deferred, steps.zip(batch), max_members)
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_run(path: &Path, policy: ExecPolicy) -> Result<(), Failure> {
    let cfg = ExperimentConfig::load(path)?;
    cfg.validate()?;
    let out = run_experiment(&cfg, policy)?;
    println!("metric,mean,stderr,n");
    for r in &out.summary {
        println!("{},{},{},{}", r.metric, r.mean, r.stderr, r.n);
    }
    eprintln!("wrote {}", cfg.output_dir.display());
    Ok(())
}

fn cmd_sweep(path: &Path, policy: ExecPolicy) -> Result<(), Failure> {
    let sweep = SweepConfig::load(path)?;
    let rows = run_sweep(&sweep, policy)?;
    for r in &rows {
        println!("{:<32} nll {:.4} ± {:.4}  {:.6} GFLOPs", r.label, r.metric, r.nll_stderr, r.gflops);
    }
    eprintln!("wrote {}", sweep.base.output_dir.join("sweep.csv").display());
    Ok(())
}

fn cmd_analyze(
    mode: Mode,
    input: &Path,
    out: &Path,
    baseline: (usize, usize),
    baseline_variant: &str,
    reference: Option<String>,
    y_label: &str,
) -> Result<(), Failure> {
    if !input.is_file() {
        return Err(config_failure(format!("input `{}` does not exist", input.display())));
    }
    let points = read_points_file(input)?;
    if points.is_empty() {
        return Err(config_failure("input has no rows"));
    }
    fs::create_dir_all(out).map_err(Error::from)?;
    match mode {
        Mode::GainMap => {
            let cells = normalized_gain(&points, baseline)?;
            let mut buf = Vec::new();
            write_gain_csv(&cells, &mut buf)?;
            write_atomic(&out.join("gain_map.csv"), &buf)?;
            for c in &cells {
                let g = c.gain.map_or("-".to_string(), |g| format!("{g:.4}"));
                println!("{} K={} M={}: {g}", c.group, c.k, c.m);
            }
        }
        Mode::NormalizedImprovement => {
            let selector = Selector { variant: Some(baseline_variant.to_string()), k: None, m: None };
            let reference = match reference {
                Some(r) => r,
                None => costliest_family(&points, &selector)?,
            };
            let rows = improvement_table(&points, &selector, &reference)?;
            let mut buf = Vec::new();
            write_improvement_csv(&rows, &mut buf)?;
            write_atomic(&out.join("normalized_improvement.csv"), &buf)?;
            for r in &rows {
                println!("{} vs {} on {}: raw {:.2}%, normalized {:.2}%", r.comparison, baseline_variant, r.family, r.raw_pct, r.normalized_pct);
            }
        }
        Mode::Pareto => {
            let frontier = pareto_frontier(&points);
            let mut buf = Vec::new();
            write_points_csv(&frontier, &mut buf)?;
            write_atomic(&out.join("pareto.csv"), &buf)?;
            write_atomic(&out.join("pareto.svg"), pareto_svg(&points, &frontier, y_label).as_bytes())?;
            for p in &frontier {
                println!("{}: {} at {} GFLOPs", p.label, p.metric, p.gflops);
            }
        }
    }
    Ok(())
}

fn costliest_family(points: &[CostPoint], selector: &Selector) -> Result<String, Failure> {
    points
        .iter()
        .filter(|p| selector.matches(p))
        .max_by(|a, b| a.gflops.total_cmp(&b.gflops))
        .and_then(|p| p.family.clone())
        .ok_or_else(|| config_failure("no baseline point with a family; pass --reference or fill the family column"))
}

#[allow(clippy::too_many_arguments)]
fn cmd_flops(
    preset: &str,
    variant: &str,
    k: Option<usize>,
    m: Option<usize>,
    experts: Option<usize>,
    deferred: bool,
    steps_batch: Option<(u64, u64)>,
    max_members: usize,
) -> Result<(), Failure> {
    let mut spec = ModelSpec::preset(preset)?;
    spec.variant = Variant::parse(variant)?;
    if let Some(k) = k {
        spec.k = k;
    }
    if let Some(m) = m {
        spec.m = m;
    }
    if let Some(e) = experts {
        spec.experts = e;
    }
    spec.validate()?;
    let f = forward_flops(&spec)?;
    let headline = f.total(deferred) as f64 / 1e9;
    println!("preset {preset}, variant {}, K={} M={} E={}", spec.variant.name(), spec.k, spec.m, spec.experts);
    println!("forward GFLOPs per example ({}): {headline:.4}", if deferred { "deferred tiling" } else { "naive tiling" });
    println!("forward GFLOPs per example, deferred: {:.4}", f.deferred() as f64 / 1e9);
    println!("forward GFLOPs per example, naive: {:.4}", f.naive() as f64 / 1e9);
    println!("deferred-tiling saving: {:.2}%", 100.0 * f.tiling_saving());
    println!("train GFLOPs per example: {:.4}", flops_estimate(&spec, 1, 1, deferred)?);
    if let Some((steps, batch)) = steps_batch {
        println!("train GFLOPs for {steps} steps of {batch}: {:.4}", flops_estimate(&spec, steps, batch, deferred)?);
    }
    for members in 1..=max_members.max(1) {
        let total = ensemble_flops(headline, members);
        println!("deep ensemble of {members}: {total:.4} GFLOPs ({:.3}x)", total / headline);
    }
    Ok(())
}
