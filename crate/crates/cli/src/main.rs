use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mia_core::eval::{self, Metrics};
use mia_core::experiment::{self, ExperimentConfig, OracleConfig};
use mia_core::shadow;
use mia_core::AttackResult;

/// Membership-inference experiments, oracles and artifact checks.
///
/// The worker-thread count comes from the MIA_THREADS environment variable.
#[derive(Parser)]
#[command(name = "mia", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write its artifacts.
    Run {
        config: PathBuf,
        /// Replace the config's seed list (repeatable).
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Run seeds concurrently.
        #[arg(long)]
        parallel_seeds: bool,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the Gibbs and posterior-odds oracles; exits nonzero on any violation.
    Oracles {
        /// TOML oracle config; defaults apply when omitted.
        config: Option<PathBuf>,
        /// Corrupt the Gibbs kernel so the checks must fail.
        #[arg(long)]
        negative_control: bool,
        /// Also write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print a score-matrix header and check its invariants.
    Inspect { matrix: PathBuf },
    /// Recompute ROC metrics from an attack-result CSV.
    Metrics {
        csv: PathBuf,
        /// Write the ROC points as CSV.
        #[arg(long)]
        roc: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    experiment::configure_threads()?;
    match cli.command {
        Command::Run {
            config,
            seeds,
            parallel_seeds,
            out,
        } => {
            let (mut cfg, base) = ExperimentConfig::load(&config)?;
            if !seeds.is_empty() {
                cfg.seeds = seeds;
            }
            cfg.parallel_seeds |= parallel_seeds;
            if let Some(out) = out {
                cfg.out_dir = std::env::current_dir()?.join(out);
            }
            let report = experiment::run_experiment_with(&cfg, &base)?;
            println!("config {} -> {}", report.config_hash, report.dir.display());
            println!("{:<28} {:>16} {:>16} {:>16} {:>16}", "attack", "auc", "tpr@1e-5", "tpr@1e-3", "bal_acc");
            for (name, m) in &report.summary.aggregate {
                let cell = |k: &str| format!("{:.4}±{:.4}", m[k].mean, m[k].std);
                println!(
                    "{:<28} {:>16} {:>16} {:>16} {:>16}",
                    name,
                    cell("auc"),
                    cell("tpr@1e-5"),
                    cell("tpr@1e-3"),
                    cell("balanced_accuracy")
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Oracles {
            config,
            negative_control,
            report,
        } => {
            let mut cfg = match config {
                Some(p) => OracleConfig::load(p)?,
                None => OracleConfig::default(),
            };
            cfg.negative_control |= negative_control;
            let rep = experiment::run_oracles_with(&cfg)?;
            for c in &rep.gibbs {
                println!(
                    "gibbs n={} seed={:#x}: tv={:.5} detailed_balance={:.3e} {}",
                    c.n,
                    c.seed,
                    c.total_variation,
                    c.detailed_balance,
                    verdict(c.pass)
                );
            }
            let failed: Vec<_> = rep.odds.iter().filter(|c| !c.pass).collect();
            let checks: usize = rep.odds.iter().map(|c| c.checks).sum();
            let worst = rep.odds.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
            println!(
                "odds: {} universes, {checks} observations, max rel error {worst:.3e}, {} failing",
                rep.odds.len(),
                failed.len()
            );
            if let Some(path) = report {
                std::fs::write(&path, serde_json::to_vec_pretty(&rep)?).with_context(|| format!("writing {}", path.display()))?;
            }
            println!("oracles {} in {:.1}s", verdict(rep.pass), rep.seconds);
            Ok(if rep.pass { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::Inspect { matrix } => inspect(&matrix),
        Command::Metrics { csv, roc } => {
            let result = AttackResult::read_csv(&csv)?;
            let labels = result.labels().context("metrics need a ground_truth column")?;
            let curve = eval::roc(&result.scores, labels)?;
            if let Some(path) = roc {
                curve.write_csv(path)?;
            }
            let m = Metrics::from_curve(&curve);
            println!("{}", serde_json::to_string_pretty(&serde_json::json!({
                "attack": result.attack_name,
                "instances": result.len(),
                "metrics": m,
            }))?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn inspect(path: &std::path::Path) -> Result<ExitCode> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let m = shadow::load_matrix(path)?;
    let (rows, cols, k) = (m.n_models(), m.n_instances(), m.n_aug());
    println!("file       {}", path.display());
    println!("models     {rows}");
    println!("instances  {cols}");
    println!("views      {k}");
    println!("aug_seed   {}", m.aug_seed());
    if let Some(side) = shadow::load_sidecar(path)? {
        println!("config     {}", side.config_hash);
        if let Some(it) = side.iteration {
            println!("iteration  {it}");
        }
    }
    let counts: Vec<usize> = (0..cols).map(|c| m.membership().column_sum(c)).collect();
    let all_in = counts.iter().filter(|&&c| c == rows).count();
    let all_out = counts.iter().filter(|&&c| c == 0).count();
    let half = counts.iter().filter(|&&c| 2 * c == rows).count();
    println!("columns    {half} half-in, {all_in} all-in, {all_out} all-out, {} other", cols - half - all_in - all_out);

    let mut problems = Vec::new();
    let expected = shadow::ScoreMatrix::encoded_len(rows, cols, k);
    if bytes.len() != expected {
        problems.push(format!("file is {} bytes, shape implies {expected}", bytes.len()));
    }
    if m.values().iter().any(|v| !v.is_finite()) {
        problems.push("non-finite scores".to_string());
    }
    let mut ids = m.instance_ids().to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != cols {
        problems.push("duplicate instance ids".to_string());
    }
    if problems.is_empty() {
        println!("invariants ok");
        Ok(ExitCode::SUCCESS)
    } else {
        for p in &problems {
            println!("violation: {p}");
        }
        bail!("{} invariant violation(s)", problems.len())
    }
}
