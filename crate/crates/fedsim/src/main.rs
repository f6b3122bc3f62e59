//! Command-line entry points: `run`, `sweep`, `check`, `inspect`.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 failed theory
//! check.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedsim::config::{parse_config, ExperimentConfig};
use fedsim::error::FedError;
use fedsim::logio::{
    emit_summary, inspect_run, resolve_out_dir, write_manifest, write_run_outputs, SummaryRow,
};
use fedsim::metrics::{kappa_stats, r90_ci, stability_index};
use fedsim::orchestrator::{run_training, RunOutput};

const REPLAY_TOLERANCE: f64 = 1e-9;

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Deterministic federated-learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Output directory (overrides the FEDSIM_OUT environment variable).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads per run (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single experiment and write its logs.
    Run {
        config: PathBuf,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Run the experiment under several seeds and summarize.
    Sweep {
        config: PathBuf,
        /// Number of seeds (base seed, base+1, …).
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Verify the convergence analysis on the built-in testbeds.
    Check {
        config: PathBuf,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Recompute metrics from an emitted log and compare.
    Inspect {
        /// Directory holding manifest.json and the CSV logs.
        log: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, opts } => cmd_run(&config, &opts),
        Command::Sweep { config, seeds, opts } => cmd_sweep(&config, seeds, &opts),
        Command::Check { config, opts } => cmd_check(&config, &opts),
        Command::Inspect { log, quiet } => cmd_inspect(&log, quiet),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load(config: &PathBuf, opts: &CommonOpts) -> Result<(ExperimentConfig, u64), FedError> {
    let cfg = parse_config(config)?;
    let seed = opts.seed.unwrap_or(cfg.experiment.run_seed);
    Ok((cfg, seed))
}

fn cmd_run(config: &PathBuf, opts: &CommonOpts) -> Result<ExitCode, FedError> {
    let (cfg, seed) = load(config, opts)?;
    let dir = resolve_out_dir(opts.out.clone(), "out");
    write_manifest(&dir, &cfg, seed)?;
    let out = run_training(&cfg, seed, opts.workers)?;
    write_run_outputs(&dir, &cfg, &out)?;
    if !opts.quiet {
        let last = out.records.last();
        println!(
            "run complete: {} rounds, final loss {}, logs in {}",
            out.records.len(),
            last.map(|r| r.global_loss.to_string()).unwrap_or_else(|| "-".into()),
            dir.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(config: &PathBuf, seeds: u64, opts: &CommonOpts) -> Result<ExitCode, FedError> {
    if seeds == 0 {
        return Err(FedError::Usage("--seeds must be at least 1".into()));
    }
    let (cfg, base) = load(config, opts)?;
    let dir = resolve_out_dir(opts.out.clone(), "out");

    // seeds run concurrently, each writing its own subdirectory
    let workers = opts.workers;
    let outputs: Vec<RunOutput> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..seeds)
            .map(|i| {
                let cfg = &cfg;
                let dir = dir.join(format!("seed_{}", base + i));
                scope.spawn(move || -> Result<RunOutput, FedError> {
                    write_manifest(&dir, cfg, base + i)?;
                    let out = run_training(cfg, base + i, workers)?;
                    write_run_outputs(&dir, cfg, &out)?;
                    Ok(out)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect::<Result<Vec<_>, FedError>>()
    })?;

    let row = summarize(&cfg, &outputs);
    emit_summary(&dir, &[row])?;
    if !opts.quiet {
        println!(
            "sweep complete: {seeds} seeds, summary in {}",
            dir.join("summary.csv").display()
        );
        print!("{}", std::fs::read_to_string(dir.join("summary.txt")).unwrap_or_default());
    }
    Ok(ExitCode::SUCCESS)
}

/// One summary row covering all seeds of a sweep.
fn summarize(cfg: &ExperimentConfig, outputs: &[RunOutput]) -> SummaryRow {
    let curves: Vec<Vec<f64>> = outputs
        .iter()
        .filter(|o| !o.accuracy_curve.is_empty())
        .map(|o| o.accuracy_curve.clone())
        .collect();
    let r90 = if curves.is_empty() {
        None
    } else {
        r90_ci(&curves, 0.9).ok()
    };
    let final_accuracy = if curves.is_empty() {
        None
    } else {
        let finals: Vec<f64> = curves.iter().filter_map(|c| c.last().copied()).collect();
        Some(finals.iter().sum::<f64>() / finals.len() as f64)
    };
    let stabilities: Vec<f64> = curves
        .iter()
        .filter_map(|c| stability_index(c).ok())
        .filter(|s| s.is_finite())
        .collect();
    let stability = if stabilities.is_empty() {
        None
    } else {
        Some(stabilities.iter().sum::<f64>() / stabilities.len() as f64)
    };
    let all_alphas: Vec<Vec<f64>> = outputs
        .iter()
        .flat_map(|o| o.alphas_series.iter().cloned())
        .collect();
    let kappa = kappa_stats(&all_alphas, &outputs[0].p);
    SummaryRow {
        framework: cfg.data.kind.clone(),
        strategy: cfg.strategy.name.clone(),
        seeds: outputs.len(),
        r90_mean: r90.map(|r| r.mean),
        r90_lo: r90.map(|r| r.lo),
        r90_hi: r90.map(|r| r.hi),
        final_accuracy,
        stability,
        pi: kappa.pi,
        cap_pi: kappa.cap_pi,
        error_bound: kappa.error_bound,
        gamma_het: outputs[0].gamma_het,
    }
}

fn cmd_check(config: &PathBuf, opts: &CommonOpts) -> Result<ExitCode, FedError> {
    let (mut cfg, seed) = load(config, opts)?;
    cfg.experiment.theory_checks = true;
    let out = run_training(&cfg, seed, opts.workers)?;

    let mut failures = 0usize;
    let mut check = |name: &str, ok: bool, detail: String| {
        if !ok {
            failures += 1;
        }
        if !opts.quiet || !ok {
            println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        }
    };

    let gamma = out.gamma_het;
    check(
        "heterogeneity nonnegative",
        gamma.map_or(true, |g| g >= -1e-9),
        format!("Gamma = {:?}", gamma),
    );

    let mut bound_ok = true;
    let mut contraction_ok = true;
    let mut checked = 0usize;
    for rec in &out.records {
        if let (Some(d), Some(rhs)) = (rec.dist_sq_to_opt, rec.thm1_rhs) {
            checked += 1;
            bound_ok &= d <= rhs * (1.0 + 1e-9) + 1e-15;
            contraction_ok &= rec.thm1_contraction_ok;
        }
    }
    check(
        "per-round distance bound",
        checked > 0 && bound_ok,
        format!("{checked} rounds checked"),
    );
    check(
        "contraction condition",
        contraction_ok,
        "eta * mu * (1 + 3*rho/8) < 1 at every step".into(),
    );

    let mut lemma_ok = true;
    let mut lemma_checked = 0usize;
    for rec in &out.records {
        if let (Some(lhs), Some(rhs)) = (rec.lemma2_lhs, rec.lemma2_rhs) {
            lemma_checked += 1;
            lemma_ok &= lhs <= rhs * (1.0 + 1e-9) + 1e-15;
        }
    }
    check(
        "client discrepancy bound",
        lemma_checked > 0 && lemma_ok,
        format!("{lemma_checked} rounds checked"),
    );

    if cfg.strategy.name == "fedavg" {
        let rho_ok = out
            .records
            .iter()
            .filter_map(|r| r.rho)
            .all(|rho| (rho - 1.0).abs() < 1e-9);
        check("uniform weighting has skew 1", rho_ok, "rho = 1 at every round".into());
    }

    if failures == 0 {
        if !opts.quiet {
            println!("all checks passed");
        }
        Ok(ExitCode::SUCCESS)
    } else {
        println!("{failures} check(s) failed");
        Ok(ExitCode::from(2))
    }
}

fn cmd_inspect(log: &PathBuf, quiet: bool) -> Result<ExitCode, FedError> {
    let report = inspect_run(log, f64::INFINITY)?;
    let ok = report.max_rho_dev <= REPLAY_TOLERANCE && report.max_thm1_dev <= REPLAY_TOLERANCE;
    if !quiet || !ok {
        println!(
            "{} rounds, rho recomputed on {} (max dev {:.3e}), bound recomputed on {} (max dev {:.3e})",
            report.rounds,
            report.rho_checked,
            report.max_rho_dev,
            report.thm1_checked,
            report.max_thm1_dev
        );
    }
    if ok {
        if !quiet {
            println!("replay matches within {REPLAY_TOLERANCE:e}");
        }
        Ok(ExitCode::SUCCESS)
    } else {
        println!("replay mismatch beyond {REPLAY_TOLERANCE:e}");
        Ok(ExitCode::from(2))
    }
}
