//! Command-line front end for the configuration search engine.
//!
//! Exit codes form a stable contract:
//! - 0: the command succeeded and the domain verdict is positive,
//! - 1: the command ran but the domain said no (failed static checks, no
//!   feasible configuration, verdict mismatch, missing recorded trial),
//! - 2: the inputs could not be used (unreadable files, parse errors,
//!   run-settings invariant violations, corrupt ledgers).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ckkstune_core::{
    analyze, optimize, replay_scenario, simulate, BackendSpec, CalibrationBatch, DecisionPolicy,
    FheConfig, HeuristicPolicy, HttpTransport, ModelGraph, OptimizeError, RemotePolicy,
    ReplayError, ReplayReport, RunConfig, RunReport, SimError, SEED_COEFFICIENTS,
};

const EXIT_DOMAIN: u8 = 1;
const EXIT_INPUT: u8 = 2;

#[derive(Parser)]
#[command(
    name = "ckkstune",
    version,
    about = "CKKS configuration search for encrypted neural-network inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Static feasibility screen: depth, scale and security checks.
    Analyze {
        /// Model description (JSON).
        #[arg(long)]
        model: PathBuf,
        /// Configuration to screen (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cleartext dual-run profile: per-layer work, error and latency proxy.
    Profile {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Seed for the synthetic evaluation batch.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Samples in the synthetic evaluation batch.
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full search: init screen, latency calibration, guided refinement.
    Optimize {
        #[arg(long)]
        model: PathBuf,
        /// Run settings document (JSON); built-in defaults when omitted.
        #[arg(long)]
        run_config: Option<PathBuf>,
        /// Override the encrypted-trial budget from the settings document.
        #[arg(long)]
        budget: Option<usize>,
        /// Override the evaluation-batch seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the measurement backend.
        #[arg(long, value_enum)]
        backend: Option<BackendKind>,
        /// Recorded-trial ledger, required with `--backend recorded`.
        #[arg(long)]
        recorded: Option<PathBuf>,
        /// Remote decision endpoint consulted during refinement.
        #[arg(long)]
        policy_endpoint: Option<String>,
        /// Append the trial ledger to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the JSON run report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run gate decisions for a scenario against recorded measurements.
    Replay {
        /// Scenario document: model, gates and expected verdicts (JSON).
        #[arg(long)]
        scenario: PathBuf,
        /// Recorded-trial ledger the scenario replays against.
        #[arg(long)]
        trace: PathBuf,
        /// Write the JSON replay report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a run report as a human-readable table.
    Report {
        /// RunReport JSON produced by `optimize --out`.
        path: PathBuf,
        /// Write the rendered table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendKind {
    Mock,
    Recorded,
}

/// A failed invocation: what to print and which contract code to exit with.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn domain(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_DOMAIN,
            message: message.into(),
        }
    }

    fn input(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Failure> {
    match cli.command {
        Command::Analyze { model, config, out } => cmd_analyze(&model, &config, out.as_deref()),
        Command::Profile {
            model,
            config,
            seed,
            samples,
            out,
        } => cmd_profile(&model, &config, seed, samples, out.as_deref()),
        Command::Optimize {
            model,
            run_config,
            budget,
            seed,
            backend,
            recorded,
            policy_endpoint,
            trace,
            out,
        } => cmd_optimize(OptimizeArgs {
            model,
            run_config,
            budget,
            seed,
            backend,
            recorded,
            policy_endpoint,
            trace,
            out,
        }),
        Command::Replay {
            scenario,
            trace,
            out,
        } => cmd_replay(&scenario, &trace, out.as_deref()),
        Command::Report { path, out } => cmd_report(&path, out.as_deref()),
    }
}

fn read_file(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::input(format!("reading {}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<ModelGraph, Failure> {
    ModelGraph::from_json(&read_file(path)?)
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<FheConfig, Failure> {
    FheConfig::from_json(&read_file(path)?)
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

/// Print to stdout, or write to `out` when given.
fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(path) => fs::write(path, text)
            .map_err(|e| Failure::input(format!("writing {}: {e}", path.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn to_pretty_json<T: serde::Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(value).map_err(|e| Failure::input(format!("encoding report: {e}")))
}

fn cmd_analyze(model: &Path, config: &Path, out: Option<&Path>) -> Result<ExitCode, Failure> {
    let graph = load_model(model)?;
    let config = load_config(config)?;
    config
        .validate_against(&graph)
        .map_err(|e| Failure::input(e.to_string()))?;

    let report = analyze(&graph, &config);
    emit(out, &to_pretty_json(&report)?)?;

    if report.pass(config.global.security_target_bits) {
        Ok(ExitCode::SUCCESS)
    } else {
        for reason in &report.reasons {
            eprintln!("check failed: {reason}");
        }
        Ok(ExitCode::from(EXIT_DOMAIN))
    }
}

fn cmd_profile(
    model: &Path,
    config: &Path,
    seed: u64,
    samples: usize,
    out: Option<&Path>,
) -> Result<ExitCode, Failure> {
    let graph = load_model(model)?;
    let config = load_config(config)?;
    config
        .validate_against(&graph)
        .map_err(|e| Failure::input(e.to_string()))?;

    let batch = CalibrationBatch { seed, samples };
    let clear = simulate(&graph, &config, &batch, &SEED_COEFFICIENTS).map_err(|e| match e {
        SimError::EmptyBatch => Failure::input(e.to_string()),
        SimError::Schedule(_) => Failure::domain(e.to_string()),
    })?;
    emit(out, &to_pretty_json(&clear)?)?;
    Ok(ExitCode::SUCCESS)
}

struct OptimizeArgs {
    model: PathBuf,
    run_config: Option<PathBuf>,
    budget: Option<usize>,
    seed: Option<u64>,
    backend: Option<BackendKind>,
    recorded: Option<PathBuf>,
    policy_endpoint: Option<String>,
    trace: Option<PathBuf>,
    out: Option<PathBuf>,
}

fn cmd_optimize(args: OptimizeArgs) -> Result<ExitCode, Failure> {
    let graph = load_model(&args.model)?;
    let mut run: RunConfig = match &args.run_config {
        Some(path) => serde_json::from_str(&read_file(path)?)
            .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?,
        None => RunConfig::default(),
    };

    if let Some(budget) = args.budget {
        run.budget = budget;
    }
    if let Some(seed) = args.seed {
        run.seed = seed;
    }
    match args.backend {
        Some(BackendKind::Mock) => run.backend = BackendSpec::default(),
        Some(BackendKind::Recorded) => {
            let path = args
                .recorded
                .clone()
                .or(match &run.backend {
                    BackendSpec::Recorded { path } => Some(path.clone()),
                    BackendSpec::Mock { .. } => None,
                })
                .ok_or_else(|| {
                    Failure::input("--backend recorded needs --recorded <ledger> or a recorded backend in the run settings")
                })?;
            run.backend = BackendSpec::Recorded { path };
        }
        None => {}
    }
    if let Some(trace) = args.trace {
        run.trace_path = Some(trace);
    }
    if let Some(endpoint) = args.policy_endpoint {
        run.policy_endpoint = Some(endpoint);
    }

    let mut policy: Box<dyn DecisionPolicy> = match &run.policy_endpoint {
        Some(endpoint) => {
            let transport = HttpTransport::new(endpoint.clone())
                .map_err(|e| Failure::input(format!("policy endpoint: {e}")))?;
            Box::new(RemotePolicy::new(transport))
        }
        None => Box::new(HeuristicPolicy),
    };

    let report = optimize(&graph, &run, policy.as_mut()).map_err(|e| match e {
        OptimizeError::InvalidRun(_) => Failure::input(e.to_string()),
        OptimizeError::Trace(_) => Failure::input(e.to_string()),
        OptimizeError::Eval(_) => Failure::domain(e.to_string()),
    })?;

    emit(args.out.as_deref(), &to_pretty_json(&report)?)?;
    eprintln!(
        "{:?} after {} trials ({} encrypted); best: {}",
        report.termination,
        report.total_trials,
        report.encrypted_trials,
        report
            .best
            .as_ref()
            .map(|b| format!("{} at {:.3}s", &b.digest[..12], b.latency_seconds))
            .unwrap_or_else(|| "none".into()),
    );

    if report.best.is_some() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(EXIT_DOMAIN))
    }
}

fn cmd_replay(scenario: &Path, trace: &Path, out: Option<&Path>) -> Result<ExitCode, Failure> {
    let report = replay_scenario(scenario, trace).map_err(|e| match &e {
        ReplayError::UnknownAlias { .. } | ReplayError::AliasMismatch { .. } => {
            Failure::domain(e.to_string())
        }
        ReplayError::Eval(_) => Failure::domain(e.to_string()),
        _ => Failure::input(e.to_string()),
    })?;

    println!("{}", render_replay(&report));
    if let Some(path) = out {
        emit(Some(path), &to_pretty_json(&report)?)?;
    }

    if report.all_matched {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(EXIT_DOMAIN))
    }
}

fn render_replay(report: &ReplayReport) -> String {
    let mut text = String::new();
    text.push_str(&format!(
        "scenario {} on {} ({} layers)\n\n",
        report.name, report.model.name, report.model.layer_count
    ));
    text.push_str(&format!(
        "{:<8} {:<9} {:<9} {:<6} {:>9} {:>10}\n",
        "trial", "expected", "actual", "match", "latency", "precision"
    ));
    for t in &report.trials {
        text.push_str(&format!(
            "{:<8} {:<9} {:<9} {:<6} {:>8.3}s {:>7.2} b\n",
            t.alias,
            format!("{:?}", t.expected).to_lowercase(),
            format!("{:?}", t.actual).to_lowercase(),
            if t.matched { "yes" } else { "NO" },
            t.latency_seconds,
            t.precision_bits,
        ));
    }
    text.push_str(&format!(
        "\n{} encrypted trials; best {}; {}",
        report.encrypted_trials,
        report.best_alias.as_deref().unwrap_or("none"),
        if report.all_matched {
            "all verdicts matched"
        } else {
            "VERDICT MISMATCH"
        }
    ));
    text
}

fn cmd_report(path: &Path, out: Option<&Path>) -> Result<ExitCode, Failure> {
    let report: RunReport = serde_json::from_str(&read_file(path)?)
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    emit(out, &render_run_report(&report))?;
    Ok(ExitCode::SUCCESS)
}

fn render_run_report(report: &RunReport) -> String {
    let mut text = String::new();
    text.push_str(&format!(
        "model {}: {} layers, depth lower bound {}\n",
        report.model.name, report.model.layer_count, report.model.depth_lower_bound
    ));
    text.push_str(&format!(
        "terminated: {:?} after {} iterations; {} trials, {} encrypted\n",
        report.termination, report.iterations, report.total_trials, report.encrypted_trials
    ));

    if let Some(cal) = &report.calibration {
        text.push_str(&format!(
            "latency model: mul {:.3e}  rot {:.3e}  boot {:.3e}  mem {:.3e}  ({} rows, rms {:.2e}{})\n",
            cal.coefficients.alpha,
            cal.coefficients.beta,
            cal.coefficients.gamma,
            cal.coefficients.delta,
            cal.observations,
            cal.residual_rms,
            if cal.fallback { ", seed fallback" } else { "" },
        ));
    }

    match &report.best {
        Some(best) => {
            let g = &best.config.global;
            text.push_str(&format!(
                "best: {}  latency {:.3}s  precision {:.2} bits  mae {:.2e}\n",
                &best.digest[..12.min(best.digest.len())],
                best.latency_seconds,
                best.precision_bits,
                best.mae,
            ));
            text.push_str(&format!(
                "  log_n {}, {} chain levels, scale {}, bootstrap interval {}\n",
                g.log_n,
                g.modulus_chain.len() - 1,
                g.log_scale,
                g.bootstrap_interval,
            ));
            for (layer, o) in &best.config.overrides {
                let mut parts = Vec::new();
                if let Some(e) = o.embedding_method {
                    parts.push(format!("embedding {e:?}"));
                }
                if let Some(gap) = o.bsgs_gap {
                    parts.push(format!("bsgs gap {gap}"));
                }
                if let Some(b) = o.max_parallel_blocks {
                    parts.push(format!("max blocks {b}"));
                }
                if let Some(d) = o.act_degree {
                    parts.push(format!("act degree {d}"));
                }
                if !parts.is_empty() {
                    text.push_str(&format!("  {layer}: {}\n", parts.join(", ")));
                }
            }

            // Per-layer runtime shares from the winning measurement.
            if let Some(rec) = report.trials.iter().find(|t| t.ordinal == best.ordinal) {
                let total: f64 = rec.metrics.layer_seconds.values().sum();
                if total > 0.0 {
                    let mut rows: Vec<(&String, &f64)> = rec.metrics.layer_seconds.iter().collect();
                    rows.sort_by(|a, b| b.1.total_cmp(a.1));
                    text.push_str("  layer runtime shares:\n");
                    for (layer, seconds) in rows {
                        text.push_str(&format!(
                            "    {:<12} {:>8.3}s  {:>5.1}%\n",
                            layer,
                            seconds,
                            100.0 * seconds / total
                        ));
                    }
                }
            }
        }
        None => text.push_str("best: none\n"),
    }

    if let Some(full) = &report.full_check {
        text.push_str(&format!(
            "full-depth check: {}{}  ({:.3}s)\n",
            if full.pass { "pass" } else { "FAIL" },
            if full.discrepancy {
                ", latency discrepancy"
            } else {
                ""
            },
            full.latency_seconds,
        ));
    }

    text.push_str(&format!(
        "\n{:<8} {:<11} {:<11} {:<14} {:>9}  {}\n",
        "ordinal", "phase", "mode", "digest", "latency", "gate"
    ));
    for t in &report.trials {
        text.push_str(&format!(
            "{:<8} {:<11} {:<11} {:<14} {:>9}  {}\n",
            t.ordinal,
            format!("{:?}", t.phase),
            format!("{:?}", t.mode),
            &t.digest[..12.min(t.digest.len())],
            t.metrics
                .latency_seconds
                .map(|l| format!("{l:.3}s"))
                .unwrap_or_else(|| "-".into()),
            if t.gate.pass { "pass" } else { "fail" },
        ));
    }
    text
}
