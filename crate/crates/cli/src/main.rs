//! `aggregame` command-line front end.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aggregame::analysis::{
    ablation_no_coupling, compare_with_oracle, epsilon_nash_check, sweep_is_decreasing, sweep_population,
    write_sweep_csv, DEFAULT_EPSILON_SAMPLE,
};
use aggregame::config::{ConfigBody, ConfigDocument, RunSection, ScenarioDoc};
use aggregame::engine::{default_init, run_algorithm1, run_oracle, RunResult, RunSettings, Termination};
use aggregame::ev::{build_default, FULL_AGENTS_PER_POPULATION};
use aggregame::mappings::{probe_eta, OperatorContext};
use aggregame::network::{validate_sequence, GraphSequence, DEFAULT_MU};
use aggregame::trace::IterationTrace;
use aggregame::{validate_game, GameConfig, IncentiveState};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "aggregame",
    version,
    about = "Multi-population aggregative game equilibrium seeking"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// JSON game or scenario document.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed for budget draws, start perturbation and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Built-in scenario, used when no config is given.
    #[arg(long, global = true, value_enum)]
    scenario: Option<Scenario>,
    /// 1000 vehicles per population instead of the desk default.
    #[arg(long, global = true)]
    full_scale: bool,
    /// Custom graph sequence (JSON list of steps of {from, to, weight}).
    #[arg(long, global = true)]
    graph: Option<PathBuf>,
    /// Load a custom graph even if it fails validation.
    #[arg(long, global = true)]
    allow_invalid_graph: bool,
    #[arg(long, global = true)]
    max_iterations: Option<usize>,
    /// Trace stride.
    #[arg(long, global = true)]
    record_every: Option<usize>,
    /// Spread of the seeded perturbation of the starting estimates.
    #[arg(long, global = true)]
    init_perturbation: Option<f64>,
    /// Disable data parallelism.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    EvDefault,
}

#[derive(Clone, Copy, ValueEnum)]
enum Engine {
    Algorithm1,
    Oracle,
}

#[derive(Subcommand)]
enum Command {
    /// Consensus-based coordinator iteration.
    Run,
    /// Centralized single-coordinator iteration.
    Oracle,
    /// Coordinator iteration against the oracle from matched starts.
    Compare,
    /// Iteration with the coupling price pinned at zero.
    Ablate,
    /// Epsilon-Nash check of a converged run.
    Epsilon {
        #[arg(long, default_value_t = DEFAULT_EPSILON_SAMPLE)]
        sample: usize,
        /// Lipschitz constant for the theoretical bound.
        #[arg(long)]
        lipschitz: Option<f64>,
        #[arg(long, value_enum, default_value = "algorithm1")]
        engine: Engine,
    },
    /// Epsilon against total population size.
    SweepN {
        #[arg(long, value_delimiter = ',', default_value = "100,200,400")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_EPSILON_SAMPLE)]
        sample: usize,
    },
    /// Game conditions and graph sequence checks.
    Validate {
        #[arg(long, default_value_t = 1000)]
        horizon: usize,
        /// Connectivity window; defaults to the number of populations.
        #[arg(long)]
        window: Option<usize>,
    },
    /// Largest step size passing the sampled non-expansiveness probe.
    ProbeEta {
        #[arg(long, default_value_t = 1e-3)]
        eta_min: f64,
        #[arg(long, default_value_t = 100.0)]
        eta_max: f64,
        #[arg(long, default_value_t = 12)]
        steps: usize,
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
    },
}

struct Setup {
    doc: ConfigDocument,
    config: GameConfig,
    settings: RunSettings,
    seq: GraphSequence,
    init: Vec<IncentiveState>,
}

fn load(g: &Global) -> Result<Setup> {
    let mut doc = match (&g.config, g.scenario) {
        (Some(path), _) => {
            ConfigDocument::from_file(path).with_context(|| format!("reading config {}", path.display()))?
        }
        (None, _) => ConfigDocument {
            body: ConfigBody::Scenario(ScenarioDoc {
                ev_scenario: build_default(),
                k: None,
                eta: None,
                schedule: None,
            }),
            run: None,
        },
    };
    if let ConfigBody::Scenario(s) = &mut doc.body {
        if g.full_scale {
            s.ev_scenario.agents_per_population = FULL_AGENTS_PER_POPULATION;
        }
        if let Some(seed) = g.seed {
            s.ev_scenario.seed = seed;
        }
    } else if g.full_scale {
        bail!("--full-scale applies only to scenario documents");
    }
    let config = doc.to_config()?;

    let mut settings = doc.settings();
    if let Some(seed) = g.seed {
        settings.seed = seed;
    }
    if let Some(m) = g.max_iterations {
        settings.max_iterations = m;
    }
    if let Some(r) = g.record_every {
        settings.record_every = r;
    }
    if g.sequential {
        settings.parallel = false;
    }
    settings.validate()?;

    let l = config.num_populations();
    let seq = match &g.graph {
        Some(path) => GraphSequence::from_json_file(path, l, g.allow_invalid_graph)
            .with_context(|| format!("reading graph {}", path.display()))?,
        None => doc.graph(l)?,
    };
    let perturbation = g
        .init_perturbation
        .or(doc.run.as_ref().map(|r| r.init_perturbation))
        .unwrap_or(0.0);
    let init = default_init(&config, perturbation, settings.seed);

    // Resolved document for replay.
    doc.run = Some(RunSection {
        settings: Some(settings.clone()),
        graph: Some(seq.generator.clone()),
        init_perturbation: perturbation,
    });
    Ok(Setup {
        doc,
        config,
        settings,
        seq,
        init,
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let f = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

fn write_trace(path: &Path, trace: &IterationTrace) -> Result<()> {
    trace.write_csv(BufWriter::new(File::create(path)?))?;
    Ok(())
}

fn write_run(out: &Path, setup: &Setup, result: &RunResult) -> Result<()> {
    write_trace(&out.join("trace.csv"), &result.trace)?;
    write_json(&out.join("result.json"), result)?;
    fs::write(out.join("config.json"), setup.doc.to_json_pretty()?)?;
    Ok(())
}

fn summarize(label: &str, result: &RunResult) {
    let last = result.final_record.as_ref().or(result.trace.last());
    println!(
        "{label}: {:?} after {} iterations; fixed-point residual {:.3e}, consensus {:.3e}, violation {:.3e}",
        result.termination,
        result.iterations,
        last.map_or(f64::NAN, |r| r.fixed_point_residual),
        last.map_or(f64::NAN, |r| r.consensus_residual),
        last.map_or(f64::NAN, |r| r.constraint_violation),
    );
}

fn code(t: Termination) -> ExitCode {
    match t {
        Termination::Converged => ExitCode::SUCCESS,
        Termination::MaxIterations => ExitCode::from(2),
    }
}

fn execute(cli: Cli) -> Result<ExitCode> {
    let g = &cli.global;
    let setup = load(g)?;
    let out = &g.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let Setup {
        config,
        settings,
        seq,
        init,
        ..
    } = &setup;

    match cli.command {
        Command::Run => {
            let result = run_algorithm1(config, seq, init, settings)?;
            write_run(out, &setup, &result)?;
            summarize("run", &result);
            Ok(code(result.termination))
        }
        Command::Oracle => {
            let result = run_oracle(config, &IncentiveState::mean(init)?, settings)?;
            write_run(out, &setup, &result)?;
            summarize("oracle", &result);
            Ok(code(result.termination))
        }
        Command::Compare => {
            let report = compare_with_oracle(config, seq, init, settings)?;
            write_trace(&out.join("trace.csv"), &report.consensus.trace)?;
            write_trace(&out.join("oracle_trace.csv"), &report.oracle.trace)?;
            let mut w = csv::Writer::from_path(out.join("gap.csv"))?;
            w.write_record(["k", "lockstep_gap", "gap_to_fixed_point"])?;
            for ((k, a), (_, b)) in report.lockstep_gap.iter().zip(&report.gap_to_fixed_point) {
                w.write_record([k.to_string(), a.to_string(), b.to_string()])?;
            }
            w.flush()?;
            write_json(
                &out.join("result.json"),
                &json!({
                    "terminal_gap": report.terminal_gap,
                    "consensus": &report.consensus,
                    "oracle_state": &report.oracle.average_state,
                    "oracle_termination": report.oracle.termination,
                }),
            )?;
            fs::write(out.join("config.json"), setup.doc.to_json_pretty()?)?;
            summarize("run", &report.consensus);
            summarize("oracle", &report.oracle);
            println!("terminal gap {:.3e}", report.terminal_gap);
            let both = report.consensus.termination == Termination::Converged
                && report.oracle.termination == Termination::Converged;
            Ok(code(if both {
                Termination::Converged
            } else {
                Termination::MaxIterations
            }))
        }
        Command::Ablate => {
            let report = ablation_no_coupling(config, seq, init, settings)?;
            write_trace(&out.join("trace.csv"), &report.result.trace)?;
            write_json(
                &out.join("result.json"),
                &json!({
                    "slot_violations": &report.slot_violations,
                    "max_violation": report.max_violation,
                    "result": &report.result,
                }),
            )?;
            fs::write(out.join("config.json"), setup.doc.to_json_pretty()?)?;
            summarize("ablation", &report.result);
            println!("max slot violation {:.3e}", report.max_violation);
            Ok(code(report.result.termination))
        }
        Command::Epsilon {
            sample,
            lipschitz,
            engine,
        } => {
            let result = match engine {
                Engine::Algorithm1 => run_algorithm1(config, seq, init, settings)?,
                Engine::Oracle => run_oracle(config, &IncentiveState::mean(init)?, settings)?,
            };
            let report = epsilon_nash_check(&result, config, sample, settings.seed, lipschitz)?;
            report.write_csv(BufWriter::new(File::create(out.join("epsilon.csv"))?))?;
            write_run(out, &setup, &result)?;
            summarize("run", &result);
            println!(
                "max epsilon {:.3e}, max deviation distance {:.3e}, over {} agents ({} distinct); bound {}",
                report.max_epsilon,
                report.max_deviation_distance,
                report.sampled_agents.len(),
                report.distinct_profiles,
                report
                    .theoretical_bound
                    .map_or("unavailable".to_string(), |b| format!("{b:.3e}")),
            );
            Ok(code(result.termination))
        }
        Command::SweepN { sizes, sample } => {
            let rows = sweep_population(config, &sizes, settings, sample, settings.seed)?;
            write_sweep_csv(&rows, BufWriter::new(File::create(out.join("sweep.csv"))?))?;
            fs::write(out.join("config.json"), setup.doc.to_json_pretty()?)?;
            for r in &rows {
                println!(
                    "N = {:6}  max epsilon {:.3e}  deviation distance {:.3e}  ({} iterations)",
                    r.n, r.max_epsilon, r.max_deviation_distance, r.iterations
                );
            }
            println!("decreasing within 20%: {}", sweep_is_decreasing(&rows, 0.2));
            let all = rows.iter().all(|r| r.converged);
            Ok(code(if all {
                Termination::Converged
            } else {
                Termination::MaxIterations
            }))
        }
        Command::Validate { horizon, window } => {
            let mut report = validate_game(config);
            let window = window.unwrap_or(config.num_populations());
            report.merge(validate_sequence(seq, horizon, DEFAULT_MU, window));
            let ctx = OperatorContext::new(config)?;
            let (col, row) = ctx.resolvent_norms();
            report.warn(format!(
                "resolvent norms: max column sum {col:.6}, max row sum {row:.6}"
            ));
            println!("{report}");
            Ok(if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::ProbeEta {
            eta_min,
            eta_max,
            steps,
            pairs,
        } => {
            let probe = probe_eta(config, eta_min, eta_max, steps, pairs, settings.seed, settings.parallel)?;
            for s in &probe.steps {
                println!(
                    "eta {:.6e}: {} / {} pairs violate, max excess {:.3e}",
                    s.eta, s.violations, s.pairs, s.max_excess
                );
            }
            write_json(&out.join("probe.json"), &probe)?;
            match probe.eta {
                Some(eta) => {
                    println!("largest passing eta {eta:.6e}");
                    Ok(ExitCode::SUCCESS)
                }
                None => {
                    println!("no eta in [{eta_min}, {eta_max}] passed");
                    Ok(ExitCode::from(1))
                }
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
