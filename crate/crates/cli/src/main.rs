use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qroute::base::PlannerKind;
use qroute::exp::{self, domains, ExpError, ExperimentConfig, OverheadConfig, SweepGrid};
use qroute::sim::SimError;
use qroute::topo::load_topology;
use qroute::train::{self, TrainConfig, TrainError};
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "qroute", version, about = "Entanglement routing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its report.
    Run {
        #[command(flatten)]
        exp: ExpArgs,
        /// Output directory for report.json, raw.csv and events.jsonl.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train the learned planner and save a checkpoint.
    Train {
        /// JSON training config; unset fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start from the desk-scale preset instead of the full defaults.
        #[arg(long)]
        smoke: bool,
        #[arg(long)]
        total_steps: Option<u64>,
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "model.ckpt")]
        checkpoint: PathBuf,
        /// Learning curve CSV.
        #[arg(long, default_value = "curve.csv")]
        curve: PathBuf,
    },
    /// Run every cell of a parameter grid.
    Sweep {
        #[command(flatten)]
        exp: ExpArgs,
        /// JSON grid with any of: repeaters, pairs, alpha, initial_fidelity, planner.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
    /// Classical monitoring load per link and per node.
    Overhead {
        #[arg(long, default_value_t = 0.01)]
        step_duration: f64,
        #[arg(long, default_value_t = 1)]
        pairs: u64,
        /// Topology for the per-node message CSV.
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long)]
        nodes_csv: Option<PathBuf>,
    },
    /// Print the parameter grid and the planner names.
    Tables,
}

/// Flags mirroring `ExperimentConfig`; set flags override the config file.
#[derive(Args)]
struct ExpArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    planner: Option<PlannerKind>,
    #[arg(long)]
    repeaters: Option<usize>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    initial_fidelity: Option<f64>,
    #[arg(long)]
    f_gate_mean: Option<f64>,
    #[arg(long)]
    f_gate_spread: Option<f64>,
    #[arg(long)]
    n_dec_mean: Option<f64>,
    #[arg(long)]
    n_dec_spread: Option<f64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    topology: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    ttl: Option<u32>,
    #[arg(long)]
    warmup_steps: Option<u32>,
    #[arg(long)]
    distill: bool,
    /// Also write the per-episode event logs.
    #[arg(long)]
    events: bool,
}

macro_rules! overlay {
    ($cfg:ident, $args:ident; $($f:ident),*) => {
        $(if let Some(v) = $args.$f.clone() { $cfg.$f = v.into(); })*
    };
}

impl ExpArgs {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg: ExperimentConfig = match &self.config {
            Some(path) => read_json(path)?,
            None => ExperimentConfig::default(),
        };
        let args = self;
        overlay!(cfg, args; planner, repeaters, pairs, alpha, initial_fidelity, f_gate_mean, f_gate_spread,
            n_dec_mean, n_dec_spread, episodes, steps, seed, ttl, warmup_steps, topology, checkpoint);
        cfg.distill_enabled |= self.distill;
        cfg.record_events |= self.events;
        Ok(cfg)
    }
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Runtime(String),
}

impl From<ExpError> for CliError {
    fn from(e: ExpError) -> Self {
        match e {
            ExpError::Config(_) | ExpError::MissingCheckpoint | ExpError::Topo(_) | ExpError::Sim(SimError::Config(_)) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Sim(SimError::Config(_)) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn json(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("reports serialize")
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run { exp, out } => {
            let cfg = exp.resolve()?;
            let result = exp::run_experiment(&cfg)?;
            let r = &result.report;
            println!(
                "{}: mean EDR {:.2} (median {:.1}, p25 {:.1}, p75 {:.1}), mean fidelity {:.4}",
                r.planner, r.mean_edr, r.median_edr, r.p25_edr, r.p75_edr, r.mean_fidelity
            );
            write(&out.join("report.json"), json(r))?;
            write(&out.join("raw.csv"), result.raw_csv())?;
            if cfg.record_events {
                write(&out.join("events.jsonl"), result.events_jsonl())?;
            }
        }
        Command::Train {
            config,
            smoke,
            total_steps,
            nodes,
            pairs,
            seed,
            checkpoint,
            curve,
        } => {
            let mut cfg = match (&config, smoke) {
                (Some(path), _) => read_json(path)?,
                (None, true) => TrainConfig::smoke(),
                (None, false) => TrainConfig::default(),
            };
            cfg.total_steps = total_steps.unwrap_or(cfg.total_steps);
            cfg.nodes = nodes.unwrap_or(cfg.nodes);
            cfg.pairs = pairs.unwrap_or(cfg.pairs);
            cfg.seed = seed.unwrap_or(cfg.seed);
            let every = (cfg.total_steps / cfg.episode_steps / 20).max(1);
            let out = train::training_run(&cfg, |ep, _| {
                if ep % every == 0 {
                    log::info!("episode {ep}");
                }
            })?;
            for (step, edr) in &out.validation {
                println!("validation at step {step}: EDR {edr}");
            }
            out.net.save(&checkpoint).map_err(|e| CliError::Runtime(e.to_string()))?;
            write(&curve, train::curve_csv(&out.curve))?;
            println!("{} steps, checkpoint written to {}", out.steps, checkpoint.display());
        }
        Command::Sweep { exp, grid, out } => {
            let base = exp.resolve()?;
            let grid: SweepGrid = read_json(&grid)?;
            let cells = exp::sweep(&base, &grid, &out)?;
            println!("{} cells written to {}", cells.len(), out.display());
        }
        Command::Overhead {
            step_duration,
            pairs,
            topology,
            nodes_csv,
        } => {
            let topo = match &topology {
                Some(path) => Some(load_topology(path, 2).map_err(|e| CliError::Config(e.to_string()))?),
                None => None,
            };
            let cfg = OverheadConfig {
                step_duration,
                pairs,
                ..OverheadConfig::default()
            };
            let r = exp::overhead_report(&cfg, topo.as_ref())?;
            println!("message size: {} B", r.message_bytes);
            println!("per link: {:.1} kbps", r.kbps_per_link());
            if let Some(path) = nodes_csv {
                write(&path, r.nodes_csv())?;
            }
        }
        Command::Tables => print_tables(),
    }
    Ok(())
}

fn print_tables() {
    let d = ExperimentConfig::default();
    let row = |name: &str, values: Vec<String>, default: String| {
        let marked: Vec<String> = values.into_iter().map(|v| if v == default { format!("[{v}]") } else { v }).collect();
        println!("{name:<22}{}", marked.join(" "));
    };
    let s = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    println!("parameter grid ([default])");
    row("repeaters", domains::REPEATERS.iter().map(|x| x.to_string()).collect(), d.repeaters.to_string());
    row("pairs", domains::PAIRS.iter().map(|x| x.to_string()).collect(), d.pairs.to_string());
    row("alpha (dB/km)", s(&domains::ALPHA), d.alpha.to_string());
    row("initial fidelity", s(&domains::INITIAL_FIDELITY), d.initial_fidelity.to_string());
    println!("{:<22}{} / {}", "gate fidelity", d.f_gate_mean, d.f_gate_spread);
    println!("{:<22}{} / {}", "decoupling pulses", d.n_dec_mean, d.n_dec_spread);
    println!("{:<22}{} x {} steps", "episodes", d.episodes, d.steps);
    println!();
    let names: Vec<String> = PlannerKind::ALL.iter().map(|p| p.to_string()).collect();
    println!("planners: {}", names.join(", "));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

