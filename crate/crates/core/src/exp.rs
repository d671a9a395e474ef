//! Experiment orchestration: episode fan-out, aggregation, fidelity-by-rank
//! curves, monitoring overhead and parameter sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::base::{baseline_controller, GlobalConfig, PlannerKind};
use crate::policy::{LearnedController, OpCounters, PolicyConfig, PolicyNet, BYTES_PER_FLOAT};
use crate::sim::{Controller, EpisodeMetrics, Event, FailureCounts, SimConfig, SimError, Simulator};
use crate::topo::{generate_random, load_topology, GeneratorConfig, PhysicalTopology, ProfileSampler, TopoError};
use crate::train::{episode_seed, sample_pairs};

/// Environment variable holding the episode worker count.
pub const WORKERS_ENV: &str = "QROUTE_WORKERS";

#[derive(Debug, Error)]
pub enum ExpError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("planner `learned` needs a checkpoint")]
    MissingCheckpoint,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Topo(#[from] TopoError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ExpError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExpError + '_ {
    move |source| ExpError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parameter domains of the evaluation grid.
pub mod domains {
    pub const REPEATERS: [usize; 5] = [10, 30, 100, 300, 1000];
    pub const PAIRS: [usize; 5] = [1, 3, 10, 30, 100];
    pub const ALPHA: [f64; 3] = [0.15, 0.2, 0.25];
    pub const INITIAL_FIDELITY: [f64; 5] = [0.8, 0.85, 0.9, 0.95, 1.0];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub planner: PlannerKind,
    pub repeaters: usize,
    pub pairs: usize,
    /// Fiber attenuation, dB/km.
    pub alpha: f64,
    pub initial_fidelity: f64,
    pub f_gate_mean: f64,
    pub f_gate_spread: f64,
    pub n_dec_mean: f64,
    pub n_dec_spread: f64,
    pub episodes: usize,
    /// Steps per episode after the link warm-up.
    pub steps: u64,
    pub seed: u64,
    /// Fixed topology file; a fresh random graph per episode when unset.
    pub topology: Option<PathBuf>,
    /// Weights for the learned planner.
    pub checkpoint: Option<PathBuf>,
    pub ttl: u32,
    pub warmup_steps: u32,
    pub distill_enabled: bool,
    pub global: GlobalConfig,
    /// Keep per-episode event logs in the result.
    pub record_events: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        Self {
            planner: PlannerKind::Learned,
            repeaters: 100,
            pairs: 1,
            alpha: 0.2,
            initial_fidelity: 0.95,
            f_gate_mean: 1.0,
            f_gate_spread: 0.1,
            n_dec_mean: 1024.0,
            n_dec_spread: 0.0,
            episodes: 100,
            steps: 1000,
            seed: 0,
            topology: None,
            checkpoint: None,
            ttl: sim.ttl,
            warmup_steps: sim.warmup_steps,
            distill_enabled: false,
            global: GlobalConfig::default(),
            record_events: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(ExpError::Config("episodes must be >= 1".into()));
        }
        if self.pairs == 0 {
            return Err(ExpError::Config("pairs must be >= 1".into()));
        }
        if self.topology.is_none() && self.repeaters < 2 {
            return Err(ExpError::Config("repeaters must be >= 2".into()));
        }
        if !(self.f_gate_spread >= 0.0 && self.f_gate_mean > 0.0 && self.f_gate_mean <= 1.0) {
            return Err(ExpError::Config(format!(
                "f_gate mean/spread = {}/{}",
                self.f_gate_mean, self.f_gate_spread
            )));
        }
        if self.planner == PlannerKind::Learned && self.checkpoint.is_none() {
            return Err(ExpError::MissingCheckpoint);
        }
        if self.global.fidelity_threshold < 0.55 {
            log::warn!(
                "global planner threshold {} is below 0.55; plans will rarely be usable",
                self.global.fidelity_threshold
            );
        }
        if !domains::REPEATERS.contains(&self.repeaters)
            || !domains::PAIRS.contains(&self.pairs)
            || !domains::ALPHA.contains(&self.alpha)
            || !domains::INITIAL_FIDELITY.contains(&self.initial_fidelity)
        {
            log::info!("configuration leaves the standard parameter grid");
        }
        self.sim_config().validate()?;
        Ok(())
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            alpha: self.alpha,
            initial_fidelity: self.initial_fidelity,
            ttl: self.ttl,
            warmup_steps: self.warmup_steps,
            distill_enabled: self.distill_enabled,
            ..SimConfig::default()
        }
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            profiles: ProfileSampler {
                f_gate_mean: self.f_gate_mean,
                f_gate_spread: self.f_gate_spread,
                pulses_mean: self.n_dec_mean,
                pulses_spread: self.n_dec_spread,
            },
            ..GeneratorConfig::default()
        }
    }
}

/// One point of the fidelity-by-rank curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankPoint {
    /// 1 = best entanglement of each episode.
    pub rank: usize,
    pub median: f64,
    pub p25: f64,
    pub p75: f64,
    /// Episodes with at least `rank` successes.
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateReport {
    pub planner: PlannerKind,
    pub episodes: usize,
    pub mean_edr: f64,
    pub median_edr: f64,
    pub p25_edr: f64,
    pub p75_edr: f64,
    pub mean_fidelity: f64,
    pub failures: FailureCounts,
    /// Monitoring messages per fiber per second of simulated time.
    pub messages_per_link_per_second: f64,
    /// Mean wall-clock seconds per step. Not deterministic.
    pub runtime_per_step: f64,
    pub fidelity_rank: Vec<RankPoint>,
    /// Learned planner only.
    pub ops: Option<OpCounters>,
}

/// Everything produced by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub report: AggregateReport,
    pub episodes: Vec<EpisodeMetrics>,
    /// Per-episode event logs, empty unless `record_events` is set.
    pub events: Vec<Vec<Event>>,
}

impl ExperimentResult {
    /// Per-step rows of every episode under one header.
    pub fn raw_csv(&self) -> String {
        let mut out = String::new();
        for (i, m) in self.episodes.iter().enumerate() {
            let csv = m.to_csv();
            let body = if i == 0 { &csv[..] } else { csv.split_once('\n').map_or("", |x| x.1) };
            out.push_str(body);
        }
        if out.is_empty() {
            out.push_str("seed,step,edr,mean_fidelity,failures_by_cause\n");
        }
        out
    }

    pub fn events_jsonl(&self) -> String {
        let mut out = String::new();
        for (ep, log) in self.events.iter().enumerate() {
            for e in log {
                let mut v = serde_json::to_value(e).expect("events serialize");
                v["episode"] = ep.into();
                let _ = writeln!(out, "{v}");
            }
        }
        out
    }
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-rank median and quartiles of end-to-end fidelity. Rank `r` uses the
/// `r`-th highest fidelity of every episode that has at least `r` successes.
pub fn fidelity_rank_curve(episodes: &[EpisodeMetrics]) -> Vec<RankPoint> {
    let sorted: Vec<Vec<f64>> = episodes
        .iter()
        .map(|m| {
            let mut f = m.e2e_fidelities.clone();
            f.sort_by(|a, b| b.total_cmp(a));
            f
        })
        .collect();
    let max_rank = sorted.iter().map(Vec::len).max().unwrap_or(0);
    (1..=max_rank)
        .map(|rank| {
            let mut vals: Vec<f64> = sorted.iter().filter_map(|f| f.get(rank - 1).copied()).collect();
            vals.sort_by(f64::total_cmp);
            RankPoint {
                rank,
                median: percentile(&vals, 0.5),
                p25: percentile(&vals, 0.25),
                p75: percentile(&vals, 0.75),
                episodes: vals.len(),
            }
        })
        .collect()
}

/// Aggregates episode metrics into a report.
pub fn aggregate(planner: PlannerKind, episodes: &[EpisodeMetrics], edges: &[usize], step_duration: f64) -> AggregateReport {
    let mut edr: Vec<f64> = episodes.iter().map(|m| m.edr as f64).collect();
    edr.sort_by(f64::total_cmp);
    let n = episodes.len().max(1) as f64;
    let mut failures = FailureCounts::default();
    for m in episodes {
        failures.add(&m.failures);
    }
    let fids: Vec<f64> = episodes.iter().flat_map(|m| m.e2e_fidelities.iter().copied()).collect();
    let mut rate = 0.0;
    for (m, &e) in episodes.iter().zip(edges) {
        let seconds = m.steps as f64 * step_duration;
        if e > 0 && seconds > 0.0 {
            rate += m.messages as f64 / (e as f64 * seconds);
        }
    }
    let total_steps: u64 = episodes.iter().map(|m| m.steps).sum();
    AggregateReport {
        planner,
        episodes: episodes.len(),
        mean_edr: edr.iter().sum::<f64>() / n,
        median_edr: percentile(&edr, 0.5),
        p25_edr: percentile(&edr, 0.25),
        p75_edr: percentile(&edr, 0.75),
        mean_fidelity: if fids.is_empty() {
            0.0
        } else {
            fids.iter().sum::<f64>() / fids.len() as f64
        },
        failures,
        messages_per_link_per_second: rate / n,
        runtime_per_step: if total_steps == 0 {
            0.0
        } else {
            episodes.iter().map(|m| m.wall_seconds).sum::<f64>() / total_steps as f64
        },
        fidelity_rank: fidelity_rank_curve(episodes),
        ops: None,
    }
}

/// Worker count from [`WORKERS_ENV`], defaulting to the available cores.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

struct EpisodeOutput {
    metrics: EpisodeMetrics,
    events: Vec<Event>,
    edges: usize,
    ops: Option<OpCounters>,
}

fn run_episode(
    cfg: &ExperimentConfig,
    fixed: Option<&Arc<PhysicalTopology>>,
    net: Option<&Arc<PolicyNet>>,
    episode: usize,
) -> Result<EpisodeOutput> {
    let seed = episode_seed(cfg.seed, episode as u64);
    let topo = match fixed {
        Some(t) => Arc::clone(t),
        None => Arc::new(generate_random(cfg.repeaters, seed, &cfg.generator())?),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = sample_pairs(topo.node_count(), cfg.pairs, &mut rng);
    let sim_cfg = cfg.sim_config();
    let mut sim = Simulator::new(Arc::clone(&topo), sim_cfg.clone(), &pairs, seed)?;
    sim.set_record_events(cfg.record_events);
    let total = sim_cfg.warmup_steps as u64 + cfg.steps;
    let ops = if cfg.planner == PlannerKind::Learned {
        let net = net.ok_or(ExpError::MissingCheckpoint)?;
        let mut ctrl = LearnedController::new(Arc::clone(net), 0.0, seed ^ 1);
        sim.run(&mut ctrl, total)?;
        Some(ctrl.ops)
    } else {
        let mut ctrl: Box<dyn Controller + Send> =
            baseline_controller(cfg.planner, &topo, pairs.len(), cfg.global, seed ^ 1).expect("baseline planner");
        sim.run(ctrl.as_mut(), total)?;
        None
    };
    let events = sim.events().to_vec();
    Ok(EpisodeOutput {
        metrics: sim.into_metrics(),
        events,
        edges: topo.edge_count(),
        ops,
    })
}

/// Runs all episodes of `cfg`, loading weights from `cfg.checkpoint` for the
/// learned planner.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let net = match (&cfg.planner, &cfg.checkpoint) {
        (PlannerKind::Learned, Some(path)) => Some(Arc::new(PolicyNet::load(PolicyConfig::default(), path)?)),
        _ => None,
    };
    run_with(cfg, net)
}

/// Like [`run_experiment`] with an in-memory network for the learned
/// planner.
pub fn run_experiment_with_net(cfg: &ExperimentConfig, net: Arc<PolicyNet>) -> Result<ExperimentResult> {
    let cfg = ExperimentConfig {
        checkpoint: cfg.checkpoint.clone().or_else(|| Some(PathBuf::from("<memory>"))),
        ..cfg.clone()
    };
    cfg.validate()?;
    run_with(&cfg, Some(net))
}

fn run_with(cfg: &ExperimentConfig, net: Option<Arc<PolicyNet>>) -> Result<ExperimentResult> {
    let fixed = match &cfg.topology {
        Some(path) => Some(Arc::new(load_topology(path, GeneratorConfig::default().qubits_per_degree)?)),
        None => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| ExpError::Config(e.to_string()))?;
    let outputs: Vec<EpisodeOutput> = pool.install(|| {
        (0..cfg.episodes)
            .into_par_iter()
            .map(|ep| run_episode(cfg, fixed.as_ref(), net.as_ref(), ep))
            .collect::<Result<Vec<_>>>()
    })?;
    let edges: Vec<usize> = outputs.iter().map(|o| o.edges).collect();
    let mut ops: Option<OpCounters> = None;
    for o in &outputs {
        if let Some(c) = o.ops {
            let acc = ops.get_or_insert_with(OpCounters::default);
            acc.node_updates += c.node_updates;
            acc.q_evaluations += c.q_evaluations;
            acc.max_node_updates_per_cycle = acc.max_node_updates_per_cycle.max(c.max_node_updates_per_cycle);
        }
    }
    let (episodes, events): (Vec<_>, Vec<_>) = outputs.into_iter().map(|o| (o.metrics, o.events)).unzip();
    let mut report = aggregate(cfg.planner, &episodes, &edges, cfg.sim_config().step_duration);
    report.ops = ops;
    Ok(ExperimentResult {
        report,
        episodes,
        events: if cfg.record_events { events } else { Vec::new() },
    })
}

/// Inputs of the monitoring overhead arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverheadConfig {
    pub step_duration: f64,
    pub pairs: u64,
    pub floats_per_message: u64,
    pub bytes_per_float: u64,
}

impl Default for OverheadConfig {
    fn default() -> Self {
        Self {
            step_duration: 0.01,
            pairs: 1,
            floats_per_message: PolicyConfig::default().message as u64,
            bytes_per_float: BYTES_PER_FLOAT as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeLoad {
    pub node: usize,
    pub degree: usize,
    pub messages_per_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverheadReport {
    pub message_bytes: u64,
    /// Both directions, all pairs.
    pub bits_per_link_per_step: u64,
    pub bits_per_link_per_second: u64,
    pub nodes: Vec<NodeLoad>,
}

impl OverheadReport {
    pub fn kbps_per_link(&self) -> f64 {
        self.bits_per_link_per_second as f64 / 1000.0
    }

    /// Per-node message distribution.
    pub fn nodes_csv(&self) -> String {
        let mut out = String::from("node,degree,messages_per_step\n");
        for n in &self.nodes {
            let _ = writeln!(out, "{},{},{}", n.node, n.degree, n.messages_per_step);
        }
        out
    }
}

/// Classical load of the monitoring cycle: every fiber carries one message
/// per direction per pair per step. Exact integer arithmetic; the step
/// duration is rounded to whole microseconds.
pub fn overhead_report(cfg: &OverheadConfig, topo: Option<&PhysicalTopology>) -> Result<OverheadReport> {
    let micros = (cfg.step_duration * 1e6).round() as u64;
    if micros == 0 {
        return Err(ExpError::Config(format!("step_duration = {}", cfg.step_duration)));
    }
    let message_bytes = cfg.floats_per_message * cfg.bytes_per_float;
    let bits_per_link_per_step = 2 * message_bytes * 8 * cfg.pairs;
    let nodes = topo.map_or_else(Vec::new, |t| {
        (0..t.node_count())
            .map(|v| NodeLoad {
                node: v,
                degree: t.degree(v),
                messages_per_step: t.degree(v) as u64 * cfg.pairs * 2,
            })
            .collect()
    });
    Ok(OverheadReport {
        message_bytes,
        bits_per_link_per_step,
        bits_per_link_per_second: bits_per_link_per_step * 1_000_000 / micros,
        nodes,
    })
}

/// Axes of a parameter sweep. Unset axes keep the base configuration's
/// value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub repeaters: Option<Vec<usize>>,
    pub pairs: Option<Vec<usize>>,
    pub alpha: Option<Vec<f64>>,
    pub initial_fidelity: Option<Vec<f64>>,
    pub planner: Option<Vec<PlannerKind>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub index: usize,
    pub name: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

impl SweepGrid {
    /// Cartesian product over the set axes. Cell `i` uses seed
    /// `base.seed + i`.
    pub fn cells(&self, base: &ExperimentConfig) -> Result<Vec<SweepCell>> {
        let axes = [
            self.repeaters.as_ref().map(Vec::len),
            self.pairs.as_ref().map(Vec::len),
            self.alpha.as_ref().map(Vec::len),
            self.initial_fidelity.as_ref().map(Vec::len),
            self.planner.as_ref().map(Vec::len),
        ];
        if axes.iter().all(Option::is_none) || axes.contains(&Some(0)) {
            return Err(ExpError::Config("empty sweep grid".into()));
        }
        let mut cells = Vec::new();
        for &planner in &one(&self.planner, base.planner) {
            for &repeaters in &one(&self.repeaters, base.repeaters) {
                for &pairs in &one(&self.pairs, base.pairs) {
                    for &alpha in &one(&self.alpha, base.alpha) {
                        for &f0 in &one(&self.initial_fidelity, base.initial_fidelity) {
                            let index = cells.len();
                            let seed = base.seed.wrapping_add(index as u64);
                            cells.push(SweepCell {
                                index,
                                name: format!("{index:03}_{planner}_n{repeaters}_p{pairs}_a{alpha}_f{f0}"),
                                seed,
                                config: ExperimentConfig {
                                    planner,
                                    repeaters,
                                    pairs,
                                    alpha,
                                    initial_fidelity: f0,
                                    seed,
                                    ..base.clone()
                                },
                            });
                        }
                    }
                }
            }
        }
        Ok(cells)
    }
}

fn one<T: Clone>(axis: &Option<Vec<T>>, base: T) -> Vec<T> {
    axis.clone().unwrap_or_else(|| vec![base])
}

/// Runs every cell of the grid and writes `<name>.json` (report) and
/// `<name>.csv` (raw rows) per cell plus `manifest.json` into `out_dir`.
pub fn sweep(base: &ExperimentConfig, grid: &SweepGrid, out_dir: &Path) -> Result<Vec<SweepCell>> {
    let cells = grid.cells(base)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    for cell in &cells {
        let result = run_experiment(&cell.config)?;
        let json = out_dir.join(format!("{}.json", cell.name));
        std::fs::write(&json, serde_json::to_string_pretty(&result.report)?).map_err(io_err(&json))?;
        let csv = out_dir.join(format!("{}.csv", cell.name));
        std::fs::write(&csv, result.raw_csv()).map_err(io_err(&csv))?;
    }
    let manifest = out_dir.join("manifest.json");
    std::fs::write(&manifest, serde_json::to_string_pretty(&cells)?).map_err(io_err(&manifest))?;
    Ok(cells)
}
