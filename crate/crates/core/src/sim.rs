//! Discrete-time entanglement routing environment.
//!
//! One call to [`Simulator::step`] runs the sub-phases of a 10 ms slot in a
//! fixed order: link generation, decay and pruning, optional distillation,
//! the controller's monitoring cycle, then agent moves (with TTL drops and
//! swap chains for agents that reached their destination), then metrics.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qcalc::{
    self, distill_pair, stretched_decay, swap_unchecked, BASELINE_FIDELITY, DEFAULT_STRETCH,
    DEFAULT_T2_EXPONENT, T2_BASE_SECONDS,
};
use crate::topo::{qubit_buckets, EdgeId, NodeId, PhysicalTopology};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Qcalc(#[from] qcalc::QcalcError),
    #[error("controller error: {0}")]
    Controller(String),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Memory decoherence model applied to stored links.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayModel {
    /// Stretched exponential with `T2 = t2_base * n_dec^beta`.
    Stretched,
    /// `F(t) = (F0 - F_B) exp(-t / tau) + F_B` with `tau` drawn per edge
    /// uniformly from `[0.5 T2, 1.5 T2]` at episode start. Used in training.
    Exponential,
    /// Links never decay.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Seconds per step, `T`.
    pub step_duration: f64,
    /// Fiber attenuation in dB/km.
    pub alpha: f64,
    /// Speed of light in fiber, m/s.
    pub c_fiber: f64,
    /// Upper bound on generation attempts per second per memory slot.
    pub gen_rate_cap: f64,
    /// Fidelity of freshly generated links, `F0`.
    pub initial_fidelity: f64,
    /// End-to-end acceptance threshold, `F_th`.
    pub f_threshold: f64,
    /// Maximum planning hops before an agent is dropped, `P_max`.
    pub ttl: u32,
    pub distill_enabled: bool,
    pub distill_target: f64,
    /// Probability that a single Bell-state measurement succeeds.
    pub swap_success_prob: f64,
    /// Links are pruned once their fidelity is within this margin of 0.5.
    pub prune_margin: f64,
    /// Phase-1 steps (links only, no agent moves) at the start of an episode.
    pub warmup_steps: u32,
    pub decay: DecayModel,
    pub stretch: f64,
    pub t2_exponent: f64,
    pub t2_base: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            step_duration: 0.01,
            alpha: 0.2,
            c_fiber: 2e8,
            gen_rate_cap: 1e6,
            initial_fidelity: 0.95,
            f_threshold: 0.5,
            ttl: 20,
            distill_enabled: false,
            distill_target: 0.98,
            swap_success_prob: 1.0,
            prune_margin: 1e-3,
            warmup_steps: 10,
            decay: DecayModel::Stretched,
            stretch: DEFAULT_STRETCH,
            t2_exponent: DEFAULT_T2_EXPONENT,
            t2_base: T2_BASE_SECONDS,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SimError::Config(m));
        if !(self.step_duration > 0.0 && self.step_duration.is_finite()) {
            return bad(format!("step_duration = {}", self.step_duration));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha = {}", self.alpha));
        }
        if !(self.c_fiber > 0.0 && self.gen_rate_cap >= 0.0) {
            return bad("c_fiber and gen_rate_cap must be positive".into());
        }
        if !(self.initial_fidelity > BASELINE_FIDELITY && self.initial_fidelity <= 1.0) {
            return bad(format!("initial_fidelity = {}", self.initial_fidelity));
        }
        if !(self.f_threshold >= BASELINE_FIDELITY && self.f_threshold < 1.0) {
            return bad(format!("f_threshold = {}", self.f_threshold));
        }
        if self.ttl == 0 {
            return bad("ttl must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.swap_success_prob) {
            return bad(format!("swap_success_prob = {}", self.swap_success_prob));
        }
        if !(self.prune_margin >= 0.0 && self.prune_margin < 0.5) {
            return bad(format!("prune_margin = {}", self.prune_margin));
        }
        Ok(())
    }
}

/// `p = exp(-alpha L / 10)`.
pub fn link_success_prob(alpha: f64, length_km: f64) -> f64 {
    (-alpha * length_km / 10.0).exp()
}

/// Total generation attempts in one step over `free_slots` memory slots:
/// `min(floor(c T / 2L), floor(cap T))` per slot.
pub fn attempts_per_step(length_km: f64, cfg: &SimConfig, free_slots: u32) -> u64 {
    let round_trips = (cfg.c_fiber * cfg.step_duration / (2.0 * length_km * 1000.0)).floor();
    let cap = (cfg.gen_rate_cap * cfg.step_duration).floor();
    round_trips.min(cap).max(0.0) as u64 * free_slots as u64
}

/// One Bell pair stored across a fiber.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ElementaryLink {
    pub created_at: u64,
    pub initial_fidelity: f64,
    /// Fidelity as of the last decay update.
    pub fidelity: f64,
}

/// A source-destination request and its in-progress plan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingAgent {
    pub pair: usize,
    pub source: NodeId,
    pub dest: NodeId,
    /// Visited nodes, starting at `source`; the last entry is the current node.
    pub path: Vec<NodeId>,
    /// Edges traversed so far, parallel to `path[1..]`.
    pub edges: Vec<EdgeId>,
    /// Whether the agent still holds a reservation on the matching edge.
    pub held: Vec<bool>,
    pub age: u32,
}

impl RoutingAgent {
    fn new(pair: usize, source: NodeId, dest: NodeId) -> Self {
        Self {
            pair,
            source,
            dest,
            path: vec![source],
            edges: Vec::new(),
            held: Vec::new(),
            age: 0,
        }
    }

    pub fn current(&self) -> NodeId {
        *self.path.last().expect("path starts at the source")
    }

    pub fn visited(&self, node: NodeId) -> bool {
        self.path.contains(&node)
    }

    fn reset(&mut self) {
        self.path.truncate(1);
        self.edges.clear();
        self.held.clear();
        self.age = 0;
    }
}

/// What a controller wants one agent to do this step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    /// Cross the fiber at this action slot and reserve one link on it. The
    /// slot must be allowed by [`Simulator::action_mask`].
    Move(usize),
    /// Cross the fiber at this slot following an externally computed plan.
    /// A link is reserved only if one is free; the move itself only has to
    /// respect the loop rule. With `distill`, one distillation round is first
    /// run on the two best free links of the fiber.
    Follow { slot: usize, distill: bool },
    /// Stay in place this step.
    Wait,
    /// Abandon the request (dead end); counted as a TTL failure.
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Move,
    Success,
    NoLink,
    BelowThreshold,
    SwapFailed,
    Ttl,
}

impl EventKind {
    pub fn is_terminal(self) -> bool {
        self != EventKind::Move
    }

    /// Terminal failures where a full path was planned.
    pub fn path_found(self) -> bool {
        matches!(
            self,
            EventKind::Success | EventKind::NoLink | EventKind::BelowThreshold | EventKind::SwapFailed
        )
    }
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub step: u64,
    pub agent: usize,
    pub event: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge: Option<EdgeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureCounts {
    pub no_link: u64,
    pub swap_failed: u64,
    pub below_threshold: u64,
    pub ttl: u64,
}

impl FailureCounts {
    fn record(&mut self, kind: EventKind) {
        match kind {
            EventKind::NoLink => self.no_link += 1,
            EventKind::SwapFailed => self.swap_failed += 1,
            EventKind::BelowThreshold => self.below_threshold += 1,
            EventKind::Ttl => self.ttl += 1,
            EventKind::Move | EventKind::Success => {}
        }
    }

    pub fn total(&self) -> u64 {
        self.no_link + self.swap_failed + self.below_threshold + self.ttl
    }

    pub fn add(&mut self, other: &FailureCounts) {
        self.no_link += other.no_link;
        self.swap_failed += other.swap_failed;
        self.below_threshold += other.below_threshold;
        self.ttl += other.ttl;
    }

    /// Compact `cause:count` list used in the metrics CSV.
    pub fn encode(&self) -> String {
        format!(
            "no_link:{};swap_failed:{};below_threshold:{};ttl:{}",
            self.no_link, self.swap_failed, self.below_threshold, self.ttl
        )
    }
}

/// Per-episode results.
#[derive(Debug, Clone, Default, Serialize)]
pub struct EpisodeMetrics {
    pub seed: u64,
    pub edr: u64,
    pub e2e_fidelities: Vec<f64>,
    pub failures: FailureCounts,
    /// Monitoring messages sent over all fibers.
    pub messages: u64,
    pub steps: u64,
    /// Wall-clock seconds spent inside `step`. Not deterministic.
    pub wall_seconds: f64,
    pub rows: Vec<MetricsRow>,
}

impl EpisodeMetrics {
    pub fn mean_fidelity(&self) -> f64 {
        if self.e2e_fidelities.is_empty() {
            0.0
        } else {
            self.e2e_fidelities.iter().sum::<f64>() / self.e2e_fidelities.len() as f64
        }
    }

    /// Per-step metrics as CSV with header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,step,edr,mean_fidelity,failures_by_cause\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.seed,
                r.step,
                r.edr,
                r.mean_fidelity,
                r.failures.encode()
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub step: u64,
    pub edr: u64,
    pub mean_fidelity: f64,
    pub failures: FailureCounts,
}

/// Result of executing the swaps along a finished path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SwapOutcome {
    Success(f64),
    NoLink { edge: EdgeId },
    BelowThreshold { edge: EdgeId, fidelity: f64 },
    SwapFailed { edge: EdgeId },
}

/// Per-edge link generation accounting for one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GenerationRecord {
    pub attempts: u64,
    /// Heralded successes before truncation to free slots.
    pub successes: u64,
    pub created: u32,
}

/// Decision maker for all agents. Implemented by the learned policy and by
/// every baseline planner.
pub trait Controller {
    /// Monitoring phase; runs once per step after link dynamics and before
    /// any agent acts. Returns the number of classical messages sent.
    fn observe(&mut self, sim: &Simulator) -> Result<u64> {
        let _ = sim;
        Ok(0)
    }

    /// Chooses the next action of agent `agent`.
    fn decide(&mut self, sim: &Simulator, agent: usize) -> Result<Decision>;

    /// Called after every applied decision and terminal event.
    fn on_event(&mut self, sim: &Simulator, event: &Event) {
        let _ = (sim, event);
    }
}

/// Replays a fixed list of decisions per agent; `Wait` once exhausted.
#[derive(Debug, Clone, Default)]
pub struct ScriptedController {
    pub scripts: Vec<std::collections::VecDeque<Decision>>,
}

impl ScriptedController {
    pub fn new(scripts: Vec<Vec<Decision>>) -> Self {
        Self {
            scripts: scripts.into_iter().map(Into::into).collect(),
        }
    }
}

impl Controller for ScriptedController {
    fn decide(&mut self, _sim: &Simulator, agent: usize) -> Result<Decision> {
        Ok(self
            .scripts
            .get_mut(agent)
            .and_then(|s| s.pop_front())
            .unwrap_or(Decision::Wait))
    }
}

#[derive(Debug, Clone)]
struct EdgeModel {
    success_prob: f64,
    attempts_per_slot: u64,
    /// Decay time constant in seconds (T2 for stretched, tau for
    /// exponential).
    time_constant: f64,
}

/// The mutable state of one episode.
#[derive(Debug, Clone)]
pub struct Simulator {
    topo: Arc<PhysicalTopology>,
    cfg: SimConfig,
    seed: u64,
    rng: ChaCha8Rng,
    now: u64,
    slots: Vec<u32>,
    model: Vec<EdgeModel>,
    links: Vec<Vec<ElementaryLink>>,
    reserved: Vec<u32>,
    generation_enabled: Vec<bool>,
    agents: Vec<RoutingAgent>,
    last_generation: Vec<GenerationRecord>,
    metrics: EpisodeMetrics,
    events: Vec<Event>,
    record_events: bool,
}

impl Simulator {
    /// Creates an episode with one agent per `(source, dest)` pair.
    pub fn new(
        topo: impl Into<Arc<PhysicalTopology>>,
        cfg: SimConfig,
        pairs: &[(NodeId, NodeId)],
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let topo: Arc<PhysicalTopology> = topo.into();
        let n = topo.node_count();
        for &(s, d) in pairs {
            if s >= n || d >= n || s == d {
                return Err(SimError::Config(format!("invalid pair ({s}, {d})")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slots = qubit_buckets(&topo).edge_slots(&topo);
        let mut model = Vec::with_capacity(topo.edge_count());
        for e in topo.edges() {
            let pulses = topo.node(e.u).pulses.min(topo.node(e.v).pulses);
            let t2 = qcalc::t2_from_pulses(pulses, cfg.t2_exponent, cfg.t2_base)?;
            let time_constant = match cfg.decay {
                DecayModel::Exponential => t2 * rng.random_range(0.5..=1.5),
                _ => t2,
            };
            model.push(EdgeModel {
                success_prob: link_success_prob(cfg.alpha, e.length_km),
                attempts_per_slot: attempts_per_step(e.length_km, &cfg, 1),
                time_constant,
            });
        }
        let m = topo.edge_count();
        Ok(Self {
            agents: pairs
                .iter()
                .enumerate()
                .map(|(i, &(s, d))| RoutingAgent::new(i, s, d))
                .collect(),
            topo,
            seed,
            rng,
            now: 0,
            slots,
            model,
            links: vec![Vec::new(); m],
            reserved: vec![0; m],
            generation_enabled: vec![true; m],
            last_generation: vec![GenerationRecord::default(); m],
            metrics: EpisodeMetrics {
                seed,
                ..Default::default()
            },
            events: Vec::new(),
            record_events: true,
            cfg,
        })
    }

    pub fn topology(&self) -> &PhysicalTopology {
        &self.topo
    }

    pub fn shared_topology(&self) -> Arc<PhysicalTopology> {
        Arc::clone(&self.topo)
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Index of the next step to run.
    pub fn now(&self) -> u64 {
        self.now
    }

    /// True while in the link-only warm-up phase.
    pub fn in_warmup(&self) -> bool {
        self.now < self.cfg.warmup_steps as u64
    }

    pub fn agents(&self) -> &[RoutingAgent] {
        &self.agents
    }

    pub fn agent(&self, i: usize) -> &RoutingAgent {
        &self.agents[i]
    }

    pub fn links(&self, edge: EdgeId) -> &[ElementaryLink] {
        &self.links[edge]
    }

    pub fn link_count(&self, edge: EdgeId) -> u32 {
        self.links[edge].len() as u32
    }

    pub fn reserved(&self, edge: EdgeId) -> u32 {
        self.reserved[edge]
    }

    /// Links on the edge not claimed by any agent.
    pub fn unreserved(&self, edge: EdgeId) -> u32 {
        self.link_count(edge).saturating_sub(self.reserved[edge])
    }

    pub fn max_fidelity(&self, edge: EdgeId) -> f64 {
        self.links[edge]
            .iter()
            .map(|l| l.fidelity)
            .fold(0.0, f64::max)
    }

    /// Link slots per edge after Phase-1 bucketing.
    pub fn slots(&self, edge: EdgeId) -> u32 {
        self.slots[edge]
    }

    pub fn last_generation(&self) -> &[GenerationRecord] {
        &self.last_generation
    }

    pub fn metrics(&self) -> &EpisodeMetrics {
        &self.metrics
    }

    pub fn into_metrics(self) -> EpisodeMetrics {
        self.metrics
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Disables event recording (long training runs).
    pub fn set_record_events(&mut self, on: bool) {
        self.record_events = on;
    }

    /// Event log as JSON lines.
    pub fn events_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serialises"));
            out.push('\n');
        }
        out
    }

    /// Test and scenario hook: stops or resumes link generation on an edge.
    pub fn set_generation_enabled(&mut self, edge: EdgeId, on: bool) {
        self.generation_enabled[edge] = on;
    }

    /// Test and scenario hook: drops every link on an edge.
    pub fn clear_links(&mut self, edge: EdgeId) {
        self.links[edge].clear();
        self.reconcile_reservations(edge);
    }

    /// Test and scenario hook: stores a link with the given fidelity, if a
    /// slot is free.
    pub fn insert_link(&mut self, edge: EdgeId, fidelity: f64) -> bool {
        if self.links[edge].len() as u32 >= self.slots[edge] {
            return false;
        }
        self.links[edge].push(ElementaryLink {
            created_at: self.now,
            initial_fidelity: fidelity,
            fidelity,
        });
        true
    }

    /// Allowed action slots for an agent, one entry per port of its current
    /// node: unvisited neighbour and at least one unreserved link.
    pub fn action_mask(&self, agent: usize) -> Vec<bool> {
        let a = &self.agents[agent];
        self.topo
            .ports(a.current())
            .iter()
            .map(|p| !a.visited(p.neighbor) && self.unreserved(p.edge) > 0)
            .collect()
    }

    /// Runs one step with the given controller.
    pub fn step(&mut self, controller: &mut dyn Controller) -> Result<()> {
        let started = Instant::now();
        self.generate_links();
        self.decay_and_prune();
        if self.cfg.distill_enabled {
            self.maybe_distill();
        }
        self.metrics.messages += controller.observe(self)?;
        if !self.in_warmup() {
            for i in 0..self.agents.len() {
                let decision = controller.decide(self, i)?;
                self.apply(i, decision, controller)?;
            }
        }
        self.finish_step(started);
        Ok(())
    }

    /// Runs `n` steps.
    pub fn run(&mut self, controller: &mut dyn Controller, n: u64) -> Result<()> {
        for _ in 0..n {
            self.step(controller)?;
        }
        Ok(())
    }

    fn finish_step(&mut self, started: Instant) {
        self.metrics.steps += 1;
        self.metrics.wall_seconds += started.elapsed().as_secs_f64();
        self.metrics.rows.push(MetricsRow {
            seed: self.seed,
            step: self.now,
            edr: self.metrics.edr,
            mean_fidelity: self.metrics.mean_fidelity(),
            failures: self.metrics.failures,
        });
        self.now += 1;
    }

    /// Phase 1 and ongoing: heralded generation on every edge with free
    /// slots.
    pub fn generate_links(&mut self) {
        for e in 0..self.links.len() {
            let free = self.slots[e].saturating_sub(self.links[e].len() as u32);
            let mut record = GenerationRecord::default();
            if self.generation_enabled[e] && free > 0 {
                let m = &self.model[e];
                let attempts = m.attempts_per_slot * free as u64;
                let successes = if attempts == 0 || m.success_prob <= 0.0 {
                    0
                } else if m.success_prob >= 1.0 {
                    attempts
                } else {
                    Binomial::new(attempts, m.success_prob)
                        .expect("valid binomial")
                        .sample(&mut self.rng)
                };
                let created = successes.min(free as u64) as u32;
                for _ in 0..created {
                    self.links[e].push(ElementaryLink {
                        created_at: self.now,
                        initial_fidelity: self.cfg.initial_fidelity,
                        fidelity: self.cfg.initial_fidelity,
                    });
                }
                record = GenerationRecord {
                    attempts,
                    successes,
                    created,
                };
            }
            self.last_generation[e] = record;
        }
    }

    fn decayed(&self, edge: EdgeId, link: &ElementaryLink) -> f64 {
        let age = (self.now - link.created_at) as f64 * self.cfg.step_duration;
        let tc = self.model[edge].time_constant;
        match self.cfg.decay {
            DecayModel::None => link.initial_fidelity,
            DecayModel::Stretched => {
                stretched_decay(link.initial_fidelity, BASELINE_FIDELITY, age / tc, self.cfg.stretch)
            }
            DecayModel::Exponential => {
                stretched_decay(link.initial_fidelity, BASELINE_FIDELITY, age / tc, 1.0)
            }
        }
    }

    /// Re-evaluates every link's fidelity at the current time and removes
    /// links that have decayed to the baseline.
    pub fn decay_and_prune(&mut self) {
        let floor = BASELINE_FIDELITY + self.cfg.prune_margin;
        for e in 0..self.links.len() {
            let mut links = std::mem::take(&mut self.links[e]);
            for l in &mut links {
                l.fidelity = self.decayed(e, l);
            }
            let before = links.len();
            links.retain(|l| l.fidelity > floor);
            self.links[e] = links;
            if self.links[e].len() < before {
                self.reconcile_reservations(e);
            }
        }
    }

    /// Pairs up the weakest unreserved links on each edge until the rest
    /// reach the distillation target.
    pub fn maybe_distill(&mut self) {
        for e in 0..self.links.len() {
            loop {
                let links = &mut self.links[e];
                let free = links.len().saturating_sub(self.reserved[e] as usize);
                if free < 2 {
                    break;
                }
                links.sort_by(|a, b| a.fidelity.total_cmp(&b.fidelity));
                if links[0].fidelity >= self.cfg.distill_target {
                    break;
                }
                let a = links.remove(0);
                let b = links.remove(0);
                let (f_out, p) = distill_pair(a.fidelity, b.fidelity).expect("pruned links are distillable");
                if self.rng.random::<f64>() < p {
                    links.push(ElementaryLink {
                        created_at: self.now,
                        initial_fidelity: f_out,
                        fidelity: f_out,
                    });
                }
            }
        }
    }

    /// One distillation round on the two best free links of an edge.
    /// Returns whether a round was attempted.
    pub fn distill_on_edge(&mut self, edge: EdgeId) -> bool {
        if self.unreserved(edge) < 2 {
            return false;
        }
        let links = &mut self.links[edge];
        links.sort_by(|a, b| b.fidelity.total_cmp(&a.fidelity));
        let a = links.remove(0);
        let b = links.remove(0);
        let (f_out, p) = distill_pair(a.fidelity, b.fidelity).expect("pruned links are distillable");
        if self.rng.random::<f64>() < p {
            links.push(ElementaryLink {
                created_at: self.now,
                initial_fidelity: f_out,
                fidelity: f_out,
            });
        }
        true
    }

    /// Clamps an edge's reservations to its link count, releasing claims of
    /// the highest-indexed agents first.
    fn reconcile_reservations(&mut self, edge: EdgeId) {
        let count = self.links[edge].len() as u32;
        let mut i = self.agents.len();
        while self.reserved[edge] > count && i > 0 {
            i -= 1;
            let a = &mut self.agents[i];
            if let Some(pos) = a.edges.iter().position(|&x| x == edge) {
                if a.held[pos] {
                    a.held[pos] = false;
                    self.reserved[edge] -= 1;
                }
            }
        }
    }

    fn release(&mut self, agent: usize) {
        let a = &mut self.agents[agent];
        for (k, &e) in a.edges.iter().enumerate() {
            if a.held[k] {
                self.reserved[e] -= 1;
            }
        }
        a.reset();
    }

    fn log(&mut self, controller: &mut dyn Controller, event: Event) {
        if event.event.is_terminal() {
            self.metrics.failures.record(event.event);
        }
        controller.on_event(self, &event);
        if self.record_events {
            self.events.push(event);
        }
    }

    /// Applies one decision for one agent.
    pub fn apply(&mut self, agent: usize, decision: Decision, controller: &mut dyn Controller) -> Result<()> {
        let step = self.now;
        let slot = match decision {
            Decision::Wait => return Ok(()),
            Decision::Drop => {
                self.release(agent);
                self.log(
                    controller,
                    Event {
                        step,
                        agent,
                        event: EventKind::Ttl,
                        edge: None,
                        fidelity: None,
                    },
                );
                return Ok(());
            }
            Decision::Move(s) | Decision::Follow { slot: s, .. } => s,
        };
        let a = &self.agents[agent];
        let port = *self.topo.ports(a.current()).get(slot).ok_or_else(|| {
            SimError::Contract(format!(
                "agent {agent}: slot {slot} out of range at node {}",
                a.current()
            ))
        })?;
        if a.visited(port.neighbor) {
            return Err(SimError::Contract(format!(
                "agent {agent}: move to visited node {}",
                port.neighbor
            )));
        }
        if let Decision::Follow { distill: true, .. } = decision {
            self.distill_on_edge(port.edge);
        }
        let free = self.unreserved(port.edge) > 0;
        if matches!(decision, Decision::Move(_)) && !free {
            return Err(SimError::Contract(format!(
                "agent {agent}: masked slot {slot}, edge {} has no unreserved link",
                port.edge
            )));
        }
        if free {
            self.reserved[port.edge] += 1;
        }
        let a = &mut self.agents[agent];
        a.path.push(port.neighbor);
        a.edges.push(port.edge);
        a.held.push(free);
        a.age += 1;
        let (arrived, expired) = (port.neighbor == a.dest, a.age >= self.cfg.ttl);
        self.log(
            controller,
            Event {
                step,
                agent,
                event: EventKind::Move,
                edge: Some(port.edge),
                fidelity: None,
            },
        );
        if arrived {
            let outcome = self.execute_swap_chain(agent)?;
            let (event, edge, fidelity) = match outcome {
                SwapOutcome::Success(f) => (EventKind::Success, None, Some(f)),
                SwapOutcome::NoLink { edge } => (EventKind::NoLink, Some(edge), None),
                SwapOutcome::BelowThreshold { edge, fidelity } => {
                    (EventKind::BelowThreshold, Some(edge), Some(fidelity))
                }
                SwapOutcome::SwapFailed { edge } => (EventKind::SwapFailed, Some(edge), None),
            };
            self.log(
                controller,
                Event {
                    step,
                    agent,
                    event,
                    edge,
                    fidelity,
                },
            );
        } else if expired {
            self.release(agent);
            self.log(
                controller,
                Event {
                    step,
                    agent,
                    event: EventKind::Ttl,
                    edge: None,
                    fidelity: None,
                },
            );
        }
        Ok(())
    }

    /// Consumes the best link on each path edge in order and folds the
    /// fidelity through the intermediate repeaters. The agent is reset
    /// afterwards whatever the outcome.
    pub fn execute_swap_chain(&mut self, agent: usize) -> Result<SwapOutcome> {
        let a = &self.agents[agent];
        if a.current() != a.dest {
            return Err(SimError::Contract(format!(
                "agent {agent} at {} has not reached {}",
                a.current(),
                a.dest
            )));
        }
        let path = a.path.clone();
        let edges = a.edges.clone();
        // Reservations are released first so the consumed links below are
        // accounted against the free pool.
        self.release(agent);

        let mut running = None;
        let mut outcome = None;
        for (k, &e) in edges.iter().enumerate() {
            let Some(best) = self.take_best_link(e) else {
                outcome = Some(SwapOutcome::NoLink { edge: e });
                break;
            };
            let f = match running {
                None => best,
                Some(acc) => {
                    if self.cfg.swap_success_prob < 1.0 && self.rng.random::<f64>() >= self.cfg.swap_success_prob {
                        outcome = Some(SwapOutcome::SwapFailed { edge: e });
                        break;
                    }
                    swap_unchecked(acc, best, self.topo.node(path[k]).f_gate)
                }
            };
            if f <= self.cfg.f_threshold {
                outcome = Some(SwapOutcome::BelowThreshold { edge: e, fidelity: f });
                break;
            }
            running = Some(f);
        }
        let outcome = outcome.unwrap_or_else(|| SwapOutcome::Success(running.expect("non-empty path")));
        if let SwapOutcome::Success(f) = outcome {
            self.metrics.edr += 1;
            self.metrics.e2e_fidelities.push(f);
        }
        Ok(outcome)
    }

    fn take_best_link(&mut self, edge: EdgeId) -> Option<f64> {
        let links = &mut self.links[edge];
        let best = (0..links.len()).max_by(|&a, &b| links[a].fidelity.total_cmp(&links[b].fidelity).then(b.cmp(&a)))?;
        let link = links.swap_remove(best);
        self.reconcile_reservations(edge);
        Some(link.fidelity)
    }

    /// Checks every resource-safety invariant; returns a description of the
    /// first violation.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let mut held = vec![0u32; self.links.len()];
        for (i, a) in self.agents.iter().enumerate() {
            if a.path.first() != Some(&a.source) {
                return Err(format!("agent {i} path does not start at its source"));
            }
            let mut seen = std::collections::HashSet::new();
            if !a.path.iter().all(|v| seen.insert(*v)) {
                return Err(format!("agent {i} path is not simple"));
            }
            if a.age > self.cfg.ttl {
                return Err(format!("agent {i} age {} > ttl", a.age));
            }
            for (k, &e) in a.edges.iter().enumerate() {
                if a.held[k] {
                    held[e] += 1;
                }
            }
        }
        for e in 0..self.links.len() {
            if held[e] != self.reserved[e] {
                return Err(format!("edge {e}: reserved {} but agents hold {}", self.reserved[e], held[e]));
            }
            if self.reserved[e] > self.link_count(e) {
                return Err(format!("edge {e}: reserved {} > links {}", self.reserved[e], self.link_count(e)));
            }
            if self.link_count(e) > self.slots[e] {
                return Err(format!("edge {e}: {} links > {} slots", self.link_count(e), self.slots[e]));
            }
            if let Some(l) = self.links[e].iter().find(|l| l.fidelity <= BASELINE_FIDELITY) {
                return Err(format!("edge {e}: stored link at fidelity {}", l.fidelity));
            }
        }
        for v in 0..self.topo.node_count() {
            let used: u32 = self.topo.ports(v).iter().map(|p| self.link_count(p.edge)).sum();
            if used > self.topo.node(v).qubit_capacity {
                return Err(format!("node {v}: {used} qubits in use > capacity"));
            }
        }
        if let Some(f) = self.metrics.e2e_fidelities.iter().find(|&&f| f <= self.cfg.f_threshold) {
            return Err(format!("recorded end-to-end fidelity {f} <= threshold"));
        }
        if self.metrics.edr != self.metrics.e2e_fidelities.len() as u64 {
            return Err("edr differs from number of recorded fidelities".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topo::{assign_capacities, FiberEdge, RepeaterProfile};

    fn chain(n: usize, len: f64) -> PhysicalTopology {
        let nodes = vec![RepeaterProfile::default(); n];
        let edges = (0..n - 1)
            .map(|i| FiberEdge {
                u: i,
                v: i + 1,
                length_km: len,
                capacity: 1,
            })
            .collect();
        let t = PhysicalTopology::new(
            nodes
                .into_iter()
                .map(|p| RepeaterProfile {
                    qubit_capacity: 4,
                    ..p
                })
                .collect(),
            edges,
            None,
        )
        .unwrap();
        assign_capacities(&t, 2).unwrap()
    }

    #[test]
    fn success_probability_examples() {
        assert!((link_success_prob(0.2, 0.0) - 1.0).abs() < 1e-15);
        assert!((link_success_prob(0.2, 50.0) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((link_success_prob(0.15, 100.0) - (-1.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn attempts_examples() {
        let cfg = SimConfig::default();
        assert_eq!(attempts_per_step(50.0, &cfg, 1), 20);
        assert_eq!(attempts_per_step(50.0, &cfg, 3), 60);
        assert_eq!(attempts_per_step(50.0, &cfg, 0), 0);
        // 1 m of fiber allows 1e6 round trips in 10 ms; the 1 MHz cap allows
        // 1e4.
        assert_eq!(attempts_per_step(0.001, &cfg, 1), 10_000);
    }

    #[test]
    fn generation_truncates_to_free_slots() {
        let cfg = SimConfig {
            alpha: 0.0,
            ..Default::default()
        };
        let mut sim = Simulator::new(chain(2, 10.0), cfg, &[], 1).unwrap();
        sim.generate_links();
        assert_eq!(sim.link_count(0), sim.slots(0));
        let rec = sim.last_generation()[0];
        assert!(rec.successes >= rec.created as u64);
    }

    #[test]
    fn fresh_link_keeps_initial_fidelity() {
        let mut sim = Simulator::new(chain(2, 10.0), SimConfig::default(), &[], 1).unwrap();
        sim.generate_links();
        sim.decay_and_prune();
        for l in sim.links(0) {
            assert_eq!(l.fidelity, 0.95);
        }
    }

    #[test]
    fn masked_move_is_rejected() {
        let cfg = SimConfig {
            warmup_steps: 0,
            ..Default::default()
        };
        let mut sim = Simulator::new(chain(3, 10.0), cfg, &[(0, 2)], 1).unwrap();
        let mut c = ScriptedController::default();
        assert!(matches!(sim.apply(0, Decision::Move(0), &mut c), Err(SimError::Contract(_))));
        assert!(matches!(sim.apply(0, Decision::Move(3), &mut c), Err(SimError::Contract(_))));
    }

    #[test]
    fn swap_chain_before_destination_is_rejected() {
        let mut sim = Simulator::new(chain(3, 10.0), SimConfig::default(), &[(0, 2)], 1).unwrap();
        assert!(sim.execute_swap_chain(0).is_err());
    }

    #[test]
    fn failure_encoding() {
        let f = FailureCounts {
            no_link: 1,
            swap_failed: 0,
            below_threshold: 2,
            ttl: 3,
        };
        assert_eq!(f.encode(), "no_link:1;swap_failed:0;below_threshold:2;ttl:3");
        assert_eq!(f.total(), 6);
    }
}
