//! Baseline planners: four local forwarding heuristics (GER, MGER, LBER,
//! NoNLBER) and two centrally planned global routers (Q-PATH, Q-LEAP) that
//! see the network through a coordinator with distance-dependent staleness.

use std::collections::{BinaryHeap, VecDeque};
use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qcalc::{distill_pair, swap_unchecked};
use crate::sim::{Controller, Decision, Result, Simulator};
use crate::topo::{EdgeId, NodeId, PhysicalTopology};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown planner {0:?}")]
pub struct UnknownPlanner(pub String);

/// Every routing strategy the experiment runner can drive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlannerKind {
    Learned,
    Ger,
    Mger,
    Lber,
    Nonlber,
    Qpath,
    Qleap,
    Random,
}

impl PlannerKind {
    pub const ALL: [PlannerKind; 8] = [
        PlannerKind::Learned,
        PlannerKind::Ger,
        PlannerKind::Mger,
        PlannerKind::Lber,
        PlannerKind::Nonlber,
        PlannerKind::Qpath,
        PlannerKind::Qleap,
        PlannerKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PlannerKind::Learned => "learned",
            PlannerKind::Ger => "ger",
            PlannerKind::Mger => "mger",
            PlannerKind::Lber => "lber",
            PlannerKind::Nonlber => "nonlber",
            PlannerKind::Qpath => "qpath",
            PlannerKind::Qleap => "qleap",
            PlannerKind::Random => "random",
        }
    }

    pub fn is_global(self) -> bool {
        matches!(self, PlannerKind::Qpath | PlannerKind::Qleap)
    }
}

impl fmt::Display for PlannerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PlannerKind {
    type Err = UnknownPlanner;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|k| k.name() == lower)
            .ok_or_else(|| UnknownPlanner(s.to_string()))
    }
}

/// Local forwarding rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalRule {
    /// Greedy: fewest remaining hops.
    Ger,
    /// Greedy, ties broken by the number of available links.
    Mger,
    /// Best one-hop link fidelity among distance-non-increasing neighbours.
    Lber,
    /// LBER with a one-step-stale look at the neighbour's own links.
    Nonlber,
}

/// Controller running one [`LocalRule`] for every agent.
#[derive(Debug, Clone)]
pub struct LocalController {
    rule: LocalRule,
    dist: Vec<Vec<usize>>,
    /// Per-edge `(unreserved, best fidelity)` as of the previous step.
    stale: Vec<(u32, f64)>,
    fresh: Vec<(u32, f64)>,
}

impl LocalController {
    pub fn new(rule: LocalRule, topo: &PhysicalTopology) -> Self {
        Self {
            rule,
            dist: topo.distance_matrix(),
            stale: vec![(0, 0.0); topo.edge_count()],
            fresh: vec![(0, 0.0); topo.edge_count()],
        }
    }

    pub fn rule(&self) -> LocalRule {
        self.rule
    }

    /// Fidelity of the best two-hop continuation through `via`, using the
    /// previous step's view of `via`'s links. `None` when `via` offers no
    /// onward link.
    fn relay_score(&self, sim: &Simulator, agent: usize, via: NodeId, first_hop: f64) -> Option<f64> {
        let topo = sim.topology();
        let a = sim.agent(agent);
        topo.ports(via)
            .iter()
            .filter(|p| !a.visited(p.neighbor) && p.neighbor != via)
            .filter(|p| self.dist[p.neighbor][a.dest] <= self.dist[via][a.dest])
            .filter_map(|p| {
                let (count, f) = self.stale[p.edge];
                (count > 0).then(|| swap_unchecked(first_hop, f, topo.node(via).f_gate))
            })
            .max_by(|x, y| x.total_cmp(y))
    }
}

struct Candidate {
    slot: usize,
    neighbor: NodeId,
    dist: usize,
    count: u32,
    fidelity: f64,
}

impl Controller for LocalController {
    fn observe(&mut self, sim: &Simulator) -> Result<u64> {
        std::mem::swap(&mut self.stale, &mut self.fresh);
        for (e, slot) in self.fresh.iter_mut().enumerate() {
            *slot = (sim.unreserved(e), sim.max_fidelity(e));
        }
        if sim.now() == 0 {
            self.stale.clone_from(&self.fresh);
        }
        Ok(0)
    }

    fn decide(&mut self, sim: &Simulator, agent: usize) -> Result<Decision> {
        let a = sim.agent(agent);
        let here = a.current();
        let mask = sim.action_mask(agent);
        let mut cands: Vec<Candidate> = sim
            .topology()
            .ports(here)
            .iter()
            .enumerate()
            .filter(|(s, _)| mask[*s])
            .map(|(slot, p)| Candidate {
                slot,
                neighbor: p.neighbor,
                dist: self.dist[p.neighbor][a.dest],
                count: sim.unreserved(p.edge),
                fidelity: sim.max_fidelity(p.edge),
            })
            .collect();
        if matches!(self.rule, LocalRule::Lber | LocalRule::Nonlber) {
            let d_here = self.dist[here][a.dest];
            cands.retain(|c| c.dist <= d_here);
        }
        let best = match self.rule {
            LocalRule::Ger => cands.iter().min_by(|x, y| (x.dist, x.neighbor).cmp(&(y.dist, y.neighbor))),
            LocalRule::Mger => cands.iter().min_by(|x, y| {
                (x.dist, std::cmp::Reverse(x.count), x.neighbor).cmp(&(y.dist, std::cmp::Reverse(y.count), y.neighbor))
            }),
            LocalRule::Lber => cands.iter().min_by(|x, y| by_fidelity(x, y)),
            LocalRule::Nonlber => {
                let scored: Vec<(f64, &Candidate)> = cands
                    .iter()
                    .map(|c| {
                        let score = if c.neighbor == a.dest {
                            c.fidelity
                        } else {
                            self.relay_score(sim, agent, c.neighbor, c.fidelity).unwrap_or(-1.0)
                        };
                        (score, c)
                    })
                    .collect();
                scored
                    .iter()
                    .min_by(|(sx, x), (sy, y)| sy.total_cmp(sx).then_with(|| by_fidelity(x, y)))
                    .map(|(_, c)| *c)
            }
        };
        Ok(best.map_or(Decision::Drop, |c| Decision::Move(c.slot)))
    }
}

fn by_fidelity(x: &Candidate, y: &Candidate) -> Ordering {
    y.fidelity
        .total_cmp(&x.fidelity)
        .then(x.dist.cmp(&y.dist))
        .then(x.neighbor.cmp(&y.neighbor))
}

/// The coordinator's view of the network: each edge is seen as it was
/// `age(e)` steps ago, where `age(e)` is the hop distance from the
/// coordinator to the nearer endpoint.
#[derive(Debug, Clone)]
pub struct CentralMonitor {
    coordinator: NodeId,
    ages: Vec<usize>,
    /// Oldest first; each entry is one step's per-edge `(unreserved, best
    /// fidelity)`.
    history: VecDeque<Vec<(u32, f64)>>,
    depth: usize,
    coord_dist: Vec<usize>,
}

impl CentralMonitor {
    pub fn new(topo: &PhysicalTopology, coordinator: Option<NodeId>) -> Self {
        let coordinator = coordinator.unwrap_or_else(|| topo.center());
        let coord_dist = topo.hop_distances(coordinator);
        let ages: Vec<usize> = topo
            .edges()
            .iter()
            .map(|e| coord_dist[e.u].min(coord_dist[e.v]))
            .collect();
        let depth = ages.iter().copied().max().unwrap_or(0) + 1;
        Self {
            coordinator,
            ages,
            history: VecDeque::with_capacity(depth),
            depth,
            coord_dist,
        }
    }

    pub fn coordinator(&self) -> NodeId {
        self.coordinator
    }

    pub fn age(&self, edge: EdgeId) -> usize {
        self.ages[edge]
    }

    /// Steps for a plan to travel from the coordinator to `node`.
    pub fn dispatch_delay(&self, node: NodeId) -> usize {
        self.coord_dist[node]
    }

    /// Records the current step's state.
    pub fn collect(&mut self, sim: &Simulator) {
        if self.history.len() == self.depth {
            self.history.pop_front();
        }
        self.history
            .push_back((0..self.ages.len()).map(|e| (sim.unreserved(e), sim.max_fidelity(e))).collect());
    }

    /// `(unreserved count, best fidelity)` of an edge as known to the
    /// coordinator. Edges whose reports have not arrived yet read as empty.
    pub fn view(&self, edge: EdgeId) -> (u32, f64) {
        let age = self.ages[edge];
        let len = self.history.len();
        if age >= len {
            return (0, 0.0);
        }
        self.history[len - 1 - age][edge]
    }

    /// Messages per step: every node reports each incident edge one hop at
    /// a time towards the coordinator.
    pub fn messages_per_step(&self) -> u64 {
        self.ages.iter().map(|&a| a as u64 + 1).sum()
    }
}

/// Cost parameters and threshold of the global planners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlobalConfig {
    /// Weight of the inverse available-link count in Q-PATH's edge cost.
    pub alpha_cost: f64,
    /// Constant per-hop cost in Q-PATH.
    pub beta_cost: f64,
    /// Minimum end-to-end fidelity estimate a plan must reach.
    pub fidelity_threshold: f64,
    /// Maximum Pareto labels kept per node in Q-PATH's search.
    pub max_labels: usize,
    /// Coordinator override; the topology center when unset.
    pub coordinator: Option<NodeId>,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            alpha_cost: 0.5,
            beta_cost: 0.5,
            fidelity_threshold: 0.7,
            max_labels: 16,
            coordinator: None,
        }
    }
}

/// A route chosen by a global planner.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub path: Vec<NodeId>,
    /// One flag per hop: run a distillation round before reserving.
    pub distill: Vec<bool>,
    /// Multiplicative end-to-end fidelity estimate.
    pub estimate: f64,
}

/// Per-edge knowledge a global planner works from.
pub trait EdgeView {
    fn count(&self, edge: EdgeId) -> u32;
    fn fidelity(&self, edge: EdgeId) -> f64;
}

impl EdgeView for CentralMonitor {
    fn count(&self, edge: EdgeId) -> u32 {
        self.view(edge).0
    }
    fn fidelity(&self, edge: EdgeId) -> f64 {
        self.view(edge).1
    }
}

impl EdgeView for [(u32, f64)] {
    fn count(&self, edge: EdgeId) -> u32 {
        self[edge].0
    }
    fn fidelity(&self, edge: EdgeId) -> f64 {
        self[edge].1
    }
}

#[derive(Debug, Clone)]
struct Label {
    node: NodeId,
    cost: f64,
    log_fid: f64,
    path: Vec<NodeId>,
}

/// Q-PATH route search: minimum `sum(alpha / count + beta)` over edges with
/// at least one link, subject to the product of edge fidelities reaching the
/// threshold. Falls back to inserting distillation on the weakest edges of
/// the cheapest path.
pub fn plan_qpath(
    topo: &PhysicalTopology,
    view: &(impl EdgeView + ?Sized),
    source: NodeId,
    dest: NodeId,
    max_hops: usize,
    cfg: &GlobalConfig,
) -> Option<Plan> {
    let log_th = cfg.fidelity_threshold.ln();
    let cost_of = |e: EdgeId| cfg.alpha_cost / view.count(e) as f64 + cfg.beta_cost;
    let mut labels: Vec<Vec<Label>> = vec![Vec::new(); topo.node_count()];
    let mut queue: VecDeque<Label> = VecDeque::new();
    let start = Label {
        node: source,
        cost: 0.0,
        log_fid: 0.0,
        path: vec![source],
    };
    labels[source].push(start.clone());
    queue.push_back(start);
    let mut best_feasible: Option<Label> = None;
    let mut cheapest: Option<Label> = None;
    while let Some(l) = queue.pop_front() {
        if l.node == dest {
            if l.log_fid >= log_th - 1e-12 && better(&l, best_feasible.as_ref()) {
                best_feasible = Some(l.clone());
            }
            if better(&l, cheapest.as_ref()) {
                cheapest = Some(l);
            }
            continue;
        }
        if l.path.len() > max_hops {
            continue;
        }
        if !labels[l.node].iter().any(|k| k.path == l.path) {
            continue;
        }
        for p in topo.ports(l.node) {
            if view.count(p.edge) == 0 || l.path.contains(&p.neighbor) {
                continue;
            }
            let mut path = l.path.clone();
            path.push(p.neighbor);
            let next = Label {
                node: p.neighbor,
                cost: l.cost + cost_of(p.edge),
                log_fid: l.log_fid + view.fidelity(p.edge).max(f64::MIN_POSITIVE).ln(),
                path,
            };
            let bucket = &mut labels[p.neighbor];
            if bucket.iter().any(|k| dominates(k, &next)) {
                continue;
            }
            bucket.retain(|k| !dominates(&next, k));
            if bucket.len() >= cfg.max_labels {
                continue;
            }
            bucket.push(next.clone());
            queue.push_back(next);
        }
    }
    if let Some(l) = best_feasible {
        return Some(finish_plan(topo, view, l.path, cfg.fidelity_threshold, false));
    }
    let l = cheapest?;
    let plan = finish_plan(topo, view, l.path, cfg.fidelity_threshold, true);
    (plan.estimate >= cfg.fidelity_threshold - 1e-12).then_some(plan)
}

fn dominates(a: &Label, b: &Label) -> bool {
    a.cost <= b.cost && a.log_fid >= b.log_fid && (a.cost < b.cost || a.log_fid > b.log_fid || a.path <= b.path)
}

fn better(l: &Label, incumbent: Option<&Label>) -> bool {
    match incumbent {
        None => true,
        Some(b) => match l.cost.total_cmp(&b.cost) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => (l.path.len(), &l.path) < (b.path.len(), &b.path),
        },
    }
}

/// Builds a plan for `path`, optionally inserting distillation rounds on
/// the weakest edges with a spare link until the estimate reaches
/// `threshold`.
fn finish_plan(
    topo: &PhysicalTopology,
    view: &(impl EdgeView + ?Sized),
    path: Vec<NodeId>,
    threshold: f64,
    allow_distill: bool,
) -> Plan {
    let edges: Vec<EdgeId> = path
        .windows(2)
        .map(|w| topo.edge_between(w[0], w[1]).expect("path follows fibers"))
        .collect();
    let mut fids: Vec<f64> = edges.iter().map(|&e| view.fidelity(e)).collect();
    let mut distill = vec![false; edges.len()];
    let product = |f: &[f64]| f.iter().product::<f64>();
    while allow_distill && product(&fids) < threshold {
        let weakest = (0..edges.len())
            .filter(|&k| !distill[k] && view.count(edges[k]) >= 2)
            .min_by(|&x, &y| fids[x].total_cmp(&fids[y]).then(x.cmp(&y)));
        let Some(k) = weakest else { break };
        match distill_pair(fids[k], fids[k]) {
            Ok((f_out, _)) if f_out > fids[k] => {
                fids[k] = f_out;
                distill[k] = true;
            }
            _ => break,
        }
    }
    Plan {
        estimate: product(&fids),
        path,
        distill,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapKey {
    weight: f64,
    hops: usize,
    node: NodeId,
}

impl Eq for HeapKey {}

impl Ord for HeapKey {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .weight
            .total_cmp(&self.weight)
            .then(other.hops.cmp(&self.hops))
            .then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Q-LEAP route search: maximum product of edge fidelities (Dijkstra on
/// `-ln F`), ties by fewest hops, over edges with at least one link.
pub fn plan_qleap(
    topo: &PhysicalTopology,
    view: &(impl EdgeView + ?Sized),
    source: NodeId,
    dest: NodeId,
    max_hops: usize,
    cfg: &GlobalConfig,
) -> Option<Plan> {
    let n = topo.node_count();
    let mut best: Vec<(f64, usize)> = vec![(f64::INFINITY, usize::MAX); n];
    let mut prev: Vec<Option<NodeId>> = vec![None; n];
    let mut heap = BinaryHeap::new();
    best[source] = (0.0, 0);
    heap.push(HeapKey {
        weight: 0.0,
        hops: 0,
        node: source,
    });
    while let Some(k) = heap.pop() {
        if (k.weight, k.hops) != best[k.node] {
            continue;
        }
        if k.node == dest {
            break;
        }
        for p in topo.ports(k.node) {
            if view.count(p.edge) == 0 {
                continue;
            }
            let w = k.weight - view.fidelity(p.edge).max(f64::MIN_POSITIVE).ln();
            let cand = (w, k.hops + 1);
            let cur = best[p.neighbor];
            if cand.0 < cur.0 || (cand.0 == cur.0 && cand.1 < cur.1) {
                best[p.neighbor] = cand;
                prev[p.neighbor] = Some(k.node);
                heap.push(HeapKey {
                    weight: w,
                    hops: cand.1,
                    node: p.neighbor,
                });
            }
        }
    }
    if best[dest].0.is_infinite() || best[dest].1 > max_hops {
        return None;
    }
    let mut path = vec![dest];
    while let Some(p) = prev[*path.last().unwrap()] {
        path.push(p);
    }
    path.reverse();
    let plan = finish_plan(topo, view, path, cfg.fidelity_threshold, true);
    (plan.estimate >= cfg.fidelity_threshold - 1e-12).then_some(plan)
}

/// Which global search a [`CentralController`] runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlobalRule {
    Qpath,
    Qleap,
}

/// Central planning with pipelined dispatch. Every step the coordinator
/// plans each pair from its stale view; the plan reaches the source
/// `dispatch_delay(source)` steps later. An idle agent adopts the newest
/// plan that has arrived and then follows it hop by hop.
#[derive(Debug, Clone)]
pub struct CentralController {
    rule: GlobalRule,
    cfg: GlobalConfig,
    monitor: CentralMonitor,
    /// Per pair: plans in flight, `(arrival step, plan)`.
    inbox: Vec<VecDeque<(u64, Option<Plan>)>>,
    active: Vec<Option<(Plan, usize)>>,
    plans_made: u64,
}

impl CentralController {
    pub fn new(rule: GlobalRule, topo: &PhysicalTopology, pairs: usize, cfg: GlobalConfig) -> Self {
        Self {
            rule,
            monitor: CentralMonitor::new(topo, cfg.coordinator),
            cfg,
            inbox: vec![VecDeque::new(); pairs],
            active: vec![None; pairs],
            plans_made: 0,
        }
    }

    pub fn monitor(&self) -> &CentralMonitor {
        &self.monitor
    }

    /// Plan an agent is currently following, with the index of its next hop.
    pub fn active_plan(&self, agent: usize) -> Option<&(Plan, usize)> {
        self.active.get(agent).and_then(Option::as_ref)
    }

    pub fn plans_made(&self) -> u64 {
        self.plans_made
    }

    fn plan(&self, topo: &PhysicalTopology, source: NodeId, dest: NodeId, max_hops: usize) -> Option<Plan> {
        match self.rule {
            GlobalRule::Qpath => plan_qpath(topo, &self.monitor, source, dest, max_hops, &self.cfg),
            GlobalRule::Qleap => plan_qleap(topo, &self.monitor, source, dest, max_hops, &self.cfg),
        }
    }
}

impl Controller for CentralController {
    fn observe(&mut self, sim: &Simulator) -> Result<u64> {
        self.monitor.collect(sim);
        let topo = sim.topology();
        let now = sim.now();
        let max_hops = sim.config().ttl as usize;
        for (i, a) in sim.agents().iter().enumerate() {
            let plan = self.plan(topo, a.source, a.dest, max_hops);
            self.plans_made += 1;
            let arrival = now + self.monitor.dispatch_delay(a.source) as u64;
            self.inbox[i].push_back((arrival, plan));
        }
        Ok(self.monitor.messages_per_step() + sim.agents().len() as u64)
    }

    fn decide(&mut self, sim: &Simulator, agent: usize) -> Result<Decision> {
        let now = sim.now();
        let mut newest = None;
        while self.inbox[agent].front().is_some_and(|(t, _)| *t <= now) {
            newest = self.inbox[agent].pop_front().map(|(_, p)| p);
        }
        let a = sim.agent(agent);
        if a.path.len() == 1 {
            self.active[agent] = None;
            if let Some(Some(plan)) = newest {
                self.active[agent] = Some((plan, 0));
            }
        }
        let Some((plan, hop)) = self.active[agent].as_mut() else {
            return Ok(Decision::Wait);
        };
        let (from, to) = (plan.path[*hop], plan.path[*hop + 1]);
        if from != a.current() {
            self.active[agent] = None;
            return Ok(Decision::Drop);
        }
        let slot = sim.topology().slot_of(from, to).expect("plans follow fibers");
        let distill = plan.distill[*hop];
        *hop += 1;
        if *hop + 1 == plan.path.len() {
            self.active[agent] = None;
        }
        Ok(Decision::Follow { slot, distill })
    }
}

/// Builds a boxed controller for every planner kind except `Learned`, which
/// needs trained weights.
pub fn baseline_controller(
    kind: PlannerKind,
    topo: &PhysicalTopology,
    pairs: usize,
    global: GlobalConfig,
    seed: u64,
) -> Option<Box<dyn Controller + Send>> {
    let local = |rule| Some(Box::new(LocalController::new(rule, topo)) as Box<dyn Controller + Send>);
    let central = |rule| Some(Box::new(CentralController::new(rule, topo, pairs, global)) as Box<dyn Controller + Send>);
    match kind {
        PlannerKind::Learned => None,
        PlannerKind::Ger => local(LocalRule::Ger),
        PlannerKind::Mger => local(LocalRule::Mger),
        PlannerKind::Lber => local(LocalRule::Lber),
        PlannerKind::Nonlber => local(LocalRule::Nonlber),
        PlannerKind::Qpath => central(GlobalRule::Qpath),
        PlannerKind::Qleap => central(GlobalRule::Qleap),
        PlannerKind::Random => Some(Box::new(crate::train::RandomController::new(seed))),
    }
}
