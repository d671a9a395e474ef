//! The learned router: per-node observations, recurrent one-hop message
//! passing, action masking and Q-value action selection.
//!
//! Every (node, pair) keeps a hidden vector. Each step all nodes exchange
//! 32-float messages with their fiber neighbours once (the monitoring cycle)
//! and update their hidden vector from their own observation and the
//! messages of the previous cycle. An agent picks its next hop from a Q-net
//! evaluated on its own observation and the hidden vector of the node it
//! currently sits at.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, Gru, GruCache, Mlp, MlpCache, MlpSpec, NnError, ParamTensor, Parameterized};
use crate::sim::{self, Controller, Decision, SimError, Simulator};
use crate::topo::{NodeId, PhysicalTopology};

pub const MAX_DEGREE: usize = 5;
pub const HIDDEN: usize = 32;
pub const MESSAGE: usize = 32;
/// Bytes per message float on the wire.
pub const BYTES_PER_FLOAT: usize = 8;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("node {node} has degree {degree}, the model supports at most {max}")]
    DegreeTooLarge { node: NodeId, degree: usize, max: usize },
    #[error("empty action mask")]
    EmptyMask,
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

impl From<PolicyError> for SimError {
    fn from(e: PolicyError) -> Self {
        SimError::Controller(e.to_string())
    }
}

/// Architecture of the routing network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub max_degree: usize,
    pub hidden: usize,
    pub message: usize,
    pub update_hidden: usize,
    pub q_hidden: Vec<usize>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            max_degree: MAX_DEGREE,
            hidden: HIDDEN,
            message: MESSAGE,
            update_hidden: 64,
            q_hidden: vec![64, 64],
        }
    }
}

impl PolicyConfig {
    /// `is_target`, `f_gate`, then per slot: free links, best fidelity,
    /// neighbour is target.
    pub fn node_obs_len(&self) -> usize {
        2 + 3 * self.max_degree
    }

    /// Pair id, age, then per slot: neighbour gate fidelity, free links, best
    /// fidelity, visited, is source, is destination.
    pub fn agent_obs_len(&self) -> usize {
        2 + 6 * self.max_degree
    }

    pub fn update_input_len(&self) -> usize {
        self.node_obs_len() + self.max_degree * self.message
    }
}

/// All trainable weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub cfg: PolicyConfig,
    /// Node observation and neighbour messages to the recurrent input.
    pub update: Mlp,
    pub gru: Gru,
    /// Hidden state to outbound message.
    pub message: Mlp,
    /// Agent observation and hidden state to one value per action slot.
    pub q: Mlp,
}

impl PolicyNet {
    pub fn init(cfg: PolicyConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let update = Mlp::init(
            &MlpSpec::new(&[cfg.update_input_len(), cfg.update_hidden, cfg.hidden]),
            &mut rng,
        );
        let gru = Gru::init(cfg.hidden, cfg.hidden, &mut rng);
        let message = Mlp::init(&MlpSpec::new(&[cfg.hidden, cfg.message, cfg.message]), &mut rng);
        let mut widths = vec![cfg.agent_obs_len() + cfg.hidden];
        widths.extend(&cfg.q_hidden);
        widths.push(cfg.max_degree);
        let q = Mlp::init(&MlpSpec::new(&widths), &mut rng);
        Self {
            cfg,
            update,
            gru,
            message,
            q,
        }
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        Ok(nn::save_checkpoint(self, path)?)
    }

    /// Loads weights saved by [`PolicyNet::save`] into a network of
    /// architecture `cfg`.
    pub fn load(cfg: PolicyConfig, path: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut net = Self::init(cfg, 0);
        nn::load_checkpoint(&mut net, path)?;
        Ok(net)
    }

    /// Q-values from an agent observation and a hidden vector.
    pub fn q_values(&self, agent_obs: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        let mut x = Vec::with_capacity(agent_obs.len() + h.len());
        x.extend_from_slice(agent_obs);
        x.extend_from_slice(h);
        Ok(self.q.infer(&x)?)
    }
}

impl Parameterized for PolicyNet {
    fn params(&self) -> Vec<&ParamTensor> {
        let mut v = self.update.params();
        v.extend(self.gru.params());
        v.extend(self.message.params());
        v.extend(self.q.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v = self.update.params_mut();
        v.extend(self.gru.params_mut());
        v.extend(self.message.params_mut());
        v.extend(self.q.params_mut());
        v
    }
}

fn check_degrees(topo: &PhysicalTopology, max: usize) -> Result<()> {
    for v in 0..topo.node_count() {
        if topo.degree(v) > max {
            return Err(PolicyError::DegreeTooLarge {
                node: v,
                degree: topo.degree(v),
                max,
            });
        }
    }
    Ok(())
}

/// Observation of `node` on behalf of a request heading to `dest`.
pub fn build_node_observation(sim: &Simulator, node: NodeId, dest: NodeId, cfg: &PolicyConfig) -> Vec<f64> {
    let mut out = vec![0.0; cfg.node_obs_len()];
    write_node_observation(sim, node, dest, cfg.max_degree, &mut out);
    out
}

fn write_node_observation(sim: &Simulator, node: NodeId, dest: NodeId, max_degree: usize, out: &mut [f64]) {
    let topo = sim.topology();
    out.iter_mut().for_each(|x| *x = 0.0);
    out[0] = f64::from(u8::from(node == dest));
    out[1] = topo.node(node).f_gate;
    for (k, p) in topo.ports(node).iter().take(max_degree).enumerate() {
        let base = 2 + 3 * k;
        let slots = sim.slots(p.edge).max(1) as f64;
        out[base] = sim.unreserved(p.edge) as f64 / slots;
        out[base + 1] = sim.max_fidelity(p.edge);
        out[base + 2] = f64::from(u8::from(p.neighbor == dest));
    }
}

/// Observation of an agent at its current node.
pub fn build_agent_observation(sim: &Simulator, agent: usize, cfg: &PolicyConfig) -> Vec<f64> {
    let topo = sim.topology();
    let a = sim.agent(agent);
    let mut out = vec![0.0; cfg.agent_obs_len()];
    let pairs = sim.agents().len();
    out[0] = if pairs > 1 {
        a.pair as f64 / (pairs - 1) as f64
    } else {
        0.0
    };
    out[1] = a.age as f64 / sim.config().ttl as f64;
    for (k, p) in topo.ports(a.current()).iter().take(cfg.max_degree).enumerate() {
        let base = 2 + 6 * k;
        let slots = sim.slots(p.edge).max(1) as f64;
        out[base] = topo.node(p.neighbor).f_gate;
        out[base + 1] = sim.unreserved(p.edge) as f64 / slots;
        out[base + 2] = sim.max_fidelity(p.edge);
        out[base + 3] = f64::from(u8::from(a.visited(p.neighbor)));
        out[base + 4] = f64::from(u8::from(p.neighbor == a.source));
        out[base + 5] = f64::from(u8::from(p.neighbor == a.dest));
    }
    out
}

/// Simulator mask padded to `max_degree` slots.
pub fn build_action_mask(sim: &Simulator, agent: usize, max_degree: usize) -> Vec<bool> {
    let mut mask = sim.action_mask(agent);
    mask.resize(max_degree, false);
    mask
}

/// Epsilon-greedy over allowed slots; greedy ties go to the lowest index.
pub fn select_action<R: Rng + ?Sized>(q: &[f64], mask: &[bool], epsilon: f64, rng: &mut R) -> Result<usize> {
    let allowed: Vec<usize> = (0..q.len().min(mask.len())).filter(|&i| mask[i]).collect();
    if allowed.is_empty() {
        return Err(PolicyError::EmptyMask);
    }
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(allowed[rng.random_range(0..allowed.len())]);
    }
    let mut best = allowed[0];
    for &i in &allowed[1..] {
        if q[i] > q[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Hidden vectors and messages of every (pair, node), plus a short history
/// used to build training snapshots.
#[derive(Debug, Clone)]
pub struct MonitorState {
    nodes: usize,
    pairs: usize,
    hidden: usize,
    message: usize,
    obs_len: usize,
    h: Vec<f64>,
    msg: Vec<f64>,
    /// Hidden arrays of the last `depth + 1` cycles, newest last.
    h_hist: VecDeque<Vec<f64>>,
    /// Observation arrays of the last `depth` cycles, newest last.
    obs_hist: VecDeque<Vec<f64>>,
    /// `None` keeps no history at all.
    depth: Option<usize>,
    cycles: u64,
}

impl MonitorState {
    /// Zero state. `depth` is how many past cycles to remember for
    /// snapshots.
    pub fn new(cfg: &PolicyConfig, nodes: usize, pairs: usize, depth: Option<usize>) -> Self {
        let h = vec![0.0; nodes * pairs * cfg.hidden];
        let mut h_hist = VecDeque::new();
        if depth.is_some() {
            h_hist.push_back(h.clone());
        }
        Self {
            nodes,
            pairs,
            hidden: cfg.hidden,
            message: cfg.message,
            obs_len: cfg.node_obs_len(),
            msg: vec![0.0; nodes * pairs * cfg.message],
            h,
            h_hist,
            obs_hist: VecDeque::new(),
            depth,
            cycles: 0,
        }
    }

    fn idx(&self, pair: usize, node: NodeId) -> usize {
        pair * self.nodes + node
    }

    pub fn hidden(&self, pair: usize, node: NodeId) -> &[f64] {
        let i = self.idx(pair, node) * self.hidden;
        &self.h[i..i + self.hidden]
    }

    pub fn message(&self, pair: usize, node: NodeId) -> &[f64] {
        let i = self.idx(pair, node) * self.message;
        &self.msg[i..i + self.message]
    }

    pub fn cycles(&self) -> u64 {
        self.cycles
    }

    /// One synchronous monitoring cycle: all new states are computed from the
    /// previous cycle's messages. Returns the number of messages sent.
    pub fn cycle(&mut self, net: &PolicyNet, sim: &Simulator) -> Result<u64> {
        let topo = sim.topology();
        let cfg = &net.cfg;
        check_degrees(topo, cfg.max_degree)?;
        let mut new_h = vec![0.0; self.h.len()];
        let mut new_msg = vec![0.0; self.msg.len()];
        let mut obs_all = if self.depth.is_some() {
            vec![0.0; self.nodes * self.pairs * self.obs_len]
        } else {
            Vec::new()
        };
        if self.cycles == 0 {
            // Initial messages are those of the initial hidden states.
            for i in 0..self.nodes * self.pairs {
                let m = net.message.infer(&self.h[i * self.hidden..(i + 1) * self.hidden])?;
                self.msg[i * self.message..(i + 1) * self.message].copy_from_slice(&m);
            }
        }
        let mut input = vec![0.0; cfg.update_input_len()];
        for pair in 0..self.pairs {
            let dest = sim.agent(pair).dest;
            for v in 0..self.nodes {
                input.iter_mut().for_each(|x| *x = 0.0);
                write_node_observation(sim, v, dest, cfg.max_degree, &mut input[..self.obs_len]);
                for (k, p) in topo.ports(v).iter().enumerate() {
                    let start = self.obs_len + k * self.message;
                    input[start..start + self.message].copy_from_slice(self.message(pair, p.neighbor));
                }
                let i = self.idx(pair, v);
                if self.depth.is_some() {
                    obs_all[i * self.obs_len..(i + 1) * self.obs_len].copy_from_slice(&input[..self.obs_len]);
                }
                let cand = net.update.infer(&input)?;
                let h = net.gru.infer(self.hidden(pair, v), &cand)?;
                let m = net.message.infer(&h)?;
                new_h[i * self.hidden..(i + 1) * self.hidden].copy_from_slice(&h);
                new_msg[i * self.message..(i + 1) * self.message].copy_from_slice(&m);
            }
        }
        self.h = new_h;
        self.msg = new_msg;
        self.cycles += 1;
        if let Some(depth) = self.depth {
            self.h_hist.push_back(self.h.clone());
            if self.h_hist.len() > depth + 1 {
                self.h_hist.pop_front();
            }
            self.obs_hist.push_back(obs_all);
            if self.obs_hist.len() > depth {
                self.obs_hist.pop_front();
            }
        }
        Ok(2 * topo.edge_count() as u64 * self.pairs as u64)
    }

    /// Captures what is needed to recompute the hidden state of `(pair,
    /// node)` over the remembered cycles, with gradients.
    ///
    /// Panics if the state keeps no history.
    pub fn snapshot(&self, topo: &PhysicalTopology, pair: usize, node: NodeId, max_degree: usize) -> EgoSnapshot {
        let depth = self.depth.expect("snapshot requires history");
        let levels = self.obs_hist.len().min(depth);
        let dist = topo.hop_distances(node);
        let mut local: Vec<NodeId> = (0..topo.node_count()).filter(|&v| dist[v] <= levels).collect();
        local.sort_by_key(|&v| (dist[v], v));
        let pos = |v: NodeId| local.iter().position(|&x| x == v);
        let h_base = &self.h_hist[self.h_hist.len() - 1 - levels];
        let mut nodes = Vec::with_capacity(local.len());
        for &v in &local {
            let d = dist[v];
            let i = self.idx(pair, v);
            let neighbors = if d < levels {
                topo.ports(v).iter().take(max_degree).map(|p| pos(p.neighbor).map(|x| x as u16)).collect()
            } else {
                Vec::new()
            };
            let obs = if d < levels {
                self.obs_hist
                    .iter()
                    .skip(self.obs_hist.len() - levels)
                    .flat_map(|o| o[i * self.obs_len..(i + 1) * self.obs_len].iter().map(|&x| x as f32))
                    .collect()
            } else {
                Vec::new()
            };
            nodes.push(EgoNode {
                dist: d as u8,
                neighbors,
                obs,
                h0: h_base[i * self.hidden..(i + 1) * self.hidden].iter().map(|&x| x as f32).collect(),
            });
        }
        EgoSnapshot {
            levels: levels as u8,
            nodes,
        }
    }
}

/// One node of an [`EgoSnapshot`].
#[derive(Debug, Clone, PartialEq)]
pub struct EgoNode {
    pub dist: u8,
    /// Local indices of the neighbours in slot order (only for nodes that are
    /// recomputed).
    pub neighbors: Vec<Option<u16>>,
    /// Observations of the recomputed cycles, oldest first.
    pub obs: Vec<f32>,
    /// Hidden vector before the first recomputed cycle.
    pub h0: Vec<f32>,
}

/// The neighbourhood of an agent's node, enough to rerun the last `levels`
/// monitoring cycles for that node. Local node 0 is the centre.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoSnapshot {
    pub levels: u8,
    pub nodes: Vec<EgoNode>,
}

impl EgoSnapshot {
    pub fn floats(&self) -> usize {
        self.nodes.iter().map(|n| n.obs.len() + n.h0.len()).sum()
    }
}

/// Forward state of an unrolled recomputation, consumed by
/// [`PolicyNet::unroll_backward`].
pub struct UnrollCache {
    /// `msg[j][u]`: message forward of node `u` at level `j`.
    msg: Vec<Vec<Option<MlpCache>>>,
    /// `upd[j][v]`: update-net and GRU forward of node `v` at level `j`.
    upd: Vec<Vec<Option<(MlpCache, GruCache)>>>,
    q: MlpCache,
    neighbors: Vec<Vec<Option<usize>>>,
}

impl PolicyNet {
    /// Recomputes the centre node's hidden state from the snapshot and
    /// evaluates the Q-net on it.
    pub fn unroll_forward(&self, snap: &EgoSnapshot, agent_obs: &[f64]) -> Result<(Vec<f64>, UnrollCache)> {
        let cfg = &self.cfg;
        let n = snap.nodes.len();
        let levels = snap.levels as usize;
        let obs_len = cfg.node_obs_len();
        let mut h: Vec<Vec<f64>> = snap.nodes.iter().map(|x| x.h0.iter().map(|&v| v as f64).collect()).collect();
        let mut msg_caches = Vec::with_capacity(levels);
        let mut upd_caches = Vec::with_capacity(levels);
        for j in 0..levels {
            let radius = levels - 1 - j;
            let mut msgs: Vec<Option<(Vec<f64>, MlpCache)>> = vec![None; n];
            for node in &snap.nodes {
                if node.dist as usize > radius {
                    continue;
                }
                for u in node.neighbors.iter().flatten() {
                    let u = *u as usize;
                    if msgs[u].is_none() {
                        msgs[u] = Some(self.message.forward(&h[u])?);
                    }
                }
            }
            let mut upd = vec![None; n];
            let mut next = h.clone();
            for (v, node) in snap.nodes.iter().enumerate() {
                if node.dist as usize > radius {
                    continue;
                }
                let mut input = vec![0.0; cfg.update_input_len()];
                for (i, x) in node.obs[j * obs_len..(j + 1) * obs_len].iter().enumerate() {
                    input[i] = *x as f64;
                }
                for (k, u) in node.neighbors.iter().enumerate() {
                    if let Some(u) = u {
                        let m = &msgs[*u as usize].as_ref().expect("computed above").0;
                        input[obs_len + k * cfg.message..obs_len + (k + 1) * cfg.message].copy_from_slice(m);
                    }
                }
                let (cand, uc) = self.update.forward(&input)?;
                let (hn, gc) = self.gru.forward(&h[v], &cand)?;
                next[v] = hn;
                upd[v] = Some((uc, gc));
            }
            h = next;
            msg_caches.push(msgs.into_iter().map(|m| m.map(|(_, c)| c)).collect());
            upd_caches.push(upd);
        }
        let mut x = agent_obs.to_vec();
        x.extend_from_slice(&h[0]);
        let (q, qc) = self.q.forward(&x)?;
        Ok((
            q,
            UnrollCache {
                msg: msg_caches,
                upd: upd_caches,
                q: qc,
                neighbors: snap
                    .nodes
                    .iter()
                    .map(|x| x.neighbors.iter().map(|u| u.map(usize::from)).collect())
                    .collect(),
            },
        ))
    }

    /// Accumulates parameter gradients for `dq`.
    pub fn unroll_backward(&mut self, cache: &UnrollCache, dq: &[f64]) -> Result<()> {
        let cfg = self.cfg.clone();
        let obs_len = cfg.node_obs_len();
        let dx = self.q.backward(&cache.q, dq)?;
        let n_local = cache.neighbors.len();
        let mut dh = vec![vec![0.0; cfg.hidden]; n_local];
        dh[0].copy_from_slice(&dx[cfg.agent_obs_len()..]);
        for j in (0..cache.upd.len()).rev() {
            let mut prev = vec![vec![0.0; cfg.hidden]; n_local];
            let mut dmsg = vec![vec![0.0; cfg.message]; n_local];
            let mut dmsg_seen = vec![false; n_local];
            for (v, entry) in cache.upd[j].iter().enumerate() {
                let Some((uc, gc)) = entry else {
                    // Not recomputed at this level: its state passes through.
                    for (p, d) in prev[v].iter_mut().zip(&dh[v]) {
                        *p += d;
                    }
                    continue;
                };
                let (dh_prev, dcand) = self.gru.backward(gc, &dh[v])?;
                prev[v].iter_mut().zip(dh_prev).for_each(|(a, b)| *a += b);
                let dinput = self.update.backward(uc, &dcand)?;
                // Route message gradients to the senders.
                for (k, seg) in dinput[obs_len..].chunks(cfg.message).enumerate() {
                    if let Some(u) = cache.neighbors[v].get(k).copied().flatten() {
                        dmsg[u].iter_mut().zip(seg).for_each(|(a, b)| *a += b);
                        dmsg_seen[u] = true;
                    }
                }
            }
            for u in 0..n_local {
                if dmsg_seen[u] {
                    let c = cache.msg[j][u].as_ref().expect("message cached");
                    let d = self.message.backward(c, &dmsg[u])?;
                    prev[u].iter_mut().zip(d).for_each(|(a, b)| *a += b);
                }
            }
            dh = prev;
        }
        Ok(())
    }
}

/// Per-step operation counts of the learned controller.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OpCounters {
    /// (node, pair) state updates.
    pub node_updates: u64,
    /// Largest number of state updates done by a single node in one cycle.
    pub max_node_updates_per_cycle: u64,
    pub q_evaluations: u64,
}

/// What the learned controller saw and did for one decision.
#[derive(Debug, Clone)]
pub struct DecisionRecord {
    pub agent: usize,
    pub pair: usize,
    pub agent_obs: Vec<f64>,
    pub mask: Vec<bool>,
    pub action: usize,
    pub snapshot: Option<EgoSnapshot>,
}

/// Drives all agents with one shared network.
pub struct LearnedController {
    pub net: Arc<PolicyNet>,
    pub epsilon: f64,
    /// Monitoring cycles kept for snapshots; `None` disables recording.
    pub history_depth: Option<usize>,
    pub ops: OpCounters,
    state: Option<MonitorState>,
    rng: ChaCha8Rng,
    last: Option<DecisionRecord>,
}

impl LearnedController {
    pub fn new(net: Arc<PolicyNet>, epsilon: f64, seed: u64) -> Self {
        Self {
            net,
            epsilon,
            history_depth: None,
            ops: OpCounters::default(),
            state: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
            last: None,
        }
    }

    /// Records a snapshot of `depth` past cycles with every decision.
    pub fn with_history(mut self, depth: usize) -> Self {
        self.history_depth = Some(depth);
        self
    }

    pub fn state(&self) -> Option<&MonitorState> {
        self.state.as_ref()
    }

    /// Takes the record of the most recent decision, if any.
    pub fn take_record(&mut self) -> Option<DecisionRecord> {
        self.last.take()
    }

    /// Q-values for an agent at the current step.
    pub fn q_values(&self, sim: &Simulator, agent: usize) -> Result<Vec<f64>> {
        let a = sim.agent(agent);
        let obs = build_agent_observation(sim, agent, &self.net.cfg);
        let zero;
        let h = match &self.state {
            Some(s) => s.hidden(a.pair, a.current()),
            None => {
                zero = vec![0.0; self.net.cfg.hidden];
                &zero
            }
        };
        self.net.q_values(&obs, h)
    }
}

impl Controller for LearnedController {
    fn observe(&mut self, sim: &Simulator) -> sim::Result<u64> {
        let (nodes, pairs) = (sim.topology().node_count(), sim.agents().len());
        let state = self
            .state
            .get_or_insert_with(|| MonitorState::new(&self.net.cfg, nodes, pairs, self.history_depth));
        let sent = state.cycle(&self.net, sim)?;
        self.ops.node_updates += (nodes * pairs) as u64;
        self.ops.max_node_updates_per_cycle = self.ops.max_node_updates_per_cycle.max(pairs as u64);
        Ok(sent)
    }

    fn decide(&mut self, sim: &Simulator, agent: usize) -> sim::Result<Decision> {
        let cfg = &self.net.cfg;
        let mask = build_action_mask(sim, agent, cfg.max_degree);
        if !mask.iter().any(|&m| m) {
            return Ok(Decision::Drop);
        }
        let q = self.q_values(sim, agent)?;
        self.ops.q_evaluations += 1;
        let action = select_action(&q, &mask, self.epsilon, &mut self.rng)?;
        if self.history_depth.is_some() {
            let a = sim.agent(agent);
            let state = self.state.as_ref().expect("observe runs before decide");
            self.last = Some(DecisionRecord {
                agent,
                pair: a.pair,
                agent_obs: build_agent_observation(sim, agent, cfg),
                mask,
                action,
                snapshot: Some(state.snapshot(sim.topology(), a.pair, a.current(), cfg.max_degree)),
            });
        }
        Ok(Decision::Move(action))
    }
}
