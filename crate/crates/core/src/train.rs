//! Rewards, Monte-Carlo returns, replay and the training loop.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Adam, NnError, Parameterized};
use crate::policy::{DecisionRecord, EgoSnapshot, LearnedController, PolicyConfig, PolicyError, PolicyNet};
use crate::qcalc::BASELINE_FIDELITY;
use crate::sim::{self, Controller, Decision, DecayModel, Event, EventKind, SimConfig, SimError, Simulator};
use crate::topo::{generate_random, GeneratorConfig, NodeId, PhysicalTopology, TopoError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Topo(#[from] TopoError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Terminal reward of a request: the end-to-end fidelity on success, the
/// baseline fidelity if a path was found but entanglement failed, otherwise 0.
pub fn reward(kind: EventKind, fidelity: Option<f64>) -> f64 {
    match kind {
        EventKind::Success => fidelity.unwrap_or(0.0),
        EventKind::NoLink | EventKind::BelowThreshold | EventKind::SwapFailed => BASELINE_FIDELITY,
        EventKind::Ttl | EventKind::Move => 0.0,
    }
}

/// Discounted returns `R_t = sum_k gamma^(k-t) r_k`, by backward accumulation.
pub fn rollout_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// One regression sample.
#[derive(Debug, Clone)]
pub struct Transition {
    pub agent_obs: Vec<f32>,
    pub snapshot: EgoSnapshot,
    pub mask: Vec<bool>,
    pub action: u8,
    pub ret: f64,
    pub pair: usize,
    pub step: u64,
}

impl Transition {
    fn from_record(record: DecisionRecord, ret: f64, step: u64) -> Option<Self> {
        let snapshot = record.snapshot?;
        if !record.mask.get(record.action).copied().unwrap_or(false)
            || record.agent_obs.iter().any(|x| !x.is_finite())
            || !ret.is_finite()
        {
            return None;
        }
        Some(Self {
            agent_obs: record.agent_obs.iter().map(|&x| x as f32).collect(),
            snapshot,
            mask: record.mask,
            action: record.action as u8,
            ret,
            pair: record.pair,
            step,
        })
    }
}

/// Fixed-capacity ring buffer with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: Vec::new(),
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn sample<'a, R: Rng + ?Sized>(&'a self, n: usize, rng: &mut R) -> Vec<&'a Transition> {
        (0..n).map(|_| self.items.choose(rng).expect("non-empty")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr: f64,
    pub epsilon_start: f64,
    pub epsilon_decay: f64,
    pub epsilon_floor: f64,
    pub batch_size: usize,
    /// Environment steps between training iterations.
    pub train_every: u64,
    /// Optimizer steps per training iteration.
    pub grad_steps: usize,
    pub buffer_capacity: usize,
    pub episode_steps: u64,
    /// Total environment steps.
    pub total_steps: u64,
    /// Monitoring cycles unrolled when computing gradients (0 treats the
    /// node state as a constant input).
    pub unroll_depth: usize,
    pub nodes: usize,
    pub pairs: usize,
    pub generator: GeneratorConfig,
    pub sim: SimConfig,
    pub policy: PolicyConfig,
    pub seed: u64,
    /// Steps between greedy validation runs; 0 disables validation and the
    /// final network is returned. Otherwise the network with the best
    /// validation EDR is returned.
    pub validate_every: u64,
    pub validation_episodes: usize,
    pub validation_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            lr: 5e-4,
            epsilon_start: 1.0,
            epsilon_decay: 0.99999,
            epsilon_floor: 0.01,
            batch_size: 32,
            train_every: 200,
            grad_steps: 1,
            buffer_capacity: 100_000,
            episode_steps: 500,
            total_steps: 15_000_000,
            unroll_depth: 2,
            nodes: 100,
            pairs: 1,
            generator: GeneratorConfig::default(),
            sim: SimConfig {
                decay: DecayModel::Exponential,
                ..SimConfig::default()
            },
            policy: PolicyConfig::default(),
            seed: 0,
            validate_every: 0,
            validation_episodes: 10,
            validation_steps: 300,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: 10-node graphs and a 2e5-step budget with the
    /// exploration schedule compressed to reach its floor within the budget.
    pub fn smoke() -> Self {
        let total_steps = 200_000;
        Self {
            total_steps,
            nodes: 10,
            epsilon_decay: (0.01f64.ln() / (0.6 * total_steps as f64)).exp(),
            lr: 1e-3,
            batch_size: 64,
            grad_steps: 16,
            validate_every: 20_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(TrainError::Config(format!("gamma = {}", self.gamma)));
        }
        if self.batch_size == 0 || self.train_every == 0 || self.episode_steps == 0 {
            return Err(TrainError::Config("batch_size, train_every and episode_steps must be >= 1".into()));
        }
        if self.pairs == 0 || self.nodes < 2 {
            return Err(TrainError::Config("need at least 2 nodes and 1 pair".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_floor) {
            return Err(TrainError::Config("epsilon values must be in [0, 1]".into()));
        }
        self.sim.validate()?;
        Ok(())
    }

    /// `max(floor, start * decay^t)`.
    pub fn epsilon(&self, t: u64) -> f64 {
        (self.epsilon_start * self.epsilon_decay.powf(t as f64)).max(self.epsilon_floor)
    }
}

/// Mean squared error between `Q(s, a)` and the stored return, with
/// gradients accumulated into `net` when `backprop` is set.
pub fn batch_loss(net: &mut PolicyNet, batch: &[&Transition], backprop: bool) -> Result<f64> {
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for t in batch {
        let obs: Vec<f64> = t.agent_obs.iter().map(|&x| x as f64).collect();
        let (q, cache) = net.unroll_forward(&t.snapshot, &obs)?;
        let a = t.action as usize;
        let err = q[a] - t.ret;
        total += err * err * scale;
        if backprop {
            let mut dq = vec![0.0; q.len()];
            dq[a] = 2.0 * err * scale;
            net.unroll_backward(&cache, &dq)?;
        }
    }
    Ok(total)
}

/// One optimizer step on a uniform mini-batch. Returns `None` if the buffer
/// holds fewer transitions than a batch.
pub fn train_iteration<R: Rng + ?Sized>(
    net: &mut PolicyNet,
    adam: &mut Adam,
    buffer: &ReplayBuffer,
    batch_size: usize,
    rng: &mut R,
) -> Result<Option<f64>> {
    if buffer.len() < batch_size {
        return Ok(None);
    }
    let batch = buffer.sample(batch_size, rng);
    net.zero_grad();
    let loss = batch_loss(net, &batch, true)?;
    adam.step(&mut net.params_mut())?;
    Ok(Some(loss))
}

/// Learned controller that also turns finished trajectories into
/// transitions.
pub struct TrainingController {
    pub inner: LearnedController,
    pub gamma: f64,
    trajectories: Vec<Vec<(DecisionRecord, u64)>>,
    pending: Vec<Transition>,
    /// Terminal rewards observed so far.
    pub rewards: Vec<f64>,
}

impl TrainingController {
    pub fn new(inner: LearnedController, gamma: f64, agents: usize) -> Self {
        Self {
            inner,
            gamma,
            trajectories: vec![Vec::new(); agents],
            pending: Vec::new(),
            rewards: Vec::new(),
        }
    }

    pub fn drain(&mut self) -> Vec<Transition> {
        std::mem::take(&mut self.pending)
    }
}

impl Controller for TrainingController {
    fn observe(&mut self, sim: &Simulator) -> sim::Result<u64> {
        self.inner.observe(sim)
    }

    fn decide(&mut self, sim: &Simulator, agent: usize) -> sim::Result<Decision> {
        let d = self.inner.decide(sim, agent)?;
        if let Some(record) = self.inner.take_record() {
            self.trajectories[agent].push((record, sim.now()));
        }
        Ok(d)
    }

    fn on_event(&mut self, _sim: &Simulator, event: &Event) {
        if !event.event.is_terminal() {
            return;
        }
        let r = reward(event.event, event.fidelity);
        self.rewards.push(r);
        let traj = std::mem::take(&mut self.trajectories[event.agent]);
        if traj.is_empty() {
            return;
        }
        let mut rewards = vec![0.0; traj.len()];
        *rewards.last_mut().unwrap() = r;
        let returns = rollout_returns(&rewards, self.gamma);
        for ((record, step), ret) in traj.into_iter().zip(returns) {
            if let Some(t) = Transition::from_record(record, ret, step) {
                self.pending.push(t);
            }
        }
    }
}

/// Uniformly random choice among allowed slots; drops on an empty mask.
pub struct RandomController {
    rng: ChaCha8Rng,
}

impl RandomController {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Controller for RandomController {
    fn decide(&mut self, sim: &Simulator, agent: usize) -> sim::Result<Decision> {
        let allowed: Vec<usize> = sim
            .action_mask(agent)
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
            .collect();
        Ok(match allowed.choose(&mut self.rng) {
            Some(&slot) => Decision::Move(slot),
            None => Decision::Drop,
        })
    }
}

/// Distinct random source/destination pairs.
pub fn sample_pairs<R: Rng + ?Sized>(nodes: usize, pairs: usize, rng: &mut R) -> Vec<(NodeId, NodeId)> {
    (0..pairs)
        .map(|_| {
            let s = rng.random_range(0..nodes);
            let mut d = rng.random_range(0..nodes - 1);
            if d >= s {
                d += 1;
            }
            (s, d)
        })
        .collect()
}

/// One point of the learning curve, written per training episode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub step: u64,
    pub episode: u64,
    pub edr: u64,
    pub mean_reward: f64,
    pub loss: Option<f64>,
    pub epsilon: f64,
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("step,episode,edr,mean_reward,loss,epsilon\n");
    for r in rows {
        let loss = r.loss.map(|l| l.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{},{}", r.step, r.episode, r.edr, r.mean_reward, loss, r.epsilon);
    }
    out
}

/// Result of [`training_run`].
pub struct TrainOutcome {
    pub net: PolicyNet,
    /// `(step, total validation EDR)` per validation run.
    pub validation: Vec<(u64, u64)>,
    pub curve: Vec<CurveRow>,
    pub steps: u64,
}

/// Episode seed derivation shared by training and evaluation.
pub fn episode_seed(seed: u64, episode: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(episode)
}

/// Seed of validation episode `i`; disjoint from the training stream.
pub fn validation_seed(seed: u64, i: u64) -> u64 {
    episode_seed(seed ^ 0x5641_4c49_4441_5445, i)
}

/// Total greedy EDR over the validation episodes of `cfg`.
pub fn validation_edr(cfg: &TrainConfig, net: &Arc<PolicyNet>) -> Result<u64> {
    let mut total = 0;
    for i in 0..cfg.validation_episodes as u64 {
        let seed = validation_seed(cfg.seed, i);
        let topo = generate_random(cfg.nodes, seed, &cfg.generator)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = sample_pairs(topo.node_count(), cfg.pairs, &mut rng);
        let m = evaluate_learned(Arc::clone(net), topo, &pairs, &cfg.sim, cfg.validation_steps, seed)?;
        total += m.edr;
    }
    Ok(total)
}

/// Trains a fresh network. `on_episode` sees the network after every
/// episode (e.g. for periodic checkpoints).
pub fn training_run(cfg: &TrainConfig, mut on_episode: impl FnMut(u64, &PolicyNet)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut net = PolicyNet::init(cfg.policy.clone(), cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0074_7261_696e);
    let mut curve = Vec::new();
    let mut t = 0u64;
    let mut episode = 0u64;
    let mut snapshot = Arc::new(net.clone());
    let mut validation = Vec::new();
    let mut best: Option<(u64, Arc<PolicyNet>)> = None;
    while t < cfg.total_steps {
        let eseed = episode_seed(cfg.seed, episode);
        let topo = generate_random(cfg.nodes, eseed, &cfg.generator)?;
        let mut erng = ChaCha8Rng::seed_from_u64(eseed);
        let pairs = sample_pairs(topo.node_count(), cfg.pairs, &mut erng);
        let mut sim = Simulator::new(topo, cfg.sim.clone(), &pairs, eseed)?;
        sim.set_record_events(false);
        let inner = LearnedController::new(Arc::clone(&snapshot), cfg.epsilon(t), eseed ^ 1).with_history(cfg.unroll_depth);
        let mut ctrl = TrainingController::new(inner, cfg.gamma, pairs.len());
        let mut losses = Vec::new();
        let steps = cfg.episode_steps.min(cfg.total_steps - t);
        for _ in 0..steps {
            ctrl.inner.epsilon = cfg.epsilon(t);
            sim.step(&mut ctrl)?;
            for tr in ctrl.drain() {
                buffer.push(tr);
            }
            t += 1;
            if t.is_multiple_of(cfg.train_every) {
                for _ in 0..cfg.grad_steps {
                    if let Some(l) = train_iteration(&mut net, &mut adam, &buffer, cfg.batch_size, &mut rng)? {
                        losses.push(l);
                    }
                }
                snapshot = Arc::new(net.clone());
                ctrl.inner.net = Arc::clone(&snapshot);
            }
            if cfg.validate_every > 0 && (t.is_multiple_of(cfg.validate_every) || t == cfg.total_steps) {
                let score = validation_edr(cfg, &snapshot)?;
                validation.push((t, score));
                log::debug!("validation at step {t}: edr {score}");
                if best.as_ref().is_none_or(|(b, _)| score >= *b) {
                    best = Some((score, Arc::clone(&snapshot)));
                }
            }
        }
        let mean_reward = if ctrl.rewards.is_empty() {
            0.0
        } else {
            ctrl.rewards.iter().sum::<f64>() / ctrl.rewards.len() as f64
        };
        curve.push(CurveRow {
            step: t,
            episode,
            edr: sim.metrics().edr,
            mean_reward,
            loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
            epsilon: cfg.epsilon(t),
        });
        log::debug!("episode {episode} step {t} edr {}", sim.metrics().edr);
        on_episode(episode, &net);
        episode += 1;
    }
    if let Some((_, b)) = best {
        net = Arc::unwrap_or_clone(b);
    }
    Ok(TrainOutcome {
        net,
        validation,
        curve,
        steps: t,
    })
}

/// Runs one greedy (or epsilon) evaluation episode of the learned policy.
pub fn evaluate_learned(
    net: Arc<PolicyNet>,
    topo: impl Into<Arc<PhysicalTopology>>,
    pairs: &[(NodeId, NodeId)],
    sim_cfg: &SimConfig,
    steps: u64,
    seed: u64,
) -> Result<sim::EpisodeMetrics> {
    let mut sim = Simulator::new(topo, sim_cfg.clone(), pairs, seed)?;
    let mut ctrl = LearnedController::new(net, 0.0, seed ^ 1);
    sim.run(&mut ctrl, sim_cfg.warmup_steps as u64 + steps)?;
    Ok(sim.into_metrics())
}
