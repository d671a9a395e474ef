//! Physical fiber topologies: generation, ingestion, segmentation and the
//! Phase-1 split of each repeater's qubits among its neighbours.

use std::cmp::Ordering;
use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = usize;
pub type EdgeId = usize;

const EARTH_RADIUS_KM: f64 = 6371.0;
const MAX_GENERATION_ATTEMPTS: usize = 100;

#[derive(Debug, Error)]
pub enum TopoError {
    #[error("invalid topology: {0}")]
    Invalid(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{location}: {message}")]
    Ingest { location: String, message: String },
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TopoError>;

fn ingest(location: impl Into<String>, message: impl Into<String>) -> TopoError {
    TopoError::Ingest {
        location: location.into(),
        message: message.into(),
    }
}

/// Hardware profile of one quantum repeater.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeaterProfile {
    /// Qubits of memory, `C_v`.
    pub qubit_capacity: u32,
    /// Fidelity of the repeater's swap operation.
    pub f_gate: f64,
    /// Number of dynamical decoupling pulses, `n_dec`.
    pub pulses: u32,
}

impl Default for RepeaterProfile {
    fn default() -> Self {
        Self {
            qubit_capacity: 0,
            f_gate: 1.0,
            pulses: 1024,
        }
    }
}

/// One fiber between two repeaters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiberEdge {
    pub u: NodeId,
    pub v: NodeId,
    pub length_km: f64,
    /// Maximum number of parallel Bell pairs on this fiber, `C_e`.
    pub capacity: u32,
}

impl FiberEdge {
    pub fn other(&self, node: NodeId) -> NodeId {
        if node == self.u {
            self.v
        } else {
            self.u
        }
    }
}

/// An incident edge as seen from one node. The position of a port in
/// [`PhysicalTopology::ports`] is the action slot an agent uses to pick it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Port {
    pub neighbor: NodeId,
    pub edge: EdgeId,
}

/// The static fiber graph. Always simple, connected and capacity-consistent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhysicalTopology {
    nodes: Vec<RepeaterProfile>,
    edges: Vec<FiberEdge>,
    positions: Option<Vec<[f64; 2]>>,
    #[serde(skip)]
    ports: Vec<Vec<Port>>,
}

impl PhysicalTopology {
    /// Checked constructor.
    pub fn new(
        nodes: Vec<RepeaterProfile>,
        edges: Vec<FiberEdge>,
        positions: Option<Vec<[f64; 2]>>,
    ) -> Result<Self> {
        let topo = Self::assemble(nodes, edges, positions)?;
        topo.validate()?;
        Ok(topo)
    }

    /// Builds adjacency without the capacity checks. Structural problems
    /// (self-loops, duplicates, bad lengths) are still rejected.
    fn assemble(
        nodes: Vec<RepeaterProfile>,
        edges: Vec<FiberEdge>,
        positions: Option<Vec<[f64; 2]>>,
    ) -> Result<Self> {
        let n = nodes.len();
        if n < 2 {
            return Err(TopoError::Invalid(format!("{n} nodes, need at least 2")));
        }
        if let Some(p) = &positions {
            if p.len() != n {
                return Err(TopoError::Invalid(format!(
                    "{} positions for {n} nodes",
                    p.len()
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        let mut ports = vec![Vec::new(); n];
        for (id, e) in edges.iter().enumerate() {
            if e.u >= n || e.v >= n {
                return Err(TopoError::Invalid(format!("edge {id} references missing node")));
            }
            if e.u == e.v {
                return Err(TopoError::Invalid(format!("edge {id} is a self-loop")));
            }
            if !(e.length_km.is_finite() && e.length_km > 0.0) {
                return Err(TopoError::Invalid(format!(
                    "edge {id} has length {}",
                    e.length_km
                )));
            }
            if !seen.insert((e.u.min(e.v), e.u.max(e.v))) {
                return Err(TopoError::Invalid(format!(
                    "duplicate edge {}-{}",
                    e.u, e.v
                )));
            }
            ports[e.u].push(Port {
                neighbor: e.v,
                edge: id,
            });
            ports[e.v].push(Port {
                neighbor: e.u,
                edge: id,
            });
        }
        // Slot order is a physical property (fiber length) so that relabelling
        // nodes does not reorder an agent's action space.
        for list in &mut ports {
            list.sort_by(|a, b| {
                edges[a.edge]
                    .length_km
                    .total_cmp(&edges[b.edge].length_km)
                    .then(a.neighbor.cmp(&b.neighbor))
            });
        }
        let topo = Self {
            nodes,
            edges,
            positions,
            ports,
        };
        if !topo.is_connected() {
            return Err(TopoError::Invalid("graph is not connected".into()));
        }
        Ok(topo)
    }

    fn validate(&self) -> Result<()> {
        for (id, e) in self.edges.iter().enumerate() {
            let cap = self.nodes[e.u]
                .qubit_capacity
                .min(self.nodes[e.v].qubit_capacity);
            if e.capacity == 0 || e.capacity > cap {
                return Err(TopoError::Invalid(format!(
                    "edge {id} capacity {} not in [1, min(C_u, C_v) = {cap}]",
                    e.capacity
                )));
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !(0.0..=1.0).contains(&node.f_gate) {
                return Err(TopoError::Invalid(format!(
                    "node {id} gate fidelity {}",
                    node.f_gate
                )));
            }
            if node.pulses == 0 {
                return Err(TopoError::Invalid(format!("node {id} has zero pulses")));
            }
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> &[RepeaterProfile] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &RepeaterProfile {
        &self.nodes[id]
    }

    pub fn edges(&self) -> &[FiberEdge] {
        &self.edges
    }

    pub fn edge(&self, id: EdgeId) -> &FiberEdge {
        &self.edges[id]
    }

    pub fn positions(&self) -> Option<&[[f64; 2]]> {
        self.positions.as_deref()
    }

    /// Incident edges in action-slot order.
    pub fn ports(&self, node: NodeId) -> &[Port] {
        &self.ports[node]
    }

    pub fn degree(&self, node: NodeId) -> usize {
        self.ports[node].len()
    }

    pub fn max_degree(&self) -> usize {
        self.ports.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn edge_between(&self, a: NodeId, b: NodeId) -> Option<EdgeId> {
        self.ports[a]
            .iter()
            .find(|p| p.neighbor == b)
            .map(|p| p.edge)
    }

    /// Slot of the port at `node` leading to `neighbor`.
    pub fn slot_of(&self, node: NodeId, neighbor: NodeId) -> Option<usize> {
        self.ports[node].iter().position(|p| p.neighbor == neighbor)
    }

    /// Unweighted hop distances from `source`; `usize::MAX` if unreachable.
    pub fn hop_distances(&self, source: NodeId) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.node_count()];
        let mut queue = VecDeque::from([source]);
        dist[source] = 0;
        while let Some(v) = queue.pop_front() {
            for p in &self.ports[v] {
                if dist[p.neighbor] == usize::MAX {
                    dist[p.neighbor] = dist[v] + 1;
                    queue.push_back(p.neighbor);
                }
            }
        }
        dist
    }

    /// All-pairs hop distances.
    pub fn distance_matrix(&self) -> Vec<Vec<usize>> {
        (0..self.node_count()).map(|v| self.hop_distances(v)).collect()
    }

    pub fn eccentricity(&self, node: NodeId) -> usize {
        self.hop_distances(node).into_iter().max().unwrap_or(0)
    }

    pub fn diameter(&self) -> usize {
        (0..self.node_count())
            .map(|v| self.eccentricity(v))
            .max()
            .unwrap_or(0)
    }

    /// Node of minimum eccentricity, lowest index on ties.
    pub fn center(&self) -> NodeId {
        (0..self.node_count())
            .min_by_key(|&v| (self.eccentricity(v), v))
            .unwrap_or(0)
    }

    fn is_connected(&self) -> bool {
        self.hop_distances(0).iter().all(|&d| d != usize::MAX)
    }

    /// Serialises to the JSON fixture schema.
    pub fn to_json(&self) -> String {
        let file = TopologyFile::from_topology(self);
        serde_json::to_string_pretty(&file).expect("topology serialises")
    }

    /// Returns a copy with node `i` renamed to `perm[i]`.
    pub fn relabel(&self, perm: &[NodeId]) -> Result<Self> {
        let n = self.node_count();
        if perm.len() != n {
            return Err(TopoError::Invalid("permutation length".into()));
        }
        let mut nodes = vec![RepeaterProfile::default(); n];
        for (old, &new) in perm.iter().enumerate() {
            nodes[new] = self.nodes[old].clone();
        }
        let positions = self.positions.as_ref().map(|p| {
            let mut out = vec![[0.0; 2]; n];
            for (old, &new) in perm.iter().enumerate() {
                out[new] = p[old];
            }
            out
        });
        let edges = self
            .edges
            .iter()
            .map(|e| FiberEdge {
                u: perm[e.u],
                v: perm[e.v],
                ..e.clone()
            })
            .collect();
        Self::new(nodes, edges, positions)
    }

    /// Replaces node profiles (gate fidelity, pulses) while keeping
    /// capacities.
    pub fn with_profiles(&self, f_gates: &[f64], pulses: &[u32]) -> Result<Self> {
        let mut nodes = self.nodes.clone();
        for (i, node) in nodes.iter_mut().enumerate() {
            node.f_gate = f_gates[i];
            node.pulses = pulses[i];
        }
        Self::new(nodes, self.edges.clone(), self.positions.clone())
    }
}

/// Parameters of the random geometric topology generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub max_degree: usize,
    pub k_nearest: usize,
    /// Side of the sampling square is this times `sqrt(n)`.
    pub side_per_sqrt_node_km: f64,
    pub qubits_per_degree: u32,
    pub profiles: ProfileSampler,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            max_degree: 5,
            k_nearest: 3,
            side_per_sqrt_node_km: 50.0,
            qubits_per_degree: 2,
            profiles: ProfileSampler::default(),
        }
    }
}

/// Distributions for per-repeater hardware parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileSampler {
    pub f_gate_mean: f64,
    pub f_gate_spread: f64,
    pub pulses_mean: f64,
    pub pulses_spread: f64,
}

impl Default for ProfileSampler {
    fn default() -> Self {
        Self {
            f_gate_mean: 1.0,
            f_gate_spread: 0.1,
            pulses_mean: 1024.0,
            pulses_spread: 0.0,
        }
    }
}

impl ProfileSampler {
    /// Clipped Gaussian gate fidelity, `min(1, N(mean, spread^2))`.
    pub fn sample_f_gate<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let x = if self.f_gate_spread > 0.0 {
            Normal::new(self.f_gate_mean, self.f_gate_spread)
                .expect("finite spread")
                .sample(rng)
        } else {
            self.f_gate_mean
        };
        x.clamp(0.0, 1.0)
    }

    /// `max(1, round(N(mean, spread^2)))`.
    pub fn sample_pulses<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let x = if self.pulses_spread > 0.0 {
            Normal::new(self.pulses_mean, self.pulses_spread)
                .expect("finite spread")
                .sample(rng)
        } else {
            self.pulses_mean
        };
        x.round().max(1.0).min(u32::MAX as f64) as u32
    }
}

fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Minimal union-find over node indices.
struct DisjointSets(Vec<usize>);

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.0[ra.max(rb)] = ra.min(rb);
        true
    }
}

/// Random geometric graph: uniform points, k-nearest-neighbour edges plus a
/// Euclidean minimum spanning tree, pruned to `max_degree`.
pub fn generate_random(n_nodes: usize, seed: u64, cfg: &GeneratorConfig) -> Result<PhysicalTopology> {
    if n_nodes < 2 {
        return Err(TopoError::Config(format!("{n_nodes} nodes, need at least 2")));
    }
    if cfg.max_degree < 1 || (n_nodes > 2 && cfg.max_degree < 2) {
        return Err(TopoError::Config(format!(
            "max_degree {} cannot connect {n_nodes} nodes",
            cfg.max_degree
        )));
    }
    if cfg.qubits_per_degree < 1 {
        return Err(TopoError::Config("qubits_per_degree must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = cfg.side_per_sqrt_node_km * (n_nodes as f64).sqrt();
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let positions: Vec<[f64; 2]> = (0..n_nodes)
            .map(|_| [rng.random::<f64>() * side, rng.random::<f64>() * side])
            .collect();
        if let Some(edges) = geometric_edges(&positions, cfg) {
            let nodes = (0..n_nodes)
                .map(|_| RepeaterProfile {
                    qubit_capacity: 0,
                    f_gate: cfg.profiles.sample_f_gate(&mut rng),
                    pulses: cfg.profiles.sample_pulses(&mut rng),
                })
                .collect();
            let topo = PhysicalTopology::assemble(nodes, edges, Some(positions))?;
            return assign_capacities(&topo, cfg.qubits_per_degree);
        }
    }
    Err(TopoError::Config(format!(
        "no valid graph after {MAX_GENERATION_ATTEMPTS} attempts"
    )))
}

fn geometric_edges(positions: &[[f64; 2]], cfg: &GeneratorConfig) -> Option<Vec<FiberEdge>> {
    let n = positions.len();
    let mut pairs = BTreeMap::new();
    let mut all = Vec::with_capacity(n * (n - 1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            let d = euclid(positions[a], positions[b]);
            if d <= 0.0 {
                return None;
            }
            all.push((d, a, b));
        }
    }
    for a in 0..n {
        let mut near: Vec<(f64, usize)> = (0..n)
            .filter(|&b| b != a)
            .map(|b| (euclid(positions[a], positions[b]), b))
            .collect();
        near.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        for &(d, b) in near.iter().take(cfg.k_nearest) {
            pairs.insert((a.min(b), a.max(b)), d);
        }
    }
    all.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let mut sets = DisjointSets::new(n);
    for &(d, a, b) in &all {
        if sets.union(a, b) {
            pairs.insert((a, b), d);
        }
    }

    let mut edges: Vec<(usize, usize, f64)> = pairs.into_iter().map(|((a, b), d)| (a, b, d)).collect();
    loop {
        let mut degree = vec![0usize; n];
        for &(a, b, _) in &edges {
            degree[a] += 1;
            degree[b] += 1;
        }
        let Some(node) = (0..n).find(|&v| degree[v] > cfg.max_degree) else {
            break;
        };
        let mut incident: Vec<usize> = (0..edges.len())
            .filter(|&i| edges[i].0 == node || edges[i].1 == node)
            .collect();
        incident.sort_by(|&x, &y| edges[y].2.total_cmp(&edges[x].2).then(x.cmp(&y)));
        let removable = incident.into_iter().find(|&i| {
            let rest: Vec<(usize, usize)> = edges
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &(a, b, _))| (a, b))
                .collect();
            connected(n, &rest)
        });
        edges.remove(removable?);
    }
    Some(
        edges
            .into_iter()
            .map(|(u, v, length_km)| FiberEdge {
                u,
                v,
                length_km,
                capacity: 0,
            })
            .collect(),
    )
}

fn connected(n: usize, edges: &[(usize, usize)]) -> bool {
    let mut sets = DisjointSets::new(n);
    let mut components = n;
    for &(a, b) in edges {
        if sets.union(a, b) {
            components -= 1;
        }
    }
    components == 1
}

/// Replaces every edge longer than `max_len_km` by a chain of
/// `ceil(L / max_len)` equal segments through new degree-2 repeaters.
///
/// New repeaters copy the gate fidelity and pulses of the edge's `u`
/// endpoint and get `2 C_e` qubits.
pub fn segment_long_links(topo: &PhysicalTopology, max_len_km: f64) -> Result<PhysicalTopology> {
    if !(max_len_km.is_finite() && max_len_km > 0.0) {
        return Err(TopoError::Config(format!("max_len_km = {max_len_km}")));
    }
    let mut nodes = topo.nodes.clone();
    let mut positions = topo.positions.clone();
    let mut edges = Vec::with_capacity(topo.edges.len());
    for e in &topo.edges {
        let segments = (e.length_km / max_len_km).ceil() as usize;
        if segments <= 1 {
            edges.push(e.clone());
            continue;
        }
        let seg_len = e.length_km / segments as f64;
        let mut prev = e.u;
        for k in 1..=segments {
            let next = if k == segments {
                e.v
            } else {
                let id = nodes.len();
                nodes.push(RepeaterProfile {
                    qubit_capacity: 2 * e.capacity,
                    ..topo.nodes[e.u].clone()
                });
                if let Some(p) = positions.as_mut() {
                    let t = k as f64 / segments as f64;
                    let (a, b) = (p[e.u], p[e.v]);
                    p.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
                }
                id
            };
            edges.push(FiberEdge {
                u: prev,
                v: next,
                length_km: seg_len,
                capacity: e.capacity,
            });
            prev = next;
        }
    }
    PhysicalTopology::new(nodes, edges, positions)
}

/// Sets `C_v = degree * qubits_per_degree` and `C_e` to the smaller of the
/// two endpoint buckets.
pub fn assign_capacities(topo: &PhysicalTopology, qubits_per_degree: u32) -> Result<PhysicalTopology> {
    if qubits_per_degree < 1 {
        return Err(TopoError::Config("qubits_per_degree must be >= 1".into()));
    }
    let mut t = topo.clone();
    for (v, node) in t.nodes.iter_mut().enumerate() {
        node.qubit_capacity = topo.ports[v].len() as u32 * qubits_per_degree;
    }
    // Previous fiber capacities must not cap the new allocation.
    for edge in t.edges.iter_mut() {
        edge.capacity = 0;
    }
    let slots = qubit_buckets(&t).edge_slots(&t);
    for (e, edge) in t.edges.iter_mut().enumerate() {
        edge.capacity = slots[e];
    }
    t.validate()?;
    Ok(t)
}

/// Per-node split of memory qubits among fiber neighbours.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QubitAllocation {
    /// `buckets[v][neighbor]` is the number of qubits `v` reserves for that
    /// neighbour.
    pub buckets: Vec<BTreeMap<NodeId, u32>>,
}

impl QubitAllocation {
    pub fn bucket(&self, node: NodeId, neighbor: NodeId) -> u32 {
        self.buckets[node].get(&neighbor).copied().unwrap_or(0)
    }

    /// Link slots per edge: both endpoints must hold a qubit for each pair,
    /// and the fiber capacity caps the total.
    pub fn edge_slots(&self, topo: &PhysicalTopology) -> Vec<u32> {
        topo.edges
            .iter()
            .map(|e| {
                let b = self.bucket(e.u, e.v).min(self.bucket(e.v, e.u));
                if e.capacity > 0 {
                    b.min(e.capacity)
                } else {
                    b
                }
            })
            .collect()
    }
}

/// Splits each node's qubits among its neighbours.
///
/// With at least one qubit per neighbour the split is as even as possible,
/// with the remainder going to the lowest neighbour indices. Otherwise a
/// maximum spanning tree weighted by `min(C_u, C_v)` decides who gets the
/// scarce qubits first: tree neighbours by descending weight, then the rest
/// by descending weight.
pub fn qubit_buckets(topo: &PhysicalTopology) -> QubitAllocation {
    let n = topo.node_count();
    let weight = |e: &FiberEdge| topo.nodes[e.u].qubit_capacity.min(topo.nodes[e.v].qubit_capacity);

    let mut order: Vec<EdgeId> = (0..topo.edge_count()).collect();
    order.sort_by(|&a, &b| {
        let (ea, eb) = (&topo.edges[a], &topo.edges[b]);
        weight(eb)
            .cmp(&weight(ea))
            .then((ea.u.min(ea.v), ea.u.max(ea.v)).cmp(&(eb.u.min(eb.v), eb.u.max(eb.v))))
    });
    let mut in_tree = vec![false; topo.edge_count()];
    let mut sets = DisjointSets::new(n);
    for e in order {
        if sets.union(topo.edges[e].u, topo.edges[e].v) {
            in_tree[e] = true;
        }
    }

    let buckets = (0..n)
        .map(|v| {
            let cap = topo.nodes[v].qubit_capacity;
            let mut neighbors: Vec<Port> = topo.ports[v].clone();
            neighbors.sort_by_key(|p| p.neighbor);
            let deg = neighbors.len() as u32;
            let mut out = BTreeMap::new();
            if deg == 0 {
                return out;
            }
            if cap >= deg {
                let (base, rem) = (cap / deg, cap % deg);
                for (i, p) in neighbors.iter().enumerate() {
                    out.insert(p.neighbor, base + u32::from((i as u32) < rem));
                }
                return out;
            }
            let by_weight = |a: &Port, b: &Port| -> Ordering {
                weight(&topo.edges[b.edge])
                    .cmp(&weight(&topo.edges[a.edge]))
                    .then(a.neighbor.cmp(&b.neighbor))
            };
            let (mut tree, mut rest): (Vec<Port>, Vec<Port>) =
                neighbors.iter().partition(|p| in_tree[p.edge]);
            tree.sort_by(by_weight);
            rest.sort_by(by_weight);
            for p in &neighbors {
                out.insert(p.neighbor, 0);
            }
            let mut left = cap;
            for p in tree.iter().chain(rest.iter()) {
                if left == 0 {
                    break;
                }
                *out.get_mut(&p.neighbor).unwrap() += 1;
                left -= 1;
            }
            out
        })
        .collect();
    QubitAllocation { buckets }
}

/// On-disk topology schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologyFile {
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<EdgeRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_km: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_km: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_gate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_dec: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub u: serde_json::Value,
    pub v: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_km: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<u32>,
}

fn id_key(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl TopologyFile {
    pub fn from_topology(topo: &PhysicalTopology) -> Self {
        let nodes = topo
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| NodeRecord {
                id: serde_json::json!(i),
                x_km: topo.positions.as_ref().map(|p| p[i][0]),
                y_km: topo.positions.as_ref().map(|p| p[i][1]),
                f_gate: Some(n.f_gate),
                n_dec: Some(n.pulses),
            })
            .collect();
        let edges = topo
            .edges
            .iter()
            .map(|e| EdgeRecord {
                u: serde_json::json!(e.u),
                v: serde_json::json!(e.v),
                length_km: Some(e.length_km),
                capacity: Some(e.capacity),
            })
            .collect();
        Self { nodes, edges }
    }

    /// Resolves ids, fills in missing lengths from coordinates and assigns
    /// capacities.
    pub fn into_topology(self, qubits_per_degree: u32) -> Result<PhysicalTopology> {
        let mut index = BTreeMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if index.insert(id_key(&n.id), i).is_some() {
                return Err(ingest(format!("node {}", id_key(&n.id)), "duplicate node id"));
            }
        }
        let coords: Vec<Option<[f64; 2]>> = self
            .nodes
            .iter()
            .map(|n| match (n.x_km, n.y_km) {
                (Some(x), Some(y)) => Some([x, y]),
                _ => None,
            })
            .collect();
        let positions = if coords.iter().all(Option::is_some) {
            Some(coords.iter().map(|c| c.unwrap()).collect::<Vec<_>>())
        } else {
            None
        };
        let lookup = |v: &serde_json::Value, i: usize| {
            index
                .get(&id_key(v))
                .copied()
                .ok_or_else(|| ingest(format!("edge {i}"), format!("unknown node {}", id_key(v))))
        };
        let mut edges = Vec::new();
        for (i, e) in self.edges.iter().enumerate() {
            let (u, v) = (lookup(&e.u, i)?, lookup(&e.v, i)?);
            let length_km = match e.length_km {
                Some(l) => l,
                None => match (coords[u], coords[v]) {
                    (Some(a), Some(b)) => euclid(a, b),
                    _ => {
                        return Err(ingest(
                            format!("edge {i} ({}-{})", id_key(&e.u), id_key(&e.v)),
                            "no length and endpoint coordinates missing",
                        ))
                    }
                },
            };
            edges.push(FiberEdge {
                u,
                v,
                length_km,
                capacity: e.capacity.unwrap_or(0),
            });
        }
        let defaults = RepeaterProfile::default();
        let nodes = self
            .nodes
            .iter()
            .map(|n| RepeaterProfile {
                qubit_capacity: 0,
                f_gate: n.f_gate.unwrap_or(defaults.f_gate),
                pulses: n.n_dec.unwrap_or(defaults.pulses),
            })
            .collect();
        let topo = PhysicalTopology::assemble(nodes, edges, positions)
            .map_err(|e| ingest("topology", e.to_string()))?;
        capacitate(topo, qubits_per_degree)
    }
}

/// Assigns node capacities and clamps declared edge capacities to the
/// endpoint buckets.
fn capacitate(topo: PhysicalTopology, qubits_per_degree: u32) -> Result<PhysicalTopology> {
    let declared: Vec<u32> = topo.edges.iter().map(|e| e.capacity).collect();
    let mut t = assign_capacities(&topo, qubits_per_degree)?;
    for (e, edge) in t.edges.iter_mut().enumerate() {
        if declared[e] > 0 {
            edge.capacity = edge.capacity.min(declared[e]);
        }
    }
    t.validate()?;
    Ok(t)
}

/// Great-circle distance between two `(latitude, longitude)` points.
pub fn great_circle_km(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (lat1, lon1) = (a[0].to_radians(), a[1].to_radians());
    let (lat2, lon2) = (b[0].to_radians(), b[1].to_radians());
    let h = ((lat2 - lat1) / 2.0).sin().powi(2)
        + lat1.cos() * lat2.cos() * ((lon2 - lon1) / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Parses a GraphML document (Topology Zoo style `Latitude`/`Longitude`
/// attributes, or planar `x`/`y` in km).
///
/// Self-loops are dropped and parallel fibers collapse into the shortest.
pub fn parse_graphml(text: &str, qubits_per_degree: u32) -> Result<PhysicalTopology> {
    let doc = roxmltree::Document::parse(text).map_err(|e| ingest("graphml", e.to_string()))?;
    let mut keys: BTreeMap<String, String> = BTreeMap::new();
    for key in doc.descendants().filter(|n| n.has_tag_name("key")) {
        if let (Some(id), Some(name)) = (key.attribute("id"), key.attribute("attr.name")) {
            keys.insert(id.to_string(), name.to_ascii_lowercase());
        }
    }
    let graph = doc
        .descendants()
        .find(|n| n.has_tag_name("graph"))
        .ok_or_else(|| ingest("graphml", "no <graph> element"))?;
    let data_of = |node: roxmltree::Node| -> BTreeMap<String, String> {
        node.children()
            .filter(|c| c.has_tag_name("data"))
            .filter_map(|d| {
                let name = keys.get(d.attribute("key")?)?.clone();
                Some((name, d.text().unwrap_or("").trim().to_string()))
            })
            .collect()
    };
    let number = |data: &BTreeMap<String, String>, names: &[&str], loc: &str| -> Result<Option<f64>> {
        for name in names {
            if let Some(raw) = data.get(*name) {
                return raw
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|_| ingest(loc, format!("attribute {name} = {raw:?} is not a number")));
            }
        }
        Ok(None)
    };

    let mut index = BTreeMap::new();
    let mut geo: Vec<Option<[f64; 2]>> = Vec::new();
    let mut planar: Vec<Option<[f64; 2]>> = Vec::new();
    let mut profiles = Vec::new();
    for node in graph.children().filter(|n| n.has_tag_name("node")) {
        let id = node
            .attribute("id")
            .ok_or_else(|| ingest(format!("node #{}", index.len()), "missing id"))?;
        let loc = format!("node {id}");
        let data = data_of(node);
        let lat = number(&data, &["latitude", "lat"], &loc)?;
        let lon = number(&data, &["longitude", "lon", "long"], &loc)?;
        let x = number(&data, &["x_km", "x"], &loc)?;
        let y = number(&data, &["y_km", "y"], &loc)?;
        geo.push(lat.zip(lon).map(|(a, b)| [a, b]));
        planar.push(x.zip(y).map(|(a, b)| [a, b]));
        let defaults = RepeaterProfile::default();
        profiles.push(RepeaterProfile {
            qubit_capacity: 0,
            f_gate: number(&data, &["f_gate"], &loc)?.unwrap_or(defaults.f_gate),
            pulses: number(&data, &["n_dec"], &loc)?
                .map(|p| p.round().max(1.0) as u32)
                .unwrap_or(defaults.pulses),
        });
        if index.insert(id.to_string(), index.len()).is_some() {
            return Err(ingest(loc, "duplicate node id"));
        }
    }
    let use_geo = !geo.is_empty() && geo.iter().all(Option::is_some);
    let use_planar = !use_geo && !planar.is_empty() && planar.iter().all(Option::is_some);

    let mut best: BTreeMap<(usize, usize), (f64, u32)> = BTreeMap::new();
    for (i, edge) in graph.children().filter(|n| n.has_tag_name("edge")).enumerate() {
        let loc = format!(
            "edge #{i} ({}-{})",
            edge.attribute("source").unwrap_or("?"),
            edge.attribute("target").unwrap_or("?")
        );
        let end = |attr: &str| -> Result<usize> {
            let name = edge
                .attribute(attr)
                .ok_or_else(|| ingest(&loc, format!("missing {attr}")))?;
            index
                .get(name)
                .copied()
                .ok_or_else(|| ingest(&loc, format!("unknown node {name}")))
        };
        let (u, v) = (end("source")?, end("target")?);
        if u == v {
            log::warn!("{loc}: dropping self-loop");
            continue;
        }
        let data = data_of(edge);
        let declared = number(&data, &["length_km", "length", "linklength", "distance"], &loc)?;
        let length = match declared {
            Some(l) => l,
            None if use_geo => great_circle_km(geo[u].unwrap(), geo[v].unwrap()),
            None if use_planar => euclid(planar[u].unwrap(), planar[v].unwrap()),
            None => return Err(ingest(&loc, "no length and endpoint coordinates missing")),
        };
        let capacity = number(&data, &["capacity"], &loc)?.map(|c| c as u32).unwrap_or(0);
        let key = (u.min(v), u.max(v));
        let entry = best.entry(key).or_insert((length, capacity));
        if length < entry.0 {
            *entry = (length, capacity);
        }
    }
    let positions = if use_geo {
        let n = geo.len() as f64;
        let lat0 = geo.iter().map(|g| g.unwrap()[0]).sum::<f64>() / n;
        let lon0 = geo.iter().map(|g| g.unwrap()[1]).sum::<f64>() / n;
        let k = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
        Some(
            geo.iter()
                .map(|g| {
                    let [lat, lon] = g.unwrap();
                    [(lon - lon0) * k * lat0.to_radians().cos(), (lat - lat0) * k]
                })
                .collect(),
        )
    } else if use_planar {
        Some(planar.iter().map(|p| p.unwrap()).collect())
    } else {
        None
    };
    let edges = best
        .into_iter()
        .map(|((u, v), (length_km, capacity))| FiberEdge {
            u,
            v,
            length_km,
            capacity,
        })
        .collect();
    let topo = PhysicalTopology::assemble(profiles, edges, positions)
        .map_err(|e| ingest("graphml", e.to_string()))?;
    capacitate(topo, qubits_per_degree)
}

/// Loads a topology from a `.json` fixture or a `.graphml` file.
pub fn load_topology(path: impl AsRef<Path>, qubits_per_degree: u32) -> Result<PhysicalTopology> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| TopoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let located = |e: TopoError| match e {
        TopoError::Ingest { location, message } => TopoError::Ingest {
            location: format!("{}: {location}", path.display()),
            message,
        },
        other => other,
    };
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => {
            let file: TopologyFile = serde_json::from_str(&text).map_err(|e| {
                ingest(
                    format!("{}:{}:{}", path.display(), e.line(), e.column()),
                    e.to_string(),
                )
            })?;
            file.into_topology(qubits_per_degree).map_err(located)
        }
        Some("graphml") | Some("xml") => parse_graphml(&text, qubits_per_degree).map_err(located),
        other => Err(ingest(
            path.display().to_string(),
            format!("unsupported extension {other:?}"),
        )),
    }
}
