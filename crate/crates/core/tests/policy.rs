mod common;

use std::sync::Arc;

use proptest::prelude::*;
use qroute::nn::Parameterized;
use qroute::policy::{
    build_action_mask, build_agent_observation, build_node_observation, select_action, LearnedController,
    MonitorState, PolicyConfig, PolicyError, PolicyNet,
};
use qroute::sim::{Controller, Decision, Simulator};
use qroute::topo::{generate_random, GeneratorConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn net() -> Arc<PolicyNet> {
    Arc::new(PolicyNet::init(PolicyConfig::default(), 7))
}

#[test]
fn observation_layout() {
    let cfg = PolicyConfig::default();
    assert_eq!(cfg.node_obs_len(), 17);
    assert_eq!(cfg.agent_obs_len(), 32);
    let mut sim = Simulator::new(common::chain(4, 1.0), common::abundant(), &[(0, 3)], 1).unwrap();
    sim.step(&mut qroute::sim::ScriptedController::default()).unwrap();
    let dest = build_node_observation(&sim, 3, 3, &cfg);
    assert_eq!(dest[0], 1.0);
    let inner = build_node_observation(&sim, 2, 3, &cfg);
    assert_eq!(inner[0], 0.0);
    // Node 2 has two ports; the padded slots stay zero.
    assert!(inner[2 + 3 * 2..].iter().all(|&x| x == 0.0));
    // One of node 2's neighbours is the destination.
    let flags: Vec<f64> = (0..2).map(|k| inner[2 + 3 * k + 2]).collect();
    assert_eq!(flags.iter().sum::<f64>(), 1.0);
    let agent = build_agent_observation(&sim, 0, &cfg);
    assert_eq!(agent.len(), 32);
    assert_eq!(agent[1], 0.0);
}

#[test]
fn mask_is_padded_to_max_degree() {
    let sim = Simulator::new(common::chain(3, 1.0), common::abundant(), &[(1, 2)], 1).unwrap();
    let mask = build_action_mask(&sim, 0, 5);
    assert_eq!(mask.len(), 5);
    assert!(mask[2..].iter().all(|m| !m));
}

#[test]
fn select_action_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let q = [0.1, 0.9, 0.5, -1.0, 2.0];
    let mask = [true, false, true, false, false];
    assert_eq!(select_action(&q, &mask, 0.0, &mut rng).unwrap(), 2);
    let ties = [0.3, 0.3, 0.3, 0.0, 0.0];
    assert_eq!(select_action(&ties, &[false, true, true, false, false], 0.0, &mut rng).unwrap(), 1);
    assert!(matches!(
        select_action(&q, &[false; 5], 0.0, &mut rng),
        Err(PolicyError::EmptyMask)
    ));
}

#[test]
fn full_exploration_is_uniform_over_allowed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = [5.0, 0.0, 0.0, 0.0, 0.0];
    let mask = [true, false, true, true, false];
    let n = 30_000;
    let mut counts = [0usize; 5];
    for _ in 0..n {
        counts[select_action(&q, &mask, 1.0, &mut rng).unwrap()] += 1;
    }
    assert_eq!(counts[1] + counts[4], 0);
    let expected = n as f64 / 3.0;
    let chi2: f64 = [0, 2, 3]
        .iter()
        .map(|&i| (counts[i] as f64 - expected).powi(2) / expected)
        .sum();
    // 99.9th percentile of chi-square with 2 degrees of freedom.
    assert!(chi2 < 13.82, "chi2 = {chi2}");
}

proptest! {
    #[test]
    fn greedy_choice_is_allowed_and_maximal(
        q in prop::collection::vec(-10.0f64..10.0, 5),
        mask in prop::collection::vec(any::<bool>(), 5),
    ) {
        prop_assume!(mask.iter().any(|&m| m));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = select_action(&q, &mask, 0.0, &mut rng).unwrap();
        prop_assert!(mask[a]);
        for i in 0..5 {
            if mask[i] {
                prop_assert!(q[i] <= q[a]);
            }
        }
    }
}

#[test]
fn monitoring_messages_per_cycle() {
    let topo = generate_random(10, 4, &GeneratorConfig::default()).unwrap();
    let edges = topo.edge_count() as u64;
    let mut sim = Simulator::new(topo, common::abundant(), &[(0, 1), (2, 3), (4, 5)], 1).unwrap();
    let mut ctrl = LearnedController::new(net(), 0.0, 1);
    sim.step(&mut ctrl).unwrap();
    assert_eq!(sim.metrics().messages, 2 * edges * 3);
}

/// Hidden state of node 0 on a path graph when the destination is `dest`,
/// after each of `cycles` monitoring cycles.
fn path_states(dest: usize, cycles: usize) -> Vec<Vec<f64>> {
    let topo = common::chain(12, 1.0);
    let mut sim = Simulator::new(topo, common::abundant(), &[(10, dest)], 5).unwrap();
    let mut ctrl = LearnedController::new(net(), 0.0, 1);
    let mut out = Vec::new();
    for _ in 0..cycles {
        sim.step(&mut ctrl).unwrap();
        out.push(ctrl.state().unwrap().hidden(0, 0).to_vec());
    }
    out
}

#[test]
fn target_flag_reaches_node_after_exactly_d_cycles() {
    let far = path_states(11, 7);
    for d in 1..=5 {
        let near = path_states(d, 7);
        let first = (0..7).find(|&c| near[c] != far[c]).map(|c| c + 1);
        assert_eq!(first, Some(d), "distance {d}");
    }
}

/// Wraps a learned controller and checks every decision's recorded snapshot
/// against the live Q-values.
struct UnrollCheck {
    inner: LearnedController,
    worst: f64,
    checked: usize,
}

impl Controller for UnrollCheck {
    fn observe(&mut self, sim: &Simulator) -> qroute::sim::Result<u64> {
        self.inner.observe(sim)
    }

    fn decide(&mut self, sim: &Simulator, agent: usize) -> qroute::sim::Result<Decision> {
        let live = self.inner.q_values(sim, agent)?;
        let d = self.inner.decide(sim, agent)?;
        if let Some(rec) = self.inner.take_record() {
            let snap = rec.snapshot.unwrap();
            let (q, _) = self.inner.net.unroll_forward(&snap, &rec.agent_obs).unwrap();
            for (a, b) in q.iter().zip(&live) {
                self.worst = self.worst.max((a - b).abs());
            }
            self.checked += 1;
        }
        Ok(d)
    }
}

#[test]
fn unrolled_recomputation_matches_live_state() {
    for depth in 0..=3 {
        let topo = generate_random(10, 11, &GeneratorConfig::default()).unwrap();
        let mut sim = Simulator::new(topo, qroute::sim::SimConfig::default(), &[(0, 7), (3, 9)], 2).unwrap();
        let mut ctrl = UnrollCheck {
            inner: LearnedController::new(net(), 0.3, 1).with_history(depth),
            worst: 0.0,
            checked: 0,
        };
        sim.run(&mut ctrl, 60).unwrap();
        assert!(ctrl.checked > 20);
        // Snapshots are stored in single precision.
        assert!(ctrl.worst < 1e-4, "depth {depth}: {}", ctrl.worst);
    }
}

#[test]
fn relabelling_preserves_decisions() {
    let topo = generate_random(10, 21, &GeneratorConfig::default()).unwrap();
    let perm = [3, 7, 0, 9, 1, 4, 8, 2, 6, 5];
    let moved = topo.relabel(&perm).unwrap();
    let pairs = [(0, 6), (4, 2)];
    let moved_pairs: Vec<_> = pairs.iter().map(|&(s, d)| (perm[s], perm[d])).collect();
    let cfg = qroute::sim::SimConfig::default();
    let mut a = Simulator::new(topo, cfg.clone(), &pairs, 9).unwrap();
    let mut b = Simulator::new(moved, cfg, &moved_pairs, 9).unwrap();
    let mut ca = LearnedController::new(net(), 0.0, 1);
    let mut cb = LearnedController::new(net(), 0.0, 1);
    a.set_record_events(true);
    b.set_record_events(true);
    for _ in 0..80 {
        a.step(&mut ca).unwrap();
        b.step(&mut cb).unwrap();
        for v in 0..10 {
            let (ha, hb) = (ca.state().unwrap().hidden(1, v), cb.state().unwrap().hidden(1, perm[v]));
            for (x, y) in ha.iter().zip(hb) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        for i in 0..2 {
            let pa: Vec<_> = a.agent(i).path.iter().map(|&v| perm[v]).collect();
            assert_eq!(pa, b.agent(i).path);
        }
    }
    assert_eq!(a.metrics().edr, b.metrics().edr);
    let kinds = |s: &Simulator| s.events().iter().map(|e| (e.agent, e.event)).collect::<Vec<_>>();
    assert!(!a.events().is_empty());
    assert_eq!(kinds(&a), kinds(&b));
}

#[test]
fn degree_above_model_limit_is_rejected() {
    let star: Vec<_> = (1..7).map(|i| (0, i)).collect();
    let topo = common::graph(7, &star, 1.0, 2);
    let mut sim = Simulator::new(topo, common::abundant(), &[(1, 2)], 0).unwrap();
    let mut ctrl = LearnedController::new(net(), 0.0, 1);
    assert!(sim.step(&mut ctrl).is_err());
}

#[test]
fn checkpoint_round_trip_keeps_q_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let n = net();
    n.save(&path).unwrap();
    let back = PolicyNet::load(PolicyConfig::default(), &path).unwrap();
    assert_eq!(back.param_count(), n.param_count());
    let obs: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
    let h: Vec<f64> = (0..32).map(|i| (i as f64 * 0.11).cos()).collect();
    assert_eq!(n.q_values(&obs, &h).unwrap(), back.q_values(&obs, &h).unwrap());
}

#[test]
fn golden_q_values() {
    let n = PolicyNet::init(PolicyConfig::default(), 0);
    let obs: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
    let h: Vec<f64> = (0..32).map(|i| (i as f64 * 0.11).cos()).collect();
    let q = n.q_values(&obs, &h).unwrap();
    let text: String = q.iter().map(|x| format!("{x:.12e}\n")).collect();
    common::check_golden("q_values.txt", &text);
}

#[test]
fn monitor_state_starts_at_zero() {
    let cfg = PolicyConfig::default();
    let s = MonitorState::new(&cfg, 4, 2, None);
    assert!(s.hidden(1, 3).iter().all(|&x| x == 0.0));
    assert_eq!(s.cycles(), 0);
}
