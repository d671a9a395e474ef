mod common;

use qroute::base::PlannerKind;
use qroute::exp::{
    fidelity_rank_curve, overhead_report, percentile, run_experiment, sweep, ExpError, ExperimentConfig,
    OverheadConfig, SweepGrid,
};
use qroute::sim::{EpisodeMetrics, EventKind};

fn small(planner: PlannerKind) -> ExperimentConfig {
    ExperimentConfig {
        planner,
        repeaters: 10,
        episodes: 3,
        steps: 100,
        seed: 4,
        ..ExperimentConfig::default()
    }
}

fn episode(f: &[f64]) -> EpisodeMetrics {
    EpisodeMetrics {
        e2e_fidelities: f.to_vec(),
        edr: f.len() as u64,
        ..EpisodeMetrics::default()
    }
}

#[test]
fn zero_steps_gives_zero_edr() {
    let cfg = ExperimentConfig {
        episodes: 1,
        steps: 0,
        ..small(PlannerKind::Ger)
    };
    let r = run_experiment(&cfg).unwrap();
    assert_eq!(r.report.mean_edr, 0.0);
    assert!(r.report.fidelity_rank.is_empty());
}

#[test]
fn same_seed_same_report() {
    for planner in [PlannerKind::Lber, PlannerKind::Qpath, PlannerKind::Random] {
        let a = run_experiment(&small(planner)).unwrap();
        let b = run_experiment(&small(planner)).unwrap();
        assert_eq!(a.raw_csv(), b.raw_csv());
        assert_eq!(a.report.mean_edr, b.report.mean_edr);
        assert_eq!(a.report.fidelity_rank, b.report.fidelity_rank);
    }
}

#[test]
fn worker_count_does_not_change_results() {
    let cfg = small(PlannerKind::Mger);
    std::env::set_var("QROUTE_WORKERS", "1");
    let one = run_experiment(&cfg).unwrap();
    std::env::set_var("QROUTE_WORKERS", "3");
    let three = run_experiment(&cfg).unwrap();
    std::env::remove_var("QROUTE_WORKERS");
    assert_eq!(one.raw_csv(), three.raw_csv());
}

#[test]
fn report_edr_matches_event_log() {
    let cfg = ExperimentConfig {
        record_events: true,
        pairs: 3,
        ..small(PlannerKind::Nonlber)
    };
    let r = run_experiment(&cfg).unwrap();
    for (m, log) in r.episodes.iter().zip(&r.events) {
        let successes = log.iter().filter(|e| e.event == EventKind::Success).count() as u64;
        assert_eq!(m.edr, successes);
    }
    assert!(r.report.p25_edr <= r.report.median_edr && r.report.median_edr <= r.report.p75_edr);
    assert_eq!(r.events_jsonl().lines().count(), r.events.iter().map(Vec::len).sum::<usize>());
}

#[test]
fn learned_planner_needs_checkpoint() {
    let cfg = small(PlannerKind::Learned);
    assert!(matches!(run_experiment(&cfg), Err(ExpError::MissingCheckpoint)));
    let cfg = ExperimentConfig {
        checkpoint: Some("/nonexistent/net.ckpt".into()),
        ..cfg
    };
    assert!(run_experiment(&cfg).is_err());
}

#[test]
fn config_json_round_trip_and_planner_names() {
    let cfg = small(PlannerKind::Qleap);
    let text = serde_json::to_string(&cfg).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    let partial: ExperimentConfig = serde_json::from_str(r#"{"planner": "lber", "pairs": 3}"#).unwrap();
    assert_eq!(partial.planner, PlannerKind::Lber);
    assert_eq!(partial.repeaters, 100);
    assert!(serde_json::from_str::<ExperimentConfig>(r#"{"planner": "astar"}"#).is_err());
}

#[test]
fn rank_curve_examples() {
    let curve = fidelity_rank_curve(&[episode(&[0.7, 0.9])]);
    assert_eq!(curve.len(), 2);
    assert_eq!((curve[0].rank, curve[0].median), (1, 0.9));
    assert_eq!((curve[1].rank, curve[1].median), (2, 0.7));
    // Hand-computed: rank 1 over {0.95, 0.9, 0.8, 0.6}, rank 2 over {0.85, 0.7}.
    let curve = fidelity_rank_curve(&[
        episode(&[0.9, 0.85]),
        episode(&[0.6]),
        episode(&[0.7, 0.95]),
        episode(&[0.8]),
        episode(&[]),
    ]);
    assert_eq!(curve.len(), 2);
    assert!((curve[0].median - 0.85).abs() < 1e-12);
    assert!((curve[0].p25 - 0.75).abs() < 1e-12);
    assert!((curve[0].p75 - 0.9125).abs() < 1e-12);
    assert_eq!(curve[0].episodes, 4);
    assert!((curve[1].median - 0.775).abs() < 1e-12);
    assert_eq!(curve[1].episodes, 2);
}

#[test]
fn rank_curve_is_non_increasing_within_episode() {
    let r = run_experiment(&small(PlannerKind::Ger)).unwrap();
    for m in &r.episodes {
        let c = fidelity_rank_curve(std::slice::from_ref(m));
        assert!(c.windows(2).all(|w| w[0].median >= w[1].median));
    }
}

#[test]
fn percentile_ordering() {
    let v = [0.0, 1.0, 5.0, 9.0, 10.0];
    assert!(percentile(&v, 0.25) <= percentile(&v, 0.5));
    assert!(percentile(&v, 0.5) <= percentile(&v, 0.75));
    assert_eq!(percentile(&v, 0.5), 5.0);
}

#[test]
fn overhead_per_node_counts() {
    let topo = common::chain(4, 1.0);
    let r = overhead_report(
        &OverheadConfig {
            pairs: 3,
            ..OverheadConfig::default()
        },
        Some(&topo),
    )
    .unwrap();
    assert_eq!(r.bits_per_link_per_second, 1_228_800);
    let counts: Vec<u64> = r.nodes.iter().map(|n| n.messages_per_step).collect();
    assert_eq!(counts, vec![6, 12, 12, 6]);
    assert_eq!(r.nodes_csv().lines().count(), 5);
}

#[test]
fn sweep_writes_reports_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let base = ExperimentConfig {
        episodes: 2,
        steps: 30,
        ..small(PlannerKind::Ger)
    };
    let grid = SweepGrid {
        pairs: Some(vec![1, 3]),
        alpha: Some(vec![0.15, 0.25]),
        ..SweepGrid::default()
    };
    let cells = sweep(&base, &grid, dir.path()).unwrap();
    assert_eq!(cells.len(), 4);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    let listed = manifest.as_array().unwrap();
    assert_eq!(listed.len(), 4);
    for (cell, entry) in cells.iter().zip(listed) {
        assert_eq!(entry["seed"], cell.seed);
        assert!(dir.path().join(format!("{}.json", cell.name)).exists());
        assert!(dir.path().join(format!("{}.csv", cell.name)).exists());
    }
}

#[test]
fn single_cell_sweep_equals_run() {
    let dir = tempfile::tempdir().unwrap();
    let base = small(PlannerKind::Lber);
    let grid = SweepGrid {
        pairs: Some(vec![base.pairs]),
        ..SweepGrid::default()
    };
    let cells = sweep(&base, &grid, dir.path()).unwrap();
    assert_eq!(cells.len(), 1);
    let csv = std::fs::read_to_string(dir.path().join(format!("{}.csv", cells[0].name))).unwrap();
    assert_eq!(csv, run_experiment(&base).unwrap().raw_csv());
}

#[test]
fn empty_grid_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let base = small(PlannerKind::Ger);
    assert!(sweep(&base, &SweepGrid::default(), dir.path()).is_err());
    let grid = SweepGrid {
        alpha: Some(vec![]),
        ..SweepGrid::default()
    };
    assert!(sweep(&base, &grid, dir.path()).is_err());
}

#[test]
fn learned_work_per_node_is_bounded_by_pairs() {
    use qroute::policy::{PolicyConfig, PolicyNet};
    use std::sync::Arc;
    let net = Arc::new(PolicyNet::init(PolicyConfig::default(), 0));
    for (n, pairs) in [(10, 1), (30, 1), (30, 3)] {
        let cfg = ExperimentConfig {
            planner: PlannerKind::Learned,
            repeaters: n,
            pairs,
            episodes: 1,
            steps: 20,
            ..ExperimentConfig::default()
        };
        let r = qroute::exp::run_experiment_with_net(&cfg, Arc::clone(&net)).unwrap();
        let ops = r.report.ops.unwrap();
        assert_eq!(ops.max_node_updates_per_cycle, pairs as u64);
        assert_eq!(ops.node_updates, (n * pairs) as u64 * 30);
    }
}
