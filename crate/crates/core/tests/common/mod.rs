#![allow(dead_code)]

use qroute::sim::{DecayModel, SimConfig};
use qroute::topo::{assign_capacities, FiberEdge, PhysicalTopology, RepeaterProfile};

/// Simple graph with unit-free profiles, `qpd` qubits per degree and equal
/// fiber lengths.
pub fn graph(n: usize, edges: &[(usize, usize)], length_km: f64, qpd: u32) -> PhysicalTopology {
    let nodes = vec![
        RepeaterProfile {
            qubit_capacity: 64,
            ..RepeaterProfile::default()
        };
        n
    ];
    let edges = edges
        .iter()
        .map(|&(u, v)| FiberEdge {
            u,
            v,
            length_km,
            capacity: 1,
        })
        .collect();
    let t = PhysicalTopology::new(nodes, edges, None).unwrap();
    assign_capacities(&t, qpd).unwrap()
}

pub fn chain(n: usize, length_km: f64) -> PhysicalTopology {
    let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
    graph(n, &edges, length_km, 2)
}

/// Lossless fibers, no decoherence: every free slot holds a link after one
/// step.
pub fn abundant() -> SimConfig {
    SimConfig {
        alpha: 0.0,
        decay: DecayModel::None,
        ..SimConfig::default()
    }
}

pub fn golden_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares `actual` with the golden file, rewriting it when
/// `UPDATE_GOLDEN=1`.
pub fn check_golden(name: &str, actual: &str) {
    let path = golden_path(name);
    if std::env::var("UPDATE_GOLDEN").as_deref() == Ok("1") || !path.exists() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap();
    assert_eq!(expected, actual, "golden file {name} differs; rerun with UPDATE_GOLDEN=1 if intended");
}
