use serde::{Deserialize, Serialize};

use super::Graph;
use crate::exec::{map_range, Exec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Weak,
    Gcn,
    GcnSkip,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Weak => "weak",
            Architecture::Gcn => "gcn",
            Architecture::GcnSkip => "gcn_skip",
        }
    }
}

/// Average number of nodes within `k` hops (self included) for
/// `k = 0..layers`. `b_0` is always 1.
pub fn khop_sizes(graph: &Graph, layers: usize, exec: Exec) -> Vec<f64> {
    assert!(layers >= 1, "khop_sizes needs at least one layer");
    let n = graph.num_nodes();
    if n == 0 {
        return vec![1.0; layers];
    }
    let per_node: Vec<Vec<usize>> = map_range(exec, n, |v| {
        let mut counts = vec![0usize; layers];
        for (_, d) in graph.ball(v, layers - 1) {
            for c in counts.iter_mut().skip(d) {
                *c += 1;
            }
        }
        counts
    });
    (0..layers)
        .map(|k| per_node.iter().map(|c| c[k] as f64).sum::<f64>() / n as f64)
        .collect()
}

/// Multiply-accumulate count from per-hop sizes `b_0..b_{L-1}`.
///
/// weak: `f²·L`; gcn: `f²·Σ_k b_k`; gcn_skip doubles the gcn transform.
pub fn cost_from_sizes(sizes: &[f64], f: usize, arch: Architecture) -> f64 {
    let f2 = (f * f) as f64;
    match arch {
        Architecture::Weak => f2 * sizes.len() as f64,
        Architecture::Gcn => f2 * sizes.iter().sum::<f64>(),
        Architecture::GcnSkip => 2.0 * f2 * sizes.iter().sum::<f64>(),
    }
}

pub fn cost_estimate(graph: &Graph, f: usize, layers: usize, arch: Architecture) -> f64 {
    cost_from_sizes(&khop_sizes(graph, layers, Exec::Sequential), f, arch)
}
