//! Two-population benchmark where one population carries its label in the
//! node's own features and the other carries it only in the neighborhood.
//!
//! Layout: nodes `[0, n)` form the feature-signal group, nodes `[n, 2n)` the
//! structure-signal group. Labels alternate `0, 1` within each group.
//!
//! * feature group: `x_0 = ±1` by class, `x_1 = +1` marks the group, every
//!   coordinate gets `U(-noise, noise)`. Each node links to three uniformly
//!   random feature-group nodes regardless of class.
//! * structure group: `x_0` is pure noise, `x_1 = −1`, so the features say
//!   nothing about the class. Each node links to three same-class
//!   feature-group nodes and one same-class structure-group node.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, GraphError, Splits};
use crate::tensor::Tensor;

const NUM_CLASSES: usize = 2;
const FEATURE_GROUP_DEGREE: usize = 3;
const STRUCTURE_TO_FEATURE_LINKS: usize = 3;
const STRUCTURE_TO_STRUCTURE_LINKS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecializationParams {
    pub n_per_group: usize,
    pub f: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SpecializationParams {
    fn default() -> Self {
        Self {
            n_per_group: 100,
            f: 8,
            noise: 0.1,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeGroup {
    FeatureSignal,
    StructureSignal,
}

impl NodeGroup {
    pub fn of(node: usize, n_per_group: usize) -> Self {
        if node < n_per_group {
            NodeGroup::FeatureSignal
        } else {
            NodeGroup::StructureSignal
        }
    }
}

fn class_of(index_in_group: usize) -> usize {
    index_in_group % NUM_CLASSES
}

pub fn generate_specialization_graph(p: SpecializationParams) -> Result<Graph, GraphError> {
    if p.n_per_group < 20 {
        return Err(GraphError::Config(format!(
            "n_per_group must be at least 20, got {}",
            p.n_per_group
        )));
    }
    if p.f < 2 {
        return Err(GraphError::Config(format!("f must be at least 2, got {}", p.f)));
    }
    if !(p.noise.is_finite() && p.noise >= 0.0) {
        return Err(GraphError::Config(format!(
            "noise must be finite and non-negative, got {}",
            p.noise
        )));
    }
    let n = p.n_per_group;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let jitter = |rng: &mut ChaCha8Rng| {
        if p.noise == 0.0 {
            0.0
        } else {
            rng.random_range(-p.noise..=p.noise)
        }
    };

    let mut labels = Vec::with_capacity(2 * n);
    let mut feats = Vec::with_capacity(2 * n * p.f);
    for i in 0..n {
        let y = class_of(i);
        labels.push(y);
        for j in 0..p.f {
            let base = match j {
                0 => {
                    if y == 0 {
                        1.0
                    } else {
                        -1.0
                    }
                }
                1 => 1.0,
                _ => 0.0,
            };
            feats.push(base + jitter(&mut rng));
        }
    }
    for i in 0..n {
        labels.push(class_of(i));
        for j in 0..p.f {
            let base = if j == 1 { -1.0 } else { 0.0 };
            feats.push(base + jitter(&mut rng));
        }
    }

    let feature_nodes: Vec<usize> = (0..n).collect();
    let by_class =
        |offset: usize, y: usize| -> Vec<usize> { (0..n).filter(|&i| class_of(i) == y).map(|i| i + offset).collect() };
    let feature_by_class = [by_class(0, 0), by_class(0, 1)];
    let structure_by_class = [by_class(n, 0), by_class(n, 1)];

    let mut edges = Vec::new();
    for a in 0..n {
        for _ in 0..FEATURE_GROUP_DEGREE {
            let b = *feature_nodes.choose(&mut rng).expect("non-empty");
            if b != a {
                edges.push((a, b));
            }
        }
    }
    for i in 0..n {
        let a = n + i;
        let y = class_of(i);
        for _ in 0..STRUCTURE_TO_FEATURE_LINKS {
            edges.push((a, *feature_by_class[y].choose(&mut rng).expect("non-empty")));
        }
        for _ in 0..STRUCTURE_TO_STRUCTURE_LINKS {
            let b = *structure_by_class[y].choose(&mut rng).expect("non-empty");
            if b != a {
                edges.push((a, b));
            }
        }
    }

    // Stratified 50/25/25 over (group, class) strata.
    let mut splits = Splits::default();
    for stratum in [
        &feature_by_class[0],
        &feature_by_class[1],
        &structure_by_class[0],
        &structure_by_class[1],
    ] {
        let mut nodes = stratum.clone();
        nodes.shuffle(&mut rng);
        let n_train = nodes.len() / 2;
        let n_val = nodes.len() / 4;
        splits.train.extend_from_slice(&nodes[..n_train]);
        splits.val.extend_from_slice(&nodes[n_train..n_train + n_val]);
        splits.test.extend_from_slice(&nodes[n_train + n_val..]);
    }
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();

    let features = Tensor::matrix(2 * n, p.f, feats).expect("shape matches");
    Graph::new(NUM_CLASSES, features, labels, &edges, splits)
}
