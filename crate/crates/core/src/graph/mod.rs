//! Undirected node-classification graphs: storage, the JSON interchange
//! document, synthetic generators, and neighborhood statistics.

mod blindspot;
mod cost;
mod io;
mod specialization;

pub use blindspot::{build_blindspot_graph, BlindspotInstance, BlindspotMeta};
pub use cost::{cost_estimate, cost_from_sizes, khop_sizes, Architecture};
pub use io::{load_graph, GraphDocument, SplitsDocument};
pub use specialization::{generate_specialization_graph, NodeGroup, SpecializationParams};

use thiserror::Error;

use crate::tensor::{SparseMatrix, Tensor};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Immutable undirected graph with node features, labels, and splits.
///
/// Adjacency is stored once per direction in CSR form without self-loops;
/// convolutions add the self term analytically.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_classes: usize,
    features: Tensor,
    labels: Vec<usize>,
    offsets: Vec<usize>,
    targets: Vec<usize>,
    splits: Splits,
}

impl Graph {
    /// Validates and builds a graph. Edges are symmetrized and deduplicated.
    pub fn new(
        num_classes: usize,
        features: Tensor,
        labels: Vec<usize>,
        edges: &[(usize, usize)],
        splits: Splits,
    ) -> Result<Self, GraphError> {
        let n = features.rows();
        if features.shape().len() != 2 {
            return Err(GraphError::Validation(format!(
                "features must be a matrix, got shape {:?}",
                features.shape()
            )));
        }
        if num_classes == 0 {
            return Err(GraphError::Validation("num_classes must be positive".into()));
        }
        if labels.len() != n {
            return Err(GraphError::Validation(format!(
                "labels has {} entries for {n} nodes",
                labels.len()
            )));
        }
        if let Some(i) = features.data().iter().position(|x| !x.is_finite()) {
            return Err(GraphError::Validation(format!(
                "features[{}][{}] is not finite",
                i / features.cols().max(1),
                i % features.cols().max(1)
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(GraphError::Validation(format!(
                "labels[{i}] = {y} is out of range for {num_classes} classes"
            )));
        }
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, &(a, b)) in edges.iter().enumerate() {
            if a >= n || b >= n {
                return Err(GraphError::Validation(format!(
                    "edges[{i}] = [{a}, {b}] has an endpoint >= num_nodes {n}"
                )));
            }
            if a == b {
                return Err(GraphError::Validation(format!(
                    "edges[{i}] = [{a}, {b}] is a self-loop"
                )));
            }
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for mut row in adj {
            row.sort_unstable();
            row.dedup();
            targets.extend(row);
            offsets.push(targets.len());
        }
        let mut seen = vec![None; n];
        for split in Split::ALL {
            for (i, &v) in splits.get(split).iter().enumerate() {
                if v >= n {
                    return Err(GraphError::Validation(format!(
                        "splits.{}[{i}] = {v} is out of range for {n} nodes",
                        split.name()
                    )));
                }
                if let Some(prev) = seen[v] {
                    return Err(GraphError::Validation(format!(
                        "node {v} appears in splits.{} and splits.{}",
                        Split::name(prev),
                        split.name()
                    )));
                }
                seen[v] = Some(split);
            }
        }
        Ok(Self {
            num_classes,
            features,
            labels,
            offsets,
            targets,
            splits,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.targets[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.num_nodes()).map(|v| self.degree(v)).collect()
    }

    pub fn num_edges(&self) -> usize {
        self.targets.len() / 2
    }

    /// Each undirected edge once, as `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.num_nodes())
            .flat_map(|a| self.neighbors(a).iter().filter(move |&&b| a < b).map(move |&b| (a, b)))
            .collect()
    }

    /// Symmetric normalization coefficient `1 / sqrt((deg a + 1)(deg b + 1))`.
    pub fn gcn_coeff(&self, a: usize, b: usize) -> f64 {
        1.0 / (((self.degree(a) + 1) * (self.degree(b) + 1)) as f64).sqrt()
    }

    /// Dense propagation matrix over the closed neighborhoods `N(w) ∪ {w}`.
    pub fn propagation_matrix(&self) -> Tensor {
        let n = self.num_nodes();
        let mut m = Tensor::zeros(n, n);
        let data = m.data_mut();
        for a in 0..n {
            data[a * n + a] = self.gcn_coeff(a, a);
            for &b in self.neighbors(a) {
                data[a * n + b] = self.gcn_coeff(a, b);
            }
        }
        m
    }

    /// Sparse form of [`Self::propagation_matrix`].
    pub fn propagation_sparse(&self) -> SparseMatrix {
        let rows = (0..self.num_nodes())
            .map(|a| {
                std::iter::once(a)
                    .chain(self.neighbors(a).iter().copied())
                    .map(|b| (b, self.gcn_coeff(a, b)))
                    .collect()
            })
            .collect();
        SparseMatrix::from_rows(self.num_nodes(), rows).expect("finite coefficients")
    }

    /// Fraction of `v`'s neighbors sharing its label; `None` when isolated.
    pub fn homophily(&self, v: usize) -> Option<f64> {
        let nb = self.neighbors(v);
        if nb.is_empty() {
            return None;
        }
        let same = nb.iter().filter(|&&w| self.labels[w] == self.labels[v]).count();
        Some(same as f64 / nb.len() as f64)
    }

    /// Fraction of edge endpoints (over the given nodes) that share a label.
    pub fn homophily_ratio(&self, nodes: &[usize]) -> f64 {
        let (mut same, mut total) = (0usize, 0usize);
        for &v in nodes {
            for &w in self.neighbors(v) {
                total += 1;
                same += usize::from(self.labels[w] == self.labels[v]);
            }
        }
        if total == 0 {
            0.0
        } else {
            same as f64 / total as f64
        }
    }

    /// Nodes within `hops` of `v` (including `v`), with their distance.
    pub fn ball(&self, v: usize, hops: usize) -> Vec<(usize, usize)> {
        let mut dist = std::collections::HashMap::new();
        dist.insert(v, 0usize);
        let mut frontier = vec![v];
        let mut out = vec![(v, 0)];
        for d in 1..=hops {
            let mut next = Vec::new();
            for &w in &frontier {
                for &x in self.neighbors(w) {
                    if let std::collections::hash_map::Entry::Vacant(e) = dist.entry(x) {
                        e.insert(d);
                        next.push(x);
                        out.push((x, d));
                    }
                }
            }
            frontier = next;
        }
        out
    }

    /// Same graph with different splits.
    pub fn with_splits(&self, splits: Splits) -> Result<Self, GraphError> {
        Graph::new(
            self.num_classes,
            self.features.clone(),
            self.labels.clone(),
            &self.edges(),
            splits,
        )
    }

    /// Same structure with replaced features.
    pub fn with_features(&self, features: Tensor) -> Result<Self, GraphError> {
        if features.rows() != self.num_nodes() {
            return Err(GraphError::Validation(format!(
                "features have {} rows for {} nodes",
                features.rows(),
                self.num_nodes()
            )));
        }
        Graph::new(
            self.num_classes,
            features,
            self.labels.clone(),
            &self.edges(),
            self.splits.clone(),
        )
    }
}
