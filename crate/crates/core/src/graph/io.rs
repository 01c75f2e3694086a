use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Graph, GraphError, Splits};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SplitsDocument {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// The JSON interchange document for a graph.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GraphDocument {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub edges: Vec<[usize; 2]>,
    pub splits: SplitsDocument,
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

impl GraphDocument {
    pub fn parse(text: &str) -> Result<Self, GraphError> {
        serde_json::from_str(text).map_err(|e| GraphError::Parse {
            offset: byte_offset(text, e.line(), e.column()),
            message: e.to_string(),
        })
    }

    pub fn into_graph(self) -> Result<Graph, GraphError> {
        let n = self.num_nodes;
        if self.features.len() != n {
            return Err(GraphError::Validation(format!(
                "features has {} rows, expected num_nodes = {n}",
                self.features.len()
            )));
        }
        if self.labels.len() != n {
            return Err(GraphError::Validation(format!(
                "labels has {} entries, expected num_nodes = {n}",
                self.labels.len()
            )));
        }
        let f = self.features.first().map_or(0, Vec::len);
        if let Some((i, row)) = self.features.iter().enumerate().find(|(_, r)| r.len() != f) {
            return Err(GraphError::Validation(format!(
                "features[{i}] has {} values, expected {f}",
                row.len()
            )));
        }
        let features =
            Tensor::matrix(n, f, self.features.concat()).map_err(|e| GraphError::Validation(e.to_string()))?;
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        Graph::new(
            self.num_classes,
            features,
            self.labels,
            &edges,
            Splits {
                train: self.splits.train,
                val: self.splits.val,
                test: self.splits.test,
            },
        )
    }

    pub fn from_graph(g: &Graph) -> Self {
        Self {
            num_nodes: g.num_nodes(),
            num_classes: g.num_classes(),
            features: g.features().to_rows(),
            labels: g.labels().to_vec(),
            edges: g.edges().into_iter().map(|(a, b)| [a, b]).collect(),
            splits: SplitsDocument {
                train: g.splits().train.clone(),
                val: g.splits().val.clone(),
                test: g.splits().test.clone(),
            },
        }
    }
}

impl Graph {
    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        GraphDocument::parse(text)?.into_graph()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&GraphDocument::from_graph(self)).expect("graph document serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GraphError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<Graph, GraphError> {
    let text = std::fs::read_to_string(path)?;
    Graph::from_json(&text)
}
