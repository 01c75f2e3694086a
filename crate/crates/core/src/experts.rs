//! The two expert architectures.
//!
//! The weak expert is a perceptron stack applied to each node's own
//! features. The strong expert is a symmetric-normalized graph convolution
//! network, optionally with a per-layer self transform (`gcn_skip`). Both
//! use relu between layers and a row softmax at the end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Architecture, Graph};
use std::sync::Arc;

use crate::tensor::{SparseMatrix, Tape, Tensor, Var};

/// Layer widths `f_0 → f_1 → … → f_L` plus the expert kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertArch {
    pub kind: Architecture,
    pub dims: Vec<usize>,
}

impl ExpertArch {
    /// `layers` layers with equal hidden width.
    pub fn uniform(kind: Architecture, input: usize, hidden: usize, output: usize, layers: usize) -> Self {
        assert!(layers >= 1);
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(hidden, layers - 1));
        dims.push(output);
        Self { kind, dims }
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `[f_in, f_out]`
    pub weight: Tensor,
    /// `[1, f_out]`
    pub bias: Tensor,
    /// Self transform of the skip variant, `[f_in, f_out]`.
    pub skip: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertModel {
    kind: Architecture,
    layers: Vec<Layer>,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches")
}

impl ExpertModel {
    /// Weights and biases uniform in `±1/sqrt(fan_in)` from a seeded stream.
    pub fn init(arch: &ExpertArch, seed: u64) -> Result<Self> {
        Self::check_arch(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .dims
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let weight = uniform_matrix(&mut rng, w[0], w[1], bound);
                let bias = uniform_matrix(&mut rng, 1, w[1], bound);
                let skip = (arch.kind == Architecture::GcnSkip).then(|| uniform_matrix(&mut rng, w[0], w[1], bound));
                Layer { weight, bias, skip }
            })
            .collect();
        Ok(Self {
            kind: arch.kind,
            layers,
        })
    }

    /// All parameters zero; the output is uniform on every node.
    pub fn zeros(arch: &ExpertArch) -> Result<Self> {
        Self::check_arch(arch)?;
        let layers = arch
            .dims
            .windows(2)
            .map(|w| Layer {
                weight: Tensor::zeros(w[0], w[1]),
                bias: Tensor::zeros(1, w[1]),
                skip: (arch.kind == Architecture::GcnSkip).then(|| Tensor::zeros(w[0], w[1])),
            })
            .collect();
        Ok(Self {
            kind: arch.kind,
            layers,
        })
    }

    pub fn from_layers(kind: Architecture, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("an expert needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            let (fi, fo) = (l.weight.rows(), l.weight.cols());
            if l.bias.shape() != [1, fo] {
                return Err(Error::Config(format!(
                    "layer {i}: bias shape {:?}, expected [1, {fo}]",
                    l.bias.shape()
                )));
            }
            if (kind == Architecture::GcnSkip) != l.skip.is_some() {
                return Err(Error::Config(format!(
                    "layer {i}: skip transform must be present exactly for gcn_skip"
                )));
            }
            if let Some(s) = &l.skip {
                if s.shape() != [fi, fo] {
                    return Err(Error::Config(format!(
                        "layer {i}: skip shape {:?}, expected [{fi}, {fo}]",
                        s.shape()
                    )));
                }
            }
            if i > 0 && layers[i - 1].weight.cols() != fi {
                return Err(Error::Config(format!(
                    "layer {i} expects width {fi} but layer {} produces {}",
                    i - 1,
                    layers[i - 1].weight.cols()
                )));
            }
        }
        Ok(Self { kind, layers })
    }

    fn check_arch(arch: &ExpertArch) -> Result<()> {
        if arch.dims.len() < 2 || arch.dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer dimensions {:?}", arch.dims)));
        }
        Ok(())
    }

    pub fn kind(&self) -> Architecture {
        self.kind
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn arch(&self) -> ExpertArch {
        let mut dims = vec![self.layers[0].weight.rows()];
        dims.extend(self.layers.iter().map(|l| l.weight.cols()));
        ExpertArch { kind: self.kind, dims }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.cols()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [Some(&l.weight), Some(&l.bias), l.skip.as_ref()].into_iter().flatten())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [Some(&mut l.weight), Some(&mut l.bias), l.skip.as_mut()]
                    .into_iter()
                    .flatten()
            })
            .collect()
    }

    /// Registers every parameter on the tape, in [`Self::params`] order.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        Ok(self
            .params()
            .into_iter()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect::<std::result::Result<_, _>>()?)
    }

    /// Gradient-descent step from gradients left on `tape`.
    pub fn descend(&mut self, tape: &Tape, vars: &[Var], lr: f64) {
        for (p, &v) in self.params_mut().into_iter().zip(vars) {
            if let Some(g) = tape.grad(v) {
                for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * d;
                }
            }
        }
    }

    /// Pre-softmax outputs built on `tape` from registered parameters.
    ///
    /// `propagation` is the normalized adjacency and must be present for the
    /// graph kinds.
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        propagation: Option<&Arc<SparseMatrix>>,
    ) -> Result<Var> {
        let width = tape.value(x).cols();
        if width != self.input_dim() {
            return Err(Error::Tensor(crate::tensor::TensorError::Shape {
                op: "expert input",
                left: tape.value(x).shape().to_vec(),
                right: vec![self.input_dim(), self.layers[0].weight.cols()],
            }));
        }
        let mut h = x;
        let mut it = params.iter().copied();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = it.next().expect("weight var");
            let b = it.next().expect("bias var");
            let skip = layer.skip.as_ref().map(|_| it.next().expect("skip var"));
            let mut z = match self.kind {
                Architecture::Weak => tape.matmul(h, w)?,
                Architecture::Gcn | Architecture::GcnSkip => {
                    let p =
                        propagation.ok_or_else(|| Error::Config("graph expert needs a propagation matrix".into()))?;
                    let agg = tape.sparse_matmul(Arc::clone(p), h)?;
                    tape.matmul(agg, w)?
                }
            };
            if let Some(s) = skip {
                let own = tape.matmul(h, s)?;
                z = tape.add(z, own)?;
            }
            z = tape.add_row(z, b)?;
            h = if i == last { z } else { tape.relu(z)? };
        }
        Ok(h)
    }

    /// Class-probability rows built on `tape`.
    pub fn probs_on_tape(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        propagation: Option<&Arc<SparseMatrix>>,
    ) -> Result<Var> {
        let logits = self.logits_on_tape(tape, params, x, propagation)?;
        Ok(tape.softmax_rows(logits)?)
    }

    /// Pre-softmax outputs as plain values.
    pub fn logits(&self, graph: Option<&Graph>, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.register(&mut tape, false)?;
        let x = tape.constant(features.clone())?;
        let prop = match (self.kind, graph) {
            (Architecture::Weak, _) => None,
            (_, Some(g)) => {
                if g.num_nodes() != features.rows() {
                    return Err(Error::Tensor(crate::tensor::TensorError::Shape {
                        op: "gcn_forward",
                        left: vec![g.num_nodes()],
                        right: features.shape().to_vec(),
                    }));
                }
                Some(Arc::new(g.propagation_sparse()))
            }
            (_, None) => return Err(Error::Config("graph expert needs a graph".into())),
        };
        let out = self.logits_on_tape(&mut tape, &params, x, prop.as_ref())?;
        Ok(tape.value(out).clone())
    }

    pub fn predict(&self, graph: &Graph) -> Result<Tensor> {
        match self.kind {
            Architecture::Weak => weak_forward(self, graph.features()),
            _ => gcn_forward(self, graph, graph.features()),
        }
    }
}

fn softmax_rows(mut t: Tensor) -> Tensor {
    let c = t.cols();
    for chunk in t.data_mut().chunks_mut(c) {
        crate::tensor::softmax_in_place(chunk);
    }
    t
}

/// Per-node class probabilities from the node's own features only.
pub fn weak_forward(model: &ExpertModel, features: &Tensor) -> Result<Tensor> {
    if model.kind != Architecture::Weak {
        return Err(Error::Config(format!(
            "weak_forward called on a {} expert",
            model.kind.name()
        )));
    }
    Ok(softmax_rows(model.logits(None, features)?))
}

/// Per-node class probabilities from the graph convolution stack.
pub fn gcn_forward(model: &ExpertModel, graph: &Graph, features: &Tensor) -> Result<Tensor> {
    if model.kind == Architecture::Weak {
        return Err(Error::Config("gcn_forward called on a weak expert".into()));
    }
    Ok(softmax_rows(model.logits(Some(graph), features)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDocument {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip: Option<Vec<f64>>,
}

/// Checkpoint document: kind, layer widths, and row-major parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertDocument {
    pub kind: Architecture,
    pub dims: Vec<usize>,
    pub layers: Vec<LayerDocument>,
}

impl ExpertModel {
    pub fn to_document(&self) -> ExpertDocument {
        let arch = self.arch();
        ExpertDocument {
            kind: self.kind,
            dims: arch.dims,
            layers: self
                .layers
                .iter()
                .map(|l| LayerDocument {
                    weight: l.weight.data().to_vec(),
                    bias: l.bias.data().to_vec(),
                    skip: l.skip.as_ref().map(|s| s.data().to_vec()),
                })
                .collect(),
        }
    }

    pub fn from_document(doc: ExpertDocument) -> Result<Self> {
        if doc.dims.len() != doc.layers.len() + 1 {
            return Err(Error::Config(format!(
                "{} layer entries for dimensions {:?}",
                doc.layers.len(),
                doc.dims
            )));
        }
        let layers = doc
            .layers
            .into_iter()
            .zip(doc.dims.windows(2))
            .map(|(l, w)| -> Result<Layer> {
                Ok(Layer {
                    weight: Tensor::matrix(w[0], w[1], l.weight)?,
                    bias: Tensor::matrix(1, w[1], l.bias)?,
                    skip: l.skip.map(|s| Tensor::matrix(w[0], w[1], s)).transpose()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(doc.kind, layers)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_document()).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }
}
