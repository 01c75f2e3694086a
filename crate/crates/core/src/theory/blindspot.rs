//! Checks that a mixture separates the two roots of a blindspot instance
//! although no graph convolution can.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::{ClauseResult, ReportRow};
use crate::confidence::{Confidence, ConfidenceSpec, Dispersion, GFunction};
use crate::error::{Error, Result};
use crate::experts::{ExpertArch, ExpertModel, Layer};
use crate::graph::{Architecture, BlindspotInstance, Graph, Splits};
use crate::mixture::MixtureOutput;
use crate::simplex::argmax;
use crate::tensor::Tensor;
use crate::training::{derive_seed, fit_expert};

/// Hidden width of the random convolution draws and the trained separator.
const HIDDEN: usize = 8;
const WEAK_RESTARTS: u64 = 8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlindspotReport {
    pub k: usize,
    pub draws: usize,
    /// Largest `‖h_u − h_v‖∞` over the convolution draws.
    pub max_root_gap: f64,
    /// Argmax of the trained two-layer weak expert at `(u, v)`.
    pub trained_weak: (usize, usize),
    /// Argmax of the constructed mixture at `(u, v)`.
    pub mixture: (usize, usize),
    pub labels: (usize, usize),
    /// Largest `|mixture − strong|` over nodes other than `u` and `v`.
    pub off_root_deviation: f64,
}

impl BlindspotReport {
    pub fn clauses(&self) -> Vec<ClauseResult> {
        let differs = |p: (usize, usize)| if p.0 != p.1 { 0.0 } else { 1.0 };
        let mismatch = usize::from(self.mixture.0 != self.labels.0) + usize::from(self.mixture.1 != self.labels.1);
        vec![
            ClauseResult::below("convolution_root_gap", self.max_root_gap, 1e-9),
            ClauseResult::at_most("trained_weak_separates", differs(self.trained_weak), 0.0),
            ClauseResult::at_most("mixture_separates", differs(self.mixture), 0.0),
            ClauseResult::at_most("mixture_matches_labels", mismatch as f64, 0.0),
            ClauseResult::at_most("mixture_equals_strong_elsewhere", self.off_root_deviation, 0.0),
        ]
    }

    pub fn passed(&self) -> bool {
        self.clauses().iter().all(|c| c.pass)
    }

    pub fn rows(&self, classes: usize) -> Vec<ReportRow> {
        self.clauses()
            .into_iter()
            .map(|clause| ReportRow {
                case: format!("blindspot_k{}", self.k),
                n: classes,
                alpha: vec![],
                mu: None,
                spec: "variance+step".into(),
                clause,
            })
            .collect()
    }
}

fn sup_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Three-layer ReLU weak expert whose logits vanish exactly everywhere except
/// in narrow bumps around the projections of `x_u` and `x_v`.
///
/// Features are projected onto a random direction `r`; the first two layers
/// build a triangular bump of half-width `ε` around each root's projection,
/// and the last layer sends each bump to that root's label. `ε` is half the
/// smallest distance from a root's projection to any other node's, so the
/// bumps cover no other node. With `G = step(0)` the confidence is then zero
/// off the roots and the mixture reproduces the strong expert there.
pub fn constructed_separator(inst: &BlindspotInstance, seed: u64) -> Result<ExpertModel> {
    let g = &inst.graph;
    let (u, v) = (inst.u(), inst.v());
    let f = g.feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Best of a few random directions by the margin it leaves around u and v.
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for _ in 0..16 {
        let r: Vec<f64> = (0..f).map(|_| StandardNormal.sample(&mut rng)).collect();
        // Projections through the same matmul the expert will run, so the
        // biases below cancel bit for bit at the roots.
        let w = Tensor::matrix(f, 1, r.clone()).expect("shape matches");
        let z = g.features().matmul(&w)?.into_data();
        let margin = (0..z.len())
            .flat_map(|w| [(w, u), (w, v)])
            .filter(|&(w, root)| w != root)
            .map(|(w, root)| (z[w] - z[root]).abs())
            .fold(f64::INFINITY, f64::min);
        if best.as_ref().is_none_or(|b| margin > b.0) {
            best = Some((margin, r, z));
        }
    }
    let (margin, r, z) = best.expect("at least one direction");
    if !(margin > 0.0) {
        return Err(Error::Domain("the roots' features coincide with another node's".into()));
    }
    let eps = 0.5 * margin;

    let mut w1 = vec![0.0; f * 4];
    for (j, &rj) in r.iter().enumerate() {
        w1[j * 4..j * 4 + 4].fill(rj);
    }
    let b1 = vec![-(z[u] - eps), -z[u], -(z[v] - eps), -z[v]];
    let w2 = vec![1.0, 0.0, -2.0, 0.0, 0.0, 1.0, 0.0, -2.0];
    let scale = 5.0 / eps;
    let classes = g.num_classes();
    let mut w3 = vec![0.0; 2 * classes];
    w3[g.labels()[u]] = scale;
    w3[classes + g.labels()[v]] = scale;

    let layer = |rows, cols, w: Vec<f64>, b: Vec<f64>| Layer {
        weight: Tensor::matrix(rows, cols, w).expect("shape matches"),
        bias: Tensor::matrix(1, cols, b).expect("shape matches"),
        skip: None,
    };
    ExpertModel::from_layers(
        Architecture::Weak,
        vec![
            layer(f, 4, w1, b1),
            layer(4, 2, w2, vec![0.0; 2]),
            layer(2, classes, w3, vec![0.0; classes]),
        ],
    )
}

/// Random `K`-layer convolution draws, a trained two-layer weak expert, and a
/// constructed mixture, all on one blindspot instance.
pub fn verify_blindspot(inst: &BlindspotInstance, draws: usize, seed: u64) -> Result<BlindspotReport> {
    inst.validate()?;
    if draws < 20 {
        return Err(Error::Config(format!(
            "at least 20 convolution draws are needed, got {draws}"
        )));
    }
    let g = &inst.graph;
    let (u, v) = (inst.u(), inst.v());
    let (f, classes, k) = (g.feature_dim(), g.num_classes(), inst.k());

    let arch = ExpertArch::uniform(Architecture::Gcn, f, HIDDEN, classes, k);
    let mut strong = None;
    let mut max_root_gap = 0.0f64;
    for d in 0..draws {
        let model = ExpertModel::init(&arch, derive_seed(seed, 2 + d as u64))?;
        let h = model.logits(Some(g), g.features())?;
        max_root_gap = max_root_gap.max(sup_gap(h.row(u), h.row(v)));
        strong.get_or_insert(model);
    }
    let strong = strong.expect("draws >= 20");

    // The weak expert only reads features, so fitting the two roots alone
    // asks exactly whether it can tell them apart.
    let pair = Graph::new(
        classes,
        Tensor::from_rows(&[g.features().row(u).to_vec(), g.features().row(v).to_vec()])?,
        vec![g.labels()[u], g.labels()[v]],
        &[],
        Splits {
            train: vec![0, 1],
            ..Splits::default()
        },
    )?;
    // Two nearby inputs can leave every hidden ReLU dead at initialization,
    // where gradient descent never moves; such a start is redrawn.
    let weak_arch = ExpertArch::uniform(Architecture::Weak, f, HIDDEN, classes, 2);
    let mut trained_weak = (0, 0);
    'restarts: for restart in 0..WEAK_RESTARTS {
        let mut weak = ExpertModel::init(&weak_arch, derive_seed(derive_seed(seed, 1), restart))?;
        for _ in 0..10 {
            weak = fit_expert(weak, &pair, 100, 0.5)?.0;
            let p = weak.predict(g)?;
            trained_weak = (argmax(p.row(u)), argmax(p.row(v)));
            if trained_weak.0 != trained_weak.1 {
                break 'restarts;
            }
        }
    }

    let separator = constructed_separator(inst, derive_seed(seed, 3))?;
    let spec = ConfidenceSpec::new(Dispersion::Variance, GFunction::Step { tau: 0.0 });
    let p = separator.predict(g)?;
    let c = Confidence::fixed(spec)?.values(&p)?;
    let p2 = strong.predict(g)?;
    let mix = MixtureOutput::new(p, p2.clone(), c)?.combined();
    let off_root_deviation = (0..g.num_nodes())
        .filter(|&w| w != u && w != v)
        .map(|w| sup_gap(mix.row(w), p2.row(w)))
        .fold(0.0, f64::max);

    Ok(BlindspotReport {
        k,
        draws,
        max_root_gap,
        trained_weak,
        mixture: (argmax(mix.row(u)), argmax(mix.row(v))),
        labels: (g.labels()[u], g.labels()[v]),
        off_root_deviation,
    })
}
