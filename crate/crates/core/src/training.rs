//! In-turn and joint training of the two experts, expert pretraining, and
//! evaluation.
//!
//! Optimization is full-batch gradient descent. In `mowst_in_turn` mode each
//! round has a weak turn (weak expert and learnable gate move, strong expert
//! frozen) followed by a strong turn. The joint modes update everything in a
//! single turn per round. Every turn stops early once the validation loss has
//! not improved for `patience` epochs and restores the best parameters seen.

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::confidence::{Confidence, ConfidenceSpec};
use crate::error::{Error, Result};
use crate::experts::{ExpertArch, ExpertDocument, ExpertModel};
use crate::graph::{Architecture, Graph, Split};
use crate::mixture::{
    csv_err, csv_float, expert_loss_on_tape, infer_expected, infer_stochastic, mean_weights, mowst_loss_on_tape,
    mowst_star_loss_on_tape, one_hot, MixtureOutput,
};
use crate::simplex::argmax;
use crate::tensor::{SparseMatrix, Tape, Tensor, TensorError, Var};

pub const HIST_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    MowstInTurn,
    MowstJoint,
    MowstStar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pretrain {
    None,
    Weak,
    Strong,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertConfig {
    pub kind: Architecture,
    pub hidden: usize,
    pub layers: usize,
}

impl ExpertConfig {
    pub fn arch(&self, input: usize, classes: usize) -> ExpertArch {
        ExpertArch::uniform(self.kind, input, self.hidden, classes, self.layers)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub rounds: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    /// Overrides `lr` for the weak expert and gate; 0 freezes them.
    pub weak_lr: Option<f64>,
    /// Overrides `lr` for the strong expert; 0 freezes it.
    pub strong_lr: Option<f64>,
    pub seed: u64,
    /// Seed of the stochastic gate used in evaluation.
    pub gate_seed: u64,
    pub pretrain: Pretrain,
    pub pretrain_epochs: usize,
    pub confidence: ConfidenceSpec,
    pub weak: ExpertConfig,
    pub strong: ExpertConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::MowstInTurn,
            rounds: 5,
            max_epochs: 500,
            patience: 20,
            lr: 0.2,
            weak_lr: None,
            strong_lr: None,
            seed: 0,
            gate_seed: 1,
            pretrain: Pretrain::None,
            pretrain_epochs: 100,
            confidence: ConfidenceSpec::default(),
            weak: ExpertConfig {
                kind: Architecture::Weak,
                hidden: 16,
                layers: 2,
            },
            strong: ExpertConfig {
                kind: Architecture::Gcn,
                hidden: 16,
                layers: 2,
            },
        }
    }
}

fn check_rate(name: &str, lr: f64, allow_zero: bool) -> Result<()> {
    let ok = lr.is_finite() && (lr > 0.0 || (allow_zero && lr == 0.0));
    if !ok {
        return Err(Error::Config(format!(
            "{name} must be {}, got {lr}",
            if allow_zero { ">= 0" } else { "> 0" }
        )));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rounds", self.rounds),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        check_rate("lr", self.lr, false)?;
        if let Some(lr) = self.weak_lr {
            check_rate("weak_lr", lr, true)?;
        }
        if let Some(lr) = self.strong_lr {
            check_rate("strong_lr", lr, true)?;
        }
        if self.weak.kind != Architecture::Weak {
            return Err(Error::Config(format!(
                "weak expert must have kind weak, got {}",
                self.weak.kind.name()
            )));
        }
        if self.strong.kind == Architecture::Weak {
            return Err(Error::Config("strong expert must be gcn or gcn_skip".into()));
        }
        for (name, e) in [("weak", &self.weak), ("strong", &self.strong)] {
            if e.hidden == 0 || e.layers == 0 {
                return Err(Error::Config(format!(
                    "{name} expert needs positive hidden width and layer count"
                )));
            }
        }
        self.confidence.g.validate()
    }

    pub fn weak_rate(&self) -> f64 {
        self.weak_lr.unwrap_or(self.lr)
    }

    pub fn strong_rate(&self) -> f64 {
        self.strong_lr.unwrap_or(self.lr)
    }
}

/// Both experts and the confidence function.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub weak: ExpertModel,
    pub strong: ExpertModel,
    pub confidence: Confidence,
}

impl Mixture {
    /// Seeded initialization; weak, strong and gate draw from distinct streams.
    pub fn init(config: &TrainConfig, graph: &Graph) -> Result<Self> {
        let (f, n) = (graph.feature_dim(), graph.num_classes());
        Ok(Self {
            weak: ExpertModel::init(&config.weak.arch(f, n), derive_seed(config.seed, 1))?,
            strong: ExpertModel::init(&config.strong.arch(f, n), derive_seed(config.seed, 2))?,
            confidence: Confidence::new(config.confidence, derive_seed(config.seed, 3))?,
        })
    }

    pub fn output(&self, graph: &Graph) -> Result<MixtureOutput> {
        let weak = self.weak.predict(graph)?;
        let strong = self.strong.predict(graph)?;
        let c = self.confidence.values(&weak)?;
        MixtureOutput::new(weak, strong, c)
    }

    pub fn to_document(&self) -> MixtureDocument {
        MixtureDocument {
            weak: self.weak.to_document(),
            strong: self.strong.to_document(),
            confidence: *self.confidence.spec(),
            gate: self.confidence.gate().map(ExpertModel::to_document),
        }
    }

    pub fn from_document(doc: MixtureDocument) -> Result<Self> {
        let confidence = match doc.gate {
            Some(g) => Confidence::with_gate(doc.confidence.dispersion, ExpertModel::from_document(g)?)?,
            None => Confidence::fixed(doc.confidence)?,
        };
        Ok(Self {
            weak: ExpertModel::from_document(doc.weak)?,
            strong: ExpertModel::from_document(doc.strong)?,
            confidence,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_document())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_document(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Checkpoint of a trained mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureDocument {
    pub weak: ExpertDocument,
    pub strong: ExpertDocument,
    pub confidence: ConfidenceSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<ExpertDocument>,
}

/// Independent seed for sub-stream `stream` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Turn {
    Weak,
    Strong,
    Joint,
}

impl Turn {
    pub fn name(self) -> &'static str {
        match self {
            Turn::Weak => "weak",
            Turn::Strong => "strong",
            Turn::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub round: usize,
    pub turn: Turn,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistSnapshot {
    /// 0 is the snapshot before training.
    pub round: usize,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyRecord {
    pub round: usize,
    pub split: Split,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub split: Split,
    pub mode: &'static str,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub losses: Vec<LossRecord>,
    /// Expected-mode accuracy per split after each round.
    pub accuracy: Vec<AccuracyRecord>,
    /// Confidence histograms over the train split at each round boundary.
    pub histograms: Vec<HistSnapshot>,
    pub metrics: Vec<MetricRow>,
}

impl TrainReport {
    pub fn write_loss_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["round", "turn", "epoch", "train_loss", "val_loss"])
            .map_err(csv_err)?;
        for r in &self.losses {
            w.write_record([
                r.round.to_string(),
                r.turn.name().to_string(),
                r.epoch.to_string(),
                csv_float(r.train_loss),
                csv_float(r.val_loss),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_hist_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["round", "bin_lo", "bin_hi", "count"])
            .map_err(csv_err)?;
        for h in &self.histograms {
            for (b, count) in h.counts.iter().enumerate() {
                let (lo, hi) = bin_edges(b);
                w.write_record([h.round.to_string(), csv_float(lo), csv_float(hi), count.to_string()])
                    .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_metrics_csv<W: Write>(&self, out: W) -> Result<()> {
        write_metrics(out, &self.metrics)
    }

    /// Writes `loss.csv`, `confidence_hist.csv` and `metrics.csv` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_loss_csv(File::create(dir.join("loss.csv"))?)?;
        self.write_hist_csv(File::create(dir.join("confidence_hist.csv"))?)?;
        self.write_metrics_csv(File::create(dir.join("metrics.csv"))?)?;
        Ok(())
    }

    /// Mean confidence of the last snapshot, for quick inspection.
    pub fn final_histogram(&self) -> Option<&HistSnapshot> {
        self.histograms.last()
    }
}

pub fn write_metrics<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["split", "mode", "accuracy"]).map_err(csv_err)?;
    for m in rows {
        w.write_record([m.split.name(), m.mode, &csv_float(m.accuracy)])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn bin_edges(b: usize) -> (f64, f64) {
    (b as f64 / HIST_BINS as f64, (b + 1) as f64 / HIST_BINS as f64)
}

/// Counts of `values` in 20 equal bins over `[0, 1]`; 1 falls in the last bin.
pub fn histogram(values: impl IntoIterator<Item = f64>) -> Vec<usize> {
    let mut counts = vec![0; HIST_BINS];
    for c in values {
        let b = ((c * HIST_BINS as f64).floor() as usize).min(HIST_BINS - 1);
        counts[b] += 1;
    }
    counts
}

/// Constant inputs shared by every epoch.
struct Batch {
    features: Tensor,
    propagation: Arc<SparseMatrix>,
    onehot: Tensor,
    train_weights: Tensor,
    /// Falls back to the train weights when the validation split is empty.
    val_weights: Tensor,
}

impl Batch {
    fn new(graph: &Graph) -> Result<Self> {
        let splits = graph.splits();
        if splits.train.is_empty() {
            return Err(Error::Config("the train split is empty".into()));
        }
        let n = graph.num_nodes();
        let train_weights = mean_weights(n, &splits.train);
        let val_weights = if splits.val.is_empty() {
            train_weights.clone()
        } else {
            mean_weights(n, &splits.val)
        };
        Ok(Self {
            features: graph.features().clone(),
            propagation: Arc::new(graph.propagation_sparse()),
            onehot: one_hot(graph.labels(), graph.num_classes()),
            train_weights,
            val_weights,
        })
    }
}

#[derive(Clone, Copy)]
enum Objective {
    Mowst,
    MowstStar,
}

struct Trainable {
    weak: bool,
    strong: bool,
}

struct Registered {
    weak: Vec<Var>,
    strong: Vec<Var>,
    gate: Vec<Var>,
}

/// One forward pass on a fresh tape; returns the tape, parameter handles,
/// and the train and validation losses.
fn forward(m: &Mixture, batch: &Batch, obj: Objective, t: &Trainable) -> Result<(Tape, Registered, Var, Var)> {
    let mut tape = Tape::new();
    let reg = Registered {
        weak: m.weak.register(&mut tape, t.weak)?,
        strong: m.strong.register(&mut tape, t.strong)?,
        gate: match m.confidence.gate() {
            Some(g) => g.register(&mut tape, t.weak)?,
            None => vec![],
        },
    };
    let x = tape.constant(batch.features.clone())?;
    let p = m.weak.probs_on_tape(&mut tape, &reg.weak, x, None)?;
    let p2 = m
        .strong
        .probs_on_tape(&mut tape, &reg.strong, x, Some(&batch.propagation))?;
    let c = m.confidence.on_tape(&mut tape, p, &reg.gate)?;
    let onehot = tape.constant(batch.onehot.clone())?;
    let wt = tape.constant(batch.train_weights.clone())?;
    let wv = tape.constant(batch.val_weights.clone())?;
    let loss = |tape: &mut Tape, w: Var| match obj {
        Objective::Mowst => mowst_loss_on_tape(tape, p, p2, c, onehot, w),
        Objective::MowstStar => mowst_star_loss_on_tape(tape, p, p2, c, onehot, w),
    };
    let train = loss(&mut tape, wt)?;
    let val = loss(&mut tape, wv)?;
    Ok((tape, reg, train, val))
}

/// Non-finite intermediates during a training pass mean the weights blew up.
fn overflow_as_divergence(e: Error, round: usize, phase: &'static str, epoch: usize) -> Error {
    match e {
        Error::Tensor(TensorError::Domain { .. }) => Error::Diverged { round, phase, epoch },
        other => other,
    }
}

fn run_turn(
    m: &mut Mixture,
    batch: &Batch,
    config: &TrainConfig,
    round: usize,
    turn: Turn,
    obj: Objective,
    report: &mut TrainReport,
) -> Result<()> {
    let t = Trainable {
        weak: turn != Turn::Strong,
        strong: turn != Turn::Weak,
    };
    let mut best = (f64::INFINITY, m.clone());
    let mut stale = 0;
    for epoch in 0..config.max_epochs {
        let (mut tape, reg, train, val) =
            forward(m, batch, obj, &t).map_err(|e| overflow_as_divergence(e, round, turn.name(), epoch))?;
        let (tl, vl) = (tape.value(train).item(), tape.value(val).item());
        if !tl.is_finite() || !vl.is_finite() {
            return Err(Error::Diverged {
                round,
                phase: turn.name(),
                epoch,
            });
        }
        report.losses.push(LossRecord {
            round,
            turn,
            epoch,
            train_loss: tl,
            val_loss: vl,
        });
        if vl < best.0 {
            best = (vl, m.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
        tape.backward(train)?;
        if t.weak {
            m.weak.descend(&tape, &reg.weak, config.weak_rate());
            if let Some(g) = m.confidence.gate_mut() {
                g.descend(&tape, &reg.gate, config.weak_rate());
            }
        }
        if t.strong {
            m.strong.descend(&tape, &reg.strong, config.strong_rate());
        }
        if m.weak
            .params()
            .iter()
            .chain(m.strong.params().iter())
            .any(|p| !p.is_finite())
        {
            return Err(Error::Diverged {
                round,
                phase: turn.name(),
                epoch,
            });
        }
    }
    *m = best.1;
    Ok(())
}

fn train_histogram(m: &Mixture, graph: &Graph, round: usize) -> Result<HistSnapshot> {
    let weak = m.weak.predict(graph)?;
    let values = graph
        .splits()
        .train
        .iter()
        .map(|&v| m.confidence.value(weak.row(v)))
        .collect::<Result<Vec<_>>>()?;
    Ok(HistSnapshot {
        round,
        counts: histogram(values),
    })
}

fn record_accuracy(m: &Mixture, graph: &Graph, round: usize, report: &mut TrainReport) -> Result<()> {
    let out = m.output(graph)?;
    let (_, classes) = infer_expected(&out.weak, &out.strong, &out.confidence)?;
    for split in Split::ALL {
        let nodes = graph.splits().get(split);
        if !nodes.is_empty() {
            report.accuracy.push(AccuracyRecord {
                round,
                split,
                accuracy: accuracy(nodes, &classes, graph.labels()),
            });
        }
    }
    Ok(())
}

/// Trains from a fresh seeded initialization.
pub fn train(config: &TrainConfig, graph: &Graph) -> Result<(Mixture, TrainReport)> {
    config.validate()?;
    let mut m = Mixture::init(config, graph)?;
    if matches!(config.pretrain, Pretrain::Weak | Pretrain::Both) {
        m.weak = fit_expert(m.weak, graph, config.pretrain_epochs, config.weak_rate())?.0;
    }
    if matches!(config.pretrain, Pretrain::Strong | Pretrain::Both) {
        m.strong = fit_expert(m.strong, graph, config.pretrain_epochs, config.strong_rate())?.0;
    }
    train_from(config, graph, m)
}

/// Trains starting from the given models; `config.pretrain` is ignored.
pub fn train_from(config: &TrainConfig, graph: &Graph, mut m: Mixture) -> Result<(Mixture, TrainReport)> {
    config.validate()?;
    let batch = Batch::new(graph)?;
    let mut report = TrainReport::default();
    report.histograms.push(train_histogram(&m, graph, 0)?);
    for round in 1..=config.rounds {
        match config.mode {
            TrainMode::MowstInTurn => {
                run_turn(&mut m, &batch, config, round, Turn::Weak, Objective::Mowst, &mut report)?;
                run_turn(
                    &mut m,
                    &batch,
                    config,
                    round,
                    Turn::Strong,
                    Objective::Mowst,
                    &mut report,
                )?;
            }
            TrainMode::MowstJoint => {
                run_turn(
                    &mut m,
                    &batch,
                    config,
                    round,
                    Turn::Joint,
                    Objective::Mowst,
                    &mut report,
                )?;
            }
            TrainMode::MowstStar => {
                run_turn(
                    &mut m,
                    &batch,
                    config,
                    round,
                    Turn::Joint,
                    Objective::MowstStar,
                    &mut report,
                )?;
            }
        }
        report.histograms.push(train_histogram(&m, graph, round)?);
        record_accuracy(&m, graph, round, &mut report)?;
    }
    for split in Split::ALL {
        if !graph.splits().get(split).is_empty() {
            report
                .metrics
                .extend(evaluate(&m, graph, split, config.gate_seed)?.metric_rows());
        }
    }
    Ok((m, report))
}

/// Plain cross-entropy training of one expert on the train split for a
/// fixed number of epochs. Returns the model and the loss before each step.
pub fn fit_expert(mut model: ExpertModel, graph: &Graph, epochs: usize, lr: f64) -> Result<(ExpertModel, Vec<f64>)> {
    check_rate("lr", lr, true)?;
    let batch = Batch::new(graph)?;
    let prop = (model.kind() != Architecture::Weak).then_some(&batch.propagation);
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut tape = Tape::new();
        let params = model.register(&mut tape, true)?;
        let x = tape.constant(batch.features.clone())?;
        let p = model
            .probs_on_tape(&mut tape, &params, x, prop)
            .map_err(|e| overflow_as_divergence(e, 0, "pretrain", epoch))?;
        let onehot = tape.constant(batch.onehot.clone())?;
        let w = tape.constant(batch.train_weights.clone())?;
        let loss = expert_loss_on_tape(&mut tape, p, onehot, w)?;
        let l = tape.value(loss).item();
        if !l.is_finite() {
            return Err(Error::Diverged {
                round: 0,
                phase: "pretrain",
                epoch,
            });
        }
        losses.push(l);
        tape.backward(loss)?;
        model.descend(&tape, &params, lr);
    }
    Ok((model, losses))
}

/// Standalone baseline for one expert of the mixture: the same seeded
/// initialization as [`Mixture::init`], cross-entropy on the train split,
/// early stopping on validation loss with `patience`, at most
/// `rounds × max_epochs` epochs. `which` must be weak or strong.
pub fn train_baseline(config: &TrainConfig, graph: &Graph, which: Turn) -> Result<ExpertModel> {
    config.validate()?;
    let mut m = Mixture::init(config, graph)?;
    let (mut model, lr) = match which {
        Turn::Weak => (m.weak, config.weak_rate()),
        Turn::Strong => (std::mem::replace(&mut m.strong, m.weak), config.strong_rate()),
        Turn::Joint => return Err(Error::Config("a baseline trains a single expert".into())),
    };
    let batch = Batch::new(graph)?;
    let prop = (model.kind() != Architecture::Weak).then_some(&batch.propagation);
    let mut best = (f64::INFINITY, model.clone());
    let mut stale = 0;
    for epoch in 0..config.rounds * config.max_epochs {
        let mut tape = Tape::new();
        let params = model.register(&mut tape, true)?;
        let x = tape.constant(batch.features.clone())?;
        let p = model
            .probs_on_tape(&mut tape, &params, x, prop)
            .map_err(|e| overflow_as_divergence(e, 0, which.name(), epoch))?;
        let onehot = tape.constant(batch.onehot.clone())?;
        let wt = tape.constant(batch.train_weights.clone())?;
        let wv = tape.constant(batch.val_weights.clone())?;
        let loss = expert_loss_on_tape(&mut tape, p, onehot, wt)?;
        let val = expert_loss_on_tape(&mut tape, p, onehot, wv)?;
        let vl = tape.value(val).item();
        if !vl.is_finite() || !tape.value(loss).item().is_finite() {
            return Err(Error::Diverged {
                round: 0,
                phase: which.name(),
                epoch,
            });
        }
        if vl < best.0 {
            best = (vl, model.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
        tape.backward(loss)?;
        model.descend(&tape, &params, lr);
    }
    Ok(best.1)
}

/// Seeded initialization followed by [`fit_expert`].
pub fn pretrain_expert(arch: &ExpertArch, graph: &Graph, epochs: usize, lr: f64, seed: u64) -> Result<ExpertModel> {
    Ok(fit_expert(ExpertModel::init(arch, seed)?, graph, epochs, lr)?.0)
}

fn accuracy(nodes: &[usize], predicted: &[usize], labels: &[usize]) -> f64 {
    let hits = nodes.iter().filter(|&&v| predicted[v] == labels[v]).count();
    hits as f64 / nodes.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub split: Split,
    pub expected: f64,
    pub stochastic: f64,
    pub weak: f64,
    pub strong: f64,
    /// Confidence histogram over the split.
    pub histogram: Vec<usize>,
    /// Mean confidence over the split.
    pub mean_confidence: f64,
}

impl Evaluation {
    pub fn metric_rows(&self) -> Vec<MetricRow> {
        [
            ("expected", self.expected),
            ("stochastic", self.stochastic),
            ("weak", self.weak),
            ("strong", self.strong),
        ]
        .into_iter()
        .map(|(mode, accuracy)| MetricRow {
            split: self.split,
            mode,
            accuracy,
        })
        .collect()
    }
}

/// Accuracy on `split` under every inference mode. The stochastic gate
/// draws from `gate_seed` over all nodes in node order.
pub fn evaluate(m: &Mixture, graph: &Graph, split: Split, gate_seed: u64) -> Result<Evaluation> {
    let nodes = graph.splits().get(split);
    if nodes.is_empty() {
        return Err(Error::Config(format!("the {} split is empty", split.name())));
    }
    evaluate_output(&m.output(graph)?, graph.labels(), nodes, split, gate_seed)
}

/// [`evaluate`] on precomputed expert outputs.
pub fn evaluate_output(
    out: &MixtureOutput,
    labels: &[usize],
    nodes: &[usize],
    split: Split,
    gate_seed: u64,
) -> Result<Evaluation> {
    let (_, expected) = infer_expected(&out.weak, &out.strong, &out.confidence)?;
    let stochastic: Vec<usize> = infer_stochastic(&out.weak, &out.strong, &out.confidence, gate_seed)?
        .into_iter()
        .map(|k| k.class)
        .collect();
    let weak: Vec<usize> = (0..out.num_nodes()).map(|v| argmax(out.weak.row(v))).collect();
    let strong: Vec<usize> = (0..out.num_nodes()).map(|v| argmax(out.strong.row(v))).collect();
    Ok(Evaluation {
        split,
        expected: accuracy(nodes, &expected, labels),
        stochastic: accuracy(nodes, &stochastic, labels),
        weak: accuracy(nodes, &weak, labels),
        strong: accuracy(nodes, &strong, labels),
        histogram: histogram(nodes.iter().map(|&v| out.confidence[v])),
        mean_confidence: nodes.iter().map(|&v| out.confidence[v]).sum::<f64>() / nodes.len() as f64,
    })
}
