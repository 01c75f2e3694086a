//! Confidence-weighted mixture losses and the two inference modes.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::{map_range, Exec};
use crate::simplex::{argmax, cross_entropy, simplex_violation};
use crate::tensor::{Tape, Tensor, Var};

/// Per-node outputs of both experts and the gate.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureOutput {
    pub weak: Tensor,
    pub strong: Tensor,
    pub confidence: Vec<f64>,
}

impl MixtureOutput {
    pub fn new(weak: Tensor, strong: Tensor, confidence: Vec<f64>) -> Result<Self> {
        check_rows("weak", &weak)?;
        check_pair(&weak, &strong, &confidence)?;
        check_rows("strong", &strong)?;
        Ok(Self {
            weak,
            strong,
            confidence,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.weak.rows()
    }

    /// `c_v·p_v + (1−c_v)·p'_v`
    pub fn combined(&self) -> Tensor {
        combine(&self.weak, &self.strong, &self.confidence)
    }
}

fn check_rows(name: &str, p: &Tensor) -> Result<()> {
    for r in 0..p.rows() {
        if let Some(msg) = simplex_violation(p.row(r)) {
            return Err(Error::Domain(format!("{name} row {r}: {msg}")));
        }
    }
    Ok(())
}

fn check_pair(p: &Tensor, p2: &Tensor, c: &[f64]) -> Result<()> {
    if p.shape() != p2.shape() || p.rows() != c.len() {
        return Err(Error::Tensor(crate::tensor::TensorError::Shape {
            op: "mixture",
            left: p.shape().to_vec(),
            right: vec![p2.rows(), p2.cols(), c.len()],
        }));
    }
    if let Some((v, x)) = c.iter().enumerate().find(|(_, x)| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Domain(format!("confidence {x} at node {v} is outside [0, 1]")));
    }
    Ok(())
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Config(format!("{} labels for {rows} nodes", labels.len())));
    }
    if let Some((v, y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(Error::Domain(format!(
            "label {y} at node {v} exceeds {classes} classes"
        )));
    }
    Ok(())
}

fn check_all(p: &Tensor, p2: &Tensor, c: &[f64], labels: &[usize]) -> Result<()> {
    check_pair(p, p2, c)?;
    check_rows("weak", p)?;
    check_rows("strong", p2)?;
    check_labels(labels, p.rows(), p.cols())
}

fn combine(p: &Tensor, p2: &Tensor, c: &[f64]) -> Tensor {
    let n = p.cols();
    let mut out = p2.clone();
    for (v, &cv) in c.iter().enumerate() {
        for j in 0..n {
            out.data_mut()[v * n + j] = cv * p.get(v, j) + (1.0 - cv) * p2.get(v, j);
        }
    }
    out
}

/// Mean of `c·CE(p) + (1−c)·CE(p')` over all nodes.
pub fn mowst_loss(p: &Tensor, p2: &Tensor, c: &[f64], labels: &[usize]) -> Result<f64> {
    check_all(p, p2, c, labels)?;
    let total: f64 = (0..p.rows())
        .map(|v| c[v] * cross_entropy(p.row(v), labels[v]) + (1.0 - c[v]) * cross_entropy(p2.row(v), labels[v]))
        .sum();
    Ok(total / p.rows() as f64)
}

/// Mean cross-entropy of the combined prediction `c·p + (1−c)·p'`.
pub fn mowst_star_loss(p: &Tensor, p2: &Tensor, c: &[f64], labels: &[usize]) -> Result<f64> {
    check_all(p, p2, c, labels)?;
    let q = combine(p, p2, c);
    let total: f64 = (0..q.rows()).map(|v| cross_entropy(q.row(v), labels[v])).sum();
    Ok(total / q.rows() as f64)
}

/// Per-node weights `Π_{i<m}(1−C_i)·C_m` with the last confidence fixed at 1.
pub fn multi_expert_weights(confs: &[&[f64]], node: usize) -> Vec<f64> {
    let mut rest = 1.0;
    let mut w = Vec::with_capacity(confs.len() + 1);
    for c in confs {
        w.push(rest * c[node]);
        rest *= 1.0 - c[node];
    }
    w.push(rest);
    w
}

/// Cascade loss over `M` experts: `L_{≥q} = C_q·L_q + (1−C_q)·L_{≥q+1}`,
/// `L_{≥M} = L_M`. Takes `M−1` confidence vectors.
pub fn multi_expert_loss(probs: &[&Tensor], confs: &[&[f64]], labels: &[usize]) -> Result<f64> {
    if probs.len() < 2 {
        return Err(Error::Config(format!("need at least 2 experts, got {}", probs.len())));
    }
    if confs.len() != probs.len() - 1 {
        return Err(Error::Config(format!(
            "{} experts need {} confidence vectors, got {}",
            probs.len(),
            probs.len() - 1,
            confs.len()
        )));
    }
    for (m, p) in probs.iter().enumerate() {
        check_rows(&format!("expert {m}"), p)?;
        if m < confs.len() {
            check_pair(p, probs[m + 1], confs[m])?;
        }
    }
    check_labels(labels, probs[0].rows(), probs[0].cols())?;
    let total: f64 = (0..labels.len())
        .map(|v| {
            let last = probs.len() - 1;
            let mut acc = cross_entropy(probs[last].row(v), labels[v]);
            for q in (0..last).rev() {
                let c = confs[q][v];
                acc = c * cross_entropy(probs[q].row(v), labels[v]) + (1.0 - c) * acc;
            }
            acc
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// One-hot label matrix, used to pick `ln p_y` on the tape.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(labels.len(), classes);
    for (v, &y) in labels.iter().enumerate() {
        t.data_mut()[v * classes + y] = 1.0;
    }
    t
}

/// Column with `1/|nodes|` on the listed nodes and 0 elsewhere.
pub fn mean_weights(num_nodes: usize, nodes: &[usize]) -> Tensor {
    let mut w = vec![0.0; num_nodes];
    for &v in nodes {
        w[v] = 1.0 / nodes.len() as f64;
    }
    Tensor::column(w)
}

/// `[N, 1]` column of `−ln p_y` on the tape.
pub fn cross_entropy_on_tape(tape: &mut Tape, probs: Var, onehot: Var) -> Result<Var> {
    let lp = tape.log(probs)?;
    let picked = tape.mul(lp, onehot)?;
    let s = tape.row_sum(picked)?;
    Ok(tape.scale(s, -1.0)?)
}

fn weighted_mean(tape: &mut Tape, col: Var, weights: Var) -> Result<Var> {
    let w = tape.mul(col, weights)?;
    Ok(tape.sum(w)?)
}

/// Differentiable confidence-weighted loss, averaged with `weights`.
pub fn mowst_loss_on_tape(tape: &mut Tape, p: Var, p2: Var, c: Var, onehot: Var, weights: Var) -> Result<Var> {
    let l1 = cross_entropy_on_tape(tape, p, onehot)?;
    let l2 = cross_entropy_on_tape(tape, p2, onehot)?;
    let a = tape.mul(c, l1)?;
    let oc = tape.one_minus(c)?;
    let b = tape.mul(oc, l2)?;
    let per_node = tape.add(a, b)?;
    weighted_mean(tape, per_node, weights)
}

/// Differentiable cross-entropy of the combined prediction.
pub fn mowst_star_loss_on_tape(tape: &mut Tape, p: Var, p2: Var, c: Var, onehot: Var, weights: Var) -> Result<Var> {
    let a = tape.mul_col(p, c)?;
    let oc = tape.one_minus(c)?;
    let b = tape.mul_col(p2, oc)?;
    let q = tape.add(a, b)?;
    let l = cross_entropy_on_tape(tape, q, onehot)?;
    weighted_mean(tape, l, weights)
}

/// Plain cross-entropy of a single expert, averaged with `weights`.
pub fn expert_loss_on_tape(tape: &mut Tape, p: Var, onehot: Var, weights: Var) -> Result<Var> {
    let l = cross_entropy_on_tape(tape, p, onehot)?;
    weighted_mean(tape, l, weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertChoice {
    Weak,
    Strong,
    Expected,
}

impl ExpertChoice {
    pub fn name(self) -> &'static str {
        match self {
            ExpertChoice::Weak => "weak",
            ExpertChoice::Strong => "strong",
            ExpertChoice::Expected => "expected",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pick {
    pub class: usize,
    pub expert: ExpertChoice,
}

fn stochastic_picks(p: &Tensor, p2: &Tensor, c: &[f64], rng: &mut ChaCha8Rng) -> Vec<Pick> {
    c.iter()
        .enumerate()
        .map(|(v, &cv)| {
            let q: f64 = rng.random();
            if q < cv {
                Pick {
                    class: argmax(p.row(v)),
                    expert: ExpertChoice::Weak,
                }
            } else {
                Pick {
                    class: argmax(p2.row(v)),
                    expert: ExpertChoice::Strong,
                }
            }
        })
        .collect()
}

/// Per node, accept the weak prediction with probability `c_v`, otherwise
/// take the strong one. One uniform draw per node in node order.
pub fn infer_stochastic(p: &Tensor, p2: &Tensor, c: &[f64], seed: u64) -> Result<Vec<Pick>> {
    check_pair(p, p2, c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(stochastic_picks(p, p2, c, &mut rng))
}

/// Combined probabilities and their argmax classes.
pub fn infer_expected(p: &Tensor, p2: &Tensor, c: &[f64]) -> Result<(Tensor, Vec<usize>)> {
    check_pair(p, p2, c)?;
    let q = combine(p, p2, c);
    let classes = (0..q.rows()).map(|v| argmax(q.row(v))).collect();
    Ok((q, classes))
}

/// Mean and standard error, over `trials` seeded passes of stochastic
/// inference, of the per-pass mean cross-entropy of the chosen experts.
///
/// Pass `t` uses stream `t` of the generator seeded with `seed`.
pub fn monte_carlo_loss(
    p: &Tensor,
    p2: &Tensor,
    c: &[f64],
    labels: &[usize],
    trials: usize,
    seed: u64,
    exec: Exec,
) -> Result<(f64, f64)> {
    check_all(p, p2, c, labels)?;
    if trials < 2 {
        return Err(Error::Config("need at least 2 trials".into()));
    }
    let per_trial = map_range(exec, trials, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let picks = stochastic_picks(p, p2, c, &mut rng);
        let s: f64 = picks
            .iter()
            .enumerate()
            .map(|(v, k)| match k.expert {
                ExpertChoice::Weak => cross_entropy(p.row(v), labels[v]),
                _ => cross_entropy(p2.row(v), labels[v]),
            })
            .sum();
        s / labels.len() as f64
    });
    let mean = per_trial.iter().sum::<f64>() / trials as f64;
    let var = per_trial.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (trials - 1) as f64;
    Ok((mean, (var / trials as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRow {
    pub node_id: usize,
    pub expert: ExpertChoice,
    pub confidence: f64,
    pub pred_class: usize,
    pub true_class: usize,
}

pub fn write_predictions<W: Write>(out: W, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["node_id", "expert", "confidence", "pred_class", "true_class"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.node_id.to_string(),
            r.expert.name().to_string(),
            csv_float(r.confidence),
            r.pred_class.to_string(),
            r.true_class.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Float cell for every CSV this crate writes: 12 significant digits.
pub fn csv_float(x: f64) -> String {
    format!("{x:.11e}")
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("csv: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn sample() -> (Tensor, Tensor, Vec<usize>) {
        (
            t(&[&[0.9, 0.1], &[0.2, 0.8], &[0.5, 0.5]]),
            t(&[&[0.6, 0.4], &[0.3, 0.7], &[0.1, 0.9]]),
            vec![0, 1, 1],
        )
    }

    fn mean_ce(p: &Tensor, y: &[usize]) -> f64 {
        (0..p.rows()).map(|v| cross_entropy(p.row(v), y[v])).sum::<f64>() / p.rows() as f64
    }

    #[test]
    fn collapses_to_one_expert() {
        let (p, p2, y) = sample();
        assert_eq!(mowst_loss(&p, &p2, &[0.0; 3], &y).unwrap(), mean_ce(&p2, &y));
        assert_eq!(mowst_loss(&p, &p2, &[1.0; 3], &y).unwrap(), mean_ce(&p, &y));
        assert_eq!(
            mowst_star_loss(&p, &p2, &[0.0; 3], &y).unwrap(),
            mowst_loss(&p, &p2, &[0.0; 3], &y).unwrap()
        );
    }

    #[test]
    fn single_node_hand_values() {
        let p = t(&[&[0.9, 0.1]]);
        let p2 = t(&[&[0.6, 0.4]]);
        let l = mowst_loss(&p, &p2, &[0.5], &[0]).unwrap();
        assert!((l - 0.30809306971190853).abs() < 1e-15);
        let ls = mowst_star_loss(&p, &p2, &[0.5], &[0]).unwrap();
        assert!((ls - 0.2876820724517809).abs() < 1e-15);
        assert!(ls < l);
        let (q, cls) = infer_expected(&p, &p2, &[0.5]).unwrap();
        assert!((q.get(0, 0) - 0.75).abs() < 1e-15);
        assert_eq!(cls, vec![0]);
    }

    #[test]
    fn invalid_inputs() {
        let (p, p2, y) = sample();
        let bad = t(&[&[0.9, 0.2], &[0.2, 0.8], &[0.5, 0.5]]);
        assert!(matches!(mowst_loss(&bad, &p2, &[0.5; 3], &y), Err(Error::Domain(_))));
        assert!(matches!(
            mowst_loss(&p, &p2, &[0.5, 1.5, 0.0], &y),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            mowst_loss(&p, &p2, &[0.5; 3], &[0, 2, 1]),
            Err(Error::Domain(_))
        ));
        assert!(mowst_loss(&p, &p2, &[0.5; 2], &y).is_err());
    }

    #[test]
    fn two_experts_cascade_is_bit_identical() {
        let (p, p2, y) = sample();
        let c = [0.3, 0.9, 0.1];
        assert_eq!(
            multi_expert_loss(&[&p, &p2], &[&c], &y).unwrap(),
            mowst_loss(&p, &p2, &c, &y).unwrap()
        );
    }

    #[test]
    fn vanishing_first_expert() {
        let (p, p2, y) = sample();
        let p3 = t(&[&[0.3, 0.7], &[0.8, 0.2], &[0.45, 0.55]]);
        let c2 = [0.2, 0.4, 0.7];
        let three = multi_expert_loss(&[&p, &p2, &p3], &[&[0.0; 3], &c2], &y).unwrap();
        let two = multi_expert_loss(&[&p2, &p3], &[&c2], &y).unwrap();
        assert!((three - two).abs() < 1e-15);
    }

    #[test]
    fn three_experts_hand_expansion() {
        let (p, p2, y) = sample();
        let p3 = t(&[&[0.3, 0.7], &[0.8, 0.2], &[0.45, 0.55]]);
        let h = [0.5; 3];
        assert_eq!(multi_expert_weights(&[&h, &h], 0), vec![0.5, 0.25, 0.25]);
        let expected = (0..3)
            .map(|v| {
                0.5 * cross_entropy(p.row(v), y[v])
                    + 0.25 * cross_entropy(p2.row(v), y[v])
                    + 0.25 * cross_entropy(p3.row(v), y[v])
            })
            .sum::<f64>()
            / 3.0;
        let got = multi_expert_loss(&[&p, &p2, &p3], &[&h, &h], &y).unwrap();
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn missing_confidence_is_a_config_error() {
        let (p, p2, y) = sample();
        assert!(matches!(
            multi_expert_loss(&[&p, &p2, &p], &[&[0.5; 3]], &y),
            Err(Error::Config(_))
        ));
        assert!(matches!(multi_expert_loss(&[&p], &[], &y), Err(Error::Config(_))));
    }

    #[test]
    fn certain_gates() {
        let (p, p2, _) = sample();
        for pick in infer_stochastic(&p, &p2, &[1.0; 3], 4).unwrap() {
            assert_eq!(pick.expert, ExpertChoice::Weak);
        }
        let picks = infer_stochastic(&p, &p2, &[0.0; 3], 4).unwrap();
        assert!(picks.iter().all(|k| k.expert == ExpertChoice::Strong));
        assert_eq!(picks.iter().map(|k| k.class).collect::<Vec<_>>(), vec![0, 1, 1]);
        let (q, _) = infer_expected(&p, &p2, &[1.0; 3]).unwrap();
        assert_eq!(q, p);
    }

    #[test]
    fn acceptance_frequency() {
        let n = 10_000;
        let p = Tensor::filled(n, 2, 0.5);
        let picks = infer_stochastic(&p, &p, &vec![0.8; n], 11).unwrap();
        let weak = picks.iter().filter(|k| k.expert == ExpertChoice::Weak).count() as f64 / n as f64;
        assert!((weak - 0.8).abs() <= 0.02, "{weak}");
    }

    #[test]
    fn tie_goes_to_lowest_class() {
        let (_, cls) = infer_expected(&t(&[&[1.0, 0.0]]), &t(&[&[0.0, 1.0]]), &[0.5]).unwrap();
        assert_eq!(cls, vec![0]);
    }

    #[test]
    fn monte_carlo_converges_to_expected_loss() {
        let (p, p2, y) = sample();
        let c = [0.3, 0.9, 0.6];
        let exact = mowst_loss(&p, &p2, &c, &y).unwrap();
        let (mean, se) = monte_carlo_loss(&p, &p2, &c, &y, 100_000, 5, Exec::Parallel).unwrap();
        assert!((mean - exact).abs() <= 3.0 * se, "{mean} vs {exact}, se {se}");
        let seq = monte_carlo_loss(&p, &p2, &c, &y, 1000, 5, Exec::Sequential).unwrap();
        let par = monte_carlo_loss(&p, &p2, &c, &y, 1000, 5, Exec::Parallel).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn tape_losses_match_values() {
        let (p, p2, y) = sample();
        let c = vec![0.3, 0.9, 0.6];
        let mut tape = Tape::new();
        let pv = tape.constant(p.clone()).unwrap();
        let p2v = tape.constant(p2.clone()).unwrap();
        let cv = tape.constant(Tensor::column(c.clone())).unwrap();
        let oh = tape.constant(one_hot(&y, 2)).unwrap();
        let w = tape.constant(mean_weights(3, &[0, 1, 2])).unwrap();
        let l = mowst_loss_on_tape(&mut tape, pv, p2v, cv, oh, w).unwrap();
        let ls = mowst_star_loss_on_tape(&mut tape, pv, p2v, cv, oh, w).unwrap();
        assert!((tape.value(l).item() - mowst_loss(&p, &p2, &c, &y).unwrap()).abs() < 1e-14);
        assert!((tape.value(ls).item() - mowst_star_loss(&p, &p2, &c, &y).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn prediction_csv_header() {
        let mut buf = Vec::new();
        let rows = [PredictionRow {
            node_id: 3,
            expert: ExpertChoice::Weak,
            confidence: 0.25,
            pred_class: 1,
            true_class: 0,
        }];
        write_predictions(&mut buf, &rows).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "node_id,expert,confidence,pred_class,true_class\n3,weak,2.50000000000e-1,1,0\n"
        );
    }

    fn prob_row(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn star_loss_never_exceeds_mixture_loss(p in prob_row(3), p2 in prob_row(3), c in 0.0f64..=1.0, y in 0usize..3) {
            let (a, b) = (t(&[&p]), t(&[&p2]));
            let l = mowst_loss(&a, &b, &[c], &[y]).unwrap();
            let ls = mowst_star_loss(&a, &b, &[c], &[y]).unwrap();
            prop_assert!(ls <= l + 1e-12);
            let (q, _) = infer_expected(&a, &b, &[c]).unwrap();
            prop_assert!(simplex_violation(q.row(0)).is_none());
        }

        #[test]
        fn cascade_weights_sum_to_one(cs in prop::collection::vec(0.0f64..=1.0, 1..6)) {
            let cols: Vec<Vec<f64>> = cs.iter().map(|&c| vec![c]).collect();
            let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
            let w = multi_expert_weights(&refs, 0);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
