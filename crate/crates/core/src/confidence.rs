//! Confidence `C = G ∘ D`: a dispersion measure on the simplex followed by
//! a non-decreasing squashing map into `[0, 1]`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{ExpertArch, ExpertModel};
use crate::graph::Architecture;
use crate::simplex;
use crate::tensor::{sigmoid, Tape, Tensor, Var};

/// Relative slack on the `two_level` upper threshold, so that a dispersion
/// equal to `d_max` up to rounding reaches the top level.
pub const LEVEL_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dispersion {
    Variance,
    NegEntropy,
}

impl Dispersion {
    pub fn name(self) -> &'static str {
        match self {
            Dispersion::Variance => "variance",
            Dispersion::NegEntropy => "neg_entropy",
        }
    }

    /// Largest value on the `n`-simplex, attained at the vertices.
    pub fn max_value(self, n: usize) -> f64 {
        match self {
            Dispersion::Variance => 1.0 - 1.0 / n as f64,
            Dispersion::NegEntropy => (n as f64).ln(),
        }
    }

    /// Value without the simplex check.
    pub fn eval_unchecked(self, p: &[f64]) -> f64 {
        match self {
            Dispersion::Variance => simplex::variance(p),
            Dispersion::NegEntropy => simplex::neg_entropy(p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GFunction {
    /// 0 up to and including `tau`, 1 above.
    Step { tau: f64 },
    /// 0 at zero, `beta` strictly between, 1 from `d_max` on.
    TwoLevel { d_max: f64, beta: f64 },
    /// `min(1, slope·x)`
    CappedLinear { slope: f64 },
    /// Perceptron stack over `[variance, neg_entropy]` ending in a sigmoid.
    Learnable { hidden: usize },
}

impl GFunction {
    pub fn name(&self) -> &'static str {
        match self {
            GFunction::Step { .. } => "step",
            GFunction::TwoLevel { .. } => "two_level",
            GFunction::CappedLinear { .. } => "capped_linear",
            GFunction::Learnable { .. } => "learnable",
        }
    }

    pub fn is_fixed(&self) -> bool {
        !matches!(self, GFunction::Learnable { .. })
    }

    /// `g(x)` for the fixed shapes; `None` for the learnable one.
    pub fn eval(&self, x: f64) -> Option<f64> {
        Some(match *self {
            GFunction::Step { tau } => {
                if x > tau {
                    1.0
                } else {
                    0.0
                }
            }
            GFunction::TwoLevel { d_max, beta } => {
                if x <= 0.0 {
                    0.0
                } else if x < d_max * (1.0 - LEVEL_RTOL) {
                    beta
                } else {
                    1.0
                }
            }
            GFunction::CappedLinear { slope } => (slope * x).min(1.0),
            GFunction::Learnable { .. } => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match *self {
            GFunction::Step { tau } if !(tau.is_finite() && tau >= 0.0) => {
                bad(format!("step threshold must be >= 0, got {tau}"))
            }
            GFunction::TwoLevel { d_max, .. } if !(d_max.is_finite() && d_max > 0.0) => {
                bad(format!("two_level d_max must be > 0, got {d_max}"))
            }
            GFunction::TwoLevel { beta, .. } if !(beta > 0.0 && beta < 1.0) => {
                bad(format!("two_level beta must lie in (0, 1), got {beta}"))
            }
            GFunction::CappedLinear { slope } if !(slope.is_finite() && slope > 0.0) => {
                bad(format!("capped_linear slope must be > 0, got {slope}"))
            }
            GFunction::Learnable { hidden: 0 } => bad("learnable gate needs a hidden width of at least 1".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfidenceSpec {
    pub dispersion: Dispersion,
    pub g: GFunction,
}

impl Default for ConfidenceSpec {
    fn default() -> Self {
        Self {
            dispersion: Dispersion::Variance,
            g: GFunction::CappedLinear { slope: 4.0 },
        }
    }
}

impl ConfidenceSpec {
    pub fn new(dispersion: Dispersion, g: GFunction) -> Self {
        Self { dispersion, g }
    }

    pub fn label(&self) -> String {
        format!("{}+{}", self.dispersion.name(), self.g.name())
    }
}

pub fn dispersion(p: &[f64], kind: Dispersion) -> Result<f64> {
    if let Some(msg) = simplex::simplex_violation(p) {
        return Err(Error::Domain(msg));
    }
    Ok(kind.eval_unchecked(p))
}

/// `g(D(p))` for a fixed spec.
pub fn confidence(p: &[f64], spec: &ConfidenceSpec) -> Result<f64> {
    let d = dispersion(p, spec.dispersion)?;
    spec.g
        .eval(d)
        .ok_or_else(|| Error::Config("a learnable confidence needs its gate parameters".into()))
}

/// A confidence spec together with gate parameters when the spec is learnable.
#[derive(Debug, Clone, PartialEq)]
pub struct Confidence {
    spec: ConfidenceSpec,
    gate: Option<ExpertModel>,
}

impl Confidence {
    /// Fixed specs carry no parameters; a learnable spec gets a seeded gate.
    pub fn new(spec: ConfidenceSpec, seed: u64) -> Result<Self> {
        spec.g.validate()?;
        let gate = match spec.g {
            GFunction::Learnable { hidden } => Some(ExpertModel::init(
                &ExpertArch {
                    kind: Architecture::Weak,
                    dims: vec![2, hidden, 1],
                },
                seed,
            )?),
            _ => None,
        };
        Ok(Self { spec, gate })
    }

    pub fn fixed(spec: ConfidenceSpec) -> Result<Self> {
        if !spec.g.is_fixed() {
            return Err(Error::Config("learnable spec needs a seed or gate".into()));
        }
        Self::new(spec, 0)
    }

    /// Learnable confidence with explicit gate parameters (2 inputs, 1 output).
    pub fn with_gate(dispersion: Dispersion, gate: ExpertModel) -> Result<Self> {
        if gate.kind() != Architecture::Weak || gate.input_dim() != 2 || gate.output_dim() != 1 {
            return Err(Error::Config(
                "gate must be a perceptron stack from 2 inputs to 1 output".into(),
            ));
        }
        let hidden = if gate.layers().len() > 1 {
            gate.layers()[0].weight.cols()
        } else {
            1
        };
        Ok(Self {
            spec: ConfidenceSpec::new(dispersion, GFunction::Learnable { hidden }),
            gate: Some(gate),
        })
    }

    pub fn spec(&self) -> &ConfidenceSpec {
        &self.spec
    }

    pub fn gate(&self) -> Option<&ExpertModel> {
        self.gate.as_ref()
    }

    pub fn gate_mut(&mut self) -> Option<&mut ExpertModel> {
        self.gate.as_mut()
    }

    pub fn value(&self, p: &[f64]) -> Result<f64> {
        if let Some(msg) = simplex::simplex_violation(p) {
            return Err(Error::Domain(msg));
        }
        Ok(self.value_unchecked(p))
    }

    fn value_unchecked(&self, p: &[f64]) -> f64 {
        match &self.gate {
            None => self
                .spec
                .g
                .eval(self.spec.dispersion.eval_unchecked(p))
                .expect("fixed g"),
            Some(gate) => {
                let input = Tensor::matrix(1, 2, vec![simplex::variance(p), simplex::neg_entropy(p)]).expect("1x2");
                let z = gate.logits(None, &input).expect("gate input width is 2");
                sigmoid(z.item())
            }
        }
    }

    /// Confidence of every row of a probability matrix.
    pub fn values(&self, probs: &Tensor) -> Result<Vec<f64>> {
        (0..probs.rows()).map(|r| self.value(probs.row(r))).collect()
    }

    /// `[N, 1]` confidence column built on `tape` from probability rows.
    ///
    /// `gate_params` are the registered gate parameters and are ignored for
    /// fixed specs.
    pub fn on_tape(&self, tape: &mut Tape, probs: Var, gate_params: &[Var]) -> Result<Var> {
        let d = match self.spec.dispersion {
            Dispersion::Variance => tape.variance_rows(probs)?,
            Dispersion::NegEntropy => tape.neg_entropy_rows(probs)?,
        };
        Ok(match (self.spec.g, &self.gate) {
            (GFunction::CappedLinear { slope }, _) => {
                let s = tape.scale(d, slope)?;
                tape.min_scalar(s, 1.0)?
            }
            (g @ (GFunction::Step { .. } | GFunction::TwoLevel { .. }), _) => {
                tape.const_map(d, Arc::new(move |x| g.eval(x).expect("fixed g")))?
            }
            (GFunction::Learnable { .. }, Some(gate)) => {
                let var = tape.variance_rows(probs)?;
                let ne = tape.neg_entropy_rows(probs)?;
                let input = tape.concat_cols(var, ne)?;
                let z = gate.logits_on_tape(tape, gate_params, input, None)?;
                tape.sigmoid(z)?
            }
            (GFunction::Learnable { .. }, None) => {
                return Err(Error::Config("learnable confidence without gate parameters".into()))
            }
        })
    }
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Mix flat Dirichlet draws with points on faces, where step-like
    // shapes change value.
    let mut p: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    if rng.random_bool(0.25) {
        let k = rng.random_range(0..n);
        p[k] = 0.0;
        if p.iter().all(|&x| x == 0.0) {
            p[(k + 1) % n] = 1.0;
        }
    }
    let s: f64 = p.iter().sum();
    p.iter().map(|x| x / s).collect()
}

/// Largest `C(λp + (1−λ)p') − max(C(p), C(p'))` over random draws on the
/// `n`-simplex. Non-positive for a quasiconvex confidence.
pub fn quasiconvexity_witness_search(conf: &Confidence, n: usize, trials: usize, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..trials {
        let p = random_simplex(&mut rng, n);
        let q = random_simplex(&mut rng, n);
        let lam: f64 = rng.random();
        let mix: Vec<f64> = p.iter().zip(&q).map(|(a, b)| lam * a + (1.0 - lam) * b).collect();
        let margin = conf.value_unchecked(&mix) - conf.value_unchecked(&p).max(conf.value_unchecked(&q));
        worst = worst.max(margin);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::Layer;
    use proptest::prelude::*;

    fn spec(d: Dispersion, g: GFunction) -> ConfidenceSpec {
        ConfidenceSpec::new(d, g)
    }

    fn fixed_specs() -> Vec<ConfidenceSpec> {
        let gs = [
            GFunction::Step { tau: 0.0 },
            GFunction::Step { tau: 0.05 },
            GFunction::TwoLevel { d_max: 0.08, beta: 0.1 },
            GFunction::CappedLinear { slope: 3.0 },
        ];
        [Dispersion::Variance, Dispersion::NegEntropy]
            .iter()
            .flat_map(|&d| gs.iter().map(move |&g| spec(d, g)))
            .collect()
    }

    #[test]
    fn dispersion_values() {
        assert_eq!(dispersion(&[0.5, 0.5], Dispersion::Variance).unwrap(), 0.0);
        assert!((dispersion(&[0.7, 0.3], Dispersion::Variance).unwrap() - 0.08).abs() < 1e-15);
        assert!((dispersion(&[1.0, 0.0], Dispersion::NegEntropy).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(dispersion(&[0.25; 4], Dispersion::NegEntropy).unwrap(), 0.0);
    }

    #[test]
    fn off_simplex_is_a_domain_error() {
        assert!(matches!(
            dispersion(&[0.7, 0.4], Dispersion::Variance),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            dispersion(&[1.1, -0.1], Dispersion::NegEntropy),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn confidence_examples() {
        let step0 = spec(Dispersion::Variance, GFunction::Step { tau: 0.0 });
        assert_eq!(confidence(&[0.6, 0.4], &step0).unwrap(), 1.0);
        let two = spec(Dispersion::Variance, GFunction::TwoLevel { d_max: 0.08, beta: 0.1 });
        assert_eq!(confidence(&[0.7, 0.3], &two).unwrap(), 1.0);
        assert_eq!(confidence(&[0.6, 0.4], &two).unwrap(), 0.1);
        for s in fixed_specs() {
            assert_eq!(confidence(&[0.5, 0.5], &s).unwrap(), 0.0);
            assert_eq!(confidence(&[1.0 / 3.0; 3], &s).unwrap(), 0.0, "{}", s.label());
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        for g in [
            GFunction::Step { tau: -0.1 },
            GFunction::TwoLevel { d_max: 0.0, beta: 0.5 },
            GFunction::TwoLevel { d_max: 0.1, beta: 1.0 },
            GFunction::CappedLinear { slope: 0.0 },
            GFunction::Learnable { hidden: 0 },
        ] {
            assert!(Confidence::new(spec(Dispersion::Variance, g), 0).is_err(), "{g:?}");
        }
    }

    #[test]
    fn fixed_g_is_monotone_on_a_dense_sweep() {
        for n in [2usize, 3, 5] {
            let top = (n as f64).ln();
            for s in fixed_specs() {
                let mut prev = s.g.eval(0.0).unwrap();
                assert_eq!(prev, 0.0);
                for i in 1..=10_000 {
                    let y = s.g.eval(top * i as f64 / 10_000.0).unwrap();
                    assert!(y >= prev && (0.0..=1.0).contains(&y));
                    prev = y;
                }
            }
        }
    }

    #[test]
    fn variance_capped_linear_is_quasiconvex() {
        let c = Confidence::fixed(spec(Dispersion::Variance, GFunction::CappedLinear { slope: 2.0 })).unwrap();
        for n in [2, 3, 4] {
            assert!(quasiconvexity_witness_search(&c, n, 10_000, 3).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn every_fixed_spec_is_quasiconvex() {
        for s in fixed_specs() {
            let c = Confidence::fixed(s).unwrap();
            assert!(
                quasiconvexity_witness_search(&c, 3, 5000, 17).unwrap() <= 1e-12,
                "{}",
                s.label()
            );
        }
    }

    #[test]
    fn variance_strict_quasiconvexity_at_opposite_vertices() {
        let mid = dispersion(&[0.5, 0.5], Dispersion::Variance).unwrap();
        let ends = dispersion(&[1.0, 0.0], Dispersion::Variance).unwrap();
        assert_eq!(mid, 0.0);
        assert_eq!(ends, 0.5);
    }

    #[test]
    fn learnable_gate_with_decreasing_weights_breaks_quasiconvexity() {
        // sigmoid(-50·variance) peaks at uniform, which sits between vertices.
        let layer = Layer {
            weight: Tensor::matrix(2, 1, vec![-50.0, 0.0]).unwrap(),
            bias: Tensor::zeros(1, 1),
            skip: None,
        };
        let gate = ExpertModel::from_layers(Architecture::Weak, vec![layer]).unwrap();
        let c = Confidence::with_gate(Dispersion::Variance, gate).unwrap();
        assert!(quasiconvexity_witness_search(&c, 2, 2000, 1).unwrap() > 0.1);
    }

    #[test]
    fn learnable_gate_is_not_anchored_at_uniform() {
        let c = Confidence::new(spec(Dispersion::Variance, GFunction::Learnable { hidden: 4 }), 3).unwrap();
        let v = c.value(&[0.5, 0.5]).unwrap();
        assert!(v > 0.0 && v < 1.0);
    }

    #[test]
    fn tape_matches_values() {
        let probs = Tensor::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.4, 0.3, 0.3], vec![1.0 / 3.0; 3]]).unwrap();
        let mut specs = fixed_specs();
        specs.push(spec(Dispersion::NegEntropy, GFunction::Learnable { hidden: 3 }));
        for s in specs {
            let c = Confidence::new(s, 5).unwrap();
            let mut tape = Tape::new();
            let gp = match c.gate() {
                Some(g) => g.register(&mut tape, true).unwrap(),
                None => vec![],
            };
            let p = tape.constant(probs.clone()).unwrap();
            let col = c.on_tape(&mut tape, p, &gp).unwrap();
            let expected = c.values(&probs).unwrap();
            for (a, b) in tape.value(col).data().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-14, "{}", s.label());
            }
        }
    }

    #[test]
    fn spec_json_shape() {
        let s = spec(Dispersion::Variance, GFunction::TwoLevel { d_max: 0.08, beta: 0.1 });
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(
            text,
            r#"{"dispersion":"variance","g":{"kind":"two_level","d_max":0.08,"beta":0.1}}"#
        );
        assert_eq!(serde_json::from_str::<ConfidenceSpec>(&text).unwrap(), s);
    }

    proptest! {
        #[test]
        fn dispersion_is_permutation_invariant(raw in prop::collection::vec(0.0f64..1.0, 2..6), rot in 0usize..6) {
            let s: f64 = raw.iter().sum::<f64>() + 1e-3;
            let p: Vec<f64> = raw.iter().map(|x| (x + 1e-3 / raw.len() as f64) / s).collect();
            let mut q = p.clone();
            q.rotate_left(rot % p.len());
            q.reverse();
            for d in [Dispersion::Variance, Dispersion::NegEntropy] {
                let a = dispersion(&p, d).unwrap();
                let b = dispersion(&q, d).unwrap();
                prop_assert!((a - b).abs() < 1e-14);
                prop_assert!(a >= 0.0);
            }
        }

        #[test]
        fn binary_pairs_share_confidence(p in 0.0f64..=1.0) {
            for s in fixed_specs() {
                let a = confidence(&[p, 1.0 - p], &s).unwrap();
                let b = confidence(&[1.0 - p, p], &s).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
