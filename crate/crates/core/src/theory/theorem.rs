//! Clause-by-clause checks of where the per-group minimizer lands, with
//! tolerances derived from the grid itself.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use super::{
    binary_bounds, binary_level_points, clamp_free_level, group_min, level_set_dispersion, GroupMin, GroupProblem,
    SimplexGrid,
};
use crate::confidence::{ConfidenceSpec, Dispersion, GFunction};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::mixture::{csv_err, csv_float};
use crate::simplex::alpha_cross_entropy;

/// Absolute slack for comparisons that are exact up to rounding.
const FLOAT_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseKind {
    /// `Δ(α) > μ`
    WeakWorse,
    /// `Δ(α) = μ`
    Tie,
    /// `Δ(α) < μ`
    WeakBetter,
}

impl CaseKind {
    pub fn label(self) -> &'static str {
        match self {
            CaseKind::WeakWorse => "case1",
            CaseKind::Tie => "case2",
            CaseKind::WeakBetter => "case3",
        }
    }
}

pub fn classify(problem: &GroupProblem) -> CaseKind {
    let d = problem.delta();
    if d > problem.mu {
        CaseKind::WeakWorse
    } else if d == problem.mu {
        CaseKind::Tie
    } else {
        CaseKind::WeakBetter
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClauseResult {
    pub clause: &'static str,
    pub measured: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl ClauseResult {
    /// Passes when `measured ≤ tolerance`.
    pub fn at_most(clause: &'static str, measured: f64, tolerance: f64) -> Self {
        Self {
            clause,
            measured,
            tolerance,
            pass: measured <= tolerance,
        }
    }

    /// Passes when `measured < tolerance`.
    pub fn below(clause: &'static str, measured: f64, tolerance: f64) -> Self {
        Self {
            clause,
            measured,
            tolerance,
            pass: measured < tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseReport {
    pub case: String,
    pub alpha: Vec<f64>,
    pub mu: f64,
    pub spec: ConfidenceSpec,
    pub minimizer: Vec<f64>,
    pub objective: f64,
    pub clauses: Vec<ClauseResult>,
}

impl CaseReport {
    fn new(case: &str, problem: &GroupProblem, min: &GroupMin, clauses: Vec<ClauseResult>) -> Self {
        Self {
            case: case.to_string(),
            alpha: problem.alpha.clone(),
            mu: problem.mu,
            spec: problem.spec,
            minimizer: min.point.clone(),
            objective: min.value,
            clauses,
        }
    }

    pub fn passed(&self) -> bool {
        self.clauses.iter().all(|c| c.pass)
    }

    pub fn clause(&self, name: &str) -> Option<&ClauseResult> {
        self.clauses.iter().find(|c| c.clause == name)
    }
}

fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Zero when `p` is itself a grid point, one spacing otherwise.
fn snap_tolerance(grid: &SimplexGrid, p: &[f64]) -> f64 {
    if grid.point(grid.nearest(p)) == p {
        0.0
    } else {
        grid.spacing()
    }
}

/// Runs the clauses that apply to the problem's case.
///
/// * case 1: the minimizer is uniform with confidence and objective zero.
/// * case 2: the minimizer is `α` or uniform with objective zero.
/// * case 3: `L̂_α(p*) < μ`, `C(α) ≤ C(p*)`, and `C(p*)` is at most `G` of
///   the largest dispersion on the level set `L̂_α = μ`.
///
/// Tolerances come from the grid: the distance from `α` to its nearest grid
/// point for the lower bound, and the dispersion jump across the level set
/// for the upper bound.
///
/// Case 3 only holds for the clamped objective while `μ` stays below
/// [`clamp_free_level`]; above it a vertex can win with full confidence.
pub fn verify_theorem_case(problem: &GroupProblem, grid: &SimplexGrid, exec: Exec) -> Result<CaseReport> {
    let min = group_min(problem, grid, exec)?;
    let n = problem.n();
    let uniform = vec![1.0 / n as f64; n];
    let case = classify(problem);
    let clauses = match case {
        CaseKind::WeakWorse => vec![
            ClauseResult::at_most(
                "minimizer_uniform",
                sup_dist(&min.point, &uniform),
                snap_tolerance(grid, &uniform),
            ),
            ClauseResult::at_most("confidence_zero", min.confidence, 0.0),
            ClauseResult::at_most("objective_zero", min.value.abs(), 0.0),
        ],
        CaseKind::Tie => {
            let d = sup_dist(&min.point, &problem.alpha).min(sup_dist(&min.point, &uniform));
            let tol = snap_tolerance(grid, &problem.alpha).min(snap_tolerance(grid, &uniform));
            vec![
                ClauseResult::at_most("minimizer_alpha_or_uniform", d, tol),
                ClauseResult::at_most("objective_zero", min.value.abs(), 0.0),
            ]
        }
        CaseKind::WeakBetter => case3_clauses(problem, grid, &min, exec),
    };
    Ok(CaseReport::new(case.label(), problem, &min, clauses))
}

fn case3_clauses(problem: &GroupProblem, grid: &SimplexGrid, min: &GroupMin, exec: Exec) -> Vec<ClauseResult> {
    let gap = problem.mu - problem.delta();
    let mut out = vec![ClauseResult::below("strict_sublevel", min.loss - problem.mu, 0.0)];

    // obj(p*) ≤ obj(ĝ) and obj(p*) ≥ C(p*)(Δ − μ), so
    // C(p*) ≥ C(α) − (obj(ĝ) − obj(α))⁺ / (μ − Δ).
    let alpha = &problem.alpha;
    let near = grid.point(grid.nearest(alpha));
    let slack = (problem.objective(near) - problem.objective(alpha)).max(0.0);
    out.push(ClauseResult::at_most(
        "lower_confidence",
        problem.confidence(alpha) - min.confidence,
        slack / gap + FLOAT_SLACK,
    ));

    let g = &problem.spec.g;
    match level_set_dispersion(alpha, problem.mu, problem.spec.dispersion, grid, exec) {
        Some((d_max, jump)) => {
            let at = g.eval(d_max).expect("fixed g");
            let above = g.eval(d_max + jump).expect("fixed g");
            out.push(ClauseResult::at_most(
                "upper_confidence",
                min.confidence - at,
                above - at + FLOAT_SLACK,
            ));
        }
        None => out.push(ClauseResult::at_most("upper_confidence", f64::INFINITY, 0.0)),
    }
    out
}

/// With `G = step(0)` and `Δ < μ` the minimizer is `α` itself.
pub fn verify_step_tightness(alpha: &[f64], mu: f64, grid: &SimplexGrid, exec: Exec) -> Result<CaseReport> {
    let spec = ConfidenceSpec::new(Dispersion::Variance, GFunction::Step { tau: 0.0 });
    let problem = GroupProblem::new(alpha.to_vec(), mu, spec)?;
    if classify(&problem) != CaseKind::WeakBetter {
        return Err(Error::Config(format!(
            "step tightness needs Δ < μ, got Δ = {} and μ = {mu}",
            problem.delta()
        )));
    }
    let min = group_min(&problem, grid, exec)?;
    let clauses = vec![ClauseResult::at_most(
        "minimizer_alpha",
        sup_dist(&min.point, alpha),
        snap_tolerance(grid, alpha),
    )];
    Ok(CaseReport::new("tight_step", &problem, &min, clauses))
}

/// Two-level confidence whose threshold is the largest dispersion on the
/// level set `L̂_α = μ − η`, for binary `α`.
///
/// With `β < η/(μ − Δ)` the minimizer falls in the band `μ − η ≤ L̂_α < μ`.
/// Fails with a configuration error when `μ − η ≤ Δ`, since the inner level
/// set is then empty.
pub fn verify_tightness(
    alpha: &[f64],
    mu: f64,
    eta: f64,
    beta: f64,
    dispersion: Dispersion,
    grid: &SimplexGrid,
    exec: Exec,
) -> Result<CaseReport> {
    if alpha.len() != 2 {
        return Err(Error::Config("the two-level tightness check is binary only".into()));
    }
    if !(eta > 0.0) {
        return Err(Error::Config(format!("eta must be positive, got {eta}")));
    }
    let (l, r) = binary_level_points(alpha[0], mu - eta)?;
    let d_max = [l, r]
        .iter()
        .map(|&x| dispersion.eval_unchecked(&[x, 1.0 - x]))
        .fold(0.0, f64::max);
    let spec = ConfidenceSpec::new(dispersion, GFunction::TwoLevel { d_max, beta });
    let problem = GroupProblem::new(alpha.to_vec(), mu, spec)?;
    let min = group_min(&problem, grid, exec)?;

    // One grid step can move the loss by at most this much around p*.
    let step = grid
        .neighbors(min.index)
        .into_iter()
        .map(|j| (alpha_cross_entropy(grid.point(j), alpha) - min.loss).abs())
        .fold(0.0, f64::max);
    let clauses = vec![
        ClauseResult::below("beta_bound", beta, eta / (mu - problem.delta())),
        ClauseResult::at_most("band_lower", (mu - eta) - min.loss, step),
        ClauseResult::below("band_upper", min.loss - mu, 0.0),
    ];
    Ok(CaseReport::new("tight_level", &problem, &min, clauses))
}

/// First coordinate of the binary minimizer lies in `[α₁, L̂₊⁻¹(μ)]`.
pub fn verify_corollary(problem: &GroupProblem, grid: &SimplexGrid, exec: Exec) -> Result<CaseReport> {
    if problem.n() != 2 {
        return Err(Error::Config("the binary window applies to n = 2 only".into()));
    }
    let a1 = problem.alpha[0];
    let w = binary_bounds(a1, problem.mu)?;
    let min = group_min(problem, grid, exec)?;
    let p1 = min.point[0];
    let clauses = vec![
        ClauseResult::below("bisection_residual", w.residual, 1e-9),
        ClauseResult::at_most("window_lower", w.lower - p1, snap_tolerance(grid, &problem.alpha)),
        ClauseResult::at_most("window_upper", p1 - w.upper, grid.spacing()),
    ];
    Ok(CaseReport::new("corollary", problem, &min, clauses))
}

/// Normalized exponential draws, kept away from uniform and from the faces.
pub fn random_alpha(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let u = 1.0 / n as f64;
    loop {
        let e: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let s: f64 = e.iter().sum();
        let a: Vec<f64> = e.iter().map(|x| x / s).collect();
        let far = a.iter().any(|x| (x - u).abs() >= 1e-3);
        if far && a.iter().all(|&x| x >= 0.02) {
            return a;
        }
    }
}

/// Step at zero, a random two-level, or a random capped linear, by `i % 3`.
fn rotating_spec(rng: &mut impl Rng, i: usize, n: usize) -> ConfidenceSpec {
    let dispersion = if (i / 3).is_multiple_of(2) {
        Dispersion::Variance
    } else {
        Dispersion::NegEntropy
    };
    let g = match i % 3 {
        0 => GFunction::Step { tau: 0.0 },
        1 => GFunction::TwoLevel {
            d_max: rng.random_range(0.05..0.8) * dispersion.max_value(n),
            beta: rng.random_range(0.05..0.95),
        },
        _ => GFunction::CappedLinear {
            slope: rng.random_range(0.5..10.0),
        },
    };
    ConfidenceSpec::new(dispersion, g)
}

/// A problem of the requested case. Case 2 snaps `α` onto the grid so that
/// the tie is exact.
pub fn random_problem(
    rng: &mut impl Rng,
    n: usize,
    case: CaseKind,
    spec: ConfidenceSpec,
    grid: &SimplexGrid,
) -> Result<GroupProblem> {
    loop {
        let mut alpha = random_alpha(rng, n);
        let d = alpha_cross_entropy(&alpha, &alpha);
        let mu = match case {
            CaseKind::WeakWorse => {
                if d < 0.06 {
                    continue;
                }
                rng.random_range(0.0..d - 0.05)
            }
            CaseKind::Tie => {
                alpha = grid.point(grid.nearest(&alpha)).to_vec();
                let u = 1.0 / n as f64;
                if alpha.iter().all(|&x| x == u) || alpha.iter().any(|&x| x <= 0.0) {
                    continue;
                }
                alpha_cross_entropy(&alpha, &alpha)
            }
            CaseKind::WeakBetter => {
                let mu = d + rng.random_range(0.05..0.6);
                if mu > clamp_free_level(&alpha) - 0.05 {
                    continue;
                }
                mu
            }
        };
        return GroupProblem::new(alpha, mu, spec);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub seed: u64,
    pub binary: usize,
    pub binary_resolution: usize,
    pub ternary: usize,
    pub ternary_resolution: usize,
    pub step_tightness: usize,
    pub level_tightness: usize,
    pub eta: f64,
    pub tightness_resolution: usize,
    pub corollary: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            binary: 200,
            binary_resolution: 2000,
            ternary: 20,
            ternary_resolution: 300,
            step_tightness: 50,
            level_tightness: 20,
            eta: 0.05,
            tightness_resolution: 5000,
            corollary: 50,
        }
    }
}

const CASES: [CaseKind; 3] = [CaseKind::WeakWorse, CaseKind::Tie, CaseKind::WeakBetter];

/// Every randomized check in one pass, each family from its own stream.
pub fn run_suite(config: &SuiteConfig, exec: Exec) -> Result<Vec<CaseReport>> {
    let mut out = Vec::new();
    let stream = |k: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(k);
        rng
    };

    for (k, n, count, m) in [
        (1, 2, config.binary, config.binary_resolution),
        (2, 3, config.ternary, config.ternary_resolution),
    ] {
        if count == 0 {
            continue;
        }
        let grid = SimplexGrid::new(n, m)?;
        let mut rng = stream(k);
        for i in 0..count {
            // Cases cycle slower than specs so every pairing occurs.
            let case = CASES[(i / 3) % 3];
            let spec = rotating_spec(&mut rng, i, n);
            let problem = random_problem(&mut rng, n, case, spec, &grid)?;
            out.push(verify_theorem_case(&problem, &grid, exec)?);
        }
    }

    let grid = SimplexGrid::new(2, config.tightness_resolution)?;
    let mut rng = stream(3);
    for _ in 0..config.step_tightness {
        let a = random_alpha(&mut rng, 2);
        let alpha = grid.point(grid.nearest(&a)).to_vec();
        let mu = alpha_cross_entropy(&alpha, &alpha) + rng.random_range(0.05..0.6);
        out.push(verify_step_tightness(&alpha, mu, &grid, exec)?);
    }

    let mut rng = stream(4);
    for i in 0..config.level_tightness {
        // Keeps the band wide enough on the grid: for extreme α or large
        // μ − Δ it shrinks to 1 − p₁ below the spacing.
        let a1 = rng.random_range(0.6..0.9);
        let alpha = vec![a1, 1.0 - a1];
        let d = alpha_cross_entropy(&alpha, &alpha);
        let mu = d + config.eta + rng.random_range(0.05..0.25);
        let beta = rng.random_range(0.1..0.9) * config.eta / (mu - d);
        let dispersion = if i % 2 == 0 {
            Dispersion::Variance
        } else {
            Dispersion::NegEntropy
        };
        out.push(verify_tightness(&alpha, mu, config.eta, beta, dispersion, &grid, exec)?);
    }

    let grid = SimplexGrid::new(2, config.binary_resolution)?;
    let mut rng = stream(5);
    for i in 0..config.corollary {
        let (alpha, mu) = loop {
            let a = random_alpha(&mut rng, 2);
            let hi = a[0].max(a[1]);
            let alpha = grid.point(grid.nearest(&[hi, 1.0 - hi])).to_vec();
            let mu = alpha_cross_entropy(&alpha, &alpha) + rng.random_range(0.01..0.6);
            if mu <= clamp_free_level(&alpha) - 0.05 {
                break (alpha, mu);
            }
        };
        let spec = rotating_spec(&mut rng, i, 2);
        out.push(verify_corollary(&GroupProblem::new(alpha, mu, spec)?, &grid, exec)?);
    }
    Ok(out)
}

/// One line of the verification report. `alpha` and `mu` are empty for
/// checks that have no group problem behind them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub case: String,
    pub n: usize,
    pub alpha: Vec<f64>,
    pub mu: Option<f64>,
    pub spec: String,
    pub clause: ClauseResult,
}

impl CaseReport {
    pub fn rows(&self) -> Vec<ReportRow> {
        self.clauses
            .iter()
            .map(|c| ReportRow {
                case: self.case.clone(),
                n: self.alpha.len(),
                alpha: self.alpha.clone(),
                mu: Some(self.mu),
                spec: self.spec.label(),
                clause: c.clone(),
            })
            .collect()
    }
}

/// `case,n,alpha,mu,spec,clause,measured,tolerance,pass` with floats at 12
/// significant digits and `alpha` joined by `;`.
pub fn write_report<W: Write>(out: W, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "case",
        "n",
        "alpha",
        "mu",
        "spec",
        "clause",
        "measured",
        "tolerance",
        "pass",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.case.clone(),
            r.n.to_string(),
            r.alpha.iter().map(|&a| csv_float(a)).collect::<Vec<_>>().join(";"),
            r.mu.map(csv_float).unwrap_or_default(),
            r.spec.clone(),
            r.clause.clause.to_string(),
            csv_float(r.clause.measured),
            csv_float(r.clause.tolerance),
            r.clause.pass.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::theory::delta;

    fn small_suite() -> SuiteConfig {
        SuiteConfig {
            binary: 30,
            ternary: 3,
            ternary_resolution: 60,
            step_tightness: 5,
            level_tightness: 4,
            corollary: 6,
            ..SuiteConfig::default()
        }
    }

    #[test]
    fn classification() {
        let s = ConfidenceSpec::default();
        let d = delta(&[0.7, 0.3]).unwrap();
        let p = |mu| GroupProblem::new(vec![0.7, 0.3], mu, s).unwrap();
        assert_eq!(classify(&p(0.5)), CaseKind::WeakWorse);
        assert_eq!(classify(&p(d)), CaseKind::Tie);
        assert_eq!(classify(&p(0.7)), CaseKind::WeakBetter);
    }

    #[test]
    fn ternary_two_level_case3() {
        let grid = SimplexGrid::new(3, 300).unwrap();
        let spec = ConfidenceSpec::new(Dispersion::Variance, GFunction::TwoLevel { d_max: 0.08, beta: 0.3 });
        let p = GroupProblem::new(vec![0.6, 0.3, 0.1], 1.2, spec).unwrap();
        let r = verify_theorem_case(&p, &grid, Exec::Parallel).unwrap();
        assert_eq!(r.case, "case3");
        assert_eq!(r.clauses.len(), 3);
        assert!(r.passed(), "{r:#?}");
    }

    #[test]
    fn small_suite_passes_and_covers_every_case() {
        let reports = run_suite(&small_suite(), Exec::Parallel).unwrap();
        for r in &reports {
            assert!(r.passed(), "{r:#?}");
        }
        for case in ["case1", "case2", "case3", "tight_step", "tight_level", "corollary"] {
            assert!(reports.iter().any(|r| r.case == case), "{case} missing");
        }
    }

    #[test]
    fn suite_is_deterministic_across_executors() {
        let cfg = small_suite();
        assert_eq!(
            run_suite(&cfg, Exec::Sequential).unwrap(),
            run_suite(&cfg, Exec::Parallel).unwrap()
        );
    }

    #[test]
    fn spec_tightness_example() {
        let grid = SimplexGrid::new(2, 5000).unwrap();
        let r = verify_tightness(&[0.9, 0.1], 0.6, 0.05, 0.1, Dispersion::Variance, &grid, Exec::Parallel).unwrap();
        assert!(r.passed(), "{r:#?}");
        let bound = r.clause("beta_bound").unwrap().tolerance;
        assert!((bound - 0.18187305681577115).abs() < 1e-12);
        let l = alpha_cross_entropy(&r.minimizer, &[0.9, 0.1]);
        assert!((0.55 - 1e-3..0.6).contains(&l), "{l}");
    }

    #[test]
    fn tightness_band_closes_on_alpha() {
        let grid = SimplexGrid::new(2, 5000).unwrap();
        let (alpha, mu) = ([0.9, 0.1], 0.6);
        let gap = mu - delta(&alpha).unwrap();
        let mut last = f64::INFINITY;
        for frac in [0.2, 0.5, 0.8, 0.95, 0.99] {
            let eta = frac * gap;
            let beta = 0.5 * eta / gap;
            let r = verify_tightness(&alpha, mu, eta, beta, Dispersion::Variance, &grid, Exec::Parallel).unwrap();
            assert!(r.passed(), "{r:#?}");
            let d = sup_dist(&r.minimizer, &alpha);
            assert!(d <= last, "frac {frac}: {d} > {last}");
            last = d;
        }
        // The inner level set sits about sqrt(2·α₁α₂·0.01·gap) ≈ 0.022 from α.
        assert!(last < 0.03, "{last}");
    }

    #[test]
    fn large_beta_leaves_the_band() {
        let grid = SimplexGrid::new(2, 5000).unwrap();
        let r = verify_tightness(&[0.9, 0.1], 0.6, 0.05, 0.9, Dispersion::Variance, &grid, Exec::Parallel).unwrap();
        assert!(!r.clause("beta_bound").unwrap().pass);
        assert!(!r.clause("band_lower").unwrap().pass, "{r:#?}");
    }

    #[test]
    fn empty_inner_level_set_is_a_config_error() {
        let grid = SimplexGrid::new(2, 100).unwrap();
        let r = verify_tightness(
            &[0.9, 0.1],
            0.35,
            0.05,
            0.1,
            Dispersion::Variance,
            &grid,
            Exec::Sequential,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn corollary_example() {
        let grid = SimplexGrid::new(2, 2000).unwrap();
        let spec = ConfidenceSpec::new(Dispersion::Variance, GFunction::Step { tau: 0.0 });
        let r = verify_corollary(
            &GroupProblem::new(vec![0.9, 0.1], 0.6, spec).unwrap(),
            &grid,
            Exec::Parallel,
        )
        .unwrap();
        assert!(r.passed());
        assert_eq!(r.minimizer[0], 0.9);
    }

    #[test]
    fn report_csv_layout() {
        let grid = SimplexGrid::new(2, 200).unwrap();
        let spec = ConfidenceSpec::new(Dispersion::Variance, GFunction::Step { tau: 0.0 });
        let r = verify_theorem_case(
            &GroupProblem::new(vec![0.7, 0.3], 0.5, spec).unwrap(),
            &grid,
            Exec::Sequential,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_report(&mut buf, &r.rows()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next(),
            Some("case,n,alpha,mu,spec,clause,measured,tolerance,pass")
        );
        let row = lines.next().unwrap();
        assert!(
            row.starts_with("case1,2,7.00000000000e-1;3.00000000000e-1,5.00000000000e-1,"),
            "{row}"
        );
        assert_eq!(text.lines().count(), 4);
    }
}
