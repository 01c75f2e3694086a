//! Brute-force oracles for the per-group problem
//! `min_p C(p)·(L̂_α(p) − μ)` on a discretized simplex.
//!
//! `L̂_α(p) = −Σ α_j ln p_j` is the weak expert's mean loss on a group whose
//! label distribution is `α`, and `μ` is the frozen strong expert's mean loss
//! on the same group. `Δ(α) = L̂_α(α)` is the best the weak expert can do.

mod blindspot;
mod theorem;

pub use blindspot::{constructed_separator, verify_blindspot, BlindspotReport};
pub use theorem::{
    classify, random_alpha, random_problem, run_suite, verify_corollary, verify_step_tightness, verify_theorem_case,
    verify_tightness, write_report, CaseKind, CaseReport, ClauseResult, ReportRow, SuiteConfig,
};

use serde::Serialize;

use crate::confidence::{ConfidenceSpec, Dispersion};
use crate::error::{Error, Result};
use crate::exec::{argmin_range, map_range, Exec};
use crate::simplex::{alpha_cross_entropy, simplex_violation, CLAMP_FLOOR};

/// Every point `(k_1/m, …, k_n/m)` with `Σ k_j = m`, in lexicographic order
/// of `(k_1, …, k_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexGrid {
    n: usize,
    m: usize,
    counts: Vec<u32>,
    points: Vec<f64>,
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

/// Number of ways to write `total` as an ordered sum of `parts` naturals.
fn compositions(total: usize, parts: usize) -> u64 {
    if parts == 0 {
        return u64::from(total == 0);
    }
    binomial((total + parts - 1) as u64, (parts - 1) as u64)
}

impl SimplexGrid {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n < 2 || m < 1 {
            return Err(Error::Config(format!("grid needs n >= 2 and m >= 1, got n={n}, m={m}")));
        }
        let len = compositions(m, n) as usize;
        let mut counts = Vec::with_capacity(len * n);
        let mut k = vec![0u32; n];
        k[n - 1] = m as u32;
        loop {
            counts.extend_from_slice(&k);
            // Next composition in lexicographic order: bump the rightmost
            // position before the last that can still grow.
            let Some(i) = (0..n - 1).rev().find(|&i| k[i + 1..].iter().sum::<u32>() > 0) else {
                break;
            };
            k[i] += 1;
            let used: u32 = k[..=i].iter().sum();
            for slot in k[i + 1..].iter_mut() {
                *slot = 0;
            }
            k[n - 1] = m as u32 - used;
        }
        debug_assert_eq!(counts.len(), len * n);
        let points = counts.iter().map(|&c| c as f64 / m as f64).collect();
        Ok(Self { n, m, counts, points })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn resolution(&self) -> usize {
        self.m
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.m as f64
    }

    pub fn len(&self) -> usize {
        self.counts.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.n..(i + 1) * self.n]
    }

    pub fn counts(&self, i: usize) -> &[u32] {
        &self.counts[i * self.n..(i + 1) * self.n]
    }

    /// Position of a count vector in the enumeration.
    pub fn rank(&self, k: &[u32]) -> Option<usize> {
        if k.len() != self.n || k.iter().map(|&x| x as usize).sum::<usize>() != self.m {
            return None;
        }
        let mut rank = 0u64;
        let mut left = self.m;
        for (i, &ki) in k.iter().enumerate().take(self.n - 1) {
            // Σ_{a<k_i} compositions(left − a, r) telescopes.
            let r = self.n - i - 1;
            rank += compositions(left, r + 1) - compositions(left - ki as usize, r + 1);
            left -= ki as usize;
        }
        Some(rank as usize)
    }

    /// Grid points one step `e_i − e_j` away.
    pub fn neighbors(&self, idx: usize) -> Vec<usize> {
        let k = self.counts(idx);
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j && k[j] > 0 {
                    let mut q = k.to_vec();
                    q[i] += 1;
                    q[j] -= 1;
                    out.push(self.rank(&q).expect("neighbor lies on the grid"));
                }
            }
        }
        out
    }

    /// Grid point closest to `p` by largest-remainder rounding of `m·p`.
    pub fn nearest(&self, p: &[f64]) -> usize {
        let scaled: Vec<f64> = p.iter().map(|x| x * self.m as f64).collect();
        let mut k: Vec<u32> = scaled.iter().map(|x| x.floor().max(0.0) as u32).collect();
        let short = self.m as i64 - k.iter().map(|&x| x as i64).sum::<i64>();
        let mut order: Vec<usize> = (0..self.n).collect();
        order.sort_by(|&a, &b| {
            (scaled[b] - scaled[b].floor())
                .total_cmp(&(scaled[a] - scaled[a].floor()))
                .then(a.cmp(&b))
        });
        for &i in order.iter().take(short.max(0) as usize) {
            k[i] += 1;
        }
        self.rank(&k).expect("rounded counts sum to m")
    }

    /// Index of the uniform point when `n` divides `m`.
    pub fn uniform_index(&self) -> Option<usize> {
        self.m
            .is_multiple_of(self.n)
            .then(|| self.rank(&vec![(self.m / self.n) as u32; self.n]).expect("on grid"))
    }
}

/// `L̂_α(p)` with the clamp floor inside the logarithm.
pub fn alpha_loss(p: &[f64], alpha: &[f64]) -> Result<f64> {
    for (name, v) in [("p", p), ("alpha", alpha)] {
        if let Some(msg) = simplex_violation(v) {
            return Err(Error::Domain(format!("{name}: {msg}")));
        }
    }
    if p.len() != alpha.len() {
        return Err(Error::Domain(format!(
            "p has {} entries, alpha {}",
            p.len(),
            alpha.len()
        )));
    }
    Ok(alpha_cross_entropy(p, alpha))
}

/// Largest `μ` for which the clamp floor cannot pull a boundary point into
/// the sublevel set `L̂_α < μ`. On a face `p_i = 0` the clamped loss is at
/// least `α_i·(−ln CLAMP_FLOOR)`, while the unclamped loss there is infinite.
pub fn clamp_free_level(alpha: &[f64]) -> f64 {
    alpha.iter().copied().fold(f64::INFINITY, f64::min) * -CLAMP_FLOOR.ln()
}

/// `Δ(α) = L̂_α(α)`, the entropy of `α`.
pub fn delta(alpha: &[f64]) -> Result<f64> {
    alpha_loss(alpha, alpha)
}

/// One decomposed group: label distribution, frozen strong loss, confidence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupProblem {
    pub alpha: Vec<f64>,
    pub mu: f64,
    pub spec: ConfidenceSpec,
}

impl GroupProblem {
    /// `α` must be strictly interior and not uniform; the spec must be fixed.
    pub fn new(alpha: Vec<f64>, mu: f64, spec: ConfidenceSpec) -> Result<Self> {
        if let Some(msg) = simplex_violation(&alpha) {
            return Err(Error::Domain(format!("alpha: {msg}")));
        }
        if alpha.iter().any(|&a| a <= 0.0 || a >= 1.0) {
            return Err(Error::Domain(format!("alpha {alpha:?} is not strictly interior")));
        }
        let u = 1.0 / alpha.len() as f64;
        if alpha.iter().all(|&a| a == u) {
            return Err(Error::Domain("alpha must differ from the uniform vector".into()));
        }
        if !(mu.is_finite() && mu >= 0.0) {
            return Err(Error::Domain(format!("mu must be finite and >= 0, got {mu}")));
        }
        if !spec.g.is_fixed() {
            return Err(Error::Config("group problems need a fixed confidence".into()));
        }
        spec.g.validate()?;
        Ok(Self { alpha, mu, spec })
    }

    pub fn n(&self) -> usize {
        self.alpha.len()
    }

    pub fn delta(&self) -> f64 {
        alpha_cross_entropy(&self.alpha, &self.alpha)
    }

    pub fn loss(&self, p: &[f64]) -> f64 {
        alpha_cross_entropy(p, &self.alpha)
    }

    pub fn dispersion(&self, p: &[f64]) -> f64 {
        self.spec.dispersion.eval_unchecked(p)
    }

    pub fn confidence(&self, p: &[f64]) -> f64 {
        self.spec.g.eval(self.dispersion(p)).expect("fixed g")
    }

    /// `C(p)·(L̂_α(p) − μ)`
    pub fn objective(&self, p: &[f64]) -> f64 {
        let c = self.confidence(p);
        if c == 0.0 {
            0.0
        } else {
            c * (self.loss(p) - self.mu)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMin {
    pub index: usize,
    pub point: Vec<f64>,
    pub value: f64,
    pub confidence: f64,
    pub loss: f64,
}

/// Exhaustive minimization over the grid; ties go to the lexicographically
/// smallest point.
pub fn group_min(problem: &GroupProblem, grid: &SimplexGrid, exec: Exec) -> Result<GroupMin> {
    if grid.n() != problem.n() {
        return Err(Error::Config(format!(
            "grid has n={}, problem n={}",
            grid.n(),
            problem.n()
        )));
    }
    let (index, value) =
        argmin_range(exec, grid.len(), |i| problem.objective(grid.point(i))).expect("grid is non-empty");
    let point = grid.point(index).to_vec();
    Ok(GroupMin {
        index,
        value,
        confidence: problem.confidence(&point),
        loss: problem.loss(&point),
        point,
    })
}

/// Grid argmin of `L̂_α` alone.
pub fn loss_argmin(alpha: &[f64], grid: &SimplexGrid, exec: Exec) -> usize {
    argmin_range(exec, grid.len(), |i| alpha_cross_entropy(grid.point(i), alpha))
        .expect("grid is non-empty")
        .0
}

/// Upper bound on `max D` over the level set `{L̂_α = level}`.
///
/// Collects every grid point that has a neighbor on the other side of the
/// level; returns the largest `D` among them together with the largest `D`
/// jump across such a pair. `None` when no pair straddles the level.
pub fn level_set_dispersion(
    alpha: &[f64],
    level: f64,
    dispersion: Dispersion,
    grid: &SimplexGrid,
    exec: Exec,
) -> Option<(f64, f64)> {
    let per_point = map_range(exec, grid.len(), |i| {
        let p = grid.point(i);
        let below = alpha_cross_entropy(p, alpha) < level;
        let d = dispersion.eval_unchecked(p);
        let mut hit = None;
        for j in grid.neighbors(i) {
            let q = grid.point(j);
            if (alpha_cross_entropy(q, alpha) < level) != below {
                let jump = (d - dispersion.eval_unchecked(q)).abs();
                hit = Some(hit.map_or((d, jump), |(a, b): (f64, f64)| (a, b.max(jump))));
            }
        }
        hit
    });
    per_point
        .into_iter()
        .flatten()
        .reduce(|a, b| (a.0.max(b.0), a.1.max(b.1)))
}

/// Restriction of `L̂_α` to the binary branch `p ∈ [α₁, 1)`, unclamped.
fn binary_loss(alpha1: f64, p: f64) -> f64 {
    -alpha1 * p.ln() - (1.0 - alpha1) * (1.0 - p).ln()
}

/// `binary_loss` as a function of the distance `s` to the nearer end of the
/// segment, so roots within a few ulps of `p = 1` stay resolvable.
fn branch_loss(alpha1: f64, near_one: bool, s: f64) -> f64 {
    let (ln_p, ln_q) = if near_one {
        ((-s).ln_1p(), s.ln())
    } else {
        (s.ln(), (-s).ln_1p())
    };
    -alpha1 * ln_p - (1.0 - alpha1) * ln_q
}

/// A root of `L̂_α(p) = level` on one side of `α₁`, with the residual
/// measured in the endpoint-distance variable.
struct BranchRoot {
    p: f64,
    residual: f64,
}

/// Solves `branch_loss = level` on `(0, s_max]`, where the loss falls from
/// `+∞` to `Δ`. Bisects `ln s`, which reaches full relative precision in
/// about sixty steps whatever the magnitude of the root.
fn solve_branch(alpha1: f64, level: f64, near_one: bool) -> Result<BranchRoot> {
    let s_max = if near_one { 1.0 - alpha1 } else { alpha1 };
    let (mut lo, mut hi) = (f64::MIN_POSITIVE, s_max);
    if branch_loss(alpha1, near_one, lo) <= level {
        return Err(Error::Domain(format!(
            "level {level} is beyond the representable branch"
        )));
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if mid <= lo || mid >= hi {
            break;
        }
        let r = branch_loss(alpha1, near_one, mid) - level;
        if r == 0.0 {
            (lo, hi) = (mid, mid);
            break;
        }
        if r > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s = [lo, hi]
        .into_iter()
        .min_by(|a, b| {
            let ra = (branch_loss(alpha1, near_one, *a) - level).abs();
            let rb = (branch_loss(alpha1, near_one, *b) - level).abs();
            ra.total_cmp(&rb)
        })
        .unwrap_or(hi);
    let residual = (branch_loss(alpha1, near_one, s) - level).abs();
    if residual >= 1e-9 {
        return Err(Error::Domain(format!("bisection stalled with residual {residual:e}")));
    }
    Ok(BranchRoot {
        p: if near_one { 1.0 - s } else { s },
        residual,
    })
}

/// `[α₁, L̂₊⁻¹(μ)]`, the binary window that holds the minimizer's first
/// coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinaryWindow {
    pub lower: f64,
    /// Rounded to the nearest double; the root itself may sit closer to 1.
    pub upper: f64,
    /// `|L̂_α(upper) − μ|` at the root the bisection found.
    pub residual: f64,
}

pub fn binary_bounds(alpha1: f64, mu: f64) -> Result<BinaryWindow> {
    if !(0.5..1.0).contains(&alpha1) {
        return Err(Error::Domain(format!("alpha1 must lie in [0.5, 1), got {alpha1}")));
    }
    let d = binary_loss(alpha1, alpha1);
    if !(mu > d) {
        return Err(Error::Domain(format!("mu = {mu} does not exceed the entropy {d}")));
    }
    let root = solve_branch(alpha1, mu, true)?;
    Ok(BinaryWindow {
        lower: alpha1,
        upper: root.p,
        residual: root.residual,
    })
}

/// Both solutions of `L̂_α(p) = level` for binary `α`, as first coordinates
/// `(left, right)` around `α₁`.
pub fn binary_level_points(alpha1: f64, level: f64) -> Result<(f64, f64)> {
    let d = binary_loss(alpha1, alpha1);
    if !(level > d) {
        return Err(Error::Config(format!(
            "level {level} does not exceed the entropy {d}; the level set is empty"
        )));
    }
    let right = solve_branch(alpha1, level, true)?;
    let left = solve_branch(alpha1, level, false)?;
    Ok((left.p, right.p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confidence::GFunction;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn step0() -> ConfidenceSpec {
        ConfidenceSpec::new(Dispersion::Variance, GFunction::Step { tau: 0.0 })
    }

    #[test]
    fn grid_sizes_and_order() {
        let g = SimplexGrid::new(3, 4).unwrap();
        assert_eq!(g.len(), 15);
        assert_eq!(g.counts(0), &[0, 0, 4]);
        assert_eq!(g.counts(1), &[0, 1, 3]);
        assert_eq!(g.counts(14), &[4, 0, 0]);
        for i in 0..g.len() {
            assert_eq!(g.rank(g.counts(i)), Some(i));
            assert_eq!(g.counts(i).iter().sum::<u32>(), 4);
        }
        assert_eq!(SimplexGrid::new(2, 2000).unwrap().len(), 2001);
        assert_eq!(SimplexGrid::new(3, 300).unwrap().len(), 45_451);
        assert_eq!(SimplexGrid::new(4, 10).unwrap().len(), 286);
    }

    #[test]
    fn nearest_and_neighbors() {
        let g = SimplexGrid::new(3, 10).unwrap();
        assert_eq!(g.counts(g.nearest(&[0.62, 0.27, 0.11])), &[6, 3, 1]);
        // Equal remainders break toward the lower index.
        assert_eq!(g.counts(g.nearest(&[1.0 / 3.0; 3])), &[4, 3, 3]);
        assert_eq!(g.neighbors(g.rank(&[0, 0, 10]).unwrap()).len(), 2);
        assert_eq!(g.neighbors(g.rank(&[3, 3, 4]).unwrap()).len(), 6);
        assert_eq!(g.uniform_index(), None);
        assert_eq!(
            SimplexGrid::new(3, 9).unwrap().uniform_index().map(|i| i > 0),
            Some(true)
        );
    }

    #[test]
    fn delta_values() {
        assert!((delta(&[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((delta(&[0.7, 0.3]).unwrap() - 0.6108643020548935).abs() < 1e-15);
        assert!((delta(&[0.9, 0.1]).unwrap() - 0.3250829733914482).abs() < 1e-15);
        assert!(matches!(delta(&[0.7, 0.4]), Err(Error::Domain(_))));
    }

    #[test]
    fn loss_minimizer_is_alpha() {
        let g = SimplexGrid::new(2, 1000).unwrap();
        assert_eq!(g.point(loss_argmin(&[0.7, 0.3], &g, Exec::Parallel)), &[0.7, 0.3]);
    }

    #[test]
    fn group_min_examples() {
        let g = SimplexGrid::new(2, 2000).unwrap();
        let specs = [
            step0(),
            ConfidenceSpec::new(Dispersion::NegEntropy, GFunction::TwoLevel { d_max: 0.1, beta: 0.3 }),
            ConfidenceSpec::new(Dispersion::Variance, GFunction::CappedLinear { slope: 2.0 }),
        ];
        for s in specs {
            let r = group_min(&GroupProblem::new(vec![0.7, 0.3], 0.5, s).unwrap(), &g, Exec::Parallel).unwrap();
            assert_eq!((r.point.as_slice(), r.value, r.confidence), (&[0.5, 0.5][..], 0.0, 0.0));
        }

        let d = delta(&[0.9, 0.1]).unwrap();
        let p = GroupProblem::new(vec![0.9, 0.1], d, step0()).unwrap();
        let r = group_min(&p, &g, Exec::Parallel).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(p.objective(&[0.9, 0.1]), 0.0);
        assert_eq!(p.objective(&[0.5, 0.5]), 0.0);
        assert_eq!(r.point, vec![0.5, 0.5]);

        let p = GroupProblem::new(vec![0.9, 0.1], 0.6, step0()).unwrap();
        let r = group_min(&p, &g, Exec::Parallel).unwrap();
        assert_eq!(r.point, vec![0.9, 0.1]);
        assert!((r.value - (-0.2749170266085518)).abs() < 1e-15);
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let g = SimplexGrid::new(3, 120).unwrap();
        let p = GroupProblem::new(
            vec![0.6, 0.3, 0.1],
            1.2,
            ConfidenceSpec::new(Dispersion::NegEntropy, GFunction::CappedLinear { slope: 1.5 }),
        )
        .unwrap();
        assert_eq!(
            group_min(&p, &g, Exec::Sequential).unwrap(),
            group_min(&p, &g, Exec::Parallel).unwrap()
        );
    }

    #[test]
    fn problem_preconditions() {
        assert!(GroupProblem::new(vec![0.5, 0.5], 0.3, step0()).is_err());
        assert!(GroupProblem::new(vec![1.0, 0.0], 0.3, step0()).is_err());
        assert!(GroupProblem::new(vec![0.7, 0.3], -0.1, step0()).is_err());
        let learnable = ConfidenceSpec::new(Dispersion::Variance, GFunction::Learnable { hidden: 2 });
        assert!(matches!(
            GroupProblem::new(vec![0.7, 0.3], 0.3, learnable),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn binary_upper_bound() {
        let w = binary_bounds(0.9, 0.6).unwrap();
        assert_eq!(w.lower, 0.9);
        assert!(w.residual < 1e-9);
        assert!((binary_loss(0.9, w.upper) - 0.6).abs() < 1e-9);
        assert!((w.upper - 0.9974639474888796).abs() < 1e-9);
        let d = binary_loss(0.9, 0.9);
        let w = binary_bounds(0.9, d + 1e-9).unwrap();
        assert!((w.upper - 0.9).abs() < 1e-3);
        assert!(matches!(binary_bounds(0.9, d), Err(Error::Domain(_))));
        assert!(matches!(binary_bounds(0.4, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn clamp_free_level_marks_where_vertices_join_the_sublevel_set() {
        let alpha = [0.977, 0.023];
        let limit = clamp_free_level(&alpha);
        assert!((limit - 0.023 * 1e12f64.ln()).abs() < 1e-12);
        let vertex = alpha_cross_entropy(&[1.0, 0.0], &alpha);
        assert!(vertex >= limit && vertex < limit + 1e-9);
    }

    #[test]
    fn upper_root_next_to_one_is_resolved() {
        // 1 - p at the root is about 6e-16, a handful of ulps below 1.
        let d = binary_loss(0.98, 0.98);
        let w = binary_bounds(0.98, d + 0.6).unwrap();
        assert!(w.residual < 1e-9);
        assert!(w.upper > 1.0 - 1e-14);
        let (l, r) = binary_level_points(0.98, d + 0.6).unwrap();
        assert!(l < 0.98 && r == w.upper);
    }

    #[test]
    fn level_points_bracket_alpha() {
        let (l, r) = binary_level_points(0.9, 0.55).unwrap();
        assert!(l < 0.9 && 0.9 < r);
        assert!((binary_loss(0.9, l) - 0.55).abs() < 1e-9);
        assert!((binary_loss(0.9, r) - 0.55).abs() < 1e-9);
        assert!(matches!(binary_level_points(0.9, 0.3), Err(Error::Config(_))));
    }

    #[test]
    fn level_set_dispersion_brackets_exact_binary_value() {
        let g = SimplexGrid::new(2, 2000).unwrap();
        let (l, r) = binary_level_points(0.8, 0.7).unwrap();
        let exact = [l, r]
            .iter()
            .map(|&x| Dispersion::Variance.eval_unchecked(&[x, 1.0 - x]))
            .fold(0.0, f64::max);
        let (d, jump) = level_set_dispersion(&[0.8, 0.2], 0.7, Dispersion::Variance, &g, Exec::Parallel).unwrap();
        assert!(d >= exact - 1e-15 && d <= exact + jump);
    }

    #[test]
    fn delta_is_concave() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let (a, b, lam): (f64, f64, f64) = (
                rng.random_range(0.001..0.999),
                rng.random_range(0.001..0.999),
                rng.random(),
            );
            let m = lam * a + (1.0 - lam) * b;
            let lhs = delta(&[m, 1.0 - m]).unwrap();
            let rhs = lam * delta(&[a, 1.0 - a]).unwrap() + (1.0 - lam) * delta(&[b, 1.0 - b]).unwrap();
            assert!(lhs >= rhs - 1e-12);
        }
        let top = delta(&[0.5, 0.5]).unwrap();
        for i in 1..100 {
            let a = i as f64 / 100.0;
            assert!(delta(&[a, 1.0 - a]).unwrap() <= top);
        }
    }

    #[test]
    fn grid_refinement_never_raises_the_minimum() {
        let p = GroupProblem::new(
            vec![0.65, 0.35],
            0.9,
            ConfidenceSpec::new(Dispersion::Variance, GFunction::CappedLinear { slope: 3.0 }),
        )
        .unwrap();
        let vals: Vec<f64> = [250, 500, 1000]
            .iter()
            .map(|&m| {
                group_min(&p, &SimplexGrid::new(2, m).unwrap(), Exec::Sequential)
                    .unwrap()
                    .value
            })
            .collect();
        assert!(vals[1] <= vals[0] && vals[2] <= vals[1], "{vals:?}");
    }

    #[test]
    fn minimizer_flips_as_mu_crosses_delta() {
        let g = SimplexGrid::new(2, 1000).unwrap();
        let alpha = vec![0.8, 0.2];
        let d = delta(&alpha).unwrap();
        for i in 0..40 {
            let mu = d - 0.2 + 0.01 * i as f64;
            if (mu - d).abs() < 1e-9 {
                continue;
            }
            let r = group_min(
                &GroupProblem::new(alpha.clone(), mu, step0()).unwrap(),
                &g,
                Exec::Parallel,
            )
            .unwrap();
            let expected = if mu < d { vec![0.5, 0.5] } else { alpha.clone() };
            assert_eq!(r.point, expected, "mu={mu}");
        }
    }
}
