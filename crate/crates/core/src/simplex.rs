//! Scalar kernels on probability vectors shared by the tape primitives,
//! the confidence functions, the losses, and the theory oracles.
//!
//! Keeping one copy of each kernel means the differentiable path and the
//! plain value path produce bit-identical numbers.

/// Floor applied to every probability before it enters a logarithm.
pub const CLAMP_FLOOR: f64 = 1e-12;

/// Tolerance on `|Σp − 1|` and on negative entries when validating a row.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(CLAMP_FLOOR, 1.0)
}

/// Natural log of the clamped probability.
#[inline]
pub fn clamped_ln(p: f64) -> f64 {
    clamp_prob(p).ln()
}

/// Returns the first problem found with `p` as a point of the simplex.
pub fn simplex_violation(p: &[f64]) -> Option<String> {
    if p.is_empty() {
        return Some("empty probability vector".into());
    }
    if let Some(x) = p.iter().find(|x| !x.is_finite()) {
        return Some(format!("non-finite entry {x}"));
    }
    if let Some(x) = p.iter().find(|&&x| x < -SIMPLEX_TOL) {
        return Some(format!("negative entry {x}"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Some(format!("entries sum to {s}"));
    }
    None
}

/// Σ (p_i − 1/n)².
pub fn variance(p: &[f64]) -> f64 {
    let u = 1.0 / p.len() as f64;
    p.iter().map(|&x| (x - u) * (x - u)).sum()
}

pub fn variance_grad(p: &[f64], out: &mut [f64]) {
    let u = 1.0 / p.len() as f64;
    for (o, &x) in out.iter_mut().zip(p) {
        *o = 2.0 * (x - u);
    }
}

/// Shifted negative entropy `ln n + Σ p_i ln p_i`, evaluated as
/// `Σ p_i ln(n p_i)` so the uniform vector maps to exactly zero.
/// Zero entries contribute nothing; tiny negative rounding is cut at 0.
pub fn neg_entropy(p: &[f64]) -> f64 {
    let n = p.len() as f64;
    let s: f64 = p
        .iter()
        .map(|&x| if x <= 0.0 { 0.0 } else { x * (n * clamp_prob(x)).ln() })
        .sum();
    s.max(0.0)
}

pub fn neg_entropy_grad(p: &[f64], out: &mut [f64]) {
    let n = p.len() as f64;
    for (o, &x) in out.iter_mut().zip(p) {
        *o = if x < CLAMP_FLOOR {
            0.0
        } else {
            (n * x.min(1.0)).ln() + 1.0
        };
    }
}

/// Cross-entropy `−ln p_y` with the clamp floor.
#[inline]
pub fn cross_entropy(p: &[f64], label: usize) -> f64 {
    -clamped_ln(p[label])
}

/// `−Σ α_j ln p_j` with the clamp floor.
pub fn alpha_cross_entropy(p: &[f64], alpha: &[f64]) -> f64 {
    p.iter()
        .zip(alpha)
        .map(|(&pj, &aj)| if aj == 0.0 { 0.0 } else { -aj * clamped_ln(pj) })
        .sum()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate().skip(1) {
        if x > p[best] {
            best = i;
        }
    }
    best
}

pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_has_zero_dispersion() {
        for n in 2..=12 {
            let u = uniform(n);
            assert_eq!(variance(&u), 0.0, "n={n}");
            assert_eq!(neg_entropy(&u), 0.0, "n={n}");
        }
    }

    #[test]
    fn neg_entropy_of_vertex_is_ln_n() {
        assert!((neg_entropy(&[1.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((neg_entropy(&[0.0, 0.0, 1.0]) - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn simplex_check_flags_bad_rows() {
        assert!(simplex_violation(&[0.5, 0.5]).is_none());
        assert!(simplex_violation(&[0.6, 0.5]).is_some());
        assert!(simplex_violation(&[1.1, -0.1]).is_some());
        assert!(simplex_violation(&[f64::NAN, 1.0]).is_some());
    }

    #[test]
    fn cross_entropy_uses_floor() {
        assert!((cross_entropy(&[0.0, 1.0], 0) + CLAMP_FLOOR.ln()).abs() < 1e-12);
    }
}
