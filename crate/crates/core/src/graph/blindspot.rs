//! A graph on which no graph convolution can tell two nodes apart although
//! their own features differ.
//!
//! Two mirrored random trees of depth `K` hang off `u` and `v`. Every node
//! within `K-1` hops of a root owns one designated child `w*` created only
//! for it; the feature of `w*` is solved so that the normalized closed
//! neighborhood sum at the parent vanishes. After one convolution every
//! such node therefore sees the zero vector, and from layer two onward the
//! two neighborhoods are indistinguishable.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Graph, GraphError, Splits};
use crate::tensor::Tensor;

/// Bound on `‖Σ coeff·x‖∞` at every node that must cancel.
pub const CANCELLATION_TOL: f64 = 1e-10;

/// Side information that, together with the graph document, identifies a
/// blindspot instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlindspotMeta {
    pub u: usize,
    pub v: usize,
    pub k: usize,
    /// Isomorphism of the two `K`-hop balls as `(u-side node, v-side node)`.
    pub mapping: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlindspotInstance {
    pub graph: Graph,
    pub meta: BlindspotMeta,
}

struct TreeNode {
    parent: Option<usize>,
    depth: usize,
    designated: bool,
    children: Vec<usize>,
}

fn random_tree(k: usize, rng: &mut ChaCha8Rng) -> Vec<TreeNode> {
    let mut nodes = vec![TreeNode {
        parent: None,
        depth: 0,
        designated: false,
        children: vec![],
    }];
    let mut i = 0;
    while i < nodes.len() {
        if nodes[i].depth < k {
            let extra = rng.random_range(0..=1usize);
            for c in 0..=extra {
                let id = nodes.len();
                nodes.push(TreeNode {
                    parent: Some(i),
                    depth: nodes[i].depth + 1,
                    designated: c == 0,
                    children: vec![],
                });
                nodes[i].children.push(id);
            }
        }
        i += 1;
    }
    nodes
}

pub fn build_blindspot_graph(k: usize, f: usize, seed: u64) -> Result<BlindspotInstance, GraphError> {
    if k < 1 {
        return Err(GraphError::Config("blindspot radius K must be at least 1".into()));
    }
    if f < 2 {
        return Err(GraphError::Config(format!("f must be at least 2, got {f}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tree = random_tree(k, &mut rng);
    let m = tree.len();
    let n = 2 * m;

    let mut edges = Vec::new();
    for (i, t) in tree.iter().enumerate() {
        if let Some(p) = t.parent {
            edges.push((p, i));
            edges.push((m + p, m + i));
        }
    }
    let deg: Vec<usize> = tree
        .iter()
        .map(|t| t.children.len() + usize::from(t.parent.is_some()))
        .collect();
    let coeff = |a: usize, b: usize| 1.0 / (((deg[a] + 1) * (deg[b] + 1)) as f64).sqrt();

    let mut feats = vec![0.0; n * f];
    for side in 0..2 {
        let off = side * m;
        for (i, t) in tree.iter().enumerate() {
            if !t.designated {
                for j in 0..f {
                    feats[(off + i) * f + j] = rng.sample(StandardNormal);
                }
            }
        }
        // Tree ids are in BFS order, so every non-designated member of a
        // closed neighborhood is fixed before its designated child is solved.
        for (w, t) in tree.iter().enumerate() {
            if t.depth >= k {
                continue;
            }
            let star = t.children[0];
            let mut acc = vec![0.0; f];
            let closed = t
                .parent
                .into_iter()
                .chain(std::iter::once(w))
                .chain(t.children[1..].iter().copied());
            for x in closed {
                let c = coeff(w, x);
                for j in 0..f {
                    acc[j] += c * feats[(off + x) * f + j];
                }
            }
            let c_star = coeff(w, star);
            for j in 0..f {
                feats[(off + star) * f + j] = -acc[j] / c_star;
            }
        }
    }

    let mut labels = vec![0usize; n];
    labels[m] = 1;
    let splits = Splits {
        train: vec![0, m],
        val: vec![],
        test: (1..m).chain(m + 1..n).collect(),
    };
    let features = Tensor::matrix(n, f, feats).expect("shape matches");
    let graph = Graph::new(2, features, labels, &edges, splits)?;
    let meta = BlindspotMeta {
        u: 0,
        v: m,
        k,
        mapping: (0..m).map(|i| (i, m + i)).collect(),
    };
    let inst = BlindspotInstance { graph, meta };
    inst.validate()?;
    Ok(inst)
}

impl BlindspotInstance {
    pub fn from_parts(graph: Graph, meta: BlindspotMeta) -> Result<Self, GraphError> {
        let inst = Self { graph, meta };
        inst.validate()?;
        Ok(inst)
    }

    pub fn u(&self) -> usize {
        self.meta.u
    }

    pub fn v(&self) -> usize {
        self.meta.v
    }

    pub fn k(&self) -> usize {
        self.meta.k
    }

    /// `‖Σ_{w' ∈ N(w) ∪ {w}} coeff(w, w')·x_{w'}‖∞` at node `w`.
    pub fn cancellation_residual(&self, w: usize) -> f64 {
        let g = &self.graph;
        let x = g.features();
        let mut acc = vec![0.0; g.feature_dim()];
        for &y in std::iter::once(&w).chain(g.neighbors(w)) {
            let c = g.gcn_coeff(w, y);
            for (a, &xv) in acc.iter_mut().zip(x.row(y)) {
                *a += c * xv;
            }
        }
        acc.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Nodes whose normalized closed-neighborhood sum must vanish.
    pub fn required_nodes(&self) -> Vec<usize> {
        let k = self.k();
        let mut out: Vec<usize> = [self.u(), self.v()]
            .iter()
            .flat_map(|&r| self.graph.ball(r, k - 1))
            .map(|(w, _)| w)
            .collect();
        out.sort_unstable();
        out
    }

    /// Largest cancellation residual over the required nodes.
    pub fn max_cancellation_residual(&self) -> f64 {
        self.required_nodes()
            .into_iter()
            .map(|w| self.cancellation_residual(w))
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let g = &self.graph;
        let (u, v, k) = (self.u(), self.v(), self.k());
        let n = g.num_nodes();
        if k < 1 || u >= n || v >= n || u == v {
            return Err(GraphError::Validation(format!(
                "invalid blindspot roots u={u}, v={v}, K={k}"
            )));
        }
        let ball_u: HashMap<usize, usize> = g.ball(u, k).into_iter().collect();
        let ball_v: HashMap<usize, usize> = g.ball(v, k).into_iter().collect();
        if let Some(w) = ball_u.keys().find(|w| ball_v.contains_key(w)) {
            return Err(GraphError::Validation(format!(
                "node {w} lies in both {k}-hop neighborhoods"
            )));
        }

        let map: HashMap<usize, usize> = self.meta.mapping.iter().copied().collect();
        if map.len() != ball_u.len() || map.get(&u) != Some(&v) {
            return Err(GraphError::Validation(
                "mapping must be defined on the whole u-side ball and send u to v".into(),
            ));
        }
        let mut image = std::collections::HashSet::new();
        for (&a, &b) in &map {
            let (Some(&da), Some(&db)) = (ball_u.get(&a), ball_v.get(&b)) else {
                return Err(GraphError::Validation(format!(
                    "mapping pair ({a}, {b}) leaves the balls"
                )));
            };
            if da != db || !image.insert(b) {
                return Err(GraphError::Validation(format!(
                    "mapping pair ({a}, {b}) breaks hop distance or injectivity"
                )));
            }
        }
        if image.len() != ball_v.len() {
            return Err(GraphError::Validation("mapping is not onto the v-side ball".into()));
        }
        for &a in ball_u.keys() {
            for &b in g.neighbors(a) {
                if ball_u.contains_key(&b) && !g.neighbors(map[&a]).contains(&map[&b]) {
                    return Err(GraphError::Validation(format!(
                        "edge ({a}, {b}) has no mirror under the mapping"
                    )));
                }
            }
            let mirrored_inside = g.neighbors(map[&a]).iter().filter(|x| ball_v.contains_key(x)).count();
            let inside = g.neighbors(a).iter().filter(|x| ball_u.contains_key(x)).count();
            if inside != mirrored_inside {
                return Err(GraphError::Validation(format!(
                    "induced degree of {a} differs from its mirror"
                )));
            }
        }

        for w in self.required_nodes() {
            let r = self.cancellation_residual(w);
            if !(r < CANCELLATION_TOL) {
                return Err(GraphError::Validation(format!(
                    "normalized neighborhood sum at node {w} is {r:e}, not zero"
                )));
            }
        }
        if g.features().row(u) == g.features().row(v) {
            return Err(GraphError::Validation("x_u equals x_v".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radius_one_cancels_at_roots() {
        let inst = build_blindspot_graph(1, 4, 3).unwrap();
        assert!(inst.cancellation_residual(inst.u()) < 1e-10);
        assert!(inst.cancellation_residual(inst.v()) < 1e-10);
        assert_ne!(inst.graph.features().row(inst.u()), inst.graph.features().row(inst.v()));
    }

    #[test]
    fn radius_two_cancels_at_roots_and_their_neighbors() {
        let inst = build_blindspot_graph(2, 4, 11).unwrap();
        let g = &inst.graph;
        let mut checked = 0;
        for r in [inst.u(), inst.v()] {
            for &w in std::iter::once(&r).chain(g.neighbors(r)) {
                assert!(inst.cancellation_residual(w) < 1e-10, "node {w}");
                checked += 1;
            }
        }
        assert!(checked >= 4);
    }

    #[test]
    fn validation_catches_broken_features() {
        let inst = build_blindspot_graph(2, 3, 5).unwrap();
        let mut x = inst.graph.features().clone();
        x.data_mut()[0] += 1.0;
        let broken = BlindspotInstance {
            graph: inst.graph.with_features(x).unwrap(),
            meta: inst.meta.clone(),
        };
        assert!(broken.validate().is_err());
    }

    #[test]
    fn validation_catches_bad_mapping() {
        let mut inst = build_blindspot_graph(1, 3, 5).unwrap();
        inst.meta.mapping[0].1 += 1;
        assert!(inst.validate().is_err());
    }

    #[test]
    fn many_seeds_and_radii_validate() {
        for k in 1..=3 {
            for seed in 0..10 {
                let inst = build_blindspot_graph(k, 3, seed).unwrap();
                assert!(inst.max_cancellation_residual() < CANCELLATION_TOL);
            }
        }
    }

    #[test]
    fn rejects_radius_zero() {
        assert!(matches!(build_blindspot_graph(0, 3, 1), Err(GraphError::Config(_))));
    }
}
