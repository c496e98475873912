//! Discrete-time dynamic graphs: snapshots over a shared node index space.

mod io;
mod split;

pub use io::{
    load_dynamic_graph, load_labels, parse_dynamic_graph, write_dynamic_graph, FeatureMode,
    NodeLabels,
};
pub use split::{
    build_prediction_targets, informative_count, sample_non_edges, split_link_detection,
    LinkEvalSplit, LinkTask, SubgraphSplit, DEFAULT_TEST_FRAC, DEFAULT_VAL_FRAC,
};

use rand::seq::index;
use rand::Rng;

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

/// Undirected edge stored as `(min, max)`.
pub type Edge = (usize, usize);

#[inline]
pub fn edge(u: usize, v: usize) -> Edge {
    if u <= v {
        (u, v)
    } else {
        (v, u)
    }
}

/// One time step: a simple undirected graph plus the set of nodes present.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    edges: Vec<Edge>,
    active: Vec<bool>,
}

impl Snapshot {
    /// Validates and canonicalizes an edge list. Duplicates collapse;
    /// self-loops, out-of-range ids and inactive endpoints are errors.
    pub fn new(edges: impl IntoIterator<Item = Edge>, active: Vec<bool>) -> Result<Self> {
        let n = active.len();
        let mut list = Vec::new();
        for (u, v) in edges {
            if u == v {
                return Err(Error::InvalidSnapshot(format!("self-loop on node {u}")));
            }
            if u >= n || v >= n {
                return Err(Error::InvalidSnapshot(format!(
                    "edge ({u}, {v}) outside node space of size {n}"
                )));
            }
            if !active[u] || !active[v] {
                return Err(Error::InvalidSnapshot(format!(
                    "edge ({u}, {v}) touches an inactive node"
                )));
            }
            list.push(edge(u, v));
        }
        list.sort_unstable();
        list.dedup();
        Ok(Snapshot {
            edges: list,
            active,
        })
    }

    /// Snapshot whose active set is exactly the edge endpoints.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let edges: Vec<Edge> = edges.into_iter().collect();
        let mut active = vec![false; n];
        for &(u, v) in &edges {
            if u < n {
                active[u] = true;
            }
            if v < n {
                active[v] = true;
            }
        }
        Self::new(edges, active)
    }

    /// Same node set, different edges.
    pub fn with_edges(&self, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        Self::new(edges, self.active.clone())
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.active.len()
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn is_active(&self, node: usize) -> bool {
        self.active.get(node).copied().unwrap_or(false)
    }

    pub fn active_nodes(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&i| self.active[i]).collect()
    }

    pub fn num_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn contains(&self, e: Edge) -> bool {
        self.edges.binary_search(&edge(e.0, e.1)).is_ok()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.active.len()];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }
}

/// Node features shared by every snapshot.
#[derive(Clone, Debug, PartialEq)]
pub enum Features {
    /// Identity over the global node space.
    OneHot,
    /// A trainable `n_global x dim` matrix owned by each model.
    Learnable { dim: usize },
    Matrix(Tensor),
}

impl Features {
    pub fn dim(&self, n_global: usize) -> usize {
        match self {
            Features::OneHot => n_global,
            Features::Learnable { dim } => *dim,
            Features::Matrix(t) => t.cols(),
        }
    }

    /// The fixed feature matrix, or `None` when features are learned.
    pub fn materialize(&self, n_global: usize) -> Option<Tensor> {
        match self {
            Features::OneHot => Some(Tensor::identity(n_global)),
            Features::Learnable { .. } => None,
            Features::Matrix(t) => Some(t.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicGraph {
    snapshots: Vec<Snapshot>,
    features: Features,
    num_test_snapshots: usize,
    node_ids: Vec<u64>,
}

impl DynamicGraph {
    pub fn new(snapshots: Vec<Snapshot>, features: Features, num_test_snapshots: usize) -> Result<Self> {
        let n = snapshots.first().map_or(0, Snapshot::num_nodes);
        let node_ids = (0..n as u64).collect();
        Self::with_node_ids(snapshots, features, num_test_snapshots, node_ids)
    }

    pub fn with_node_ids(
        snapshots: Vec<Snapshot>,
        features: Features,
        num_test_snapshots: usize,
        node_ids: Vec<u64>,
    ) -> Result<Self> {
        if snapshots.len() < 2 {
            return Err(Error::InvalidSnapshot(format!(
                "a dynamic graph needs at least 2 snapshots, got {}",
                snapshots.len()
            )));
        }
        if num_test_snapshots >= snapshots.len() {
            return Err(Error::config(
                "test_snapshots",
                format!("must be below the snapshot count {}", snapshots.len()),
            ));
        }
        let n = node_ids.len();
        if let Some(s) = snapshots.iter().find(|s| s.num_nodes() != n) {
            return Err(Error::InvalidSnapshot(format!(
                "snapshot over {} nodes in a graph of {n}",
                s.num_nodes()
            )));
        }
        if let Features::Matrix(t) = &features {
            if t.rows() != n {
                return Err(Error::shape("features", t.shape(), (n, t.cols())));
            }
        }
        Ok(DynamicGraph {
            snapshots,
            features,
            num_test_snapshots,
            node_ids,
        })
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn snapshot(&self, t: usize) -> &Snapshot {
        &self.snapshots[t]
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn n_global(&self) -> usize {
        self.node_ids.len()
    }

    pub fn num_test_snapshots(&self) -> usize {
        self.num_test_snapshots
    }

    pub fn features(&self) -> &Features {
        &self.features
    }

    /// Original identifier of each internal node index.
    pub fn node_ids(&self) -> &[u64] {
        &self.node_ids
    }

    pub fn total_edges(&self) -> usize {
        self.snapshots.iter().map(Snapshot::num_edges).sum()
    }

    /// Copy with the given snapshots (same features, ids and test count).
    pub fn replace_snapshots(&self, snapshots: Vec<Snapshot>) -> Result<Self> {
        Self::with_node_ids(
            snapshots,
            self.features.clone(),
            self.num_test_snapshots.min(self.snapshots.len().saturating_sub(1)),
            self.node_ids.clone(),
        )
    }

    /// The first `len` snapshots as a graph of its own.
    pub fn prefix(&self, len: usize) -> Result<Self> {
        let snaps = self.snapshots[..len.min(self.len())].to_vec();
        let l = self.num_test_snapshots.min(snaps.len().saturating_sub(1));
        Self::with_node_ids(snaps, self.features.clone(), l, self.node_ids.clone())
    }
}

/// Symmetric renormalized adjacency `D̃^{-1/2} (A + I) D̃^{-1/2}` where the
/// self-loop is added for active nodes only. Rows and columns of inactive
/// nodes are zero.
pub fn normalize_adjacency(s: &Snapshot) -> Tensor {
    normalize_edges(s.num_nodes(), s.active(), s.edges())
}

pub(crate) fn normalize_edges(n: usize, active: &[bool], edges: &[Edge]) -> Tensor {
    let mut deg = vec![0.0f64; n];
    for (i, d) in deg.iter_mut().enumerate() {
        if active[i] {
            *d = 1.0;
        }
    }
    for &(u, v) in edges {
        deg[u] += 1.0;
        deg[v] += 1.0;
    }
    let inv: Vec<f64> = deg
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let mut a = Tensor::zeros(n, n);
    for i in 0..n {
        if active[i] {
            a.set(i, i, inv[i] * inv[i]);
        }
    }
    for &(u, v) in edges {
        let w = inv[u] * inv[v];
        a.set(u, v, w);
        a.set(v, u, w);
    }
    a
}

/// Number of unordered pairs among `k` nodes.
pub fn pair_capacity(k: usize) -> usize {
    k * k.saturating_sub(1) / 2
}

/// Maps a linear index in `0..k(k-1)/2` to the pair `(i, j)`, `i < j`, in
/// row-major order of the strict upper triangle.
pub(crate) fn pair_from_index(k: usize, idx: usize) -> (usize, usize) {
    let offset = |i: usize| i * (2 * k - i - 1) / 2;
    let (mut lo, mut hi) = (0usize, k - 1);
    while lo + 1 < hi {
        let mid = (lo + hi) / 2;
        if offset(mid) <= idx {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let i = if offset(hi) <= idx { hi } else { lo };
    (i, i + 1 + idx - offset(i))
}

/// Uniformly random simple graph on the active nodes of `s` with exactly
/// `|E_t|` edges; the active mask is copied.
pub fn erdos_renyi_like<R: Rng + ?Sized>(s: &Snapshot, rng: &mut R) -> Result<Snapshot> {
    let nodes = s.active_nodes();
    let cap = pair_capacity(nodes.len());
    let m = s.num_edges();
    if m > cap {
        return Err(Error::Capacity {
            requested: m,
            available: cap,
        });
    }
    let mut edges: Vec<Edge> = index::sample(rng, cap, m)
        .into_iter()
        .map(|k| {
            let (i, j) = pair_from_index(nodes.len(), k);
            (nodes[i], nodes[j])
        })
        .collect();
    edges.sort_unstable();
    s.with_edges(edges)
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn snapshot_rejects_self_loops_and_inactive_endpoints() {
        assert!(Snapshot::from_edges(3, [(1, 1)]).is_err());
        assert!(Snapshot::new([(0, 1)], vec![true, false]).is_err());
        assert!(Snapshot::from_edges(2, [(0, 5)]).is_err());
        let s = Snapshot::from_edges(3, [(2, 0), (0, 2), (1, 2)]).unwrap();
        assert_eq!(s.edges(), &[(0, 2), (1, 2)]);
    }

    #[test]
    fn normalize_single_isolated_node() {
        let s = Snapshot::new([], vec![true]).unwrap();
        assert_eq!(normalize_adjacency(&s).get(0, 0), 1.0);
    }

    #[test]
    fn normalize_one_edge() {
        let s = Snapshot::from_edges(2, [(0, 1)]).unwrap();
        let a = normalize_adjacency(&s);
        for &v in a.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_leaves_inactive_rows_empty() {
        let s = Snapshot::from_edges(4, [(0, 1), (1, 2)]).unwrap();
        let a = normalize_adjacency(&s);
        assert!(a.row(3).iter().all(|&v| v == 0.0));
        assert!((0..4).all(|i| a.get(i, 3) == 0.0));
    }

    #[test]
    fn normalize_is_symmetric_on_random_snapshot() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut edges = Vec::new();
        for u in 0..20 {
            for v in u + 1..20 {
                if rng.random_bool(0.2) {
                    edges.push((u, v));
                }
            }
        }
        let s = Snapshot::new(edges, vec![true; 20]).unwrap();
        let a = normalize_adjacency(&s);
        assert_eq!(a, a.transpose());
    }

    #[test]
    fn pair_index_roundtrip_covers_triangle() {
        for k in 2..9 {
            let pairs: Vec<_> = (0..pair_capacity(k)).map(|i| pair_from_index(k, i)).collect();
            let expected: Vec<_> = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
            assert_eq!(pairs, expected);
        }
    }

    #[test]
    fn er_forced_triangle() {
        let s = Snapshot::from_edges(3, [(0, 1), (1, 2), (0, 2)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(erdos_renyi_like(&s, &mut rng).unwrap(), s);
    }

    #[test]
    fn er_capacity_error() {
        let s = Snapshot::from_edges(3, [(0, 1), (1, 2)]).unwrap();
        let shrunk = Snapshot {
            edges: vec![(0, 1), (1, 2), (0, 2), (0, 3)],
            active: vec![true, true, true, false],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(erdos_renyi_like(&s, &mut rng).is_ok());
        assert!(matches!(
            erdos_renyi_like(&shrunk, &mut rng),
            Err(Error::Capacity { requested: 4, available: 3 })
        ));
    }

    #[test]
    fn er_is_uniform_over_two_edge_subsets() {
        // Enumeration oracle: C(6, 2) = 15 equally likely edge pairs on K4.
        let s = Snapshot::from_edges(4, [(0, 1), (2, 3)]).unwrap();
        let mut counts: HashMap<Vec<Edge>, usize> = HashMap::new();
        let trials = 10_000;
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = erdos_renyi_like(&s, &mut rng).unwrap();
            *counts.entry(g.edges().to_vec()).or_default() += 1;
        }
        assert_eq!(counts.len(), 15);
        for c in counts.values() {
            let f = *c as f64 / trials as f64;
            assert!((f - 1.0 / 15.0).abs() <= 0.01, "frequency {f}");
        }
    }

    proptest! {
        #[test]
        fn er_preserves_counts_and_mask(seed in 0u64..10_000, n in 3usize..25, p in 0.0f64..0.9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut edges = Vec::new();
            for u in 0..n {
                for v in u + 1..n {
                    if rng.random_bool(p) {
                        edges.push((u, v));
                    }
                }
            }
            let s = Snapshot::from_edges(n, edges).unwrap();
            let r = erdos_renyi_like(&s, &mut rng).unwrap();
            prop_assert_eq!(r.num_edges(), s.num_edges());
            prop_assert_eq!(r.active(), s.active());
            prop_assert!(r.edges().iter().all(|&(u, v)| u < v));
            prop_assert!(r.edges().windows(2).all(|w| w[0] < w[1]));
        }
    }
}
