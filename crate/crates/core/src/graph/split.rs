//! Edge partitions: informative/bias subgraphs and evaluation splits.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{edge, pair_capacity, pair_from_index, DynamicGraph, Edge, Snapshot};
use crate::error::{Error, Result};

pub const DEFAULT_VAL_FRAC: f64 = 0.05;
pub const DEFAULT_TEST_FRAC: f64 = 0.10;

/// `max(1, round(r * m))`, the size of the informative edge set.
pub fn informative_count(num_edges: usize, r: f64) -> usize {
    ((r * num_edges as f64).round() as usize).clamp(1, num_edges.max(1))
}

/// Partition of one snapshot's edges into informative and bias sets.
#[derive(Clone, Debug, PartialEq)]
pub struct SubgraphSplit {
    informative: Vec<Edge>,
    bias: Vec<Edge>,
    ratio: f64,
}

impl SubgraphSplit {
    /// Builds the split from the chosen informative edges; the bias set is
    /// the remainder of `s`.
    pub fn from_informative(s: &Snapshot, informative: Vec<Edge>, ratio: f64) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::config("r", format!("{ratio} is outside (0, 1]")));
        }
        let mut informative: Vec<Edge> = informative.into_iter().map(|(u, v)| edge(u, v)).collect();
        informative.sort_unstable();
        informative.dedup();
        if let Some(e) = informative.iter().find(|e| !s.contains(**e)) {
            return Err(Error::InvalidSnapshot(format!(
                "informative edge {e:?} is not in the snapshot"
            )));
        }
        let bias = s
            .edges()
            .iter()
            .copied()
            .filter(|e| informative.binary_search(e).is_err())
            .collect();
        Ok(SubgraphSplit {
            informative,
            bias,
            ratio,
        })
    }

    /// Uniformly random informative set of the standard size; the masking
    /// used when the generator is ablated.
    pub fn random<R: Rng + ?Sized>(s: &Snapshot, ratio: f64, rng: &mut R) -> Result<Self> {
        if s.num_edges() == 0 {
            return Err(Error::Empty("random split"));
        }
        let k = informative_count(s.num_edges(), ratio);
        let chosen = s.edges().choose_multiple(rng, k).copied().collect();
        Self::from_informative(s, chosen, ratio)
    }

    pub fn informative(&self) -> &[Edge] {
        &self.informative
    }

    pub fn bias(&self) -> &[Edge] {
        &self.bias
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkTask {
    Detection,
    Prediction,
    NewPrediction,
}

/// Held-out positives with equally many sampled negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkEvalSplit {
    pub kind: LinkTask,
    /// Edges the model may train on (for prediction tasks: the observed
    /// snapshot preceding the target).
    pub train: Vec<Edge>,
    pub val_pos: Vec<Edge>,
    pub val_neg: Vec<Edge>,
    pub test_pos: Vec<Edge>,
    pub test_neg: Vec<Edge>,
}

/// Samples `count` distinct node pairs among the active nodes of `s` that
/// are neither edges of `s` nor in `exclude`.
pub fn sample_non_edges<R: Rng + ?Sized>(
    s: &Snapshot,
    count: usize,
    exclude: &HashSet<Edge>,
    rng: &mut R,
) -> Result<Vec<Edge>> {
    let nodes = s.active_nodes();
    let cap = pair_capacity(nodes.len());
    let blocked = s.num_edges()
        + exclude
            .iter()
            .filter(|e| !s.contains(**e) && s.is_active(e.0) && s.is_active(e.1))
            .count();
    let available = cap.saturating_sub(blocked);
    if count > available {
        return Err(Error::Capacity {
            requested: count,
            available,
        });
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let usable = |e: Edge| !s.contains(e) && !exclude.contains(&e);
    if count * 2 > available {
        let mut all: Vec<Edge> = (0..cap)
            .map(|k| {
                let (i, j) = pair_from_index(nodes.len(), k);
                (nodes[i], nodes[j])
            })
            .filter(|&e| usable(e))
            .collect();
        all.shuffle(rng);
        all.truncate(count);
        return Ok(all);
    }
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let i = nodes[rng.random_range(0..nodes.len())];
        let j = nodes[rng.random_range(0..nodes.len())];
        if i == j {
            continue;
        }
        let e = edge(i, j);
        if usable(e) && seen.insert(e) {
            out.push(e);
        }
    }
    Ok(out)
}

/// Holds out `floor(val_frac * m)` validation and `floor(test_frac * m)`
/// test edges, each paired with as many sampled non-edges.
pub fn split_link_detection<R: Rng + ?Sized>(
    s: &Snapshot,
    val_frac: f64,
    test_frac: f64,
    rng: &mut R,
) -> Result<LinkEvalSplit> {
    let m = s.num_edges();
    if m < 10 {
        return Err(Error::TooFewEdges { have: m, need: 10 });
    }
    let n_test = (test_frac * m as f64).floor() as usize;
    let n_val = (val_frac * m as f64).floor() as usize;
    let mut shuffled = s.edges().to_vec();
    shuffled.shuffle(rng);
    let test_pos: Vec<Edge> = shuffled[..n_test].to_vec();
    let val_pos: Vec<Edge> = shuffled[n_test..n_test + n_val].to_vec();
    let mut train: Vec<Edge> = shuffled[n_test + n_val..].to_vec();
    train.sort_unstable();

    let test_neg = sample_non_edges(s, n_test, &HashSet::new(), rng)?;
    let taken: HashSet<Edge> = test_neg.iter().copied().collect();
    let val_neg = sample_non_edges(s, n_val, &taken, rng)?;
    Ok(LinkEvalSplit {
        kind: LinkTask::Detection,
        train,
        val_pos,
        val_neg,
        test_pos,
        test_neg,
    })
}

/// Targets for forecasting snapshot `t + 1` from snapshots up to `t`.
/// An empty positive set is reported as [`Error::EmptyTarget`].
pub fn build_prediction_targets<R: Rng + ?Sized>(
    g: &DynamicGraph,
    t: usize,
    kind: LinkTask,
    rng: &mut R,
) -> Result<LinkEvalSplit> {
    if t + 1 >= g.len() {
        return Err(Error::config(
            "t",
            format!("{t} has no following snapshot in a graph of length {}", g.len()),
        ));
    }
    let (cur, next) = (g.snapshot(t), g.snapshot(t + 1));
    let test_pos: Vec<Edge> = match kind {
        LinkTask::Prediction => next.edges().to_vec(),
        LinkTask::NewPrediction => next
            .edges()
            .iter()
            .copied()
            .filter(|&e| !cur.contains(e))
            .collect(),
        LinkTask::Detection => {
            return Err(Error::config("task", "detection targets come from split_link_detection"))
        }
    };
    if test_pos.is_empty() {
        return Err(Error::EmptyTarget(t + 1));
    }
    let test_neg = sample_non_edges(next, test_pos.len(), &HashSet::new(), rng)?;
    Ok(LinkEvalSplit {
        kind,
        train: cur.edges().to_vec(),
        val_pos: Vec::new(),
        val_neg: Vec::new(),
        test_pos,
        test_neg,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::graph::Features;

    fn random_snapshot(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Snapshot {
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.random_bool(p) {
                    edges.push((u, v));
                }
            }
        }
        Snapshot::new(edges, vec![true; n]).unwrap()
    }

    #[test]
    fn informative_count_rounds_and_clamps() {
        assert_eq!(informative_count(5, 0.4), 2);
        assert_eq!(informative_count(81, 0.1), 8);
        assert_eq!(informative_count(3, 0.1), 1);
        assert_eq!(informative_count(7, 1.0), 7);
    }

    #[test]
    fn random_split_partitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_snapshot(&mut rng, 15, 0.3);
        let sp = SubgraphSplit::random(&s, 0.1, &mut rng).unwrap();
        assert_eq!(sp.informative().len(), informative_count(s.num_edges(), 0.1));
        let mut all: Vec<Edge> = sp.informative().iter().chain(sp.bias()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, s.edges());
    }

    #[test]
    fn detection_split_sizes_for_100_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let edges: Vec<Edge> = (0..100).map(|i| (i, i + 1)).collect();
        let s = Snapshot::from_edges(101, edges).unwrap();
        let sp = split_link_detection(&s, DEFAULT_VAL_FRAC, DEFAULT_TEST_FRAC, &mut rng).unwrap();
        assert_eq!((sp.train.len(), sp.val_pos.len(), sp.test_pos.len()), (85, 5, 10));
        assert_eq!(sp.val_neg.len(), 5);
        assert_eq!(sp.test_neg.len(), 10);

        let mut all: Vec<Edge> = sp.train.iter().chain(&sp.val_pos).chain(&sp.test_pos).copied().collect();
        all.sort_unstable();
        assert_eq!(all, s.edges());
        for e in sp.val_neg.iter().chain(&sp.test_neg) {
            assert!(!s.contains(*e));
        }
        let negs: HashSet<_> = sp.val_neg.iter().chain(&sp.test_neg).collect();
        assert_eq!(negs.len(), 15);
    }

    #[test]
    fn detection_split_needs_ten_edges() {
        let s = Snapshot::from_edges(10, (0..9).map(|i| (i, i + 1))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            split_link_detection(&s, 0.05, 0.1, &mut rng),
            Err(Error::TooFewEdges { have: 9, need: 10 })
        ));
    }

    #[test]
    fn non_edge_sampling_reports_exhaustion() {
        // K4 minus one edge leaves exactly one non-edge.
        let s = Snapshot::from_edges(4, [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_non_edges(&s, 1, &HashSet::new(), &mut rng).unwrap(), vec![(2, 3)]);
        assert!(sample_non_edges(&s, 2, &HashSet::new(), &mut rng).is_err());
    }

    fn two_step(next: &[Edge]) -> DynamicGraph {
        let a = Snapshot::new([(0, 1)], vec![true; 4]).unwrap();
        let b = Snapshot::new(next.to_vec(), vec![true; 4]).unwrap();
        DynamicGraph::new(vec![a, b], Features::OneHot, 1).unwrap()
    }

    #[test]
    fn prediction_targets() {
        let g = two_step(&[(0, 1), (1, 2)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let new = build_prediction_targets(&g, 0, LinkTask::NewPrediction, &mut rng).unwrap();
        assert_eq!(new.test_pos, vec![(1, 2)]);
        assert_eq!(new.test_neg.len(), 1);
        assert!(!g.snapshot(1).contains(new.test_neg[0]));
        let all = build_prediction_targets(&g, 0, LinkTask::Prediction, &mut rng).unwrap();
        assert_eq!(all.test_pos, vec![(0, 1), (1, 2)]);
        assert_eq!(all.test_neg.len(), 2);
        assert!(build_prediction_targets(&g, 1, LinkTask::Prediction, &mut rng).is_err());
    }

    #[test]
    fn identical_snapshots_signal_empty_new_links() {
        let g = two_step(&[(0, 1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            build_prediction_targets(&g, 0, LinkTask::NewPrediction, &mut rng),
            Err(Error::EmptyTarget(1))
        ));
    }

    proptest! {
        #[test]
        fn detection_splits_are_seed_reproducible(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_snapshot(&mut rng, 20, 0.25);
            prop_assume!(s.num_edges() >= 10);
            let a = split_link_detection(&s, 0.05, 0.1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = split_link_detection(&s, 0.05, 0.1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(&a, &b);
            let pos: HashSet<_> = a.val_pos.iter().chain(&a.test_pos).collect();
            prop_assert!(a.val_neg.iter().chain(&a.test_neg).all(|e| !pos.contains(e) && !s.contains(*e)));
        }
    }
}
