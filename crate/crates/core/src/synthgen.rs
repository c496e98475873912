//! Synthetic dynamic graphs whose evolution is driven by a few hub nodes.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{edge, DynamicGraph, Edge, Features, Snapshot};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub num_hubs: usize,
    pub snapshots: usize,
    /// Probability of each hub / non-hub link in the first snapshot.
    pub hub_attach_prob: f64,
    /// Probability of each non-hub pair being linked.
    pub background_edge_prob: f64,
    /// Per-step probability that a background edge is replaced.
    pub churn_prob: f64,
    pub num_test_snapshots: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 30,
            num_hubs: 5,
            snapshots: 6,
            hub_attach_prob: 0.6,
            background_edge_prob: 0.02,
            churn_prob: 0.3,
            num_test_snapshots: 2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Infeasible(msg));
        if self.num_hubs >= self.n {
            return bad(format!("{} hubs among {} nodes", self.num_hubs, self.n));
        }
        for (name, p) in [
            ("hub_attach_prob", self.hub_attach_prob),
            ("background_edge_prob", self.background_edge_prob),
            ("churn_prob", self.churn_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.num_hubs > 0 && self.hub_attach_prob == 0.0 {
            return bad("hubs cannot attach with hub_attach_prob = 0".into());
        }
        if self.snapshots < 2 || self.num_test_snapshots >= self.snapshots {
            return bad(format!(
                "{} snapshots with {} held out",
                self.snapshots, self.num_test_snapshots
            ));
        }
        Ok(())
    }
}

struct State {
    hubs: Vec<usize>,
    is_hub: Vec<bool>,
    hub_links: BTreeSet<Edge>,
    background: BTreeSet<Edge>,
}

impl State {
    fn degrees(&self, n: usize) -> Vec<usize> {
        let mut d = vec![0; n];
        for &(u, v) in self.hub_links.iter().chain(&self.background) {
            d[u] += 1;
            d[v] += 1;
        }
        d
    }

    /// Makes every hub strictly outrank every non-hub by degree, dropping
    /// background edges of offenders first and growing the weakest hub
    /// otherwise.
    fn enforce_hub_ranks<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) -> Result<()> {
        if self.hubs.is_empty() {
            return Ok(());
        }
        for _ in 0..n * n {
            let deg = self.degrees(n);
            let (&weakest, min_hub) = self
                .hubs
                .iter()
                .map(|h| (h, deg[*h]))
                .min_by_key(|&(h, d)| (d, *h))
                .expect("hubs exist");
            let offender = (0..n).filter(|&v| !self.is_hub[v]).find(|&v| deg[v] >= min_hub);
            let Some(v) = offender else {
                return Ok(());
            };
            if let Some(&e) = self.background.iter().find(|&&(a, b)| a == v || b == v) {
                self.background.remove(&e);
                continue;
            }
            let candidates: Vec<usize> = (0..n)
                .filter(|&w| !self.is_hub[w] && !self.hub_links.contains(&edge(weakest, w)))
                .collect();
            if candidates.is_empty() {
                break;
            }
            let low = candidates.iter().map(|&w| deg[w]).min().expect("nonempty");
            let lowest: Vec<usize> = candidates.into_iter().filter(|&w| deg[w] == low).collect();
            let w = lowest[rng.random_range(0..lowest.len())];
            self.hub_links.insert(edge(weakest, w));
        }
        Err(Error::Infeasible("hubs cannot outrank every other node".into()))
    }

    fn snapshot(&self, n: usize) -> Result<Snapshot> {
        Snapshot::from_edges(n, self.hub_links.iter().chain(&self.background).copied())
    }
}

/// Generates the graph and returns it with the planted hub ids, ascending.
///
/// The first snapshot links each non-hub to each hub with
/// `hub_attach_prob`, and to at least one hub in any case, then adds
/// background edges among non-hubs. Every later snapshot keeps all hub
/// links, adds each missing one with probability
/// `churn_prob * hub_attach_prob / 2`, and replaces each background edge
/// with probability `churn_prob` by a fresh uniform non-hub pair. Hubs
/// strictly outrank all other nodes by degree in every snapshot.
pub fn generate_hub_dynamic_graph(cfg: &SynthConfig) -> Result<(DynamicGraph, Vec<usize>)> {
    cfg.validate()?;
    let n = cfg.n;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut hubs: Vec<usize> = sample(&mut rng, n, cfg.num_hubs).into_vec();
    hubs.sort_unstable();
    let mut is_hub = vec![false; n];
    hubs.iter().for_each(|&h| is_hub[h] = true);
    let others: Vec<usize> = (0..n).filter(|&v| !is_hub[v]).collect();

    let mut state = State {
        hubs: hubs.clone(),
        is_hub,
        hub_links: BTreeSet::new(),
        background: BTreeSet::new(),
    };
    if !hubs.is_empty() {
        for &v in &others {
            let mut linked = false;
            for &h in &hubs {
                if rng.random_bool(cfg.hub_attach_prob) {
                    state.hub_links.insert(edge(h, v));
                    linked = true;
                }
            }
            if !linked {
                state.hub_links.insert(edge(hubs[rng.random_range(0..hubs.len())], v));
            }
        }
    }
    for (i, &u) in others.iter().enumerate() {
        for &v in &others[i + 1..] {
            if rng.random_bool(cfg.background_edge_prob) {
                state.background.insert(edge(u, v));
            }
        }
    }
    state.enforce_hub_ranks(n, &mut rng)?;
    let mut snapshots = vec![state.snapshot(n)?];

    let grow = cfg.churn_prob * cfg.hub_attach_prob / 2.0;
    let free_pairs = others.len() * others.len().saturating_sub(1) / 2;
    for _ in 1..cfg.snapshots {
        for &h in &hubs {
            for &v in &others {
                if !state.hub_links.contains(&edge(h, v)) && rng.random_bool(grow) {
                    state.hub_links.insert(edge(h, v));
                }
            }
        }
        let current: Vec<Edge> = state.background.iter().copied().collect();
        let mut replaced = 0;
        for e in current {
            if rng.random_bool(cfg.churn_prob) {
                state.background.remove(&e);
                replaced += 1;
            }
        }
        let target = (state.background.len() + replaced).min(free_pairs);
        while state.background.len() < target {
            let u = others[rng.random_range(0..others.len())];
            let v = others[rng.random_range(0..others.len())];
            if u != v {
                state.background.insert(edge(u, v));
            }
        }
        state.enforce_hub_ranks(n, &mut rng)?;
        snapshots.push(state.snapshot(n)?);
    }
    let g = DynamicGraph::new(snapshots, Features::OneHot, cfg.num_test_snapshots)?;
    Ok((g, hubs))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn top_degree_nodes(s: &Snapshot, k: usize) -> Option<Vec<usize>> {
        let deg = s.degrees();
        let mut order: Vec<usize> = (0..deg.len()).collect();
        order.sort_by_key(|&v| std::cmp::Reverse(deg[v]));
        if k > 0 && k < deg.len() && deg[order[k - 1]] == deg[order[k]] {
            return None;
        }
        let mut top = order[..k].to_vec();
        top.sort_unstable();
        Some(top)
    }

    #[test]
    fn hubs_are_the_top_degree_nodes() {
        for seed in 0..20 {
            let cfg = SynthConfig {
                seed,
                ..SynthConfig::default()
            };
            let (g, hubs) = generate_hub_dynamic_graph(&cfg).unwrap();
            assert_eq!(hubs.len(), 5);
            assert_eq!(g.len(), 6);
            for s in g.snapshots() {
                assert_eq!(top_degree_nodes(s, 5), Some(hubs.clone()));
            }
        }
    }

    #[test]
    fn hub_links_persist() {
        let (g, hubs) = generate_hub_dynamic_graph(&SynthConfig::default()).unwrap();
        for pair in g.snapshots().windows(2) {
            for &e in pair[0].edges() {
                if hubs.contains(&e.0) || hubs.contains(&e.1) {
                    assert!(pair[1].contains(e), "{e:?}");
                }
            }
        }
    }

    #[test]
    fn background_edges_churn() {
        let cfg = SynthConfig {
            background_edge_prob: 0.2,
            churn_prob: 0.5,
            ..SynthConfig::default()
        };
        let (g, hubs) = generate_hub_dynamic_graph(&cfg).unwrap();
        let background = |s: &Snapshot| -> BTreeSet<Edge> {
            s.edges().iter().copied().filter(|e| !hubs.contains(&e.0) && !hubs.contains(&e.1)).collect()
        };
        assert_ne!(background(g.snapshot(0)), background(g.snapshot(1)));
    }

    #[test]
    fn zero_hubs_give_a_background_graph() {
        let cfg = SynthConfig {
            num_hubs: 0,
            background_edge_prob: 0.2,
            ..SynthConfig::default()
        };
        let (g, hubs) = generate_hub_dynamic_graph(&cfg).unwrap();
        assert!(hubs.is_empty());
        assert!(g.snapshot(0).num_edges() > 0);
    }

    #[test]
    fn equal_seeds_equal_graphs() {
        let cfg = SynthConfig {
            seed: 42,
            ..SynthConfig::default()
        };
        assert_eq!(generate_hub_dynamic_graph(&cfg).unwrap(), generate_hub_dynamic_graph(&cfg).unwrap());
        let other = SynthConfig { seed: 43, ..cfg };
        assert_ne!(generate_hub_dynamic_graph(&other).unwrap().0, generate_hub_dynamic_graph(&SynthConfig { seed: 42, ..other.clone() }).unwrap().0);
    }

    #[test]
    fn infeasible_configs() {
        for cfg in [
            SynthConfig {
                hub_attach_prob: 0.0,
                ..SynthConfig::default()
            },
            SynthConfig {
                num_hubs: 30,
                ..SynthConfig::default()
            },
            SynthConfig {
                churn_prob: 1.5,
                ..SynthConfig::default()
            },
            SynthConfig {
                snapshots: 1,
                num_test_snapshots: 0,
                ..SynthConfig::default()
            },
        ] {
            assert!(matches!(generate_hub_dynamic_graph(&cfg), Err(Error::Infeasible(_))), "{cfg:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn ranks_hold_for_any_feasible_config(
            seed in any::<u64>(),
            n in 6usize..40,
            hubs in 1usize..5,
            attach in 0.05f64..1.0,
            background in 0.0f64..0.5,
            churn in 0.0f64..1.0,
        ) {
            let cfg = SynthConfig {
                n,
                num_hubs: hubs,
                snapshots: 4,
                hub_attach_prob: attach,
                background_edge_prob: background,
                churn_prob: churn,
                num_test_snapshots: 1,
                seed,
            };
            match generate_hub_dynamic_graph(&cfg) {
                Ok((g, planted)) => {
                    for s in g.snapshots() {
                        prop_assert_eq!(top_degree_nodes(s, hubs), Some(planted.clone()));
                    }
                }
                Err(Error::Infeasible(_)) => {}
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }
}
