//! Ranking metrics, link-task evaluation and the linear classification probe.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dgmae::{link_score, Representation};
use crate::diffmath::{glorot, Adam, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::{Edge, LinkEvalSplit, NodeLabels};

/// Scores with binary labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredPairs {
    items: Vec<(f64, bool)>,
}

impl ScoredPairs {
    pub fn new(items: Vec<(f64, bool)>) -> Result<Self> {
        if let Some((s, _)) = items.iter().find(|(s, _)| !s.is_finite()) {
            return Err(Error::Domain {
                op: "scored pairs",
                detail: format!("non-finite score {s}"),
            });
        }
        Ok(ScoredPairs { items })
    }

    pub fn from_parts(positives: &[f64], negatives: &[f64]) -> Result<Self> {
        let items = positives
            .iter()
            .map(|&s| (s, true))
            .chain(negatives.iter().map(|&s| (s, false)))
            .collect();
        Self::new(items)
    }

    pub fn items(&self) -> &[(f64, bool)] {
        &self.items
    }

    pub fn num_positive(&self) -> usize {
        self.items.iter().filter(|(_, y)| *y).count()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half. Computed from midranks.
pub fn auc(sp: &ScoredPairs) -> Result<f64> {
    let pos = sp.num_positive();
    let neg = sp.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut sorted: Vec<(f64, bool)> = sp.items.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let pos_here = sorted[i..=j].iter().filter(|(_, y)| *y).count();
        rank_sum += mid * pos_here as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean precision at the rank of each positive, ranking by descending score
/// with ties kept in input order.
pub fn average_precision(sp: &ScoredPairs) -> Result<f64> {
    let pos = sp.num_positive();
    if pos == 0 {
        return Err(Error::Empty("positives for average precision"));
    }
    let mut order: Vec<&(f64, bool)> = sp.items.iter().collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (k, (_, y)) in order.iter().enumerate() {
        if *y {
            hits += 1;
            total += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(total / pos as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkMetrics {
    pub auc: f64,
    pub ap: f64,
}

fn score_edges(z: &Tensor, active: &[bool], edges: &[Edge]) -> Result<Vec<f64>> {
    edges.iter().map(|&(u, v)| link_score(z, active, u, v)).collect()
}

/// Scores the test pairs of `split` with the embeddings at `step` and
/// returns AUC and AP. `active` is the node mask of the evaluated snapshot.
pub fn eval_link_task(rep: &Representation, split: &LinkEvalSplit, step: usize, active: &[bool]) -> Result<LinkMetrics> {
    let z = rep
        .z
        .get(step)
        .ok_or_else(|| Error::InvalidSnapshot(format!("no representation for snapshot {step}")))?;
    if split.test_pos.is_empty() {
        return Err(Error::EmptyTarget(step));
    }
    let pos = score_edges(z, active, &split.test_pos)?;
    let neg = score_edges(z, active, &split.test_neg)?;
    let sp = ScoredPairs::from_parts(&pos, &neg)?;
    Ok(LinkMetrics {
        auc: auc(&sp)?,
        ap: average_precision(&sp)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 300,
            lr: 2e-2,
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

/// Per-class shuffled split: `round(f * count)` of each class to training,
/// keeping at least one node on each side when the class has two or more.
fn stratified_split(labels: &NodeLabels, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&node, &class) in &labels.labels {
        by_class.entry(class).or_default().push(node);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (class, mut nodes) in by_class {
        nodes.shuffle(rng);
        let c = nodes.len();
        let mut k = (fraction * c as f64).round() as usize;
        if c >= 2 {
            k = k.clamp(1, c - 1);
        }
        train.extend(nodes[..k].iter().map(|&v| (v, class)));
        test.extend(nodes[k..].iter().map(|&v| (v, class)));
    }
    (train, test)
}

/// Trains a softmax linear classifier on frozen embeddings `z` and returns
/// accuracy on the held-out nodes.
pub fn node_classification_probe(z: &Tensor, labels: &NodeLabels, cfg: &ProbeConfig) -> Result<f64> {
    if cfg.epochs == 0 {
        return Err(Error::config("probe_epochs", "must be positive"));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(Error::config("train_fraction", format!("{} is outside (0, 1)", cfg.train_fraction)));
    }
    if let Some(&node) = labels.labels.keys().find(|&&v| v >= z.rows()) {
        return Err(Error::InvalidSnapshot(format!("label for unknown node {node}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train, test) = stratified_split(labels, cfg.train_fraction, &mut rng);
    let classes = |set: &[(usize, usize)]| set.iter().map(|&(_, c)| c).collect::<std::collections::BTreeSet<_>>().len();
    if classes(&train) < 2 || test.is_empty() {
        return Err(Error::SingleClass);
    }
    let k = labels.num_classes;
    let mut store = ParamStore::new();
    let w = store.add("probe.weight", glorot(&mut rng, z.cols(), k));
    let b = store.add("probe.bias", Tensor::zeros(1, k));
    let train_nodes: Vec<usize> = train.iter().map(|&(v, _)| v).collect();
    let x_train = z.select_rows(&train_nodes);
    let cells: Vec<(usize, usize)> = train.iter().enumerate().map(|(i, &(_, c))| (i, c)).collect();
    let mut adam = Adam::new(&store, cfg.lr);
    for _ in 0..cfg.epochs {
        let mut tape = Tape::new();
        let x = tape.constant(x_train.clone());
        let wv = tape.param(&store, w);
        let bv = tape.param(&store, b);
        let xw = tape.matmul(x, wv)?;
        let logits = tape.add_row(xw, bv)?;
        let lse = tape.log_sum_exp_rows(logits)?;
        let target = tape.gather_elements(logits, &cells)?;
        let nll = tape.sub(lse, target)?;
        let loss = tape.mean(nll)?;
        let grads = tape.backward(loss, &store)?;
        adam.step(&mut store, &grads)?;
    }
    let test_nodes: Vec<usize> = test.iter().map(|&(v, _)| v).collect();
    let logits = z.select_rows(&test_nodes).matmul(store.get(w))?;
    let bias = store.get(b);
    let correct = test
        .iter()
        .enumerate()
        .filter(|&(i, &(_, class))| {
            let row = logits.row(i);
            let best = (0..k)
                .max_by(|&a, &c| (row[a] + bias.data()[a]).total_cmp(&(row[c] + bias.data()[c])).then(c.cmp(&a)))
                .expect("at least two classes");
            best == class
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Empty("values to summarize"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(Summary { mean, std })
}
