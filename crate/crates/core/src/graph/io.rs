//! Text formats for datasets, labels and node features.
//!
//! Dataset: one `<snapshot> <src> <dst>` triple per line, snapshots
//! ascending without gaps, `#` starts a comment. Node ids are remapped to a
//! dense `0..n` range in ascending id order unless they already are one.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;

use super::{DynamicGraph, Features, Snapshot};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};

/// Width of learnable feature matrices.
pub const LEARNABLE_FEATURE_DIM: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FeatureMode {
    OneHot,
    Learnable,
    File(PathBuf),
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let body = raw.split('#').next().unwrap_or("");
        let toks: Vec<&str> = body.split_whitespace().collect();
        (!toks.is_empty()).then_some((i + 1, toks))
    })
}

/// Parses the dataset format from a string.
pub fn parse_dynamic_graph(
    text: &str,
    features: FeatureMode,
    num_test_snapshots: usize,
) -> Result<DynamicGraph> {
    let mut rows: Vec<(usize, u64, u64)> = Vec::new();
    let mut slot = 0usize;
    let mut prev: Option<u64> = None;
    for (line, toks) in content_lines(text) {
        if toks.len() != 3 {
            return Err(parse_err(line, format!("expected 3 fields, found {}", toks.len())));
        }
        let nums: Vec<u64> = toks
            .iter()
            .map(|t| t.parse::<u64>().map_err(|_| parse_err(line, format!("not a non-negative integer: `{t}`"))))
            .collect::<Result<_>>()?;
        let (ts, u, v) = (nums[0], nums[1], nums[2]);
        match prev {
            None => {}
            Some(p) if ts == p => {}
            Some(p) if ts == p + 1 => slot += 1,
            Some(p) if ts < p => {
                return Err(parse_err(line, format!("snapshot index {ts} after {p}")));
            }
            Some(p) => {
                return Err(parse_err(line, format!("snapshot gap between {p} and {ts}")));
            }
        }
        prev = Some(ts);
        if u == v {
            warn!("line {line}: dropping self-loop on node {u}");
            // The node still exists at this step.
        }
        rows.push((slot, u, v));
    }
    if rows.is_empty() {
        return Err(parse_err(0, "no edges"));
    }

    let ids: BTreeSet<u64> = rows.iter().flat_map(|&(_, u, v)| [u, v]).collect();
    let node_ids: Vec<u64> = ids.into_iter().collect();
    let n = node_ids.len();
    let index: BTreeMap<u64, usize> = node_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let t_count = slot + 1;
    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); t_count];
    let mut active: Vec<Vec<bool>> = vec![vec![false; n]; t_count];
    for (t, u, v) in rows {
        let (iu, iv) = (index[&u], index[&v]);
        active[t][iu] = true;
        active[t][iv] = true;
        if iu != iv {
            edges[t].push((iu, iv));
        }
    }
    let snapshots = edges
        .into_iter()
        .zip(active)
        .map(|(e, a)| Snapshot::new(e, a))
        .collect::<Result<Vec<_>>>()?;

    let features = match features {
        FeatureMode::OneHot => Features::OneHot,
        FeatureMode::Learnable => Features::Learnable {
            dim: LEARNABLE_FEATURE_DIM,
        },
        FeatureMode::File(path) => Features::Matrix(load_features(&path, n)?),
    };
    DynamicGraph::with_node_ids(snapshots, features, num_test_snapshots, node_ids)
}

pub fn load_dynamic_graph(
    path: impl AsRef<Path>,
    features: FeatureMode,
    num_test_snapshots: usize,
) -> Result<DynamicGraph> {
    let text = fs::read_to_string(path)?;
    parse_dynamic_graph(&text, features, num_test_snapshots)
}

/// Writes `g` in the dataset format using the original node ids.
pub fn write_dynamic_graph<W: Write>(g: &DynamicGraph, mut out: W) -> Result<()> {
    writeln!(out, "# snapshot src dst")?;
    for (t, s) in g.snapshots().iter().enumerate() {
        for &(u, v) in s.edges() {
            writeln!(out, "{t} {} {}", g.node_ids()[u], g.node_ids()[v])?;
        }
    }
    Ok(())
}

/// Feature file: header `n d`, then `n` rows of `d` reals.
fn load_features(path: &Path, n_expected: usize) -> Result<Tensor> {
    let text = fs::read_to_string(path)?;
    let mut lines = content_lines(&text);
    let (hl, header) = lines.next().ok_or_else(|| parse_err(1, "empty feature file"))?;
    if header.len() != 2 {
        return Err(parse_err(hl, "feature header must be `n d`"));
    }
    let n: usize = header[0].parse().map_err(|_| parse_err(hl, "bad row count"))?;
    let d: usize = header[1].parse().map_err(|_| parse_err(hl, "bad column count"))?;
    if n != n_expected {
        return Err(parse_err(hl, format!("{n} feature rows for {n_expected} nodes")));
    }
    let mut data = Vec::with_capacity(n * d);
    let mut count = 0;
    for (line, toks) in lines {
        if toks.len() != d {
            return Err(parse_err(line, format!("expected {d} values, found {}", toks.len())));
        }
        for t in toks {
            let v: f64 = t.parse().map_err(|_| parse_err(line, format!("not a real: `{t}`")))?;
            if !v.is_finite() {
                return Err(parse_err(line, "non-finite feature"));
            }
            data.push(v);
        }
        count += 1;
    }
    if count != n {
        return Err(parse_err(0, format!("expected {n} feature rows, found {count}")));
    }
    Tensor::from_vec(n, d, data)
}

/// Class label per internal node index.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeLabels {
    pub labels: BTreeMap<usize, usize>,
    pub num_classes: usize,
}

impl NodeLabels {
    pub fn new(labels: BTreeMap<usize, usize>) -> Self {
        let num_classes = labels.values().max().map_or(0, |m| m + 1);
        NodeLabels {
            labels,
            num_classes,
        }
    }
}

/// Labels file: `<node-id> <class-id>` per line, ids as in the dataset.
pub fn load_labels(path: impl AsRef<Path>, g: &DynamicGraph) -> Result<NodeLabels> {
    let text = fs::read_to_string(path)?;
    let index: BTreeMap<u64, usize> = g.node_ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut labels = BTreeMap::new();
    for (line, toks) in content_lines(&text) {
        if toks.len() != 2 {
            return Err(parse_err(line, "expected `<node-id> <class-id>`"));
        }
        let id: u64 = toks[0].parse().map_err(|_| parse_err(line, "bad node id"))?;
        let class: usize = toks[1].parse().map_err(|_| parse_err(line, "bad class id"))?;
        let &node = index
            .get(&id)
            .ok_or_else(|| parse_err(line, format!("unknown node {id}")))?;
        labels.insert(node, class);
    }
    Ok(NodeLabels::new(labels))
}
