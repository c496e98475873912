//! End-to-end runs: both training stages, the requested evaluation and
//! aggregation over seeds.

use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgmae::{train_dgmae, DgmaeConfig, Representation, TrainedDgmae};
use crate::error::{Error, Result};
use crate::graph::{
    build_prediction_targets, split_link_detection, DynamicGraph, LinkEvalSplit, LinkTask, NodeLabels, Snapshot,
    SubgraphSplit, DEFAULT_TEST_FRAC, DEFAULT_VAL_FRAC,
};
use crate::isg::{train_isg, IsgConfig};
use crate::metrics::{eval_link_task, node_classification_probe, summarize, LinkMetrics, ProbeConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Detect,
    Predict,
    NewPredict,
    Classify,
}

impl Task {
    pub fn link_task(self) -> Option<LinkTask> {
        match self {
            Task::Detect => Some(LinkTask::Detection),
            Task::Predict => Some(LinkTask::Prediction),
            Task::NewPredict => Some(LinkTask::NewPrediction),
            Task::Classify => None,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detect" => Ok(Task::Detect),
            "predict" => Ok(Task::Predict),
            "new-predict" => Ok(Task::NewPredict),
            "classify" => Ok(Task::Classify),
            other => Err(Error::config("task", format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    None,
    /// Uniformly random informative subgraphs instead of stage one.
    NoIsg,
    /// Stage one without the mutual-information term.
    NoMi,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no-isg" => Ok(Ablation::NoIsg),
            "no-mi" => Ok(Ablation::NoMi),
            other => Err(Error::config("ablation", format!("unknown ablation `{other}`"))),
        }
    }
}

/// Which snapshots detection metrics are averaged over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectionAverage {
    TestSnapshots,
    AllSnapshots,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub r: f64,
    pub lambda: f64,
    pub tau: f64,
    pub embed_dim: usize,
    pub hidden: usize,
    pub isg_epochs: usize,
    pub dgmae_epochs: usize,
    pub learning_rate: f64,
    pub seeds: Vec<u64>,
    pub ablation: Ablation,
    pub detection_average: DetectionAverage,
    pub dense_bce: bool,
    pub sampled_softmax: bool,
    pub probe_epochs: usize,
    pub probe_learning_rate: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Detect,
            r: 0.1,
            lambda: 0.5,
            tau: 0.7,
            embed_dim: 32,
            hidden: 32,
            isg_epochs: 100,
            dgmae_epochs: 1000,
            learning_rate: 1e-3,
            seeds: (0..10).collect(),
            ablation: Ablation::None,
            detection_average: DetectionAverage::TestSnapshots,
            dense_bce: false,
            sampled_softmax: false,
            probe_epochs: 300,
            probe_learning_rate: 2e-2,
        }
    }
}

/// Stream constants mixed into a run seed so each random consumer gets an
/// independent generator.
const EVAL_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
const DGMAE_STREAM: u64 = 0xbf58_476d_1ce4_e5b9;
const MASK_STREAM: u64 = 0x94d0_49bb_1331_11eb;

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r <= 1.0) {
            return Err(Error::config("r", format!("{} is outside (0, 1]", self.r)));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim", "must be positive"));
        }
        if self.hidden == 0 || self.hidden % 2 != 0 {
            return Err(Error::config("hidden", format!("{} must be even and positive", self.hidden)));
        }
        if self.probe_epochs == 0 {
            return Err(Error::config("probe_epochs", "must be positive"));
        }
        self.isg_config(0).validate()?;
        self.dgmae_config(0).validate()
    }

    pub fn isg_config(&self, seed: u64) -> IsgConfig {
        IsgConfig {
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            epochs: self.isg_epochs,
            lambda: if self.ablation == Ablation::NoMi { 0.0 } else { self.lambda },
            tau: self.tau,
            ratio: self.r,
            lr: self.learning_rate,
            seed,
            dense_bce: self.dense_bce,
        }
    }

    pub fn dgmae_config(&self, seed: u64) -> DgmaeConfig {
        DgmaeConfig {
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            epochs: self.dgmae_epochs,
            lr: self.learning_rate,
            seed: seed ^ DGMAE_STREAM,
            sampled_softmax: self.sampled_softmax,
        }
    }
}

/// Row identity: a seed or the aggregate over all seeds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RowKey {
    Seed(u64),
    Label(String),
}

/// One line of the metrics output. Link tasks fill `auc` and `ap`,
/// classification fills `acc`; aggregate rows also carry standard
/// deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub task: Task,
    pub seed: RowKey,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_std: Option<f64>,
    /// Detection metrics averaged over every snapshot, next to the primary
    /// ones averaged as configured.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc_all_snapshots: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap_all_snapshots: Option<f64>,
    pub runtime_seconds: f64,
}

impl MetricsRow {
    fn empty(task: Task, seed: RowKey) -> Self {
        MetricsRow {
            task,
            seed,
            auc: None,
            ap: None,
            acc: None,
            auc_std: None,
            ap_std: None,
            acc_std: None,
            auc_all_snapshots: None,
            ap_all_snapshots: None,
            runtime_seconds: 0.0,
        }
    }

    /// The row without its wall-clock time, for reproducibility checks.
    pub fn without_runtime(&self) -> MetricsRow {
        MetricsRow {
            runtime_seconds: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub task: Task,
    pub r: f64,
    pub lambda: f64,
    pub tau: f64,
    #[serde(rename = "D")]
    pub embed_dim: usize,
    pub isg_epochs: usize,
    pub dgmae_epochs: usize,
    pub learning_rate: f64,
    pub ablation: Ablation,
    pub detection_average: DetectionAverage,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub header: ReportHeader,
    /// One row per seed followed by the aggregate row.
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn aggregate(&self) -> &MetricsRow {
        self.rows.last().expect("reports always hold an aggregate row")
    }

    pub fn seed_rows(&self) -> &[MetricsRow] {
        &self.rows[..self.rows.len() - 1]
    }

    /// Header object, then one JSON object per row.
    pub fn to_json_lines(&self) -> String {
        let mut out = serde_json::json!({ "header": self.header }).to_string();
        out.push('\n');
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row).expect("rows serialize"));
            out.push('\n');
        }
        out
    }
}

/// Stage one, or its random replacement under the `no-isg` ablation.
pub fn informative_splits(g: &DynamicGraph, cfg: &RunConfig, seed: u64) -> Result<Vec<SubgraphSplit>> {
    match cfg.ablation {
        Ablation::NoIsg => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ MASK_STREAM);
            g.snapshots()
                .iter()
                .map(|s| random_or_empty(s, cfg.r, &mut rng))
                .collect()
        }
        Ablation::None | Ablation::NoMi => Ok(train_isg(g, &cfg.isg_config(seed))?.splits),
    }
}

fn random_or_empty(s: &Snapshot, r: f64, rng: &mut ChaCha8Rng) -> Result<SubgraphSplit> {
    if s.num_edges() == 0 {
        SubgraphSplit::from_informative(s, Vec::new(), r)
    } else {
        SubgraphSplit::random(s, r, rng)
    }
}

/// Both stages on `g`, returning the splits and the trained second stage.
pub fn train_stages(g: &DynamicGraph, cfg: &RunConfig, seed: u64) -> Result<(Vec<SubgraphSplit>, TrainedDgmae)> {
    let splits = informative_splits(g, cfg, seed)?;
    let trained = train_dgmae(g, &splits, &cfg.dgmae_config(seed))?;
    Ok((splits, trained))
}

/// Representations for `observed` snapshots from models trained on the
/// first `train_len` of them only.
fn representations_beyond_training(
    g: &DynamicGraph,
    cfg: &RunConfig,
    seed: u64,
    train_len: usize,
    observed: usize,
) -> Result<Representation> {
    let train_g = g.prefix(train_len)?;
    let snaps = &g.snapshots()[..observed];
    let splits = match cfg.ablation {
        Ablation::NoIsg => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ MASK_STREAM);
            snaps.iter().map(|s| random_or_empty(s, cfg.r, &mut rng)).collect::<Result<Vec<_>>>()?
        }
        Ablation::None | Ablation::NoMi => {
            let isg = train_isg(&train_g, &cfg.isg_config(seed))?;
            isg.params.generate_splits(&isg.store, snaps, cfg.r)?
        }
    };
    let dgmae = train_dgmae(&train_g, &splits[..train_len], &cfg.dgmae_config(seed))?;
    dgmae.params.infer(&dgmae.store, snaps, &splits)
}

fn mean_metrics(ms: &[LinkMetrics]) -> Result<LinkMetrics> {
    let auc: Vec<f64> = ms.iter().map(|m| m.auc).collect();
    let ap: Vec<f64> = ms.iter().map(|m| m.ap).collect();
    Ok(LinkMetrics {
        auc: summarize(&auc)?.mean,
        ap: summarize(&ap)?.mean,
    })
}

/// Per-snapshot detection splits; snapshots with too few edges stay whole
/// and are not evaluated.
pub fn detection_splits(g: &DynamicGraph, seed: u64) -> Result<Vec<Option<LinkEvalSplit>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_STREAM);
    g.snapshots()
        .iter()
        .enumerate()
        .map(|(t, s)| match split_link_detection(s, DEFAULT_VAL_FRAC, DEFAULT_TEST_FRAC, &mut rng) {
            Ok(split) => Ok(Some(split)),
            Err(Error::TooFewEdges { have, need }) => {
                warn!("snapshot {t}: {have} edges, fewer than {need}; not evaluated for detection");
                Ok(None)
            }
            Err(e) => Err(e),
        })
        .collect()
}

fn run_detection(g: &DynamicGraph, cfg: &RunConfig, seed: u64, row: &mut MetricsRow) -> Result<()> {
    let evals = detection_splits(g, seed)?;
    let train_snaps = g
        .snapshots()
        .iter()
        .zip(&evals)
        .map(|(s, e)| match e {
            Some(split) => s.with_edges(split.train.iter().copied()),
            None => Ok(s.clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    let train_g = g.replace_snapshots(train_snaps)?;
    let (_, trained) = train_stages(&train_g, cfg, seed)?;
    let rep = &trained.representation;
    let first_test = g.len() - g.num_test_snapshots();
    let mut all = Vec::new();
    let mut test = Vec::new();
    for (t, split) in evals.iter().enumerate() {
        let Some(split) = split else { continue };
        let m = eval_link_task(rep, split, t, g.snapshot(t).active())?;
        all.push(m);
        if t >= first_test {
            test.push(m);
        }
    }
    if all.is_empty() {
        return Err(Error::TooFewEdges {
            have: g.snapshots().iter().map(Snapshot::num_edges).max().unwrap_or(0),
            need: 10,
        });
    }
    let all_mean = mean_metrics(&all)?;
    let primary = match cfg.detection_average {
        DetectionAverage::AllSnapshots => all_mean,
        DetectionAverage::TestSnapshots => {
            if test.is_empty() {
                return Err(Error::config("detection_average", "no test snapshot has enough edges to evaluate"));
            }
            mean_metrics(&test)?
        }
    };
    row.auc = Some(primary.auc);
    row.ap = Some(primary.ap);
    row.auc_all_snapshots = Some(all_mean.auc);
    row.ap_all_snapshots = Some(all_mean.ap);
    Ok(())
}

fn run_prediction(g: &DynamicGraph, cfg: &RunConfig, kind: LinkTask, seed: u64, row: &mut MetricsRow) -> Result<()> {
    let t_len = g.len();
    let l = g.num_test_snapshots();
    if l == 0 {
        return Err(Error::config("num_test_snapshots", "prediction needs at least one test snapshot"));
    }
    let train_len = t_len - l;
    let rep = representations_beyond_training(g, cfg, seed, train_len, t_len - 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_STREAM);
    let mut ms = Vec::with_capacity(l);
    for target in train_len..t_len {
        let step = target - 1;
        let split = build_prediction_targets(g, step, kind, &mut rng)?;
        ms.push(eval_link_task(&rep, &split, step, g.snapshot(target).active())?);
    }
    let m = mean_metrics(&ms)?;
    row.auc = Some(m.auc);
    row.ap = Some(m.ap);
    Ok(())
}

fn run_classification(
    g: &DynamicGraph,
    labels: Option<&NodeLabels>,
    cfg: &RunConfig,
    seed: u64,
    row: &mut MetricsRow,
) -> Result<()> {
    let labels = labels.ok_or_else(|| Error::config("labels", "classification needs a labels file"))?;
    let (_, trained) = train_stages(g, cfg, seed)?;
    let z = trained.representation.z.last().expect("at least two snapshots");
    let probe = ProbeConfig {
        epochs: cfg.probe_epochs,
        lr: cfg.probe_learning_rate,
        seed: seed ^ EVAL_STREAM,
        ..ProbeConfig::default()
    };
    row.acc = Some(node_classification_probe(z, labels, &probe)?);
    Ok(())
}

/// One seed of the configured task.
pub fn run_seed(g: &DynamicGraph, labels: Option<&NodeLabels>, cfg: &RunConfig, seed: u64) -> Result<MetricsRow> {
    let start = Instant::now();
    let mut row = MetricsRow::empty(cfg.task, RowKey::Seed(seed));
    match cfg.task {
        Task::Detect => run_detection(g, cfg, seed, &mut row)?,
        Task::Predict => run_prediction(g, cfg, LinkTask::Prediction, seed, &mut row)?,
        Task::NewPredict => run_prediction(g, cfg, LinkTask::NewPrediction, seed, &mut row)?,
        Task::Classify => run_classification(g, labels, cfg, seed, &mut row)?,
    }
    row.runtime_seconds = start.elapsed().as_secs_f64();
    info!("seed {seed}: {}", serde_json::to_string(&row).unwrap_or_default());
    Ok(row)
}

fn aggregate_rows(task: Task, rows: &[MetricsRow]) -> Result<MetricsRow> {
    let mut agg = MetricsRow::empty(task, RowKey::Label("aggregate".into()));
    let column = |f: fn(&MetricsRow) -> Option<f64>| -> Result<Option<crate::metrics::Summary>> {
        let vals: Option<Vec<f64>> = rows.iter().map(f).collect();
        vals.map(|v| summarize(&v)).transpose()
    };
    if let Some(s) = column(|r| r.auc)? {
        agg.auc = Some(s.mean);
        agg.auc_std = Some(s.std);
    }
    if let Some(s) = column(|r| r.ap)? {
        agg.ap = Some(s.mean);
        agg.ap_std = Some(s.std);
    }
    if let Some(s) = column(|r| r.acc)? {
        agg.acc = Some(s.mean);
        agg.acc_std = Some(s.std);
    }
    agg.auc_all_snapshots = column(|r| r.auc_all_snapshots)?.map(|s| s.mean);
    agg.ap_all_snapshots = column(|r| r.ap_all_snapshots)?.map(|s| s.mean);
    agg.runtime_seconds = rows.iter().map(|r| r.runtime_seconds).sum();
    Ok(agg)
}

/// Runs every configured seed (in parallel) and appends the aggregate row.
pub fn run_pipeline(g: &DynamicGraph, labels: Option<&NodeLabels>, cfg: &RunConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let rows = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(g, labels, cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    let agg = aggregate_rows(cfg.task, &rows)?;
    let mut all = rows;
    all.push(agg);
    Ok(MetricsReport {
        header: ReportHeader {
            task: cfg.task,
            r: cfg.r,
            lambda: cfg.lambda,
            tau: cfg.tau,
            embed_dim: cfg.embed_dim,
            isg_epochs: cfg.isg_epochs,
            dgmae_epochs: cfg.dgmae_epochs,
            learning_rate: cfg.learning_rate,
            ablation: cfg.ablation,
            detection_average: cfg.detection_average,
            seeds: cfg.seeds.clone(),
        },
        rows: all,
    })
}

/// One full report per informative ratio, all with the same seeds.
pub fn sensitivity_sweep(
    g: &DynamicGraph,
    labels: Option<&NodeLabels>,
    cfg: &RunConfig,
    ratios: &[f64],
) -> Result<Vec<MetricsReport>> {
    if ratios.is_empty() {
        return Err(Error::config("r", "the sweep needs at least one ratio"));
    }
    ratios
        .iter()
        .map(|&r| {
            let run = RunConfig { r, ..cfg.clone() };
            run_pipeline(g, labels, &run)
        })
        .collect()
}
