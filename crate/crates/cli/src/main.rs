mod config;
mod error;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dygis::dgmae::write_representation;
use dygis::graph::{load_dynamic_graph, load_labels, write_dynamic_graph, DynamicGraph, FeatureMode, NodeLabels};
use dygis::isg::write_splits;
use dygis::pipeline::{
    informative_splits, run_pipeline, sensitivity_sweep, train_stages, Ablation, DetectionAverage, MetricsReport,
    RunConfig, Task,
};
use dygis::synthgen::{generate_hub_dynamic_graph, SynthConfig};
use log::info;
use serde_json::json;

use config::{FileConfig, Seeds};
use error::CliError;

const RESULTS_ENV: &str = "DYGIS_RESULTS_DIR";
const DEFAULT_TEST_SNAPSHOTS: usize = 3;

#[derive(Parser, Debug)]
#[command(name = "dygis", version, about = "Two-stage self-supervised learning on snapshot graphs")]
struct Cli {
    /// Flat `key = value` file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load a dataset and print its shape.
    IngestCheck(DataArgs),
    /// Run both stages and the evaluation for every seed.
    Train(TrainArgs),
    /// Run the full pipeline once per informative ratio.
    SweepR {
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated ratios in (0, 1].
        #[arg(long, value_delimiter = ',', required = true)]
        r_values: Vec<f64>,
    },
    /// Write a synthetic hub-driven dataset.
    Synth(SynthArgs),
    /// Train on the whole dataset and write the node representations.
    ExportReps(ExportArgs),
    /// Write the informative / bias edge partition of every snapshot.
    ExportSplits(ExportArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct DataArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// `one-hot`, `learnable` or `file:<path>`.
    #[arg(long)]
    feature_mode: Option<String>,
    #[arg(long)]
    test_snapshots: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    isg_epochs: Option<usize>,
    #[arg(long)]
    dgmae_epochs: Option<usize>,
    /// 1e-3 by default; 5e-3 is the usual alternative.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// `0,1,2` or `0..10`.
    #[arg(long)]
    seeds: Option<Seeds>,
    #[arg(long)]
    ablation: Option<String>,
    /// `test-snapshots` or `all-snapshots`.
    #[arg(long)]
    detection_average: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    dense_bce: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    sampled_softmax: Option<bool>,
    #[arg(long)]
    probe_epochs: Option<usize>,
    #[arg(long)]
    probe_learning_rate: Option<f64>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Seed to train with; defaults to the first configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 30)]
    n: usize,
    #[arg(long, default_value_t = 5)]
    hubs: usize,
    #[arg(long, default_value_t = 6)]
    snapshots: usize,
    #[arg(long, default_value_t = 0.6)]
    attach: f64,
    #[arg(long, default_value_t = 0.02)]
    background: f64,
    #[arg(long, default_value_t = 0.3)]
    churn: f64,
    #[arg(long, default_value_t = 2)]
    test_snapshots: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_with<T>(value: Option<String>, key: &'static str) -> Result<Option<T>, CliError>
where
    T: std::str::FromStr<Err = dygis::Error>,
{
    value.map(|v| v.parse::<T>().map_err(CliError::from)).transpose().map_err(|e| match e {
        CliError::Core(inner) => CliError::Usage(format!("`{key}`: {inner}")),
        other => other,
    })
}

fn feature_mode(text: &str) -> Result<FeatureMode, CliError> {
    match text {
        "one-hot" => Ok(FeatureMode::OneHot),
        "learnable" => Ok(FeatureMode::Learnable),
        other => match other.strip_prefix("file:") {
            Some(path) if !path.is_empty() => Ok(FeatureMode::File(PathBuf::from(path))),
            _ => Err(CliError::Usage(format!(
                "`feature-mode`: expected one-hot, learnable or file:<path>, got `{other}`"
            ))),
        },
    }
}

fn detection_average(text: &str) -> Result<DetectionAverage, CliError> {
    match text {
        "test-snapshots" => Ok(DetectionAverage::TestSnapshots),
        "all-snapshots" => Ok(DetectionAverage::AllSnapshots),
        other => Err(CliError::Usage(format!(
            "`detection-average`: expected test-snapshots or all-snapshots, got `{other}`"
        ))),
    }
}

struct Loaded {
    graph: DynamicGraph,
    dataset: PathBuf,
}

fn load_data(args: &DataArgs, file: &FileConfig) -> Result<Loaded, CliError> {
    let dataset: PathBuf = file
        .pick(args.dataset.clone(), "dataset")?
        .ok_or_else(|| CliError::Usage("`dataset` is required (flag or config file)".into()))?;
    let mode = match file.pick(args.feature_mode.clone(), "feature-mode")? {
        Some(m) => feature_mode(&m)?,
        None => FeatureMode::OneHot,
    };
    let test = file
        .pick(args.test_snapshots, "test-snapshots")?
        .unwrap_or(DEFAULT_TEST_SNAPSHOTS);
    let graph = load_dynamic_graph(&dataset, mode, test)?;
    Ok(Loaded { graph, dataset })
}

fn run_config(args: &TrainArgs, file: &FileConfig) -> Result<RunConfig, CliError> {
    let d = RunConfig::default();
    let task: Option<Task> = parse_with(file.pick(args.task.clone(), "task")?, "task")?;
    let ablation: Option<Ablation> = parse_with(file.pick(args.ablation.clone(), "ablation")?, "ablation")?;
    let averaging = file
        .pick(args.detection_average.clone(), "detection-average")?
        .map(|s| detection_average(&s))
        .transpose()?;
    let cfg = RunConfig {
        task: task.unwrap_or(d.task),
        r: file.pick(args.r, "r")?.unwrap_or(d.r),
        lambda: file.pick(args.lambda, "lambda")?.unwrap_or(d.lambda),
        tau: file.pick(args.tau, "tau")?.unwrap_or(d.tau),
        embed_dim: file.pick(args.dim, "dim")?.unwrap_or(d.embed_dim),
        hidden: file.pick(args.hidden, "hidden")?.unwrap_or(d.hidden),
        isg_epochs: file.pick(args.isg_epochs, "isg-epochs")?.unwrap_or(d.isg_epochs),
        dgmae_epochs: file.pick(args.dgmae_epochs, "dgmae-epochs")?.unwrap_or(d.dgmae_epochs),
        learning_rate: file.pick(args.learning_rate, "learning-rate")?.unwrap_or(d.learning_rate),
        seeds: file.pick(args.seeds.clone(), "seeds")?.map_or(d.seeds, |s| s.0),
        ablation: ablation.unwrap_or(d.ablation),
        detection_average: averaging.unwrap_or(d.detection_average),
        dense_bce: file.pick(args.dense_bce, "dense-bce")?.unwrap_or(d.dense_bce),
        sampled_softmax: file.pick(args.sampled_softmax, "sampled-softmax")?.unwrap_or(d.sampled_softmax),
        probe_epochs: file.pick(args.probe_epochs, "probe-epochs")?.unwrap_or(d.probe_epochs),
        probe_learning_rate: file
            .pick(args.probe_learning_rate, "probe-learning-rate")?
            .unwrap_or(d.probe_learning_rate),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn labels_for(args: &TrainArgs, file: &FileConfig, g: &DynamicGraph, task: Task) -> Result<Option<NodeLabels>, CliError> {
    let path: Option<PathBuf> = file.pick(args.labels.clone(), "labels")?;
    match (path, task) {
        (Some(p), _) => Ok(Some(load_labels(p, g)?)),
        (None, Task::Classify) => Err(CliError::Usage("`labels` is required for task classify".into())),
        (None, _) => Ok(None),
    }
}

fn task_name(task: Task) -> String {
    serde_json::to_value(task)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

fn ablation_name(ablation: Ablation) -> String {
    serde_json::to_value(ablation)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

fn results_dir() -> PathBuf {
    std::env::var_os(RESULTS_ENV).map_or_else(|| PathBuf::from("results"), PathBuf::from)
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    let err = |source| CliError::Output {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(err)?;
    }
    fs::write(path, text).map_err(err)
}

/// Prints `text` and stores it under the results directory.
fn emit(text: &str, name: &str) -> Result<(), CliError> {
    print!("{text}");
    let path = results_dir().join(name);
    write_file(&path, text)?;
    info!("results written to {}", path.display());
    Ok(())
}

fn results_name(dataset: &Path, cfg: &RunConfig, suffix: &str) -> String {
    let stem = dataset.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    format!("{stem}-{}-{}{suffix}.jsonl", task_name(cfg.task), ablation_name(cfg.ablation))
}

fn ingest_check(args: &DataArgs, file: &FileConfig) -> Result<(), CliError> {
    let Loaded { graph: g, .. } = load_data(args, file)?;
    let per_snapshot: Vec<_> = g
        .snapshots()
        .iter()
        .map(|s| json!({"edges": s.num_edges(), "active": s.num_active()}))
        .collect();
    let summary = json!({
        "nodes": g.n_global(),
        "snapshots": g.len(),
        "edges": g.total_edges(),
        "test_snapshots": g.num_test_snapshots(),
        "feature_dim": g.features().dim(g.n_global()),
        "per_snapshot": per_snapshot,
    });
    println!("{summary}");
    Ok(())
}

fn train(args: &TrainArgs, file: &FileConfig) -> Result<(), CliError> {
    let Loaded { graph, dataset } = load_data(&args.data, file)?;
    let cfg = run_config(args, file)?;
    let labels = labels_for(args, file, &graph, cfg.task)?;
    let report = run_pipeline(&graph, labels.as_ref(), &cfg)?;
    emit(&report.to_json_lines(), &results_name(&dataset, &cfg, ""))
}

fn comparison_table(ratios: &[f64], reports: &[MetricsReport]) -> String {
    let mut out = String::from("r\tauc\tap\tacc\n");
    let cell = |v: Option<f64>, s: Option<f64>| match (v, s) {
        (Some(v), Some(s)) => format!("{v:.4}±{s:.4}"),
        (Some(v), None) => format!("{v:.4}"),
        _ => "-".into(),
    };
    for (r, rep) in ratios.iter().zip(reports) {
        let a = rep.aggregate();
        out.push_str(&format!(
            "{r}\t{}\t{}\t{}\n",
            cell(a.auc, a.auc_std),
            cell(a.ap, a.ap_std),
            cell(a.acc, a.acc_std)
        ));
    }
    out
}

fn sweep(args: &TrainArgs, ratios: &[f64], file: &FileConfig) -> Result<(), CliError> {
    let Loaded { graph, dataset } = load_data(&args.data, file)?;
    let cfg = run_config(args, file)?;
    for &r in ratios {
        RunConfig { r, ..cfg.clone() }.validate()?;
    }
    let labels = labels_for(args, file, &graph, cfg.task)?;
    let reports = sensitivity_sweep(&graph, labels.as_ref(), &cfg, ratios)?;
    let text: String = reports.iter().map(MetricsReport::to_json_lines).collect();
    emit(&text, &results_name(&dataset, &cfg, "-sweep"))?;
    eprint!("{}", comparison_table(ratios, &reports));
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let cfg = SynthConfig {
        n: args.n,
        num_hubs: args.hubs,
        snapshots: args.snapshots,
        hub_attach_prob: args.attach,
        background_edge_prob: args.background,
        churn_prob: args.churn,
        num_test_snapshots: args.test_snapshots,
        seed: args.seed,
    };
    let (g, hubs) = generate_hub_dynamic_graph(&cfg)?;
    let mut buf = Vec::new();
    write_dynamic_graph(&g, &mut buf)?;
    write_file(&args.out, &String::from_utf8_lossy(&buf))?;
    let hub_ids: Vec<u64> = hubs.iter().map(|&h| g.node_ids()[h]).collect();
    println!(
        "{}",
        json!({
            "nodes": g.n_global(),
            "snapshots": g.len(),
            "edges": g.total_edges(),
            "hubs": hub_ids,
            "config": cfg,
        })
    );
    Ok(())
}

fn export_seed(args: &ExportArgs, cfg: &RunConfig) -> u64 {
    args.seed.unwrap_or(cfg.seeds[0])
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    let err = |source| CliError::Output {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(err)?;
    }
    File::create(path).map(BufWriter::new).map_err(err)
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|source| CliError::Output {
        path: path.display().to_string(),
        source,
    })
}

fn export_reps(args: &ExportArgs, file: &FileConfig) -> Result<(), CliError> {
    let Loaded { graph, .. } = load_data(&args.train.data, file)?;
    let cfg = run_config(&args.train, file)?;
    let seed = export_seed(args, &cfg);
    let (_, trained) = train_stages(&graph, &cfg, seed)?;
    let mut w = create(&args.out)?;
    write_representation(&trained.representation, &mut w)?;
    finish(w, &args.out)
}

fn export_splits(args: &ExportArgs, file: &FileConfig) -> Result<(), CliError> {
    let Loaded { graph, .. } = load_data(&args.train.data, file)?;
    let cfg = run_config(&args.train, file)?;
    let seed = export_seed(args, &cfg);
    let splits = informative_splits(&graph, &cfg, seed)?;
    let mut w = create(&args.out)?;
    write_splits(&graph, &splits, &mut w)?;
    finish(w, &args.out)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    match &cli.command {
        Command::IngestCheck(args) => ingest_check(args, &file),
        Command::Train(args) => train(args, &file),
        Command::SweepR { train, r_values } => sweep(train, r_values, &file),
        Command::Synth(args) => synth(args),
        Command::ExportReps(args) => export_reps(args, &file),
        Command::ExportSplits(args) => export_splits(args, &file),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            eprintln!("error[{}]: {e}", category.name());
            ExitCode::from(category as u8)
        }
    }
}
