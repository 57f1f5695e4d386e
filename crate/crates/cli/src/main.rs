//! `gcma`: ingest datasets, train, evaluate, sweep and estimate k.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage error,
//! 3 training divergence, 130 interrupted.

mod baselines;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use gcma_core::dpeaks::{self, DEFAULT_PERCENTILES};
use gcma_core::graph_io::{self, canonical, symmetric_adjacency, Graph};
use gcma_core::metrics::{self, EvalResult};
use gcma_core::trainer::{self, SweepParam, Trainer};

use config::ConfigFlags;
use output::{RunManifest, SweepSpec};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(gcma_core::Error),
    Io(std::io::Error),
    Other(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "{e}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<gcma_core::Error> for CliError {
    fn from(e: gcma_core::Error) -> Self {
        match e {
            gcma_core::Error::Usage(m) => CliError::Usage(m),
            other => CliError::Core(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(gcma_core::Error::Divergence(_)) => 3,
            CliError::Core(gcma_core::Error::Interrupted) => 130,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "gcma", version, about = "Masked graph autoencoder clustering with automatic k")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert raw inputs into a canonical dataset directory
    Ingest(IngestArgs),
    /// Pretrain and jointly train on a dataset; writes a run directory
    Train(TrainArgs),
    /// Score predicted clusters against labels
    Eval(EvalArgs),
    /// Train once per value of one hyperparameter
    Sweep(SweepArgs),
    /// Density-peaks clustering of an embedding CSV
    EstimateK(EstimateKArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum InputFormat {
    /// `<name>.content` and `<name>.cites` files
    Planetoid,
    /// Feature matrix CSV plus `source,target[,weight]` edge list
    Csv,
    /// Feature matrix CSV only; edges come from a k-NN heat-kernel graph
    Nongraph,
}

#[derive(clap::Args, Debug)]
struct IngestArgs {
    #[arg(long, value_enum)]
    format: InputFormat,
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Dataset name recorded in the header (defaults to the output directory name)
    #[arg(long)]
    name: Option<String>,
    /// Planetoid `.content` file
    #[arg(long)]
    content: Option<PathBuf>,
    /// Planetoid `.cites` file
    #[arg(long)]
    cites: Option<PathBuf>,
    /// Dense feature CSV without header, one row per node
    #[arg(long)]
    features: Option<PathBuf>,
    /// Edge list CSV with a `source,target[,weight]` header
    #[arg(long)]
    edges: Option<PathBuf>,
    /// One integer class per line
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Neighbors per node for the heat-kernel graph
    #[arg(long, default_value_t = graph_io::DEFAULT_NEIGHBORS)]
    neighbors: usize,
    /// Heat-kernel bandwidth t (defaults to the mean squared pairwise distance of a sample)
    #[arg(long)]
    bandwidth: Option<f64>,
}

#[derive(clap::Args, Debug)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["data", "replay"])))]
struct TrainArgs {
    /// Canonical dataset directory
    #[arg(long)]
    data: Option<PathBuf>,
    /// Repeat the run recorded in this run directory's manifest
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Run directory (default: $GCMA_OUTPUT_ROOT/<dataset>-seed<seed>, else runs/...)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the per-node density-peaks decision graph
    #[arg(long)]
    decision_graph: bool,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(clap::Args, Debug)]
#[command(group(clap::ArgGroup::new("input").required(true).args(["predictions", "run"])))]
struct EvalArgs {
    /// Ground-truth labels, one per line (default with --run: the dataset's labels.csv)
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Predicted clusters: one per line, or a `node_id,cluster,..` CSV
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Run directory written by `gcma train`
    #[arg(long)]
    run: Option<PathBuf>,
    /// Column to read from a `node_id,...` predictions file
    #[arg(long, default_value = "cluster")]
    column: String,
    /// Print published results beside the scores: cora, citeseer, dblp or
    /// ogbn-arxiv (with --run, defaults to the run's dataset name)
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    paper: Option<String>,
    /// Write the scores as CSV
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// alpha, beta, gamma, xi, p_edge or p_feat
    #[arg(long)]
    param: String,
    /// Comma-separated grid
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(clap::Args, Debug)]
struct EstimateKArgs {
    /// Embedding CSV, with or without a leading `node_id` column
    #[arg(long)]
    embedding: PathBuf,
    /// Comma-separated cutoff percentiles
    #[arg(long, value_delimiter = ',')]
    percentiles: Option<Vec<f64>>,
    /// Labels to score the clustering against
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Directory for predictions.csv and decision_graph.csv
    #[arg(long)]
    out: Option<PathBuf>,
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str, format: &str) -> Result<&'a Path, CliError> {
    value.as_deref().ok_or_else(|| CliError::Usage(format!("--format {format} needs --{flag}")))
}

fn ingest(args: &IngestArgs) -> Result<(), CliError> {
    let name = args.name.clone().unwrap_or_else(|| {
        args.out.file_name().and_then(|n| n.to_str()).unwrap_or("dataset").to_string()
    });
    if args.format == InputFormat::Planetoid && args.labels.is_some() {
        return Err(CliError::Usage("planetoid labels come from the .content file; drop --labels".into()));
    }
    let labels = match &args.labels {
        Some(p) => Some(canonical::read_labels_csv(p)?),
        None => None,
    };
    let mut graph = match args.format {
        InputFormat::Planetoid => {
            let content = require(&args.content, "content", "planetoid")?;
            let cites = require(&args.cites, "cites", "planetoid")?;
            let (graph, report) = graph_io::load_planetoid(content, cites)?;
            eprintln!(
                "planetoid: {} citations to unknown papers dropped, {} self-citations dropped, {} duplicates merged, classes {:?}",
                report.dropped_unknown, report.dropped_self, report.merged_duplicates, report.class_names
            );
            graph
        }
        InputFormat::Csv => {
            let features = canonical::read_matrix_csv(require(&args.features, "features", "csv")?)?;
            let edges = canonical::read_edges_csv(require(&args.edges, "edges", "csv")?, features.rows())?;
            let adj = symmetric_adjacency(features.rows(), edges)?;
            Graph::new(name.clone(), adj, features, labels.clone())?
        }
        InputFormat::Nongraph => {
            let features = canonical::read_matrix_csv(require(&args.features, "features", "nongraph")?)?;
            let t = args.bandwidth.unwrap_or_else(|| graph_io::default_bandwidth(&features));
            let adj = graph_io::build_heat_kernel_graph(&features, args.neighbors, t)?;
            eprintln!("heat kernel: {} neighbors, t = {t}", args.neighbors);
            Graph::new(name.clone(), adj, features, labels.clone())?
        }
    };
    graph.name = name;
    canonical::write_dataset(&graph, &args.out)?;
    let hash = canonical::content_hash(&args.out)?;
    println!(
        "{}: n={} d_in={} edges={} true_k={} sha256={hash}",
        args.out.display(),
        graph.n(),
        graph.d_in(),
        graph.edge_count(),
        graph.true_k().map_or("-".to_string(), |k| k.to_string())
    );
    Ok(())
}

fn interrupt_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let handler_flag = flag.clone();
    if let Err(e) = ctrlc::set_handler(move || handler_flag.store(true, Ordering::SeqCst)) {
        log::warn!("cannot install interrupt handler: {e}");
    }
    flag
}

fn load_dataset(dir: &Path) -> Result<(Graph, output::DatasetRef), CliError> {
    let graph = canonical::read_dataset(dir)?;
    let dataset = output::DatasetRef {
        dir: dir.to_path_buf(),
        name: graph.name.clone(),
        content_hash: canonical::content_hash(dir)?,
    };
    Ok((graph, dataset))
}

fn train(args: &TrainArgs) -> Result<(), CliError> {
    let (data_dir, cfg, default_out) = match &args.replay {
        Some(run) => {
            let m = RunManifest::read(&run.join(output::MANIFEST))?;
            if m.command != "train" {
                return Err(CliError::Usage(format!("{} records a `{}` run, not `train`", run.display(), m.command)));
            }
            let hash = canonical::content_hash(&m.dataset.dir)?;
            if hash != m.dataset.content_hash {
                return Err(CliError::Other(format!(
                    "dataset {} changed since the run (hash {hash}, manifest {})",
                    m.dataset.dir.display(),
                    m.dataset.content_hash
                )));
            }
            let mut out = run.as_os_str().to_owned();
            out.push("-replay");
            (m.dataset.dir, m.config, Some(PathBuf::from(out)))
        }
        None => (args.data.clone().expect("clap enforces a source"), args.cfg.resolve()?, None),
    };
    let (graph, dataset) = load_dataset(&data_dir)?;
    let default_name = format!("{}-seed{}", dataset.name, cfg.seed);
    let dir = output::run_dir(args.out.as_deref().or(default_out.as_deref()), &default_name);
    std::fs::create_dir_all(&dir)?;

    let mut outputs = vec![output::REPORT, output::EPOCHS, output::CHECKPOINT, output::EMBEDDING, output::PREDICTIONS];
    if graph.labels().is_some() {
        outputs.push(output::METRICS);
    }
    if args.decision_graph {
        outputs.push(output::DECISION_GRAPH);
    }
    let manifest = RunManifest {
        format: RunManifest::FORMAT.into(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        command: "train".into(),
        dataset,
        seed: cfg.seed,
        config: cfg.clone(),
        sweep: None,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    output::write_json(&dir.join(output::MANIFEST), &manifest)?;
    log::info!("run directory {}", dir.display());

    let trainer = Trainer::new(&graph, cfg)?.with_interrupt(interrupt_flag());
    let out = trainer.run()?;
    let report = &out.report;

    output::write_json(&dir.join(output::REPORT), report)?;
    output::with_atomic(&dir.join(output::EPOCHS), |p| trainer::write_epochs_csv(p, &report.epochs))?;
    gcma_core::encoder::save_checkpoint(&out.model.store, &dir.join(output::CHECKPOINT))?;
    output::write_embedding(&dir.join(output::EMBEDDING), &out.embedding)?;
    output::write_predictions(&dir.join(output::PREDICTIONS), &report.predictions, report.q_predictions.as_deref())?;
    let mut scored: Vec<(&str, &EvalResult)> = Vec::new();
    if let Some(e) = &report.eval {
        scored.push(("cluster", e));
    }
    if let Some(e) = &report.q_eval {
        scored.push(("q_cluster", e));
    }
    if !scored.is_empty() {
        output::write_metrics(&dir.join(output::METRICS), &scored)?;
    }
    if args.decision_graph {
        output::with_atomic(&dir.join(output::DECISION_GRAPH), |p| {
            dpeaks::write_decision_graph(p, &out.profile, &report.predictions)
        })?;
    }

    println!("k = {} (percentile votes {:?})", report.k, report.votes);
    match &report.eval {
        Some(e) => println!("ACC {:.4}  NMI {:.4}  ARI {:.4}  k_true {}", e.acc, e.nmi, e.ari, e.k_true),
        None => println!("no labels; clustering not scored"),
    }
    println!(
        "{} joint steps, {}, {:.1}s, outputs in {}",
        report.joint_steps,
        if report.converged { "converged" } else { "epoch budget used" },
        report.wall_clock_secs,
        dir.display()
    );
    Ok(())
}

fn print_eval(e: &EvalResult) {
    println!("{:>8} {:>8} {:>8} {:>6} {:>6}", "ACC", "NMI", "ARI", "k", "k_true");
    println!("{:>8.4} {:>8.4} {:>8.4} {:>6} {:>6}", e.acc, e.nmi, e.ari, e.k_pred, e.k_true);
}

fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let (pred_path, labels_path, dataset_name) = match (&args.run, &args.predictions) {
        (Some(run), None) => {
            let m = RunManifest::read(&run.join(output::MANIFEST))?;
            let labels = args.labels.clone().unwrap_or_else(|| m.dataset.dir.join("labels.csv"));
            (run.join(output::PREDICTIONS), labels, Some(m.dataset.name))
        }
        (None, Some(p)) => {
            let labels = args.labels.clone().ok_or_else(|| CliError::Usage("--predictions needs --labels".into()))?;
            (p.clone(), labels, None)
        }
        _ => return Err(CliError::Usage("give exactly one of --predictions or --run".into())),
    };
    for (path, what) in [(&pred_path, "predictions"), (&labels_path, "labels")] {
        if !path.exists() {
            return Err(CliError::Usage(format!("{what} file {} does not exist", path.display())));
        }
    }
    let pred = output::read_label_column(&pred_path, &args.column)?;
    let truth = canonical::read_labels_csv(&labels_path)?;
    if pred.len() != truth.len() {
        return Err(CliError::Other(format!(
            "{} has {} entries but {} has {}",
            pred_path.display(),
            pred.len(),
            labels_path.display(),
            truth.len()
        )));
    }
    let e = metrics::evaluate(&pred, &truth)?;
    print_eval(&e);
    if let Some(requested) = args.paper.as_deref() {
        let name = match (requested, dataset_name.as_deref()) {
            ("", Some(run_name)) => run_name,
            ("", None) => return Err(CliError::Usage("--paper needs a dataset name unless --run is given".into())),
            (name, _) => name,
        };
        match baselines::lookup(name) {
            Some(b) => print!("\n{}", baselines::comparison_table(b, &e)),
            None => {
                return Err(CliError::Usage(format!("no published results for `{name}`; use cora, citeseer, dblp or ogbn-arxiv")))
            }
        }
    }
    if let Some(out) = &args.out {
        output::write_metrics(out, &[(args.column.as_str(), &e)])?;
    }
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<(), CliError> {
    let param: SweepParam = args.param.parse().map_err(|e: gcma_core::Error| CliError::Usage(e.to_string()))?;
    let cfg = args.cfg.resolve()?;
    let (graph, dataset) = load_dataset(&args.data)?;
    let dir = output::run_dir(args.out.as_deref(), &format!("{}-sweep-{}-seed{}", dataset.name, param.name(), cfg.seed));
    std::fs::create_dir_all(&dir)?;
    let manifest = RunManifest {
        format: RunManifest::FORMAT.into(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        command: "sweep".into(),
        dataset,
        seed: cfg.seed,
        config: cfg.clone(),
        sweep: Some(SweepSpec { param: param.name().into(), values: args.values.clone() }),
        outputs: vec![output::SWEEP.into()],
    };
    output::write_json(&dir.join(output::MANIFEST), &manifest)?;
    let rows = trainer::sweep(&graph, &cfg, param, &args.values)?;
    output::with_atomic(&dir.join(output::SWEEP), |p| trainer::write_sweep_csv(p, param, &rows))?;
    println!("{:>10} {:>4} {:>8} {:>8} {:>8}", param.name(), "k", "ACC", "NMI", "ARI");
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    for r in &rows {
        match &r.error {
            Some(err) => println!("{:>10} failed: {err}", r.value),
            None => println!(
                "{:>10} {:>4} {:>8} {:>8} {:>8}",
                r.value,
                r.k.map_or("-".into(), |k| k.to_string()),
                fmt(r.acc),
                fmt(r.nmi),
                fmt(r.ari)
            ),
        }
    }
    println!("table in {}", dir.join(output::SWEEP).display());
    Ok(())
}

fn estimate_k(args: &EstimateKArgs) -> Result<(), CliError> {
    let z = output::read_embedding(&args.embedding)?;
    let grid = args.percentiles.clone().unwrap_or_else(|| DEFAULT_PERCENTILES.to_vec());
    let est = dpeaks::estimate_k(&z, &grid)?;
    println!("k = {} at percentile {} (d_c = {})", est.state.k, est.percentile, est.d_c());
    println!("votes: {:?}", est.votes);
    println!("centers: {:?}", est.state.centers);
    if let Some(labels) = &args.labels {
        let truth = canonical::read_labels_csv(labels)?;
        if truth.len() != z.rows() {
            return Err(CliError::Other(format!("{} labels for {} points", truth.len(), z.rows())));
        }
        print_eval(&metrics::evaluate(&est.state.labels, &truth)?);
    }
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        output::write_predictions(&dir.join(output::PREDICTIONS), &est.state.labels, None)?;
        output::with_atomic(&dir.join(output::DECISION_GRAPH), |p| {
            dpeaks::write_decision_graph(p, &est.profile, &est.state.labels)
        })?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::EstimateK(a) => estimate_k(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
