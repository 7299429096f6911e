//! `hfd` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
//! failure, 5 dimension mismatch, 6 protocol prerequisite missing,
//! 7 insufficient ANN candidates.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::ann::{AnnIndex, AnnParams, Query};
use crate::config::{ExperimentConfig, Protocol};
use crate::data::{
    normalize, parse_csv_rows, sample_constraints, write_csv, ConstraintSet, CsvOptions, DataFormat, Dataset, NormStats,
};
use crate::error::HfdError;
use crate::eval::{self, EvalReport, SearchMode, Timing};
use crate::hierarchy::{train_forest, Forest};
use crate::metric::forest_distance;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_TRAINING: i32 = 4;
pub const EXIT_DIMENSION: i32 = 5;
pub const EXIT_PROTOCOL: i32 = 6;
pub const EXIT_CANDIDATES: i32 = 7;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Error classification shared by every command; `fallback` applies to
/// errors without a dedicated code.
fn classify(e: HfdError, fallback: i32) -> CliError {
    let code = match &e {
        HfdError::DimensionMismatch { .. } => EXIT_DIMENSION,
        HfdError::InsufficientCandidates { .. } => EXIT_CANDIDATES,
        HfdError::UnlabeledData => EXIT_PROTOCOL,
        HfdError::InvalidParameter(_) | HfdError::BadSubsetSize { .. } | HfdError::BadFoldCount { .. } => EXIT_CONFIG,
        HfdError::UnsupportedVersion { .. } => EXIT_DATA,
        _ => fallback,
    };
    CliError::new(code, e.to_string())
}

fn data_err(e: HfdError) -> CliError {
    classify(e, EXIT_DATA)
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(EXIT_DATA, format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "hfd", version, about = "Hierarchy forest distance: learn, query and evaluate")]
pub struct Cli {
    /// Worker threads for training and batch queries (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a forest and write model.json, config.json and train.log.
    Train(TrainArgs),
    /// Nearest neighbours of query rows (or of every training point).
    Knn(KnnArgs),
    /// Run an evaluation protocol.
    Eval(EvalArgs),
    /// Forest distance between paired rows of two CSV files.
    Distance(DistanceArgs),
    /// Constraint utilities.
    Constraints {
        #[command(subcommand)]
        command: ConstraintsCommand,
    },
    /// Dataset utilities.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// V-measure of predicted cluster ids against true labels.
    Vmeasure(VmeasureArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config (JSON); defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset path (overrides the config).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<DataFormat>,
    /// The CSV has no label column.
    #[arg(long)]
    pub unlabeled: bool,
    /// Skip the first CSV line.
    #[arg(long)]
    pub header: bool,
    /// Constraint CSV (`i,j,ML|CL`) instead of sampling from labels.
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    #[arg(long)]
    pub trees: Option<usize>,
    #[arg(long)]
    pub min_node_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    pub print_effective_config: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, value_enum)]
    pub protocol: Option<Protocol>,
}

#[derive(Debug, Args)]
pub struct KnnArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Raw query rows (CSV, no labels unless --queries-labeled). Without this,
    /// every training point is a query and is excluded from its own list.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub queries_labeled: bool,
    #[arg(long)]
    pub header: bool,
    #[arg(short, long, default_value_t = 5)]
    pub k: usize,
    #[arg(long = "k-o", default_value_t = 10)]
    pub k_o: usize,
    #[arg(long, value_enum, default_value_t = SearchMode::Approx)]
    pub mode: SearchMode,
    /// Cut per-tree candidate sets to exactly k_O.
    #[arg(long)]
    pub truncate: bool,
    /// Neighbours CSV (default: stdout).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Instrumentation JSON (default: <output>.summary.json when --output is set).
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DistanceArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub left: PathBuf,
    #[arg(long)]
    pub right: PathBuf,
    #[arg(long)]
    pub header: bool,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ConstraintsCommand {
    /// Sample must-link/cannot-link pairs from a labeled dataset.
    Sample {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = DataFormat::Csv)]
        format: DataFormat,
        #[arg(long)]
        header: bool,
        #[arg(long)]
        must_link: usize,
        #[arg(long)]
        cannot_link: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Z-score every feature; writes CSV and optionally the statistics.
    Normalize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = DataFormat::Csv)]
        format: DataFormat,
        #[arg(long)]
        unlabeled: bool,
        #[arg(long)]
        header: bool,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        stats: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct VmeasureArgs {
    /// One integer id per line.
    #[arg(long)]
    pub predicted: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return EXIT_CONFIG;
        }
        // fails only if a global pool already exists (repeat calls in-process)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Knn(a) => cmd_knn(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Distance(a) => cmd_distance(&a),
        Command::Constraints { command } => cmd_constraints(command),
        Command::Dataset { command } => cmd_dataset(command),
        Command::Vmeasure(a) => cmd_vmeasure(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

/// Config file, then `HFD_SEED`, then flags.
pub fn resolve_config(args: &ConfigArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| CliError::new(EXIT_CONFIG, format!("config {}: {e}", p.display())))?,
        None => ExperimentConfig::default(),
    };
    if let Ok(s) = std::env::var("HFD_SEED") {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| CliError::new(EXIT_CONFIG, format!("HFD_SEED is not an integer: {s:?}")))?;
    }
    if let Some(p) = &args.data {
        cfg.dataset.path = p.clone();
    }
    if let Some(f) = args.format {
        cfg.dataset.format = f;
    }
    if args.unlabeled {
        cfg.dataset.label_column = false;
    }
    if args.header {
        cfg.dataset.header = true;
    }
    if let Some(p) = &args.constraints {
        cfg.constraints.file = Some(p.clone());
    }
    if let Some(t) = args.trees {
        cfg.trees = t;
    }
    if let Some(m) = args.min_node_size {
        cfg.tree.min_node_size = m;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.output_dir {
        cfg.output_dir = o.clone();
    }
    cfg.validate().map_err(|e| CliError::new(EXIT_CONFIG, e.to_string()))?;
    if cfg.dataset.path.as_os_str().is_empty() {
        return Err(CliError::new(EXIT_CONFIG, "no dataset path (use --data or dataset.path)"));
    }
    Ok(cfg)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn load_constraints(cfg: &ExperimentConfig, data: &Dataset) -> CliResult<ConstraintSet> {
    if let Some(p) = &cfg.constraints.file {
        let f = File::open(p).map_err(|e| io_err(p, e))?;
        return ConstraintSet::read_csv(BufReader::new(f), data.len()).map_err(data_err);
    }
    match data.labels() {
        Some(labels) => cfg
            .constraints
            .sampling
            .sample(labels, eval::derive_seed(cfg.seed, 1))
            .map_err(|e| classify(e, EXIT_CONFIG)),
        None => {
            log::warn!("unlabeled data and no constraint file: every split is unsupervised");
            Ok(ConstraintSet::default())
        }
    }
}

fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let cfg = resolve_config(&args.cfg)?;
    if args.cfg.print_effective_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let (data, stats) = cfg.prepare_data().map_err(data_err)?;
    cfg.tree.validate(data.dim()).map_err(|e| classify(e, EXIT_CONFIG))?;
    let cons = load_constraints(&cfg, &data)?;
    create_dir(&cfg.output_dir)?;

    let start = Instant::now();
    let params = cfg.forest_params();
    let forest = train_forest(&data, &cons, &params).map_err(|e| classify(e, EXIT_TRAINING))?;
    let forest = Forest {
        norm_stats: stats,
        ..forest
    };
    let wall = start.elapsed().as_secs_f64();

    let model_path = cfg.output_dir.join("model.json");
    let model = forest.to_json().map_err(|e| classify(e, EXIT_TRAINING))?;
    write_file(&model_path, model.as_bytes())?;
    write_file(&cfg.output_dir.join("config.json"), cfg.to_json().as_bytes())?;

    let mean_depth = forest.trees.iter().map(|t| t.mean_leaf_depth()).sum::<f64>() / forest.n_trees() as f64;
    let mut log_text = String::new();
    let _ = writeln!(log_text, "dataset {} ({} points, {} features)", cfg.dataset.path.display(), data.len(), data.dim());
    let _ = writeln!(log_text, "constraints: {} must-link, {} cannot-link", cons.must_link.len(), cons.cannot_link.len());
    let _ = writeln!(log_text, "trees {} seed {} wall {wall:.3}s", forest.n_trees(), cfg.seed);
    for (t, tree) in forest.trees.iter().enumerate() {
        let leaves = tree.leaves().count();
        let _ = writeln!(log_text, "tree {t}: nodes {} leaves {leaves} height {}", tree.nodes.len(), tree.height());
    }
    write_file(&cfg.output_dir.join("train.log"), log_text.as_bytes())?;

    println!(
        "trained {} trees on {} points (mean leaf depth {mean_depth:.2}) in {wall:.2}s",
        forest.n_trees(),
        data.len()
    );
    println!("model: {}", model_path.display());
    Ok(())
}

pub fn load_model(path: &Path) -> CliResult<Forest> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    Forest::read_json(BufReader::new(f)).map_err(|e| CliError::new(EXIT_DATA, format!("{}: {e}", path.display())))
}

/// Query rows; one row is enough.
fn read_rows(path: &Path, labeled: bool, header: bool) -> CliResult<Vec<Vec<f64>>> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let (rows, _) = parse_csv_rows(
        BufReader::new(f),
        CsvOptions {
            label_column: labeled,
            header,
        },
    )
    .map_err(|e| CliError::new(EXIT_DATA, format!("{}: {e}", path.display())))?;
    Ok(rows)
}

fn check_dim(rows: &[Vec<f64>], expected: usize) -> CliResult<()> {
    match rows.iter().find(|r| r.len() != expected) {
        Some(r) => Err(CliError::new(
            EXIT_DIMENSION,
            HfdError::DimensionMismatch {
                expected,
                got: r.len(),
            }
            .to_string(),
        )),
        None => Ok(()),
    }
}

fn open_output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| io_err(p, e))?)),
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

fn cmd_knn(args: &KnnArgs) -> CliResult<()> {
    let forest = load_model(&args.model)?;
    let ann = AnnParams {
        k_o: args.k_o,
        k: args.k,
        truncate: args.truncate,
    };
    ann.validate().map_err(|e| classify(e, EXIT_CONFIG))?;
    let queries = args
        .queries
        .as_ref()
        .map(|p| read_rows(p, args.queries_labeled, args.header))
        .transpose()?;
    if let Some(q) = &queries {
        check_dim(q, forest.dim())?;
    }
    let index = AnnIndex::new(&forest).map_err(data_err)?;
    let list: Vec<Query<'_>> = match &queries {
        Some(q) => q.iter().map(|r| Query::External(r)).collect(),
        None => (0..forest.n()).map(Query::Training).collect(),
    };
    let start = Instant::now();
    let results = match args.mode {
        SearchMode::Approx => index.approx_knn_batch(&list, &ann),
        SearchMode::Brute => index.brute_knn_batch(&list, ann.k),
    }
    .map_err(|e| classify(e, EXIT_DATA))?;
    let seconds = start.elapsed().as_secs_f64();

    let mut out = open_output(args.output.as_deref())?;
    let w = |e: std::io::Error| CliError::new(EXIT_DATA, format!("writing neighbours: {e}"));
    writeln!(out, "query,rank,neighbor,distance").map_err(w)?;
    for (q, list) in results.iter().enumerate() {
        for (r, n) in list.entries.iter().enumerate() {
            writeln!(out, "{q},{},{},{}", r + 1, n.id, n.distance).map_err(w)?;
        }
    }
    out.flush().map_err(w)?;

    let c = index.counters();
    let summary = json!({
        "mode": args.mode,
        "queries": list.len(),
        "k": args.k,
        "k_o": args.k_o,
        "truncate": args.truncate,
        "distance_evaluations": c.distance_evaluations,
        "mean_candidates": if args.mode == SearchMode::Approx { c.candidates as f64 / list.len().max(1) as f64 } else { forest.n() as f64 },
        "candidates_before_union": c.candidates_before_union,
        "query_seconds": seconds,
    });
    let summary_path = args
        .summary
        .clone()
        .or_else(|| args.output.as_ref().map(|p| p.with_extension("summary.json")));
    match summary_path {
        Some(p) => write_file(&p, serde_json::to_string_pretty(&summary).expect("json").as_bytes())?,
        None => eprintln!("{summary}"),
    }
    Ok(())
}

fn write_report(dir: &Path, report: &EvalReport, curve_header: &str, curve: &[Vec<f64>]) -> CliResult<()> {
    create_dir(dir)?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write_file(&dir.join(format!("{}.json", report.protocol)), json.as_bytes())?;
    let mut csv = String::from(curve_header);
    csv.push('\n');
    for row in curve {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    write_file(&dir.join(format!("{}.csv", report.protocol)), csv.as_bytes())
}

fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let mut cfg = resolve_config(&args.cfg)?;
    if let Some(p) = args.protocol {
        cfg.eval.protocol = Some(p);
    }
    if args.cfg.print_effective_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let protocol = cfg
        .eval
        .protocol
        .ok_or_else(|| CliError::new(EXIT_CONFIG, "no protocol (use --protocol or eval.protocol)"))?;
    let (data, stats) = cfg.prepare_data().map_err(data_err)?;
    cfg.tree.validate(data.dim()).map_err(|e| classify(e, EXIT_CONFIG))?;
    let needs_labels = protocol != Protocol::ExportSimilarity;
    if needs_labels && data.labels().is_none() {
        return Err(CliError::new(
            EXIT_PROTOCOL,
            format!("protocol {} needs a labeled dataset", protocol.name()),
        ));
    }
    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;
    write_file(&dir.join("config.json"), cfg.to_json().as_bytes())?;
    let pipeline = cfg.pipeline();
    let train_err = |e: HfdError| classify(e, EXIT_TRAINING);
    let params = serde_json::to_value(&cfg).expect("config serializes");
    let seed = cfg.seed;

    let train_full = |cfg: &ExperimentConfig| -> CliResult<(Forest, f64)> {
        let cons = load_constraints(cfg, &data)?;
        let t = Instant::now();
        let forest = train_forest(&data, &cons, &cfg.forest_params()).map_err(train_err)?;
        Ok((
            Forest {
                norm_stats: stats.clone(),
                ..forest
            },
            t.elapsed().as_secs_f64(),
        ))
    };

    match protocol {
        Protocol::Classify => {
            let s = eval::cross_validate(&data, &pipeline, cfg.eval.folds, seed).map_err(train_err)?;
            let report = EvalReport {
                protocol: protocol.name().into(),
                folds: s.hfd.clone(),
                aggregate: s.mean_hfd(),
                details: json!({ "euclidean_folds": s.euclidean, "euclidean_mean": s.mean_euclidean() }),
                params,
                timing: Timing {
                    train_seconds: s.train_seconds,
                    query_seconds: s.query_seconds,
                    distance_evaluations: 0,
                },
                seed,
            };
            let curve: Vec<Vec<f64>> = s
                .hfd
                .iter()
                .zip(&s.euclidean)
                .enumerate()
                .map(|(f, (h, e))| vec![f as f64, *h, *e])
                .collect();
            write_report(&dir, &report, "fold,hfd_accuracy,euclidean_accuracy", &curve)?;
            println!(
                "classify: HFD {:.4} vs Euclidean {:.4} ({}-NN, {} folds)",
                s.mean_hfd(),
                s.mean_euclidean(),
                cfg.ann.k,
                cfg.eval.folds
            );
        }
        Protocol::Retrieval => {
            let (forest, train_seconds) = train_full(&cfg)?;
            let labels = data.require_labels().map_err(data_err)?;
            let t = Instant::now();
            let p = eval::retrieval_precision(&forest, labels, &cfg.eval.retrieval_ks, &cfg.ann, cfg.search)
                .map_err(|e| classify(e, EXIT_DATA))?;
            let report = EvalReport {
                protocol: protocol.name().into(),
                folds: vec![],
                aggregate: eval::mean(&p),
                details: json!({ "ks": cfg.eval.retrieval_ks, "precision": p }),
                params,
                timing: Timing {
                    train_seconds,
                    query_seconds: t.elapsed().as_secs_f64(),
                    distance_evaluations: 0,
                },
                seed,
            };
            let curve: Vec<Vec<f64>> = cfg.eval.retrieval_ks.iter().zip(&p).map(|(&k, &v)| vec![k as f64, v]).collect();
            write_report(&dir, &report, "k,precision", &curve)?;
            for (k, v) in cfg.eval.retrieval_ks.iter().zip(&p) {
                println!("precision@{k}: {v:.4}");
            }
        }
        Protocol::AnnQuality => {
            let (forest, train_seconds) = train_full(&cfg)?;
            let t = Instant::now();
            let rows = eval::ann_quality(&forest, &cfg.eval.k_o_values, &cfg.eval.eval_ks, cfg.ann.truncate)
                .map_err(|e| classify(e, EXIT_DATA))?;
            let report = EvalReport {
                protocol: protocol.name().into(),
                folds: vec![],
                aggregate: rows.iter().map(|r| r.map).sum::<f64>() / rows.len().max(1) as f64,
                details: serde_json::to_value(&rows).expect("rows serialize"),
                params,
                timing: Timing {
                    train_seconds,
                    query_seconds: t.elapsed().as_secs_f64(),
                    distance_evaluations: rows.iter().map(|r| r.distance_evaluations).sum(),
                },
                seed,
            };
            let curve: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.k_o as f64,
                        r.map,
                        r.time_fraction,
                        r.distance_evaluations as f64,
                        r.brute_distance_evaluations as f64,
                    ]
                })
                .collect();
            write_report(&dir, &report, "k_o,map,time_fraction,distance_evaluations,brute_distance_evaluations", &curve)?;
            for r in &rows {
                println!(
                    "k_O={:<3} mAP {:.4} time {:.4} of brute force, {} distance evaluations",
                    r.k_o, r.map, r.time_fraction, r.distance_evaluations
                );
            }
        }
        Protocol::NoiseSweep => {
            let points =
                eval::noise_sweep(&data, &cfg.eval.noise_rates, &pipeline, cfg.eval.folds, seed).map_err(train_err)?;
            let means: Vec<f64> = points.iter().map(|p| p.scores.mean_hfd()).collect();
            let report = EvalReport {
                protocol: protocol.name().into(),
                folds: points.first().map(|p| p.scores.hfd.clone()).unwrap_or_default(),
                aggregate: eval::mean(&means),
                details: serde_json::to_value(&points).expect("points serialize"),
                params,
                timing: Timing {
                    train_seconds: points.iter().map(|p| p.scores.train_seconds).sum(),
                    query_seconds: points.iter().map(|p| p.scores.query_seconds).sum(),
                    distance_evaluations: 0,
                },
                seed,
            };
            let curve: Vec<Vec<f64>> = points
                .iter()
                .map(|p| vec![p.rate, p.scores.mean_hfd(), p.scores.mean_euclidean()])
                .collect();
            write_report(&dir, &report, "rate,hfd_accuracy,euclidean_accuracy", &curve)?;
            for p in &points {
                println!("noise {:.2}: HFD {:.4} Euclidean {:.4}", p.rate, p.scores.mean_hfd(), p.scores.mean_euclidean());
            }
        }
        Protocol::ExportSimilarity => {
            let (forest, train_seconds) = train_full(&cfg)?;
            let ann = AnnParams {
                k: cfg.eval.similarity_k.min(forest.n() - 1),
                ..cfg.ann
            };
            let t = Instant::now();
            let m = eval::export_similarity(&forest, &ann, cfg.search).map_err(|e| classify(e, EXIT_DATA))?;
            let path = dir.join("similarity.mtx");
            let f = File::create(&path).map_err(|e| io_err(&path, e))?;
            let mut w = BufWriter::new(f);
            m.write_matrix_market(&mut w).map_err(|e| io_err(&path, e))?;
            w.flush().map_err(|e| io_err(&path, e))?;
            let report = EvalReport {
                protocol: protocol.name().into(),
                folds: vec![],
                aggregate: m.entries.len() as f64,
                details: json!({ "n": m.n, "stored_entries": m.entries.len(), "k": ann.k, "matrix": "similarity.mtx" }),
                params,
                timing: Timing {
                    train_seconds,
                    query_seconds: t.elapsed().as_secs_f64(),
                    distance_evaluations: 0,
                },
                seed,
            };
            write_report(&dir, &report, "n,stored_entries", &[vec![m.n as f64, m.entries.len() as f64]])?;
            println!("wrote {} ({} stored entries)", path.display(), m.entries.len());
        }
    }
    Ok(())
}

fn cmd_distance(args: &DistanceArgs) -> CliResult<()> {
    let forest = load_model(&args.model)?;
    let left = read_rows(&args.left, false, args.header)?;
    let right = read_rows(&args.right, false, args.header)?;
    check_dim(&left, forest.dim())?;
    check_dim(&right, forest.dim())?;
    if left.len() != right.len() {
        return Err(CliError::new(
            EXIT_DATA,
            HfdError::LengthMismatch {
                left: left.len(),
                right: right.len(),
            }
            .to_string(),
        ));
    }
    let mut out = open_output(args.output.as_deref())?;
    let w = |e: std::io::Error| CliError::new(EXIT_DATA, format!("writing distances: {e}"));
    writeln!(out, "row,distance").map_err(w)?;
    for i in 0..left.len() {
        let d = forest_distance(&forest, &left[i], &right[i]).map_err(data_err)?;
        writeln!(out, "{i},{d}").map_err(w)?;
    }
    out.flush().map_err(w)
}

fn cmd_constraints(command: ConstraintsCommand) -> CliResult<()> {
    match command {
        ConstraintsCommand::Sample {
            data,
            format,
            header,
            must_link,
            cannot_link,
            seed,
            output,
        } => {
            let ds = crate::data::load_dataset(
                &data,
                format,
                CsvOptions {
                    label_column: true,
                    header,
                },
            )
            .map_err(data_err)?;
            let labels = ds.require_labels().map_err(data_err)?;
            let cons = sample_constraints(labels, must_link, cannot_link, seed).map_err(|e| classify(e, EXIT_CONFIG))?;
            let mut out = open_output(output.as_deref())?;
            cons.write_csv(&mut out)
                .and_then(|_| out.flush())
                .map_err(|e| CliError::new(EXIT_DATA, format!("writing constraints: {e}")))?;
            eprintln!("sampled {} must-link and {} cannot-link pairs", cons.must_link.len(), cons.cannot_link.len());
            Ok(())
        }
    }
}

fn cmd_dataset(command: DatasetCommand) -> CliResult<()> {
    match command {
        DatasetCommand::Normalize {
            data,
            format,
            unlabeled,
            header,
            output,
            stats,
        } => {
            let ds = crate::data::load_dataset(
                &data,
                format,
                CsvOptions {
                    label_column: !unlabeled,
                    header,
                },
            )
            .map_err(data_err)?;
            let (norm, st): (Dataset, NormStats) = normalize(&ds);
            let f = File::create(&output).map_err(|e| io_err(&output, e))?;
            let mut w = BufWriter::new(f);
            write_csv(&norm, &mut w).and_then(|_| w.flush()).map_err(|e| io_err(&output, e))?;
            if let Some(p) = stats {
                write_file(&p, serde_json::to_string_pretty(&st).expect("stats serialize").as_bytes())?;
            }
            Ok(())
        }
    }
}

fn read_ids(path: &Path) -> CliResult<Vec<i64>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| CliError::new(EXIT_DATA, format!("{}: row {}: not an integer: {l:?}", path.display(), i + 1)))
        })
        .collect()
}

fn cmd_vmeasure(args: &VmeasureArgs) -> CliResult<()> {
    let p = read_ids(&args.predicted)?;
    let t = read_ids(&args.truth)?;
    let v = eval::vmeasure_parts(&p, &t).map_err(data_err)?;
    println!("{}", serde_json::to_string(&v).expect("json"));
    Ok(())
}
