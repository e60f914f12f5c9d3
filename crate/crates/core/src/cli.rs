//! Command-line front end: `train`, `infer`, `eval`, `synth` and `inspect`.
//!
//! Exit codes: 0 on success, 1 when the pipeline fails, 2 on usage errors.
//! Reports go to stdout (or `--out`) as JSON lines; human-readable summaries
//! go to stderr. Output files are written to a temporary sibling and renamed
//! into place only after the whole payload is ready.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::clustering::DEFAULT_K;
use crate::landmark::{parse_landmark_records, LandmarkRecord, TopologyKind};
use crate::pipeline::bundle::BundleError;
use crate::pipeline::{
    evaluate, infer_flow, load_bundle, save_bundle, train_flow, LabelRecord, LabeledSet, ModelBundle, PipelineError,
    TrainConfig,
};
use crate::ranking::{ProductRecord, Ranker};
use crate::synthgen::{generate_corpus, CorpusSpec, SynthError, DEFAULT_GROUPING, DEFAULT_NOISE, NUM_CLASSES};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const LANDMARKS_FILE: &str = "landmarks.jsonl";
pub const PRODUCTS_FILE: &str = "products.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";

#[derive(Debug, Parser)]
#[command(name = "unpose", version, about = "Discover pose classes and report missing product images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Learn pose classes and a ranker from a reference catalog.
    Train(TrainArgs),
    /// Report missing pose classes for each product in a landmark file.
    Infer(InferArgs),
    /// Score inferred missing sets against human labels.
    Eval(EvalArgs),
    /// Generate a labeled synthetic corpus.
    Synth(SynthArgs),
    /// Summarize a model bundle.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct Parallelism {
    /// Worker threads; 1 keeps every step sequential.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    threads: u16,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    landmarks: PathBuf,
    #[arg(long)]
    products: PathBuf,
    /// Bundle path to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Expected topology; taken from the first record when omitted.
    #[arg(long)]
    topology: Option<TopologyKind>,
    /// Cluster raw embeddings instead of autoencoder codes.
    #[arg(long)]
    no_autoencoder: bool,
    #[command(flatten)]
    parallel: Parallelism,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    landmarks: PathBuf,
    #[arg(long)]
    products: PathBuf,
    /// Report file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    parallel: Parallelism,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    landmarks: PathBuf,
    #[arg(long)]
    products: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    parallel: Parallelism,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory; created if needed.
    #[arg(long)]
    out: PathBuf,
    /// A class count N (classes 0..N) or a comma-separated list of class ids.
    #[arg(long, default_value = "6", value_parser = parse_classes)]
    classes: ClassList,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = DEFAULT_NOISE)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = TopologyKind::Pose3d33)]
    topology: TopologyKind,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Debug, Clone)]
struct ClassList(Vec<u8>);

fn parse_classes(s: &str) -> Result<ClassList, String> {
    let s = s.trim();
    if !s.contains(',') {
        let n: u8 = s.parse().map_err(|_| format!("expected a class count or a list of class ids, got {s:?}"))?;
        if n == 0 || n > NUM_CLASSES {
            return Err(format!("class count must be 1..={NUM_CLASSES}"));
        }
        return Ok(ClassList((0..n).collect()));
    }
    let ids = s
        .split(',')
        .map(|t| t.trim().parse::<u8>().map_err(|_| format!("bad class id {t:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(bad) = ids.iter().find(|&&c| c >= NUM_CLASSES) {
        return Err(format!("class id {bad} is outside 0..{NUM_CLASSES}"));
    }
    Ok(ClassList(ids))
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {count} malformed landmark line(s); first: {first}")]
    Landmarks { path: PathBuf, count: usize, first: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{path}: {source}")]
    Bundle {
        path: PathBuf,
        #[source]
        source: BundleError,
    },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{0}")]
    Input(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging();
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("UNPOSE_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train(a) => with_threads(a.parallel.threads, || cmd_train(&a)),
        Command::Infer(a) => with_threads(a.parallel.threads, || cmd_infer(&a)),
        Command::Eval(a) => with_threads(a.parallel.threads, || cmd_eval(&a)),
        Command::Synth(a) => cmd_synth(&a),
        Command::Inspect(a) => cmd_inspect(&a),
    }
}

fn with_threads<F>(threads: u16, f: F) -> Result<(), CliError>
where
    F: FnOnce() -> Result<(), CliError> + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads as usize)
        .build()
        .map_err(|e| CliError::Input(format!("cannot start {threads} worker threads: {e}")))?;
    pool.install(f)
}

/// `SOURCE_DATE_EPOCH` when set, so rebuilt bundles stay byte-identical.
fn trained_at() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.trim().parse().ok()).unwrap_or(0)
}

fn bundle_err(path: &Path) -> impl FnOnce(BundleError) -> CliError + '_ {
    move |source| CliError::Bundle { path: path.to_path_buf(), source }
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(io_err(path))
}

fn read_json_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value =
            serde_json::from_str(&line).map_err(|source| CliError::Json { path: path.to_path_buf(), line: i + 1, source })?;
        out.push(value);
    }
    Ok(out)
}

fn read_landmarks(path: &Path) -> Result<Vec<LandmarkRecord>, CliError> {
    let parsed = parse_landmark_records(open(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if let Some(first) = parsed.errors.first() {
        return Err(CliError::Landmarks { path: path.to_path_buf(), count: parsed.errors.len(), first: first.to_string() });
    }
    for w in &parsed.warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(parsed.records)
}

fn json_lines<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("report types serialize");
        out.push(b'\n');
    }
    out
}

/// Writes `bytes` to a temporary file next to `path`, then renames it.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(p) => write_atomic(p, bytes),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes).and_then(|_| stdout.flush()).map_err(io_err(Path::new("<stdout>")))
        }
    }
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let products: Vec<ProductRecord> = read_json_lines(&a.products)?;
    let config = TrainConfig {
        k: a.k,
        seed: a.seed,
        use_autoencoder: !a.no_autoencoder,
        topology: a.topology,
        trained_at: trained_at(),
        ..Default::default()
    };
    let out = train_flow(open(&a.landmarks)?, &products, &config)?;
    save_bundle(&out.bundle, &a.out).map_err(bundle_err(&a.out))?;
    let s = &out.bundle.training_summary;
    eprintln!(
        "trained {} images from {} products: k = {}, objective = {:.6}, topology {}, autoencoder {}",
        s.n_images,
        s.n_products,
        s.k,
        s.objective,
        out.bundle.topology(),
        if out.bundle.autoencoder.is_some() { "on" } else { "off" },
    );
    Ok(())
}

/// Landmark records grouped by product id, in product id order.
fn group_by_product(records: Vec<LandmarkRecord>) -> BTreeMap<String, Vec<LandmarkRecord>> {
    let mut groups: BTreeMap<String, Vec<LandmarkRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.product_id.clone()).or_default().push(r);
    }
    groups
}

fn product_index(products: Vec<ProductRecord>) -> Result<BTreeMap<String, ProductRecord>, CliError> {
    let mut by_id = BTreeMap::new();
    for p in products {
        if by_id.contains_key(&p.product_id) {
            return Err(CliError::Input(format!("duplicate product id {}", p.product_id)));
        }
        by_id.insert(p.product_id.clone(), p);
    }
    Ok(by_id)
}

fn lookup<'a>(products: &'a BTreeMap<String, ProductRecord>, id: &str) -> Result<&'a ProductRecord, CliError> {
    products.get(id).ok_or_else(|| CliError::Input(format!("product {id} is missing from the products file")))
}

fn cmd_infer(a: &InferArgs) -> Result<(), CliError> {
    let bundle = load_bundle(&a.model).map_err(bundle_err(&a.model))?;
    let products = product_index(read_json_lines(&a.products)?)?;
    let groups = group_by_product(read_landmarks(&a.landmarks)?);
    if groups.is_empty() {
        return Err(CliError::Input(format!("no images for product: {} has no landmark records", a.landmarks.display())));
    }
    let mut reports = Vec::with_capacity(groups.len());
    for (id, records) in &groups {
        reports.push(infer_flow(&bundle, records, lookup(&products, id)?)?);
    }
    emit(a.out.as_deref(), &json_lines(&reports))?;
    let qualifying = reports.iter().filter(|r| r.qualifies).count();
    eprintln!("{} products inferred, {qualifying} below the image threshold", reports.len());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let bundle = load_bundle(&a.model).map_err(bundle_err(&a.model))?;
    let products = product_index(read_json_lines(&a.products)?)?;
    let mut groups = group_by_product(read_landmarks(&a.landmarks)?);
    let labels: Vec<LabelRecord> = read_json_lines(&a.labels)?;
    let mut sets = Vec::with_capacity(labels.len());
    for label in labels {
        let records = groups.remove(&label.product_id).unwrap_or_default();
        if records.is_empty() {
            return Err(CliError::Input(format!("no images for product {}", label.product_id)));
        }
        sets.push(LabeledSet {
            product: lookup(&products, &label.product_id)?.clone(),
            records,
            true_missing: label.true_missing.into_iter().collect(),
        });
    }
    let report = evaluate(&bundle, &sets)?;
    emit(a.out.as_deref(), &json_lines(std::slice::from_ref(&report)))?;
    let show = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
    eprintln!(
        "{} imagesets: accuracy {}, precision {}, recall {} ({} excluded from accuracy)",
        report.imagesets.len(),
        show(report.mean_accuracy),
        show(report.mean_precision),
        show(report.mean_recall),
        report.excluded,
    );
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    let spec = CorpusSpec {
        classes: a.classes.0.clone(),
        per_class: a.per_class,
        noise_sigma: a.noise,
        topology: a.topology,
        seed: a.seed,
        product_grouping: DEFAULT_GROUPING,
    };
    let corpus = generate_corpus(&spec)?;
    std::fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    write_atomic(&a.out.join(LANDMARKS_FILE), &json_lines(&corpus.records))?;
    write_atomic(&a.out.join(PRODUCTS_FILE), &json_lines(&corpus.products))?;
    write_atomic(&a.out.join(GROUND_TRUTH_FILE), &json_lines(&corpus.ground_truth))?;
    eprintln!(
        "wrote {} images of {} classes in {} products to {}",
        corpus.records.len(),
        spec.classes.len(),
        corpus.products.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct BundleSummary<'a> {
    version: u32,
    topology: TopologyKind,
    feature_dimension: usize,
    feature_fingerprint: &'a str,
    ratio_clamp: f64,
    ratio_epsilon: f64,
    autoencoder: bool,
    cluster_dimension: usize,
    k: usize,
    ranker: &'static str,
    training_summary: &'a crate::pipeline::TrainingSummary,
}

fn summarize(b: &ModelBundle) -> BundleSummary<'_> {
    BundleSummary {
        version: b.version,
        topology: b.topology(),
        feature_dimension: b.feature_config.dimension,
        feature_fingerprint: &b.feature_config.fingerprint,
        ratio_clamp: b.feature_config.ratio_clamp,
        ratio_epsilon: b.feature_config.ratio_epsilon,
        autoencoder: b.autoencoder.is_some(),
        cluster_dimension: b.centroid_model.dimension,
        k: b.k(),
        ranker: match b.ranker {
            Ranker::Gbdt(_) => "gbdt",
            Ranker::Frequency(_) => "frequency",
        },
        training_summary: &b.training_summary,
    }
}

fn cmd_inspect(a: &InspectArgs) -> Result<(), CliError> {
    let bundle = load_bundle(&a.model).map_err(bundle_err(&a.model))?;
    let summary = summarize(&bundle);
    emit(None, &json_lines(std::slice::from_ref(&summary)))?;
    eprintln!(
        "bundle v{}: {} features ({}), k = {}, {} ranker, autoencoder {}",
        summary.version,
        summary.feature_dimension,
        summary.topology,
        summary.k,
        summary.ranker,
        if summary.autoencoder { "on" } else { "off" },
    );
    Ok(())
}
