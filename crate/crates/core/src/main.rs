//! `lgsample` command-line front end.
//!
//! Exit status: 0 on success, 1 when inputs fail validation, 2 when a file
//! cannot be read or written.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use lgsample::embedstore::{decode_store, encode_store, l2_normalize, EmbeddingMatrix, ScopeLabels};
use lgsample::fewshot::{run_fewshot, EpisodeSpec};
use lgsample::knn::{
    attach_scopes, partition_count, read_neighbors_jsonl, topk_exact, topk_scoped, write_neighbors_jsonl,
    SearchParams, DEFAULT_BLOCK_SIZE,
};
use lgsample::labels::{join_labels, read_labels_csv, Split};
use lgsample::linprobe::{cost_grid, sweep_and_fit, MetricKind, ProbeConfig};
use lgsample::lossref::{
    clip_symmetric, fd_check_loss, infonce, simsiam_loss, FeatureBatch, LossKind, Role, Temperature, DEFAULT_TAU,
};
use lgsample::sampler::{build_pairs, manifest_stats, write_manifest_jsonl, PairPolicy};
use lgsample::testenc::{read_captions_jsonl, HashEncoder};

const VERSION: &str = env!("CARGO_PKG_VERSION");
const THREADS_ENV: &str = "LGSAMPLE_THREADS";

#[derive(Parser)]
#[command(name = "lgsample", version, about = "Caption-neighbor pair sampling and frozen-feature evaluation")]
struct Cli {
    /// TOML file with per-command defaults; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (falls back to the config file, then LGSAMPLE_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an .lgem store from vector or caption JSON Lines.
    Ingest(IngestArgs),
    /// Exact cosine top-k neighbors.
    Knn(KnnArgs),
    /// Turn neighbor lists into a positive-pair manifest.
    SamplePairs(SampleArgs),
    /// Weighted-kNN few-shot episodes.
    EvalFewshot(FewshotArgs),
    /// Logistic-regression probe with a cost sweep.
    EvalLinprobe(LinprobeArgs),
    /// Loss values and finite-difference gradient report for two feature files.
    LossCheck(LossArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// JSON Lines of {"id", "vector", "scope"?}.
    #[arg(long, conflicts_with = "captions", required_unless_present = "captions")]
    vectors: Option<PathBuf>,
    /// JSON Lines of {"id", "text", "scope"?}, embedded with the built-in hash encoder.
    #[arg(long)]
    captions: Option<PathBuf>,
    /// Hash-encoder dimension for --captions.
    #[arg(long)]
    dim: Option<usize>,
    /// L2-normalize vectors before writing.
    #[arg(long)]
    normalize: bool,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ScopeMode {
    Global,
    ByLabel,
}

#[derive(Args)]
struct KnnArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Query store; defaults to the corpus itself.
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(short)]
    k: Option<usize>,
    /// Skip corpus records whose id equals the query id (default: on when querying the corpus itself).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    exclude_self: Option<bool>,
    #[arg(long, value_enum)]
    scope_mode: Option<ScopeMode>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(short, long)]
    out: PathBuf,
    /// Timing sidecar; defaults to <out>.stats.json.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    neighbors: PathBuf,
    #[arg(long)]
    k_keep: Option<usize>,
    #[arg(long)]
    min_sim: Option<f32>,
    /// Store whose scope labels are copied into the manifest.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
    /// Stats sidecar; defaults to <out>.stats.json.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct FewshotArgs {
    #[arg(long)]
    features: PathBuf,
    /// CSV with header id,label,split.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    n_shot: Option<usize>,
    #[arg(long)]
    n_query: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Include every episode's accuracy in the report.
    #[arg(long)]
    per_episode: bool,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct LinprobeArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// accuracy or mean-per-class.
    #[arg(long)]
    metric: Option<MetricKind>,
    #[arg(long)]
    grid_points: Option<usize>,
    #[arg(long)]
    cost_min: Option<f64>,
    #[arg(long)]
    cost_max: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    standardize: Option<bool>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct LossArgs {
    /// Source-side features (rows paired with --b by position).
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    tau: Option<f64>,
    /// Central-difference step.
    #[arg(long)]
    eps: Option<f64>,
    /// Rows used for the finite-difference check.
    #[arg(long)]
    fd_rows: Option<usize>,
}

// Config file

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    threads: Option<usize>,
    #[serde(default)]
    ingest: IngestFile,
    #[serde(default)]
    knn: KnnFile,
    #[serde(default)]
    sample_pairs: SampleFile,
    #[serde(default)]
    fewshot: FewshotFile,
    #[serde(default)]
    linprobe: LinprobeFile,
    #[serde(default)]
    loss_check: LossFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct IngestFile {
    dim: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct KnnFile {
    k: Option<usize>,
    exclude_self: Option<bool>,
    scope_mode: Option<ScopeMode>,
    block_size: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleFile {
    k_keep: Option<usize>,
    min_sim: Option<f32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FewshotFile {
    n_way: Option<usize>,
    n_shot: Option<usize>,
    n_query: Option<usize>,
    episodes: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinprobeFile {
    metric: Option<MetricKind>,
    grid_points: Option<usize>,
    cost_min: Option<f64>,
    cost_max: Option<f64>,
    max_iters: Option<usize>,
    tolerance: Option<f64>,
    standardize: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct LossFile {
    tau: Option<f64>,
    eps: Option<f64>,
    fd_rows: Option<usize>,
}

// Failure classes

/// Marks a failure to read or write a file; anything else is a validation error.
#[derive(Debug)]
struct IoFailure {
    action: &'static str,
    path: PathBuf,
    source: std::io::Error,
}

impl fmt::Display for IoFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cannot {} {}", self.action, self.path.display())
    }
}

impl std::error::Error for IoFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| {
        IoFailure {
            action: "read",
            path: path.to_owned(),
            source,
        }
        .into()
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| {
        IoFailure {
            action: "write",
            path: path.to_owned(),
            source,
        }
        .into()
    })
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn load_store(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = read_file(path)?;
    decode_store(&bytes).with_context(|| format!("{}", path.display()))
}

fn sidecar(out: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let mut name = out.as_os_str().to_owned();
        name.push(".stats.json");
        PathBuf::from(name)
    })
}

/// Common header of every JSON the tool writes.
fn envelope(command: &str, config: Value, seed: Option<u64>) -> serde_json::Map<String, Value> {
    let mut map = serde_json::Map::new();
    map.insert("tool".into(), json!("lgsample"));
    map.insert("version".into(), json!(VERSION));
    map.insert("command".into(), json!(command));
    map.insert("seed".into(), json!(seed));
    map.insert("config".into(), config);
    map
}

fn resolve_threads(flag: Option<usize>, file: Option<usize>) -> Result<usize> {
    let env = match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| anyhow!("{THREADS_ENV}={v:?} is not a thread count"))?,
        ),
        _ => None,
    };
    let threads = flag.or(file).or(env).unwrap_or_else(lgsample::default_threads);
    if threads == 0 {
        bail!("thread count must be at least 1");
    }
    Ok(threads)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lgsample: error: {e:#}");
            if e.chain().any(|c| c.is::<IoFailure>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => {
            let bytes = read_file(path)?;
            let text = String::from_utf8(bytes).with_context(|| format!("{}: not UTF-8", path.display()))?;
            toml::from_str::<FileConfig>(&text).with_context(|| format!("{}", path.display()))?
        }
        None => FileConfig::default(),
    };
    let threads = resolve_threads(cli.threads, file.threads)?;
    lgsample::with_threads(threads, move || match cli.command {
        Command::Ingest(a) => ingest(a, &file.ingest),
        Command::Knn(a) => knn(a, &file.knn, threads),
        Command::SamplePairs(a) => sample_pairs(a, &file.sample_pairs),
        Command::EvalFewshot(a) => eval_fewshot(a, &file.fewshot, threads),
        Command::EvalLinprobe(a) => eval_linprobe(a, &file.linprobe, threads),
        Command::LossCheck(a) => loss_check(a, &file.loss_check),
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VectorLine {
    id: String,
    vector: Vec<f32>,
    #[serde(default)]
    scope: Option<String>,
}

fn ingest(args: IngestArgs, file: &IngestFile) -> Result<()> {
    let matrix = if let Some(path) = &args.captions {
        let dim = args.dim.or(file.dim).unwrap_or(384);
        if dim == 0 {
            bail!("--dim must be at least 1");
        }
        let captions = read_captions_jsonl(read_file(path)?.as_slice()).with_context(|| format!("{}", path.display()))?;
        HashEncoder::new(dim)
            .encode_all(&captions)
            .with_context(|| format!("{}", path.display()))?
    } else {
        let path = args.vectors.as_ref().expect("clap requires one input");
        let text = String::from_utf8(read_file(path)?).with_context(|| format!("{}: not UTF-8", path.display()))?;
        let mut ids = Vec::new();
        let mut values = Vec::new();
        let mut scopes = Vec::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: VectorLine =
                serde_json::from_str(line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
            if *dim.get_or_insert(rec.vector.len()) != rec.vector.len() {
                bail!(
                    "{} line {}: vector has {} values, earlier lines have {}",
                    path.display(),
                    i + 1,
                    rec.vector.len(),
                    dim.unwrap_or_default()
                );
            }
            ids.push(rec.id);
            values.extend(rec.vector);
            scopes.push(rec.scope);
        }
        let dim = dim.ok_or_else(|| anyhow!("{}: no records", path.display()))?;
        let scope_labels = if scopes.iter().all(Option::is_some) {
            let labels: Vec<&str> = scopes.iter().flatten().map(String::as_str).collect();
            Some(ScopeLabels::from_labels(&labels))
        } else if scopes.iter().any(Option::is_some) {
            bail!("{}: some records have a scope and some do not", path.display());
        } else {
            None
        };
        let raw = EmbeddingMatrix::new(ids, dim, values, scope_labels, false)
            .with_context(|| format!("{}", path.display()))?;
        if args.normalize {
            l2_normalize(&raw)?
        } else {
            let normalized = raw.is_normalized();
            if !normalized {
                warn!("vectors are not unit-norm; knn will reject this store unless --normalize is given");
            }
            raw
        }
    };
    write_file(&args.out, &encode_store(&matrix)?)?;
    info!(
        "wrote {} records of dimension {} to {}",
        matrix.len(),
        matrix.dim(),
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct KnnConfig {
    corpus: String,
    queries: Option<String>,
    k: usize,
    exclude_self: bool,
    scope_mode: ScopeMode,
    block_size: usize,
    threads: usize,
}

fn knn(args: KnnArgs, file: &KnnFile, threads: usize) -> Result<()> {
    let k = args.k.or(file.k).unwrap_or(10);
    let scope_mode = args.scope_mode.or(file.scope_mode).unwrap_or(ScopeMode::Global);
    let block_size = args.block_size.or(file.block_size).unwrap_or(DEFAULT_BLOCK_SIZE);
    let exclude_self = args.exclude_self.or(file.exclude_self).unwrap_or(args.queries.is_none());
    if k == 0 {
        bail!("k must be at least 1");
    }
    if block_size == 0 {
        bail!("block size must be at least 1");
    }
    if scope_mode == ScopeMode::ByLabel {
        if args.queries.is_some() {
            bail!("--scope-mode by-label searches the corpus against itself; drop --queries");
        }
        if !exclude_self {
            bail!("--scope-mode by-label always excludes the query itself");
        }
    }
    let corpus = load_store(&args.corpus)?;
    let queries = args.queries.as_deref().map(load_store).transpose()?;
    let partitions = match scope_mode {
        ScopeMode::Global => 1,
        ScopeMode::ByLabel => {
            if corpus.scopes().is_none() {
                bail!(
                    "{}: --scope-mode by-label needs scope labels, but the store has none",
                    args.corpus.display()
                );
            }
            partition_count(&corpus)
        }
    };
    let n_queries = queries.as_ref().map_or(corpus.len(), EmbeddingMatrix::len);
    info!(
        "searching {n_queries} queries against {} records (dim {}, k {k}, {partitions} partition(s), {threads} thread(s))",
        corpus.len(),
        corpus.dim()
    );
    let start = Instant::now();
    let lists = match scope_mode {
        ScopeMode::Global => {
            let params = SearchParams::new(k).exclude_self(exclude_self).block_size(block_size);
            topk_exact(&corpus, queries.as_ref().unwrap_or(&corpus), params)
        }
        ScopeMode::ByLabel => topk_scoped(&corpus, k, block_size),
    }
    .with_context(|| format!("{}", args.corpus.display()))?;
    let wall = start.elapsed().as_secs_f64();

    let mut out = Vec::new();
    write_neighbors_jsonl(&lists, &mut out)?;
    write_file(&args.out, &out)?;

    let config = KnnConfig {
        corpus: args.corpus.display().to_string(),
        queries: args.queries.as_ref().map(|p| p.display().to_string()),
        k,
        exclude_self,
        scope_mode,
        block_size,
        threads,
    };
    let mut stats = envelope("knn", serde_json::to_value(&config)?, None);
    stats.insert("queries".into(), json!(n_queries));
    stats.insert("corpus_records".into(), json!(corpus.len()));
    stats.insert("dim".into(), json!(corpus.dim()));
    stats.insert("partition_count".into(), json!(partitions));
    stats.insert("wall_time_s".into(), json!(wall));
    stats.insert("records_per_s".into(), json!(n_queries as f64 / wall.max(1e-9)));
    let stats_path = sidecar(&args.out, args.stats);
    write_json(&stats_path, &Value::Object(stats))?;
    info!(
        "wrote {} neighbor lists to {} in {wall:.3} s",
        lists.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SampleConfig {
    neighbors: String,
    corpus: Option<String>,
    k_keep: usize,
    min_sim: Option<f32>,
}

fn sample_pairs(args: SampleArgs, file: &SampleFile) -> Result<()> {
    let policy = PairPolicy {
        k_keep: args.k_keep.or(file.k_keep).unwrap_or(1),
        min_similarity: args.min_sim.or(file.min_sim),
    };
    if policy.k_keep == 0 {
        bail!("k_keep must be at least 1");
    }
    let bytes = read_file(&args.neighbors)?;
    let mut lists = read_neighbors_jsonl(bytes.as_slice()).with_context(|| format!("{}", args.neighbors.display()))?;
    if let Some(path) = &args.corpus {
        attach_scopes(&mut lists, &load_store(path)?);
    }
    let manifest = build_pairs(&lists, &policy).with_context(|| format!("{}", args.neighbors.display()))?;
    let mut out = Vec::new();
    write_manifest_jsonl(&manifest.pairs, &mut out)?;
    write_file(&args.out, &out)?;

    let stats = manifest_stats(&manifest.pairs);
    let mut warnings = Vec::new();
    if manifest.pairs.is_empty() {
        let msg = match policy.min_similarity {
            Some(floor) => format!("empty manifest: no neighbor reaches the similarity floor {floor}"),
            None => "empty manifest: the neighbor file has no usable neighbors".to_owned(),
        };
        warn!("{msg}");
        warnings.push(msg);
    }
    if stats.duplicate_caption_pairs > 0 {
        warnings.push(format!(
            "{} pairs join distinct records with identical embeddings",
            stats.duplicate_caption_pairs
        ));
    }
    let config = SampleConfig {
        neighbors: args.neighbors.display().to_string(),
        corpus: args.corpus.as_ref().map(|p| p.display().to_string()),
        k_keep: policy.k_keep,
        min_sim: policy.min_similarity,
    };
    let mut report = envelope("sample-pairs", serde_json::to_value(&config)?, None);
    report.insert("sources".into(), json!(lists.len()));
    report.insert("short_sources".into(), json!(manifest.short_sources));
    report.insert("stats".into(), serde_json::to_value(&stats)?);
    report.insert("warnings".into(), json!(warnings));
    write_json(&sidecar(&args.out, args.stats), &Value::Object(report))?;
    info!("wrote {} pairs to {}", manifest.pairs.len(), args.out.display());
    Ok(())
}

fn load_labeled(features: &Path, labels: &Path) -> Result<lgsample::labels::LabeledFeatureSet> {
    let matrix = load_store(features)?;
    let rows = read_labels_csv(read_file(labels)?.as_slice()).with_context(|| format!("{}", labels.display()))?;
    join_labels(&matrix, &rows).with_context(|| format!("{} with {}", features.display(), labels.display()))
}

fn eval_fewshot(args: FewshotArgs, file: &FewshotFile, threads: usize) -> Result<()> {
    let defaults = EpisodeSpec::default();
    let spec = EpisodeSpec {
        n_way: args.n_way.or(file.n_way).unwrap_or(defaults.n_way),
        n_shot: args.n_shot.or(file.n_shot).unwrap_or(defaults.n_shot),
        n_query: args.n_query.or(file.n_query).unwrap_or(defaults.n_query),
        episodes: args.episodes.or(file.episodes).unwrap_or(defaults.episodes),
        seed: args.seed.or(file.seed).unwrap_or(defaults.seed),
    };
    spec.validate()?;
    let set = load_labeled(&args.features, &args.labels)?;
    info!(
        "running {} episodes ({}-way {}-shot, {} queries per class)",
        spec.episodes, spec.n_way, spec.n_shot, spec.n_query
    );
    let report = run_fewshot(&set, &spec, args.per_episode)?;
    let config = json!({
        "features": args.features.display().to_string(),
        "labels": args.labels.display().to_string(),
        "episode_spec": spec,
        "threads": threads,
        "per_episode": args.per_episode,
    });
    let mut out = envelope("eval-fewshot", config, Some(spec.seed));
    out.insert("mean".into(), json!(report.mean_accuracy));
    out.insert("ci95".into(), json!(report.ci95));
    out.insert("ci95_defined".into(), json!(report.ci95_defined));
    out.insert("episodes".into(), json!(report.episodes));
    out.insert("centering".into(), json!(report.centering));
    out.insert("n_way".into(), json!(report.n_way));
    out.insert("n_shot".into(), json!(report.n_shot));
    out.insert("n_query".into(), json!(report.n_query));
    if let Some(acc) = &report.per_episode_accuracies {
        out.insert("per_episode_accuracies".into(), json!(acc));
    }
    write_json(&args.out, &Value::Object(out))?;
    println!(
        "fewshot {}-way {}-shot: mean accuracy {:.4} +/- {:.4} over {} episodes (seed {})",
        spec.n_way, spec.n_shot, report.mean_accuracy, report.ci95, report.episodes, spec.seed
    );
    Ok(())
}

fn eval_linprobe(args: LinprobeArgs, file: &LinprobeFile, threads: usize) -> Result<()> {
    let defaults = ProbeConfig::default();
    let points = args.grid_points.or(file.grid_points).unwrap_or(96);
    let low = args.cost_min.or(file.cost_min).unwrap_or(1e-6);
    let high = args.cost_max.or(file.cost_max).unwrap_or(1e6);
    if points == 0 {
        bail!("--grid-points must be at least 1");
    }
    if !(low > 0.0 && high >= low && high.is_finite()) {
        bail!("cost range [{low}, {high}] must be positive and ordered");
    }
    let config = ProbeConfig {
        cost_grid: cost_grid(points, low, high),
        max_iterations: args.max_iters.or(file.max_iters).unwrap_or(defaults.max_iterations),
        gradient_tolerance: args.tolerance.or(file.tolerance).unwrap_or(defaults.gradient_tolerance),
        lbfgs_memory: defaults.lbfgs_memory,
        metric: args.metric.or(file.metric).unwrap_or(defaults.metric),
        standardize: args.standardize.or(file.standardize).unwrap_or(defaults.standardize),
    };
    let set = load_labeled(&args.features, &args.labels)?;
    let (train, val, test) = (set.split(Split::Train), set.split(Split::Val), set.split(Split::Test));
    info!(
        "sweeping {points} costs on {} train / {} val records, testing on {}",
        train.len(),
        val.len(),
        test.len()
    );
    let report = sweep_and_fit(&train, &val, &test, &config)?;
    let resolved = json!({
        "features": args.features.display().to_string(),
        "labels": args.labels.display().to_string(),
        "grid_points": points,
        "cost_min": low,
        "cost_max": high,
        "threads": threads,
        "probe": config,
    });
    let mut out = envelope("eval-linprobe", resolved, None);
    out.insert("report".into(), serde_json::to_value(&report)?);
    write_json(&args.out, &Value::Object(out))?;
    println!(
        "linprobe {}: test {:.4} at cost {:.3e} (val {:.4}, {} classes)",
        serde_json::to_value(report.metric)?.as_str().unwrap_or("metric"),
        report.test_metric,
        report.best_cost,
        report.best_val_metric,
        report.n_classes
    );
    Ok(())
}

fn to_batch(m: &EmbeddingMatrix, rows: usize, role: Role) -> Result<FeatureBatch> {
    let data = m.as_slice()[..rows * m.dim()].iter().map(|&v| f64::from(v)).collect();
    Ok(FeatureBatch::new(rows, m.dim(), data, role)?)
}

fn loss_check(args: LossArgs, file: &LossFile) -> Result<()> {
    let tau_value = args.tau.or(file.tau).unwrap_or(DEFAULT_TAU);
    let eps = args.eps.or(file.eps).unwrap_or(1e-6);
    let fd_rows = args.fd_rows.or(file.fd_rows).unwrap_or(8);
    let tau = Temperature::new(tau_value)?;
    if fd_rows == 0 {
        bail!("--fd-rows must be at least 1");
    }
    let a = load_store(&args.a)?;
    let b = load_store(&args.b)?;
    if a.len() != b.len() || a.dim() != b.dim() {
        bail!(
            "{} is {}x{} but {} is {}x{}",
            args.a.display(),
            a.len(),
            a.dim(),
            args.b.display(),
            b.len(),
            b.dim()
        );
    }
    if let Some(row) = (0..a.len()).find(|&r| a.id(r) != b.id(r)) {
        bail!(
            "row {row}: id {:?} in {} does not match {:?} in {}",
            a.id(row),
            args.a.display(),
            b.id(row),
            args.b.display()
        );
    }
    let n = a.len();
    let (zs, zt) = (to_batch(&a, n, Role::Source)?, to_batch(&b, n, Role::Target)?);
    let (p1, p2) = (to_batch(&a, n, Role::Prediction)?, to_batch(&b, n, Role::Prediction)?);
    let (z1, z2) = (to_batch(&a, n, Role::Projection)?, to_batch(&b, n, Role::Projection)?);
    let losses = json!({
        "infonce": infonce(&zs, &zt, tau)?,
        "clip_symmetric": clip_symmetric(&zs, &zt, tau)?,
        "simsiam": simsiam_loss(&p1, &p2, &z1, &z2)?,
    });

    let m = fd_rows.min(n);
    let small = |matrix: &EmbeddingMatrix, role| to_batch(matrix, m, role);
    let mut fd = serde_json::Map::new();
    for kind in [LossKind::InfoNce, LossKind::ClipSymmetric] {
        let inputs = [small(&a, Role::Source)?, small(&b, Role::Target)?];
        fd.insert(kind.name().into(), json!(fd_check_loss(kind, &inputs, tau, eps)?));
    }
    let inputs = [
        small(&a, Role::Prediction)?,
        small(&b, Role::Prediction)?,
        small(&a, Role::Projection)?,
        small(&b, Role::Projection)?,
    ];
    fd.insert(
        LossKind::SimSiam.name().into(),
        json!(fd_check_loss(LossKind::SimSiam, &inputs, tau, eps)?),
    );

    let config = json!({
        "a": args.a.display().to_string(),
        "b": args.b.display().to_string(),
        "tau": tau_value,
        "eps": eps,
        "fd_rows": m,
        "simsiam_inputs": "p1=a, p2=b, z1=a, z2=b",
    });
    let mut out = envelope("loss-check", config, None);
    out.insert("rows".into(), json!(n));
    out.insert("dim".into(), json!(a.dim()));
    out.insert("losses".into(), losses);
    out.insert("fd_max_relative_error".into(), Value::Object(fd));
    println!("{}", serde_json::to_string_pretty(&Value::Object(out))?);
    Ok(())
}
