//! `edgeda` command-line driver.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use serde::Serialize;

use edgeda::archive::{self, ArchiveError, Manifest};
use edgeda::complexity::{analyze, bench_inference, mean_std, BenchReport, ModelStats};
use edgeda::data::{make_splits, Splits};
use edgeda::models::{build_model, Model, ModelKind};
use edgeda::train::{evaluate, run_ablation, run_cloud, EpochReport, PipelineSeeds, Variant};
use edgeda::Error;

use config::{ConfigError, ExperimentConfig};

/// Environment variable capping `reproduce` worker threads.
pub const THREADS_ENV: &str = "EDGEDA_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "edgeda",
    version,
    about = "Cloud-to-edge domain-adaptive fault diagnosis"
)]
pub struct Cli {
    /// Suppress per-epoch progress on stderr.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the four splits and store them in one archive.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the cloud model on the source training split.
    TrainCloud {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_weights: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Transfer a trained cloud model to a fresh edge model.
    Transfer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        cloud_weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// proposed | wo-da | wo-aa
        #[arg(long)]
        variant: String,
        #[arg(long)]
        out_weights: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Accuracy and confusion matrix of a stored model on one split.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON record destination; the table always goes to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// training | finetune_src | finetune_tgt | test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Per-layer parameters, activation memory and FLOPs.
    Analyze {
        #[arg(long)]
        config: Option<PathBuf>,
        /// cloud | edge
        #[arg(long)]
        kind: String,
        #[arg(long)]
        json: bool,
    },
    /// Single-sample inference latency of a stored model.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
    },
    /// Full ablation grid over several seeds plus the complexity table.
    Reproduce {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, default_value = "runs/reproduce")]
        out: PathBuf,
        /// Skip the latency benchmark.
        #[arg(long)]
        no_bench: bool,
    },
    /// Rebuild the summary of a `reproduce` directory from its metrics.
    Summarize {
        #[arg(long)]
        out: PathBuf,
    },
    /// Print every configuration key with its default and description.
    Defaults,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Io,
    Config,
    Data,
    Divergence,
    Archive,
}

impl ErrorKind {
    pub fn code(self) -> i32 {
        match self {
            Self::Io => 1,
            Self::Config => 2,
            Self::Data => 3,
            Self::Divergence => 4,
            Self::Archive => 5,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Self::Io => "io",
            Self::Config => "config",
            Self::Data => "data",
            Self::Divergence => "divergence",
            Self::Archive => "archive",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub stage: &'static str,
    pub kind: ErrorKind,
    pub message: String,
    pub config_echo: Option<PathBuf>,
}

impl CliError {
    fn new(stage: &'static str, kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            stage,
            kind,
            message: message.into(),
            config_echo: None,
        }
    }

    /// `error stage=.. kind=.. code=.. config=.. message=".."` on one line.
    pub fn line(&self) -> String {
        let echo = self
            .config_echo
            .as_ref()
            .map_or_else(|| "-".to_string(), |p| p.display().to_string());
        format!(
            "error stage={} kind={} code={} config={} message={}",
            self.stage,
            self.kind.as_str(),
            self.kind.code(),
            echo,
            serde_json::to_string(&self.message).expect("string serializes")
        )
    }
}

fn kind_of(e: &Error) -> ErrorKind {
    match e {
        Error::Config { .. } | Error::NotFrozen(_) => ErrorKind::Config,
        Error::Data(_) | Error::InsufficientWindows { .. } | Error::Tensor(_) => ErrorKind::Data,
        Error::Diverged { .. } => ErrorKind::Divergence,
        Error::Archive(_) | Error::ParamMismatch(_) => ErrorKind::Archive,
        Error::Io(_) => ErrorKind::Io,
    }
}

trait Stage<T> {
    fn at(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T> Stage<T> for Result<T, Error> {
    fn at(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(stage, kind_of(&e), e.to_string()))
    }
}

impl<T> Stage<T> for Result<T, ArchiveError> {
    fn at(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(stage, ErrorKind::Archive, e.to_string()))
    }
}

impl<T> Stage<T> for Result<T, ConfigError> {
    fn at(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(stage, ErrorKind::Config, e.to_string()))
    }
}

impl<T> Stage<T> for std::io::Result<T> {
    fn at(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(stage, ErrorKind::Io, e.to_string()))
    }
}

/// Runs one parsed command; `Err` carries the exit code.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let quiet = cli.quiet;
    match cli.command {
        Command::GenData { config, out, seed } => {
            let cfg = with_seed(load_config(config.as_deref())?, seed)?;
            let echo = echo_config(&cfg, &with_suffix(&out, ".config"))?;
            gen_data(&cfg, &out).map_err(|e| e.echo(echo))
        }
        Command::TrainCloud {
            config,
            data,
            out_weights,
            metrics,
            seed,
        } => {
            let cfg = with_seed(load_config(config.as_deref())?, seed)?;
            let echo = echo_config(&cfg, &with_suffix(&out_weights, ".config"))?;
            train_cloud(&cfg, &data, &out_weights, &metrics, quiet).map_err(|e| e.echo(echo))
        }
        Command::Transfer {
            config,
            cloud_weights,
            data,
            variant,
            out_weights,
            metrics,
            seed,
        } => {
            let cfg = with_seed(load_config(config.as_deref())?, seed)?;
            let echo = echo_config(&cfg, &with_suffix(&out_weights, ".config"))?;
            let variant = parse_variant(&variant).map_err(|e| e.echo(echo.clone()))?;
            transfer(
                &cfg,
                &cloud_weights,
                &data,
                variant,
                &out_weights,
                &metrics,
                quiet,
            )
            .map_err(|e| e.echo(echo))
        }
        Command::Eval {
            config,
            weights,
            data,
            report,
            split,
        } => {
            let cfg = load_config(config.as_deref())?;
            let echo = match &report {
                Some(r) => Some(echo_config(&cfg, &with_suffix(r, ".config"))?),
                None => config,
            };
            eval(&cfg, &weights, &data, report.as_deref(), &split).map_err(|e| e.echo_opt(echo))
        }
        Command::Analyze { config, kind, json } => {
            let cfg = load_config(config.as_deref())?;
            let run = || -> Result<(), CliError> {
                let kind = ModelKind::parse(&kind).ok_or_else(|| {
                    CliError::new(
                        "analyze",
                        ErrorKind::Config,
                        format!("unknown model kind `{kind}`"),
                    )
                })?;
                let model = build_model(&cfg.model, kind, 0).at("analyze")?;
                let stats = analyze(&model, &cfg.model.input_shape).at("analyze")?;
                if json {
                    println!(
                        "{}",
                        serde_json::to_string(&stats).expect("stats serialize")
                    );
                } else {
                    print!("{}", stats.to_table());
                }
                Ok(())
            };
            run().map_err(|e| e.echo_opt(config))
        }
        Command::Bench {
            config,
            weights,
            repeats,
            iters,
            warmup,
        } => {
            let cfg = load_config(config.as_deref())?;
            let mut b = cfg.bench;
            b.repeats = repeats.unwrap_or(b.repeats);
            b.iters = iters.unwrap_or(b.iters);
            b.warmup = warmup.unwrap_or(b.warmup);
            let run = || -> Result<(), CliError> {
                let (model, _) = load_model(&cfg, &weights, None)?;
                let report = bench_inference(&model, &cfg.model.input_shape, b).at("bench")?;
                println!(
                    "{}",
                    serde_json::to_string(&report).expect("report serializes")
                );
                eprintln!(
                    "mean {:.4} ms, std {:.4} ms over {} repeats",
                    report.mean_ms, report.std_ms, b.repeats
                );
                Ok(())
            };
            run().map_err(|e| e.echo_opt(config))
        }
        Command::Reproduce {
            config,
            seeds,
            out,
            no_bench,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(n) = seeds {
                cfg = cfg.with("seeds", &n.to_string()).at("config")?;
            }
            fs::create_dir_all(&out).at("reproduce")?;
            let echo = echo_config(&cfg, &out.join("config.txt"))?;
            reproduce(&cfg, &out, !no_bench, quiet).map_err(|e| e.echo(echo))
        }
        Command::Summarize { out } => {
            let s = summarize(&out)?;
            print!("{s}");
            Ok(())
        }
        Command::Defaults => {
            print!("{}", config::defaults_text());
            Ok(())
        }
    }
}

impl CliError {
    fn echo(mut self, path: PathBuf) -> Self {
        self.config_echo = Some(path);
        self
    }

    /// Points at the config file itself when no echo was written.
    fn echo_opt(mut self, path: Option<PathBuf>) -> Self {
        self.config_echo = path;
        self
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    match path {
        Some(p) => ExperimentConfig::load(p).at("config"),
        None => Ok(ExperimentConfig::default()),
    }
}

fn with_seed(cfg: ExperimentConfig, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    match seed {
        Some(s) => cfg.with("seed", &s.to_string()).at("config"),
        None => Ok(cfg),
    }
}

fn parse_variant(s: &str) -> Result<Variant, CliError> {
    Variant::parse(s).ok_or_else(|| {
        CliError::new(
            "config",
            ErrorKind::Config,
            format!("unknown variant `{s}`, expected proposed | wo-da | wo-aa"),
        )
    })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> std::io::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p),
        _ => Ok(()),
    }
}

/// Writes `bytes` to a temp file beside `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    ensure_parent(path)?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn echo_config(cfg: &ExperimentConfig, path: &Path) -> Result<PathBuf, CliError> {
    write_atomic(path, cfg.resolved().as_bytes()).at("config")?;
    Ok(path.to_path_buf())
}

fn metrics_text(reports: &[EpochReport]) -> String {
    reports.iter().map(|r| r.to_json() + "\n").collect()
}

#[derive(Serialize)]
struct Timing<'a> {
    stage: &'a str,
    seed: u64,
    epoch: usize,
    wall_time_s: f64,
}

fn timing_text(stage: &str, seed: u64, reports: &[EpochReport]) -> String {
    reports
        .iter()
        .map(|r| {
            let t = Timing {
                stage,
                seed,
                epoch: r.epoch,
                wall_time_s: r.wall_time_s,
            };
            serde_json::to_string(&t).expect("timing serializes") + "\n"
        })
        .collect()
}

/// Writes the deterministic records to `path` and wall times beside it.
fn write_metrics(
    path: &Path,
    stage: &str,
    seed: u64,
    reports: &[EpochReport],
) -> Result<(), CliError> {
    write_atomic(path, metrics_text(reports).as_bytes()).at("metrics")?;
    write_atomic(
        &with_suffix(path, ".timing"),
        timing_text(stage, seed, reports).as_bytes(),
    )
    .at("metrics")
}

fn progress(quiet: bool, label: String, every: usize) -> impl FnMut(&EpochReport) {
    move |r: &EpochReport| {
        if !quiet && (r.epoch % every == 0 || r.epoch == 1) {
            eprintln!(
                "{label} epoch {} loss {:.4} lf {:.4} lc {:.4} alpha {:.3} beta {:.3} acc {:.3} ({:.1}s)",
                r.epoch, r.loss, r.loss_feature, r.loss_classify, r.alpha, r.beta, r.train_accuracy, r.wall_time_s
            );
        }
    }
}

pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let splits = make_splits(
        &cfg.source,
        &cfg.target,
        cfg.model.num_classes,
        &cfg.counts,
        PipelineSeeds::from_seed(cfg.seed).data,
    )
    .at("gen-data")?;
    let store = splits.export().at("gen-data")?;
    ensure_parent(out).at("gen-data")?;
    archive::save_archive(&store, &cfg.data_manifest(), out).at("gen-data")?;
    eprintln!(
        "wrote {} ({} / {} / {} / {} windows)",
        out.display(),
        splits.training.len(),
        splits.finetune_src.len(),
        splits.finetune_tgt.len(),
        splits.test.len()
    );
    Ok(())
}

pub fn load_data(cfg: &ExperimentConfig, path: &Path) -> Result<Splits, CliError> {
    let (store, _) = archive::load_archive(path, Some(&cfg.data_manifest())).at("load-data")?;
    Splits::import(&store, cfg.model.num_classes).at("load-data")
}

/// Loads a model archive checked against `cfg`. With `kind` unset the kind
/// recorded in the manifest is used.
pub fn load_model(
    cfg: &ExperimentConfig,
    path: &Path,
    kind: Option<ModelKind>,
) -> Result<(Model, Manifest), CliError> {
    let kind = match kind {
        Some(k) => k,
        None => {
            let bytes = fs::read(path).map_err(|e| {
                CliError::new(
                    "load-weights",
                    ErrorKind::Archive,
                    format!("{}: {e}", path.display()),
                )
            })?;
            let info = archive::verify(&bytes).at("load-weights")?;
            let m = archive::read_manifest(path, info.crc32).at("load-weights")?;
            ModelKind::parse(&m.model_kind).ok_or_else(|| {
                CliError::new(
                    "load-weights",
                    ErrorKind::Archive,
                    format!("manifest names unknown model kind `{}`", m.model_kind),
                )
            })?
        }
    };
    let expected = cfg.model_manifest(kind, cfg.seed);
    let (store, manifest) = archive::load_archive(path, Some(&expected)).at("load-weights")?;
    let mut model = build_model(&cfg.model, kind, 0).at("load-weights")?;
    model.load_params(&store).at("load-weights")?;
    Ok((model, manifest.expect("checked manifest is returned")))
}

pub fn train_cloud(
    cfg: &ExperimentConfig,
    data: &Path,
    out: &Path,
    metrics: &Path,
    quiet: bool,
) -> Result<(), CliError> {
    let splits = load_data(cfg, data)?;
    let (model, reports) = run_cloud(
        &cfg.model,
        &cfg.cloud,
        &splits.training,
        cfg.seed,
        progress(quiet, "cloud".into(), 1),
    )
    .at("train-cloud")?;
    write_metrics(metrics, "cloud", cfg.seed, &reports)?;
    ensure_parent(out).at("train-cloud")?;
    archive::save_archive(
        &model.params,
        &cfg.model_manifest(ModelKind::Cloud, cfg.seed),
        out,
    )
    .at("save-weights")?;
    if let Some(last) = reports.last() {
        eprintln!("cloud train accuracy {:.4}", last.train_accuracy);
    }
    Ok(())
}

pub fn transfer(
    cfg: &ExperimentConfig,
    cloud_weights: &Path,
    data: &Path,
    variant: Variant,
    out: &Path,
    metrics: &Path,
    quiet: bool,
) -> Result<(), CliError> {
    let splits = load_data(cfg, data)?;
    let (cloud, _) = load_model(cfg, cloud_weights, Some(ModelKind::Cloud))?;
    let run = run_ablation(
        variant,
        &cloud,
        &splits,
        &cfg.transfer,
        cfg.seed,
        progress(quiet, variant.as_str().into(), 10),
    )
    .at("transfer")?;
    write_metrics(metrics, variant.as_str(), cfg.seed, &run.reports)?;
    ensure_parent(out).at("transfer")?;
    archive::save_archive(
        &run.edge.params,
        &cfg.model_manifest(ModelKind::Edge, cfg.seed),
        out,
    )
    .at("save-weights")?;
    println!(
        "{}",
        serde_json::json!({"variant": variant.as_str(), "seed": cfg.seed, "accuracy": run.evaluation.accuracy})
    );
    Ok(())
}

pub fn eval(
    cfg: &ExperimentConfig,
    weights: &Path,
    data: &Path,
    report: Option<&Path>,
    split: &str,
) -> Result<(), CliError> {
    let (model, manifest) = load_model(cfg, weights, None)?;
    let splits = load_data(cfg, data)?;
    let set = match split {
        "training" => &splits.training,
        "finetune_src" => &splits.finetune_src,
        "finetune_tgt" => &splits.finetune_tgt,
        "test" => &splits.test,
        other => {
            return Err(CliError::new(
                "eval",
                ErrorKind::Config,
                format!("unknown split `{other}`"),
            ))
        }
    };
    let ev = evaluate(&model, set).at("eval")?;
    println!(
        "{} model on {split}: accuracy {:.4}",
        manifest.model_kind, ev.accuracy
    );
    print!("{}", ev.confusion.to_table());
    if let Some(path) = report {
        let rec = serde_json::json!({
            "model_kind": manifest.model_kind,
            "split": split,
            "accuracy": ev.accuracy,
            "confusion": ev.confusion.counts,
        });
        write_atomic(path, format!("{rec}\n").as_bytes()).at("eval")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct AccuracyRow {
    pub seed: u64,
    pub variant: String,
    pub accuracy: f64,
}

struct SeedResult {
    rows: Vec<AccuracyRow>,
    timing: String,
}

fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    out: &Path,
    quiet: bool,
) -> Result<SeedResult, CliError> {
    let splits = make_splits(
        &cfg.source,
        &cfg.target,
        cfg.model.num_classes,
        &cfg.counts,
        PipelineSeeds::from_seed(seed).data,
    )
    .at("gen-data")?;
    let (cloud, reports) = run_cloud(
        &cfg.model,
        &cfg.cloud,
        &splits.training,
        seed,
        progress(quiet, format!("seed {seed} cloud"), 5),
    )
    .at("train-cloud")?;
    let mut timing = timing_text("cloud", seed, &reports);
    write_atomic(
        &out.join(format!("metrics/cloud_s{seed}.jsonl")),
        metrics_text(&reports).as_bytes(),
    )
    .at("metrics")?;
    archive::save_archive(
        &cloud.params,
        &cfg.model_manifest(ModelKind::Cloud, seed),
        &out.join(format!("weights/cloud_s{seed}.ewt")),
    )
    .at("save-weights")?;
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let run = run_ablation(
            v,
            &cloud,
            &splits,
            &cfg.transfer,
            seed,
            progress(quiet, format!("seed {seed} {}", v.as_str()), 25),
        )
        .at("transfer")?;
        let name = format!("{}_s{seed}", v.as_str());
        timing.push_str(&timing_text(v.as_str(), seed, &run.reports));
        write_atomic(
            &out.join(format!("metrics/transfer_{name}.jsonl")),
            metrics_text(&run.reports).as_bytes(),
        )
        .at("metrics")?;
        archive::save_archive(
            &run.edge.params,
            &cfg.model_manifest(ModelKind::Edge, seed),
            &out.join(format!("weights/edge_{name}.ewt")),
        )
        .at("save-weights")?;
        write_atomic(
            &out.join(format!("reports/confusion_{name}.txt")),
            run.evaluation.confusion.to_table().as_bytes(),
        )
        .at("eval")?;
        if !quiet {
            eprintln!(
                "seed {seed} {} accuracy {:.4}",
                v.as_str(),
                run.evaluation.accuracy
            );
        }
        rows.push(AccuracyRow {
            seed,
            variant: v.as_str().to_string(),
            accuracy: run.evaluation.accuracy,
        });
    }
    Ok(SeedResult { rows, timing })
}

/// Worker threads for `jobs` independent jobs, capped by [`THREADS_ENV`].
pub fn worker_count(jobs: usize) -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(avail);
    cap.min(jobs).max(1)
}

pub fn reproduce(
    cfg: &ExperimentConfig,
    out: &Path,
    bench: bool,
    quiet: bool,
) -> Result<(), CliError> {
    for d in ["weights", "metrics", "reports"] {
        fs::create_dir_all(out.join(d)).at("reproduce")?;
    }
    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|i| cfg.seed + i).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SeedResult, CliError>>>> =
        Mutex::new((0..seeds.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..worker_count(seeds.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= seeds.len() {
                    break;
                }
                let r = run_seed(cfg, seeds[i], out, quiet);
                results.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    let mut rows = Vec::new();
    let mut timing = String::new();
    for r in results.into_inner().expect("no worker panicked") {
        let r = r.expect("every seed ran")?;
        rows.extend(r.rows);
        timing.push_str(&r.timing);
    }
    let acc: String = rows
        .iter()
        .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
        .collect();
    write_atomic(&out.join("metrics/accuracy.jsonl"), acc.as_bytes()).at("reproduce")?;
    write_atomic(&out.join("reports/timing.jsonl"), timing.as_bytes()).at("reproduce")?;

    let cloud = build_model(&cfg.model, ModelKind::Cloud, 0).at("analyze")?;
    let edge = build_model(&cfg.model, ModelKind::Edge, 0).at("analyze")?;
    let cs = analyze(&cloud, &cfg.model.input_shape).at("analyze")?;
    let es = analyze(&edge, &cfg.model.input_shape).at("analyze")?;
    let mut complexity = complexity_table(&cs, &es, None);
    write_atomic(&out.join("reports/complexity.txt"), complexity.as_bytes()).at("analyze")?;
    if bench {
        let cb = bench_inference(&cloud, &cfg.model.input_shape, cfg.bench).at("bench")?;
        let eb = bench_inference(&edge, &cfg.model.input_shape, cfg.bench).at("bench")?;
        let rec = serde_json::json!({"cloud": cb, "edge": eb});
        write_atomic(
            &out.join("reports/latency.json"),
            format!("{rec}\n").as_bytes(),
        )
        .at("bench")?;
        complexity = complexity_table(&cs, &es, Some((&cb, &eb)));
    }
    let summary = summary_table(&rows) + "\n" + &complexity;
    write_atomic(&out.join("reports/summary.txt"), summary.as_bytes()).at("reproduce")?;
    print!("{summary}");
    Ok(())
}

/// Per-variant mean and standard deviation, best first in grid order.
pub fn summary_table(rows: &[AccuracyRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:>6} {:>10} {:>10}  per-seed",
        "variant", "runs", "mean", "std"
    );
    for v in Variant::ALL {
        let accs: Vec<f64> = rows
            .iter()
            .filter(|r| r.variant == v.as_str())
            .map(|r| r.accuracy)
            .collect();
        if accs.is_empty() {
            continue;
        }
        let (m, sd) = mean_std(&accs);
        let per: Vec<String> = accs.iter().map(|a| format!("{a:.4}")).collect();
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:>10.4} {:>10.4}  {}",
            v.as_str(),
            accs.len(),
            m,
            sd,
            per.join(" ")
        );
    }
    s
}

pub fn complexity_table(
    cloud: &ModelStats,
    edge: &ModelStats,
    latency: Option<(&BenchReport, &BenchReport)>,
) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:>12} {:>12} {:>12} {:>14}",
        "model", "params", "memory (MB)", "MFLOPs", "latency (ms)"
    );
    let lat = |b: Option<&BenchReport>| {
        b.map_or_else(|| "-".to_string(), |b| format!("{:.4}", b.mean_ms))
    };
    for (name, st, b) in [
        ("cloud", cloud, latency.map(|l| l.0)),
        ("edge", edge, latency.map(|l| l.1)),
    ] {
        let _ = writeln!(
            s,
            "{:<8} {:>12} {:>12.4} {:>12.4} {:>14}",
            name,
            st.total_params,
            st.memory_mb(),
            st.mflops(),
            lat(b)
        );
    }
    let _ = writeln!(
        s,
        "edge/cloud params {:.4}, flops {:.4}",
        edge.total_params as f64 / cloud.total_params as f64,
        edge.total_flops as f64 / cloud.total_flops as f64
    );
    s
}

/// Reads `metrics/accuracy.jsonl` under a reproduce directory.
pub fn read_accuracy(out: &Path) -> Result<Vec<AccuracyRow>, CliError> {
    let path = out.join("metrics/accuracy.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| {
        CliError::new(
            "summarize",
            ErrorKind::Data,
            format!("{}: {e}", path.display()),
        )
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| {
                CliError::new(
                    "summarize",
                    ErrorKind::Data,
                    format!("{}: {e}", path.display()),
                )
            })
        })
        .collect()
}

pub fn summarize(out: &Path) -> Result<String, CliError> {
    Ok(summary_table(&read_accuracy(out)?))
}

/// Parses arguments, runs, and maps failures to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.kind.code()
        }
    }
}
