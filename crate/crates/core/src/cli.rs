//! Command-line front end.
//!
//! Every flag may also be given in a flat `key = value` config file passed
//! with `--config`; flags on the command line win. Each command writes a
//! `manifest.json` (or `<stem>.manifest.json` next to a single output file)
//! echoing the resolved settings.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::analysis::figures::encoder_cost_csv;
use crate::analysis::flops::{encoder_flops_at, pooler_flops_with};
use crate::analysis::{fig2_csv, fig5_csv, fig6_csv, AnalysisError, DiversityReport, TokenSource};
use crate::encoder::{
    extract_features, init_encoder, EncoderConfig, EncoderError, EncodingMode, FeatureMap,
};
use crate::pooling::{PoolerArch, PoolerHyper, Strategy};
use crate::probe::{
    lr_search, read_results, results_csv, run_matrix, summarize, summary_csv, train_probe,
    FeatureSet, LrSource, MatrixSpec, ProbeConfig, ProbeError, ResultRow, SearchSpec, MATRIX_SEEDS,
};
use crate::store::{
    load_dataset, load_dataset_manifest, save_dataset, DatasetManifest, FeatureFileHeader,
    FeatureReader, FeatureWriter, StoreError,
};
use crate::synthdata::{generate_dataset, GeneratorConfig, Split, SynthError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Images encoded per write batch during extraction.
const EXTRACT_CHUNK: usize = 256;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    Store(StoreError),
    Synth(SynthError),
    Encoder(EncoderError),
    Probe(ProbeError),
    Analysis(AnalysisError),
    Input(String),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Io { .. } => "io",
            Self::Store(e) => e.code(),
            Self::Synth(_) => "synth",
            Self::Encoder(_) => "encoder",
            Self::Probe(_) => "probe",
            Self::Analysis(_) => "analysis",
            Self::Input(_) => "invalid-input",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            _ => EXIT_DOMAIN,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) | Self::Input(m) => f.write_str(m),
            Self::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Self::Store(e) => write!(f, "{e}"),
            Self::Synth(e) => write!(f, "{e}"),
            Self::Encoder(e) => write!(f, "{e}"),
            Self::Probe(e) => write!(f, "{e}"),
            Self::Analysis(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        Self::Store(e)
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        Self::Synth(e)
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        Self::Encoder(e)
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        Self::Probe(e)
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        Self::Analysis(e)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "chanprobe",
    version,
    about = "Probe frozen multi-channel ViT features"
)]
struct Cli {
    /// Flat `key = value` file supplying defaults for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-channel dataset.
    GenData(GenDataArgs),
    /// Encode a dataset with the frozen encoder into a feature file.
    Extract(ExtractArgs),
    /// Train one probe.
    Train(TrainArgs),
    /// Run the encoding x strategy x architecture x seed matrix.
    Sweep(SweepArgs),
    /// Inter-channel similarity of stored features.
    Diversity(DiversityArgs),
    /// Analytic FLOP counts for encoders and poolers.
    Flops(FlopsArgs),
    /// Summarize results CSVs into mean/std cells.
    Report(ReportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::GenData(_) => "gen-data",
            Self::Extract(_) => "extract",
            Self::Train(_) => "train",
            Self::Sweep(_) => "sweep",
            Self::Diversity(_) => "diversity",
            Self::Flops(_) => "flops",
            Self::Report(_) => "report",
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    channels: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0.25)]
    redundancy: f64,
    #[arg(long, default_value_t = 0)]
    minority: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4000)]
    n_train: usize,
    #[arg(long, default_value_t = 1000)]
    n_val: usize,
    #[arg(long, default_value_t = 1000)]
    n_test: usize,
}

#[derive(Debug, Args, Serialize)]
struct ExtractArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    mode: EncodingMode,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    patch_size: usize,
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    mlp_ratio: usize,
    #[arg(long, default_value_t = 0)]
    encoder_seed: u64,
    #[arg(long, default_value_t = 1025)]
    max_seq_len: usize,
}

#[derive(Debug, Args, Serialize)]
struct PoolerArgs {
    #[arg(long = "pool-heads", default_value_t = 4)]
    pool_heads: usize,
    #[arg(long, default_value_t = 8)]
    prototypes: usize,
    #[arg(long, default_value_t = 4)]
    queries: usize,
}

impl PoolerArgs {
    fn hyper(&self) -> PoolerHyper {
        PoolerHyper {
            heads: self.pool_heads,
            prototypes: self.prototypes,
            queries: self.queries,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Expected encoding of the feature file.
    #[arg(long)]
    encoding: Option<EncodingMode>,
    #[arg(long, default_value = "dcp")]
    strategy: Strategy,
    #[arg(long, default_value = "mhca")]
    arch: PoolerArch,
    /// Fixed learning rate; omitted runs the learning-rate search.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    weight_decay: f64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    #[command(flatten)]
    pooler: PoolerArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Grid {
    /// Every architecture, both strategies, five seeds.
    Default,
    /// Mean and mhca, both strategies, two seeds.
    Quick,
}

#[derive(Debug, Args, Serialize)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// Joint-encoding feature file.
    #[arg(long)]
    jfe: Option<PathBuf>,
    /// Independent-encoding feature file.
    #[arg(long)]
    ife: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default")]
    grid: Grid,
    /// Overrides the grid's architectures.
    #[arg(long, value_delimiter = ',')]
    archs: Option<Vec<PoolerArch>>,
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<Strategy>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Fixed learning rate; omitted runs the search per cell.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    weight_decay: f64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    #[command(flatten)]
    pooler: PoolerArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SourceArg {
    Patch,
    Cls,
    All,
}

#[derive(Debug, Args, Serialize)]
struct DiversityArgs {
    /// Feature files; repeat the flag or separate with commas.
    #[arg(long, value_delimiter = ',', required = true)]
    features: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    source: SourceArg,
    /// Fractions of the most similar positions to drop.
    #[arg(long, value_delimiter = ',', default_value = "0.75")]
    filter: Vec<f64>,
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct FlopsArgs {
    #[arg(long = "C", value_delimiter = ',', default_value = "8")]
    channels: Vec<usize>,
    #[arg(long = "N", value_delimiter = ',', default_value = "196")]
    tokens: Vec<usize>,
    #[arg(long = "D", default_value_t = 384)]
    dim: usize,
    #[arg(long, default_value_t = 12)]
    depth: usize,
    #[arg(long, default_value_t = 6)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    mlp_ratio: usize,
    #[command(flatten)]
    pooler: PoolerArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ReportArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    results: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Provenance written beside every output.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_file: Option<PathBuf>,
    pub config: Value,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub elapsed_secs: f64,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Parses `key = value` lines; `#` starts a comment. Keys are normalized to
/// flag spelling (`n_train` becomes `n-train`).
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key = value", i + 1))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(format!("config line {}: invalid key {:?}", i + 1, k.trim()));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn find_config_path(argv: &[String]) -> Option<String> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--" {
            break;
        }
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

/// Inserts config-file entries after the subcommand for every flag the
/// command line does not already set.
fn merge_config(argv: &[String], entries: &[(String, String)]) -> Vec<String> {
    let mut i = 1;
    while i < argv.len() && argv[i].starts_with('-') {
        let takes_value = matches!(argv[i].as_str(), "--config" | "--jobs");
        i += if takes_value { 2 } else { 1 };
    }
    if i >= argv.len() {
        return argv.to_vec();
    }
    let given: BTreeSet<&str> = argv
        .iter()
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a))
        .collect();
    let mut merged = argv[..=i].to_vec();
    for (k, v) in entries {
        if !given.contains(k.as_str()) {
            merged.push(format!("--{k}={v}"));
        }
    }
    merged.extend_from_slice(&argv[i + 1..]);
    merged
}

fn report_error(command: &str, err: &CliError) {
    let line = json!({
        "status": "error",
        "command": command,
        "code": err.code(),
        "exit": err.exit_code(),
        "message": err.to_string(),
    });
    eprintln!("{line}");
}

/// Runs one command line (program name first) and returns the exit code.
pub fn dispatch(argv: &[String]) -> i32 {
    let config_path = find_config_path(argv);
    let argv = match &config_path {
        Some(p) => {
            let entries = std::fs::read_to_string(p)
                .map_err(|e| CliError::Io {
                    path: PathBuf::from(p),
                    source: e,
                })
                .and_then(|t| parse_config_text(&t).map_err(CliError::Usage));
            match entries {
                Ok(entries) => merge_config(argv, &entries),
                Err(e) => {
                    report_error("", &e);
                    return e.exit_code();
                }
            }
        }
        None => argv.to_vec(),
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code != EXIT_OK {
                report_error("", &CliError::Usage(e.kind().to_string()));
                return EXIT_USAGE;
            }
            return EXIT_OK;
        }
    };
    let name = cli.command.name();
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            let err = CliError::Input(format!("thread pool: {e}"));
            report_error(name, &err);
            return err.exit_code();
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            report_error(name, &e);
            e.exit_code()
        }
    }
}

struct Outcome {
    output_dir: PathBuf,
    manifest_name: String,
    seeds: Vec<u64>,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let started = unix_now();
    let clock = Instant::now();
    let (config, outcome) = match &cli.command {
        Command::GenData(a) => (echo(a), gen_data(a)?),
        Command::Extract(a) => (echo(a), extract(a)?),
        Command::Train(a) => (echo(a), train(a)?),
        Command::Sweep(a) => (echo(a), sweep(a)?),
        Command::Diversity(a) => (echo(a), diversity(a)?),
        Command::Flops(a) => (echo(a), flops(a)?),
        Command::Report(a) => (echo(a), report(a)?),
    };
    let mut config = config;
    if let Value::Object(m) = &mut config {
        m.insert("jobs".into(), json!(cli.jobs));
    }
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        config_file: cli.config.clone(),
        config,
        output_dir: outcome.output_dir.clone(),
        seeds: outcome.seeds,
        started_unix: started,
        finished_unix: unix_now(),
        elapsed_secs: clock.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_text(
        &outcome.output_dir.join(outcome.manifest_name),
        &(text + "\n"),
    )
}

fn echo<T: Serialize>(args: &T) -> Value {
    serde_json::to_value(args).expect("arguments serialize")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, body: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, body).map_err(io_err(path))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn dir_outcome(dir: &Path, seeds: Vec<u64>) -> Outcome {
    Outcome {
        output_dir: dir.to_path_buf(),
        manifest_name: MANIFEST_FILE.to_string(),
        seeds,
    }
}

fn gen_data(a: &GenDataArgs) -> Result<Outcome, CliError> {
    let cfg = GeneratorConfig {
        channels: a.channels,
        image_size: a.image_size,
        classes: a.classes,
        redundancy: a.redundancy,
        minority_channel: a.minority,
        noise_std: a.noise,
        seed: a.seed,
        n_train: a.n_train,
        n_val: a.n_val,
        n_test: a.n_test,
    };
    let data = generate_dataset(&cfg)?;
    ensure_dir(&a.out)?;
    let m = save_dataset(&a.out, &data)?;
    println!(
        "gen-data: {} samples -> {}",
        m.sample_count,
        a.out.display()
    );
    Ok(dir_outcome(&a.out, vec![a.seed]))
}

fn extract(a: &ExtractArgs) -> Result<Outcome, CliError> {
    let data = load_dataset(&a.data)?;
    let cfg = EncoderConfig {
        image_size: data.config.image_size,
        patch_size: a.patch_size,
        embed_dim: a.embed_dim,
        depth: a.depth,
        heads: a.heads,
        mlp_ratio: a.mlp_ratio,
        init_seed: a.encoder_seed,
        max_seq_len: a.max_seq_len,
    };
    let weights = init_encoder::<f64>(&cfg)?;
    let header = FeatureFileHeader::new(
        a.mode,
        data.config.channels,
        cfg.tokens_per_channel(),
        cfg.embed_dim,
        cfg.config_hash(),
    );
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    let mut writer = FeatureWriter::create(&a.out, header)?;
    for split in Split::ALL {
        for chunk in data.split(split).chunks(EXTRACT_CHUNK) {
            let maps = extract_features(chunk, &weights, a.mode)?;
            for (map, img) in maps.iter().zip(chunk) {
                writer.push(map, img.label)?;
            }
        }
    }
    let n = writer.finish()?;
    println!("extract: {n} {} records -> {}", a.mode, a.out.display());
    Ok(file_outcome(&a.out, vec![a.encoder_seed]))
}

fn file_outcome(file: &Path, seeds: Vec<u64>) -> Outcome {
    let dir = file
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let stem = file
        .file_stem()
        .map_or("features".into(), |s| s.to_string_lossy().into_owned());
    Outcome {
        output_dir: dir,
        manifest_name: format!("{stem}.manifest.json"),
        seeds,
    }
}

/// Loads a feature file and cuts it into the dataset's splits.
fn load_feature_set(
    data: &Path,
    features: &Path,
    expect: Option<EncodingMode>,
) -> Result<FeatureSet, CliError> {
    let manifest: DatasetManifest = load_dataset_manifest(data)?;
    let mut reader = FeatureReader::open(features)?;
    let header = *reader.header();
    if let Some(mode) = expect {
        if mode != header.mode {
            return Err(ProbeError::EncodingMismatch {
                expected: mode,
                found: header.mode,
            }
            .into());
        }
    }
    if reader.len() != manifest.sample_count as u64 {
        return Err(CliError::Input(format!(
            "{} holds {} records but the dataset has {} samples",
            features.display(),
            reader.len(),
            manifest.sample_count
        )));
    }
    let (maps, labels) = reader.read_all()?;
    let part = |s: Split| -> Result<(&[FeatureMap<f32>], &[usize]), CliError> {
        let e = manifest
            .splits
            .iter()
            .find(|e| e.split == s)
            .ok_or_else(|| {
                CliError::Input(format!("dataset manifest lacks a {} split", s.name()))
            })?;
        if e.start > e.end || e.end > maps.len() {
            return Err(CliError::Input(format!("split {} out of range", s.name())));
        }
        Ok((&maps[e.start..e.end], &labels[e.start..e.end]))
    };
    Ok(FeatureSet::from_maps(
        [part(Split::Train)?, part(Split::Val)?, part(Split::Test)?],
        Some(manifest.config.classes),
    )?)
}

fn train(a: &TrainArgs) -> Result<Outcome, CliError> {
    let fs = load_feature_set(&a.data, &a.features, a.encoding)?;
    let template = ProbeConfig {
        encoding: fs.mode,
        strategy: a.strategy,
        arch: a.arch,
        lr: a.lr.unwrap_or(0.0),
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed: a.seed,
        hyper: a.pooler.hyper(),
    };
    let mut seeds = vec![a.seed];
    let (run, trials) = match a.lr {
        Some(_) => (train_probe(&template, &fs)?, Vec::new()),
        None => {
            let spec = SearchSpec::default();
            let res = lr_search(&template, &fs, &spec)?;
            let trials: Vec<Value> = res
                .trials
                .iter()
                .map(|t| json!({"lr": t.lr, "stage": t.stage, "val_acc": t.val_acc, "test_acc": t.test_acc}))
                .collect();
            if !seeds.contains(&spec.seed) {
                seeds.push(spec.seed);
            }
            let run = if a.seed == spec.seed {
                res.best_run
            } else {
                let mut run = train_probe(
                    &ProbeConfig {
                        lr: res.chosen_lr,
                        ..template.clone()
                    },
                    &fs,
                )?;
                run.lr_source = res.source;
                run
            };
            (run, trials)
        }
    };
    ensure_dir(&a.out)?;
    let summary = json!({
        "config": run.config,
        "lr_source": run.lr_source,
        "train_acc": run.train_acc,
        "val_acc": run.val_acc,
        "test_acc": run.test_acc,
        "best_epoch": run.best_epoch,
        "loss_curve": run.loss_curve,
        "running_train_acc": run.running_train_acc,
        "param_count": run.model.param_count(),
        "trials": trials,
    });
    write_text(
        &a.out.join("run.json"),
        &(serde_json::to_string_pretty(&summary).expect("run serializes") + "\n"),
    )?;
    let row = ResultRow {
        dataset: a.dataset.clone(),
        encoding: fs.mode,
        strategy: a.strategy,
        arch: a.arch,
        seed: a.seed,
        lr: run.config.lr,
        val_acc: run.val_acc,
        test_acc: run.test_acc,
    };
    write_text(&a.out.join("results.csv"), &results_csv(&[row]))?;
    let source = match run.lr_source {
        LrSource::Fixed => "fixed",
        LrSource::Coarse => "coarse",
        LrSource::Fine => "fine",
    };
    println!(
        "train: {}+{} {} lr {:e} ({source}) val {:.4} test {:.4}",
        fs.mode, a.strategy, a.arch, run.config.lr, run.val_acc, run.test_acc
    );
    Ok(dir_outcome(&a.out, seeds))
}

fn sweep(a: &SweepArgs) -> Result<Outcome, CliError> {
    let (grid_archs, grid_seeds): (Vec<PoolerArch>, Vec<u64>) = match a.grid {
        Grid::Default => (PoolerArch::ALL.to_vec(), MATRIX_SEEDS.to_vec()),
        Grid::Quick => (
            vec![PoolerArch::Mean, PoolerArch::Mhca],
            MATRIX_SEEDS[..2].to_vec(),
        ),
    };
    let archs = a.archs.clone().unwrap_or(grid_archs);
    let strategies = a
        .strategies
        .clone()
        .unwrap_or_else(|| vec![Strategy::Jap, Strategy::Dcp]);
    let seeds = a.seeds.clone().unwrap_or(grid_seeds);
    if archs.is_empty() || strategies.is_empty() || seeds.is_empty() {
        return Err(CliError::Usage(
            "archs, strategies and seeds must be nonempty".into(),
        ));
    }
    let mut sets = Vec::new();
    for (path, mode) in [(&a.jfe, EncodingMode::Jfe), (&a.ife, EncodingMode::Ife)] {
        if let Some(p) = path {
            sets.push(load_feature_set(&a.data, p, Some(mode))?);
        }
    }
    if sets.is_empty() {
        return Err(CliError::Usage("sweep needs --jfe and/or --ife".into()));
    }
    let spec = MatrixSpec {
        dataset: a.dataset.clone(),
        strategies: strategies.clone(),
        archs: archs.clone(),
        seeds: seeds.clone(),
        template: ProbeConfig {
            lr: a.lr.unwrap_or(0.0),
            weight_decay: a.weight_decay,
            batch_size: a.batch_size,
            epochs: a.epochs,
            hyper: a.pooler.hyper(),
            ..ProbeConfig::default()
        },
        search: a.lr.is_none().then(SearchSpec::default),
    };
    let refs: Vec<&FeatureSet> = sets.iter().collect();
    let rows = run_matrix(&spec, &refs)?;
    ensure_dir(&a.out)?;
    write_text(&a.out.join("results.csv"), &results_csv(&rows))?;
    let mut expected = Vec::new();
    for mode in [EncodingMode::Jfe, EncodingMode::Ife] {
        for &s in &strategies {
            for &arch in &archs {
                expected.push((a.dataset.clone(), mode, s, arch));
            }
        }
    }
    let cells = summarize(&rows, &expected);
    write_text(&a.out.join("summary.csv"), &summary_csv(&cells))?;
    let absent = cells.iter().filter(|c| c.absent).count();
    println!(
        "sweep: {} runs, {} cells ({absent} absent) -> {}",
        rows.len(),
        cells.len(),
        a.out.display()
    );
    Ok(dir_outcome(&a.out, seeds))
}

fn diversity(a: &DiversityArgs) -> Result<Outcome, CliError> {
    let mut reports = Vec::new();
    for path in &a.features {
        let (_, maps, _) = crate::store::read_features(path)?;
        let mode = maps.first().map(|m| m.mode);
        let want_cls = a.source != SourceArg::Patch && mode == Some(EncodingMode::Ife);
        if a.source == SourceArg::Cls && !want_cls {
            return Err(AnalysisError::ClsUnavailable.into());
        }
        if want_cls {
            reports.push(DiversityReport::compute(
                &a.dataset,
                &maps,
                TokenSource::Cls,
                0.0,
            )?);
        }
        if a.source != SourceArg::Cls {
            for &f in &a.filter {
                reports.push(DiversityReport::compute(
                    &a.dataset,
                    &maps,
                    TokenSource::Patch,
                    f,
                )?);
            }
        }
    }
    ensure_dir(&a.out)?;
    write_text(&a.out.join("fig2_cls.csv"), &fig2_csv(&reports))?;
    write_text(&a.out.join("fig5_patch.csv"), &fig5_csv(&reports))?;
    for r in &reports {
        println!(
            "diversity: {} {} {} filter {} mean {:.6} over {}",
            r.dataset,
            r.mode,
            r.source.as_str(),
            r.filter_fraction,
            r.mean_similarity(),
            r.n_instances()
        );
    }
    Ok(dir_outcome(&a.out, Vec::new()))
}

fn flops(a: &FlopsArgs) -> Result<Outcome, CliError> {
    let hp = a.pooler.hyper();
    let enc = EncoderConfig {
        embed_dim: a.dim,
        depth: a.depth,
        heads: a.heads,
        mlp_ratio: a.mlp_ratio,
        ..EncoderConfig::default()
    };
    if a.channels.contains(&0) || a.tokens.contains(&0) || a.dim == 0 {
        return Err(CliError::Usage("C, N and D must be positive".into()));
    }
    let mut pooler = Vec::new();
    let mut encoder = Vec::new();
    for &c in &a.channels {
        for &n in &a.tokens {
            for arch in PoolerArch::ALL {
                for s in [Strategy::Jap, Strategy::Dcp] {
                    pooler.push(pooler_flops_with(arch, s, c, n, a.dim, &hp));
                }
            }
            for mode in [EncodingMode::Jfe, EncodingMode::Ife] {
                encoder.push(encoder_flops_at(&enc, c, n, mode));
            }
        }
    }
    ensure_dir(&a.out)?;
    write_text(&a.out.join("fig6_flops.csv"), &fig6_csv(&pooler))?;
    write_text(&a.out.join("encoder_cost.csv"), &encoder_cost_csv(&encoder))?;
    println!(
        "flops: {} pooler rows, {} encoder rows -> {}",
        pooler.len(),
        encoder.len(),
        a.out.display()
    );
    Ok(dir_outcome(&a.out, Vec::new()))
}

fn report(a: &ReportArgs) -> Result<Outcome, CliError> {
    let mut rows = Vec::new();
    for p in &a.results {
        rows.extend(read_results(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?);
    }
    let datasets: BTreeSet<String> = rows.iter().map(|r| r.dataset.clone()).collect();
    let present: BTreeSet<PoolerArch> = rows.iter().map(|r| r.arch).collect();
    let mut expected = Vec::new();
    for d in &datasets {
        for mode in [EncodingMode::Jfe, EncodingMode::Ife] {
            for s in [Strategy::Jap, Strategy::Dcp] {
                for arch in PoolerArch::ALL.into_iter().filter(|x| present.contains(x)) {
                    expected.push((d.clone(), mode, s, arch));
                }
            }
        }
    }
    let cells = summarize(&rows, &expected);
    ensure_dir(&a.out)?;
    write_text(&a.out.join("summary.csv"), &summary_csv(&cells))?;
    for c in &cells {
        if c.absent {
            println!(
                "{} {}+{} {}: absent",
                c.dataset, c.encoding, c.strategy, c.arch
            );
        } else {
            let delta = c
                .delta_cap
                .map(|d| format!(" delta {:+.2}", 100.0 * d))
                .unwrap_or_default();
            println!(
                "{} {}+{} {}: {:.2} +/- {:.2} (n={}){delta}",
                c.dataset,
                c.encoding,
                c.strategy,
                c.arch,
                100.0 * c.mean_test,
                100.0 * c.std_test,
                c.n_seeds
            );
        }
    }
    Ok(dir_outcome(&a.out, Vec::new()))
}
