//! The `vvpat` command line.
//!
//! Every subcommand is a thin shell over a library call: it reads its
//! inputs, calls the function, and prints the result either as text or, with
//! `--format json`, as the JSON serialization of the returned value. Output
//! is assembled in full before anything is printed, so a failing command
//! prints nothing to stdout.
//!
//! Exit codes: 0 success, 2 usage error, 3 data or validation error,
//! 4 internal error.
//!
//! Settings may also come from a TOML file given with `--config`; explicit
//! flags (and their environment variables) take precedence over it.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use chrono::{DateTime, Utc};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationSpec, IMAGES_PER_SYMBOL};
use crate::classifier::{self, preprocess, MetricsReport, Model, Prediction, Predictor};
use crate::dataset::{
    self, LabeledDataset, MANIFEST_FILE, TEST_MANIFEST, TRAIN_MANIFEST,
};
use crate::error::Error;
use crate::raster;
use crate::registry::{PartyId, Registry};
use crate::service::{self, Service, ServiceConfig, SystemClock};
use crate::sim::{self, SimConfig, SimReport};
use crate::tally::{
    self, AnomalyWindow, Decision, ReconciliationResult, TallySheet,
    DEFAULT_CONFIDENCE_THRESHOLD, DEFAULT_RATE_LIMIT, DEFAULT_RATE_WINDOW_SECS,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

const DEFAULT_SEED: u64 = 42;
const DEFAULT_TRAIN_FRACTION: f64 = 0.8;
const DEFAULT_RECALL_THRESHOLD: f64 = 0.8;
const DEFAULT_PORT: u16 = 8080;
const DEFAULT_JOURNAL: &str = "vvpat-journal.jsonl";

#[derive(Debug, Parser)]
#[command(name = "vvpat", version, about = "VVPAT slip counting, adjudication and audit")]
pub struct Cli {
    /// Output format.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Seed for every random choice (augmentation noise, split shuffle).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for image processing [default: available parallelism].
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// TOML settings file; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Expand a symbol registry into the labelled training set (19 images per party).
    GenDataset(GenDatasetArgs),
    /// Write stratified train/test manifests next to a dataset manifest.
    Split(SplitArgs),
    /// Fit a nearest-centroid model on a training manifest.
    Fit(FitArgs),
    /// Label slip images.
    Predict(PredictArgs),
    /// Accuracy, per-class recall and confusion matrix on a test manifest.
    Evaluate(EvaluateArgs),
    /// Count one EVM's slips, queueing low-confidence ones for review.
    Tally(TallyArgs),
    /// Apply offline review decisions to a tally.
    Adjudicate(AdjudicateArgs),
    /// Compare a fully adjudicated tally with the EVM's counts.
    Reconcile(ReconcileArgs),
    /// Flag stretches where slips arrived faster than the rate limit.
    Anomalies(AnomaliesArgs),
    /// Estimate counting-day duration.
    Simulate(SimulateArgs),
    /// Run the adjudication HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDatasetArgs {
    /// Registry directory (manifest plus symbol images, or bare images).
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Dataset directory or manifest written by `gen-dataset`.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub train_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Training manifest.
    #[arg(long)]
    pub train: PathBuf,
    /// Where to write the model.
    #[arg(long)]
    pub out: PathBuf,
    /// Registry whose party names are stored in the model.
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Softmax temperature for confidences.
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Candidates to report per image.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Slip images (PNG or JPEG).
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Test manifest.
    #[arg(long)]
    pub test: PathBuf,
    /// Classes with recall below this are listed.
    #[arg(long)]
    pub recall_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TallyArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Slip manifest (JSON lines of slip records) for one EVM.
    #[arg(long)]
    pub batch: PathBuf,
    /// Confidence at or above which a slip is counted without review.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Also write the tally sheet here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AdjudicateArgs {
    /// Tally sheet written by `tally`.
    #[arg(long)]
    pub tally: PathBuf,
    /// JSON lines of `{"slip_id": ..., "decision": "<party id>" | "REJECTED"}`.
    #[arg(long)]
    pub decisions: PathBuf,
    /// Also write the updated tally sheet here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconcileArgs {
    #[arg(long)]
    pub tally: PathBuf,
    /// JSON object of electronic counts by party id.
    #[arg(long)]
    pub evm_counts: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnomaliesArgs {
    /// Slip manifest with timestamps; may hold several EVMs.
    #[arg(long)]
    pub batch: PathBuf,
    /// Most slips allowed in one window.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub window_secs: Option<i64>,
    /// Slips stamped before this instant are mock-poll slips and ignored.
    #[arg(long)]
    pub poll_open: Option<DateTime<Utc>>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("scenario_source").required(true).args(["preset", "scenario"])))]
pub struct SimulateArgs {
    /// Built-in scenario.
    #[arg(long)]
    pub preset: Option<String>,
    /// Scenario TOML file.
    #[arg(long, value_name = "PATH")]
    pub scenario: Option<PathBuf>,
    /// Override: voters in the scenario
    #[arg(long)]
    pub total_voters: Option<u64>,
    /// Override: voters (slips) per booth
    #[arg(long)]
    pub voters_per_booth: Option<u64>,
    /// Override: counting units available
    #[arg(long)]
    pub units: Option<u64>,
    /// Override: image-capture minutes per EVM
    #[arg(long)]
    pub capture_minutes: Option<f64>,
    /// Override: classifier milliseconds per slip
    #[arg(long)]
    pub predict_ms: Option<f64>,
    /// Override: slips classified per EVM
    #[arg(long)]
    pub slips_per_evm: Option<u64>,
    /// Override: handling minutes per EVM
    #[arg(long)]
    pub overhead_minutes: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "VVPAT_PORT")]
    pub port: Option<u16>,
    #[arg(long, env = "VVPAT_JOURNAL")]
    pub journal: Option<PathBuf>,
    #[arg(long, env = "VVPAT_MODEL")]
    pub model: Option<PathBuf>,
    #[arg(long, env = "VVPAT_THRESHOLD")]
    pub threshold: Option<f64>,
}

/// Contents of a `--config` file. Every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub format: Option<Format>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub registry: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub threshold: Option<f64>,
    pub train_fraction: Option<f64>,
    pub recall_threshold: Option<f64>,
    pub top_k: Option<usize>,
    pub limit: Option<usize>,
    pub window_secs: Option<i64>,
    pub port: Option<u16>,
    pub journal: Option<PathBuf>,
}

/// Result of one invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliOutput {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Failure that is the program's fault rather than the input's.
#[derive(Debug, thiserror::Error)]
#[error("internal error: {0}")]
struct Internal(String);

/// Failure caused by flag values that clap cannot check on its own.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

/// Parse `argv` (including the program name) and run it.
pub fn run<I, T>(argv: I) -> CliOutput
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                CliOutput { code: EXIT_USAGE, stdout: String::new(), stderr: text }
            } else {
                CliOutput { code: EXIT_OK, stdout: text, stderr: String::new() }
            };
        }
    };
    match execute(cli) {
        Ok(stdout) => CliOutput { code: EXIT_OK, stdout, stderr: String::new() },
        Err(e) => CliOutput {
            code: exit_code(&e),
            stdout: String::new(),
            stderr: format!("error: {}\n", error_chain(&e)),
        },
    }
}

/// The error and its causes joined by ": ", skipping causes whose text the
/// previous message already includes.
fn error_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn exit_code(e: &anyhow::Error) -> i32 {
    if e.downcast_ref::<Usage>().is_some() {
        EXIT_USAGE
    } else if e.downcast_ref::<Internal>().is_some() {
        EXIT_INTERNAL
    } else {
        EXIT_DATA
    }
}

/// Run a parsed command and return what it prints.
pub fn execute(cli: Cli) -> anyhow::Result<String> {
    let file = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str::<FileConfig>(&text)
                .map_err(|e| Error::parse(path, 0, e.message()))?
        }
        None => FileConfig::default(),
    };
    let ctx = Ctx {
        format: cli.format.or(file.format).unwrap_or(Format::Text),
        seed: cli.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
        file,
    };
    let jobs = cli.jobs.or(ctx.file.jobs);
    if jobs == Some(0) {
        return Err(Usage("--jobs must be at least 1".into()).into());
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Internal(e.to_string()))?;
    pool.install(|| dispatch(&ctx, cli.command))
}

struct Ctx {
    format: Format,
    seed: u64,
    file: FileConfig,
}

impl Ctx {
    fn json(&self) -> bool {
        self.format == Format::Json
    }

    /// Render `value` as pretty JSON, or with `text` otherwise.
    fn render<T: Serialize>(&self, value: &T, text: impl FnOnce(&T) -> String) -> String {
        if self.json() {
            let mut out = serde_json::to_string_pretty(value).expect("outputs serialize");
            out.push('\n');
            out
        } else {
            text(value)
        }
    }

    fn required(&self, flag: Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> anyhow::Result<PathBuf> {
        flag.or_else(|| file.clone())
            .ok_or_else(|| Usage(format!("--{name} is required (flag or config file)")).into())
    }
}

fn dispatch(ctx: &Ctx, command: Command) -> anyhow::Result<String> {
    match command {
        Command::GenDataset(a) => gen_dataset(ctx, a),
        Command::Split(a) => split(ctx, a),
        Command::Fit(a) => fit(ctx, a),
        Command::Predict(a) => predict(ctx, a),
        Command::Evaluate(a) => evaluate(ctx, a),
        Command::Tally(a) => tally_cmd(ctx, a),
        Command::Adjudicate(a) => adjudicate(ctx, a),
        Command::Reconcile(a) => reconcile(ctx, a),
        Command::Anomalies(a) => anomalies(ctx, a),
        Command::Simulate(a) => simulate(ctx, a),
        Command::Serve(a) => serve(ctx, a),
    }
}

#[derive(Debug, Serialize)]
struct GenDatasetOutput {
    out: PathBuf,
    parties: usize,
    images: usize,
    seed: u64,
    digest: String,
}

fn gen_dataset(ctx: &Ctx, a: GenDatasetArgs) -> anyhow::Result<String> {
    let registry_dir = ctx.required(a.registry, &ctx.file.registry, "registry")?;
    let registry = Registry::load(&registry_dir)?;
    let ds = dataset::build_labeled_dataset(&registry, &AugmentationSpec::canonical(ctx.seed))?;
    ds.write(&a.out)?;
    let out = GenDatasetOutput {
        out: a.out,
        parties: registry.len(),
        images: ds.len(),
        seed: ctx.seed,
        digest: ds.digest(),
    };
    Ok(ctx.render(&out, |o| {
        format!(
            "wrote {} images ({} parties × {IMAGES_PER_SYMBOL}) to {}\nsha256 {}\n",
            o.images,
            o.parties,
            o.out.display(),
            o.digest
        )
    }))
}

/// A dataset argument may name the directory or its manifest.
fn dataset_manifest(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

#[derive(Debug, Serialize)]
struct SplitOutput {
    train_manifest: PathBuf,
    test_manifest: PathBuf,
    train_items: usize,
    test_items: usize,
    train_fraction: f64,
    seed: u64,
}

fn split(ctx: &Ctx, a: SplitArgs) -> anyhow::Result<String> {
    let manifest = dataset_manifest(&a.dataset);
    let fraction = a
        .train_fraction
        .or(ctx.file.train_fraction)
        .unwrap_or(DEFAULT_TRAIN_FRACTION);
    let ds = LabeledDataset::load(&manifest)?;
    let (train, test) = dataset::split_dataset(&ds, fraction, ctx.seed)?;
    let root = tally::manifest_root(&manifest);
    let train_manifest = root.join(TRAIN_MANIFEST);
    let test_manifest = root.join(TEST_MANIFEST);
    dataset::write_manifest(&train_manifest, &train.manifest())?;
    dataset::write_manifest(&test_manifest, &test.manifest())?;
    let out = SplitOutput {
        train_manifest,
        test_manifest,
        train_items: train.len(),
        test_items: test.len(),
        train_fraction: fraction,
        seed: ctx.seed,
    };
    Ok(ctx.render(&out, |o| {
        format!(
            "train {} items -> {}\ntest {} items -> {}\n",
            o.train_items,
            o.train_manifest.display(),
            o.test_items,
            o.test_manifest.display()
        )
    }))
}

#[derive(Debug, Serialize)]
struct FitOutput {
    model: PathBuf,
    classes: usize,
    train_items: usize,
    temperature: f64,
}

fn fit(ctx: &Ctx, a: FitArgs) -> anyhow::Result<String> {
    let train = LabeledDataset::load(&a.train)?;
    let mut model = classifier::fit(&train)?;
    if let Some(t) = a.temperature {
        model = model.with_temperature(t)?;
    }
    if let Some(dir) = a.registry.or_else(|| ctx.file.registry.clone()) {
        model = model.with_party_names(&Registry::load(&dir)?);
    }
    model.save(&a.out)?;
    let out = FitOutput {
        model: a.out,
        classes: model.len(),
        train_items: train.len(),
        temperature: model.temperature(),
    };
    Ok(ctx.render(&out, |o| {
        format!(
            "fitted {} classes on {} images -> {}\n",
            o.classes,
            o.train_items,
            o.model.display()
        )
    }))
}

fn load_model(ctx: &Ctx, flag: Option<PathBuf>) -> anyhow::Result<Model> {
    let path = ctx.required(flag, &ctx.file.model, "model")?;
    Ok(Model::load(&path)?)
}

#[derive(Debug, Serialize)]
struct ImagePrediction {
    image: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    party_name: Option<String>,
    #[serde(flatten)]
    prediction: Prediction,
}

fn predict(ctx: &Ctx, a: PredictArgs) -> anyhow::Result<String> {
    let model = load_model(ctx, a.model)?;
    let top_k = a
        .top_k
        .or(ctx.file.top_k)
        .unwrap_or(classifier::DEFAULT_TOP_K);
    use rayon::prelude::*;
    let results = a
        .images
        .into_par_iter()
        .map(|path| {
            let image = raster::load_gray(&path)?;
            let prediction = model.predict_feature(&preprocess(&image)?, top_k)?;
            Ok(ImagePrediction {
                party_name: model.party_name(prediction.party_id).map(str::to_string),
                image: path,
                prediction,
            })
        })
        .collect::<crate::Result<Vec<_>>>()?;
    Ok(ctx.render(&results, |rs| {
        let mut out = String::new();
        for r in rs {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.4}\t{}",
                r.image.display(),
                r.prediction.party_id,
                r.prediction.confidence,
                r.party_name.as_deref().unwrap_or("")
            );
        }
        out
    }))
}

fn evaluate(ctx: &Ctx, a: EvaluateArgs) -> anyhow::Result<String> {
    let model = load_model(ctx, a.model)?;
    let test = LabeledDataset::load(&a.test)?;
    let threshold = a
        .recall_threshold
        .or(ctx.file.recall_threshold)
        .unwrap_or(DEFAULT_RECALL_THRESHOLD);
    let report = MetricsReport::new(classifier::evaluate(&model, &test)?, threshold)?;
    Ok(ctx.render(&report, |r| {
        let low: Vec<String> = r.low_recall_classes.iter().map(|p| p.to_string()).collect();
        format!(
            "test items:  {}\naccuracy:    {:.4}\nrecall < {}: {}\n",
            r.test_items,
            r.accuracy,
            r.recall_threshold,
            if low.is_empty() { "none".to_string() } else { low.join(", ") }
        )
    }))
}

fn sheet_text(s: &TallySheet) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "evm {}: {} slips", s.evm_id, s.total_slips);
    let _ = writeln!(
        out,
        "auto {}, adjudicated {}, rejected {}, awaiting review {}",
        s.auto_counts.values().sum::<u64>(),
        s.adjudicated_counts.values().sum::<u64>(),
        s.rejected,
        s.review_queue.len()
    );
    for (party, n) in s.vvpat_counts() {
        let _ = writeln!(out, "{party}\t{n}");
    }
    out
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> crate::Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("outputs serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> crate::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e))
}

fn tally_cmd(ctx: &Ctx, a: TallyArgs) -> anyhow::Result<String> {
    let model = load_model(ctx, a.model)?;
    let threshold = a
        .threshold
        .or(ctx.file.threshold)
        .unwrap_or(DEFAULT_CONFIDENCE_THRESHOLD);
    let slips = tally::read_slip_manifest(&a.batch)?;
    let sheet = tally::count_slips(&model, &slips, threshold, &tally::manifest_root(&a.batch))?;
    if let Some(out) = &a.out {
        write_json(out, &sheet)?;
    }
    Ok(ctx.render(&sheet, sheet_text))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecisionLine {
    slip_id: String,
    decision: Decision,
}

fn adjudicate(ctx: &Ctx, a: AdjudicateArgs) -> anyhow::Result<String> {
    let mut sheet: TallySheet = read_json(&a.tally)?;
    let text = fs::read_to_string(&a.decisions).map_err(|e| Error::io(&a.decisions, e))?;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let d: DecisionLine =
            serde_json::from_str(line).map_err(|e| Error::parse(&a.decisions, n + 1, e))?;
        sheet
            .apply_adjudication(&d.slip_id, d.decision)
            .map_err(Error::from)
            .with_context(|| format!("{}:{}", a.decisions.display(), n + 1))?;
    }
    sheet.check_conservation().map_err(Error::from)?;
    if let Some(out) = &a.out {
        write_json(out, &sheet)?;
    }
    Ok(ctx.render(&sheet, sheet_text))
}

fn reconcile(ctx: &Ctx, a: ReconcileArgs) -> anyhow::Result<String> {
    let sheet: TallySheet = read_json(&a.tally)?;
    let counts: BTreeMap<PartyId, u64> = read_json(&a.evm_counts)?;
    let result = sheet.reconcile(&counts).map_err(Error::from)?;
    Ok(ctx.render(&result, reconciliation_text))
}

fn reconciliation_text(r: &ReconciliationResult) -> String {
    let mut out = format!("evm {}: {:?}\n", r.evm_id, r.status).to_uppercase();
    let _ = writeln!(out, "party\tevm\tvvpat\tdelta\tfinal");
    for (party, delta) in &r.deltas {
        let _ = writeln!(
            out,
            "{party}\t{}\t{}\t{delta:+}\t{}",
            r.evm_counts.get(party).unwrap_or(&0),
            r.vvpat_counts.get(party).unwrap_or(&0),
            r.final_counts.get(party).unwrap_or(&0)
        );
    }
    let _ = writeln!(out, "rejected\t{}", r.rejected);
    out
}

#[derive(Debug, Serialize)]
struct AnomaliesOutput {
    limit: usize,
    window_secs: i64,
    mock_poll_slips: usize,
    evms: BTreeMap<String, Vec<AnomalyWindow>>,
}

fn anomalies(ctx: &Ctx, a: AnomaliesArgs) -> anyhow::Result<String> {
    let limit = a.limit.or(ctx.file.limit).unwrap_or(DEFAULT_RATE_LIMIT);
    let window_secs = a
        .window_secs
        .or(ctx.file.window_secs)
        .unwrap_or(DEFAULT_RATE_WINDOW_SECS);
    if window_secs <= 0 {
        return Err(Usage("--window-secs must be positive".into()).into());
    }
    let mut slips = tally::read_slip_manifest(&a.batch)?;
    let mut mock_poll_slips = 0;
    if let Some(open) = a.poll_open {
        let (mock, valid) = tally::separate_mock_polls(&slips, open)?;
        mock_poll_slips = mock.len();
        slips = valid;
    }
    let mut by_evm: BTreeMap<String, Vec<tally::SlipRecord>> = BTreeMap::new();
    for s in slips {
        by_evm.entry(s.evm_id.clone()).or_default().push(s);
    }
    let window = chrono::Duration::seconds(window_secs);
    let mut evms = BTreeMap::new();
    for (evm, slips) in by_evm {
        tally::validate_slips(&slips)?;
        let stamps = tally::batch_timestamps(&slips);
        evms.insert(evm, tally::detect_rate_anomalies(&stamps, limit, window)?);
    }
    let out = AnomaliesOutput { limit, window_secs, mock_poll_slips, evms };
    Ok(ctx.render(&out, |o| {
        let mut text = String::new();
        if o.mock_poll_slips > 0 {
            let _ = writeln!(text, "ignored {} mock-poll slips", o.mock_poll_slips);
        }
        for (evm, windows) in &o.evms {
            if windows.is_empty() {
                let _ = writeln!(text, "evm {evm}: no anomalies");
            }
            for w in windows {
                let _ = writeln!(
                    text,
                    "evm {evm}: {} slips in [{}, {})",
                    w.slip_count,
                    w.window_start.to_rfc3339(),
                    w.window_end.to_rfc3339()
                );
            }
        }
        text
    }))
}

fn simulate(ctx: &Ctx, a: SimulateArgs) -> anyhow::Result<String> {
    let mut config = match (&a.preset, &a.scenario) {
        (Some(name), _) => SimConfig::preset(name)?,
        (None, Some(path)) => SimConfig::load(path)?,
        (None, None) => unreachable!("clap requires a scenario source"),
    };
    if let Some(v) = a.total_voters {
        config.total_voters = v;
    }
    if let Some(v) = a.voters_per_booth {
        config.voters_per_booth = v;
    }
    if let Some(v) = a.units {
        config.units_available = v;
    }
    if let Some(v) = a.capture_minutes {
        config.capture_minutes_per_evm = v;
    }
    if let Some(v) = a.predict_ms {
        config.predict_ms_per_slip = v;
    }
    if let Some(v) = a.slips_per_evm {
        config.slips_per_evm = v;
    }
    if let Some(v) = a.overhead_minutes {
        config.handling_overhead_minutes = v;
    }
    let report: SimReport = sim::simulate_counting(&config)?;
    Ok(ctx.render(&report, SimReport::table))
}

fn serve(ctx: &Ctx, a: ServeArgs) -> anyhow::Result<String> {
    let port = a.port.or(ctx.file.port).unwrap_or(DEFAULT_PORT);
    let journal = a
        .journal
        .or_else(|| ctx.file.journal.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_JOURNAL));
    let model: Option<Arc<dyn Predictor>> = match a.model.or_else(|| ctx.file.model.clone()) {
        Some(path) => Some(Arc::new(Model::load(&path)?)),
        None => {
            tracing::warn!("no model configured; batches cannot be loaded");
            None
        }
    };
    let mut config = ServiceConfig::new(journal);
    config.confidence_threshold = a
        .threshold
        .or(ctx.file.threshold)
        .unwrap_or(DEFAULT_CONFIDENCE_THRESHOLD);
    let service = Arc::new(Service::open(config, model, Arc::new(SystemClock))?);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Internal(e.to_string()))?;
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    runtime
        .block_on(service::http::serve(service, addr))
        .map_err(|e| anyhow!(e))?;
    Ok(String::new())
}
