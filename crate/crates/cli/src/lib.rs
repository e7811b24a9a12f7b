//! The `chils` command-line tool.
//!
//! Data preparation (`synth`, `gen-labelsets`, `depth-slice`,
//! `expand-noisy`) is kept apart from inference (`predict`, `compare`) and
//! analysis (`calibrate`). Every output gets a `*.run.json` manifest (or
//! `run.json` inside an output directory) recording the arguments, input
//! digests and engine configuration.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use chils_core::engine::{best_possible, Aggregator, InferenceConfig, ReweightVariant};
use chils_core::eval::{self, EvalRecord, Method, ReportFormat};
use chils_core::hierarchy::{self, LabelMap};
use chils_core::labelgen::{self, FixtureBackend, GenerationBackend, HttpBackend, LabelGenOptions};
use chils_core::prompts::{self, PromptMode, PromptSet, TextReps};
use chils_core::synth;
use chils_core::tensorio::{self, EmbeddingBundle};
use chils_core::{Classifier, Trace};

pub mod predictions;

pub use predictions::{read_predictions, write_predictions, PredictionRecord, ScoredEntry};

pub const TOP_SCORES: usize = 5;

#[derive(Debug, Parser)]
#[command(name = "chils", version, about = "Hierarchical zero-shot classification over precomputed embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Predict a superclass for every image.
    Predict(PredictArgs),
    /// Evaluate several methods against labels and write a report.
    Compare(CompareArgs),
    /// Build a label map by querying a text-generation backend.
    GenLabelsets(GenArgs),
    /// Cut a taxonomy at a fixed depth into a label map.
    DepthSlice(DepthSliceArgs),
    /// Map superclasses to every leaf beneath them in a taxonomy.
    ExpandNoisy(ExpandArgs),
    /// Split argmax probabilities into correct and incorrect per class.
    Calibrate(CalibrateArgs),
    /// Write a synthetic instance (bundles, map, taxonomy, labels).
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ReweightArg {
    Standard,
    None,
    SubAgg,
    SupSpace,
}

impl From<ReweightArg> for ReweightVariant {
    fn from(r: ReweightArg) -> Self {
        match r {
            ReweightArg::Standard => ReweightVariant::Standard,
            ReweightArg::None => ReweightVariant::None,
            ReweightArg::SubAgg => ReweightVariant::SubWithAggSub,
            ReweightArg::SupSpace => ReweightVariant::AggSubWithSup,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AggArg {
    Mean,
    Sum,
}

impl From<AggArg> for Aggregator {
    fn from(a: AggArg) -> Self {
        match a {
            AggArg::Mean => Aggregator::Mean,
            AggArg::Sum => Aggregator::Sum,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PromptModeArg {
    Linear,
    Set,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
    Markdown,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Markdown => ReportFormat::Markdown,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    Http,
    Fixture,
}

#[derive(Debug, Args)]
struct InferenceInputs {
    /// Image embedding bundle.
    #[arg(long)]
    images: PathBuf,
    /// Superclass text embedding bundle; rows named by caption.
    #[arg(long)]
    sup_text: PathBuf,
    /// Subclass text embedding bundle; rows named by caption.
    #[arg(long)]
    sub_text: PathBuf,
    /// Label map file.
    #[arg(long)]
    map: PathBuf,
    /// Prompt-set file; when given, text rows are looked up by rendered caption.
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "linear")]
    prompt_mode: PromptModeArg,
    /// Keep averaged prompt embeddings at their raw length.
    #[arg(long)]
    no_renormalize_mean: bool,
    #[arg(long, value_enum, default_value = "mean")]
    agg: AggArg,
    /// Multiplier applied to cosine similarities before the softmax.
    #[arg(long, default_value_t = chils_core::engine::DEFAULT_LOGIT_SCALE)]
    scale: f64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    inputs: InferenceInputs,
    #[arg(long, value_enum, default_value = "standard")]
    reweight: ReweightArg,
    /// Predictions file (JSON lines).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    inputs: InferenceInputs,
    /// `all` or a comma-separated list of method names.
    #[arg(long, default_value = "all")]
    methods: String,
    /// JSON array of true superclass indices, one per image.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    /// Dataset name in the report; defaults to the label map's file stem.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Class names, one per line (or a JSON array).
    #[arg(long)]
    classes: PathBuf,
    #[arg(long, default_value_t = labelgen::DEFAULT_SET_SIZE)]
    m: usize,
    #[arg(long)]
    context: Option<String>,
    #[arg(long, value_enum)]
    backend: BackendArg,
    #[arg(long)]
    fixture: Option<PathBuf>,
    #[arg(long)]
    llm_endpoint: Option<String>,
    #[arg(long, default_value = "text-davinci-002")]
    model: String,
    #[arg(long, default_value_t = labelgen::DEFAULT_TEMPERATURE)]
    temperature: f64,
    #[arg(long)]
    append_superclass: bool,
    #[arg(long)]
    include_superclass: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DepthSliceArgs {
    #[arg(long)]
    dag: PathBuf,
    #[arg(long)]
    depth: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExpandArgs {
    #[arg(long)]
    dag: PathBuf,
    /// Superclass node names, one per line (or a JSON array).
    #[arg(long)]
    superclasses: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Predictions file written by `predict`.
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// Input path → SHA-256 (bundle directories hash manifest then data).
    pub inputs: BTreeMap<String, String>,
    pub config: serde_json::Value,
    pub tool_version: String,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(command: Command, args: Vec<String>) -> Result<()> {
    match command {
        Command::Predict(a) => predict(a, args),
        Command::Compare(a) => compare(a, args),
        Command::GenLabelsets(a) => gen_labelsets(a, args),
        Command::DepthSlice(a) => depth_slice(a, args),
        Command::ExpandNoisy(a) => expand_noisy(a, args),
        Command::Calibrate(a) => calibrate(a, args),
        Command::Synth(a) => run_synth(a, args),
    }
}

/// SHA-256 of a file, or of `manifest.json` followed by `data.bin` for a
/// bundle directory.
pub fn digest_path(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    if path.is_dir() {
        for name in [tensorio::MANIFEST_FILE, tensorio::DATA_FILE] {
            let p = path.join(name);
            hasher.update(fs::read(&p).with_context(|| format!("reading {}", p.display()))?);
        }
    } else {
        hasher.update(fs::read(path).with_context(|| format!("reading {}", path.display()))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn manifest_path_for(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("run.json")
    } else {
        let mut name = out.file_name().map(OsString::from).unwrap_or_default();
        name.push(".run.json");
        out.with_file_name(name)
    }
}

fn write_manifest(command: &str, args: Vec<String>, inputs: &[&Path], config: serde_json::Value, out: &Path) -> Result<()> {
    let mut digests = BTreeMap::new();
    for p in inputs {
        digests.insert(p.display().to_string(), digest_path(p)?);
    }
    let manifest = RunManifest {
        command: command.to_string(),
        args,
        inputs: digests,
        config,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let path = manifest_path_for(out);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Reads a list of names: a JSON array of strings, or one name per line.
fn read_name_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()));
    }
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing labels {}", path.display()))
}

struct Loaded {
    images: EmbeddingBundle,
    map: LabelMap,
    sub: TextReps,
    sup: TextReps,
    threads: usize,
    scale: f64,
    agg: Aggregator,
}

impl InferenceInputs {
    fn paths(&self) -> Vec<&Path> {
        let mut v = vec![
            self.images.as_path(),
            self.sup_text.as_path(),
            self.sub_text.as_path(),
            self.map.as_path(),
        ];
        if let Some(p) = &self.prompts {
            v.push(p);
        }
        v
    }

    fn load(&self) -> Result<Loaded> {
        let images = tensorio::load_bundle(&self.images)
            .with_context(|| format!("loading image bundle {}", self.images.display()))?;
        let images = if images.is_normalized() {
            images
        } else {
            tensorio::normalize_rows(&images).context("normalizing image bundle")?
        };
        let sup_bundle = tensorio::load_bundle(&self.sup_text)
            .with_context(|| format!("loading superclass text bundle {}", self.sup_text.display()))?;
        let sub_bundle = tensorio::load_bundle(&self.sub_text)
            .with_context(|| format!("loading subclass text bundle {}", self.sub_text.display()))?;
        let map = hierarchy::load_label_map(&self.map)
            .with_context(|| format!("loading label map {}", self.map.display()))?;
        let prompt_set: Option<PromptSet> = match &self.prompts {
            Some(p) => Some(prompts::load_prompt_set(p).with_context(|| format!("loading prompts {}", p.display()))?),
            None => None,
        };
        let mode = match self.prompt_mode {
            PromptModeArg::Linear => PromptMode::LinearAverage,
            PromptModeArg::Set => PromptMode::SetBased,
        };
        let renorm = !self.no_renormalize_mean;
        let sup = TextReps::align(&sup_bundle, map.superclasses(), prompt_set.as_ref(), mode, renorm)
            .context("aligning superclass text bundle with the label map")?;
        let sub_texts: Vec<String> = map.union_subclasses().into_iter().map(|e| e.text).collect();
        let sub = TextReps::align(&sub_bundle, &sub_texts, prompt_set.as_ref(), mode, renorm)
            .context("aligning subclass text bundle with the label map")?;
        if images.dim() != sup.dim() || images.dim() != sub.dim() {
            bail!(
                "embedding dimensions differ: images {}, superclass text {}, subclass text {}",
                images.dim(),
                sup.dim(),
                sub.dim()
            );
        }
        Ok(Loaded {
            images,
            map,
            sub,
            sup,
            threads: self.threads,
            scale: self.scale,
            agg: self.agg.into(),
        })
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::json!({
            "logit_scale": self.scale,
            "agg": format!("{:?}", self.agg).to_lowercase(),
            "prompt_mode": format!("{:?}", self.prompt_mode).to_lowercase(),
            "renormalize_mean": !self.no_renormalize_mean,
            "threads": self.threads,
        })
    }
}

impl Loaded {
    fn traces(&self, variant: ReweightVariant) -> Result<Vec<Trace>> {
        let config = InferenceConfig::new(self.scale, variant, self.agg)?;
        let clf = Classifier::new(&self.map, &self.sub, &self.sup, config)?;
        Ok(clf.trace_all(&self.images, self.threads)?)
    }
}

fn predict(a: PredictArgs, args: Vec<String>) -> Result<()> {
    let loaded = a.inputs.load()?;
    let variant: ReweightVariant = a.reweight.into();
    let traces = loaded.traces(variant)?;
    let records = predictions::records_from_traces(&loaded.map, &traces, TOP_SCORES);
    write_predictions(&records, &a.out)?;
    let mut config = a.inputs.config_json();
    config["reweight"] = serde_json::to_value(a.reweight)?;
    write_manifest("predict", args, &a.inputs.paths(), config, &a.out)
}

fn parse_methods(spec: &str) -> Result<Vec<Method>> {
    if spec.trim() == "all" {
        return Ok(Method::ALL.to_vec());
    }
    let mut out = Vec::new();
    for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let m = Method::parse(name).with_context(|| format!("unknown method {name:?}"))?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        bail!("no methods selected");
    }
    Ok(out)
}

/// Accuracy of every requested method on one loaded instance.
fn evaluate(loaded: &Loaded, labels: &[usize], methods: &[Method], dataset: &str, domain: Option<&str>) -> Result<Vec<EvalRecord>> {
    if labels.len() != loaded.images.count() {
        bail!("{} labels for {} images", labels.len(), loaded.images.count());
    }
    let k = loaded.map.num_superclasses();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        bail!("label {bad} out of range for {k} superclasses");
    }
    let mut preds: BTreeMap<Method, Vec<usize>> = BTreeMap::new();
    let mut baseline = None;
    let mut needed: Vec<Method> = methods.to_vec();
    if methods.contains(&Method::BestPossible) && !needed.contains(&Method::ChilsNone) {
        needed.push(Method::ChilsNone);
    }
    for &m in &needed {
        if let Some(variant) = m.variant() {
            let traces = loaded.traces(variant)?;
            if baseline.is_none() {
                baseline = Some(traces.iter().map(|t| t.baseline_superclass).collect::<Vec<_>>());
            }
            preds.insert(m, traces.iter().map(|t| t.predicted_superclass).collect());
        }
    }
    let baseline = match baseline {
        Some(b) => b,
        None => loaded
            .traces(ReweightVariant::None)?
            .iter()
            .map(|t| t.baseline_superclass)
            .collect(),
    };
    let mut records = Vec::with_capacity(methods.len());
    for &m in methods {
        let accuracy = match m {
            Method::Baseline => eval::accuracy(&baseline, labels)?,
            Method::BestPossible => best_possible(&baseline, &preds[&Method::ChilsNone], labels)?,
            _ => eval::accuracy(&preds[&m], labels)?,
        };
        records.push(EvalRecord {
            dataset: dataset.to_string(),
            domain: domain.map(str::to_string),
            method: m,
            accuracy,
            n: labels.len(),
        });
    }
    Ok(records)
}

fn compare(a: CompareArgs, args: Vec<String>) -> Result<()> {
    let methods = parse_methods(&a.methods)?;
    let loaded = a.inputs.load()?;
    let labels = read_labels(&a.labels)?;
    let dataset = a.dataset.clone().unwrap_or_else(|| {
        a.inputs
            .map
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    let records = evaluate(&loaded, &labels, &methods, &dataset, a.domain.as_deref())?;
    eval::emit_report(&records, a.format.into(), &a.out)?;
    let mut config = a.inputs.config_json();
    config["methods"] = serde_json::to_value(&methods)?;
    let mut inputs = a.inputs.paths();
    inputs.push(&a.labels);
    write_manifest("compare", args, &inputs, config, &a.out)
}

fn gen_labelsets(a: GenArgs, args: Vec<String>) -> Result<()> {
    let classes = read_name_list(&a.classes)?;
    if classes.is_empty() {
        bail!("no classes in {}", a.classes.display());
    }
    let mut inputs: Vec<&Path> = vec![&a.classes];
    let backend: Box<dyn GenerationBackend> = match a.backend {
        BackendArg::Fixture => {
            let path = a.fixture.as_ref().context("--fixture is required with --backend fixture")?;
            inputs.push(path);
            Box::new(FixtureBackend::load(path)?)
        }
        BackendArg::Http => {
            let endpoint = a.llm_endpoint.as_ref().context("--llm-endpoint is required with --backend http")?;
            Box::new(HttpBackend::from_env(endpoint.clone(), a.model.clone()))
        }
    };
    let options = LabelGenOptions {
        m: a.m,
        context: a.context.clone(),
        temperature: a.temperature,
        append_superclass: a.append_superclass,
        include_superclass: a.include_superclass,
    };
    let generated = labelgen::generate_label_map(&classes, backend.as_ref(), &options)?;
    hierarchy::save_label_map(&generated.map, &a.out)?;
    let mut audit_name = a.out.file_name().map(OsString::from).unwrap_or_default();
    audit_name.push(".audit.json");
    let mut audit = serde_json::to_string_pretty(&generated.audit)?;
    audit.push('\n');
    write_file(&a.out.with_file_name(audit_name), &audit)?;
    let config = serde_json::json!({
        "backend": format!("{:?}", a.backend).to_lowercase(),
        "model": a.model,
        "m": a.m,
        "context": a.context,
        "temperature": a.temperature,
        "append_superclass": a.append_superclass,
        "include_superclass": a.include_superclass,
    });
    write_manifest("gen-labelsets", args, &inputs, config, &a.out)
}

fn depth_slice(a: DepthSliceArgs, args: Vec<String>) -> Result<()> {
    let dag = hierarchy::load_dag(&a.dag)?;
    let map = dag.slice_at_depth(a.depth)?;
    hierarchy::save_label_map(&map, &a.out)?;
    write_manifest("depth-slice", args, &[&a.dag], serde_json::json!({ "depth": a.depth }), &a.out)
}

fn expand_noisy(a: ExpandArgs, args: Vec<String>) -> Result<()> {
    let dag = hierarchy::load_dag(&a.dag)?;
    let names = read_name_list(&a.superclasses)?;
    let map = dag.expand_noisy(&names)?;
    hierarchy::save_label_map(&map, &a.out)?;
    write_manifest("expand-noisy", args, &[&a.dag, &a.superclasses], serde_json::Value::Null, &a.out)
}

#[derive(Debug, Serialize)]
struct CalibrationReport {
    overall_mean_correct: Option<f64>,
    overall_mean_incorrect: Option<f64>,
    summary: chils_core::Calibration,
}

fn calibrate(a: CalibrateArgs, args: Vec<String>) -> Result<()> {
    let records = read_predictions(&a.traces)?;
    let labels = read_labels(&a.labels)?;
    let probs: Vec<&[f64]> = records.iter().map(|r| r.sup_probs.as_slice()).collect();
    let summary = eval::calibration_split(&probs, &labels)?;
    let report = CalibrationReport {
        overall_mean_correct: summary.overall_mean_correct(),
        overall_mean_incorrect: summary.overall_mean_incorrect(),
        summary,
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write_file(&a.out, &text)?;
    write_manifest(
        "calibrate",
        args,
        &[&a.traces, &a.labels],
        serde_json::json!({ "probabilities": "sup_probs" }),
        &a.out,
    )
}

fn run_synth(a: SynthArgs, args: Vec<String>) -> Result<()> {
    let spec = synth::load_spec(&a.spec)?;
    let instance = synth::generate(&spec)?;
    instance.write(&a.out)?;
    write_manifest("synth", args, &[&a.spec], serde_json::to_value(&spec)?, &a.out)
}
