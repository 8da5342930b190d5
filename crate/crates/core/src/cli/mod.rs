//! Command-line pipeline: dataset generation, training, pruning,
//! distillation, evaluation, benchmarking and report aggregation inside one
//! workspace directory.

pub mod config;
pub mod stages;
mod workspace;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub use config::{ConfigError, RunConfig};
use stages::{ModelSummary, Prepared};
pub use workspace::{Manifest, ManifestEntry};
use workspace::{Lock, Workspace};

use crate::benchhub::{self, BenchResult};
use crate::error::Error;
use crate::json;
use crate::netlib::{self, Arch, Model, Storage};
use crate::pruner::ScoringRule;
use crate::synthdata;
use crate::verifier::VerificationReport;

#[derive(Debug, Parser)]
#[command(name = "shrinknet", version, about = "Compress and evaluate identity-embedding CNNs")]
pub struct Cli {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `prune.target_cr=8`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Workspace directory; overrides `paths.workspace`.
    #[arg(long, global = true, value_name = "DIR")]
    pub workspace: Option<PathBuf>,
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and subject split.
    Datagen,
    /// Train the teacher.
    Train,
    /// Iteratively prune the teacher.
    Prune,
    /// Train plain and distilled students.
    Distill,
    /// Score the verification protocol for workspace models.
    Eval,
    /// Time embedding extraction for workspace models.
    Bench,
    /// Merge costs, metrics and timings into report.json.
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Datagen => "datagen",
            Command::Train => "train",
            Command::Prune => "prune",
            Command::Distill => "distill",
            Command::Eval => "eval",
            Command::Bench => "bench",
            Command::Report => "report",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(ConfigError),
    #[error("missing input: {0}")]
    Missing(String),
    #[error("{0}")]
    Runtime(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

pub const SEED_ENV: &str = "SHRINKNET_SEED";

/// Builds the effective config: file (or defaults), then `SHRINKNET_SEED`,
/// then `--set` overrides, then `--workspace`.
pub fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("config: cannot read {}: {e}", path.display())))?;
            let value = serde_json::from_str(&text).map_err(|e| ConfigError(format!("config: {e}")))?;
            RunConfig::from_value(value)?
        }
        None => RunConfig::default(),
    };
    if let Ok(raw) = std::env::var(SEED_ENV) {
        cfg.seed = raw.trim().parse().map_err(|_| ConfigError(format!("{SEED_ENV}: not an integer: `{raw}`")))?;
    }
    for assignment in &cli.set {
        cfg = cfg.apply_override(assignment)?;
    }
    if let Some(ws) = &cli.workspace {
        cfg.paths.workspace = ws.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses arguments, runs one subcommand and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(&cli) {
        Ok(outputs) => {
            if !cli.quiet {
                for o in outputs {
                    println!("wrote {o}");
                }
            }
            0
        }
        Err(e) => {
            eprintln!("shrinknet {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<Vec<String>, CliError> {
    let cfg = load_config(cli)?;
    let ws = Workspace::new(&cfg.paths.workspace)?;
    let _lock = Lock::acquire(ws.root())?;
    let resolved = cfg.resolved();
    let mut run = Run { cfg: resolved, config_hash: cfg.hash(), ws, inputs: BTreeMap::new(), outputs: Vec::new() };
    match cli.command {
        Command::Datagen => run.datagen()?,
        Command::Train => run.train()?,
        Command::Prune => run.prune()?,
        Command::Distill => run.distill()?,
        Command::Eval => run.eval()?,
        Command::Bench => run.bench()?,
        Command::Report => run.report()?,
    }
    run.ws.record(cli.command.name(), &run.config_hash, &run.inputs, &run.outputs)?;
    Ok(run.outputs)
}

pub fn cr_label(cr: f64) -> String {
    if cr.fract() == 0.0 {
        format!("{}", cr as u64)
    } else {
        format!("{cr}").replace('.', "p")
    }
}

pub fn pruned_stem(rule: ScoringRule, cr: f64) -> String {
    format!("pruned_{}_cr{}", rule.id(), cr_label(cr))
}

pub fn student_stem(arch: Arch, distilled: bool) -> String {
    let short = arch.id().strip_prefix("student_").unwrap_or(arch.id());
    format!("student_{short}_{}", if distilled { "kd" } else { "plain" })
}

pub const TEACHER_STEM: &str = "teacher";
pub const DATASET_DIR: &str = "dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub config_hash: String,
    pub models: BTreeMap<String, ModelSummary>,
}

struct Run {
    cfg: RunConfig,
    config_hash: String,
    ws: Workspace,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.ws.root().join(name)
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        json::write_sorted(self.path(name), value)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        std::fs::write(self.path(name), text).map_err(Error::from)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn save_model(&mut self, stem: &str, model: &Model, storage: Storage) -> Result<(), CliError> {
        let name = format!("{stem}.nnzm");
        netlib::save(model, self.path(&name), storage)?;
        self.outputs.push(name);
        Ok(())
    }

    fn input(&mut self, name: &str) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        if !path.exists() {
            return Err(CliError::Missing(format!("{} (run the producing subcommand first)", path.display())));
        }
        self.inputs.insert(name.to_string(), self.ws.digest(name)?);
        Ok(path)
    }

    fn load_model(&mut self, stem: &str) -> Result<Model, CliError> {
        let path = self.input(&format!("{stem}.nnzm"))?;
        Ok(netlib::load(path)?)
    }

    fn load_data(&mut self) -> Result<Prepared, CliError> {
        let dir = self.input(DATASET_DIR)?;
        let (dataset, meta) = synthdata::load_dir(&dir)?;
        Ok(Prepared::new(dataset, meta.split)?)
    }

    fn models(&self) -> Result<Vec<String>, CliError> {
        let stems = if self.cfg.eval.models.is_empty() {
            self.ws.model_stems()?
        } else {
            self.cfg.eval.models.clone()
        };
        if stems.is_empty() {
            return Err(CliError::Missing(format!("no *.nnzm models in {}", self.ws.root().display())));
        }
        Ok(stems)
    }

    fn datagen(&mut self) -> Result<(), CliError> {
        let data = stages::prepare(&self.cfg)?;
        let dir = self.path(DATASET_DIR);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(Error::from)?;
        }
        synthdata::save_dir(&data.dataset, &data.split, self.cfg.split.train_fraction, &dir)?;
        self.outputs.push(DATASET_DIR.to_string());
        log::info!(
            "dataset: {} samples, {} train / {} eval subjects",
            data.dataset.samples.len(),
            data.split.train_subjects.len(),
            data.split.eval_subjects.len()
        );
        Ok(())
    }

    fn train(&mut self) -> Result<(), CliError> {
        let data = self.load_data()?;
        let (teacher, report) = stages::train_teacher(&self.cfg, &data)?;
        self.save_model(TEACHER_STEM, &teacher, self.cfg.storage.teacher)?;
        self.write_json("train_report_teacher.json", &report)
    }

    fn prune(&mut self) -> Result<(), CliError> {
        let data = self.load_data()?;
        let teacher = self.load_model(TEACHER_STEM)?;
        let (pruned, history) = stages::prune(&self.cfg, &teacher, &data)?;
        let stem = pruned_stem(self.cfg.prune.rule, self.cfg.prune.target_cr);
        self.save_model(&stem, &pruned, self.cfg.storage.pruned)?;
        self.write_json(&format!("prune_history_{}.json", stem.trim_start_matches("pruned_")), &history)
    }

    fn distill(&mut self) -> Result<(), CliError> {
        let data = self.load_data()?;
        let teacher = self.load_model(TEACHER_STEM)?;
        for arch in self.cfg.arch.students.clone() {
            let pair = stages::train_students(&self.cfg, arch, &teacher, &data)?;
            for (distilled, (model, report)) in [(false, pair.plain), (true, pair.kd)] {
                let stem = student_stem(arch, distilled);
                self.save_model(&stem, &model, self.cfg.storage.students)?;
                self.write_json(&format!("train_report_{stem}.json"), &report)?;
            }
        }
        Ok(())
    }

    fn eval(&mut self) -> Result<(), CliError> {
        let data = self.load_data()?;
        for stem in self.models()? {
            let model = self.load_model(&stem)?;
            let (scores, report) = stages::evaluate(&model, &data, &self.cfg.eval.fmr_targets)?;
            self.write_text(&format!("scores_{stem}.csv"), &scores.to_csv())?;
            self.write_json(&format!("verification_{stem}.json"), &report)?;
            log::info!("{stem}: eer {:.4} auc {:.4}", report.eer, report.auc);
        }
        Ok(())
    }

    fn bench(&mut self) -> Result<(), CliError> {
        let data = self.load_data()?;
        let mut stems = self.models()?;
        if let Some(i) = stems.iter().position(|s| s == TEACHER_STEM) {
            let t = stems.remove(i);
            stems.insert(0, t);
        }
        if self.cfg.bench.pin_cpu && !benchhub::pin_current_thread() {
            log::warn!("could not pin the benchmark thread to one core");
        }
        let n = self.cfg.bench.batch_size.min(data.eval.samples.len());
        let idx: Vec<usize> = (0..n).collect();
        let batch = eval_images(&data).batch(&idx);
        let mut results = Vec::new();
        for stem in stems {
            let path = self.input(&format!("{stem}.nnzm"))?;
            let storage = stored_as(&path)?;
            let model = netlib::load(&path)?;
            let r = benchhub::time_extraction(&model, &stem, storage, &batch, self.cfg.bench.warmup, self.cfg.bench.reps)?;
            log::info!("{stem}: mean {:.3} ms", r.mean_ms);
            self.write_json(&format!("bench_{stem}.json"), &r)?;
            results.push(r);
        }
        if results.len() >= 2 {
            let rows = benchhub::compare(&results)?;
            self.write_text("bench_comparison.txt", &benchhub::table_text(&rows))?;
            self.write_text("bench_comparison.csv", &benchhub::table_csv(&rows))?;
        }
        Ok(())
    }

    fn report(&mut self) -> Result<(), CliError> {
        let mut models = BTreeMap::new();
        for stem in self.models()? {
            let path = self.input(&format!("{stem}.nnzm"))?;
            let model = netlib::load(&path)?;
            let file_bytes = std::fs::metadata(&path).map_err(Error::from)?.len();
            let verification: Option<VerificationReport> = self.optional_json(&format!("verification_{stem}.json"))?;
            let bench: Option<BenchResult> = self.optional_json(&format!("bench_{stem}.json"))?;
            let summary = stages::summarize(&model, file_bytes, verification.as_ref(), bench.map(|b| b.mean_ms))?;
            models.insert(stem, summary);
        }
        let report = Report { config_hash: self.config_hash.clone(), models };
        self.write_json("report.json", &report)
    }

    fn optional_json<T: for<'de> Deserialize<'de>>(&mut self, name: &str) -> Result<Option<T>, CliError> {
        if !self.path(name).exists() {
            return Ok(None);
        }
        let path = self.input(name)?;
        let bytes = std::fs::read(path).map_err(Error::from)?;
        Ok(Some(serde_json::from_slice(&bytes).map_err(Error::from)?))
    }
}

fn stored_as(path: &Path) -> Result<Storage, CliError> {
    let bytes = std::fs::read(path).map_err(Error::from)?;
    let (header, _) = netlib::format::read_header(&bytes)?;
    Ok(if header.tensors.iter().any(|t| t.storage == Storage::Sparse) { Storage::Sparse } else { Storage::Dense })
}

fn eval_images(data: &Prepared) -> synthdata::LabeledImages {
    let mut all = synthdata::LabeledImages { shape: data.dataset.spec.input_shape(), images: Vec::new(), labels: Vec::new() };
    let per = all.shape.numel();
    for s in &data.eval.samples {
        let t = synthdata::to_chw(&s.image, all.shape);
        debug_assert_eq!(t.len(), per);
        all.images.extend(t);
        all.labels.push(0);
    }
    all
}
