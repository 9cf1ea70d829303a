//! Command-line pipeline: `gen-experts`, `convexify`, `distill`, `eval`,
//! `report`, `pca` and `storage`.
//!
//! Settings come from defaults, then an optional TOML file (`--config`), then
//! flags. Every command that writes a directory also writes the effective
//! settings to `config.toml` inside it. Exit codes: 0 success, 1 runtime
//! error, 2 usage error. `MCT_THREADS` caps the worker threads.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, anyhow};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetConfig, DatasetKind, LabeledDataset};
use crate::distill::{self, DistillConfig, EvalContext, Experts, Mode};
use crate::eval;
use crate::expert::{self, ExpertConfig, MttBuffer};
use crate::model::ModelSpec;
use crate::store;
use crate::trajectory::{self, BetaGranularity, ConvexTrajectory, ConvexifyOptions};

pub const THREADS_ENV: &str = "MCT_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_widths: vec![64, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvexifyConfig {
    pub anchors: String,
    #[serde(flatten)]
    pub options: ConvexifyOptions,
}

impl Default for ConvexifyConfig {
    fn default() -> Self {
        ConvexifyConfig {
            anchors: "0,K".into(),
            options: ConvexifyOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub repeats: usize,
    pub train_iters: usize,
    /// Convergence gap in percentage points.
    pub epsilon: f64,
    pub tail: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            repeats: 5,
            train_iters: 300,
            epsilon: 2.0,
            tail: 10,
            seed: 0,
        }
    }
}

/// Every setting of the pipeline; the TOML file format.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub expert: ExpertConfig,
    pub convexify: ConvexifyConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Runtime(anyhow!("reading {}: {e}", p.display())))?;
                RunConfig::from_toml(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))
            }
        }
    }

    fn spec(&self) -> anyhow::Result<ModelSpec> {
        Ok(ModelSpec::new(self.dataset.dim, self.model.hidden_widths.clone(), self.dataset.classes)?)
    }

    /// Loads the data and fills in dimensions taken from it.
    fn load_data(&mut self) -> anyhow::Result<(LabeledDataset, LabeledDataset)> {
        let (train, val) = self.dataset.load().context("loading dataset")?;
        self.dataset.dim = train.feature_dim();
        self.dataset.classes = train.num_classes();
        Ok((train, val))
    }

    fn echo(&self, dir: &Path) -> anyhow::Result<()> {
        write_file(&dir.join("config.toml"), self.to_toml().as_bytes())
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Parser, Debug)]
#[command(name = "mct", version, about = "Dataset distillation by (convexified) trajectory matching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train expert networks and write one trajectory buffer per expert.
    GenExperts(GenExpertsArgs),
    /// Convert trajectory buffers into convex trajectories.
    Convexify(ConvexifyArgs),
    /// Learn a synthetic dataset by trajectory matching.
    Distill(DistillArgs),
    /// Retrain fresh networks on a synthetic set and report accuracy.
    Eval(EvalArgs),
    /// Merge distillation runs into one comparison table.
    Report(ReportArgs),
    /// Project an expert trajectory onto its top two principal directions.
    Pca(PcaArgs),
    /// Compare the file sizes of a buffer and its convex trajectory.
    Storage(StorageArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetArg>,
    /// IDX image file (with `--dataset idx`).
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// IDX label file (with `--dataset idx`).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DatasetArg {
    Blobs,
    Idx,
}

impl DataArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(d) = self.dataset {
            cfg.dataset.kind = match d {
                DatasetArg::Blobs => DatasetKind::Blobs,
                DatasetArg::Idx => DatasetKind::Idx,
            };
        }
        if let Some(p) = &self.images {
            cfg.dataset.images = Some(p.clone());
        }
        if let Some(p) = &self.labels {
            cfg.dataset.labels = Some(p.clone());
        }
        if let Some(s) = self.data_seed {
            cfg.dataset.seed = s;
        }
    }
}

#[derive(Args, Debug)]
pub struct GenExpertsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub num_experts: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ConvexifyArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory written by `gen-experts`.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Comma-separated anchor epochs; `K` stands for the last epoch.
    #[arg(long)]
    pub anchors: Option<String>,
    #[arg(long, value_enum)]
    pub granularity: Option<GranularityArg>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GranularityArg {
    PerGroup,
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Mtt,
    Mct,
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub ipc: Option<usize>,
    /// Expert epochs between start and target.
    #[arg(long = "M", alias = "expert-steps")]
    pub expert_steps: Option<usize>,
    /// Student steps per unroll.
    #[arg(long = "N", alias = "student-steps")]
    pub student_steps: Option<usize>,
    #[arg(long)]
    pub max_start: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long, overrides_with = "no_continuous")]
    pub continuous: bool,
    #[arg(long, overrides_with = "continuous")]
    pub no_continuous: bool,
    #[arg(long)]
    pub lr_features: Option<f64>,
    #[arg(long)]
    pub lr_alpha: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub train_iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory written by `gen-experts` or `convexify`.
    #[arg(long)]
    pub experts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub synthetic: PathBuf,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub train_iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also evaluate a random real subset of the same size.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Output directories of `distill` runs.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PcaArgs {
    /// Directory written by `gen-experts`.
    #[arg(long)]
    pub experts: PathBuf,
    /// Index of the expert to project.
    #[arg(long, default_value_t = 0)]
    pub expert: usize,
    /// Project the convexified trajectory instead of the checkpoints.
    #[arg(long)]
    pub convex: bool,
    #[arg(long)]
    pub anchors: Option<String>,
    #[arg(long, value_enum)]
    pub granularity: Option<GranularityArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct StorageArgs {
    #[arg(long)]
    pub mtt: PathBuf,
    #[arg(long)]
    pub conv: PathBuf,
}

/// Contents of `manifest.json` in a `gen-experts` or `convexify` directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: Mode,
    pub config: RunConfig,
    pub experts: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: u32,
    pub file: String,
    pub epochs: usize,
    pub bytes: u64,
    /// Validation accuracy at every checkpoint (gen-experts only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<Vec<f64>>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn read(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(Self::FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_file(&dir.join(Self::FILE), text.as_bytes())
    }

    fn buffers(&self, dir: &Path) -> anyhow::Result<Vec<MttBuffer>> {
        self.experts
            .iter()
            .map(|e| {
                let path = dir.join(&e.file);
                let mut b = store::read_buffer(&path).with_context(|| format!("reading {}", path.display()))?;
                b.id = e.id;
                Ok(b)
            })
            .collect()
    }

    fn convex(&self, dir: &Path) -> anyhow::Result<Vec<ConvexTrajectory>> {
        self.experts
            .iter()
            .map(|e| {
                let path = dir.join(&e.file);
                store::read_convex(&path).with_context(|| format!("reading {}", path.display()))
            })
            .collect()
    }

    fn total_bytes(&self) -> u64 {
        self.experts.iter().map(|e| e.bytes).sum()
    }
}

/// Contents of `summary.json` in a `distill` directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub mode: Mode,
    pub continuous_sampling: bool,
    pub ipc: usize,
    pub final_mean_acc: Option<f64>,
    pub final_std_acc: Option<f64>,
    pub convergence_iteration: Option<usize>,
    pub tail_std: Option<f64>,
    pub final_alpha: f64,
    /// Bytes of the expert trajectory files the run consumed.
    pub storage_bytes: u64,
    pub wall_time_secs: f64,
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn granularity(g: GranularityArg) -> BetaGranularity {
    match g {
        GranularityArg::PerGroup => BetaGranularity::PerGroup,
        GranularityArg::Global => BetaGranularity::Global,
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return 2;
    }
    match run(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("{THREADS_ENV} must be a positive integer, got {value:?}"))?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenExperts(a) => gen_experts(a),
        Command::Convexify(a) => convexify(a),
        Command::Distill(a) => distill_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Report(a) => report(a),
        Command::Pca(a) => pca(a),
        Command::Storage(a) => storage(a),
    }
}

fn gen_experts(a: GenExpertsArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.data.config.as_deref())?;
    a.data.apply(&mut cfg);
    let e = &mut cfg.expert;
    if let Some(v) = a.epochs {
        e.epochs = v;
    }
    if let Some(v) = a.num_experts {
        e.num_experts = v;
    }
    if let Some(v) = a.lr {
        e.lr = v;
    }
    if let Some(v) = a.batch_size {
        e.batch_size = v;
    }
    if let Some(v) = a.seed {
        e.base_seed = v;
    }
    e.validate().map_err(|err| usage(err.to_string()))?;
    if !(e.lr > 0.0) {
        return Err(usage(format!("--lr must be positive, got {}", e.lr)));
    }
    let (train, val) = cfg.load_data()?;
    let spec = cfg.spec()?;
    let buffers = expert::train_expert_ensemble(&train, &val, &spec, &cfg.expert)?;
    create_dir(&a.out)?;
    let mut entries = Vec::with_capacity(buffers.len());
    for b in &buffers {
        let file = format!("expert_{:03}.mttb", b.id);
        let bytes = store::encode_buffer(b);
        write_file(&a.out.join(&file), &bytes)?;
        let acc = b.val_accuracy.clone();
        println!(
            "{file}: K = {}, final val accuracy {:.4}",
            b.epochs(),
            acc.as_ref().and_then(|v| v.last().copied()).unwrap_or(f64::NAN)
        );
        entries.push(ManifestEntry {
            id: b.id,
            file,
            epochs: b.epochs(),
            bytes: bytes.len() as u64,
            val_accuracy: acc,
        });
    }
    Manifest {
        kind: Mode::Mtt,
        config: cfg.clone(),
        experts: entries,
    }
    .write(&a.out)?;
    cfg.echo(&a.out)?;
    Ok(())
}

fn convexify(a: ConvexifyArgs) -> Result<(), CliError> {
    let manifest = Manifest::read(&a.input)?;
    if manifest.kind != Mode::Mtt {
        return Err(usage(format!("{} does not hold expert buffers", a.input.display())));
    }
    let mut cfg = match &a.config {
        Some(_) => RunConfig::load(a.config.as_deref())?,
        None => manifest.config.clone(),
    };
    if let Some(s) = a.anchors {
        cfg.convexify.anchors = s;
    }
    if let Some(g) = a.granularity {
        cfg.convexify.options.granularity = granularity(g);
    }
    let buffers = manifest.buffers(&a.input)?;
    create_dir(&a.out)?;
    let mut entries = Vec::with_capacity(buffers.len());
    for (b, entry) in buffers.iter().zip(&manifest.experts) {
        let anchors = trajectory::parse_anchors(&cfg.convexify.anchors, b.epochs()).map_err(|e| usage(e.to_string()))?;
        let traj = trajectory::convexify_with(b, &anchors, cfg.convexify.options)
            .with_context(|| format!("convexifying {}", entry.file))?;
        let file = entry.file.replace(".mttb", ".mctb");
        let bytes = store::encode_convex(&traj);
        write_file(&a.out.join(&file), &bytes)?;
        let r = store::storage_report_files(a.input.join(&entry.file), a.out.join(&file))?;
        println!("{file}: anchors {anchors:?}, {} / {} bytes, ratio {:.4}", r.bytes_conv, r.bytes_mtt, r.ratio);
        entries.push(ManifestEntry {
            id: entry.id,
            file,
            epochs: traj.epochs(),
            bytes: bytes.len() as u64,
            val_accuracy: None,
        });
    }
    Manifest {
        kind: Mode::Mct,
        config: cfg.clone(),
        experts: entries,
    }
    .write(&a.out)?;
    cfg.echo(&a.out)?;
    Ok(())
}

fn distill_cmd(a: DistillArgs) -> Result<(), CliError> {
    let manifest = Manifest::read(&a.experts)?;
    let mut cfg = match &a.config {
        Some(_) => RunConfig::load(a.config.as_deref())?,
        None => manifest.config.clone(),
    };
    // the experts fix the data and architecture
    cfg.dataset = manifest.config.dataset.clone();
    cfg.model = manifest.config.model.clone();
    cfg.expert = manifest.config.expert.clone();
    let d = &mut cfg.distill;
    if let Some(m) = a.mode {
        d.mode = match m {
            ModeArg::Mtt => Mode::Mtt,
            ModeArg::Mct => Mode::Mct,
        };
    } else if a.config.is_none() {
        d.mode = manifest.kind;
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(if let Some(v) = a.$flag { d.$field = v; })*};
    }
    set!(ipc => ipc, expert_steps => expert_steps, student_steps => student_steps, max_start => max_start_epoch,
         iters => outer_iters, lr_features => outer_lr_features, lr_alpha => outer_lr_alpha,
         eval_every => eval_every, repeats => eval_repeats, train_iters => eval_train_iters, seed => seed);
    if a.continuous {
        d.continuous_sampling = true;
    }
    if a.no_continuous {
        d.continuous_sampling = false;
    }
    let min_epochs = manifest.experts.iter().map(|e| e.epochs).min().unwrap_or(0);
    d.validate(min_epochs).map_err(|e| usage(e.to_string()))?;

    let experts = match (d.mode, manifest.kind) {
        (Mode::Mtt, Mode::Mtt) => Experts::Mtt(manifest.buffers(&a.experts)?),
        (Mode::Mct, Mode::Mct) => Experts::Mct(manifest.convex(&a.experts)?),
        (Mode::Mct, Mode::Mtt) => {
            let buffers = manifest.buffers(&a.experts)?;
            let trajs = buffers
                .iter()
                .zip(&manifest.experts)
                .map(|(b, e)| {
                    let anchors = trajectory::parse_anchors(&cfg.convexify.anchors, b.epochs())?;
                    trajectory::convexify_with(b, &anchors, cfg.convexify.options)
                        .map_err(|err| anyhow!("{}: {err}", e.file))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            Experts::Mct(trajs)
        }
        (Mode::Mtt, Mode::Mct) => {
            return Err(usage("MTT mode needs raw expert buffers, not convex trajectories"));
        }
    };
    let storage_bytes = match (&experts, manifest.kind) {
        (Experts::Mct(t), Mode::Mtt) => t.iter().map(|t| store::encode_convex(t).len() as u64).sum(),
        _ => manifest.total_bytes(),
    };

    let (train, val) = cfg.load_data()?;
    let spec = cfg.spec()?;
    let ctx = EvalContext {
        val: &val,
        spec: &spec,
        epsilon: cfg.eval.epsilon,
    };
    let (synthetic, report) = distill::distill(&experts, &train, cfg.expert.lr, &cfg.distill, Some(&ctx))?;
    create_dir(&a.out)?;
    store::write_synthetic(a.out.join("synthetic.synd"), &synthetic)?;
    write_file(&a.out.join("report.csv"), report_csv(&report).as_bytes())?;
    write_file(&a.out.join("eval_trace.csv"), eval_trace_csv(&report.evals).as_bytes())?;
    let accs: Vec<f64> = report.evals.iter().map(|e| 100.0 * e.mean_acc).collect();
    let last = report.evals.last();
    let summary = DistillSummary {
        mode: report.mode,
        continuous_sampling: cfg.distill.continuous_sampling,
        ipc: report.ipc,
        final_mean_acc: last.map(|e| e.mean_acc),
        final_std_acc: last.map(|e| e.std_acc),
        convergence_iteration: report.convergence_iteration,
        tail_std: eval::stability_metric(&accs, cfg.eval.tail.min(accs.len())).ok(),
        final_alpha: synthetic.alpha(),
        storage_bytes,
        wall_time_secs: report.wall_time_secs,
    };
    write_file(
        &a.out.join("summary.json"),
        (serde_json::to_string_pretty(&summary).map_err(anyhow::Error::from)? + "\n").as_bytes(),
    )?;
    cfg.echo(&a.out)?;
    println!(
        "{}: final accuracy {} after {} iterations, convergence iteration {}, alpha_S {:.5}",
        summary.mode,
        fmt_opt(summary.final_mean_acc.map(|v| format!("{v:.4}"))),
        cfg.distill.outer_iters,
        fmt_opt(summary.convergence_iteration.map(|v| v.to_string())),
        summary.final_alpha
    );
    Ok(())
}

fn fmt_opt(v: Option<String>) -> String {
    v.unwrap_or_else(|| "-".into())
}

/// `iteration,loss,alpha_S,eval_accuracy`; one row per outer iteration plus a
/// final row for an evaluation after the last update. `eval_accuracy` is
/// empty where no evaluation ran.
pub fn report_csv(report: &distill::DistillReport) -> String {
    let mut out = String::from("iteration,loss,alpha_S,eval_accuracy\n");
    let acc_at = |it: usize| report.evals.iter().find(|e| e.iteration == it).map(|e| e.mean_acc);
    for (it, (loss, alpha)) in report.losses.iter().zip(&report.alphas).enumerate() {
        let acc = acc_at(it).map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{it},{loss},{alpha},{acc}");
    }
    let n = report.losses.len();
    if let Some(a) = acc_at(n) {
        let alpha = report.alphas.last().map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{n},,{alpha},{a}");
    }
    out
}

pub fn eval_trace_csv(evals: &[eval::EvalPoint]) -> String {
    let mut out = String::from("iteration,mean_acc,std_acc\n");
    for e in evals {
        let _ = writeln!(out, "{},{},{}", e.iteration, e.mean_acc, e.std_acc);
    }
    out
}

fn eval_cmd(a: EvalArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.data.config.as_deref())?;
    a.data.apply(&mut cfg);
    if let Some(v) = a.repeats {
        cfg.eval.repeats = v;
    }
    if let Some(v) = a.train_iters {
        cfg.eval.train_iters = v;
    }
    if let Some(v) = a.seed {
        cfg.eval.seed = v;
    }
    if cfg.eval.repeats == 0 || cfg.eval.train_iters == 0 {
        return Err(usage("--repeats and --train-iters must be at least 1"));
    }
    let synthetic = store::read_synthetic(&a.synthetic).with_context(|| format!("reading {}", a.synthetic.display()))?;
    let (train, val) = cfg.load_data()?;
    let spec = cfg.spec()?;
    let r = eval::evaluate_synthetic(&synthetic, &val, &spec, cfg.eval.repeats, cfg.eval.train_iters, cfg.eval.seed)?;
    println!("synthetic: {:.4} ± {:.4} over {} repeats", r.mean, r.std, r.accuracies.len());
    if a.baseline {
        let b = eval::random_subset_baseline(
            &train,
            synthetic.ipc(),
            &val,
            &spec,
            cfg.expert.lr,
            cfg.eval.repeats,
            cfg.eval.train_iters,
            cfg.eval.seed,
        )?;
        println!("random subset: {:.4} ± {:.4}", b.mean, b.std);
    }
    Ok(())
}

/// Convergence cell of a run whose accuracy never settled.
pub const NOT_CONVERGED: &str = "none";

/// Comparison table header.
pub const TABLE_HEADER: &str = "method,ipc,mean,std,convergence_iter,storage_bytes";

fn report(a: ReportArgs) -> Result<(), CliError> {
    let mut out = format!("{TABLE_HEADER}\n");
    for dir in &a.inputs {
        let path = dir.join("summary.json");
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let s: DistillSummary = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let method = match (s.mode, s.continuous_sampling) {
            (Mode::Mct, false) => "mct-discrete".to_string(),
            (m, _) => m.to_string(),
        };
        let _ = writeln!(
            out,
            "{method},{},{},{},{},{}",
            s.ipc,
            s.final_mean_acc.map(|v| v.to_string()).unwrap_or_default(),
            s.final_std_acc.map(|v| v.to_string()).unwrap_or_default(),
            s.convergence_iteration.map_or_else(|| NOT_CONVERGED.to_string(), |v| v.to_string()),
            s.storage_bytes
        );
    }
    write_file(&a.out, out.as_bytes())?;
    print!("{out}");
    Ok(())
}

fn pca(a: PcaArgs) -> Result<(), CliError> {
    let manifest = Manifest::read(&a.experts)?;
    if manifest.kind != Mode::Mtt {
        return Err(usage("pca reads a gen-experts directory"));
    }
    let mut cfg = manifest.config.clone();
    let entry = manifest
        .experts
        .get(a.expert)
        .ok_or_else(|| usage(format!("expert {} not in manifest", a.expert)))?;
    let b = store::read_buffer(a.experts.join(&entry.file))?;
    let waypoints = if a.convex {
        if let Some(s) = a.anchors {
            cfg.convexify.anchors = s;
        }
        if let Some(g) = a.granularity {
            cfg.convexify.options.granularity = granularity(g);
        }
        let anchors = trajectory::parse_anchors(&cfg.convexify.anchors, b.epochs()).map_err(|e| usage(e.to_string()))?;
        let t = trajectory::convexify_with(&b, &anchors, cfg.convexify.options)?;
        (0..=t.epochs()).map(|i| t.waypoint(i)).collect::<Result<Vec<_>, _>>()?
    } else {
        b.checkpoints().to_vec()
    };
    let (_, val) = cfg.load_data()?;
    let p = eval::pca_project_trajectory(&waypoints, &val, a.seed.unwrap_or(0))?;
    let mut out = String::from("index,pc1,pc2,one_minus_val_acc\n");
    for r in &p.rows {
        let _ = writeln!(out, "{},{},{},{}", r.index, r.pc1, r.pc2, r.one_minus_val_acc);
    }
    write_file(&a.out, out.as_bytes())?;
    println!(
        "variance pc1 {:.6e}, pc2 {:.6e}, ratio {:.3e}",
        p.variances[0],
        p.variances[1],
        p.variances[1] / p.variances[0]
    );
    Ok(())
}

fn storage(a: StorageArgs) -> Result<(), CliError> {
    let r = store::storage_report_files(&a.mtt, &a.conv)?;
    println!("{}", serde_json::to_string_pretty(&r).map_err(anyhow::Error::from)?);
    Ok(())
}

/// Rejects a command line that is not valid; used by tests.
pub fn parse(args: &[&str]) -> anyhow::Result<Cli> {
    Cli::try_parse_from(args).map_err(|e| anyhow!("{e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_round_trips_and_rejects_unknown_keys() {
        let mut cfg = RunConfig::default();
        cfg.distill.alpha_init = Some(0.02);
        cfg.convexify.options.granularity = BetaGranularity::Global;
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert!(RunConfig::from_toml("[distill]\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
        let partial = RunConfig::from_toml("[expert]\nepochs = 7\n").unwrap();
        assert_eq!(partial.expert.epochs, 7);
        assert_eq!(partial.distill, DistillConfig::default());
    }

    #[test]
    fn flag_parsing() {
        let cli = parse(&["mct", "distill", "--experts", "e", "--out", "o", "--M", "3", "--no-continuous"]).unwrap();
        let Command::Distill(d) = cli.command else { panic!() };
        assert_eq!(d.expert_steps, Some(3));
        assert!(d.no_continuous && !d.continuous);
        assert!(parse(&["mct", "distill", "--out", "o"]).is_err());
    }

    #[test]
    fn epochs_zero_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("x");
        let code = main_with_args(["mct", "gen-experts", "--epochs", "0", "--out", out.to_str().unwrap()]);
        assert_eq!(code, 2);
        assert!(!out.exists());
    }
}
