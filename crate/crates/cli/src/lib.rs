//! `segforge {gen|train|eval|bench|report}`.
//!
//! Each command has a JSON config whose keys match its long flags (with `_`
//! for `-`). A `--config` file is read first and flags override it; the
//! merged result is written as `resolved_config.json` in the output
//! directory, and passing that file back as `--config` reproduces the run.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use segforge_core::architectures::{Arch, BuildConfig, Network};
use segforge_core::bench::{self, CompareConfig, Entry, RunReport};
use segforge_core::checkpoint;
use segforge_core::data::{self, DatasetConfig, DatasetManifest, SceneConfig, Split, MANIFEST_FILE};
use segforge_core::training::{self, AdamConfig, TrainConfig};
use segforge_core::Error;

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

/// Process exit status of a failed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Config = 2,
    Data = 3,
    Numeric = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub code: ExitCode,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numeric(_) => ExitCode::Numeric,
            _ => ExitCode::Data,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn config_err<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError { code: ExitCode::Config, message: msg.into() })
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "segforge", version, about = "Mast-cell segmentation with UNet, ENet and BoxENet")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate, tile and split a synthetic dataset.
    Gen(GenArgs),
    /// Train one model on a generated dataset.
    Train(TrainArgs),
    /// Per-tile metrics of a checkpoint on one split.
    Eval(EvalArgs),
    /// Latency of one or more checkpoints.
    Bench(BenchArgs),
    /// Side-by-side metric grid, latencies and DSC histogram.
    Report(ReportArgs),
}

fn parse_ratio(s: &str) -> Result<(u32, u32), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("ratio {s:?} is not of the form A:B"))?;
    Ok((a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?, b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?))
}

fn read_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<C> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text = std::fs::read_to_string(path).or_else(|e| config_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).or_else(|e| config_err(format!("{}: {e}", path.display())))
}

fn require_out(out: &Option<PathBuf>) -> CliResult<PathBuf> {
    out.clone().map_or_else(|| config_err("an output directory is required (--out)"), Ok)
}

fn write_resolved<C: Serialize>(out: &Path, cfg: &C) -> CliResult<()> {
    std::fs::create_dir_all(out)?;
    let text = serde_json::to_string_pretty(cfg).map_err(Error::from)? + "\n";
    std::fs::write(out.join(RESOLVED_CONFIG), text)?;
    Ok(())
}

fn write_json<V: Serialize>(path: &Path, v: &V) -> CliResult<()> {
    std::fs::write(path, serde_json::to_string_pretty(v).map_err(Error::from)? + "\n")?;
    Ok(())
}

macro_rules! apply {
    ($cfg:ident, $args:ident, $($field:ident),+) => {
        $(if let Some(v) = $args.$field.clone() { $cfg.$field = v.into(); })+
    };
}

// ---------------------------------------------------------------- gen

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub out: Option<PathBuf>,
    pub scenes: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub tile_size: usize,
    pub ratio: (u32, u32),
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { out: None, scenes: 10, seed: 0, height: 1024, width: 1280, tile_size: 256, ratio: (74, 51) }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub tile_size: Option<usize>,
    /// Train:validation ratio, e.g. 74:51.
    #[arg(long, value_parser = parse_ratio)]
    pub ratio: Option<(u32, u32)>,
}

impl GenArgs {
    pub fn resolve(&self) -> CliResult<GenConfig> {
        let mut c: GenConfig = read_config(self.config.as_deref())?;
        apply!(c, self, scenes, seed, height, width, tile_size, ratio);
        if self.out.is_some() {
            c.out = self.out.clone();
        }
        Ok(c)
    }
}

pub fn cmd_gen(cfg: &GenConfig) -> CliResult<DatasetManifest> {
    let out = require_out(&cfg.out)?;
    let ds = DatasetConfig {
        scenes: cfg.scenes,
        seed: cfg.seed,
        tile_size: cfg.tile_size,
        ratio: cfg.ratio,
        scene: SceneConfig::with_size(cfg.height, cfg.width),
    };
    if ds.scenes == 0 {
        return config_err("--scenes must be positive");
    }
    if ds.ratio.0 + ds.ratio.1 == 0 {
        return config_err("--ratio must have a positive total");
    }
    if ds.tile_size == 0 || ds.scene.height % ds.tile_size != 0 || ds.scene.width % ds.tile_size != 0 {
        return config_err(format!("{}x{} scenes cannot be cut into {} tiles", cfg.height, cfg.width, cfg.tile_size));
    }
    ds.scene.validate().or_else(|e| config_err(e.to_string()))?;
    let manifest = data::generate_dataset(&out, &ds)?;
    write_resolved(&out, cfg)?;
    log::info!("wrote {} scenes, {} tiles to {}", manifest.scenes.len(), manifest.tile_count(), out.display());
    Ok(manifest)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCmdConfig {
    pub data: PathBuf,
    pub out: Option<PathBuf>,
    pub model: Arch,
    pub epochs: usize,
    /// `None` picks 4 for tiles of 256 or more and 16 below.
    pub batch_size: Option<usize>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub width_mult: f64,
    pub seed: u64,
    pub max_steps: Option<u64>,
    /// Stop once validation DSC reaches this value.
    pub target_val_dsc: Option<f64>,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            data: PathBuf::from("data"),
            out: None,
            model: Arch::ENet,
            epochs: 300,
            batch_size: None,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            width_mult: 1.0,
            seed: 0,
            max_steps: None,
            target_val_dsc: None,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<Arch>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub width_mult: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub target_val_dsc: Option<f64>,
}

impl TrainArgs {
    pub fn resolve(&self) -> CliResult<TrainCmdConfig> {
        let mut c: TrainCmdConfig = read_config(self.config.as_deref())?;
        apply!(c, self, data, model, epochs, lr, beta1, beta2, adam_eps, width_mult, seed);
        if self.out.is_some() {
            c.out = self.out.clone();
        }
        if self.batch_size.is_some() {
            c.batch_size = self.batch_size;
        }
        if self.max_steps.is_some() {
            c.max_steps = self.max_steps;
        }
        if self.target_val_dsc.is_some() {
            c.target_val_dsc = self.target_val_dsc;
        }
        Ok(c)
    }
}

fn read_manifest(root: &Path) -> CliResult<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(CliError { code: ExitCode::Data, message: format!("no manifest at {}", path.display()) });
    }
    Ok(DatasetManifest::read(&path)?)
}

pub fn default_batch_size(tile_size: usize) -> usize {
    if tile_size >= 256 {
        4
    } else {
        16
    }
}

pub fn cmd_train(cfg: &TrainCmdConfig) -> CliResult<training::TrainHistory> {
    let out = require_out(&cfg.out)?;
    if cfg.batch_size == Some(0) || !(cfg.lr > 0.0) || !(cfg.width_mult > 0.0) {
        return config_err("batch size, learning rate and width multiplier must be positive");
    }
    let manifest = read_manifest(&cfg.data)?;
    let mut resolved = cfg.clone();
    let batch_size = *resolved.batch_size.get_or_insert(default_batch_size(manifest.tile_size));
    write_resolved(&out, &resolved)?;

    let train_set = data::load_split::<f32>(&cfg.data, &manifest, Split::Train)?;
    let val_set = data::load_split::<f32>(&cfg.data, &manifest, Split::Validation)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(CliError { code: ExitCode::Data, message: "both splits must hold at least one tile".into() });
    }
    let build = BuildConfig { arch: cfg.model, width_mult: cfg.width_mult, input_size: manifest.tile_size, seed: cfg.seed };
    let mut net = Network::<f32>::build(build).or_else(|e| config_err(e.to_string()))?;
    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size,
        seed: cfg.seed,
        adam: AdamConfig { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps },
        max_steps: cfg.max_steps,
        checkpoint_dir: Some(out.clone()),
        target_val_dsc: cfg.target_val_dsc,
    };
    log::info!("training {} ({} parameters) on {} tiles, validating on {}", cfg.model, net.count_parameters(), train_set.len(), val_set.len());
    let outcome = training::train(&mut net, &train_set, &val_set, &tc, |r| {
        log::info!("epoch {} loss {:.4} train dsc {:.4} val dsc {:.4} ({:.1}s)", r.epoch, r.loss, r.train_dsc, r.val_dsc, r.seconds);
    })?;
    training::write_history_csv(&out.join("history.csv"), &outcome.history)?;
    checkpoint::save(&out.join("checkpoint.bin"), &outcome.best, Some(&outcome.best_state))?;
    Ok(outcome.history)
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub data: PathBuf,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Expected architecture; a checkpoint of another one is refused.
    pub model: Option<Arch>,
    /// Score masks stored under this directory (same relative paths as
    /// the dataset's masks) instead of running a checkpoint.
    pub predictions: Option<PathBuf>,
    pub split: Split,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { data: PathBuf::from("data"), out: None, checkpoint: None, model: None, predictions: None, split: Split::Validation, batch_size: 4 }
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "validation" | "val" => Ok(Split::Validation),
        _ => Err(format!("unknown split {s:?} (expected train or validation)")),
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<Arch>,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

impl EvalArgs {
    pub fn resolve(&self) -> CliResult<EvalConfig> {
        let mut c: EvalConfig = read_config(self.config.as_deref())?;
        apply!(c, self, data, split, batch_size);
        for (dst, src) in [(&mut c.out, &self.out), (&mut c.checkpoint, &self.checkpoint), (&mut c.predictions, &self.predictions)] {
            if src.is_some() {
                dst.clone_from(src);
            }
        }
        if self.model.is_some() {
            c.model = self.model;
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    /// Architecture and hash of the evaluated model, or `predictions`.
    pub source: String,
    pub split: Split,
    pub tiles: Vec<String>,
    pub evaluation: bench::Evaluation,
}

/// Loads a checkpoint, optionally insisting on an architecture.
pub fn load_model(path: &Path, expect: Option<Arch>) -> CliResult<Network<f32>> {
    let bytes = std::fs::read(path).map_err(|e| CliError { code: ExitCode::Data, message: format!("{}: {e}", path.display()) })?;
    let (header, _) = checkpoint::read_header(&bytes)?;
    let build = BuildConfig { arch: expect.unwrap_or(header.build.arch), ..header.build };
    let mut net = Network::<f32>::build(build)?;
    checkpoint::load_into(&mut net, &bytes)?;
    Ok(net)
}

pub fn cmd_eval(cfg: &EvalConfig) -> CliResult<EvalOutput> {
    let out = require_out(&cfg.out)?;
    let manifest = read_manifest(&cfg.data)?;
    let records: Vec<_> = manifest.tiles(cfg.split).collect();
    if records.is_empty() {
        return Err(CliError { code: ExitCode::Data, message: format!("split {:?} is empty", cfg.split) });
    }
    let truth: Vec<_> = records.iter().map(|t| data::read_pgm_mask(&cfg.data.join(&t.mask_path))).collect::<Result<_, _>>()?;
    let (source, preds) = match (&cfg.predictions, &cfg.checkpoint) {
        (Some(dir), _) => {
            let preds = records.iter().map(|t| data::read_pgm_mask(&dir.join(&t.mask_path))).collect::<Result<Vec<_>, _>>()?;
            ("predictions".to_string(), preds)
        }
        (None, Some(ckpt)) => {
            let net = load_model(ckpt, cfg.model)?;
            let set = data::load_split::<f32>(&cfg.data, &manifest, cfg.split)?;
            (format!("{} {}", net.arch(), net.spec_hash()), training::predict_masks(&net, &set, cfg.batch_size)?)
        }
        (None, None) => return config_err("eval needs --checkpoint or --predictions"),
    };
    write_resolved(&out, cfg)?;
    let evaluation = bench::Evaluation::from_masks(&preds, &truth)?;
    let result = EvalOutput { source, split: cfg.split, tiles: records.iter().map(|t| t.rgb_path.clone()).collect(), evaluation };
    write_json(&out.join("metrics.json"), &result)?;
    let mut csv = String::from("tile,dsc,iou,pixel_f1,object_f1\n");
    for (t, s) in result.tiles.iter().zip(&result.evaluation.per_tile) {
        csv.push_str(&format!("{t},{:.6},{:.6},{:.6},{:.6}\n", s.dsc, s.iou, s.pixel_f1, s.object_f1));
    }
    std::fs::write(out.join("metrics.csv"), csv)?;
    Ok(result)
}

// ---------------------------------------------------------------- bench / report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareCmdConfig {
    pub data: PathBuf,
    pub out: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub split: Split,
    /// Side of the square single-sample latency input.
    pub size: usize,
    pub warmup: usize,
    pub reps: usize,
    /// Include latencies (always on for `bench`).
    pub timing: bool,
    pub bins: usize,
    pub batch_size: usize,
}

impl Default for CompareCmdConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data"),
            out: None,
            checkpoints: Vec::new(),
            split: Split::Validation,
            size: 256,
            warmup: bench::DEFAULT_WARMUP,
            reps: bench::DEFAULT_REPS,
            timing: false,
            bins: 10,
            batch_size: 4,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Repeat once per model.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

impl CompareArgs {
    fn resolve(&self, timing: Option<bool>) -> CliResult<CompareCmdConfig> {
        let mut c: CompareCmdConfig = read_config(self.config.as_deref())?;
        apply!(c, self, data, split, size, warmup, reps, bins, batch_size);
        if self.out.is_some() {
            c.out = self.out.clone();
        }
        if !self.checkpoints.is_empty() {
            c.checkpoints = self.checkpoints.clone();
        }
        if let Some(t) = timing {
            c.timing = t;
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CompareArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: CompareArgs,
    /// Also measure latencies.
    #[arg(long)]
    pub timing: bool,
}

impl BenchArgs {
    pub fn resolve(&self) -> CliResult<CompareCmdConfig> {
        self.common.resolve(Some(true))
    }
}

impl ReportArgs {
    pub fn resolve(&self) -> CliResult<CompareCmdConfig> {
        self.common.resolve(self.timing.then_some(true))
    }
}

fn hyperparameters(ckpt: &Path, header: &checkpoint::Header) -> serde_json::Value {
    let sibling = ckpt.parent().map(|d| d.join(RESOLVED_CONFIG));
    let train = sibling.and_then(|p| std::fs::read_to_string(p).ok()).and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok());
    serde_json::json!({ "build": header.build, "adam": header.adam, "train": train })
}

fn run_compare(cfg: &CompareCmdConfig) -> CliResult<(PathBuf, RunReport)> {
    let out = require_out(&cfg.out)?;
    if cfg.checkpoints.is_empty() {
        return config_err("at least one --checkpoint is required");
    }
    if cfg.timing && cfg.reps < bench::MIN_REPS {
        return config_err(format!("--reps must be at least {}", bench::MIN_REPS));
    }
    let manifest = read_manifest(&cfg.data)?;
    let set = data::load_split::<f32>(&cfg.data, &manifest, cfg.split)?;
    if set.is_empty() {
        return Err(CliError { code: ExitCode::Data, message: format!("split {:?} is empty", cfg.split) });
    }
    let mut nets = Vec::new();
    for path in &cfg.checkpoints {
        let (net, _, header) = checkpoint::load::<f32>(path)?;
        nets.push((net, hyperparameters(path, &header)));
    }
    let mut names: Vec<String> = nets.iter().map(|(n, _)| n.arch().to_string()).collect();
    for i in 0..names.len() {
        if names[..i].contains(&names[i]) || names[i + 1..].contains(&names[i]) {
            names[i] = format!("{}#{}", names[i], i + 1);
        }
    }
    let entries: Vec<Entry<'_, f32>> =
        nets.iter().zip(names).map(|((net, hp), name)| Entry { name, net, hyperparameters: hp.clone() }).collect();
    let cc = CompareConfig {
        warmup: cfg.warmup,
        reps: cfg.reps,
        latency_input: cfg.timing.then(|| vec![1, 3, cfg.size, cfg.size]),
        batch_size: cfg.batch_size,
    };
    let report = bench::compare(&entries, &set, &cc).map_err(|e| match e {
        Error::Contract(m) => CliError { code: ExitCode::Config, message: m },
        e => e.into(),
    })?;
    write_resolved(&out, cfg)?;
    Ok((out, report))
}

pub fn cmd_bench(cfg: &CompareCmdConfig) -> CliResult<RunReport> {
    let (out, report) = run_compare(cfg)?;
    write_json(&out.join("bench.json"), &report)?;
    std::fs::write(out.join("latency.csv"), report.latency_csv())?;
    for m in &report.models {
        if let Some(s) = &m.single {
            log::info!("{}: median {:.4}s (p10 {:.4}, p90 {:.4}), {} parameters", m.name, s.median, s.p10, s.p90, m.parameters);
        }
    }
    Ok(report)
}

pub fn cmd_report(cfg: &CompareCmdConfig) -> CliResult<RunReport> {
    let (out, report) = run_compare(cfg)?;
    if cfg.bins == 0 {
        return config_err("--bins must be positive");
    }
    write_json(&out.join("report.json"), &report)?;
    std::fs::write(out.join("report.csv"), report.metrics_csv())?;
    std::fs::write(out.join("dsc_hist.svg"), bench::dsc_histogram_svg(&report, cfg.bins)?)?;
    if cfg.timing {
        std::fs::write(out.join("latency.csv"), report.latency_csv())?;
    }
    Ok(report)
}

/// Parses `args` and runs the command; returns the process exit status.
pub fn run(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::Config as i32 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => a.resolve().and_then(|c| cmd_gen(&c).map(drop)),
        Command::Train(a) => a.resolve().and_then(|c| cmd_train(&c).map(drop)),
        Command::Eval(a) => a.resolve().and_then(|c| cmd_eval(&c).map(drop)),
        Command::Bench(a) => a.resolve().and_then(|c| cmd_bench(&c).map(drop)),
        Command::Report(a) => a.resolve().and_then(|c| cmd_report(&c).map(drop)),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code as i32
        }
    }
}
