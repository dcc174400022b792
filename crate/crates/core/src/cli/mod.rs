//! Command-line front end.
//!
//! Every command resolves its parameters as defaults ← `--config` JSON ←
//! explicit flags, writes the result to `<out>/run.json`, and then runs.
//! `replay` re-runs a `run.json` verbatim. Exit codes: 0 ok, 1 usage or
//! configuration, 2 data, 3 numeric.

mod commands;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::train::LrSchedule;

pub use commands::execute;

#[derive(Debug, Parser)]
#[command(name = "histonet", version, about = "Object counts and size histograms from synthetic ellipse scenes")]
pub struct Cli {
    /// Master seed for every random stream of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON object overriding command defaults; explicit flags still win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic ellipse dataset.
    Gen(GenArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint or a baseline.
    Eval(EvalArgs),
    /// Train on nested fractions of the data and compare.
    Ablate(AblateArgs),
    /// Run the gradient-check suite.
    Gradcheck(GradcheckArgs),
    /// Predict counts and histograms for images.
    Predict(PredictArgs),
    /// Run a staged score-head plan.
    Cellularity(CellularityArgs),
    /// Re-run a recorded run.json.
    Replay(ReplayArgs),
}

fn parse_switch(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected on or off, got '{s}'")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 256×256 with the full-size count and area moments.
    #[default]
    Table3,
    /// 64×64 with both moments scaled by 1/4.
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Chosen from the image side: 16 tiny, 64 desk, 256 paper.
    #[default]
    Auto,
    Tiny,
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Average,
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count_mean: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count_std: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub area_mean: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub area_std: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_center_distance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenParams {
    pub n: usize,
    pub preset: Preset,
    pub size: Option<usize>,
    pub count_mean: Option<f64>,
    pub count_std: Option<f64>,
    pub area_mean: Option<f64>,
    pub area_std: Option<f64>,
    pub min_center_distance: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            n: 100,
            preset: Preset::Table3,
            size: None,
            count_mean: None,
            count_std: None,
            area_mean: None,
            area_std: None,
            min_center_distance: 0.0,
        }
    }
}

/// Flags shared by every command that trains a network.
#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    /// Deep supervision side heads: on or off.
    #[arg(long, value_parser = parse_switch)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dsn: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Geometric, noise, and contrast augmentation: on or off.
    #[arg(long, value_parser = parse_switch)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augment: Option<bool>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arch: Option<Arch>,
    /// Histogram range; defaults to the dataset's generator setting.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_max: Option<f64>,
    /// Learning-rate schedule: constant or cosine.
    #[arg(long, value_parser = parse_schedule)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<LrSchedule>,
}

fn parse_schedule(s: &str) -> std::result::Result<LrSchedule, String> {
    match s {
        "constant" => Ok(LrSchedule::Constant),
        "cosine" => Ok(LrSchedule::Cosine),
        _ => Err(format!("expected constant or cosine, got '{s}'")),
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_frac: Option<f64>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub data: PathBuf,
    pub bins: usize,
    pub dsn: bool,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub augment: bool,
    pub arch: Arch,
    pub s_max: Option<f64>,
    pub schedule: LrSchedule,
    pub val_frac: f64,
    pub max_steps: Option<usize>,
    pub init: Option<PathBuf>,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            data: PathBuf::new(),
            bins: 8,
            dsn: false,
            epochs: 10,
            batch: 4,
            lr: 1e-3,
            augment: true,
            arch: Arch::Auto,
            s_max: None,
            schedule: LrSchedule::Constant,
            val_frac: 0.0,
            max_steps: None,
            init: None,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ckpt: Option<PathBuf>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Baseline>,
    /// Data the baseline is fitted on; defaults to --data.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_max: Option<f64>,
    /// Per-image histogram plots: on or off.
    #[arg(long, value_parser = parse_switch)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub svg: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    pub data: PathBuf,
    pub ckpt: Option<PathBuf>,
    pub baseline: Option<Baseline>,
    pub fit_data: Option<PathBuf>,
    pub bins: Option<usize>,
    pub s_max: Option<f64>,
    pub svg: bool,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self { data: PathBuf::new(), ckpt: None, baseline: None, fit_data: None, bins: None, s_max: None, svg: true }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    /// Training data; fractions are taken of this set.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Held-out evaluation data.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fractions: Option<Vec<f64>>,
    #[command(flatten)]
    #[serde(flatten)]
    pub fit: FitArgs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateParams {
    pub data: PathBuf,
    pub test: PathBuf,
    pub fractions: Vec<f64>,
    pub bins: usize,
    pub dsn: bool,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub augment: bool,
    pub arch: Arch,
    pub s_max: Option<f64>,
    pub schedule: LrSchedule,
}

impl Default for AblateParams {
    fn default() -> Self {
        let t = TrainParams::default();
        Self {
            data: PathBuf::new(),
            test: PathBuf::new(),
            fractions: vec![0.25, 0.5, 0.75, 1.0],
            bins: t.bins,
            dsn: t.dsn,
            epochs: t.epochs,
            batch: t.batch,
            lr: t.lr,
            augment: t.augment,
            arch: t.arch,
            s_max: None,
            schedule: t.schedule,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    /// Check at most this many coordinates of each model instead of all.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_coords: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckParams {
    pub max_coords: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ckpt: Option<PathBuf>,
    /// PGM image; repeatable.
    #[arg(long = "image")]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<PathBuf>,
    /// Dataset directory; its annotations are drawn as targets.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictParams {
    pub ckpt: PathBuf,
    pub images: Vec<PathBuf>,
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct CellularityArgs {
    /// JSON list of {stage, epochs, dataset_dir, trainable}.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<PathBuf>,
    /// Held-out data for score evaluation.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    #[arg(long, value_parser = parse_switch)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dsn: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long, value_parser = parse_switch)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augment: Option<bool>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arch: Option<Arch>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_max: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_width: Option<usize>,
    /// Total object area that maps to a score of 1.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a_ref: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellularityParams {
    pub plan: PathBuf,
    pub test: Option<PathBuf>,
    pub bins: usize,
    pub dsn: bool,
    pub batch: usize,
    pub lr: f64,
    pub augment: bool,
    pub arch: Arch,
    pub s_max: Option<f64>,
    pub head_width: usize,
    pub a_ref: Option<f64>,
}

impl Default for CellularityParams {
    fn default() -> Self {
        let t = TrainParams::default();
        Self {
            plan: PathBuf::new(),
            test: None,
            bins: t.bins,
            dsn: t.dsn,
            batch: t.batch,
            lr: t.lr,
            augment: t.augment,
            arch: t.arch,
            s_max: None,
            head_width: 16,
            a_ref: None,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ReplayArgs {
    /// A run.json written by an earlier run.
    pub run: PathBuf,
}

/// Fully resolved invocation, written to `<out>/run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub out: PathBuf,
    pub params: Value,
}

pub const RUN_FILE: &str = "run.json";

fn read_json(path: &Path) -> Result<Value> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::data(path, e.to_string()))
}

fn merge(base: &mut Map<String, Value>, over: &Map<String, Value>) {
    for (k, v) in over {
        base.insert(k.clone(), v.clone());
    }
}

/// Defaults, then the config object, then explicit flags.
fn resolve<P: Serialize + DeserializeOwned + Default>(file: &Map<String, Value>, flags: &impl Serialize) -> Result<P> {
    let to_map = |v: Value| match v {
        Value::Object(m) => m,
        _ => Map::new(),
    };
    let mut m = to_map(serde_json::to_value(P::default()).map_err(|e| Error::Config(e.to_string()))?);
    merge(&mut m, file);
    merge(&mut m, &to_map(serde_json::to_value(flags).map_err(|e| Error::Config(e.to_string()))?));
    serde_json::from_value(Value::Object(m)).map_err(|e| Error::Config(format!("invalid parameters: {e}")))
}

fn params_value(p: &impl Serialize) -> Result<Value> {
    serde_json::to_value(p).map_err(|e| Error::Config(e.to_string()))
}

/// Turns parsed arguments into a resolved run. `replay` yields the stored run
/// with `--out` (if given) replacing its output directory.
pub fn resolve_run(cli: &Cli) -> Result<(RunConfig, Option<PathBuf>)> {
    let mut file = match &cli.config {
        Some(path) => match read_json(path)? {
            Value::Object(m) => m,
            _ => return Err(Error::Config(format!("{} must hold a JSON object", path.display()))),
        },
        None => Map::new(),
    };
    let file_seed = file.remove("seed").map(|v| v.as_u64().ok_or_else(|| Error::Config("config seed must be an unsigned integer".into())));
    let file_out = file.remove("out").map(|v| v.as_str().map(PathBuf::from).ok_or_else(|| Error::Config("config out must be a string".into())));
    let seed = match (cli.seed, file_seed) {
        (Some(s), _) => s,
        (None, Some(s)) => s?,
        (None, None) => 0,
    };
    let out = match (&cli.out, file_out) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => o?,
        (None, None) => PathBuf::from("out"),
    };
    let (command, params) = match &cli.command {
        Command::Gen(a) => ("gen", params_value(&resolve::<GenParams>(&file, a)?)?),
        Command::Train(a) => ("train", params_value(&resolve::<TrainParams>(&file, a)?)?),
        Command::Eval(a) => ("eval", params_value(&resolve::<EvalParams>(&file, a)?)?),
        Command::Ablate(a) => ("ablate", params_value(&resolve::<AblateParams>(&file, a)?)?),
        Command::Gradcheck(a) => ("gradcheck", params_value(&resolve::<GradcheckParams>(&file, a)?)?),
        Command::Predict(a) => ("predict", params_value(&resolve::<PredictParams>(&file, a)?)?),
        Command::Cellularity(a) => ("cellularity", params_value(&resolve::<CellularityParams>(&file, a)?)?),
        Command::Replay(a) => {
            let stored: RunConfig = serde_json::from_value(read_json(&a.run)?).map_err(|e| Error::data(&a.run, e.to_string()))?;
            let original = stored.out.clone();
            let run = RunConfig { out: cli.out.clone().unwrap_or_else(|| original.clone()), ..stored };
            return Ok((run, Some(original)));
        }
    };
    Ok((RunConfig { command: command.to_string(), seed, out, params }, None))
}

/// Parses `args` and runs; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match resolve_run(&cli).and_then(|(run, original)| execute(&run, original.as_deref())) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
