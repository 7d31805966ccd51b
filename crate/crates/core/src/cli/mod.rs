//! The `flowrect` command line.
//!
//! Every command resolves its settings as defaults, then the `--config`
//! TOML file, then flags, and writes `manifest.json` beside its outputs.
//! `--replay <manifest>` re-runs a command with the recorded settings and
//! fails unless every output digest matches.
//!
//! Config keys mirror the run structs below; nested sections are TOML
//! tables, e.g. `[edit]` and `[edit.smpi]` for `flowrect edit`.

mod commands;
pub mod manifest;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::d_cache::{CacheDelta, DESK_DELTA};
use crate::error::{Error, Result};
use crate::experiments::{AblationRow, DeskSetup};
use crate::schedule::ScheduleKind;
use crate::train::data::{MotionFamily, ShapeFamily, SyntheticDatasetSpec};
use crate::train::TrainConfig;
use crate::vfr_sd::{EditConfig, SolverKind};
pub use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(
    name = "flowrect",
    version,
    about = "Inversion-free flow-matching video editing on synthetic clips"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate training clips and an editing suite.
    GenData(GenDataArgs),
    /// Train the toy flow model.
    Train(TrainArgs),
    /// Edit one clip.
    Edit(EditArgs),
    /// Score an edited clip.
    Eval(EvalArgs),
    /// Run the six-row component ablation over the suite.
    Ablate(AblateArgs),
    /// Convergence of analytic edits to the optimal-transport map.
    OtBench(OtBenchArgs),
    /// Source-evaluation savings against cache threshold.
    CacheBench(CacheBenchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Run directory for outputs and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with settings; flags take precedence.
    #[arg(long, conflicts_with = "replay")]
    pub config: Option<PathBuf>,
    /// Re-run with the settings of a manifest and compare output digests.
    #[arg(long)]
    pub replay: Option<PathBuf>,
}

fn list<T>() -> clap::builder::ValueParser
where
    T: std::str::FromStr + Clone + Send + Sync + 'static,
    <T as std::str::FromStr>::Err: Into<Box<dyn std::error::Error + Send + Sync>>,
{
    clap::builder::ValueParser::new(|s: &str| s.parse::<T>().map_err(Into::into))
}

#[derive(Debug, Clone, Default, Args)]
pub struct GenDataFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training clips.
    #[arg(long)]
    pub clips: Option<usize>,
    /// Editing cases.
    #[arg(long)]
    pub suite: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub radius: Option<usize>,
    #[arg(long)]
    pub max_speed: Option<i32>,
    #[arg(long, value_delimiter = ',', value_parser = list::<MotionFamily>())]
    pub motions: Option<Vec<MotionFamily>>,
    #[arg(long, value_delimiter = ',', value_parser = list::<ShapeFamily>())]
    pub shapes: Option<Vec<ShapeFamily>>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub flags: GenDataFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataRun {
    pub seed: u64,
    pub clips: usize,
    pub suite: usize,
    pub dataset: SyntheticDatasetSpec,
}

impl Default for GenDataRun {
    fn default() -> Self {
        let desk = DeskSetup::default();
        Self {
            seed: desk.seed,
            clips: desk.clips,
            suite: desk.suite,
            dataset: desk.dataset,
        }
    }
}

impl GenDataFlags {
    fn apply(&self, r: &mut GenDataRun) {
        set(&mut r.seed, self.seed);
        set(&mut r.clips, self.clips);
        set(&mut r.suite, self.suite);
        let d = &mut r.dataset;
        set(&mut d.size, self.size);
        set(&mut d.frames, self.frames);
        set(&mut d.num_classes, self.classes);
        set(&mut d.radius, self.radius);
        set(&mut d.max_speed, self.max_speed);
        set(&mut d.motions, self.motions.clone());
        set(&mut d.shapes, self.shapes.clone());
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Probability of dropping the condition of a sample.
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    /// Channels of the hidden layers.
    #[arg(long)]
    pub hidden: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    pub data: Option<PathBuf>,
    pub hidden: usize,
    pub time_features: usize,
    pub train: TrainConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            data: None,
            hidden: DeskSetup::default().hidden,
            time_features: 16,
            train: DeskSetup::default().train,
        }
    }
}

impl TrainFlags {
    fn apply(&self, r: &mut TrainRun) {
        set(&mut r.data, self.data.clone().map(Some));
        set(&mut r.hidden, self.hidden);
        let t = &mut r.train;
        set(&mut t.steps, self.steps);
        set(&mut t.learning_rate, self.learning_rate);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.dropout, self.dropout);
        set(&mut t.seed, self.seed);
        set(&mut t.beta1, self.beta1);
        set(&mut t.beta2, self.beta2);
        set(&mut t.checkpoint_interval, self.checkpoint_interval);
    }
}

/// Editing settings shared by edit, ablate and cache-bench.
#[derive(Debug, Clone, Default, Args)]
pub struct EditFlags {
    /// Rectification scale.
    #[arg(long)]
    pub lambda: Option<f32>,
    /// Classifier-free guidance scale.
    #[arg(long = "guidance")]
    pub guidance_scale: Option<f32>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// euler or heun.
    #[arg(long)]
    pub solver: Option<SolverKind>,
    /// Cache threshold: a number, `inf` or `off`.
    #[arg(long, allow_hyphen_values = true)]
    pub delta: Option<CacheDelta>,
    /// Same as `--delta off`.
    #[arg(long, conflicts_with = "delta")]
    pub no_cache: bool,
    /// Start time of the edit.
    #[arg(long)]
    pub t_max: Option<f32>,
    /// Embedding scale of the source frames in the target condition.
    #[arg(long)]
    pub beta: Option<f32>,
    /// Fresh-noise weight of the motion-correlated noise.
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub recursive_noise: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub symmetric_guidance: Option<bool>,
    /// Use the shifted schedule with this shift.
    #[arg(long)]
    pub shift: Option<f32>,
}

impl EditFlags {
    fn apply(&self, e: &mut EditConfig) {
        set(&mut e.lambda, self.lambda);
        set(&mut e.guidance_scale, self.guidance_scale);
        set(&mut e.num_steps, self.steps);
        set(&mut e.seed, self.seed);
        set(&mut e.solver, self.solver);
        set(&mut e.cache_delta, self.delta);
        if self.no_cache {
            e.cache_delta = CacheDelta::Off;
        }
        set(&mut e.smpi.t_max, self.t_max);
        set(&mut e.smpi.beta, self.beta);
        set(&mut e.smpi.alpha, self.alpha);
        set(&mut e.smpi.recursive_noise, self.recursive_noise);
        set(&mut e.symmetric_guidance, self.symmetric_guidance);
        set(&mut e.schedule, self.shift.map(|shift| ScheduleKind::Shifted { shift }));
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct EditInputFlags {
    /// Model checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Editing case (or clip) bundle from gen-data.
    #[arg(long)]
    pub src: Option<PathBuf>,
    /// Edited first frame as a `[C, H, W]` tensor; required for plain clips.
    #[arg(long)]
    pub edited: Option<PathBuf>,
    /// Target content token; required for plain clips.
    #[arg(long)]
    pub target_token: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub inputs: EditInputFlags,
    #[command(flatten)]
    pub flags: EditFlags,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditRun {
    pub model: Option<PathBuf>,
    pub src: Option<PathBuf>,
    pub edited: Option<PathBuf>,
    pub target_token: Option<usize>,
    pub edit: EditConfig,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalFlags {
    /// Edited clip written by `edit`.
    #[arg(long)]
    pub video: Option<PathBuf>,
    /// The editing case the clip came from.
    #[arg(long)]
    pub src: Option<PathBuf>,
    /// Clip to compute the MSE against; defaults to the case's ideal edit.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub flags: EvalFlags,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRun {
    pub video: Option<PathBuf>,
    pub src: Option<PathBuf>,
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SuiteFlags {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset directory with a `suite/` written by gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Use only the first N cases.
    #[arg(long)]
    pub cases: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub suite: SuiteFlags,
    /// Subset of rows, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = list::<AblationRow>())]
    pub rows: Option<Vec<AblationRow>>,
    #[command(flatten)]
    pub flags: EditFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateRun {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub cases: Option<usize>,
    pub rows: Vec<AblationRow>,
    pub edit: EditConfig,
}

impl Default for AblateRun {
    fn default() -> Self {
        Self {
            model: None,
            data: None,
            cases: None,
            rows: AblationRow::ALL.to_vec(),
            edit: EditConfig::default(),
        }
    }
}

#[derive(Debug, Args)]
pub struct OtBenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_delimiter = ',')]
    pub steps: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f32>>,
    #[arg(long, value_delimiter = ',', value_parser = list::<SolverKind>())]
    pub solvers: Option<Vec<SolverKind>>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OtBenchRun {
    pub steps: Vec<usize>,
    pub lambdas: Vec<f32>,
    pub solvers: Vec<SolverKind>,
    pub seed: u64,
}

impl Default for OtBenchRun {
    fn default() -> Self {
        Self {
            steps: vec![25, 50, 100, 200, 400],
            lambdas: vec![0.0, 0.5, 1.0],
            solvers: vec![SolverKind::Euler, SolverKind::Heun],
            seed: 0,
        }
    }
}

#[derive(Debug, Args)]
pub struct CacheBenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub suite: SuiteFlags,
    /// Thresholds to sweep, comma separated (numbers, `inf` or `off`).
    #[arg(long, value_delimiter = ',', value_parser = list::<CacheDelta>())]
    pub deltas: Option<Vec<CacheDelta>>,
    #[command(flatten)]
    pub flags: EditFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheBenchRun {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub cases: Option<usize>,
    pub deltas: Vec<CacheDelta>,
    /// Base settings; the cache threshold is swept.
    pub edit: EditConfig,
}

impl Default for CacheBenchRun {
    fn default() -> Self {
        Self {
            model: None,
            data: None,
            cases: None,
            deltas: [0.0, 0.1, DESK_DELTA, 1.0, f32::INFINITY]
                .map(CacheDelta::Threshold)
                .to_vec(),
            edit: EditConfig::default(),
        }
    }
}

impl SuiteFlags {
    fn apply(&self, model: &mut Option<PathBuf>, data: &mut Option<PathBuf>, cases: &mut Option<usize>) {
        set(model, self.model.clone().map(Some));
        set(data, self.data.clone().map(Some));
        set(cases, self.cases.map(Some));
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Defaults, then the config file, then `overlay`.
fn resolve<R: DeserializeOwned + Default>(config: Option<&Path>, overlay: impl FnOnce(&mut R)) -> Result<R> {
    let mut run = match config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?
        }
        None => R::default(),
    };
    overlay(&mut run);
    Ok(run)
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Error::Usage(format!("missing --{flag} (or `{flag}` in the config file)")))
}

/// A command with its settings resolved.
#[derive(Debug, Clone, PartialEq)]
pub enum Resolved {
    GenData(GenDataRun),
    Train(TrainRun),
    Edit(EditRun),
    Eval(EvalRun),
    Ablate(AblateRun),
    OtBench(OtBenchRun),
    CacheBench(CacheBenchRun),
}

impl Resolved {
    pub fn name(&self) -> &'static str {
        match self {
            Resolved::GenData(_) => "gen-data",
            Resolved::Train(_) => "train",
            Resolved::Edit(_) => "edit",
            Resolved::Eval(_) => "eval",
            Resolved::Ablate(_) => "ablate",
            Resolved::OtBench(_) => "ot-bench",
            Resolved::CacheBench(_) => "cache-bench",
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let v = match self {
            Resolved::GenData(r) => serde_json::to_value(r),
            Resolved::Train(r) => serde_json::to_value(r),
            Resolved::Edit(r) => serde_json::to_value(r),
            Resolved::Eval(r) => serde_json::to_value(r),
            Resolved::Ablate(r) => serde_json::to_value(r),
            Resolved::OtBench(r) => serde_json::to_value(r),
            Resolved::CacheBench(r) => serde_json::to_value(r),
        };
        v.expect("run settings serialize")
    }

    pub fn from_json(command: &str, v: serde_json::Value) -> Result<Self> {
        fn parse<R: DeserializeOwned>(v: serde_json::Value) -> Result<R> {
            serde_json::from_value(v).map_err(|e| Error::format(0, format!("manifest config: {e}")))
        }
        Ok(match command {
            "gen-data" => Resolved::GenData(parse(v)?),
            "train" => Resolved::Train(parse(v)?),
            "edit" => Resolved::Edit(parse(v)?),
            "eval" => Resolved::Eval(parse(v)?),
            "ablate" => Resolved::Ablate(parse(v)?),
            "ot-bench" => Resolved::OtBench(parse(v)?),
            "cache-bench" => Resolved::CacheBench(parse(v)?),
            other => return Err(Error::Usage(format!("unknown command `{other}` in manifest"))),
        })
    }
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::GenData(a) => &a.common,
            Command::Train(a) => &a.common,
            Command::Edit(a) => &a.common,
            Command::Eval(a) => &a.common,
            Command::Ablate(a) => &a.common,
            Command::OtBench(a) => &a.common,
            Command::CacheBench(a) => &a.common,
        }
    }

    /// Resolves defaults, the config file and flags.
    pub fn resolve(&self) -> Result<Resolved> {
        let config = self.common().config.as_deref();
        Ok(match self {
            Command::GenData(a) => Resolved::GenData(resolve(config, |r| a.flags.apply(r))?),
            Command::Train(a) => Resolved::Train(resolve(config, |r| a.flags.apply(r))?),
            Command::Edit(a) => Resolved::Edit(resolve(config, |r: &mut EditRun| {
                let i = &a.inputs;
                set(&mut r.model, i.model.clone().map(Some));
                set(&mut r.src, i.src.clone().map(Some));
                set(&mut r.edited, i.edited.clone().map(Some));
                set(&mut r.target_token, i.target_token.map(Some));
                a.flags.apply(&mut r.edit);
            })?),
            Command::Eval(a) => Resolved::Eval(resolve(config, |r: &mut EvalRun| {
                set(&mut r.video, a.flags.video.clone().map(Some));
                set(&mut r.src, a.flags.src.clone().map(Some));
                set(&mut r.reference, a.flags.reference.clone().map(Some));
            })?),
            Command::Ablate(a) => Resolved::Ablate(resolve(config, |r: &mut AblateRun| {
                a.suite.apply(&mut r.model, &mut r.data, &mut r.cases);
                set(&mut r.rows, a.rows.clone());
                a.flags.apply(&mut r.edit);
            })?),
            Command::OtBench(a) => Resolved::OtBench(resolve(config, |r: &mut OtBenchRun| {
                set(&mut r.steps, a.steps.clone());
                set(&mut r.lambdas, a.lambdas.clone());
                set(&mut r.solvers, a.solvers.clone());
                set(&mut r.seed, a.seed);
            })?),
            Command::CacheBench(a) => Resolved::CacheBench(resolve(config, |r: &mut CacheBenchRun| {
                a.suite.apply(&mut r.model, &mut r.data, &mut r.cases);
                set(&mut r.deltas, a.deltas.clone());
                a.flags.apply(&mut r.edit);
            })?),
        })
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Edit(_) => "edit",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::OtBench(_) => "ot-bench",
            Command::CacheBench(_) => "cache-bench",
        }
    }
}

/// Runs a parsed command and returns its manifest.
pub fn run(cli: &Cli) -> Result<RunManifest> {
    let common = cli.command.common();
    match &common.replay {
        Some(path) => {
            let recorded = RunManifest::load(path)?.command;
            if recorded != cli.command.name() {
                return Err(Error::Usage(format!(
                    "{} records a `{recorded}` run, not `{}`",
                    path.display(),
                    cli.command.name()
                )));
            }
            replay(path, &common.out)
        }
        None => {
            let resolved = cli.command.resolve()?;
            commands::execute(&resolved, &common.out)
        }
    }
}

/// Re-runs the command recorded in `manifest` into `out` and checks that
/// every output digest matches.
pub fn replay(manifest: &Path, out: &Path) -> Result<RunManifest> {
    let recorded = RunManifest::load(manifest)?;
    let changed = recorded.changed_inputs();
    if !changed.is_empty() {
        return Err(Error::Setup(format!(
            "inputs changed since the recorded run: {}",
            changed.join(", ")
        )));
    }
    let resolved = Resolved::from_json(&recorded.command, recorded.config.clone())?;
    let fresh = commands::execute(&resolved, out)?;
    let diff = recorded.output_differences(&fresh);
    if !diff.is_empty() {
        return Err(Error::Precondition(format!(
            "replay digests differ: {}",
            diff.join(", ")
        )));
    }
    Ok(fresh)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
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
    match run(&cli) {
        Ok(m) => {
            println!("wrote {} outputs and {}", m.outputs.len(), manifest::MANIFEST_FILE);
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests;
