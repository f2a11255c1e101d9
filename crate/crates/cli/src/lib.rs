//! Command-line front end for the bimodal toolkit.

pub mod config;
pub mod jobs;
pub mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bimodal_core::autodiff::checkpoint::DType;
use bimodal_core::curation::{GateProfile, WindowMode};
use bimodal_core::engine::{OptimizerGroups, TrainConfig, TrainPhase};
use bimodal_core::guidance::GuidanceMode;
use bimodal_core::model::{ExpertConfig, ModelConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{layered, FileConfig};
use jobs::*;
use manifest::{config_hash, digest_file, sha256_hex, FileDigest, RunManifest, MANIFEST_FILE};

pub const OUT_ENV: &str = "BIMODAL_OUT";
const DEFAULT_OUT: &str = "bimodal-out";

#[derive(Debug, Parser)]
#[command(name = "bimodal", version, about = "Toy joint video/audio flow matching: train, sample, score, curate, rate")]
pub struct Cli {
    /// Output directory [default: $BIMODAL_OUT or ./bimodal-out]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for every stochastic step of the run [default: config `seed` or 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML config; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log more (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Do not print the run summary
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a dual-tower model on synthetic scenes
    Train(TrainArgs),
    /// Generate latent pairs from a trained model
    Sample(SampleArgs),
    /// Finite-difference check of the full model loss
    Gradcheck(GradcheckArgs),
    /// Write synthetic scenes and their latent pairs
    Synth(SynthArgs),
    /// Score onset agreement of latent pairs
    Syncscore(SyncscoreArgs),
    /// Cut fixed-length speech windows from clip timelines
    Window(WindowArgs),
    /// Apply quality gates to metric records
    Gate(GateArgs),
    /// Retention and gate summary report
    Report(ReportArgs),
    /// Elo ratings with bootstrap intervals from pairwise votes
    Elo(EloArgs),
    /// Concatenated minimum-permutation character error rate
    Cpcer(CpcerArgs),
    /// Bridge ablation and s_B sweep
    Sweep(SweepArgs),
    /// Re-run a recorded manifest and verify its outputs
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PhaseArg {
    Phase1,
    Phase2,
    Phase3,
}

impl From<PhaseArg> for TrainPhase {
    fn from(p: PhaseArg) -> Self {
        match p {
            PhaseArg::Phase1 => TrainPhase::Phase1,
            PhaseArg::Phase2 => TrainPhase::Phase2,
            PhaseArg::Phase3 => TrainPhase::Phase3,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GuidanceArg {
    Dual,
    TextOnly,
    TextModality,
    Swapped,
}

impl From<GuidanceArg> for GuidanceMode {
    fn from(g: GuidanceArg) -> Self {
        match g {
            GuidanceArg::Dual => GuidanceMode::Dual,
            GuidanceArg::TextOnly => GuidanceMode::TextOnly,
            GuidanceArg::TextModality => GuidanceMode::TextModality,
            GuidanceArg::Swapped => GuidanceMode::Swapped,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Multi,
    Single,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProfileArg {
    Stage2,
    Speech,
    Phase2,
}

/// Model shape flags shared by several subcommands.
#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Two-layer model for quick runs
    #[arg(long)]
    pub tiny: bool,
    /// Split the video tower into high/low-noise experts at this time
    #[arg(long)]
    pub t_split: Option<f64>,
}

impl ModelArgs {
    fn apply(&self, m: &mut ModelConfig) {
        if self.tiny {
            let zero_init = m.zero_init;
            *m = ModelConfig::tiny();
            m.zero_init = zero_init;
        }
        if let Some(t) = self.t_split {
            m.experts = Some(ExpertConfig { t_split: t });
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Start from a curriculum phase preset
    #[arg(long, value_enum)]
    pub phase: Option<PhaseArg>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Backbone learning rate; the bridge uses twice this
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub shift_v: Option<f64>,
    #[arg(long)]
    pub shift_a: Option<f64>,
    #[arg(long)]
    pub p_drop_text: Option<f64>,
    #[arg(long)]
    pub p_drop_bridge: Option<f64>,
    #[arg(long)]
    pub lambda_a: Option<f64>,
    /// Alternate high/low-noise expert updates (needs --t-split)
    #[arg(long)]
    pub alternate_experts: bool,
    /// Store the checkpoint in 32-bit floats
    #[arg(long)]
    pub f32: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Model config JSON [default: model.json beside the checkpoint]
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long = "s-b")]
    pub s_b: Option<f64>,
    #[arg(long = "s-t")]
    pub s_t: Option<f64>,
    #[arg(long, value_enum)]
    pub guidance: Option<GuidanceArg>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub shift_v: Option<f64>,
    #[arg(long)]
    pub shift_a: Option<f64>,
    /// Comma-separated prompt token ids
    #[arg(long, value_delimiter = ',')]
    pub prompt: Option<Vec<usize>>,
    /// Sample with the bridge disabled
    #[arg(long)]
    pub no_bridge: bool,
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub per_param: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SyncscoreArgs {
    /// Checkpoint-format file with x_v.N / x_a.N pairs
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WindowArgs {
    /// JSONL of {clip_id, segments, splits}
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Never start a window before the previous one ends
    #[arg(long)]
    pub clamp: bool,
}

#[derive(Debug, Args)]
pub struct GateArgs {
    /// JSONL of metric records
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub profile: Option<ProfileArg>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// JSON list of {stage, count}, raw first
    #[arg(long)]
    pub stages: Option<PathBuf>,
    /// JSONL of metric records
    #[arg(long)]
    pub records: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EloArgs {
    /// JSONL of {model_a, model_b, outcome}
    #[arg(long)]
    pub votes: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CpcerArgs {
    /// JSONL of {id, speakers: {tag: text}}
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    #[arg(long = "hyp")]
    pub hypothesis: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Evaluate this checkpoint instead of training
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long = "s-t")]
    pub s_t: Option<f64>,
    #[arg(long = "s-b", value_delimiter = ',')]
    pub s_b: Option<Vec<f64>>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub eval_scenes: Option<usize>,
    #[arg(long)]
    pub sample_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

/// Parses `argv` (program name first), runs, and returns the exit code:
/// 0 on success, 1 on a failed run, 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    let recorded: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli, recorded) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn dispatch(cli: Cli, argv: Vec<String>) -> Result<()> {
    let out = out_dir(cli.out);
    let quiet = cli.quiet;
    if let Command::Replay(r) = &cli.command {
        return replay(&r.manifest, &out, quiet);
    }
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let explicit_seed = cli.seed.or(file.seed()?);
    let seed = explicit_seed.unwrap_or(0);
    let job = resolve(&cli.command, &file, seed, explicit_seed.is_some())?;
    let m = RunManifest {
        tool: "bimodal".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: job.name().into(),
        argv,
        seed,
        config_hash: config_hash(&job)?,
        inputs: job.inputs().iter().map(|p| digest_file(p)).collect::<Result<_>>()?,
        outputs: Vec::new(),
        job,
    };
    execute_and_write(m, &out, quiet).map(|_| ())
}

/// Runs the manifest's job, writes its outputs and the completed manifest
/// into `out`, and returns the manifest.
fn execute_and_write(mut m: RunManifest, out: &Path, quiet: bool) -> Result<RunManifest> {
    log::info!("{} -> {}", m.command, out.display());
    let a = m.job.execute()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    m.outputs.clear();
    for (name, bytes) in &a.files {
        std::fs::write(out.join(name), bytes).with_context(|| format!("writing {name}"))?;
        m.outputs.push(FileDigest {
            path: name.clone(),
            sha256: sha256_hex(bytes),
        });
    }
    std::fs::write(out.join(MANIFEST_FILE), m.to_bytes()?)?;
    if !quiet {
        print!("{}", a.summary);
    }
    if let Some(f) = a.failure {
        bail!(f);
    }
    Ok(m)
}

fn replay(path: &Path, out: &Path, quiet: bool) -> Result<()> {
    let recorded = RunManifest::read(path)?;
    if out.join(MANIFEST_FILE) == path || out.canonicalize().ok() == path.parent().and_then(|p| p.canonicalize().ok()) {
        bail!("replay needs an output directory other than the recorded one");
    }
    for d in &recorded.inputs {
        let now = digest_file(Path::new(&d.path))?;
        if now.sha256 != d.sha256 {
            bail!("input {} changed since the recorded run", d.path);
        }
    }
    if config_hash(&recorded.job)? != recorded.config_hash {
        bail!("manifest job does not match its config hash");
    }
    let fresh = execute_and_write(recorded.clone(), out, quiet)?;
    for (a, b) in recorded.outputs.iter().zip(&fresh.outputs) {
        if a != b {
            bail!("output {} differs from the recorded run", a.path);
        }
    }
    if recorded.outputs.len() != fresh.outputs.len() {
        bail!("replay produced a different set of outputs");
    }
    Ok(())
}

fn model_from(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Explicit model config, else `model.json` beside the checkpoint, else
/// the current value.
fn model_for_checkpoint(explicit: Option<&PathBuf>, checkpoint: &Path, current: ModelConfig) -> Result<ModelConfig> {
    if let Some(p) = explicit {
        return model_from(p);
    }
    let sibling = checkpoint.with_file_name("model.json");
    if sibling.exists() {
        return model_from(&sibling);
    }
    Ok(current)
}

fn required(p: Option<PathBuf>, current: PathBuf, flag: &str) -> Result<PathBuf> {
    match p {
        Some(p) => Ok(p),
        None if !current.as_os_str().is_empty() => Ok(current),
        None => bail!("missing --{flag}"),
    }
}

fn set<T: Copy>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn resolve(cmd: &Command, file: &FileConfig, seed: u64, explicit_seed: bool) -> Result<Job> {
    Ok(match cmd {
        Command::Train(a) => {
            let mut j: TrainJob = layered(&TrainJob::default(), file.section("train"), "train")?;
            a.model.apply(&mut j.model);
            if let Some(p) = a.phase {
                let preset = TrainConfig::preset(p.into());
                j.trainer.shift_v = preset.shift_v;
                j.trainer.shift_a = preset.shift_a;
                j.trainer.p_drop_text = preset.p_drop_text;
            }
            let t = &mut j.trainer;
            set(&mut t.steps, a.steps);
            set(&mut t.batch, a.batch);
            set(&mut t.shift_v, a.shift_v);
            set(&mut t.shift_a, a.shift_a);
            set(&mut t.p_drop_text, a.p_drop_text);
            set(&mut t.p_drop_bridge, a.p_drop_bridge);
            set(&mut t.lambda_a, a.lambda_a);
            if let Some(lr) = a.lr {
                let moments = t.optimizer.moments;
                t.optimizer = OptimizerGroups { moments, ..OptimizerGroups::with_backbone_lr(lr) };
            }
            t.alternate_experts |= a.alternate_experts;
            t.seed = seed;
            if a.f32 {
                j.dtype = DType::F32;
            }
            Job::Train(j)
        }
        Command::Sample(a) => {
            let mut j: SampleJob = layered(&SampleJob::default(), file.section("sample"), "sample")?;
            j.checkpoint = required(a.checkpoint.clone(), j.checkpoint, "checkpoint")?;
            j.model = model_for_checkpoint(a.model_config.as_ref(), &j.checkpoint, j.model)?;
            let s = &mut j.sampler;
            set(&mut s.s_b, a.s_b);
            set(&mut s.s_t, a.s_t);
            set(&mut s.n_steps, a.steps);
            set(&mut s.shift_v, a.shift_v);
            set(&mut s.shift_a, a.shift_a);
            if let Some(g) = a.guidance {
                s.mode = g.into();
            }
            if let Some(p) = &a.prompt {
                j.prompt = p.clone();
            }
            j.bridge &= !a.no_bridge;
            set(&mut j.count, a.count);
            j.seed = seed;
            Job::Sample(j)
        }
        Command::Gradcheck(a) => {
            let mut j: GradcheckJob = layered(&GradcheckJob::default(), file.section("gradcheck"), "gradcheck")?;
            a.model.apply(&mut j.model);
            set(&mut j.per_param, a.per_param);
            set(&mut j.eps, a.eps);
            set(&mut j.tolerance, a.tolerance);
            j.seed = seed;
            Job::Gradcheck(j)
        }
        Command::Synth(a) => {
            let mut j: SynthJob = layered(&SynthJob::default(), file.section("synth"), "synth")?;
            set(&mut j.count, a.count);
            set(&mut j.synth.noise_std, a.noise_std);
            j.seed = seed;
            Job::Synth(j)
        }
        Command::Syncscore(a) => {
            let mut j: SyncscoreJob = layered(&SyncscoreJob::default(), file.section("syncscore"), "syncscore")?;
            j.input = required(a.input.clone(), j.input, "input")?;
            Job::Syncscore(j)
        }
        Command::Window(a) => {
            let mut j: WindowJob = layered(&WindowJob::default(), file.section("window"), "window")?;
            j.input = required(a.input.clone(), j.input, "input")?;
            if let Some(m) = a.mode {
                j.mode = match m {
                    ModeArg::Multi => WindowMode::Multi,
                    ModeArg::Single => WindowMode::Single,
                };
            }
            j.options.clamp_to_previous_window |= a.clamp;
            j.seed = seed;
            Job::Window(j)
        }
        Command::Gate(a) => {
            let mut j: GateJob = layered(&GateJob::default(), file.section("gate"), "gate")?;
            j.input = required(a.input.clone(), j.input, "input")?;
            if let Some(p) = a.profile {
                j.profile = match p {
                    ProfileArg::Stage2 => GateProfile::Stage2,
                    ProfileArg::Speech => GateProfile::Speech,
                    ProfileArg::Phase2 => GateProfile::Phase2,
                };
            }
            Job::Gate(j)
        }
        Command::Report(a) => {
            let mut j: ReportJob = layered(&ReportJob::default(), file.section("report"), "report")?;
            if a.stages.is_some() {
                j.stages = a.stages.clone();
            }
            if a.records.is_some() {
                j.records = a.records.clone();
            }
            Job::Report(j)
        }
        Command::Elo(a) => {
            let mut j: EloJob = layered(&EloJob::default(), file.section("elo"), "elo")?;
            j.votes = required(a.votes.clone(), j.votes, "votes")?;
            set(&mut j.elo.bootstrap_iters, a.iters);
            j.elo.seed = seed;
            Job::Elo(j)
        }
        Command::Cpcer(a) => {
            let mut j: CpcerJob = layered(&CpcerJob::default(), file.section("cpcer"), "cpcer")?;
            j.reference = required(a.reference.clone(), j.reference, "ref")?;
            j.hypothesis = required(a.hypothesis.clone(), j.hypothesis, "hyp")?;
            Job::Cpcer(j)
        }
        Command::Sweep(a) => {
            let mut j: SweepJob = layered(&SweepJob::default(), file.section("sweep"), "sweep")?;
            if a.checkpoint.is_some() {
                j.checkpoint = a.checkpoint.clone();
            }
            let e = &mut j.experiment;
            if let Some(c) = &j.checkpoint {
                e.model = model_for_checkpoint(a.model_config.as_ref(), c, e.model.clone())?;
            }
            a.model.apply(&mut e.model);
            set(&mut e.s_t, a.s_t);
            set(&mut e.train.steps, a.steps);
            set(&mut e.eval_scenes, a.eval_scenes);
            set(&mut e.sample_steps, a.sample_steps);
            if let Some(s) = &a.s_b {
                e.s_b_values = s.clone();
            }
            if let Some(s) = &a.seeds {
                e.seeds = s.clone();
            }
            if explicit_seed {
                e.eval_seed = seed;
            }
            Job::Sweep(j)
        }
        Command::Replay(_) => unreachable!("handled before resolution"),
    })
}
