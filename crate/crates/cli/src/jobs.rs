//! Fully resolved subcommand configurations and their execution.
//!
//! A job carries every value that influences its outputs, so running the
//! same job again yields the same bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bimodal_core::autodiff::checkpoint::{self, DType};
use bimodal_core::curation::{
    apply_gates, gate_summary, retention_report, windows_for_clip, ClipTimeline, GateProfile,
    MetricRecord, StageCount, WindowMode, WindowOptions,
};
use bimodal_core::engine::experiment::{
    eval_scenes, evaluate_seed, median, run_sync_experiment, summarize, SyncExperimentConfig,
    SyncExperimentReport,
};
use bimodal_core::engine::{
    sample, sync_score, synth_pair, DetectorConfig, EventScene, SampleConfig, SyncOutcome,
    SynthConfig, TrainConfig, Trainer,
};
use bimodal_core::metrics::{bootstrap_ci, cpcer, elo_ratings, win_rate_matrix, EloConfig, SpeakerTranscript, Vote};
use bimodal_core::model::{composed_grad_check, ConditionSet, DualTower, GradProbe, ModelConfig};
use bimodal_core::rope::TimeGrid;
use bimodal_core::schedule::LossWeights;
use bimodal_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainJob {
    pub model: ModelConfig,
    pub trainer: TrainConfig,
    pub dtype: DType,
}

impl Default for TrainJob {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            trainer: TrainConfig::default(),
            dtype: DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleJob {
    pub checkpoint: PathBuf,
    pub model: ModelConfig,
    pub sampler: SampleConfig,
    pub prompt: Vec<usize>,
    pub bridge: bool,
    pub count: usize,
    pub seed: u64,
}

impl Default for SampleJob {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::new(),
            model: ModelConfig::default(),
            sampler: SampleConfig::default(),
            prompt: vec![0],
            bridge: true,
            count: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckJob {
    pub model: ModelConfig,
    /// Coordinates probed per parameter tensor.
    pub per_param: usize,
    pub eps: f64,
    pub tolerance: f64,
    /// Use a random initialization instead of the zero-gated one, so every
    /// parameter receives a gradient.
    pub random_init: bool,
    pub seed: u64,
}

impl Default for GradcheckJob {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            per_param: 3,
            eps: 1e-5,
            tolerance: 1e-4,
            random_init: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthJob {
    pub synth: SynthConfig,
    pub grid: TimeGrid,
    pub count: usize,
    pub seed: u64,
}

impl Default for SynthJob {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            grid: TimeGrid::default(),
            count: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyncscoreJob {
    pub input: PathBuf,
    pub grid: TimeGrid,
    pub detector: DetectorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowJob {
    pub input: PathBuf,
    pub mode: WindowMode,
    pub options: WindowOptions,
    pub seed: u64,
}

impl Default for WindowJob {
    fn default() -> Self {
        Self {
            input: PathBuf::new(),
            mode: WindowMode::Multi,
            options: WindowOptions::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateJob {
    pub input: PathBuf,
    pub profile: GateProfile,
}

impl Default for GateJob {
    fn default() -> Self {
        Self {
            input: PathBuf::new(),
            profile: GateProfile::Stage2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportJob {
    /// JSON list of `{stage, count}` in pipeline order.
    pub stages: Option<PathBuf>,
    /// JSONL metric records summarized per gate profile.
    pub records: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EloJob {
    pub votes: PathBuf,
    pub elo: EloConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CpcerJob {
    pub reference: PathBuf,
    pub hypothesis: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepJob {
    pub experiment: SyncExperimentConfig,
    /// Evaluate this trained model instead of training one per seed.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Job {
    Train(TrainJob),
    Sample(SampleJob),
    Gradcheck(GradcheckJob),
    Synth(SynthJob),
    Syncscore(SyncscoreJob),
    Window(WindowJob),
    Gate(GateJob),
    Report(ReportJob),
    Elo(EloJob),
    Cpcer(CpcerJob),
    Sweep(SweepJob),
}

/// Everything a job produced, before anything touches the disk.
#[derive(Debug, Default)]
pub struct Artifacts {
    pub files: Vec<(String, Vec<u8>)>,
    pub inputs: Vec<PathBuf>,
    /// Printed to stdout.
    pub summary: String,
    /// Set when the job ran to completion but its check did not pass.
    pub failure: Option<String>,
}

impl Artifacts {
    fn file(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        let mut b = serde_json::to_vec_pretty(v)?;
        b.push(b'\n');
        self.file(name, b);
        Ok(())
    }

    fn jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut b = Vec::new();
        for r in rows {
            serde_json::to_writer(&mut b, r)?;
            b.push(b'\n');
        }
        self.file(name, b);
        Ok(())
    }
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Train(_) => "train",
            Job::Sample(_) => "sample",
            Job::Gradcheck(_) => "gradcheck",
            Job::Synth(_) => "synth",
            Job::Syncscore(_) => "syncscore",
            Job::Window(_) => "window",
            Job::Gate(_) => "gate",
            Job::Report(_) => "report",
            Job::Elo(_) => "elo",
            Job::Cpcer(_) => "cpcer",
            Job::Sweep(_) => "sweep",
        }
    }

    /// Files the job reads; their digests go into the manifest.
    pub fn inputs(&self) -> Vec<PathBuf> {
        match self {
            Job::Sample(j) => vec![j.checkpoint.clone()],
            Job::Syncscore(j) => vec![j.input.clone()],
            Job::Window(j) => vec![j.input.clone()],
            Job::Gate(j) => vec![j.input.clone()],
            Job::Report(j) => j.stages.iter().chain(j.records.iter()).cloned().collect(),
            Job::Elo(j) => vec![j.votes.clone()],
            Job::Cpcer(j) => vec![j.reference.clone(), j.hypothesis.clone()],
            Job::Sweep(j) => j.checkpoint.iter().cloned().collect(),
            Job::Train(_) | Job::Gradcheck(_) | Job::Synth(_) => Vec::new(),
        }
    }

    pub fn execute(&self) -> Result<Artifacts> {
        let mut a = match self {
            Job::Train(j) => train(j),
            Job::Sample(j) => sample_job(j),
            Job::Gradcheck(j) => gradcheck(j),
            Job::Synth(j) => synth(j),
            Job::Syncscore(j) => syncscore(j),
            Job::Window(j) => window(j),
            Job::Gate(j) => gate(j),
            Job::Report(j) => report(j),
            Job::Elo(j) => elo(j),
            Job::Cpcer(j) => cpcer_job(j),
            Job::Sweep(j) => sweep(j),
        }?;
        a.inputs = self.inputs();
        Ok(a)
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{}:{}: invalid record", path.display(), i + 1))
        })
        .collect()
}

fn train(j: &TrainJob) -> Result<Artifacts> {
    let mut init = ChaCha8Rng::seed_from_u64(j.trainer.seed);
    let model = DualTower::new(j.model.clone(), &mut init)?;
    let mut trainer = Trainer::new(model, j.trainer.clone())?;
    let mut log = Vec::new();
    let stats = trainer.run(Some(&mut log))?;
    let mut a = Artifacts::default();
    a.file("model.ckpt", trainer.model.params().to_checkpoint_bytes(j.dtype)?);
    a.json("model.json", &j.model)?;
    a.file("train_log.jsonl", log);
    let losses: Vec<f64> = stats.iter().map(|s| s.loss).collect();
    let k = (losses.len() / 10).max(1);
    a.summary = match losses.len() {
        0 => "trained 0 steps\n".into(),
        n => format!(
            "trained {n} steps, {} parameters; median loss {:.5} -> {:.5}\n",
            trainer.model.parameter_count(),
            median(&losses[..k]),
            median(&losses[n - k..])
        ),
    };
    Ok(a)
}

fn load_model(cfg: &ModelConfig, checkpoint: &Path) -> Result<DualTower> {
    let mut model = DualTower::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    model
        .load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    Ok(model)
}

fn pair_name(stream: &str, i: usize) -> String {
    format!("{stream}.{i}")
}

fn sample_job(j: &SampleJob) -> Result<Artifacts> {
    if j.count == 0 {
        bail!("count must be positive");
    }
    let model = load_model(&j.model, &j.checkpoint)?;
    let cond = ConditionSet::text(j.prompt.clone()).with_bridge(j.bridge);
    let mut rng = ChaCha8Rng::seed_from_u64(j.seed);
    let mut outs = Vec::with_capacity(j.count);
    for _ in 0..j.count {
        outs.push(sample(&model, &cond, &j.sampler, &mut rng)?);
    }
    let names: Vec<(String, String)> = (0..j.count).map(|i| (pair_name("x_v", i), pair_name("x_a", i))).collect();
    let mut entries: Vec<(String, &Tensor)> = Vec::new();
    for (o, (nv, na)) in outs.iter().zip(&names) {
        entries.push((nv.clone(), &o.x_v));
        entries.push((na.clone(), &o.x_a));
    }
    let mut a = Artifacts::default();
    a.file("samples.ckpt", checkpoint::to_bytes(&entries, DType::F64)?);
    a.summary = format!("wrote {} samples, {} evaluations each\n", j.count, outs[0].nfe);
    Ok(a)
}

#[derive(Serialize)]
struct GradcheckOut<'a> {
    max_rel_err: f64,
    worst: &'a str,
    tolerance: f64,
    pass: bool,
    parameters: usize,
}

fn gradcheck(j: &GradcheckJob) -> Result<Artifacts> {
    let mut cfg = j.model.clone();
    if j.random_init {
        cfg.zero_init = false;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(j.seed);
    let model = DualTower::new(cfg.clone(), &mut rng)?;
    let probe = GradProbe::random(&cfg, &mut rng);
    let (err, worst) = composed_grad_check(&model, &probe, LossWeights::default(), j.per_param, j.eps)?;
    let pass = err <= j.tolerance;
    let mut a = Artifacts::default();
    a.json(
        "gradcheck.json",
        &GradcheckOut {
            max_rel_err: err,
            worst: &worst,
            tolerance: j.tolerance,
            pass,
            parameters: model.parameter_count(),
        },
    )?;
    a.summary = format!("max rel. err {err:.3e} at {worst}\n");
    if !pass {
        a.failure = Some(format!("relative error {err:.3e} exceeds {:.1e}", j.tolerance));
    }
    Ok(a)
}

fn synth(j: &SynthJob) -> Result<Artifacts> {
    let mut rng = ChaCha8Rng::seed_from_u64(j.seed);
    let mut scenes = Vec::with_capacity(j.count);
    let mut pairs = Vec::with_capacity(j.count);
    for _ in 0..j.count {
        let scene = EventScene::random(&mut rng, &j.synth);
        pairs.push(synth_pair(&scene, &j.grid, &j.synth, &mut rng)?);
        scenes.push(scene);
    }
    let mut entries: Vec<(String, &Tensor)> = Vec::new();
    for (i, (v, au)) in pairs.iter().enumerate() {
        entries.push((pair_name("x_v", i), v));
        entries.push((pair_name("x_a", i), au));
    }
    let mut a = Artifacts::default();
    a.file("synth.ckpt", checkpoint::to_bytes(&entries, DType::F64)?);
    a.jsonl("scenes.jsonl", &scenes)?;
    a.summary = format!("wrote {} scenes\n", j.count);
    Ok(a)
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    index: usize,
    #[serde(flatten)]
    outcome: &'a SyncOutcome,
}

#[derive(Serialize)]
struct ScoreSummary {
    pairs: usize,
    scored: usize,
    /// Failures count as the full clip length.
    median_offset_error_s: f64,
    mean_event_f1: f64,
}

fn syncscore(j: &SyncscoreJob) -> Result<Artifacts> {
    let entries: BTreeMap<String, Tensor> = checkpoint::load(&j.input)
        .with_context(|| format!("reading {}", j.input.display()))?
        .into_iter()
        .collect();
    let mut outcomes = Vec::new();
    for i in 0.. {
        let (Some(v), Some(au)) = (entries.get(&pair_name("x_v", i)), entries.get(&pair_name("x_a", i))) else {
            break;
        };
        outcomes.push(sync_score(v, au, &j.grid, &j.detector));
    }
    if outcomes.is_empty() {
        bail!("{} holds no x_v.N / x_a.N pairs", j.input.display());
    }
    let rows: Vec<ScoreRow> = outcomes.iter().enumerate().map(|(index, outcome)| ScoreRow { index, outcome }).collect();
    let offsets: Vec<f64> = outcomes.iter().map(SyncOutcome::offset_or_max).collect();
    let f1: Vec<f64> = outcomes.iter().map(|o| o.report().map_or(0.0, |r| r.event_f1)).collect();
    let summary = ScoreSummary {
        pairs: outcomes.len(),
        scored: outcomes.iter().filter(|o| o.report().is_some()).count(),
        median_offset_error_s: median(&offsets),
        mean_event_f1: f1.iter().sum::<f64>() / f1.len() as f64,
    };
    let mut a = Artifacts::default();
    a.jsonl("scores.jsonl", &rows)?;
    a.json("summary.json", &summary)?;
    a.summary = format!(
        "{} pairs, {} scored; median offset {:.3} s, mean F1 {:.3}\n",
        summary.pairs, summary.scored, summary.median_offset_error_s, summary.mean_event_f1
    );
    Ok(a)
}

fn window(j: &WindowJob) -> Result<Artifacts> {
    let clips: Vec<ClipTimeline> = read_jsonl(&j.input)?;
    let out = clips
        .iter()
        .map(|c| windows_for_clip(c, j.mode, j.options, j.seed))
        .collect::<bimodal_core::Result<Vec<_>>>()?;
    let n: usize = out.iter().map(|c| c.windows.len()).sum();
    let mut a = Artifacts::default();
    a.jsonl("windows.jsonl", &out)?;
    a.summary = format!("{} clips, {n} windows\n", out.len());
    Ok(a)
}

#[derive(Serialize)]
struct GateSummaryOut {
    profile: GateProfile,
    records: usize,
    passed: usize,
    /// Failed-rule counts.
    reasons: BTreeMap<String, usize>,
}

fn gate(j: &GateJob) -> Result<Artifacts> {
    let records: Vec<MetricRecord> = read_jsonl(&j.input)?;
    let decisions: Vec<_> = records.iter().map(|r| apply_gates(r, j.profile)).collect();
    let mut reasons = BTreeMap::new();
    for d in &decisions {
        for r in &d.reasons {
            *reasons.entry(r.clone()).or_insert(0) += 1;
        }
    }
    let s = GateSummaryOut {
        profile: j.profile,
        records: records.len(),
        passed: decisions.iter().filter(|d| d.pass).count(),
        reasons,
    };
    let mut a = Artifacts::default();
    a.jsonl("decisions.jsonl", &decisions)?;
    a.json("gate_summary.json", &s)?;
    a.summary = format!("{} of {} records pass\n", s.passed, s.records);
    Ok(a)
}

#[derive(Serialize)]
struct ReportOut {
    #[serde(skip_serializing_if = "Option::is_none")]
    retention: Option<bimodal_core::curation::RetentionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gates: Option<BTreeMap<String, usize>>,
}

fn report(j: &ReportJob) -> Result<Artifacts> {
    if j.stages.is_none() && j.records.is_none() {
        bail!("report needs --stages and/or --records");
    }
    let retention = match &j.stages {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let stages: Vec<StageCount> = serde_json::from_str(&text)?;
            Some(retention_report(&stages)?)
        }
        None => None,
    };
    let gates = match &j.records {
        Some(p) => Some(gate_summary(&read_jsonl::<MetricRecord>(p)?)),
        None => None,
    };
    let mut summary = String::new();
    if let Some(r) = &retention {
        for (s, p) in r.stages.iter().zip(&r.percent) {
            writeln!(summary, "{:<24} {:>8.2}%", s.stage, p)?;
        }
    }
    if let Some(g) = &gates {
        for (k, v) in g {
            writeln!(summary, "{k:<24} {v:>8}")?;
        }
    }
    let mut a = Artifacts::default();
    a.json("report.json", &ReportOut { retention, gates })?;
    a.summary = summary;
    Ok(a)
}

#[derive(Serialize)]
struct EloOut {
    votes: usize,
    ratings: BTreeMap<String, f64>,
    intervals: BTreeMap<String, bimodal_core::metrics::RatingInterval>,
    win_rates: bimodal_core::metrics::WinRateMatrix,
}

fn elo(j: &EloJob) -> Result<Artifacts> {
    let votes: Vec<Vote> = read_jsonl(&j.votes)?;
    let ratings = elo_ratings(&votes, &j.elo)?;
    let intervals = bootstrap_ci(&votes, &j.elo)?;
    let mut summary = String::new();
    for (m, r) in &ratings {
        let ci = &intervals[m];
        writeln!(summary, "{m:<24} {r:>9.2}  [{:.2}, {:.2}]", ci.lo, ci.hi)?;
    }
    let mut a = Artifacts::default();
    a.json(
        "elo.json",
        &EloOut {
            votes: votes.len(),
            ratings,
            intervals,
            win_rates: win_rate_matrix(&votes),
        },
    )?;
    a.summary = summary;
    Ok(a)
}

#[derive(Deserialize)]
struct Utterance {
    id: String,
    speakers: SpeakerTranscript,
}

#[derive(Serialize)]
struct CpcerRow {
    id: String,
    cpcer: f64,
}

fn cpcer_job(j: &CpcerJob) -> Result<Artifacts> {
    let reference: Vec<Utterance> = read_jsonl(&j.reference)?;
    let hyp: BTreeMap<String, SpeakerTranscript> = read_jsonl::<Utterance>(&j.hypothesis)?
        .into_iter()
        .map(|u| (u.id, u.speakers))
        .collect();
    let empty = SpeakerTranscript::new();
    let rows = reference
        .iter()
        .map(|u| {
            let h = hyp.get(&u.id).unwrap_or(&empty);
            Ok(CpcerRow {
                id: u.id.clone(),
                cpcer: cpcer(&u.speakers, h).with_context(|| format!("utterance {}", u.id))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = rows.iter().map(|r| r.cpcer).sum::<f64>() / rows.len().max(1) as f64;
    let mut a = Artifacts::default();
    a.jsonl("cpcer.jsonl", &rows)?;
    a.json("cpcer_summary.json", &serde_json::json!({"utterances": rows.len(), "mean_cpcer": mean}))?;
    a.summary = format!("{} utterances, mean cpCER {mean:.4}\n", rows.len());
    Ok(a)
}

fn sweep_table(r: &SyncExperimentReport) -> Result<String> {
    let mut t = String::new();
    writeln!(t, "| s_B | median offset_error_s | mean event_f1 | failures |")?;
    writeln!(t, "|---|---|---|---|")?;
    let stats = |pick: &dyn Fn(&bimodal_core::engine::experiment::SeedReport) -> &Vec<SyncOutcome>| {
        let all: Vec<&SyncOutcome> = r.seeds.iter().flat_map(|s| pick(s).iter()).collect();
        let f1 = all.iter().map(|o| o.report().map_or(0.0, |x| x.event_f1)).sum::<f64>() / all.len().max(1) as f64;
        let fails = all.iter().filter(|o| o.report().is_none()).count();
        (f1, fails)
    };
    let (f1, fails) = stats(&|s| &s.no_bridge);
    writeln!(t, "| no bridge | {:.3} | {f1:.3} | {fails} |", r.no_bridge_median)?;
    for (k, (s_b, m)) in r.s_b_values.iter().zip(&r.sweep_medians).enumerate() {
        let (f1, fails) = stats(&|s| &s.sweep[k]);
        writeln!(t, "| {s_b} | {m:.3} | {f1:.3} | {fails} |")?;
    }
    writeln!(t)?;
    writeln!(t, "s_T = {}; Spearman rho = {:.3}; bridge improvement = {:.1}%", r.s_t, r.spearman, 100.0 * r.improvement)?;
    Ok(t)
}

fn sweep(j: &SweepJob) -> Result<Artifacts> {
    let cfg = &j.experiment;
    let report = match &j.checkpoint {
        Some(p) => {
            let model = load_model(&cfg.model, p)?;
            let scenes = eval_scenes(cfg);
            let seed = evaluate_seed(cfg, 0, &model, &[], &scenes)?;
            summarize(cfg, vec![seed])?
        }
        None => run_sync_experiment(cfg)?,
    };
    let table = sweep_table(&report)?;
    let mut a = Artifacts::default();
    a.json("sweep.json", &report)?;
    a.file("sweep.md", table.clone().into_bytes());
    a.summary = table;
    Ok(a)
}
