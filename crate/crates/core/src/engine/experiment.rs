//! Bridge ablation and bridge-guidance sweep on synthetic scenes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{sync_score, DetectorConfig, EventScene, SyncOutcome};
use super::sample::{sample, SampleConfig};
use super::train::{StepStats, TrainConfig, Trainer};
use crate::error::{contract_err, Result};
use crate::guidance::GuidanceMode;
use crate::model::{ConditionSet, DualTower, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub eval_scenes: usize,
    pub eval_seed: u64,
    pub sample_steps: usize,
    /// Text scale held fixed everywhere.
    pub s_t: f64,
    pub s_b_values: Vec<f64>,
    #[serde(default)]
    pub detector: DetectorConfig,
}

impl Default for SyncExperimentConfig {
    /// Both streams unshifted, and heavier text and bridge dropout than the
    /// phase presets so the unconditional branches used by the dual
    /// guidance get trained at this scale.
    fn default() -> Self {
        let train = TrainConfig {
            shift_v: 1.0,
            shift_a: 1.0,
            p_drop_text: 0.5,
            p_drop_bridge: 0.3,
            steps: 4000,
            ..TrainConfig::default()
        };
        Self {
            model: ModelConfig::default(),
            train,
            seeds: vec![0, 1, 2],
            eval_scenes: 64,
            eval_seed: 1234,
            sample_steps: 16,
            s_t: 4.0,
            s_b_values: vec![1.0, 2.0, 3.0, 3.5],
            detector: DetectorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    /// Median loss over the first and last tenth of training; `None` for a
    /// model evaluated without its log.
    pub early_loss: Option<f64>,
    pub late_loss: Option<f64>,
    pub no_bridge: Vec<SyncOutcome>,
    /// One outcome list per swept `s_B`.
    pub sweep: Vec<Vec<SyncOutcome>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncExperimentReport {
    pub s_t: f64,
    pub s_b_values: Vec<f64>,
    pub seeds: Vec<SeedReport>,
    pub no_bridge_median: f64,
    /// Bridge-enabled median at `s_B = 1`.
    pub bridge_median: f64,
    pub sweep_medians: Vec<f64>,
    pub spearman: f64,
    /// `1 - bridge_median / no_bridge_median`.
    pub improvement: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(contract_err!("spearman needs two equal series of length >= 2"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Held-out scenes shared by every configuration.
pub fn eval_scenes(cfg: &SyncExperimentConfig) -> Vec<EventScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval_seed);
    (0..cfg.eval_scenes)
        .map(|_| EventScene::random(&mut rng, &cfg.train.synth))
        .collect()
}

pub fn train_seed(cfg: &SyncExperimentConfig, seed: u64) -> Result<(DualTower, Vec<StepStats>)> {
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    let model = DualTower::new(cfg.model.clone(), &mut init)?;
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    let mut trainer = Trainer::new(model, tcfg)?;
    let log = trainer.run(None)?;
    Ok((trainer.model, log))
}

/// Samples every scene with the same per-scene starting noise and scores it.
pub fn evaluate(
    model: &DualTower,
    scenes: &[EventScene],
    cfg: &SyncExperimentConfig,
    s_b: f64,
    bridge: bool,
) -> Result<Vec<SyncOutcome>> {
    let scfg = SampleConfig {
        n_steps: cfg.sample_steps,
        s_b,
        s_t: cfg.s_t,
        mode: GuidanceMode::Dual,
        shift_v: cfg.train.shift_v,
        shift_a: cfg.train.shift_a,
        sigma_variant: cfg.train.sigma_variant,
    };
    scenes
        .iter()
        .enumerate()
        .map(|(i, scene)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval_seed.wrapping_add(1 + i as u64));
            let cond = ConditionSet::text(scene.prompt_ids.clone()).with_bridge(bridge);
            let out = sample(model, &cond, &scfg, &mut rng)?;
            Ok(sync_score(&out.x_v, &out.x_a, &model.config().grid, &cfg.detector))
        })
        .collect()
}

fn loss_windows(log: &[StepStats]) -> (Option<f64>, Option<f64>) {
    if log.is_empty() {
        return (None, None);
    }
    let k = (log.len() / 10).max(1);
    let losses: Vec<f64> = log.iter().map(|s| s.loss).collect();
    (Some(median(&losses[..k])), Some(median(&losses[losses.len() - k..])))
}

fn offsets(o: &[SyncOutcome]) -> Vec<f64> {
    o.iter().map(SyncOutcome::offset_or_max).collect()
}

/// Summary statistics over already evaluated seeds.
pub fn summarize(cfg: &SyncExperimentConfig, seeds: Vec<SeedReport>) -> Result<SyncExperimentReport> {
    let pooled = |f: &dyn Fn(&SeedReport) -> &[SyncOutcome]| -> Vec<f64> {
        seeds.iter().flat_map(|s| offsets(f(s))).collect()
    };
    let no_bridge_median = median(&pooled(&|s| &s.no_bridge));
    let sweep_medians: Vec<f64> = (0..cfg.s_b_values.len())
        .map(|k| median(&pooled(&|s| &s.sweep[k])))
        .collect();
    let at_one = cfg
        .s_b_values
        .iter()
        .position(|&s| s == 1.0)
        .ok_or_else(|| contract_err!("the s_B sweep must include 1.0"))?;
    let bridge_median = sweep_medians[at_one];
    Ok(SyncExperimentReport {
        s_t: cfg.s_t,
        s_b_values: cfg.s_b_values.clone(),
        spearman: spearman(&cfg.s_b_values, &sweep_medians)?,
        improvement: 1.0 - bridge_median / no_bridge_median,
        seeds,
        no_bridge_median,
        bridge_median,
        sweep_medians,
    })
}

pub fn evaluate_seed(
    cfg: &SyncExperimentConfig,
    seed: u64,
    model: &DualTower,
    log: &[StepStats],
    scenes: &[EventScene],
) -> Result<SeedReport> {
    let (early_loss, late_loss) = loss_windows(log);
    let no_bridge = evaluate(model, scenes, cfg, 1.0, false)?;
    let sweep = cfg
        .s_b_values
        .iter()
        .map(|&s_b| evaluate(model, scenes, cfg, s_b, true))
        .collect::<Result<_>>()?;
    Ok(SeedReport {
        seed,
        early_loss,
        late_loss,
        no_bridge,
        sweep,
    })
}

/// Trains one model per seed, then evaluates the ablation and the sweep.
pub fn run_sync_experiment(cfg: &SyncExperimentConfig) -> Result<SyncExperimentReport> {
    let scenes = eval_scenes(cfg);
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let (model, log) = train_seed(cfg, seed)?;
        seeds.push(evaluate_seed(cfg, seed, &model, &log, &scenes)?);
    }
    summarize(cfg, seeds)
}
