//! Flow-matching training loop.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{synth_pair, EventScene, SynthConfig};
use super::optim::{AdamW, OptimizerGroups};
use crate::autodiff::{Tape, Tensor};
use crate::error::{contract_err, domain_err, Error, Result};
use crate::model::{select_expert, ConditionSet, DualTower, Expert, ParamGroup};
use crate::schedule::{
    corrupt, draw_timesteps, fm_loss, LossWeights, SigmaShiftSchedule, SigmaVariant, TimestepMode,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub p_drop_text: f64,
    pub p_drop_bridge: f64,
    pub shift_v: f64,
    pub shift_a: f64,
    #[serde(default)]
    pub sigma_variant: SigmaVariant,
    #[serde(default)]
    pub timestep_mode: TimestepMode,
    pub lambda_a: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    #[serde(default)]
    pub alternate_experts: bool,
    #[serde(default)]
    pub optimizer: OptimizerGroups,
    #[serde(default)]
    pub synth: SynthConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPhase {
    /// Audio shift 1, heavy text dropout.
    Phase1,
    /// Audio shift raised to match video, lighter text dropout.
    Phase2,
    /// Phase 2 settings; meant to be paired with a longer-clip model config.
    Phase3,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(TrainPhase::Phase2)
    }
}

impl TrainConfig {
    pub fn preset(phase: TrainPhase) -> Self {
        let (shift_a, p_drop_text) = match phase {
            TrainPhase::Phase1 => (1.0, 0.5),
            TrainPhase::Phase2 | TrainPhase::Phase3 => (5.0, 0.2),
        };
        Self {
            p_drop_text,
            p_drop_bridge: 0.1,
            shift_v: 5.0,
            shift_a,
            sigma_variant: SigmaVariant::Normalized,
            timestep_mode: TimestepMode::Decoupled,
            lambda_a: LossWeights::default().lambda_a,
            steps: 2000,
            batch: 8,
            seed: 0,
            alternate_experts: false,
            optimizer: OptimizerGroups::default(),
            synth: SynthConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_drop_text", self.p_drop_text), ("p_drop_bridge", self.p_drop_bridge)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(domain_err!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.batch == 0 {
            return Err(domain_err!("batch must be positive"));
        }
        self.schedules()?;
        LossWeights::new(1.0, self.lambda_a)?;
        self.optimizer.validate()?;
        self.synth.validate()
    }

    pub fn schedules(&self) -> Result<(SigmaShiftSchedule, SigmaShiftSchedule)> {
        Ok((
            SigmaShiftSchedule::new(self.shift_v, self.sigma_variant)?,
            SigmaShiftSchedule::new(self.shift_a, self.sigma_variant)?,
        ))
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_v: 1.0,
            lambda_a: self.lambda_a,
        }
    }
}

/// One clean training pair with its prompt.
#[derive(Clone, Debug)]
pub struct Example {
    pub x_v: Tensor,
    pub x_a: Tensor,
    pub prompt: Vec<usize>,
}

pub fn make_batch<R: Rng + ?Sized>(
    rng: &mut R,
    model: &DualTower,
    synth: &SynthConfig,
    n: usize,
) -> Result<Vec<Example>> {
    (0..n)
        .map(|_| {
            let scene = EventScene::random(rng, synth);
            let (x_v, x_a) = synth_pair(&scene, &model.config().grid, synth, rng)?;
            Ok(Example {
                x_v,
                x_a,
                prompt: scene.prompt_ids,
            })
        })
        .collect()
}

/// Per-step diagnostics; one JSONL line each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub lr_backbone: f64,
    pub lr_bridge: f64,
    pub t_v_mean: f64,
    pub t_a_mean: f64,
    pub null_text: usize,
    pub bridge_off: usize,
    pub expert: Option<Expert>,
}

/// Expert trained at `step_index` under alternation: odd steps high-noise.
pub fn alternation_expert(step_index: usize) -> Expert {
    if step_index % 2 == 1 {
        Expert::High
    } else {
        Expert::Low
    }
}

/// One optimizer step on `batch`; returns the mean loss and counters.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut DualTower,
    opt: &mut AdamW,
    batch: &[Example],
    cfg: &TrainConfig,
    step_index: usize,
    rng: &mut R,
) -> Result<StepStats> {
    let (sched_v, sched_a) = cfg.schedules()?;
    let t_split = model.config().experts.map(|e| e.t_split);
    let forced = match (cfg.alternate_experts, t_split) {
        (true, Some(_)) => Some(alternation_expert(step_index)),
        (true, None) => return Err(contract_err!("expert alternation needs a two-expert model")),
        _ => None,
    };
    let n = model.params().len();
    let mut grads: Vec<Vec<f64>> = (0..n).map(|i| vec![0.0; model.params().value(i).len()]).collect();
    let scale = 1.0 / batch.len() as f64;
    let mut stats = StepStats {
        step: step_index,
        loss: 0.0,
        lr_backbone: cfg.optimizer.backbone_lr,
        lr_bridge: cfg.optimizer.bridge_lr,
        t_v_mean: 0.0,
        t_a_mean: 0.0,
        null_text: 0,
        bridge_off: 0,
        expert: forced,
    };
    for ex in batch {
        let mut draw = draw_timesteps(rng, cfg.timestep_mode);
        if let (Some(e), Some(split)) = (forced, t_split) {
            let u = draw.t_v;
            draw.t_v = match e {
                Expert::High => split + u * (1.0 - split),
                Expert::Low => u * split,
            };
            if cfg.timestep_mode == TimestepMode::Shared {
                draw.t_a = draw.t_v;
            }
        }
        let drop_text = rng.random::<f64>() < cfg.p_drop_text;
        let drop_bridge = rng.random::<f64>() < cfg.p_drop_bridge;
        stats.null_text += drop_text as usize;
        stats.bridge_off += drop_bridge as usize;
        let cond = ConditionSet {
            text: (!drop_text).then(|| ex.prompt.clone()),
            bridge_enabled: !drop_bridge,
            first_frame: None,
        };
        let eps_v = Tensor::randn(ex.x_v.shape(), 1.0, rng);
        let eps_a = Tensor::randn(ex.x_a.shape(), 1.0, rng);
        let fv = corrupt(&ex.x_v, &eps_v, draw.t_v, &sched_v)?;
        let fa = corrupt(&ex.x_a, &eps_a, draw.t_a, &sched_a)?;
        let expert = forced.or_else(|| t_split.map(|s| select_expert(s, draw.t_v)));

        let tape = Tape::new();
        let p = model.bind(&tape);
        let (pv, pa) = model.forward(
            &p,
            tape.leaf(fv.x_t),
            tape.leaf(fa.x_t),
            fv.tau,
            fa.tau,
            &cond,
            expert,
        )?;
        let loss = fm_loss(pv, pa, tape.leaf(fv.target_v), tape.leaf(fa.target_v), cfg.weights())?;
        let lv = loss.value().item()?;
        if !lv.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step_index} (t_v {}, t_a {})",
                draw.t_v, draw.t_a
            )));
        }
        let g = tape.backward(loss)?;
        for (id, acc) in grads.iter_mut().enumerate() {
            if let Some(gi) = g.raw(p.var(id)) {
                for (a, b) in acc.iter_mut().zip(gi) {
                    *a += scale * b;
                }
            }
        }
        stats.loss += scale * lv;
        stats.t_v_mean += scale * draw.t_v;
        stats.t_a_mean += scale * draw.t_a;
    }
    let params = model.params();
    let frozen: Vec<bool> = (0..n)
        .map(|i| match (forced, params.expert(i)) {
            (Some(e), Some(pe)) => e != pe,
            _ => false,
        })
        .collect();
    opt.step(model.params_mut(), &grads, |i| !frozen[i])?;
    Ok(stats)
}

/// Owns a model, its optimizer and the data stream.
pub struct Trainer {
    pub model: DualTower,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(model: DualTower, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(cfg.optimizer.clone(), model.params())?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
        Ok(Self {
            model,
            opt,
            cfg,
            rng,
            step: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn step(&mut self) -> Result<StepStats> {
        let batch = make_batch(&mut self.rng, &self.model, &self.cfg.synth, self.cfg.batch)?;
        let s = train_step(
            &mut self.model,
            &mut self.opt,
            &batch,
            &self.cfg,
            self.step,
            &mut self.rng,
        )?;
        self.step += 1;
        Ok(s)
    }

    /// Runs `cfg.steps` steps, writing one JSON line per step to `log`.
    pub fn run(&mut self, mut log: Option<&mut dyn Write>) -> Result<Vec<StepStats>> {
        let mut out = Vec::with_capacity(self.cfg.steps);
        for _ in 0..self.cfg.steps {
            let s = self.step()?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &s)?;
                w.write_all(b"\n")?;
            }
            if s.step % 100 == 0 {
                log::debug!("step {} loss {:.5}", s.step, s.loss);
            }
            out.push(s);
        }
        Ok(out)
    }
}

/// Parameter groups present in a model, for logging.
pub fn group_sizes(model: &DualTower) -> (usize, usize) {
    let mut out = (0, 0);
    for p in model.parameters() {
        match p.group {
            ParamGroup::Backbone => out.0 += p.count,
            ParamGroup::Bridge => out.1 += p.count,
        }
    }
    out
}
