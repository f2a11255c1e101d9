//! Guided Euler sampler.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{domain_err, Error, Result};
use crate::guidance::{BranchOutputs, GuidanceMode, GuidanceScales, VelocityPair};
use crate::model::{select_expert, ConditionSet, DualTower};
use crate::schedule::{SigmaShiftSchedule, SigmaVariant};

/// Times of one sampler step: the raw grid time and each stream's
/// effective time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepTime {
    pub t: f64,
    pub tau_v: f64,
    pub tau_a: f64,
}

/// Anything that predicts a velocity pair for one branch.
pub trait VelocityModel {
    fn latent_shapes(&self) -> ([usize; 2], [usize; 2]);

    fn velocity(
        &self,
        z_v: &Tensor,
        z_a: &Tensor,
        time: StepTime,
        cond: &ConditionSet,
    ) -> Result<VelocityPair>;
}

impl VelocityModel for DualTower {
    fn latent_shapes(&self) -> ([usize; 2], [usize; 2]) {
        let c = self.config();
        (
            [c.video.seq_len, c.video.channels],
            [c.audio.seq_len, c.audio.channels],
        )
    }

    fn velocity(
        &self,
        z_v: &Tensor,
        z_a: &Tensor,
        time: StepTime,
        cond: &ConditionSet,
    ) -> Result<VelocityPair> {
        let tape = crate::autodiff::Tape::new();
        let p = self.bind(&tape);
        let expert = self.config().experts.map(|e| select_expert(e.t_split, time.t));
        let (v, a) = self.forward(
            &p,
            tape.leaf(z_v.clone()),
            tape.leaf(z_a.clone()),
            time.tau_v,
            time.tau_a,
            cond,
            expert,
        )?;
        Ok(VelocityPair::new((*v.value()).clone(), (*a.value()).clone()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub n_steps: usize,
    pub s_b: f64,
    pub s_t: f64,
    pub mode: GuidanceMode,
    pub shift_v: f64,
    pub shift_a: f64,
    #[serde(default)]
    pub sigma_variant: SigmaVariant,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n_steps: 16,
            s_b: 1.0,
            s_t: 1.0,
            mode: GuidanceMode::Dual,
            shift_v: 5.0,
            shift_a: 5.0,
            sigma_variant: SigmaVariant::Normalized,
        }
    }
}

impl SampleConfig {
    pub fn scales(&self) -> Result<GuidanceScales> {
        self.mode.effective(self.s_b, self.s_t)
    }

    pub fn schedules(&self) -> Result<(SigmaShiftSchedule, SigmaShiftSchedule)> {
        Ok((
            SigmaShiftSchedule::new(self.shift_v, self.sigma_variant)?,
            SigmaShiftSchedule::new(self.shift_a, self.sigma_variant)?,
        ))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub x_v: Tensor,
    pub x_a: Tensor,
    /// Model evaluations performed.
    pub nfe: usize,
}

/// Draws the starting noise from `rng` and integrates.
pub fn sample<M: VelocityModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    cond: &ConditionSet,
    cfg: &SampleConfig,
    rng: &mut R,
) -> Result<SampleOutput> {
    let (sv, sa) = model.latent_shapes();
    let z_v = Tensor::randn(&sv, 1.0, rng);
    let z_a = Tensor::randn(&sa, 1.0, rng);
    sample_from(model, cond, cfg, z_v, z_a)
}

/// Euler integration from `t = 1` to `t = 0` on `n_steps` uniform steps;
/// each stream moves by its own effective-time decrement
/// `sigma(t_k) - sigma(t_{k+1})`.
pub fn sample_from<M: VelocityModel + ?Sized>(
    model: &M,
    cond: &ConditionSet,
    cfg: &SampleConfig,
    mut z_v: Tensor,
    mut z_a: Tensor,
) -> Result<SampleOutput> {
    if cfg.n_steps == 0 {
        return Err(domain_err!("n_steps must be at least 1"));
    }
    let scales = cfg.scales()?;
    let (sched_v, sched_a) = cfg.schedules()?;
    let plan = cfg.mode.plan(scales);
    let n = cfg.n_steps;
    let mut nfe = 0;
    for k in 0..n {
        let t = 1.0 - k as f64 / n as f64;
        let t_next = if k + 1 == n { 0.0 } else { 1.0 - (k + 1) as f64 / n as f64 };
        let time = StepTime {
            t,
            tau_v: sched_v.sigma(t)?,
            tau_a: sched_a.sigma(t)?,
        };
        let mut outs = BranchOutputs::default();
        for &b in &plan.branches {
            let bc = ConditionSet {
                text: if b.text() { cond.text.clone() } else { None },
                bridge_enabled: b.bridge() && cond.bridge_enabled,
                first_frame: cond.first_frame.clone(),
            };
            outs.set(b, model.velocity(&z_v, &z_a, time, &bc)?);
            nfe += 1;
        }
        let v = cfg.mode.combine(&outs, scales)?;
        let dv = time.tau_v - sched_v.sigma(t_next)?;
        let da = time.tau_a - sched_a.sigma(t_next)?;
        z_v = z_v.zip_map(&v.video, |z, u| z - dv * u)?;
        z_a = z_a.zip_map(&v.audio, |z, u| z - da * u)?;
        if !(z_v.is_finite() && z_a.is_finite()) {
            return Err(Error::Numeric(format!("non-finite latent at sampler step {k}")));
        }
    }
    Ok(SampleOutput {
        x_v: z_v,
        x_a: z_a,
        nfe,
    })
}
