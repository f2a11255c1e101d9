//! Flow-matching paths, per-modality shifted noise schedules, timestep draws
//! and the weighted velocity-regression loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{dim_err, domain_err, Result};

/// Which closed form of the shift map to evaluate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaVariant {
    /// `shift*t / (1 + (shift-1)*t)`: maps `[0,1]` onto `[0,1]`.
    #[default]
    Normalized,
    /// `shift*t / (shift + t*(1-shift))`, evaluated literally. Note that it
    /// gives `sigma(1) = shift`.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaShiftSchedule {
    pub shift: f64,
    #[serde(default)]
    pub variant: SigmaVariant,
}

impl SigmaShiftSchedule {
    pub fn new(shift: f64, variant: SigmaVariant) -> Result<Self> {
        if !(shift.is_finite() && shift > 0.0) {
            return Err(domain_err!("shift must be positive, got {}", shift));
        }
        Ok(Self { shift, variant })
    }

    pub fn normalized(shift: f64) -> Result<Self> {
        Self::new(shift, SigmaVariant::Normalized)
    }

    /// Noise level at time `t` in `[0, 1]`.
    pub fn sigma(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(domain_err!("t = {} outside [0, 1]", t));
        }
        let s = self.shift;
        Ok(match self.variant {
            SigmaVariant::Normalized => s * t / (1.0 + (s - 1.0) * t),
            SigmaVariant::Literal => s * t / (s + t * (1.0 - s)),
        })
    }

    /// Inverse of the normalized map; `t` such that `sigma(t) = tau`.
    pub fn inverse(&self, tau: f64) -> Result<f64> {
        if self.variant != SigmaVariant::Normalized {
            return Err(domain_err!("inverse is only defined for the normalized variant"));
        }
        if !(0.0..=1.0).contains(&tau) {
            return Err(domain_err!("tau = {} outside [0, 1]", tau));
        }
        let s = self.shift;
        Ok(tau / (s - (s - 1.0) * tau))
    }
}

/// One noised training example for a single modality.
#[derive(Clone, Debug)]
pub struct FlowSample {
    pub x0: Tensor,
    pub eps: Tensor,
    pub t: f64,
    /// `sigma(t)`, the effective time fed to the model.
    pub tau: f64,
    pub x_t: Tensor,
    pub target_v: Tensor,
}

/// `x_t = (1 - sigma(t)) x0 + sigma(t) eps`, target `eps - x0`.
pub fn corrupt(x0: &Tensor, eps: &Tensor, t: f64, schedule: &SigmaShiftSchedule) -> Result<FlowSample> {
    if x0.shape() != eps.shape() {
        return Err(dim_err!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape()));
    }
    let tau = schedule.sigma(t)?;
    let x_t = x0.zip_map(eps, |a, e| (1.0 - tau) * a + tau * e)?;
    let target_v = x0.zip_map(eps, |a, e| e - a)?;
    Ok(FlowSample {
        x0: x0.clone(),
        eps: eps.clone(),
        t,
        tau,
        x_t,
        target_v,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_v: f64,
    pub lambda_a: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_v: 1.0,
            lambda_a: 0.2,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_v: f64, lambda_a: f64) -> Result<Self> {
        if !(lambda_v > 0.0 && lambda_a > 0.0) {
            return Err(domain_err!("loss weights must be positive"));
        }
        Ok(Self { lambda_v, lambda_a })
    }
}

/// `lambda_v * mean|pred_v - tgt_v|^2 + lambda_a * mean|pred_a - tgt_a|^2`.
pub fn fm_loss<'t>(
    pred_v: Var<'t>,
    pred_a: Var<'t>,
    tgt_v: Var<'t>,
    tgt_a: Var<'t>,
    w: LossWeights,
) -> Result<Var<'t>> {
    let dv = pred_v.sub(tgt_v)?;
    let da = pred_a.sub(tgt_a)?;
    let lv = dv.mul(dv)?.mean().scale(w.lambda_v);
    let la = da.mul(da)?.mean().scale(w.lambda_a);
    lv.add(la)
}

/// Untracked version of [`fm_loss`] on plain tensors.
pub fn fm_loss_value(
    pred_v: &Tensor,
    pred_a: &Tensor,
    tgt_v: &Tensor,
    tgt_a: &Tensor,
    w: LossWeights,
) -> Result<f64> {
    let mse = |p: &Tensor, t: &Tensor| -> Result<f64> {
        let d = p.zip_map(t, |a, b| (a - b) * (a - b))?;
        Ok(d.data().iter().sum::<f64>() / d.len() as f64)
    };
    Ok(w.lambda_v * mse(pred_v, tgt_v)? + w.lambda_a * mse(pred_a, tgt_a)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepMode {
    /// Video and audio times drawn independently.
    #[default]
    Decoupled,
    /// One draw shared by both modalities.
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimestepDraw {
    pub t_v: f64,
    pub t_a: f64,
}

pub fn draw_timesteps<R: Rng + ?Sized>(rng: &mut R, mode: TimestepMode) -> TimestepDraw {
    let t_v: f64 = rng.random();
    let t_a = match mode {
        TimestepMode::Decoupled => rng.random(),
        TimestepMode::Shared => t_v,
    };
    TimestepDraw { t_v, t_a }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn both(shift: f64) -> [SigmaShiftSchedule; 2] {
        [
            SigmaShiftSchedule::new(shift, SigmaVariant::Normalized).unwrap(),
            SigmaShiftSchedule::new(shift, SigmaVariant::Literal).unwrap(),
        ]
    }

    #[test]
    fn sigma_reference_values() {
        for s in both(1.0) {
            assert!((s.sigma(0.7).unwrap() - 0.7).abs() < 1e-15);
        }
        for s in both(5.0) {
            assert!((s.sigma(0.5).unwrap() - 2.5 / 3.0).abs() < 1e-15);
        }
        let [n, v] = both(5.0);
        assert_eq!(v.sigma(1.0).unwrap(), 5.0);
        assert_eq!(n.sigma(1.0).unwrap(), 1.0);
        assert!(n.sigma(1.01).is_err());
        assert!(n.sigma(-0.1).is_err());
        assert!(SigmaShiftSchedule::normalized(0.0).is_err());
    }

    #[test]
    fn variants_agree_only_at_zero_and_half() {
        for shift in [0.5, 2.0, 3.0, 5.0, 9.0] {
            let [n, v] = both(shift);
            for k in 0..=1000 {
                let t = k as f64 / 1000.0;
                let (a, b) = (n.sigma(t).unwrap(), v.sigma(t).unwrap());
                let agree = (a - b).abs() <= 1e-12;
                assert_eq!(agree, k == 0 || k == 500, "shift {shift} t {t}");
            }
        }
    }

    #[test]
    fn monotone_for_shift_at_least_one() {
        for shift in [1.0, 1.5, 5.0, 20.0] {
            for s in both(shift) {
                let mut prev = -1.0;
                for k in 0..=200 {
                    let x = s.sigma(k as f64 / 200.0).unwrap();
                    assert!(x > prev);
                    prev = x;
                }
            }
        }
    }

    #[test]
    fn inverse_round_trips() {
        let s = SigmaShiftSchedule::normalized(5.0).unwrap();
        for k in 0..=20 {
            let t = k as f64 / 20.0;
            assert!((s.inverse(s.sigma(t).unwrap()).unwrap() - t).abs() < 1e-14);
        }
    }

    #[test]
    fn corrupt_endpoints_and_hand_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let eps = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let s = SigmaShiftSchedule::normalized(5.0).unwrap();
        assert_eq!(corrupt(&x0, &eps, 0.0, &s).unwrap().x_t, x0);
        assert_eq!(corrupt(&x0, &eps, 1.0, &s).unwrap().x_t, eps);
        let fs = corrupt(&Tensor::scalar(2.0), &Tensor::scalar(-1.0), 0.5, &s).unwrap();
        assert!((fs.x_t.data()[0] + 0.5).abs() < 1e-12);
        assert_eq!(fs.target_v.data()[0], -3.0);
        assert!(corrupt(&x0, &Tensor::zeros(&[2, 3]), 0.3, &s).is_err());
    }

    #[test]
    fn loss_hand_case_and_zero() {
        let tape = Tape::new();
        let one = tape.leaf(Tensor::scalar(1.0));
        let zero = tape.leaf(Tensor::scalar(0.0));
        let w = LossWeights::default();
        assert_eq!(w.lambda_a, 0.2);
        let l = fm_loss(one, one, zero, zero, w).unwrap();
        assert!((l.value().item().unwrap() - 1.2).abs() < 1e-15);
        let l0 = fm_loss(one, one, one, one, w).unwrap();
        assert_eq!(l0.value().item().unwrap(), 0.0);
        let v = fm_loss_value(
            &Tensor::scalar(1.0),
            &Tensor::scalar(1.0),
            &Tensor::scalar(0.0),
            &Tensor::scalar(0.0),
            w,
        )
        .unwrap();
        assert!((v - 1.2).abs() < 1e-15);
        assert!(LossWeights::new(1.0, 0.0).is_err());
    }

    #[test]
    fn timestep_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let d = draw_timesteps(&mut rng, TimestepMode::Shared);
            assert_eq!(d.t_v, d.t_a);
        }
        let n = 100_000;
        let draws: Vec<_> = (0..n)
            .map(|_| draw_timesteps(&mut rng, TimestepMode::Decoupled))
            .collect();
        let mean = |f: &dyn Fn(&TimestepDraw) -> f64| draws.iter().map(f).sum::<f64>() / n as f64;
        let (mv, ma) = (mean(&|d| d.t_v), mean(&|d| d.t_a));
        let cov = mean(&|d| (d.t_v - mv) * (d.t_a - ma));
        let sv = mean(&|d| (d.t_v - mv).powi(2)).sqrt();
        let sa = mean(&|d| (d.t_a - ma).powi(2)).sqrt();
        assert!((cov / (sv * sa)).abs() < 0.02);
        let seq = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..10)
                .map(|_| draw_timesteps(&mut r, TimestepMode::Decoupled))
                .map(|d| (d.t_v.to_bits(), d.t_a.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(seq(5), seq(5));
    }
}
