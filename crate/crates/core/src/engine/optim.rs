//! Decoupled-weight-decay adaptive-moment optimizer with per-group rates.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, domain_err, Result};
use crate::model::{ParamGroup, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerGroups {
    pub backbone_lr: f64,
    pub bridge_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// With moments off the update is `lr * (g + wd * p)`.
    #[serde(default = "default_true")]
    pub moments: bool,
}

fn default_true() -> bool {
    true
}

impl Default for OptimizerGroups {
    /// Toy-scale rates (the bridge runs at twice the backbone rate).
    fn default() -> Self {
        Self::with_backbone_lr(1e-3)
    }
}

impl OptimizerGroups {
    pub fn with_backbone_lr(lr: f64) -> Self {
        Self {
            backbone_lr: lr,
            bridge_lr: 2.0 * lr,
            weight_decay: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            moments: true,
        }
    }

    /// Full-scale reference rates.
    pub fn reference() -> Self {
        Self::with_backbone_lr(1e-5)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.backbone_lr >= 0.0 && self.bridge_lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(domain_err!("learning rates and weight decay must be non-negative"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(domain_err!("betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.backbone_lr,
            ParamGroup::Bridge => self.bridge_lr,
        }
    }
}

/// Optimizer state; step counts are per parameter so frozen tensors keep
/// their own bias correction.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: OptimizerGroups,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: Vec<u64>,
}

impl AdamW {
    pub fn new(cfg: OptimizerGroups, params: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let sizes: Vec<usize> = (0..params.len()).map(|i| params.value(i).len()).collect();
        Ok(Self {
            cfg,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: vec![0; sizes.len()],
        })
    }

    pub fn steps(&self, id: usize) -> u64 {
        self.steps[id]
    }

    /// Applies `grads[i]` to every parameter `i` with `active(i)`.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &[Vec<f64>],
        active: impl Fn(usize) -> bool,
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(contract_err!("{} gradients for {} parameters", grads.len(), params.len()));
        }
        let c = self.cfg.clone();
        for id in 0..params.len() {
            if !active(id) {
                continue;
            }
            let lr = c.lr(params.group(id));
            let g = &grads[id];
            if g.len() != params.value(id).len() {
                return Err(contract_err!("gradient size mismatch for {}", params.name(id)));
            }
            let p = params.value_mut(id).data_mut();
            self.steps[id] += 1;
            if c.moments {
                let t = self.steps[id] as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                let (m, v) = (&mut self.m[id], &mut self.v[id]);
                for k in 0..p.len() {
                    m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                    v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                    let mh = m[k] / bc1;
                    let vh = v[k] / bc2;
                    p[k] -= lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * p[k]);
                }
            } else {
                for k in 0..p.len() {
                    p[k] -= lr * (g[k] + c.weight_decay * p[k]);
                }
            }
        }
        Ok(())
    }
}
