//! Dual classifier-free guidance over text (`c_T`) and bridge (`c_B`)
//! conditioning.
//!
//! The guided velocity is
//! `uu + s_B (ub - uu) + s_T (tb - ub)` where `uu` drops both conditions,
//! `ub` keeps only the bridge and `tb` keeps both. When a coefficient
//! vanishes the matching branch is never evaluated, and the combinator uses
//! the reduced closed form directly, so a planned evaluation and a full one
//! produce bit-identical output.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{contract_err, dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceScales {
    pub s_b: f64,
    pub s_t: f64,
}

impl GuidanceScales {
    pub const NONE: Self = Self { s_b: 1.0, s_t: 1.0 };

    pub fn new(s_b: f64, s_t: f64) -> Result<Self> {
        if !(s_b.is_finite() && s_t.is_finite()) {
            return Err(contract_err!("guidance scales must be finite"));
        }
        Ok(Self { s_b, s_t })
    }
}

/// One conditioning combination the sampler can evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Branch {
    /// Null text, bridge off.
    Uncond,
    /// Null text, bridge on.
    BridgeOnly,
    /// Text on, bridge off (only used by the swapped factorization).
    TextOnly,
    /// Text and bridge on.
    Full,
}

impl Branch {
    pub fn text(self) -> bool {
        matches!(self, Branch::TextOnly | Branch::Full)
    }

    pub fn bridge(self) -> bool {
        matches!(self, Branch::BridgeOnly | Branch::Full)
    }
}

/// Which closed form a given pair of scales reduces to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Reduction {
    Unguided,
    /// `ub + s_T (tb - ub)` (or the swapped analogue).
    OuterOnly,
    /// `uu + s (tb - uu)`.
    Equal,
    General,
}

fn reduction(outer_is_one: bool, equal: bool, both_one: bool) -> Reduction {
    if both_one {
        Reduction::Unguided
    } else if outer_is_one {
        Reduction::OuterOnly
    } else if equal {
        Reduction::Equal
    } else {
        Reduction::General
    }
}

fn standard_reduction(s: GuidanceScales) -> Reduction {
    reduction(s.s_b == 1.0, s.s_b == s.s_t, s.s_b == 1.0 && s.s_t == 1.0)
}

fn swapped_reduction(s: GuidanceScales) -> Reduction {
    reduction(s.s_t == 1.0, s.s_b == s.s_t, s.s_b == 1.0 && s.s_t == 1.0)
}

/// Branches needed for one sampling step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchPlan {
    pub branches: Vec<Branch>,
}

impl BranchPlan {
    /// Model evaluations per step.
    pub fn nfe(&self) -> usize {
        self.branches.len()
    }

    pub fn contains(&self, b: Branch) -> bool {
        self.branches.contains(&b)
    }
}

/// Branch set of the standard (bridge-then-text) factorization.
pub fn plan_branches(scales: GuidanceScales) -> BranchPlan {
    use Branch::*;
    let branches = match standard_reduction(scales) {
        Reduction::Unguided => vec![Full],
        Reduction::OuterOnly => vec![BridgeOnly, Full],
        Reduction::Equal => vec![Uncond, Full],
        Reduction::General => vec![Uncond, BridgeOnly, Full],
    };
    BranchPlan { branches }
}

/// Branch set of the swapped (text-then-bridge) factorization.
pub fn plan_branches_swapped(scales: GuidanceScales) -> BranchPlan {
    use Branch::*;
    let branches = match swapped_reduction(scales) {
        Reduction::Unguided => vec![Full],
        Reduction::OuterOnly => vec![TextOnly, Full],
        Reduction::Equal => vec![Uncond, Full],
        Reduction::General => vec![Uncond, TextOnly, Full],
    };
    BranchPlan { branches }
}

/// Velocity prediction for both streams.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityPair {
    pub video: Tensor,
    pub audio: Tensor,
}

impl VelocityPair {
    pub fn new(video: Tensor, audio: Tensor) -> Self {
        Self { video, audio }
    }

    fn check_like(&self, other: &Self) -> Result<()> {
        if self.video.shape() != other.video.shape() || self.audio.shape() != other.audio.shape() {
            return Err(dim_err!("branch outputs have different shapes"));
        }
        Ok(())
    }
}

/// Branch evaluations; absent entries must have a zero coefficient.
#[derive(Clone, Debug, Default)]
pub struct BranchOutputs {
    pub uu: Option<VelocityPair>,
    pub ub: Option<VelocityPair>,
    pub tu: Option<VelocityPair>,
    pub tb: Option<VelocityPair>,
}

impl BranchOutputs {
    pub fn set(&mut self, branch: Branch, v: VelocityPair) {
        match branch {
            Branch::Uncond => self.uu = Some(v),
            Branch::BridgeOnly => self.ub = Some(v),
            Branch::TextOnly => self.tu = Some(v),
            Branch::Full => self.tb = Some(v),
        }
    }

    fn need(&self, b: Branch) -> Result<&VelocityPair> {
        let slot = match b {
            Branch::Uncond => &self.uu,
            Branch::BridgeOnly => &self.ub,
            Branch::TextOnly => &self.tu,
            Branch::Full => &self.tb,
        };
        slot.as_ref()
            .ok_or_else(|| contract_err!("required branch {:?} was not evaluated", b))
    }
}

fn map3(
    a: &VelocityPair,
    b: &VelocityPair,
    c: &VelocityPair,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Result<VelocityPair> {
    a.check_like(b)?;
    a.check_like(c)?;
    let one = |x: &Tensor, y: &Tensor, z: &Tensor| {
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .zip(z.data())
            .map(|((&p, &q), &r)| f(p, q, r))
            .collect();
        Tensor::new(x.shape(), data)
    };
    Ok(VelocityPair {
        video: one(&a.video, &b.video, &c.video)?,
        audio: one(&a.audio, &b.audio, &c.audio)?,
    })
}

fn map2(a: &VelocityPair, b: &VelocityPair, f: impl Fn(f64, f64) -> f64) -> Result<VelocityPair> {
    a.check_like(b)?;
    Ok(VelocityPair {
        video: a.video.zip_map(&b.video, &f)?,
        audio: a.audio.zip_map(&b.audio, &f)?,
    })
}

/// `base + outer (mid - base) + inner (top - mid)`, elementwise.
fn three_term(base: f64, mid: f64, top: f64, first: f64, second: f64) -> f64 {
    base + first * (mid - base) + second * (top - mid)
}

/// Standard dual guidance: `uu + s_B (ub - uu) + s_T (tb - ub)`.
pub fn combine(branches: &BranchOutputs, scales: GuidanceScales) -> Result<VelocityPair> {
    let GuidanceScales { s_b, s_t } = scales;
    match standard_reduction(scales) {
        Reduction::Unguided => Ok(branches.need(Branch::Full)?.clone()),
        Reduction::OuterOnly => {
            let (ub, tb) = (branches.need(Branch::BridgeOnly)?, branches.need(Branch::Full)?);
            map2(ub, tb, |u, t| u + s_t * (t - u))
        }
        Reduction::Equal => {
            let (uu, tb) = (branches.need(Branch::Uncond)?, branches.need(Branch::Full)?);
            map2(uu, tb, |u, t| u + s_t * (t - u))
        }
        Reduction::General => map3(
            branches.need(Branch::Uncond)?,
            branches.need(Branch::BridgeOnly)?,
            branches.need(Branch::Full)?,
            |u, b, t| three_term(u, b, t, s_b, s_t),
        ),
    }
}

/// Swapped factorization: `uu + s_T (tu - uu) + s_B (tb - tu)`.
pub fn combine_swapped(branches: &BranchOutputs, scales: GuidanceScales) -> Result<VelocityPair> {
    let GuidanceScales { s_b, s_t } = scales;
    match swapped_reduction(scales) {
        Reduction::Unguided => Ok(branches.need(Branch::Full)?.clone()),
        Reduction::OuterOnly => {
            let (tu, tb) = (branches.need(Branch::TextOnly)?, branches.need(Branch::Full)?);
            map2(tu, tb, |u, t| u + s_b * (t - u))
        }
        Reduction::Equal => {
            let (uu, tb) = (branches.need(Branch::Uncond)?, branches.need(Branch::Full)?);
            map2(uu, tb, |u, t| u + s_b * (t - u))
        }
        Reduction::General => map3(
            branches.need(Branch::Uncond)?,
            branches.need(Branch::TextOnly)?,
            branches.need(Branch::Full)?,
            |u, m, t| three_term(u, m, t, s_t, s_b),
        ),
    }
}

/// The unreduced three-term formula on every branch, for cross-checking the
/// reductions to machine precision.
pub fn combine_unreduced(branches: &BranchOutputs, scales: GuidanceScales) -> Result<VelocityPair> {
    map3(
        branches.need(Branch::Uncond)?,
        branches.need(Branch::BridgeOnly)?,
        branches.need(Branch::Full)?,
        |u, b, t| three_term(u, b, t, scales.s_b, scales.s_t),
    )
}

/// Named guidance modes exposed on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Independent `s_B`, `s_T`.
    Dual,
    /// `s_B = 1`.
    TextOnly,
    /// `s_B = s_T`.
    TextModality,
    /// Swapped factorization with independent scales.
    Swapped,
}

impl GuidanceMode {
    /// Scales actually used for a requested `(s_b, s_t)`.
    pub fn effective(self, s_b: f64, s_t: f64) -> Result<GuidanceScales> {
        match self {
            GuidanceMode::Dual | GuidanceMode::Swapped => GuidanceScales::new(s_b, s_t),
            GuidanceMode::TextOnly => GuidanceScales::new(1.0, s_t),
            GuidanceMode::TextModality => GuidanceScales::new(s_t, s_t),
        }
    }

    pub fn plan(self, scales: GuidanceScales) -> BranchPlan {
        match self {
            GuidanceMode::Swapped => plan_branches_swapped(scales),
            _ => plan_branches(scales),
        }
    }

    pub fn combine(self, b: &BranchOutputs, scales: GuidanceScales) -> Result<VelocityPair> {
        match self {
            GuidanceMode::Swapped => combine_swapped(b, scales),
            _ => combine(b, scales),
        }
    }
}
