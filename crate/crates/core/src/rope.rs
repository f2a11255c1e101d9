//! Rotary positions on a shared physical time grid.
//!
//! Audio token `j` sits at position `j`; video token `i` sits at `s * i` with
//! `s = f_a / f_v`, so tokens describing the same instant rotate identically.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{dim_err, domain_err, Result};

pub const DEFAULT_ROPE_BASE: f64 = 10000.0;

/// Per-pair rotation frequencies `theta_m = base^(-2m / head_dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RotaryBasis {
    head_dim: usize,
    base: f64,
    theta: Vec<f64>,
}

impl RotaryBasis {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(domain_err!("head_dim must be even and positive, got {}", head_dim));
        }
        if !(base > 1.0) {
            return Err(domain_err!("rope base must exceed 1, got {}", base));
        }
        let theta = (0..head_dim / 2)
            .map(|m| base.powf(-2.0 * m as f64 / head_dim as f64))
            .collect();
        Ok(Self {
            head_dim,
            base,
            theta,
        })
    }

    /// A basis with explicitly chosen frequencies.
    pub fn with_frequencies(theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(domain_err!("at least one frequency required"));
        }
        Ok(Self {
            head_dim: 2 * theta.len(),
            base: f64::NAN,
            theta,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Rotation angle of pair `m` at position `p`.
    pub fn angle(&self, p: f64, m: usize) -> f64 {
        p * self.theta[m]
    }

    /// Row-major `[positions.len(), head_dim/2]` cosine and sine tables.
    pub fn tables(&self, positions: &[f64]) -> (Rc<Vec<f64>>, Rc<Vec<f64>>) {
        let half = self.head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for m in 0..half {
                let (s, c) = self.angle(p, m).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        (Rc::new(cos), Rc::new(sin))
    }
}

/// Latent frame rates of the two streams.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub f_v: f64,
    pub f_a: f64,
}

impl Default for TimeGrid {
    /// 12 video and 48 audio tokens over 8 seconds.
    fn default() -> Self {
        Self { f_v: 1.5, f_a: 6.0 }
    }
}

impl TimeGrid {
    pub fn new(f_v: f64, f_a: f64) -> Result<Self> {
        if !(f_v > 0.0 && f_a > 0.0) {
            return Err(domain_err!("frame rates must be positive"));
        }
        Ok(Self { f_v, f_a })
    }

    /// `f_a / f_v`.
    pub fn ratio(&self) -> f64 {
        self.f_a / self.f_v
    }

    /// Video token `i` in audio time units.
    pub fn position_video(&self, i: usize) -> f64 {
        self.ratio() * i as f64
    }

    pub fn position_audio(&self, j: usize) -> f64 {
        j as f64
    }

    pub fn video_positions(&self, n: usize) -> Vec<f64> {
        (0..n).map(|i| self.position_video(i)).collect()
    }

    pub fn audio_positions(&self, n: usize) -> Vec<f64> {
        (0..n).map(|j| self.position_audio(j)).collect()
    }

    /// Tokens per stream for a clip of `seconds`.
    pub fn token_counts(&self, seconds: f64) -> (usize, usize) {
        (
            (self.f_v * seconds).round() as usize,
            (self.f_a * seconds).round() as usize,
        )
    }
}

fn check_rotary_input(x: &Tensor, positions: &[f64], basis: &RotaryBasis) -> Result<()> {
    if !x.cols().is_multiple_of(basis.head_dim()) {
        return Err(dim_err!(
            "last axis {} is not a multiple of head_dim {}",
            x.cols(),
            basis.head_dim()
        ));
    }
    if x.rows() != positions.len() {
        return Err(dim_err!(
            "{} rows but {} positions",
            x.rows(),
            positions.len()
        ));
    }
    Ok(())
}

/// Rotates each pair `(2m, 2m+1)` of every head of row `r` by `positions[r] * theta_m`.
///
/// `x` is `[seq, heads * head_dim]`; a single head is the `[seq, head_dim]` case.
pub fn apply_rotary(x: &Tensor, positions: &[f64], basis: &RotaryBasis) -> Result<Tensor> {
    check_rotary_input(x, positions, basis)?;
    let (cos, sin) = basis.tables(positions);
    let mut out = vec![0.0; x.len()];
    crate::autodiff::tape::rotate_rows(
        x.data(),
        &mut out,
        x.cols(),
        basis.head_dim(),
        &cos,
        &sin,
        false,
    );
    Tensor::new(x.shape(), out)
}

/// Tracked rotary application for use inside attention.
pub fn rotary_var<'t>(x: Var<'t>, positions: &[f64], basis: &RotaryBasis) -> Result<Var<'t>> {
    check_rotary_input(&x.value(), positions, basis)?;
    let (cos, sin) = basis.tables(positions);
    x.rotate_pairs(cos, sin, basis.head_dim())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn positions() {
        let g = TimeGrid::new(1.0, 4.0).unwrap();
        assert_eq!(g.position_video(3), 12.0);
        let eq = TimeGrid::new(2.0, 2.0).unwrap();
        assert_eq!(eq.position_video(5), 5.0);
        let g = TimeGrid::new(6.0, 48.0).unwrap();
        assert_eq!(g.position_video(5), 40.0);
        assert_eq!(g.position_audio(0), 0.0);
        assert_eq!(g.position_audio(7), 7.0);
        assert_eq!(g.position_video(5), g.position_audio(40));
        assert_eq!(TimeGrid::default().token_counts(8.0), (12, 48));
        assert!(TimeGrid::new(0.0, 1.0).is_err());
    }

    #[test]
    fn basis_is_decreasing() {
        let b = RotaryBasis::new(16, DEFAULT_ROPE_BASE).unwrap();
        assert_eq!(b.theta()[0], 1.0);
        assert!(b.theta().windows(2).all(|w| w[1] < w[0]));
        assert!(RotaryBasis::new(7, 10000.0).is_err());
    }

    #[test]
    fn zero_position_is_identity_and_quarter_turn() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = RotaryBasis::new(8, DEFAULT_ROPE_BASE).unwrap();
        let x = Tensor::randn(&[1, 8], 1.0, &mut rng);
        assert_eq!(apply_rotary(&x, &[0.0], &b).unwrap(), x);
        let b2 = RotaryBasis::new(2, DEFAULT_ROPE_BASE).unwrap();
        let v = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let r = apply_rotary(&v, &[FRAC_PI_2], &b2).unwrap();
        assert!(r.data()[0].abs() < 1e-12 && (r.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pair_norms_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = RotaryBasis::new(8, DEFAULT_ROPE_BASE).unwrap();
        let x = Tensor::randn(&[5, 16], 1.0, &mut rng);
        let pos = [0.0, 1.5, 7.0, 33.3, 47.0];
        let y = apply_rotary(&x, &pos, &b).unwrap();
        for (px, py) in x.data().chunks(2).zip(y.data().chunks(2)) {
            let n0 = px[0].hypot(px[1]);
            let n1 = py[0].hypot(py[1]);
            assert!((n0 - n1).abs() <= 1e-12);
        }
    }

    #[test]
    fn shape_mismatch() {
        let b = RotaryBasis::new(4, DEFAULT_ROPE_BASE).unwrap();
        assert!(apply_rotary(&Tensor::zeros(&[2, 6]), &[0.0, 1.0], &b).is_err());
        assert!(apply_rotary(&Tensor::zeros(&[2, 4]), &[0.0], &b).is_err());
    }
}
