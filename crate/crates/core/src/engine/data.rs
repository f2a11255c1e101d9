//! Synthetic bimodal event scenes and the onset-offset sync metric.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{contract_err, domain_err, Result};
use crate::rope::TimeGrid;

pub const CLIP_SECONDS: f64 = 8.0;
pub const MAX_EVENTS: usize = 4;

/// Onsets (seconds) and class labels of the events in one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventScene {
    pub onsets: Vec<f64>,
    pub classes: Vec<usize>,
    /// One prompt token per event, in onset order.
    pub prompt_ids: Vec<usize>,
}

impl EventScene {
    pub fn new(onsets: Vec<f64>, classes: Vec<usize>) -> Result<Self> {
        if onsets.is_empty() || onsets.len() > MAX_EVENTS {
            return Err(contract_err!("scene needs 1..={MAX_EVENTS} events, got {}", onsets.len()));
        }
        if onsets.len() != classes.len() {
            return Err(contract_err!("{} onsets but {} classes", onsets.len(), classes.len()));
        }
        if let Some(&o) = onsets.iter().find(|&&o| !(0.0..CLIP_SECONDS).contains(&o)) {
            return Err(domain_err!("onset {o} outside [0, {CLIP_SECONDS})"));
        }
        if onsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(contract_err!("onsets must be strictly increasing"));
        }
        let prompt_ids = classes.clone();
        Ok(Self {
            onsets,
            classes,
            prompt_ids,
        })
    }

    /// Random scene: 1..=4 events at least `min_gap` seconds apart inside
    /// `[margin, 8 - margin)`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, cfg: &SynthConfig) -> Self {
        let n = rng.random_range(1..=MAX_EVENTS);
        let lo = cfg.margin;
        let span = CLIP_SECONDS - 2.0 * cfg.margin - (n - 1) as f64 * cfg.min_gap;
        // sorted uniforms plus cumulative gaps keep the spacing exact
        let mut u: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * span).collect();
        u.sort_by(f64::total_cmp);
        let onsets = u
            .iter()
            .enumerate()
            .map(|(k, x)| lo + x + k as f64 * cfg.min_gap)
            .collect();
        let classes = (0..n).map(|_| rng.random_range(0..cfg.classes)).collect();
        Self::new(onsets, classes).expect("generated scene is valid")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub d_v: usize,
    pub d_a: usize,
    /// Bump width in seconds.
    pub sigma_time: f64,
    pub noise_std: f64,
    /// Integrated bump mass per class.
    pub amplitudes: Vec<f64>,
    pub min_gap: f64,
    pub margin: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            d_v: 4,
            d_a: 4,
            sigma_time: 0.25,
            noise_std: 0.05,
            amplitudes: vec![1.0, 1.25, 1.5, 1.75],
            min_gap: 1.0,
            margin: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.amplitudes.len() != self.classes {
            return Err(contract_err!("one amplitude per class required"));
        }
        if self.d_v < self.classes || self.d_a < self.classes {
            return Err(contract_err!("each class needs its own channel"));
        }
        if !(self.sigma_time > 0.0 && self.noise_std >= 0.0) {
            return Err(domain_err!("sigma_time must be positive and noise_std non-negative"));
        }
        Ok(())
    }
}

/// Gaussian density of width `sigma` centred at `center`.
pub fn bump(t: f64, center: f64, sigma: f64) -> f64 {
    let z = (t - center) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

fn render<R: Rng + ?Sized>(
    scene: &EventScene,
    rate: f64,
    channels: usize,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Tensor {
    let n = (rate * CLIP_SECONDS).round() as usize;
    let mut x = if cfg.noise_std > 0.0 {
        Tensor::randn(&[n, channels], cfg.noise_std, rng)
    } else {
        Tensor::zeros(&[n, channels])
    };
    let data = x.data_mut();
    for (&o, &c) in scene.onsets.iter().zip(&scene.classes) {
        let a = cfg.amplitudes[c];
        for k in 0..n {
            data[k * channels + c] += a * bump(k as f64 / rate, o, cfg.sigma_time);
        }
    }
    x
}

/// Video `[f_v*8, d_v]` and audio `[f_a*8, d_a]` latents of a scene. Token
/// `k` of a stream sits at `k / f` seconds.
pub fn synth_pair<R: Rng + ?Sized>(
    scene: &EventScene,
    grid: &TimeGrid,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    if let Some(&o) = scene.onsets.iter().find(|&&o| !(0.0..CLIP_SECONDS).contains(&o)) {
        return Err(domain_err!("onset {o} outside [0, {CLIP_SECONDS})"));
    }
    if scene.classes.iter().any(|&c| c >= cfg.classes) {
        return Err(contract_err!("class label out of range"));
    }
    let x_v = render(scene, grid.f_v, cfg.d_v, cfg, rng);
    let x_a = render(scene, grid.f_a, cfg.d_a, cfg, rng);
    Ok((x_v, x_a))
}

/// Onset detections of one stream: `(time, class, amplitude)`.
pub type Detections = Vec<(f64, usize, f64)>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncReport {
    pub offset_error_s: f64,
    pub event_f1: f64,
    pub matched: usize,
    pub video_events: usize,
    pub audio_events: usize,
}

/// Why a pair could not be scored.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncFailure {
    NoVideoEvents,
    NoAudioEvents,
    NoMatchingClasses,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SyncOutcome {
    Scored(SyncReport),
    Failed { reason: SyncFailure },
}

impl SyncOutcome {
    /// Offset error, with failures counted as the whole clip length.
    pub fn offset_or_max(&self) -> f64 {
        match self {
            SyncOutcome::Scored(r) => r.offset_error_s,
            SyncOutcome::Failed { .. } => CLIP_SECONDS,
        }
    }

    pub fn report(&self) -> Option<&SyncReport> {
        match self {
            SyncOutcome::Scored(r) => Some(r),
            SyncOutcome::Failed { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub sigma_time: f64,
    /// Candidate onset spacing in seconds.
    pub resolution: f64,
    /// Minimum matched-filter SNR against the stream's robust noise level.
    pub min_snr: f64,
    /// Minimum fitted bump mass.
    pub min_amplitude: f64,
    pub classes: usize,
    pub match_window: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            sigma_time: 0.25,
            resolution: 0.01,
            min_snr: 6.0,
            min_amplitude: 0.4,
            classes: 4,
            match_window: 0.5,
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Greedy matched-filter pursuit per class channel.
pub fn detect_onsets(x: &Tensor, rate: f64, cfg: &DetectorConfig) -> Detections {
    let (n, ch) = (x.rows(), x.cols());
    let mut abs: Vec<f64> = x.data().iter().map(|v| v.abs()).collect();
    let noise = (median(&mut abs) / 0.6745).max(1e-6);
    let steps = (CLIP_SECONDS / cfg.resolution).round() as usize;
    let templates: Vec<Vec<f64>> = (0..steps)
        .map(|s| {
            let c = s as f64 * cfg.resolution;
            (0..n).map(|k| bump(k as f64 / rate, c, cfg.sigma_time)).collect()
        })
        .collect();
    let energy: Vec<f64> = templates.iter().map(|h| h.iter().map(|v| v * v).sum()).collect();
    let mut out = Vec::new();
    for c in 0..ch.min(cfg.classes) {
        let mut resid: Vec<f64> = (0..n).map(|k| x.at(k, c)).collect();
        for _ in 0..2 * MAX_EVENTS {
            let mut best: Option<(usize, f64, f64)> = None;
            for (s, h) in templates.iter().enumerate() {
                if energy[s] < 1e-12 {
                    continue;
                }
                let dot: f64 = h.iter().zip(&resid).map(|(a, b)| a * b).sum();
                let score = dot / energy[s].sqrt();
                if dot > 0.0 && best.is_none_or(|b| score > b.1) {
                    best = Some((s, score, dot / energy[s]));
                }
            }
            let Some((s, score, amp)) = best else { break };
            if score / noise < cfg.min_snr || amp < cfg.min_amplitude {
                break;
            }
            for (r, h) in resid.iter_mut().zip(&templates[s]) {
                *r -= amp * h;
            }
            out.push((s as f64 * cfg.resolution, c, amp));
        }
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Greedy same-class matching by smallest time difference.
pub fn match_events(video: &Detections, audio: &Detections) -> Vec<(usize, usize, f64)> {
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for (i, v) in video.iter().enumerate() {
        for (j, a) in audio.iter().enumerate() {
            if v.1 == a.1 {
                cand.push(((v.0 - a.0).abs(), i, j));
            }
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_v, mut used_a) = (vec![false; video.len()], vec![false; audio.len()]);
    let mut pairs = Vec::new();
    for (d, i, j) in cand {
        if !used_v[i] && !used_a[j] {
            used_v[i] = true;
            used_a[j] = true;
            pairs.push((i, j, d));
        }
    }
    pairs
}

/// Onset agreement between the two streams of one generated pair.
pub fn sync_score(x_v: &Tensor, x_a: &Tensor, grid: &TimeGrid, cfg: &DetectorConfig) -> SyncOutcome {
    let dv = detect_onsets(x_v, grid.f_v, cfg);
    let da = detect_onsets(x_a, grid.f_a, cfg);
    score_detections(&dv, &da, cfg.match_window)
}

pub fn score_detections(dv: &Detections, da: &Detections, window: f64) -> SyncOutcome {
    if dv.is_empty() {
        return SyncOutcome::Failed {
            reason: SyncFailure::NoVideoEvents,
        };
    }
    if da.is_empty() {
        return SyncOutcome::Failed {
            reason: SyncFailure::NoAudioEvents,
        };
    }
    let pairs = match_events(dv, da);
    if pairs.is_empty() {
        return SyncOutcome::Failed {
            reason: SyncFailure::NoMatchingClasses,
        };
    }
    let offset = pairs.iter().map(|p| p.2).sum::<f64>() / pairs.len() as f64;
    let hits = pairs.iter().filter(|p| p.2 <= window).count();
    SyncOutcome::Scored(SyncReport {
        offset_error_s: offset.min(CLIP_SECONDS),
        event_f1: 2.0 * hits as f64 / (dv.len() + da.len()) as f64,
        matched: pairs.len(),
        video_events: dv.len(),
        audio_events: da.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scene_validation() {
        assert!(EventScene::new(vec![], vec![]).is_err());
        assert!(EventScene::new(vec![8.0], vec![0]).is_err());
        assert!(EventScene::new(vec![2.0, 1.0], vec![0, 1]).is_err());
        assert!(EventScene::new(vec![1.0; 5], vec![0; 5]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SynthConfig::default();
        for _ in 0..500 {
            let s = EventScene::random(&mut rng, &cfg);
            assert!(s.onsets.windows(2).all(|w| w[1] - w[0] >= cfg.min_gap - 1e-12));
            assert!(s.onsets.iter().all(|&o| (0.5..7.5).contains(&o)));
        }
    }

    #[test]
    fn match_is_greedy_by_distance() {
        let v = vec![(1.0, 0, 1.0), (3.0, 0, 1.0)];
        let a = vec![(2.9, 0, 1.0), (5.0, 1, 1.0)];
        assert_eq!(match_events(&v, &a), vec![(1, 0, 3.0 - 2.9)]);
    }
}
