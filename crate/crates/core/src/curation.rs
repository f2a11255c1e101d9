//! Clip curation: fixed-length speech windows from VAD segments and scene
//! splits, metric gates, and retention accounting.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{contract_err, domain_err, Result};

/// Window length in seconds: first frame plus eight seconds at 24 fps.
pub const WINDOW_SECONDS: f64 = 8.05;

/// Frames covered by a window: the initial frame plus eight seconds.
pub fn frames_for_window(fps: u32) -> Result<u32> {
    if fps == 0 {
        return Err(domain_err!("fps must be positive"));
    }
    Ok(1 + 8 * fps)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeechSegment {
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    MultiShot,
    SingleShot,
}

/// An emitted window with the draw that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipWindow {
    pub start: f64,
    pub end: f64,
    pub kind: WindowKind,
    /// Index of the speech segment the window is anchored on.
    pub anchor: usize,
    pub lower_bound: f64,
    pub upper_bound: f64,
    /// Uniform variate in `[0, 1)`; `None` for the deterministic first window.
    pub draw: Option<f64>,
}

pub fn validate_inputs(segments: &[SpeechSegment], splits: &[f64]) -> Result<()> {
    for (i, s) in segments.iter().enumerate() {
        if !(s.start.is_finite() && s.end.is_finite() && 0.0 <= s.start && s.start < s.end) {
            return Err(contract_err!("segment {i} ({}, {}) is not a valid interval", s.start, s.end));
        }
    }
    if segments.windows(2).any(|w| w[1].start < w[0].end) {
        return Err(contract_err!("speech segments must be sorted and non-overlapping"));
    }
    if splits.iter().any(|p| !p.is_finite()) || splits.windows(2).any(|w| w[1] <= w[0]) {
        return Err(contract_err!("scene splits must be strictly increasing"));
    }
    Ok(())
}

/// First index after `idx` whose segment starts after `t`, or `len`.
fn next_after(segments: &[SpeechSegment], from: usize, t: f64) -> usize {
    (from..segments.len())
        .find(|&j| segments[j].start > t)
        .unwrap_or(segments.len())
}

fn draw_start<R: Rng + ?Sized>(lower: f64, upper: f64, rng: &mut R) -> (f64, f64) {
    let u: f64 = rng.random();
    (lower + u * (upper - lower), u)
}

/// Optional departures from the reference window algorithms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowOptions {
    /// Also bound each drawn start below by the end of the previous window,
    /// so emitted windows never overlap. Off by default.
    #[serde(default)]
    pub clamp_to_previous_window: bool,
}

/// Windows spanning at least one scene split.
///
/// The first window starts at the first segment; later starts are drawn
/// uniformly between the latest of (previous segment end, last split
/// before the segment, segment start minus half a window) and the segment
/// start. The index then jumps to the first segment starting after the
/// window.
pub fn multi_shot_windows<R: Rng + ?Sized>(
    segments: &[SpeechSegment],
    splits: &[f64],
    rng: &mut R,
) -> Result<Vec<ClipWindow>> {
    multi_shot_windows_with(segments, splits, WindowOptions::default(), rng)
}

pub fn multi_shot_windows_with<R: Rng + ?Sized>(
    segments: &[SpeechSegment],
    splits: &[f64],
    opts: WindowOptions,
    rng: &mut R,
) -> Result<Vec<ClipWindow>> {
    validate_inputs(segments, splits)?;
    let mut out = Vec::new();
    let mut prev_end: Option<f64> = None;
    let mut idx = 0;
    while idx < segments.len() {
        let upper = segments[idx].start;
        let (start, lower, draw) = if idx == 0 {
            (upper, upper, None)
        } else {
            let mut lower = segments[idx - 1].end.max(upper - WINDOW_SECONDS / 2.0);
            if let Some(p) = splits.iter().rev().find(|&&p| p < upper) {
                lower = lower.max(*p);
            }
            if let (true, Some(e)) = (opts.clamp_to_previous_window, prev_end) {
                lower = lower.max(e);
            }
            if lower > upper {
                log::warn!("segment {idx}: lower bound {lower} exceeds start {upper}; skipped");
                idx += 1;
                continue;
            }
            let (s, u) = draw_start(lower, upper, rng);
            (s, lower, Some(u))
        };
        let end = start + WINDOW_SECONDS;
        prev_end = Some(end);
        if splits.iter().any(|&p| start <= p && p <= end) {
            out.push(ClipWindow {
                start,
                end,
                kind: WindowKind::MultiShot,
                anchor: idx,
                lower_bound: lower,
                upper_bound: upper,
                draw,
            });
        }
        idx = next_after(segments, idx, end);
    }
    Ok(out)
}

/// Windows that fit inside one scene interval.
///
/// For each pair of consecutive splits, the first segment starting inside
/// the scene with room for a full window anchors the first window; windows
/// continue from there until one would reach the scene end.
pub fn single_shot_windows<R: Rng + ?Sized>(
    segments: &[SpeechSegment],
    splits: &[f64],
    rng: &mut R,
) -> Result<Vec<ClipWindow>> {
    single_shot_windows_with(segments, splits, WindowOptions::default(), rng)
}

pub fn single_shot_windows_with<R: Rng + ?Sized>(
    segments: &[SpeechSegment],
    splits: &[f64],
    opts: WindowOptions,
    rng: &mut R,
) -> Result<Vec<ClipWindow>> {
    validate_inputs(segments, splits)?;
    let mut out = Vec::new();
    let mut i = 0;
    while i + 1 < splits.len() {
        let (scene_start, scene_end) = (splits[i], splits[i + 1]);
        let first = segments
            .iter()
            .position(|s| s.start > scene_start && s.start + WINDOW_SECONDS < scene_end);
        let Some(mut idx) = first else {
            i += 1;
            continue;
        };
        let mut prev_end: Option<f64> = None;
        while idx < segments.len() {
            let upper = segments[idx].start;
            let (start, lower, draw) = if idx == 0 {
                (upper, upper, None)
            } else {
                let mut lower = segments[idx - 1]
                    .end
                    .max(scene_start)
                    .max(upper - WINDOW_SECONDS / 2.0);
                if let (true, Some(e)) = (opts.clamp_to_previous_window, prev_end) {
                    lower = lower.max(e);
                }
                if lower > upper {
                    log::warn!("segment {idx}: lower bound {lower} exceeds start {upper}; skipped");
                    idx += 1;
                    continue;
                }
                let (s, u) = draw_start(lower, upper, rng);
                (s, lower, Some(u))
            };
            let end = start + WINDOW_SECONDS;
            if end >= scene_end {
                break;
            }
            prev_end = Some(end);
            out.push(ClipWindow {
                start,
                end,
                kind: WindowKind::SingleShot,
                anchor: idx,
                lower_bound: lower,
                upper_bound: upper,
                draw,
            });
            idx = next_after(segments, idx, end);
        }
        i += 1;
    }
    Ok(out)
}

/// Counts of windows breaking each structural property.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowViolations {
    /// Length differs from 8.05 s by more than 1e-9, or start is negative.
    pub length: usize,
    /// Multi-shot without a split inside, or single-shot not inside one scene.
    pub scene_rule: usize,
    /// Starts before the previous segment's end or after its anchor's start.
    pub truncation: usize,
    /// Starts before the previous emitted window ends.
    pub overlap: usize,
    /// Start outside its recorded bounds or inconsistent with its draw.
    pub draw: usize,
}

impl WindowViolations {
    pub fn total(&self) -> usize {
        self.length + self.scene_rule + self.truncation + self.overlap + self.draw
    }

    pub fn add(&mut self, o: &Self) {
        self.length += o.length;
        self.scene_rule += o.scene_rule;
        self.truncation += o.truncation;
        self.overlap += o.overlap;
        self.draw += o.draw;
    }
}

/// Checks emitted windows against the window properties.
pub fn window_violations(
    segments: &[SpeechSegment],
    splits: &[f64],
    windows: &[ClipWindow],
) -> WindowViolations {
    let mut v = WindowViolations::default();
    for (k, w) in windows.iter().enumerate() {
        if w.start < 0.0 || ((w.end - w.start) - WINDOW_SECONDS).abs() > 1e-9 {
            v.length += 1;
        }
        let ok_scene = match w.kind {
            WindowKind::MultiShot => splits.iter().any(|&p| w.start <= p && p <= w.end),
            WindowKind::SingleShot => {
                !splits.iter().any(|&p| w.start < p && p < w.end)
                    && splits.windows(2).any(|s| s[0] <= w.start && w.end < s[1])
            }
        };
        if !ok_scene {
            v.scene_rule += 1;
        }
        let anchor = &segments[w.anchor];
        let after_prev = w.anchor == 0 || w.start >= segments[w.anchor - 1].end;
        if !(after_prev && w.start <= anchor.start) {
            v.truncation += 1;
        }
        if k > 0 && w.start < windows[k - 1].end {
            v.overlap += 1;
        }
        let drawn_ok = match w.draw {
            None => w.start == anchor.start,
            Some(u) => {
                (0.0..1.0).contains(&u)
                    && w.start == w.lower_bound + u * (w.upper_bound - w.lower_bound)
            }
        };
        if !(drawn_ok && w.lower_bound <= w.start && w.start <= w.upper_bound) {
            v.draw += 1;
        }
    }
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowMode {
    Multi,
    Single,
}

/// VAD and scene-detection output for one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipTimeline {
    pub clip_id: String,
    pub segments: Vec<SpeechSegment>,
    pub splits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipWindows {
    pub clip_id: String,
    pub seed: u64,
    pub windows: Vec<ClipWindow>,
}

/// Per-clip generator seed: the first 8 bytes of
/// `sha256(clip_id || 0x00 || run_seed_le)`.
pub fn clip_seed(clip_id: &str, run_seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(clip_id.as_bytes());
    h.update([0u8]);
    h.update(run_seed.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn windows_for_clip(
    clip: &ClipTimeline,
    mode: WindowMode,
    opts: WindowOptions,
    run_seed: u64,
) -> Result<ClipWindows> {
    let seed = clip_seed(&clip.clip_id, run_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let windows = match mode {
        WindowMode::Multi => multi_shot_windows_with(&clip.segments, &clip.splits, opts, &mut rng),
        WindowMode::Single => single_shot_windows_with(&clip.segments, &clip.splits, opts, &mut rng),
    }
    .map_err(|e| contract_err!("clip {}: {e}", clip.clip_id))?;
    Ok(ClipWindows {
        clip_id: clip.clip_id.clone(),
        seed,
        windows,
    })
}

/// Externally computed scores for one clip. Absent fields fail any gate
/// that needs them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub clip_id: String,
    pub silence_ratio: Option<f64>,
    pub bandwidth_hz: Option<f64>,
    pub audiobox_pq: Option<f64>,
    pub audiobox_cu: Option<f64>,
    pub audiobox_ce: Option<f64>,
    pub dover_aesthetic: Option<f64>,
    pub dover_technical: Option<f64>,
    pub ib_score: Option<f64>,
    pub desync: Option<f64>,
    pub eat_speech: Option<bool>,
    pub eat_singing: Option<bool>,
    pub lse_d: Option<f64>,
    pub lse_c: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateProfile {
    /// Audio, video and alignment thresholds.
    Stage2,
    /// Stage 2 plus both speech and singing tags.
    Speech,
    /// Stage 2 plus lip-sync scores and a stricter technical score.
    Phase2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cmp {
    Lt,
    Le,
    Gt,
    Ge,
}

impl Cmp {
    pub fn holds(self, x: f64, threshold: f64) -> bool {
        match self {
            Cmp::Lt => x < threshold,
            Cmp::Le => x <= threshold,
            Cmp::Gt => x > threshold,
            Cmp::Ge => x >= threshold,
        }
    }

    /// Whether larger values are better under this comparison.
    pub fn larger_is_better(self) -> bool {
        matches!(self, Cmp::Gt | Cmp::Ge)
    }
}

/// One threshold row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Threshold {
    pub field: &'static str,
    pub cmp: Cmp,
    pub value: f64,
}

const fn th(field: &'static str, cmp: Cmp, value: f64) -> Threshold {
    Threshold { field, cmp, value }
}

/// Audio then video thresholds, all conjunctive.
pub const QUALITY_THRESHOLDS: [Threshold; 7] = [
    th("silence_ratio", Cmp::Lt, 0.8),
    th("bandwidth_hz", Cmp::Gt, 1000.0),
    th("audiobox_pq", Cmp::Gt, 5.0),
    th("audiobox_cu", Cmp::Gt, 4.5),
    th("audiobox_ce", Cmp::Gt, 2.5),
    th("dover_aesthetic", Cmp::Gt, 0.85),
    th("dover_technical", Cmp::Gt, 0.05),
];

/// Either arm passes the alignment gate.
pub const ALIGNMENT_THRESHOLDS: [Threshold; 2] = [
    th("ib_score", Cmp::Ge, 0.2),
    th("desync", Cmp::Le, 0.5),
];

pub const PHASE2_THRESHOLDS: [Threshold; 3] = [
    th("lse_d", Cmp::Le, 9.5),
    th("lse_c", Cmp::Ge, 4.5),
    th("dover_technical", Cmp::Gt, 0.15),
];

impl MetricRecord {
    pub fn get(&self, field: &str) -> Option<f64> {
        match field {
            "silence_ratio" => self.silence_ratio,
            "bandwidth_hz" => self.bandwidth_hz,
            "audiobox_pq" => self.audiobox_pq,
            "audiobox_cu" => self.audiobox_cu,
            "audiobox_ce" => self.audiobox_ce,
            "dover_aesthetic" => self.dover_aesthetic,
            "dover_technical" => self.dover_technical,
            "ib_score" => self.ib_score,
            "desync" => self.desync,
            "lse_d" => self.lse_d,
            "lse_c" => self.lse_c,
            _ => None,
        }
    }

    pub fn set(&mut self, field: &str, v: f64) -> Result<()> {
        let slot = match field {
            "silence_ratio" => &mut self.silence_ratio,
            "bandwidth_hz" => &mut self.bandwidth_hz,
            "audiobox_pq" => &mut self.audiobox_pq,
            "audiobox_cu" => &mut self.audiobox_cu,
            "audiobox_ce" => &mut self.audiobox_ce,
            "dover_aesthetic" => &mut self.dover_aesthetic,
            "dover_technical" => &mut self.dover_technical,
            "ib_score" => &mut self.ib_score,
            "desync" => &mut self.desync,
            "lse_d" => &mut self.lse_d,
            "lse_c" => &mut self.lse_c,
            _ => return Err(contract_err!("unknown metric field {field}")),
        };
        *slot = Some(v);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub clip_id: String,
    pub pass: bool,
    /// Failed rules, e.g. `"silence_ratio"` or `"missing:ib_score"`.
    pub reasons: Vec<String>,
}

fn check(r: &MetricRecord, t: &Threshold, reasons: &mut Vec<String>) -> bool {
    match r.get(t.field) {
        None => {
            reasons.push(format!("missing:{}", t.field));
            false
        }
        Some(v) if !v.is_finite() => {
            reasons.push(format!("nonfinite:{}", t.field));
            false
        }
        Some(v) if !t.cmp.holds(v, t.value) => {
            reasons.push(t.field.to_string());
            false
        }
        Some(_) => true,
    }
}

pub fn apply_gates(r: &MetricRecord, profile: GateProfile) -> GateDecision {
    let mut reasons = Vec::new();
    for t in &QUALITY_THRESHOLDS {
        check(r, t, &mut reasons);
    }
    let mut arm_reasons = Vec::new();
    let arms: Vec<bool> = ALIGNMENT_THRESHOLDS
        .iter()
        .map(|t| check(r, t, &mut arm_reasons))
        .collect();
    if !arms.iter().any(|&a| a) {
        reasons.push("alignment".into());
        reasons.extend(arm_reasons);
    }
    match profile {
        GateProfile::Stage2 => {}
        GateProfile::Speech => {
            for (name, v) in [("eat_speech", r.eat_speech), ("eat_singing", r.eat_singing)] {
                match v {
                    None => reasons.push(format!("missing:{name}")),
                    Some(false) => reasons.push(name.to_string()),
                    Some(true) => {}
                }
            }
        }
        GateProfile::Phase2 => {
            for t in &PHASE2_THRESHOLDS {
                check(r, t, &mut reasons);
            }
        }
    }
    GateDecision {
        clip_id: r.clip_id.clone(),
        pass: reasons.is_empty(),
        reasons,
    }
}

/// Stage durations (or counts) in pipeline order; the first is the raw total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCount {
    pub stage: String,
    pub count: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub stages: Vec<StageCount>,
    /// `100 * count / raw`, rounded to two decimals.
    pub percent: Vec<f64>,
}

pub fn retention_report(stages: &[StageCount]) -> Result<RetentionReport> {
    let raw = stages
        .first()
        .ok_or_else(|| contract_err!("retention report needs the raw stage"))?
        .count;
    if !(raw > 0.0) {
        return Err(domain_err!("raw count must be positive"));
    }
    if stages.iter().any(|s| !(s.count >= 0.0)) {
        return Err(domain_err!("stage counts must be non-negative"));
    }
    if stages.windows(2).any(|w| w[1].count > w[0].count) {
        return Err(contract_err!("stage counts must be non-increasing"));
    }
    let percent = stages
        .iter()
        .map(|s| (100.0 * s.count / raw * 100.0).round() / 100.0)
        .collect();
    Ok(RetentionReport {
        stages: stages.to_vec(),
        percent,
    })
}

/// Counts clips surviving each profile, keyed by profile name.
pub fn gate_summary(records: &[MetricRecord]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (name, p) in [
        ("phase2", GateProfile::Phase2),
        ("speech", GateProfile::Speech),
        ("stage2", GateProfile::Stage2),
    ] {
        out.insert(
            name.to_string(),
            records.iter().filter(|r| apply_gates(r, p).pass).count(),
        );
    }
    out.insert("total".into(), records.len());
    out
}
