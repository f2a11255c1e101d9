use bimodal_core::curation::{
    apply_gates, frames_for_window, multi_shot_windows, multi_shot_windows_with,
    retention_report, single_shot_windows, single_shot_windows_with, window_violations,
    windows_for_clip, ClipTimeline, ClipWindow, GateProfile, MetricRecord, SpeechSegment,
    StageCount, WindowMode, WindowOptions, WindowViolations, ALIGNMENT_THRESHOLDS,
    PHASE2_THRESHOLDS, QUALITY_THRESHOLDS, WINDOW_SECONDS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn segs(v: &[(f64, f64)]) -> Vec<SpeechSegment> {
    v.iter().map(|&(start, end)| SpeechSegment { start, end }).collect()
}

fn spans(w: &[ClipWindow]) -> Vec<(f64, f64)> {
    w.iter().map(|w| (w.start, w.end)).collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn frames_per_window() {
    assert_eq!(frames_for_window(24).unwrap(), 193);
    assert_eq!(frames_for_window(1).unwrap(), 9);
    assert_eq!(frames_for_window(30).unwrap(), 241);
    assert!(frames_for_window(0).is_err());
}

#[test]
fn multi_shot_fixtures() {
    // second window is drawn from [7.975, 12] and cannot reach the only split
    let w = multi_shot_windows(&segs(&[(2.0, 5.0), (12.0, 15.0)]), &[4.0], &mut rng(0)).unwrap();
    assert_eq!(spans(&w), vec![(2.0, 2.0 + WINDOW_SECONDS)]);
    assert_eq!(w[0].draw, None);

    let w = multi_shot_windows(&segs(&[(2.0, 5.0), (12.0, 15.0)]), &[], &mut rng(0)).unwrap();
    assert!(w.is_empty());

    let w = multi_shot_windows(&segs(&[(0.0, 1.0)]), &[3.0], &mut rng(0)).unwrap();
    assert_eq!(spans(&w), vec![(0.0, 8.05)]);

    // second anchor: lower = max(1, 3, 9 - 4.025) = 4.975, upper = 9; end >= 13.025 covers 12
    let w = multi_shot_windows(&segs(&[(0.0, 1.0), (9.0, 10.0)]), &[3.0, 12.0], &mut rng(5)).unwrap();
    assert_eq!(w.len(), 2);
    assert_eq!((w[1].anchor, w[1].lower_bound, w[1].upper_bound), (1, 9.0 - 4.025, 9.0));
    let u = w[1].draw.unwrap();
    assert_eq!(w[1].start, 4.975 + u * (9.0 - 4.975));
}

#[test]
fn multi_shot_lower_bound_includes_last_split() {
    // lower = max(6, 10, 14 - 4.025) = 10
    let s = segs(&[(0.0, 1.0), (5.0, 6.0), (14.0, 15.0)]);
    let w = multi_shot_windows(&s, &[10.0, 16.0], &mut rng(1)).unwrap();
    let last = w.last().unwrap();
    assert_eq!((last.anchor, last.lower_bound, last.upper_bound), (2, 10.0, 14.0));
}

#[test]
fn single_shot_fixtures() {
    let w = single_shot_windows(&segs(&[(3.0, 6.0)]), &[0.0, 20.0], &mut rng(0)).unwrap();
    assert_eq!(spans(&w), vec![(3.0, 3.0 + WINDOW_SECONDS)]);

    let w = single_shot_windows(&segs(&[(1.0, 2.0)]), &[0.0, 6.0], &mut rng(0)).unwrap();
    assert!(w.is_empty());

    // second start lies in [11.975, 16], so its end is past 20 and the loop breaks
    let w = single_shot_windows(&segs(&[(1.0, 2.0), (16.0, 17.0)]), &[0.0, 20.0], &mut rng(0)).unwrap();
    assert_eq!(spans(&w), vec![(1.0, 1.0 + WINDOW_SECONDS)]);

    // the short first scene yields nothing; the second anchors on segment 0
    let w = single_shot_windows(&segs(&[(6.0, 7.0)]), &[0.0, 5.0, 30.0], &mut rng(0)).unwrap();
    assert_eq!(spans(&w), vec![(6.0, 6.0 + WINDOW_SECONDS)]);
}

#[test]
fn malformed_inputs_are_rejected() {
    let mut r = rng(0);
    assert!(multi_shot_windows(&segs(&[(3.0, 5.0), (4.0, 6.0)]), &[1.0], &mut r).is_err());
    assert!(multi_shot_windows(&segs(&[(5.0, 3.0)]), &[1.0], &mut r).is_err());
    assert!(single_shot_windows(&segs(&[(1.0, 2.0)]), &[5.0, 5.0], &mut r).is_err());
    assert!(single_shot_windows(&segs(&[(-1.0, 2.0)]), &[0.0, 9.0], &mut r).is_err());
}

fn random_instance(r: &mut ChaCha8Rng) -> (Vec<SpeechSegment>, Vec<f64>) {
    let n = r.random_range(0..8);
    let mut t = r.random_range(0.0..3.0);
    let mut s = Vec::with_capacity(n);
    for _ in 0..n {
        let start = t;
        let end = start + r.random_range(0.1..6.0);
        s.push(SpeechSegment { start, end });
        t = end + r.random_range(0.0..6.0);
    }
    let k = r.random_range(0..6);
    let mut splits: Vec<f64> = (0..k).map(|_| r.random_range(0.0..t + 5.0)).collect();
    splits.sort_by(f64::total_cmp);
    splits.dedup();
    (s, splits)
}

fn sweep(opts: WindowOptions, instances: usize, seed: u64) -> (WindowViolations, usize) {
    let mut r = rng(seed);
    let mut total = WindowViolations::default();
    let mut windows = 0;
    for _ in 0..instances {
        let (s, p) = random_instance(&mut r);
        let m = multi_shot_windows_with(&s, &p, opts, &mut r).unwrap();
        let g = single_shot_windows_with(&s, &p, opts, &mut r).unwrap();
        windows += m.len() + g.len();
        total.add(&window_violations(&s, &p, &m));
        total.add(&window_violations(&s, &p, &g));
    }
    (total, windows)
}

#[test]
fn randomized_window_properties() {
    let (v, n) = sweep(WindowOptions::default(), 100_000, 11);
    assert!(n > 50_000);
    assert_eq!((v.length, v.scene_rule, v.truncation, v.draw), (0, 0, 0, 0), "{v:?}");
}

#[test]
fn reference_windows_can_overlap() {
    // window 1 is (0, 8.05); window 2 may start as early as 4.975
    let s = segs(&[(0.0, 1.0), (9.0, 10.0)]);
    let overlapping = (0..64)
        .filter(|&seed| {
            let w = multi_shot_windows(&s, &[3.0, 12.0], &mut rng(seed)).unwrap();
            window_violations(&s, &[3.0, 12.0], &w).overlap > 0
        })
        .count();
    assert!(overlapping > 0);
    let s = segs(&[(1.0, 2.0), (10.0, 11.0)]);
    let w = single_shot_windows(&s, &[0.0, 30.0], &mut rng(0)).unwrap();
    assert_eq!(w[1].lower_bound, 10.0 - 4.025);
}

#[test]
fn clamped_windows_never_overlap() {
    let opts = WindowOptions { clamp_to_previous_window: true };
    let (v, n) = sweep(opts, 100_000, 12);
    assert!(n > 50_000);
    assert_eq!(v.total(), 0, "{v:?}");
}

#[test]
fn per_clip_seeding_is_deterministic() {
    let clip = ClipTimeline {
        clip_id: "clip-0042".into(),
        segments: segs(&[(0.0, 1.0), (9.0, 10.0), (19.0, 21.0), (30.0, 31.0)]),
        splits: vec![3.0, 12.0, 25.0, 36.0],
    };
    for mode in [WindowMode::Multi, WindowMode::Single] {
        let a = windows_for_clip(&clip, mode, WindowOptions::default(), 7).unwrap();
        let b = windows_for_clip(&clip, mode, WindowOptions::default(), 7).unwrap();
        assert_eq!(a, b);
    }
    let a = windows_for_clip(&clip, WindowMode::Multi, WindowOptions::default(), 7).unwrap();
    let c = windows_for_clip(&clip, WindowMode::Multi, WindowOptions::default(), 8).unwrap();
    assert_ne!(a.seed, c.seed);
}

fn passing() -> MetricRecord {
    MetricRecord {
        clip_id: "c".into(),
        silence_ratio: Some(0.5),
        bandwidth_hz: Some(8000.0),
        audiobox_pq: Some(6.0),
        audiobox_cu: Some(5.0),
        audiobox_ce: Some(3.0),
        dover_aesthetic: Some(0.9),
        dover_technical: Some(0.2),
        ib_score: Some(0.25),
        desync: Some(0.6),
        eat_speech: Some(true),
        eat_singing: Some(true),
        lse_d: Some(8.0),
        lse_c: Some(5.0),
    }
}

#[test]
fn gate_examples() {
    let mut r = passing();
    r.dover_technical = Some(0.1);
    assert!(apply_gates(&r, GateProfile::Stage2).pass);
    r.silence_ratio = Some(0.8);
    let d = apply_gates(&r, GateProfile::Stage2);
    assert!(!d.pass);
    assert_eq!(d.reasons, vec!["silence_ratio".to_string()]);

    let mut r = passing();
    r.ib_score = Some(0.1);
    r.desync = Some(0.4);
    assert!(apply_gates(&r, GateProfile::Stage2).pass);
    r.desync = Some(0.6);
    assert!(apply_gates(&r, GateProfile::Stage2).reasons.contains(&"alignment".to_string()));

    let mut r = passing();
    r.audiobox_ce = None;
    assert_eq!(apply_gates(&r, GateProfile::Stage2).reasons, vec!["missing:audiobox_ce".to_string()]);
}

fn nudge(v: f64, up: bool) -> f64 {
    let step = 1e-9 * v.abs().max(1.0);
    if up { v + step } else { v - step }
}

#[test]
fn gate_boundary_matrix() {
    for t in QUALITY_THRESHOLDS.iter().chain(PHASE2_THRESHOLDS.iter()) {
        let profile = if PHASE2_THRESHOLDS.contains(t) { GateProfile::Phase2 } else { GateProfile::Stage2 };
        let strict = matches!(t.cmp, bimodal_core::curation::Cmp::Lt | bimodal_core::curation::Cmp::Gt);
        let good = t.cmp.larger_is_better();
        let at = |v: f64| {
            let mut r = passing();
            r.set(t.field, v).unwrap();
            apply_gates(&r, profile).pass
        };
        assert_eq!(at(t.value), !strict, "{} at boundary", t.field);
        assert!(at(nudge(t.value, good)), "{} just inside", t.field);
        assert!(!at(nudge(t.value, !good)), "{} just outside", t.field);
    }
    for (i, t) in ALIGNMENT_THRESHOLDS.iter().enumerate() {
        let other = ALIGNMENT_THRESHOLDS[1 - i];
        let at = |v: f64| {
            let mut r = passing();
            r.set(other.field, nudge(other.value, !other.cmp.larger_is_better())).unwrap();
            r.set(t.field, v).unwrap();
            apply_gates(&r, GateProfile::Stage2).pass
        };
        assert!(at(t.value), "{} is non-strict", t.field);
        assert!(at(nudge(t.value, t.cmp.larger_is_better())));
        assert!(!at(nudge(t.value, !t.cmp.larger_is_better())));
    }
}

#[test]
fn speech_profile_needs_both_tags() {
    for (speech, singing, pass) in [(true, true, true), (true, false, false), (false, true, false)] {
        let mut r = passing();
        r.eat_speech = Some(speech);
        r.eat_singing = Some(singing);
        assert_eq!(apply_gates(&r, GateProfile::Speech).pass, pass);
        assert!(apply_gates(&r, GateProfile::Stage2).pass);
    }
    let mut r = passing();
    r.lse_d = None;
    assert!(apply_gates(&r, GateProfile::Speech).pass);
    assert!(!apply_gates(&r, GateProfile::Phase2).pass);
    let mut r = passing();
    r.dover_technical = Some(0.1);
    assert!(!apply_gates(&r, GateProfile::Phase2).pass);
}

#[test]
fn gates_are_monotone() {
    let mut r = rng(3);
    let fields: Vec<_> = QUALITY_THRESHOLDS
        .iter()
        .chain(ALIGNMENT_THRESHOLDS.iter())
        .chain(PHASE2_THRESHOLDS.iter())
        .copied()
        .collect();
    for _ in 0..20_000 {
        let mut rec = passing();
        for t in &fields {
            let spread = 0.2 * t.value.abs().max(1.0);
            rec.set(t.field, t.value + r.random_range(-spread..spread)).unwrap();
        }
        let t = fields[r.random_range(0..fields.len())];
        let delta = r.random_range(0.0..0.3 * t.value.abs().max(1.0));
        let mut better = rec.clone();
        let v = rec.get(t.field).unwrap();
        better.set(t.field, if t.cmp.larger_is_better() { v + delta } else { v - delta }).unwrap();
        for p in [GateProfile::Stage2, GateProfile::Speech, GateProfile::Phase2] {
            assert!(!apply_gates(&rec, p).pass || apply_gates(&better, p).pass);
        }
    }
}

#[test]
fn retention_ratios() {
    let stage = |name: &str, count: f64| StageCount { stage: name.into(), count };
    let r = retention_report(&[
        stage("raw", 10_000.0),
        stage("quality", 8_457.0),
        stage("speech", 5_875.0),
        stage("stage2", 2_639.0),
    ])
    .unwrap();
    assert_eq!(r.percent, vec![100.0, 84.57, 58.75, 26.39]);
    assert!(retention_report(&[stage("raw", 0.0)]).is_err());
    assert!(retention_report(&[stage("raw", 10.0), stage("x", 11.0)]).is_err());
}
