//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p bimodal-verify --test acceptance -- 5 9`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::rc::Rc;
use std::time::{Duration, Instant};

use bimodal_core::autodiff::{concat_cols, concat_rows, grad_check, Tensor, Var};
use bimodal_core::curation::{
    apply_gates, frames_for_window, multi_shot_windows, multi_shot_windows_with, retention_report,
    single_shot_windows, single_shot_windows_with, window_violations, ClipWindow, Cmp, GateProfile,
    MetricRecord, SpeechSegment, StageCount, WindowOptions, WindowViolations, ALIGNMENT_THRESHOLDS,
    PHASE2_THRESHOLDS, QUALITY_THRESHOLDS, WINDOW_SECONDS,
};
use bimodal_core::engine::experiment::{run_sync_experiment, SyncExperimentConfig};
use bimodal_core::guidance::{
    combine, combine_swapped, combine_unreduced, plan_branches, Branch, BranchOutputs,
    GuidanceScales, VelocityPair,
};
use bimodal_core::metrics::{bootstrap_ci, cpcer, elo_ratings, EloConfig, Outcome, SpeakerTranscript, Vote};
use bimodal_core::model::{composed_grad_check, DualTower, ExpertConfig, GradProbe, ModelConfig};
use bimodal_core::rope::{apply_rotary, RotaryBasis, TimeGrid, DEFAULT_ROPE_BASE};
use bimodal_core::schedule::{LossWeights, SigmaShiftSchedule, SigmaVariant};
use bimodal_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> std::result::Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || {
        format!("took {:.1} s, limit {limit_s} s", elapsed.as_secs_f64())
    })
}

// ---------------------------------------------------------------- 1

fn weighted_sum<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = Tensor::randn(&y.shape(), 1.0, &mut rng(seed));
    Ok(y.mul(y.tape().leaf(w))?.sum())
}

fn primitive_errors() -> Result<Vec<(&'static str, f64)>> {
    const EPS: f64 = 1e-5;
    let a = Tensor::randn(&[3, 4], 1.0, &mut rng(1));
    let b = Tensor::randn(&[4, 5], 1.0, &mut rng(2));
    let k = Tensor::randn(&[6, 4], 1.0, &mut rng(3));
    let row = Tensor::randn(&[4], 1.0, &mut rng(4));
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng(5));
    let table = Tensor::randn(&[6, 4], 1.0, &mut rng(6));
    let cos: Rc<Vec<f64>> = Rc::new((0..6).map(|i| (0.3 * i as f64).cos()).collect());
    let sin: Rc<Vec<f64>> = Rc::new((0..6).map(|i| (0.3 * i as f64).sin()).collect());
    Ok(vec![
        ("matmul.lhs", grad_check(|t, x| weighted_sum(x.matmul(t.leaf(b.clone()))?, 10), &x, EPS)?),
        ("matmul.rhs", grad_check(|t, b| weighted_sum(t.leaf(a.clone()).matmul(b)?, 11), &b, EPS)?),
        ("matmul_t.lhs", grad_check(|t, x| weighted_sum(x.matmul_t(t.leaf(k.clone()))?, 12), &x, EPS)?),
        ("matmul_t.rhs", grad_check(|t, k| weighted_sum(t.leaf(a.clone()).matmul_t(k)?, 13), &k, EPS)?),
        ("transpose", grad_check(|_, x| weighted_sum(x.transpose()?, 14), &x, EPS)?),
        ("add", grad_check(|t, x| weighted_sum(x.add(t.leaf(a.clone()))?, 15), &x, EPS)?),
        ("sub", grad_check(|t, x| weighted_sum(t.leaf(a.clone()).sub(x)?, 16), &x, EPS)?),
        ("mul", grad_check(|t, x| weighted_sum(x.mul(t.leaf(a.clone()))?, 17), &x, EPS)?),
        ("mul.self", grad_check(|_, x| weighted_sum(x.mul(x)?, 18), &x, EPS)?),
        ("scale", grad_check(|_, x| weighted_sum(x.scale(-2.5), 19), &x, EPS)?),
        ("add_row.row", grad_check(|t, r| weighted_sum(t.leaf(a.clone()).add_row(r)?, 20), &row, EPS)?),
        ("add_row.lhs", grad_check(|t, x| weighted_sum(x.add_row(t.leaf(row.clone()))?, 21), &x, EPS)?),
        ("mul_row.row", grad_check(|t, r| weighted_sum(t.leaf(a.clone()).mul_row(r)?, 22), &row, EPS)?),
        ("mul_row.lhs", grad_check(|t, x| weighted_sum(x.mul_row(t.leaf(row.clone()))?, 23), &x, EPS)?),
        ("silu", grad_check(|_, x| weighted_sum(x.silu(), 24), &x, EPS)?),
        ("softmax_rows", grad_check(|_, x| weighted_sum(x.softmax_rows()?, 25), &x, EPS)?),
        ("rms_norm.x", grad_check(|t, x| weighted_sum(x.rms_norm(t.leaf(row.clone()))?, 26), &x, EPS)?),
        ("rms_norm.gain", grad_check(|t, g| weighted_sum(t.leaf(a.clone()).rms_norm(g)?, 27), &row, EPS)?),
        ("slice_cols", grad_check(|_, x| weighted_sum(x.slice_cols(1, 2)?, 28), &x, EPS)?),
        ("slice_rows", grad_check(|_, x| weighted_sum(x.slice_rows(1, 2)?, 29), &x, EPS)?),
        ("reshape", grad_check(|_, x| weighted_sum(x.reshape(&[2, 6])?, 30), &x, EPS)?),
        ("sum", grad_check(|_, x| Ok(x.sum()), &x, EPS)?),
        ("mean", grad_check(|_, x| Ok(x.mean()), &x, EPS)?),
        (
            "rotate_pairs",
            grad_check(|_, x| weighted_sum(x.rotate_pairs(cos.clone(), sin.clone(), 4)?, 31), &x, EPS)?,
        ),
        (
            "concat_cols",
            grad_check(|t, x| weighted_sum(concat_cols(&[x, t.leaf(a.clone()), x])?, 32), &x, EPS)?,
        ),
        (
            "concat_rows",
            grad_check(|t, x| weighted_sum(concat_rows(&[t.leaf(a.clone()), x])?, 33), &x, EPS)?,
        ),
        ("gather", grad_check(|t, tb| weighted_sum(t.gather(tb, &[2, 0, 2, 5])?, 34), &table, EPS)?),
    ])
}

fn composed_error(mut cfg: ModelConfig, seed: u64) -> Result<(f64, String)> {
    cfg.zero_init = false;
    let mut r = rng(seed);
    let model = DualTower::new(cfg.clone(), &mut r)?;
    let probe = GradProbe::random(&cfg, &mut r);
    composed_grad_check(&model, &probe, LossWeights::default(), 3, 1e-5)
}

fn gradients() -> Check {
    let t0 = Instant::now();
    let prims = primitive_errors().map_err(|e| e.to_string())?;
    let (pname, perr) = prims.iter().fold(("", 0.0), |w, &(n, e)| if e > w.1 { (n, e) } else { w });
    for (n, e) in &prims {
        ensure(*e <= 1e-6, || format!("{n}: rel. err {e:.2e} > 1e-6"))?;
    }
    let mut composed = Vec::new();
    let mut experts = ModelConfig::default();
    experts.experts = Some(ExpertConfig { t_split: 0.5 });
    for (label, cfg) in [("default", ModelConfig::default()), ("two-expert", experts)] {
        let (e, at) = composed_error(cfg, 7).map_err(|e| e.to_string())?;
        ensure(e <= 1e-4, || format!("{label} model loss: rel. err {e:.2e} at {at} > 1e-4"))?;
        composed.push(format!("{label} {e:.1e}"));
    }
    within(t0.elapsed(), 120.0)?;
    Ok(format!(
        "{} primitives, worst {pname} {perr:.1e}; model loss {}",
        prims.len(),
        composed.join(", ")
    ))
}

// ---------------------------------------------------------------- 2

fn pair(r: &mut ChaCha8Rng) -> VelocityPair {
    VelocityPair::new(Tensor::randn(&[12, 4], 1.0, r), Tensor::randn(&[48, 4], 1.0, r))
}

fn branches(r: &mut ChaCha8Rng) -> BranchOutputs {
    BranchOutputs {
        uu: Some(pair(r)),
        ub: Some(pair(r)),
        tu: Some(pair(r)),
        tb: Some(pair(r)),
    }
}

fn restrict(b: &BranchOutputs, keep: &[Branch]) -> BranchOutputs {
    let mut out = BranchOutputs::default();
    for &k in keep {
        let v = match k {
            Branch::Uncond => &b.uu,
            Branch::BridgeOnly => &b.ub,
            Branch::TextOnly => &b.tu,
            Branch::Full => &b.tb,
        };
        out.set(k, v.clone().expect("all branches present"));
    }
    out
}

fn lerp(a: &VelocityPair, b: &VelocityPair, s: f64) -> VelocityPair {
    VelocityPair::new(
        a.video.zip_map(&b.video, |u, t| u + s * (t - u)).unwrap(),
        a.audio.zip_map(&b.audio, |u, t| u + s * (t - u)).unwrap(),
    )
}

fn max_diff(a: &VelocityPair, b: &VelocityPair) -> f64 {
    a.video.max_abs_diff(&b.video).max(a.audio.max_abs_diff(&b.audio))
}

fn guidance() -> Check {
    use Branch::*;
    let t0 = Instant::now();
    let mut r = rng(2);
    let mut swapped_gap = f64::INFINITY;
    for _ in 0..1000 {
        let b = branches(&mut r);
        let (uu, ub, tb) = (b.uu.as_ref().unwrap(), b.ub.as_ref().unwrap(), b.tb.as_ref().unwrap());
        ensure(combine(&b, GuidanceScales::NONE).unwrap() == *tb, || "telescoping at (1, 1)".into())?;

        let s_t = r.random_range(0.5..10.0);
        let text = GuidanceScales::new(1.0, s_t).unwrap();
        let want = lerp(ub, tb, s_t);
        let got = combine(&restrict(&b, &plan_branches(text).branches), text).unwrap();
        ensure(got == want, || format!("s_B = 1 reduction differs at s_T = {s_t}"))?;
        ensure(max_diff(&combine_unreduced(&b, text).unwrap(), &want) <= 1e-12, || {
            "s_B = 1 reduction disagrees with the three-term form".into()
        })?;

        let s = r.random_range(0.5..10.0);
        let joint = GuidanceScales::new(s, s).unwrap();
        let want = lerp(uu, tb, s);
        let got = combine(&restrict(&b, &plan_branches(joint).branches), joint).unwrap();
        ensure(got == want, || format!("s_B = s_T reduction differs at {s}"))?;

        let sw = combine_swapped(&b, text).unwrap();
        swapped_gap = swapped_gap.min(max_diff(&sw, &lerp(ub, tb, s_t)));
    }
    ensure(swapped_gap > 1e-6, || format!("swapped form matched the text-only reduction ({swapped_gap:.1e})"))?;
    let table = [
        ((1.0, 1.0), vec![Full]),
        ((1.0, 7.5), vec![BridgeOnly, Full]),
        ((3.5, 3.5), vec![Uncond, Full]),
        ((2.0, 5.0), vec![Uncond, BridgeOnly, Full]),
    ];
    for ((s_b, s_t), want) in table {
        let p = plan_branches(GuidanceScales::new(s_b, s_t).unwrap());
        ensure(p.branches == want, || format!("plan at ({s_b}, {s_t}) is {:?}", p.branches))?;
    }
    within(t0.elapsed(), 10.0)?;
    Ok(format!("1000 random branch sets; NFE 1/2/2/3 plan table; swapped differs by >= {swapped_gap:.1e}"))
}

// ---------------------------------------------------------------- 3

fn schedules() -> Check {
    let t0 = Instant::now();
    for shift in [0.5, 1.0, 3.0, 5.0, 12.0] {
        let n = SigmaShiftSchedule::normalized(shift).unwrap();
        ensure(n.sigma(0.0).unwrap() == 0.0 && n.sigma(1.0).unwrap() == 1.0, || {
            format!("normalized endpoints at shift {shift}")
        })?;
        let l = SigmaShiftSchedule::new(shift, SigmaVariant::Literal).unwrap();
        for t in [0.0, 0.5] {
            ensure(n.sigma(t).unwrap() == l.sigma(t).unwrap(), || {
                format!("variants differ at t = {t}, shift {shift}")
            })?;
        }
    }
    let id = SigmaShiftSchedule::normalized(1.0).unwrap();
    for i in 0..=1000 {
        let t = i as f64 / 1000.0;
        ensure(id.sigma(t).unwrap() == t, || format!("shift 1 is not the identity at {t}"))?;
    }
    let lit = SigmaShiftSchedule::new(5.0, SigmaVariant::Literal).unwrap().sigma(1.0).unwrap();
    ensure(lit == 5.0, || format!("literal sigma(1, shift 5) = {lit}"))?;
    within(t0.elapsed(), 1.0)?;
    Ok("endpoints, identity, variant agreement at {0, 0.5}, literal sigma(1) = 5".into())
}

// ---------------------------------------------------------------- 4

fn rope() -> Check {
    let grid = TimeGrid::new(1.0, 4.0).unwrap();
    let b = RotaryBasis::new(16, DEFAULT_ROPE_BASE).unwrap();
    let mut worst = 0.0_f64;
    for i in 0..64 {
        for m in 0..8 {
            worst = worst.max((b.angle(grid.position_video(i), m) - b.angle(grid.position_audio(4 * i), m)).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("phase mismatch {worst:.1e}"))?;

    let mut r = rng(3);
    let b = RotaryBasis::new(8, DEFAULT_ROPE_BASE).unwrap();
    let q = Tensor::randn(&[48, 8], 1.0, &mut r);
    let k = Tensor::randn(&[12, 8], 1.0, &mut r);
    let (qp, kp) = (grid.audio_positions(48), grid.video_positions(12));
    let logits = |qp: &[f64], kp: &[f64]| {
        let rq = apply_rotary(&q, qp, &b).unwrap();
        let rk = apply_rotary(&k, kp, &b).unwrap();
        rq.matmul(&rk.transpose().unwrap()).unwrap()
    };
    let base = logits(&qp, &kp);
    let mut drift = 0.0_f64;
    for shift in [0.5, 3.0, 17.25, 100.0] {
        let qs: Vec<f64> = qp.iter().map(|p| p + shift).collect();
        let ks: Vec<f64> = kp.iter().map(|p| p + shift).collect();
        drift = drift.max(base.max_abs_diff(&logits(&qs, &ks)));
    }
    ensure(drift <= 1e-9, || format!("logits moved by {drift:.1e} under a time shift"))?;
    Ok(format!("phase gap {worst:.1e}, shift drift {drift:.1e}"))
}

// ---------------------------------------------------------------- 5

fn segs(v: &[(f64, f64)]) -> Vec<SpeechSegment> {
    v.iter().map(|&(start, end)| SpeechSegment { start, end }).collect()
}

fn spans(w: &[ClipWindow]) -> Vec<(f64, f64)> {
    w.iter().map(|w| (w.start, w.end)).collect()
}

fn window_fixtures() -> std::result::Result<(), String> {
    let w = WINDOW_SECONDS;
    let multi = |s: &[(f64, f64)], p: &[f64], seed| multi_shot_windows(&segs(s), p, &mut rng(seed)).unwrap();
    let single = |s: &[(f64, f64)], p: &[f64], seed| single_shot_windows(&segs(s), p, &mut rng(seed)).unwrap();

    ensure(spans(&multi(&[(2.0, 5.0), (12.0, 15.0)], &[4.0], 0)) == vec![(2.0, 2.0 + w)], || "multi-shot fixture 1".into())?;
    ensure(spans(&multi(&[(0.0, 1.0)], &[3.0], 0)) == vec![(0.0, 8.05)], || "multi-shot fixture 2".into())?;
    let m = multi(&[(0.0, 1.0), (9.0, 10.0)], &[3.0, 12.0], 5);
    let u = m.get(1).and_then(|x| x.draw).ok_or("multi-shot fixture 3: missing second window")?;
    ensure(
        m.len() == 2
            && (m[1].lower_bound, m[1].upper_bound) == (9.0 - 4.025, 9.0)
            && m[1].start == 4.975 + u * (9.0 - 4.975),
        || "multi-shot fixture 3".into(),
    )?;

    ensure(spans(&single(&[(3.0, 6.0)], &[0.0, 20.0], 0)) == vec![(3.0, 3.0 + w)], || "single-shot fixture 1".into())?;
    ensure(single(&[(1.0, 2.0)], &[0.0, 6.0], 0).is_empty(), || "single-shot fixture 2".into())?;
    ensure(
        spans(&single(&[(1.0, 2.0), (16.0, 17.0)], &[0.0, 20.0], 0)) == vec![(1.0, 1.0 + w)],
        || "single-shot fixture 3".into(),
    )?;
    ensure(frames_for_window(24).ok() == Some(193), || "frames_for_window(24) != 193".into())
}

fn random_timeline(r: &mut ChaCha8Rng) -> (Vec<SpeechSegment>, Vec<f64>) {
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

fn window_sweep(opts: WindowOptions) -> (WindowViolations, usize) {
    let mut r = rng(11);
    let mut total = WindowViolations::default();
    let mut n = 0;
    for _ in 0..100_000 {
        let (s, p) = random_timeline(&mut r);
        let m = multi_shot_windows_with(&s, &p, opts, &mut r).unwrap();
        let g = single_shot_windows_with(&s, &p, opts, &mut r).unwrap();
        n += m.len() + g.len();
        total.add(&window_violations(&s, &p, &m));
        total.add(&window_violations(&s, &p, &g));
    }
    (total, n)
}

fn windowing() -> Check {
    let t0 = Instant::now();
    window_fixtures()?;
    let (v, n) = window_sweep(WindowOptions::default());
    let (c, _) = window_sweep(WindowOptions { clamp_to_previous_window: true });
    within(t0.elapsed(), 30.0)?;
    let note = format!(
        "with clamp_to_previous_window: {} violations",
        c.total()
    );
    ensure(v.total() == 0, || {
        format!(
            "fixtures match, but in 1e5 instances ({n} windows): length {}, scene {}, truncation {}, overlap {}, draw {}; {note}",
            v.length, v.scene_rule, v.truncation, v.overlap, v.draw
        )
    })?;
    Ok(format!("6 fixtures, 193 frames, 1e5 instances ({n} windows) clean; {note}"))
}

// ---------------------------------------------------------------- 6

fn passing_record() -> MetricRecord {
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

fn nudge(v: f64, up: bool) -> f64 {
    let step = 1e-9 * v.abs().max(1.0);
    if up {
        v + step
    } else {
        v - step
    }
}

fn gates() -> Check {
    let t0 = Instant::now();
    let mut cells = 0;
    for t in QUALITY_THRESHOLDS.iter().chain(PHASE2_THRESHOLDS.iter()) {
        let profile = if PHASE2_THRESHOLDS.contains(t) { GateProfile::Phase2 } else { GateProfile::Stage2 };
        let strict = matches!(t.cmp, Cmp::Lt | Cmp::Gt);
        let good = t.cmp.larger_is_better();
        let at = |v: f64| {
            let mut r = passing_record();
            r.set(t.field, v).unwrap();
            apply_gates(&r, profile).pass
        };
        ensure(at(t.value) == !strict, || format!("{} at its boundary", t.field))?;
        ensure(at(nudge(t.value, good)) && !at(nudge(t.value, !good)), || format!("{} around its boundary", t.field))?;
        cells += 3;
    }
    for (i, t) in ALIGNMENT_THRESHOLDS.iter().enumerate() {
        let other = ALIGNMENT_THRESHOLDS[1 - i];
        let at = |v: f64| {
            let mut r = passing_record();
            r.set(other.field, nudge(other.value, !other.cmp.larger_is_better())).unwrap();
            r.set(t.field, v).unwrap();
            apply_gates(&r, GateProfile::Stage2).pass
        };
        let good = t.cmp.larger_is_better();
        ensure(at(t.value) && at(nudge(t.value, good)) && !at(nudge(t.value, !good)), || {
            format!("{} boundary", t.field)
        })?;
        cells += 3;
    }
    let stage = |name: &str, count: f64| StageCount { stage: name.into(), count };
    let r = retention_report(&[
        stage("raw", 10_000.0),
        stage("quality", 8_457.0),
        stage("speech", 5_875.0),
        stage("stage2", 2_639.0),
    ])
    .map_err(|e| e.to_string())?;
    ensure(r.percent == vec![100.0, 84.57, 58.75, 26.39], || format!("retention {:?}", r.percent))?;
    within(t0.elapsed(), 5.0)?;
    Ok(format!("{cells} boundary cells; retention 84.57 / 58.75 / 26.39 %"))
}

// ---------------------------------------------------------------- 7

fn speakers(parts: &[(&str, &str)]) -> SpeakerTranscript {
    parts.iter().map(|&(k, v)| (k.to_string(), v.to_string())).collect()
}

fn metrics() -> Check {
    let t0 = Instant::now();
    let cfg = EloConfig::default();
    let one = elo_ratings(&[Vote::new("a", "b", Outcome::AWins)], &cfg).map_err(|e| e.to_string())?;
    ensure(one["a"] == 1002.0 && one["b"] == 998.0, || format!("single vote gave {one:?}"))?;

    let models = ["m0", "m1", "m2", "m3", "m4", "m5"];
    let mut r = rng(1);
    let votes: Vec<Vote> = (0..1_000_000)
        .map(|_| {
            let a = r.random_range(0..models.len());
            let b = (a + r.random_range(1..models.len())) % models.len();
            let o = [Outcome::AWins, Outcome::BWins, Outcome::Tie][r.random_range(0..3)];
            Vote::new(models[a], models[b], o)
        })
        .collect();
    let sum: f64 = elo_ratings(&votes, &cfg).map_err(|e| e.to_string())?.values().sum();
    ensure(sum == 6000.0, || format!("rating sum {sum} after 1e6 votes"))?;

    let few = &votes[..500];
    let bcfg = EloConfig { bootstrap_iters: 200, seed: 9, ..cfg };
    let ci = bootstrap_ci(few, &bcfg).map_err(|e| e.to_string())?;
    ensure(ci == bootstrap_ci(few, &bcfg).unwrap(), || "bootstrap differs under the same seed".into())?;

    let reference = speakers(&[("S01", "hello"), ("S02", "world")]);
    let c = cpcer(&reference, &speakers(&[("S01", "hallo"), ("S02", "world")])).map_err(|e| e.to_string())?;
    ensure((c - 0.1).abs() < 1e-12, || format!("cpCER fixture gave {c}"))?;
    let hyp = speakers(&[("x", "hi thera"), ("y", "good mornin"), ("z", "by")]);
    let relabeled = speakers(&[("q", "by"), ("r", "hi thera"), ("s", "good mornin")]);
    let three = speakers(&[("S01", "good morning"), ("S02", "hi there"), ("S03", "bye")]);
    let (p, q) = (cpcer(&three, &hyp).unwrap(), cpcer(&three, &relabeled).unwrap());
    ensure(p == q && (p - 3.0 / 23.0).abs() < 1e-12, || format!("cpCER under relabeling {p} vs {q}"))?;
    within(t0.elapsed(), 60.0)?;
    Ok("1002/998, sum exact over 1e6 votes, seeded bootstrap, cpCER 0.1 and 3/23 under relabeling".into())
}

// ---------------------------------------------------------------- 8

fn experiment() -> Check {
    let t0 = Instant::now();
    let cfg = SyncExperimentConfig::default();
    let mut probe = rng(0);
    let params = DualTower::new(cfg.model.clone(), &mut probe).map_err(|e| e.to_string())?.parameter_count();
    ensure(params <= 2_000_000 && cfg.train.steps <= 20_000 && cfg.seeds.len() == 3, || {
        format!("budget: {params} params, {} steps, {} seeds", cfg.train.steps, cfg.seeds.len())
    })?;
    let rep = run_sync_experiment(&cfg).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed().as_secs_f64();
    let sweep: Vec<String> = rep
        .s_b_values
        .iter()
        .zip(&rep.sweep_medians)
        .map(|(s, m)| format!("{s}:{m:.3}"))
        .collect();
    let detail = format!(
        "{params} params, {} steps x 3 seeds, {:.0} s; no-bridge {:.3} s, bridge {:.3} s ({:.0}% lower); s_B sweep [{}] rho {:.2}",
        cfg.train.steps,
        elapsed,
        rep.no_bridge_median,
        rep.bridge_median,
        100.0 * rep.improvement,
        sweep.join(" "),
        rep.spearman
    );
    let a = rep.improvement >= 0.3;
    let b = rep.spearman <= -0.8;
    ensure(elapsed <= 3600.0 && a && b, || {
        format!("(a) {} (b) {}: {detail}", if a { "ok" } else { "FAILED" }, if b { "ok" } else { "FAILED" })
    })?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["bimodal", "--quiet"];
    argv.extend_from_slice(args);
    bimodal_cli::run(argv)
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn determinism() -> Check {
    let tmp = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let d = tmp.path();
    let put = |name: &str, body: &str| {
        let p = d.join(name);
        std::fs::write(&p, body).unwrap();
        p.to_string_lossy().into_owned()
    };
    let timelines = put(
        "t.jsonl",
        "{\"clip_id\":\"a\",\"segments\":[{\"start\":0,\"end\":4},{\"start\":6,\"end\":9}],\"splits\":[2,10]}\n\
         {\"clip_id\":\"b\",\"segments\":[{\"start\":0,\"end\":1},{\"start\":9,\"end\":10}],\"splits\":[0,3,12,30]}\n",
    );
    let records = put(
        "r.jsonl",
        "{\"clip_id\":\"a\",\"silence_ratio\":0.1,\"bandwidth_hz\":8000,\"audiobox_pq\":6.5,\"audiobox_cu\":6,\"audiobox_ce\":4,\"dover_aesthetic\":0.5,\"dover_technical\":0.2,\"ib_score\":0.3,\"desync\":0.2,\"eat_speech\":true,\"eat_singing\":true}\n\
         {\"clip_id\":\"b\",\"silence_ratio\":0.9}\n",
    );
    let votes = put(
        "v.jsonl",
        "{\"model_a\":\"x\",\"model_b\":\"y\",\"outcome\":\"a_wins\"}\n{\"model_a\":\"y\",\"model_b\":\"z\",\"outcome\":\"tie\"}\n{\"model_a\":\"x\",\"model_b\":\"z\",\"outcome\":\"b_wins\"}\n",
    );
    let reference = put("ref.jsonl", "{\"id\":\"u\",\"speakers\":{\"S01\":\"hello\",\"S02\":\"world\"}}\n");
    let hyp = put("hyp.jsonl", "{\"id\":\"u\",\"speakers\":{\"S02\":\"world\",\"S01\":\"hallo\"}}\n");
    let stages = put("s.json", "[{\"stage\":\"raw\",\"count\":10000},{\"stage\":\"stage2\",\"count\":2639}]");
    let ckpt = d.join("train-run").join("model.ckpt").to_string_lossy().into_owned();
    let pairs = d.join("synth-run").join("synth.ckpt").to_string_lossy().into_owned();

    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("train", vec!["--seed", "1", "train", "--tiny", "--steps", "4", "--batch", "2"]),
        ("sample", vec!["--seed", "2", "sample", "--checkpoint", &ckpt, "--steps", "3", "--count", "2"]),
        ("gradcheck", vec!["gradcheck", "--tiny", "--per-param", "1"]),
        ("synth", vec!["--seed", "4", "synth", "--count", "3"]),
        ("syncscore", vec!["syncscore", "--input", &pairs]),
        ("window", vec!["--seed", "5", "window", "--input", &timelines]),
        ("window-single", vec!["window", "--input", &timelines, "--mode", "single"]),
        ("gate", vec!["gate", "--input", &records, "--profile", "speech"]),
        ("report", vec!["report", "--stages", &stages, "--records", &records]),
        ("elo", vec!["--seed", "6", "elo", "--votes", &votes, "--iters", "100"]),
        ("cpcer", vec!["cpcer", "--ref", &reference, "--hyp", &hyp]),
        (
            "sweep",
            vec!["sweep", "--tiny", "--steps", "3", "--seeds", "0,1", "--eval-scenes", "2", "--sample-steps", "2", "--s-b", "1,2"],
        ),
    ];
    let mut files = 0;
    for (name, args) in &runs {
        let first = d.join(format!("{name}-run"));
        let second = d.join(format!("{name}-replay"));
        let mut argv = vec!["--out", first.to_str().unwrap()];
        argv.extend(args.iter().copied());
        ensure(cli(&argv) == 0, || format!("{name} failed"))?;
        let manifest = first.join("manifest.json");
        ensure(cli(&["--out", second.to_str().unwrap(), "replay", manifest.to_str().unwrap()]) == 0, || {
            format!("{name} replay failed")
        })?;
        let (a, b) = (dir_bytes(&first), dir_bytes(&second));
        ensure(a == b, || format!("{name}: replayed outputs differ"))?;
        files += a.len();
    }
    Ok(format!("{} subcommand runs, {files} files byte-identical on replay", runs.len()))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Check); 9] = [
        (1, "gradient suite", gradients),
        (2, "dual guidance algebra", guidance),
        (3, "noise schedules", schedules),
        (4, "aligned rotary positions", rope),
        (5, "speech windowing", windowing),
        (6, "gates and retention", gates),
        (7, "arena and transcript metrics", metrics),
        (8, "synchronization experiment", experiment),
        (9, "manifest replay determinism", determinism),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match verdict {
            Ok(d) => println!("criterion {n} PASS  {name} ({secs:.1} s): {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} FAIL  {name} ({secs:.1} s): {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
