//! Arena ratings from pairwise votes, win-rate tables, and
//! concatenated minimum-permutation character error rate.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, domain_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    AWins,
    BWins,
    Tie,
}

impl Outcome {
    /// Score of the first model.
    pub fn score_a(self) -> f64 {
        match self {
            Outcome::AWins => 1.0,
            Outcome::BWins => 0.0,
            Outcome::Tie => 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub model_a: String,
    pub model_b: String,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<u64>,
}

impl Vote {
    pub fn new(a: &str, b: &str, outcome: Outcome) -> Self {
        Self {
            model_a: a.into(),
            model_b: b.into(),
            outcome,
            index: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EloConfig {
    pub initial: f64,
    pub k: f64,
    pub scale: f64,
    pub base: f64,
    pub bootstrap_iters: usize,
    pub seed: u64,
}

impl Default for EloConfig {
    fn default() -> Self {
        Self {
            initial: 1000.0,
            k: 4.0,
            scale: 400.0,
            base: 10.0,
            bootstrap_iters: 1000,
            seed: 0,
        }
    }
}

impl EloConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.scale > 0.0 && self.base > 1.0 && self.initial.is_finite()) {
            return Err(domain_err!("elo config needs k > 0, scale > 0, base > 1"));
        }
        Ok(())
    }
}

/// Rating transfers are rounded to multiples of this quantum so that sums of
/// ratings stay exact in binary floating point.
pub const ELO_QUANTUM: f64 = 1.0 / 4_294_967_296.0;

fn quantize(x: f64) -> f64 {
    (x / ELO_QUANTUM).round() * ELO_QUANTUM
}

/// Sequential online Elo in vote order.
pub fn elo_ratings(votes: &[Vote], cfg: &EloConfig) -> Result<BTreeMap<String, f64>> {
    cfg.validate()?;
    let mut r: BTreeMap<String, f64> = BTreeMap::new();
    for v in votes {
        if v.model_a == v.model_b {
            return Err(contract_err!("self-vote for {}", v.model_a));
        }
        let ra = *r.entry(v.model_a.clone()).or_insert(cfg.initial);
        let rb = *r.entry(v.model_b.clone()).or_insert(cfg.initial);
        let e_a = 1.0 / (1.0 + cfg.base.powf((rb - ra) / cfg.scale));
        let d = quantize(cfg.k * (v.outcome.score_a() - e_a));
        *r.get_mut(&v.model_a).expect("inserted") += d;
        *r.get_mut(&v.model_b).expect("inserted") -= d;
    }
    Ok(r)
}

/// Ratings of `models`, with unseen ones at the initial value.
pub fn ratings_for(votes: &[Vote], models: &[String], cfg: &EloConfig) -> Result<BTreeMap<String, f64>> {
    let mut r = elo_ratings(votes, cfg)?;
    for m in models {
        r.entry(m.clone()).or_insert(cfg.initial);
    }
    Ok(r)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingInterval {
    pub median: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 100]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

/// Median and 95% interval over bootstrap resamples. Each resample draws
/// votes with replacement and replays them in draw order.
pub fn bootstrap_ci(votes: &[Vote], cfg: &EloConfig) -> Result<BTreeMap<String, RatingInterval>> {
    if votes.is_empty() {
        return Err(domain_err!("bootstrap needs at least one vote"));
    }
    if cfg.bootstrap_iters == 0 {
        return Err(domain_err!("bootstrap_iters must be positive"));
    }
    let models: Vec<String> = votes
        .iter()
        .flat_map(|v| [v.model_a.clone(), v.model_b.clone()])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples: BTreeMap<String, Vec<f64>> =
        models.iter().map(|m| (m.clone(), Vec::with_capacity(cfg.bootstrap_iters))).collect();
    let mut resample = Vec::with_capacity(votes.len());
    for _ in 0..cfg.bootstrap_iters {
        resample.clear();
        for _ in 0..votes.len() {
            resample.push(votes[rng.random_range(0..votes.len())].clone());
        }
        let r = ratings_for(&resample, &models, cfg)?;
        for (m, v) in r {
            samples.get_mut(&m).expect("known model").push(v);
        }
    }
    Ok(samples
        .into_iter()
        .map(|(m, mut s)| {
            s.sort_by(f64::total_cmp);
            let ci = RatingInterval {
                median: percentile(&s, 50.0),
                lo: percentile(&s, 2.5),
                hi: percentile(&s, 97.5),
            };
            (m, ci)
        })
        .collect())
}

/// `P(row beats column)` with ties as half wins; `None` where two models
/// never met.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinRateMatrix {
    pub models: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
}

impl WinRateMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.models.iter().position(|m| m == a)?;
        let j = self.models.iter().position(|m| m == b)?;
        self.cells[i][j]
    }
}

pub fn win_rate_matrix(votes: &[Vote]) -> WinRateMatrix {
    let models: Vec<String> = votes
        .iter()
        .flat_map(|v| [v.model_a.clone(), v.model_b.clone()])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n = models.len();
    let idx = |m: &str| models.iter().position(|x| x == m).expect("collected");
    let mut wins = vec![vec![0.0; n]; n];
    let mut games = vec![vec![0usize; n]; n];
    for v in votes {
        if v.model_a == v.model_b {
            continue;
        }
        let (a, b) = (idx(&v.model_a), idx(&v.model_b));
        let s = v.outcome.score_a();
        wins[a][b] += s;
        wins[b][a] += 1.0 - s;
        games[a][b] += 1;
        games[b][a] += 1;
    }
    let cells = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (games[i][j] > 0).then(|| wins[i][j] / games[i][j] as f64))
                .collect()
        })
        .collect();
    WinRateMatrix { models, cells }
}

/// Speaker tag to transcript text.
pub type SpeakerTranscript = BTreeMap<String, String>;

pub const MAX_CPCER_SPEAKERS: usize = 8;

/// Character-level edit distance.
pub fn levenshtein(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    heap_permute(n, &mut p, &mut out);
    out
}

fn heap_permute(k: usize, p: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if k <= 1 {
        out.push(p.clone());
        return;
    }
    for i in 0..k {
        heap_permute(k - 1, p, out);
        let j = if k.is_multiple_of(2) { i } else { 0 };
        p.swap(j, k - 1);
    }
}

/// Minimum over speaker assignments of the edit distance between the
/// concatenated reference and the concatenated, reassigned hypothesis,
/// divided by the reference length. Surplus hypothesis speakers are
/// appended after the last reference speaker.
pub fn cpcer(reference: &SpeakerTranscript, hypothesis: &SpeakerTranscript) -> Result<f64> {
    let ref_texts: Vec<Vec<char>> = reference.values().map(|s| s.chars().collect()).collect();
    let total: usize = ref_texts.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(domain_err!("reference transcript is empty"));
    }
    let n = reference.len().max(hypothesis.len());
    if n > MAX_CPCER_SPEAKERS {
        return Err(contract_err!("{n} speakers exceeds the exhaustive limit {MAX_CPCER_SPEAKERS}"));
    }
    let mut hyp_texts: Vec<Vec<char>> = hypothesis.values().map(|s| s.chars().collect()).collect();
    hyp_texts.resize(n, Vec::new());
    let reference_concat: Vec<char> = ref_texts.concat();
    let mut best = usize::MAX;
    for perm in permutations(n) {
        let hyp: Vec<char> = perm.iter().flat_map(|&h| hyp_texts[h].iter().copied()).collect();
        best = best.min(levenshtein(&reference_concat, &hyp));
        if best == 0 {
            break;
        }
    }
    Ok(best as f64 / total as f64)
}
