//! Text-guided frame sampling: pick the target frame from averaged percentage
//! responses, then choose reference frames around it.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::formats::quantize;
use crate::synth::{mix_seed, PALETTE};
use crate::video::{Query, Video};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    Global,
    Local,
    GlobalLocal,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Global, Strategy::Local, Strategy::GlobalLocal];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Global => "global",
            Strategy::Local => "local",
            Strategy::GlobalLocal => "global_local",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Strategy::Global),
            "local" => Ok(Strategy::Local),
            "global_local" => Ok(Strategy::GlobalLocal),
            other => Err(Error::Config(format!("unknown sampling strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Number of responses averaged for the target frame.
    pub k: usize,
    /// Number of reference frames.
    pub t_r: usize,
    pub strategy: Strategy,
    /// Always segment frame 0 instead of asking the responder.
    pub baseline_first_frame: bool,
    pub temperature: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { k: 10, t_r: 12, strategy: Strategy::GlobalLocal, baseline_first_frame: false, temperature: 1.0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("sampler.k must be at least 1".into()));
        }
        if self.strategy == Strategy::GlobalLocal && self.t_r % 2 != 0 {
            return Err(Error::Config(format!("sampler.t_r = {} must be even for global_local", self.t_r)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("sampler.temperature = {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplerPlan {
    pub t_tgt: usize,
    pub references: Vec<usize>,
}

/// First decimal number in `response`, read as a percentage and clamped to
/// `[0, 1]`.
pub fn parse_percentage(response: &str) -> Result<f64> {
    let bytes = response.as_bytes();
    let start = bytes
        .iter()
        .position(u8::is_ascii_digit)
        .ok_or_else(|| Error::NoNumber(response.to_string()))?;
    let mut end = start;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end + 1 < bytes.len() && bytes[end] == b'.' && bytes[end + 1].is_ascii_digit() {
        end += 1;
        while end < bytes.len() && bytes[end].is_ascii_digit() {
            end += 1;
        }
    }
    let value: f64 = response[start..end].parse().expect("digits parse as f64");
    Ok((value / 100.0).clamp(0.0, 1.0))
}

/// `clamp(round(T * mean(fractions)), 0, T-1)` with half-away-from-zero
/// rounding. Fractions are summed in sorted order so the result does not
/// depend on response order.
pub fn aggregate_target_index(fractions: &[f64], frames: usize) -> Result<usize> {
    if fractions.is_empty() {
        return Err(Error::EmptyResponses);
    }
    assert!(frames >= 1, "video must have at least one frame");
    let mut sorted = fractions.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    let index = (frames as f64 * mean).round();
    Ok(index.clamp(0.0, (frames - 1) as f64) as usize)
}

/// Produces `k` free-text answers to "which percentage mark of the video
/// should I check" for a query.
pub trait FrameResponder: Sync {
    fn respond(&self, video: &Video, query: &Query, k: usize) -> Vec<String>;
}

pub fn locate_target(video: &Video, query: &Query, responder: &dyn FrameResponder, cfg: &SamplerConfig) -> Result<usize> {
    if cfg.baseline_first_frame {
        return Ok(0);
    }
    let responses = responder.respond(video, query, cfg.k);
    let fractions: Vec<f64> = responses.iter().filter_map(|r| parse_percentage(r).ok()).collect();
    if fractions.is_empty() {
        return Err(match responses.into_iter().next() {
            Some(r) => Error::NoNumber(r),
            None => Error::EmptyResponses,
        });
    }
    aggregate_target_index(&fractions, video.len())
}

pub fn plan(video: &Video, query: &Query, responder: &dyn FrameResponder, cfg: &SamplerConfig) -> Result<SamplerPlan> {
    let t_tgt = locate_target(video, query, responder, cfg)?;
    let references = sample_references(video.len(), t_tgt, cfg.t_r, cfg.strategy);
    Ok(SamplerPlan { t_tgt, references })
}

/// Frames other than `t_tgt`, nearest first; equal distances prefer the later
/// frame.
fn by_proximity(frames: usize, t_tgt: usize) -> impl Iterator<Item = usize> {
    (1..frames).flat_map(move |d| {
        let after = (t_tgt + d < frames).then_some(t_tgt + d);
        let before = t_tgt.checked_sub(d);
        after.into_iter().chain(before)
    })
}

/// Evenly spaced picks `round(i*(T-1)/(n-1))`, each collision moved to the
/// nearest free frame (`+d` before `-d`).
fn global_picks(frames: usize, t_tgt: usize, n: usize, taken: &mut [bool]) {
    for i in 0..n {
        let c = if n == 1 { 0 } else { (i as f64 * (frames - 1) as f64 / (n - 1) as f64).round() as usize };
        let free = |j: usize, taken: &[bool]| j != t_tgt && !taken[j];
        let pick = if free(c, taken) {
            Some(c)
        } else {
            (1..frames).find_map(|d| {
                let up = c + d;
                if up < frames && free(up, taken) {
                    return Some(up);
                }
                c.checked_sub(d).filter(|&down| free(down, taken))
            })
        };
        if let Some(j) = pick {
            taken[j] = true;
        }
    }
}

fn local_picks(frames: usize, t_tgt: usize, n: usize, taken: &mut [bool]) {
    let picks: Vec<usize> = by_proximity(frames, t_tgt).filter(|&j| !taken[j]).take(n).collect();
    for j in picks {
        taken[j] = true;
    }
}

/// Reference frames for a target: exactly `min(t_r, T-1)` sorted distinct
/// indices, never `t_tgt`.
pub fn sample_references(frames: usize, t_tgt: usize, t_r: usize, strategy: Strategy) -> Vec<usize> {
    assert!(t_tgt < frames, "target index {t_tgt} outside video of {frames} frames");
    let n = t_r.min(frames - 1);
    let mut taken = vec![false; frames];
    match strategy {
        Strategy::Global => global_picks(frames, t_tgt, n, &mut taken),
        Strategy::Local => local_picks(frames, t_tgt, n, &mut taken),
        Strategy::GlobalLocal => {
            let g = n / 2;
            global_picks(frames, t_tgt, g, &mut taken);
            local_picks(frames, t_tgt, n - g, &mut taken);
        }
    }
    (0..frames).filter(|&j| taken[j]).collect()
}

/// Spread of the relevance scores fed to the response softmax.
pub const SCORE_RANGE: f64 = 10.0;

/// Training-free stand-in for the frame-sampling language model. Frames are
/// scored by simple evidence tied to the query wording, the scores become a
/// softmax distribution, and each response names a sampled frame as a
/// percentage mark.
#[derive(Clone, Debug)]
pub struct HeuristicResponder {
    pub temperature: f64,
    pub seed: u64,
}

fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl HeuristicResponder {
    pub fn new(temperature: f64, seed: u64) -> Self {
        HeuristicResponder { temperature, seed }
    }

    /// Raw per-frame relevance.
    pub fn relevance(&self, video: &Video, query: &Query) -> Vec<f64> {
        let words: Vec<&str> = query.raw_text.split_whitespace().collect();
        let named = PALETTE.iter().find(|(name, _)| words.contains(name)).map(|p| p.1);
        let levels = |f: &crate::video::Frame| {
            let mut counts = [0usize; 256];
            for y in 0..f.height() {
                for x in 0..f.width() {
                    counts[quantize(f.luma(x, y)) as usize] += 1;
                }
            }
            counts
        };
        let exits = words.contains(&"exits");
        video
            .frames()
            .iter()
            .enumerate()
            .map(|(t, f)| {
                let counts = levels(f);
                if let Some(level) = named {
                    counts[level as usize] as f64
                } else if exits {
                    let any = counts[1..].iter().any(|&c| c > 0);
                    if any { (t + 1) as f64 } else { 0.0 }
                } else {
                    counts[1..].iter().filter(|&&c| c >= 3).count() as f64
                }
            })
            .collect()
    }

    /// Sampling distribution over frames.
    pub fn distribution(&self, video: &Video, query: &Query) -> Vec<f64> {
        let r = self.relevance(video, query);
        let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let scores: Vec<f64> =
            r.iter().map(|v| if span > 0.0 { SCORE_RANGE * (v - lo) / span } else { 0.0 }).collect();
        let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| ((s - top) / self.temperature).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }
}

impl FrameResponder for HeuristicResponder {
    fn respond(&self, video: &Video, query: &Query, k: usize) -> Vec<String> {
        let probs = self.distribution(video, query);
        let seed = mix_seed(self.seed, fnv1a(&video.id) ^ fnv1a(&query.raw_text).rotate_left(17));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = WeightedIndex::new(&probs).expect("softmax weights are positive");
        let frames = video.len() as f64;
        (0..k)
            .map(|_| {
                let t = dist.sample(&mut rng);
                format!("I should check {:.2}% of the video.", 100.0 * t as f64 / frames)
            })
            .collect()
    }
}
