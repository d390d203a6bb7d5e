//! End-to-end training: composite loss on one tape per sample, AdamW with
//! decoupled weight decay, cosine learning-rate decay.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{ParamGrads, Tape, Tensor, Var};
use crate::decoder::{backbone_on_tape, decode_on_tape, mask_pixels};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossParts, LossWeights, MaskLoss};
use crate::model::prompt::{prompt_slots, Slot};
use crate::model::vocab::{Vocabulary, SEG};
use crate::model::{frame_time, round_to_f32, VisaModel};
use crate::sampler::SamplerPlan;
use crate::synth::mix_seed;
use crate::video::{resize_mask_nearest, MaskSequence, Query, QueryKind, Video};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Reference learning rate, multiplied by `lr_multiplier`.
    pub base_lr: f64,
    pub lr_multiplier: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub min_refs: usize,
    pub max_refs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            base_lr: 2e-5,
            lr_multiplier: 100.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            min_refs: 8,
            max_refs: 12,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("train.epochs and train.batch_size must be at least 1".into());
        }
        if self.min_refs > self.max_refs {
            return bad(format!("reference range {}..={} is empty", self.min_refs, self.max_refs));
        }
        let rates = [self.base_lr, self.lr_multiplier, self.weight_decay];
        if rates.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("learning rate, multiplier and weight decay must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad(format!("bad AdamW constants beta1={} beta2={} eps={}", self.beta1, self.beta2, self.eps));
        }
        Ok(())
    }

    pub fn lr(&self) -> f64 {
        self.base_lr * self.lr_multiplier
    }
}

/// `base * (1 + cos(pi * step / (total - 1))) / 2`; `base` for a single step.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let x = step as f64 / (total - 1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

/// AdamW state over the flattened parameter list.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
}

impl AdamW {
    pub fn new(model: &VisaModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        AdamW { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One update; parameters are rounded back to `f32` afterwards.
    pub fn step(&mut self, model: &mut VisaModel, grads: &[Vec<f64>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..p.data.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps) + cfg.weight_decay * p.data[j];
                p.data[j] -= lr * update;
            }
            round_to_f32(&mut p.data);
        }
    }
}

/// One supervised query: the video, the query and its ground truth.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub video: Arc<Video>,
    pub query: Query,
    pub gt: Arc<MaskSequence>,
}

impl TrainSample {
    pub fn positive(&self) -> bool {
        self.query.kind != QueryKind::Negative
    }
}

/// Training-time frame choice: a random target frame (one showing the target
/// for positive queries) and a uniform-random number of sorted references.
pub fn random_plan(sample: &TrainSample, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> SamplerPlan {
    let t = sample.video.len();
    let visible: Vec<usize> = (0..t).filter(|&i| !sample.gt.masks()[i].is_empty()).collect();
    let t_tgt = if sample.positive() && !visible.is_empty() {
        visible[rng.gen_range(0..visible.len())]
    } else {
        rng.gen_range(0..t)
    };
    let n = rng.gen_range(cfg.min_refs..=cfg.max_refs).min(t - 1);
    let mut others: Vec<usize> = (0..t).filter(|&i| i != t_tgt).collect();
    others.shuffle(rng);
    let mut references = others[..n].to_vec();
    references.sort_unstable();
    SamplerPlan { t_tgt, references }
}

/// Loss parts and their weighted total for one sample.
pub struct SampleLoss {
    pub parts: LossParts,
    pub total: f64,
    pub grads: Option<ParamGrads>,
}

/// Builds the full composite loss on a fresh tape: visual tokens, prompt,
/// answer cross-entropy and, for positive queries, the mask loss on the
/// decoder output at the `<seg>` position.
pub fn sample_loss(
    model: &VisaModel,
    vocab: &Vocabulary,
    sample: &TrainSample,
    plan: &SamplerPlan,
    weights: &LossWeights,
    with_grad: bool,
) -> Result<SampleLoss> {
    let d = model.dims();
    let video = &sample.video;
    let mut tape = Tape::new();
    let v = model.bind(&mut tape, with_grad);
    let frames: Vec<usize> = std::iter::once(plan.t_tgt).chain(plan.references.iter().copied()).collect();
    let blocks: Vec<(Var, f64)> = frames
        .iter()
        .map(|&t| {
            let px = tape.constant(model.token_pixels(&video.frames()[t]));
            (model.visual_tokens(&mut tape, &v, px), frame_time(t, video.len()))
        })
        .collect();
    let answer = vocab.answer(sample.positive());
    let mut slots = prompt_slots(d.tokens, blocks.len(), &sample.query.tokens, vocab);
    let prompt_len = slots.len();
    slots.extend(answer[..answer.len() - 1].iter().map(|&id| Slot::Text(id)));
    let x = model.embed_slots(&mut tape, &v, &slots, &blocks)?;
    let hidden = model.transformer(&mut tape, &v, x);
    let rows: Vec<usize> = (prompt_len - 1..prompt_len - 1 + answer.len()).collect();
    let h = tape.rows(hidden, &rows);
    let logits = model.logits(&mut tape, &v, h);
    let l_txt = tape.cross_entropy(logits, answer.clone().into());
    let mut terms = vec![(l_txt, weights.text)];
    let mut mask = None;
    if sample.positive() {
        let seg = answer.iter().position(|&t| t == SEG).expect("positive answer has <seg>");
        let row = tape.rows(hidden, &[prompt_len + seg]);
        let h_seg = model.seg_projection(&mut tape, &v, row);
        let frame = &video.frames()[plan.t_tgt];
        let px = tape.constant(mask_pixels(model, frame));
        let (pixel, coarse) = backbone_on_tape(model, &mut tape, &v, px);
        let p = decode_on_tape(model, &mut tape, &v, pixel, coarse, h_seg);
        let gt = resize_mask_nearest(&sample.gt.masks()[plan.t_tgt], d.mask_res, d.mask_res);
        let bits: Arc<[bool]> = gt.bits().into();
        let bce = tape.bce(p, bits.clone());
        let dice = tape.dice(p, bits);
        mask = Some(MaskLoss { bce: tape.value(bce).data[0], dice: tape.value(dice).data[0] });
        terms.push((bce, weights.mask * weights.bce));
        terms.push((dice, weights.mask * weights.dice));
    }
    let total_var = tape.weighted_sum(&terms);
    let parts = LossParts { text: tape.value(l_txt).data[0], mask };
    let total = total_loss(&parts, weights);
    debug_assert!((total - tape.value(total_var).data[0]).abs() <= 1e-9 * total.abs().max(1.0));
    let grads = with_grad.then(|| tape.backward(total_var, model.params().len()));
    Ok(SampleLoss { parts, total, grads })
}

/// One row of the loss curve; mask terms average over positive samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub lr: f64,
    pub l_txt: f64,
    pub l_bce: f64,
    pub l_dice: f64,
    pub total: f64,
}

pub fn curve_tsv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("step\tlr\tl_txt\tl_bce\tl_dice\ttotal\n");
    for c in curve {
        let _ = writeln!(out, "{}\t{:e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}", c.step, c.lr, c.l_txt, c.l_bce, c.l_dice, c.total);
    }
    out
}

/// Trains `model` in place and returns the loss curve, one point per step.
pub fn train(
    model: &mut VisaModel,
    vocab: &Vocabulary,
    samples: &[TrainSample],
    weights: &LossWeights,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&CurvePoint),
) -> Result<Vec<CurvePoint>> {
    cfg.validate()?;
    weights.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    let mut opt = AdamW::new(model);
    let mut curve = Vec::with_capacity(total_steps);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64)));
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch * per_epoch + b;
            let lr = cosine_lr(cfg.lr(), step, total_steps);
            let frozen: &VisaModel = model;
            let results = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ 0x5eed, (step * cfg.batch_size + j) as u64));
                    let plan = random_plan(&samples[i], cfg, &mut rng);
                    sample_loss(frozen, vocab, &samples[i], &plan, weights, true)
                })
                .collect::<Result<Vec<_>>>()?;
            let point = summarize(step, lr, &results);
            if !point.total.is_finite() {
                return Err(Error::NonFiniteLoss { step, l_txt: point.l_txt, l_bce: point.l_bce, l_dice: point.l_dice });
            }
            let grads = reduce(model, results);
            opt.step(model, &grads, lr, cfg);
            progress(&point);
            curve.push(point);
        }
    }
    Ok(curve)
}

fn summarize(step: usize, lr: f64, results: &[SampleLoss]) -> CurvePoint {
    let n = results.len() as f64;
    let masks: Vec<MaskLoss> = results.iter().filter_map(|r| r.parts.mask).collect();
    let mean_mask = |f: fn(&MaskLoss) -> f64| {
        if masks.is_empty() { 0.0 } else { masks.iter().map(f).sum::<f64>() / masks.len() as f64 }
    };
    CurvePoint {
        step,
        lr,
        l_txt: results.iter().map(|r| r.parts.text).sum::<f64>() / n,
        l_bce: mean_mask(|m| m.bce),
        l_dice: mean_mask(|m| m.dice),
        total: results.iter().map(|r| r.total).sum::<f64>() / n,
    }
}

/// Mean gradient over the batch, summed in batch order.
fn reduce(model: &VisaModel, results: Vec<SampleLoss>) -> Vec<Vec<f64>> {
    let n = results.len() as f64;
    let mut acc: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    for r in results {
        let ParamGrads(per) = r.grads.expect("training computes gradients");
        for (a, g) in acc.iter_mut().zip(per) {
            if let Some(g) = g {
                a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
    }
    for a in &mut acc {
        a.iter_mut().for_each(|x| *x /= n);
    }
    acc
}

/// Flattened copy of every parameter, for comparisons in tests.
pub fn flat_params(model: &VisaModel) -> Vec<f64> {
    model.params().iter().flat_map(|t: &Tensor| t.data.iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use crate::video::{BinaryMask, Frame};

    fn tiny_model() -> VisaModel {
        let dims = ModelDims {
            d_model: 8,
            ffn: 16,
            tokens: 4,
            token_res: 8,
            prompt_dim: 6,
            mask_res: 16,
            feature_channels: 4,
            pixel_channels: 3,
            ..ModelDims::default()
        };
        VisaModel::new(dims, 2).unwrap()
    }

    fn tiny_sample(kind: QueryKind) -> TrainSample {
        let vocab = Vocabulary::default();
        let masks: Vec<BinaryMask> =
            (0..6).map(|t| BinaryMask::from_fn(16, 16, |x, y| (t..t + 5).contains(&x) && (4..9).contains(&y))).collect();
        let frames = masks
            .iter()
            .map(|m| Frame::new(16, 16, 1, m.bits().iter().map(|&b| if b { 0.45 } else { 0.0 }).collect()).unwrap())
            .collect();
        let text = if kind == QueryKind::Negative { "white circle" } else { "gray square" };
        let gt = if kind == QueryKind::Negative { MaskSequence::empty(6, 16, 16) } else { MaskSequence::new(masks).unwrap() };
        TrainSample {
            video: Arc::new(Video::new("t", frames).unwrap()),
            query: Query::new(vocab.tokenize(text).unwrap(), kind, text).unwrap(),
            gt: Arc::new(gt),
        }
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 50), 0.1);
        assert!(cosine_lr(0.1, 49, 50) <= 1e-3);
        assert!((cosine_lr(0.1, 25, 51) - 0.05).abs() < 1e-12);
        assert_eq!(cosine_lr(0.3, 0, 1), 0.3);
    }

    #[test]
    fn random_plan_rules() {
        let s = tiny_sample(QueryKind::Referring);
        let cfg = TrainConfig { min_refs: 2, max_refs: 4, ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = random_plan(&s, &cfg, &mut rng);
            assert!((2..=4).contains(&p.references.len()));
            assert!(!p.references.contains(&p.t_tgt));
            assert!(p.references.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn negative_samples_skip_mask_loss() {
        let m = tiny_model();
        let plan = SamplerPlan { t_tgt: 1, references: vec![0, 3] };
        let w = LossWeights::default();
        let neg = sample_loss(&m, &Vocabulary::default(), &tiny_sample(QueryKind::Negative), &plan, &w, false).unwrap();
        assert!(neg.parts.mask.is_none());
        assert_eq!(neg.total, neg.parts.text);
        let pos = sample_loss(&m, &Vocabulary::default(), &tiny_sample(QueryKind::Referring), &plan, &w, true).unwrap();
        assert!(pos.parts.mask.is_some());
        assert!(pos.grads.is_some());
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut m = tiny_model();
        let before = flat_params(&m);
        let cfg = TrainConfig { epochs: 2, batch_size: 2, lr_multiplier: 0.0, min_refs: 2, max_refs: 3, ..TrainConfig::default() };
        let samples = vec![tiny_sample(QueryKind::Referring), tiny_sample(QueryKind::Negative)];
        let curve = train(&mut m, &Vocabulary::default(), &samples, &LossWeights::default(), &cfg, |_| {}).unwrap();
        assert_eq!(curve.len(), 2);
        assert_eq!(flat_params(&m), before);
    }
}
