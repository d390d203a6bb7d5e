//! Training objective: auto-regressive text cross-entropy, per-pixel binary
//! cross-entropy, soft Dice, and their weighted sum.
//!
//! Each loss has a closed-form gradient with respect to its prediction
//! input; the autograd tape uses these directly.

use crate::error::{Error, Result};
use crate::video::BinaryMask;

/// Probabilities are clipped into `[BCE_CLIP, 1 - BCE_CLIP]` before taking logs.
pub const BCE_CLIP: f64 = 1e-6;
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::dims(width * height, values.len()));
        }
        Ok(ProbabilityMap { width, height, values })
    }

    pub fn uniform(width: usize, height: usize, value: f64) -> Self {
        ProbabilityMap { width, height, values: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    fn check(&self, g: &BinaryMask) -> Result<()> {
        if (self.width, self.height) != (g.width(), g.height()) {
            return Err(Error::dims(
                format!("{}x{}", g.width(), g.height()),
                format!("{}x{}", self.width, self.height),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub text: f64,
    pub mask: f64,
    pub bce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { text: 1.0, mask: 1.0, bce: 2.0, dice: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.text, self.mask, self.bce, self.dice];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Mean negative log-softmax of `targets`, one logit row per target.
pub fn cross_entropy(logits: &[f64], vocab: usize, targets: &[u32]) -> Result<f64> {
    let rows = logits.len() / vocab.max(1);
    if rows != targets.len() || logits.len() != rows * vocab {
        return Err(Error::LengthMismatch(rows, targets.len()));
    }
    if targets.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = logits
        .chunks(vocab)
        .zip(targets)
        .map(|(row, &t)| log_sum_exp(row) - row[t as usize])
        .sum();
    Ok(total / targets.len() as f64)
}

/// Gradient of [`cross_entropy`] with respect to the logits.
pub fn cross_entropy_grad(logits: &[f64], vocab: usize, targets: &[u32]) -> Vec<f64> {
    let n = targets.len().max(1) as f64;
    let mut grad = vec![0.0; logits.len()];
    for ((row, g), &t) in logits.chunks(vocab).zip(grad.chunks_mut(vocab)).zip(targets) {
        let lse = log_sum_exp(row);
        for (gi, &z) in g.iter_mut().zip(row) {
            *gi = (z - lse).exp() / n;
        }
        g[t as usize] -= 1.0 / n;
    }
    grad
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

/// Text loss over answer positions only. `logits` holds one row per sequence
/// position; rows before `answer_start` belong to the prompt and are ignored.
pub fn cross_entropy_text(logits: &[f64], vocab: usize, answer_start: usize, targets: &[u32]) -> Result<f64> {
    let from = answer_start * vocab;
    if from > logits.len() {
        return Err(Error::LengthMismatch(logits.len() / vocab.max(1), answer_start + targets.len()));
    }
    cross_entropy(&logits[from..], vocab, targets)
}

fn clip(p: f64) -> f64 {
    p.clamp(BCE_CLIP, 1.0 - BCE_CLIP)
}

pub fn bce(p: &[f64], g: &[bool]) -> f64 {
    let total: f64 = p
        .iter()
        .zip(g)
        .map(|(&p, &g)| {
            let p = clip(p);
            if g { -p.ln() } else { -(1.0 - p).ln() }
        })
        .sum();
    total / p.len() as f64
}

/// Gradient of [`bce`]; zero where the clip is active.
pub fn bce_grad(p: &[f64], g: &[bool]) -> Vec<f64> {
    let n = p.len() as f64;
    p.iter()
        .zip(g)
        .map(|(&p, &g)| {
            if !(BCE_CLIP..=1.0 - BCE_CLIP).contains(&p) {
                0.0
            } else if g {
                -1.0 / (p * n)
            } else {
                1.0 / ((1.0 - p) * n)
            }
        })
        .collect()
}

pub fn dice(p: &[f64], g: &[bool]) -> f64 {
    let (inter, sp, sg) = dice_sums(p, g);
    1.0 - (2.0 * inter + DICE_SMOOTH) / (sp + sg + DICE_SMOOTH)
}

pub fn dice_grad(p: &[f64], g: &[bool]) -> Vec<f64> {
    let (inter, sp, sg) = dice_sums(p, g);
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = sp + sg + DICE_SMOOTH;
    g.iter().map(|&g| -((2.0 * g as u8 as f64) * den - num) / (den * den)).collect()
}

fn dice_sums(p: &[f64], g: &[bool]) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sg = 0.0;
    for (&p, &g) in p.iter().zip(g) {
        sp += p;
        if g {
            inter += p;
            sg += 1.0;
        }
    }
    (inter, sp, sg)
}

/// Mean per-pixel binary cross-entropy.
pub fn bce_mask(p: &ProbabilityMap, g: &BinaryMask) -> Result<f64> {
    p.check(g)?;
    Ok(bce(&p.values, g.bits()))
}

/// Soft Dice loss `1 - (2 Σpg + ε) / (Σp + Σg + ε)`.
pub fn dice_mask(p: &ProbabilityMap, g: &BinaryMask) -> Result<f64> {
    p.check(g)?;
    Ok(dice(&p.values, g.bits()))
}

/// Per-sample loss parts; `mask` is `None` when the sample carries no mask
/// supervision.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub text: f64,
    pub mask: Option<MaskLoss>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MaskLoss {
    pub bce: f64,
    pub dice: f64,
}

/// `λ_txt·L_txt + λ_mask·(λ_bce·BCE + λ_dice·DICE)`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    let mask = parts.mask.map_or(0.0, |m| w.bce * m.bce + w.dice * m.dice);
    w.text * parts.text + w.mask * mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cross_entropy_examples() {
        // Confident correct predictions.
        let mut logits = vec![0.0; 2 * 128];
        logits[5] = 30.0;
        logits[128 + 9] = 30.0;
        assert!(cross_entropy(&logits, 128, &[5, 9]).unwrap() < 1e-10);

        let uniform = vec![0.25; 3 * 128];
        let l = cross_entropy(&uniform, 128, &[0, 64, 127]).unwrap();
        assert!((l - 128f64.ln()).abs() < 1e-12);
        assert!((128f64.ln() - 4.852).abs() < 1e-3);

        let l = cross_entropy(&[0.0, 0.0], 2, &[0]).unwrap();
        assert!((l - 0.693_147_180_559_945_3).abs() < 1e-12);

        assert!(matches!(cross_entropy(&[0.0; 4], 2, &[0]), Err(Error::LengthMismatch(2, 1))));
    }

    #[test]
    fn text_loss_masks_prompt_rows() {
        // Prompt rows carry garbage that must not contribute.
        let mut logits = vec![100.0, -100.0, 100.0, -100.0];
        logits.extend([0.0, 0.0]);
        let l = cross_entropy_text(&logits, 2, 2, &[1]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_examples() {
        let g = BinaryMask::new(2, 2, vec![true, false, false, true]).unwrap();
        let half = ProbabilityMap::uniform(2, 2, 0.5);
        assert!((bce_mask(&half, &g).unwrap() - 2f64.ln()).abs() < 1e-12);

        let exact = ProbabilityMap::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = bce_mask(&exact, &g).unwrap();
        assert!((l + (1.0 - BCE_CLIP).ln()).abs() < 1e-15);
        assert!((l - 1e-6).abs() < 1e-9);

        let p = ProbabilityMap::new(2, 1, vec![0.9, 0.2]).unwrap();
        let g2 = BinaryMask::new(2, 1, vec![true, false]).unwrap();
        let expected = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((bce_mask(&p, &g2).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.1643).abs() < 1e-4);

        assert!(bce_mask(&p, &g).is_err());
    }

    #[test]
    fn dice_examples() {
        let g = BinaryMask::from_fn(4, 4, |x, y| x < 3 && y < 3);
        let exact = ProbabilityMap::new(4, 4, g.bits().iter().map(|&b| b as u8 as f64).collect()).unwrap();
        assert!(dice_mask(&exact, &g).unwrap().abs() < 1e-15);

        let zero = ProbabilityMap::uniform(4, 4, 0.0);
        assert!((dice_mask(&zero, &g).unwrap() - 0.9).abs() < 1e-12);

        assert_eq!(dice_mask(&zero, &BinaryMask::empty(4, 4)).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let parts = LossParts { text: 0.4, mask: Some(MaskLoss { bce: 0.1, dice: 0.2 }) };
        assert!((total_loss(&parts, &w) - 0.7).abs() < 1e-12);

        let vqa = LossParts { text: 0.4, mask: None };
        assert_eq!(total_loss(&vqa, &w), w.text * 0.4);

        let zero = LossWeights { text: 0.0, mask: 0.0, bce: 0.0, dice: 0.0 };
        assert_eq!(total_loss(&parts, &zero), 0.0);
    }

    fn fd(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut y = x.to_vec();
        (0..x.len())
            .map(|i| {
                y[i] = x[i] + h;
                let up = f(&y);
                y[i] = x[i] - h;
                let down = f(&y);
                y[i] = x[i];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale < 1e-12 { diff } else { diff / scale }
    }

    proptest! {
        #[test]
        fn loss_ranges(p in proptest::collection::vec(0.0f64..=1.0, 16), g in proptest::collection::vec(any::<bool>(), 16)) {
            let d = dice(&p, &g);
            prop_assert!((0.0..1.0).contains(&d));
            prop_assert!(bce(&p, &g) >= 0.0);
        }

        #[test]
        fn mask_loss_gradients_match_finite_differences(
            p in proptest::collection::vec(0.1f64..0.9, 12),
            g in proptest::collection::vec(any::<bool>(), 12),
        ) {
            prop_assert!(rel_err(&bce_grad(&p, &g), &fd(|x| bce(x, &g), &p, 1e-3)) < 1e-4);
            prop_assert!(rel_err(&dice_grad(&p, &g), &fd(|x| dice(x, &g), &p, 1e-3)) < 1e-4);
        }

        #[test]
        fn total_loss_is_linear_in_each_weight(a in 0.0f64..3.0, b in 0.0f64..3.0, which in 0usize..4) {
            let parts = LossParts { text: 0.3, mask: Some(MaskLoss { bce: 0.2, dice: 0.7 }) };
            let with = |v: f64| {
                let mut w = LossWeights::default();
                match which { 0 => w.text = v, 1 => w.mask = v, 2 => w.bce = v, _ => w.dice = v }
                total_loss(&parts, &w)
            };
            let mid = with((a + b) / 2.0);
            prop_assert!((mid - (with(a) + with(b)) / 2.0).abs() < 1e-12);
        }
    }
}
