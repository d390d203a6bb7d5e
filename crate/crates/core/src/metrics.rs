//! Region similarity J, contour accuracy F, their mean, the robustness
//! surrogate R and report aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::video::{BinaryMask, MaskSequence, QueryKind};

fn check_pair(pred: &MaskSequence, gt: &MaskSequence) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::dims(format!("{} frames", gt.len()), pred.len()));
    }
    if pred.len() > 0 && pred.dims() != gt.dims() {
        return Err(Error::dims(format!("{:?}", gt.dims()), format!("{:?}", pred.dims())));
    }
    Ok(())
}

/// Intersection over union; 1 when both masks are empty.
pub fn frame_iou(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 { 1.0 } else { inter as f64 / union as f64 }
}

/// Mean per-frame IoU.
pub fn region_similarity(pred: &MaskSequence, gt: &MaskSequence) -> Result<f64> {
    check_pair(pred, gt)?;
    if pred.is_empty() {
        return Ok(1.0);
    }
    let sum: f64 = pred.masks().iter().zip(gt.masks()).map(|(p, g)| frame_iou(p, g)).sum();
    Ok(sum / pred.len() as f64)
}

/// `max(1, round(0.0075 * diagonal))`.
pub fn default_tolerance(width: usize, height: usize) -> usize {
    let diag = ((width * width + height * height) as f64).sqrt();
    ((0.0075 * diag).round() as usize).max(1)
}

/// Foreground pixels with a 4-neighbour in the background or off the frame.
pub fn boundary(m: &BinaryMask) -> BinaryMask {
    let (w, h) = (m.width(), m.height());
    BinaryMask::from_fn(w, h, |x, y| {
        m.get(x, y)
            && (x == 0 || y == 0 || x + 1 == w || y + 1 == h
                || !m.get(x - 1, y)
                || !m.get(x + 1, y)
                || !m.get(x, y - 1)
                || !m.get(x, y + 1))
    })
}

/// Square dilation by `r` pixels (Chebyshev distance).
fn dilate(m: &BinaryMask, r: usize) -> BinaryMask {
    let (w, h) = (m.width(), m.height());
    // separable: rows then columns
    let mut rows = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = (lo..=hi).any(|i| m.get(i, y));
        }
    }
    BinaryMask::from_fn(w, h, |x, y| {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        (lo..=hi).any(|j| rows[j * w + x])
    })
}

/// Boundary F-measure of one frame with Chebyshev tolerance `tol`.
pub fn frame_f(pred: &BinaryMask, gt: &BinaryMask, tol: usize) -> f64 {
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let (pb, gb) = (boundary(pred), boundary(gt));
    let (pd, gd) = (dilate(&pb, tol), dilate(&gb, tol));
    let matched = |b: &BinaryMask, near: &BinaryMask| {
        b.bits().iter().zip(near.bits()).filter(|(&x, &n)| x && n).count() as f64
    };
    let precision = matched(&pb, &gd) / pb.area() as f64;
    let recall = matched(&gb, &pd) / gb.area() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Mean per-frame boundary F.
pub fn contour_accuracy(pred: &MaskSequence, gt: &MaskSequence, tol: usize) -> Result<f64> {
    check_pair(pred, gt)?;
    if pred.is_empty() {
        return Ok(1.0);
    }
    let sum: f64 = pred.masks().iter().zip(gt.masks()).map(|(p, g)| frame_f(p, g, tol)).sum();
    Ok(sum / pred.len() as f64)
}

pub fn jf(j: f64, f: f64) -> f64 {
    (j + f) / 2.0
}

/// `1 - foreground area / total area` over a whole sequence.
pub fn robustness_score(pred: &MaskSequence) -> f64 {
    let total: usize = pred.masks().iter().map(|m| m.width() * m.height()).sum();
    if total == 0 {
        return 1.0;
    }
    let fg: usize = pred.masks().iter().map(BinaryMask::area).sum();
    1.0 - fg as f64 / total as f64
}

/// Mean robustness score over negative-query predictions.
pub fn robustness(preds: &[(QueryKind, &MaskSequence)]) -> Result<f64> {
    if let Some((kind, _)) = preds.iter().find(|(k, _)| *k != QueryKind::Negative) {
        return Err(Error::NonNegativeQuery(kind.to_string()));
    }
    if preds.is_empty() {
        return Ok(1.0);
    }
    Ok(preds.iter().map(|(_, p)| robustness_score(p)).sum::<f64>() / preds.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

impl Scores {
    pub fn new(j: f64, f: f64) -> Self {
        Scores { j, f, jf: jf(j, f) }
    }

    fn mean(items: &[Scores]) -> Option<Scores> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        Some(Scores {
            j: items.iter().map(|s| s.j).sum::<f64>() / n,
            f: items.iter().map(|s| s.f).sum::<f64>() / n,
            jf: items.iter().map(|s| s.jf).sum::<f64>() / n,
        })
    }
}

/// Per-query metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryScore {
    pub record_id: String,
    pub kind: QueryKind,
    pub scores: Scores,
    pub robustness: f64,
}

pub fn score_query(record_id: &str, kind: QueryKind, pred: &MaskSequence, gt: &MaskSequence) -> Result<QueryScore> {
    let tol = gt.dims().map(|(w, h)| default_tolerance(w, h)).unwrap_or(1);
    Ok(QueryScore {
        record_id: record_id.to_string(),
        kind,
        scores: Scores::new(region_similarity(pred, gt)?, contour_accuracy(pred, gt, tol)?),
        robustness: robustness_score(pred),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `None` when the split has no queries.
    pub referring: Option<Scores>,
    pub reasoning: Option<Scores>,
    /// Mean of the available split values.
    pub overall: Option<Scores>,
    /// Robustness surrogate over negative queries.
    pub robustness: Option<f64>,
    pub records: Vec<QueryScore>,
}

/// Overall values as the mean of split means.
pub fn overall(referring: Option<Scores>, reasoning: Option<Scores>) -> Option<Scores> {
    match (referring, reasoning) {
        (Some(a), Some(b)) => Some(Scores { j: (a.j + b.j) / 2.0, f: (a.f + b.f) / 2.0, jf: (a.jf + b.jf) / 2.0 }),
        (Some(a), None) | (None, Some(a)) => Some(a),
        (None, None) => None,
    }
}

/// Aggregates per-query scores. Records are folded in id order so the result
/// does not depend on input order.
pub fn aggregate(mut records: Vec<QueryScore>) -> EvalReport {
    records.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    let split = |kind: QueryKind| {
        let s: Vec<Scores> = records.iter().filter(|r| r.kind == kind).map(|r| r.scores).collect();
        Scores::mean(&s)
    };
    let referring = split(QueryKind::Referring);
    let reasoning = split(QueryKind::Reasoning);
    let neg: Vec<f64> = records.iter().filter(|r| r.kind == QueryKind::Negative).map(|r| r.robustness).collect();
    let robustness = (!neg.is_empty()).then(|| neg.iter().sum::<f64>() / neg.len() as f64);
    EvalReport { referring, reasoning, overall: overall(referring, reasoning), robustness, records }
}

/// One evaluation input: record id, query kind and the two sequences.
pub struct EvalItem<'a> {
    pub record_id: &'a str,
    pub kind: QueryKind,
    pub pred: &'a MaskSequence,
    pub gt: &'a MaskSequence,
}

pub fn evaluate(items: &[EvalItem<'_>]) -> Result<EvalReport> {
    let records = items
        .par_iter()
        .map(|it| score_query(it.record_id, it.kind, it.pred, it.gt))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(records))
}

/// Evaluates every `(record id, kind)` against `predictions` and
/// `ground_truth`, both keyed by record id.
pub fn evaluate_dataset(
    records: &[(String, QueryKind)],
    predictions: &BTreeMap<String, MaskSequence>,
    ground_truth: &BTreeMap<String, MaskSequence>,
) -> Result<EvalReport> {
    let items = records
        .iter()
        .map(|(id, kind)| {
            let pred = predictions.get(id).ok_or_else(|| Error::MissingPrediction(id.clone()))?;
            let gt = ground_truth.get(id).ok_or_else(|| Error::MissingPrediction(format!("{id} (ground truth)")))?;
            Ok(EvalItem { record_id: id, kind: *kind, pred, gt })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&items)
}

/// `v * 100` rounded to one decimal, with ties (within 1e-6) rounded up.
pub fn percent_1dp(v: f64) -> f64 {
    let s = v * 1000.0;
    let floor = s.floor();
    let r = if (s - floor - 0.5).abs() < 1e-6 { floor + 1.0 } else { s.round() };
    r / 10.0
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}", percent_1dp(x))).unwrap_or_else(|| "-".into())
}

impl EvalReport {
    /// Tab-separated report: `split J F JF` rows then `R <value>`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("split\tJ\tF\tJF\n");
        for (name, s) in [("referring", self.referring), ("reasoning", self.reasoning), ("overall", self.overall)] {
            let _ = writeln!(out, "{name}\t{}\t{}\t{}", cell(s.map(|s| s.j)), cell(s.map(|s| s.f)), cell(s.map(|s| s.jf)));
        }
        let _ = writeln!(out, "R\t{}", cell(self.robustness));
        out
    }

    /// Per-query CSV for debugging.
    pub fn records_csv(&self) -> String {
        let mut out = String::from("record,kind,J,F,JF,R\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                r.record_id, r.kind, r.scores.j, r.scores.f, r.scores.jf, r.robustness
            );
        }
        out
    }
}
