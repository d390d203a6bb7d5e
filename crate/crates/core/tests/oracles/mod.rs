//! Brute-force reference implementations for the test suites. Nothing here
//! calls into the production code paths it is compared against.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visa_core::sampler::Strategy;
use visa_core::synth::{palette_value, ObjectSpec, SceneSpec, Shape};
use visa_core::video::BinaryMask;

#[derive(Debug)]
pub enum OracleError {
    TooLarge { width: usize, height: usize },
    NonFinite { coordinate: usize },
}

/// One oracle/candidate comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub case: String,
    pub reference: f64,
    pub candidate: f64,
    pub abs_err: f64,
    pub rel_err: f64,
}

impl OracleReport {
    pub fn new(case: impl Into<String>, reference: f64, candidate: f64) -> Self {
        let abs_err = (reference - candidate).abs();
        let rel_err = if reference.abs() < 1e-12 { abs_err } else { abs_err / reference.abs() };
        OracleReport { case: case.into(), reference, candidate, abs_err, rel_err }
    }
}

/// Pixel-counting IoU; both-empty scores 1.
pub fn brute_force_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(x, y), b.get(x, y));
            inter += (p && q) as usize;
            union += (p || q) as usize;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn boundary_points(m: &BinaryMask) -> Vec<(i64, i64)> {
    let (w, h) = (m.width() as i64, m.height() as i64);
    let fg = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && m.get(x as usize, y as usize);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if fg(x, y) && [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|&(dx, dy)| !fg(x + dx, y + dy)) {
                out.push((x, y));
            }
        }
    }
    out
}

fn matched_fraction(from: &[(i64, i64)], to: &[(i64, i64)], tol: i64) -> f64 {
    let hits = from
        .iter()
        .filter(|&&(x, y)| to.iter().any(|&(u, v)| (x - u).abs().max((y - v).abs()) <= tol))
        .count();
    hits as f64 / from.len() as f64
}

/// Boundary F of one frame by checking every pixel pair.
pub fn brute_force_f(pred: &BinaryMask, gt: &BinaryMask, tol: usize) -> Result<f64, OracleError> {
    if pred.width() > 32 || pred.height() > 32 {
        return Err(OracleError::TooLarge { width: pred.width(), height: pred.height() });
    }
    let (bp, bg) = (boundary_points(pred), boundary_points(gt));
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let precision = matched_fraction(&bp, &bg, tol as i64);
    let recall = matched_fraction(&bg, &bp, tol as i64);
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Central differences, one coordinate at a time.
pub fn finite_diff_grad(loss: impl Fn(&[f64]) -> f64, params: &[f64], step: f64) -> Result<Vec<f64>, OracleError> {
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = loss(&x);
        x[i] = orig - step;
        let down = loss(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(OracleError::NonFinite { coordinate: i });
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute norm when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// `round(num / den)` with halves away from zero, in integers.
fn round_div(num: usize, den: usize) -> usize {
    (2 * num + den) / (2 * den)
}

fn nearest_unused(c: usize, frames: usize, used: &[usize]) -> Option<usize> {
    let mut d = 0;
    while d < frames {
        for j in [c.checked_add(d), c.checked_sub(d)].into_iter().flatten() {
            if j < frames && !used.contains(&j) {
                return Some(j);
            }
        }
        d += 1;
    }
    None
}

fn enum_global(frames: usize, n: usize, used: &mut Vec<usize>) {
    for i in 0..n {
        let c = if n == 1 { 0 } else { round_div(i * (frames - 1), n - 1) };
        if let Some(j) = nearest_unused(c, frames, used) {
            used.push(j);
        }
    }
}

fn enum_local(frames: usize, t_tgt: usize, n: usize, used: &mut Vec<usize>) {
    let mut order: Vec<usize> = (0..frames).filter(|j| !used.contains(j)).collect();
    // nearest first, later frame first on ties
    order.sort_by_key(|&j| (j.abs_diff(t_tgt), std::cmp::Reverse(j)));
    used.extend(order.into_iter().take(n));
}

/// Reference selection by literal rule transcription.
pub fn enum_sampler_reference(frames: usize, t_tgt: usize, t_r: usize, strategy: Strategy) -> Vec<usize> {
    assert!(frames <= 256 && t_tgt < frames);
    let n = t_r.min(frames - 1);
    // the target counts as used from the start
    let mut used = vec![t_tgt];
    match strategy {
        Strategy::Global => enum_global(frames, n, &mut used),
        Strategy::Local => enum_local(frames, t_tgt, n, &mut used),
        Strategy::GlobalLocal => {
            enum_global(frames, n / 2, &mut used);
            enum_local(frames, t_tgt, n - n / 2, &mut used);
        }
    }
    let mut out: Vec<usize> = used.into_iter().skip(1).collect();
    out.sort_unstable();
    out
}

/// Rigid translation: whole-pixel velocities of at most 2 px per frame, so
/// every raster is an exact shift of the first. Objects stay inside the
/// 64x64 frame for 16 frames and never overlap.
pub fn rigid_scene(seed: u64) -> SceneSpec {
    const VELOCITIES: [(i32, i32); 13] =
        [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1), (2, 0), (-2, 0), (0, 2), (0, -2)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=3);
    loop {
        let objects: Vec<ObjectSpec> = (0..n)
            .map(|i| {
                let size = rng.gen_range(8..=14) as f64;
                let (vx, vy) = VELOCITIES[rng.gen_range(0..VELOCITIES.len())];
                let pick = |rng: &mut ChaCha8Rng, vel: f64| {
                    let lo = size / 2.0 + 1.0 + (-vel * 15.0).max(0.0);
                    let hi = 64.0 - size / 2.0 - 1.0 - (vel * 15.0).max(0.0);
                    rng.gen_range(lo..hi)
                };
                let start = (pick(&mut rng, vx as f64), pick(&mut rng, vy as f64));
                let shape = Shape::ALL[rng.gen_range(0..3)];
                ObjectSpec { shape, size, intensity: palette_value(i), start, velocity: (vx as f64, vy as f64) }
            })
            .collect();
        let spec = SceneSpec { seed, frames: 16, width: 64, height: 64, objects };
        let rasters: Vec<_> = (0..n).map(|o| spec.raw_masks(o)).collect();
        let disjoint = (0..16).all(|t| {
            (0..64 * 64).all(|i| rasters.iter().filter(|r| r[t].bits()[i]).count() <= 1)
        });
        if disjoint {
            return spec;
        }
    }
}

#[test]
fn oracle_self_checks() {
    let sq = BinaryMask::from_fn(8, 8, |x, y| (2..6).contains(&x) && (2..6).contains(&y));
    assert_eq!(brute_force_f(&sq, &sq, 1).unwrap(), 1.0);
    assert_eq!(brute_force_f(&sq, &BinaryMask::empty(8, 8), 1).unwrap(), 0.0);
    assert!(brute_force_f(&BinaryMask::empty(40, 4), &BinaryMask::empty(40, 4), 1).is_err());
    let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-3).unwrap();
    assert!((g[0] - 6.0).abs() < 1e-6);
    assert_eq!(finite_diff_grad(|_| 2.5, &[1.0, -4.0], 1e-3).unwrap(), vec![0.0, 0.0]);
    assert_eq!(enum_sampler_reference(16, 3, 4, Strategy::Global), vec![0, 5, 10, 15]);
    assert_eq!(enum_sampler_reference(16, 8, 4, Strategy::Local), vec![6, 7, 9, 10]);
    for s in [Strategy::Global, Strategy::Local, Strategy::GlobalLocal] {
        assert_eq!(enum_sampler_reference(5, 0, 12, s), vec![1, 2, 3, 4]);
        assert!(enum_sampler_reference(9, 4, 0, s).is_empty());
        assert_eq!(enum_sampler_reference(2, 1, 3, s), vec![0]);
    }
    let r = OracleReport::new("zero", 0.0, 1e-3);
    assert_eq!(r.rel_err, r.abs_err);
}
