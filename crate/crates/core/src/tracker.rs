//! Training-free mask propagation by patch affinity against a small memory.

use crate::error::{Error, Result};
use crate::formats::quantize;
use crate::video::{BinaryMask, Frame, MaskSequence, Video};

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerConfig {
    pub patch_radius: usize,
    pub search_radius: usize,
    /// Memory frames, the anchor included.
    pub memory: usize,
    pub top_k: usize,
    /// Affinity logit per unit of mean squared patch difference.
    pub sharpness: f64,
    /// Affinity logit per squared pixel of displacement; breaks ties toward
    /// small motion.
    pub distance_penalty: f64,
    /// Extra weight of the centre pixel in the patch mean, so a patch whose
    /// centre disagrees cannot win on context alone.
    pub center_weight: f64,
    /// Toroidal indexing instead of skipping out-of-frame positions.
    pub wrap: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            patch_radius: 2,
            search_radius: 4,
            memory: 2,
            top_k: 4,
            sharpness: 1000.0,
            distance_penalty: 0.05,
            center_weight: 24.0,
            wrap: false,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_radius == 0 || self.search_radius == 0 || self.memory == 0 || self.top_k == 0 {
            return Err(Error::Config(format!("tracker parameters must be positive: {self:?}")));
        }
        if !(self.sharpness > 0.0 && self.distance_penalty >= 0.0 && self.center_weight >= 0.0) {
            return Err(Error::Config("tracker affinity scales must be positive".into()));
        }
        Ok(())
    }
}

/// One remembered frame: 8-bit gray levels and soft labels.
#[derive(Clone, Debug)]
pub struct MemoryEntry {
    pub gray: Vec<u8>,
    pub labels: Vec<f32>,
}

impl MemoryEntry {
    pub fn new(frame: &Frame, mask: &BinaryMask) -> Self {
        MemoryEntry { gray: gray_levels(frame), labels: mask_labels(mask) }
    }
}

fn gray_levels(frame: &Frame) -> Vec<u8> {
    frame.to_gray().pixels().iter().map(|&v| quantize(v)).collect()
}

fn mask_labels(m: &BinaryMask) -> Vec<f32> {
    m.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

/// Summed-area table of a zero- or wrap-padded `w x h` grid. Window sums
/// over `[x - r, x + r] x [y - r, y + r]` are then four lookups.
struct Integral {
    table: Vec<u64>,
    stride: usize,
}

impl Integral {
    fn new(w: usize, h: usize, r: usize, value: impl Fn(isize, isize) -> u32) -> Self {
        let (pw, ph) = (w + 2 * r, h + 2 * r);
        let stride = pw + 1;
        let mut table = vec![0u64; stride * (ph + 1)];
        for y in 0..ph {
            let mut row = 0u64;
            for x in 0..pw {
                row += value(x as isize - r as isize, y as isize - r as isize) as u64;
                table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row;
            }
        }
        Integral { table, stride }
    }

    /// Sum of the window centred on `(x, y)` with radius `r`.
    #[inline]
    fn window(&self, x: usize, y: usize, r: usize) -> u64 {
        let (x1, y1) = (x + 2 * r + 1, y + 2 * r + 1);
        let t = &self.table;
        t[y1 * self.stride + x1] + t[y * self.stride + x] - t[y * self.stride + x1] - t[y1 * self.stride + x]
    }
}

/// Soft labels for `next` from the memory: per pixel, the softmax-weighted
/// mean label of the `top_k` best-matching memory positions. Costs are mean
/// squared differences of 8-bit patches over the overlap inside both frames.
pub fn step(memory: &[MemoryEntry], next: &Frame, cfg: &TrackerConfig) -> Vec<f32> {
    assert!(!memory.is_empty(), "tracker memory is empty");
    let (w, h) = (next.width(), next.height());
    let cur = gray_levels(next);
    let sr = cfg.search_radius as isize;
    let pr = cfg.patch_radius;
    let mut offsets: Vec<(isize, isize)> = Vec::new();
    for dy in -sr..=sr {
        for dx in -sr..=sr {
            offsets.push((dx, dy));
        }
    }
    // nearest first, so equal logits resolve toward small motion
    offsets.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dy, dx));
    let k = cfg.top_k;
    let n = w * h;
    let mut logits = vec![f64::NEG_INFINITY; n * k];
    let mut labels = vec![0f32; n * k];
    let mut filled = vec![0usize; n];
    let scale = 1.0 / (255.0 * 255.0);
    let (wi, hi) = (w as isize, h as isize);
    let inside = |x: isize, y: isize| x >= 0 && y >= 0 && x < wi && y < hi;
    // index of pixel (x, y), wrapped or None when outside the frame
    let locate = |x: isize, y: isize| -> Option<usize> {
        if cfg.wrap {
            Some((y.rem_euclid(hi) * wi + x.rem_euclid(wi)) as usize)
        } else if inside(x, y) {
            Some((y * wi + x) as usize)
        } else {
            None
        }
    };
    for &(dx, dy) in &offsets {
        let dist = (dx * dx + dy * dy) as f64;
        let count = Integral::new(w, h, pr, |x, y| match (locate(x, y), locate(x + dx, y + dy)) {
            (Some(_), Some(_)) => 1,
            _ => 0,
        });
        for entry in memory {
            let ssd = Integral::new(w, h, pr, |x, y| match (locate(x, y), locate(x + dx, y + dy)) {
                (Some(i), Some(j)) => {
                    let d = cur[i] as i32 - entry.gray[j] as i32;
                    (d * d) as u32
                }
                _ => 0,
            });
            for y in 0..h {
                for x in 0..w {
                    let Some(j) = locate(x as isize + dx, y as isize + dy) else { continue };
                    let i = y * w + x;
                    let d = cur[i] as i32 - entry.gray[j] as i32;
                    let ssd = ssd.window(x, y, pr) as f64 + cfg.center_weight * (d * d) as f64;
                    let cost = ssd * scale / (count.window(x, y, pr) as f64 + cfg.center_weight);
                    let logit = -(cfg.sharpness * cost + cfg.distance_penalty * dist);
                    let used = filled[i];
                    let slots = &mut logits[i * k..(i + 1) * k];
                    // earlier candidates stay ahead on equal logits
                    let Some(at) = (0..k).find(|&s| s >= used || logit > slots[s]) else { continue };
                    let lab = &mut labels[i * k..(i + 1) * k];
                    for s in (at + 1..k).rev() {
                        slots[s] = slots[s - 1];
                        lab[s] = lab[s - 1];
                    }
                    slots[at] = logit;
                    lab[at] = entry.labels[j];
                    filled[i] = (used + 1).min(k);
                }
            }
        }
    }
    (0..n)
        .map(|i| {
            let slots = &logits[i * k..i * k + filled[i]];
            let top = slots[0];
            let (mut num, mut den) = (0.0f64, 0.0f64);
            for (s, &lab) in slots.iter().zip(&labels[i * k..]) {
                let e = (s - top).exp();
                num += e * lab as f64;
                den += e;
            }
            (num / den) as f32
        })
        .collect()
}

/// Sequential sweep over `order`. The memory holds the anchor plus the
/// `memory - 1` most recent frames, starting from the anchor itself.
fn sweep(video: &Video, anchor: &MemoryEntry, order: impl Iterator<Item = usize>, cfg: &TrackerConfig) -> Vec<(usize, BinaryMask)> {
    let (w, h) = (video.width(), video.height());
    let keep = cfg.memory - 1;
    let mut recent = vec![anchor.clone()];
    let mut out = Vec::new();
    for t in order {
        let mut memory = vec![anchor.clone()];
        memory.extend(recent.iter().rev().take(keep).cloned());
        let frame = &video.frames()[t];
        let bits = step(&memory, frame, cfg).into_iter().map(|v| v > 0.5).collect();
        let mask = BinaryMask::new(w, h, bits).expect("step output matches frame size");
        recent.push(MemoryEntry::new(frame, &mask));
        if recent.len() > keep.max(1) {
            recent.remove(0);
        }
        out.push((t, mask));
    }
    out
}

/// Propagates `m_tgt` from frame `t_tgt` forward to the end and backward to
/// the start. The target frame keeps `m_tgt` unchanged.
pub fn propagate(m_tgt: &BinaryMask, t_tgt: usize, video: &Video, cfg: &TrackerConfig) -> Result<MaskSequence> {
    cfg.validate()?;
    if (m_tgt.width(), m_tgt.height()) != (video.width(), video.height()) {
        return Err(Error::dims(
            format!("{}x{} mask", video.width(), video.height()),
            format!("{}x{}", m_tgt.width(), m_tgt.height()),
        ));
    }
    if t_tgt >= video.len() {
        return Err(Error::dims(format!("target index below {}", video.len()), t_tgt));
    }
    let anchor = MemoryEntry::new(&video.frames()[t_tgt], m_tgt);
    let (forward, backward) = rayon::join(
        || sweep(video, &anchor, t_tgt + 1..video.len(), cfg),
        || sweep(video, &anchor, (0..t_tgt).rev(), cfg),
    );
    let mut masks: Vec<Option<BinaryMask>> = vec![None; video.len()];
    masks[t_tgt] = Some(m_tgt.clone());
    for (t, m) in forward.into_iter().chain(backward) {
        masks[t] = Some(m);
    }
    MaskSequence::new(masks.into_iter().map(|m| m.expect("every frame filled")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: usize, h: usize, shift: isize) -> Frame {
        let px = (0..w * h)
            .map(|i| {
                let x = (i % w) as isize - shift;
                let y = (i / w) as isize;
                let v = (x.rem_euclid(5) * 3 + y.rem_euclid(3) * 7 + (x * y).rem_euclid(4)) % 11;
                v as f32 / 10.0
            })
            .collect();
        Frame::new(w, h, 1, px).unwrap()
    }

    #[test]
    fn self_match_copies_labels() {
        let f = textured(8, 8, 0);
        let m = BinaryMask::from_fn(8, 8, |x, y| x > 2 && y < 5);
        let out = step(&[MemoryEntry::new(&f, &m)], &f, &TrackerConfig::default());
        let back: Vec<bool> = out.iter().map(|&v| v > 0.5).collect();
        assert_eq!(back, m.bits());
    }

    #[test]
    fn blank_frames_keep_full_label() {
        let f = Frame::filled(8, 8, 0.0);
        let out = step(&[MemoryEntry::new(&f, &BinaryMask::full(8, 8))], &f, &TrackerConfig::default());
        assert!(out.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn two_pixel_shift() {
        let prev = textured(8, 8, 0);
        let next = textured(8, 8, 2);
        let m = BinaryMask::from_fn(8, 8, |x, y| (2..5).contains(&x) && (2..6).contains(&y));
        let out = step(&[MemoryEntry::new(&prev, &m)], &next, &TrackerConfig::default());
        // columns 0 and 1 show texture from outside the previous frame
        for y in 0..8 {
            for x in 2..8 {
                let want = (4..7).contains(&x) && (2..6).contains(&y);
                assert_eq!(out[y * 8 + x] > 0.5, want, "pixel ({x}, {y})");
            }
        }
    }

    #[test]
    fn static_video_and_boundaries() {
        let frames = vec![textured(16, 16, 0); 5];
        let video = Video::new("s", frames).unwrap();
        let m = BinaryMask::from_fn(16, 16, |x, y| x * y % 7 == 1);
        for t in [0, 2, 4] {
            let seq = propagate(&m, t, &video, &TrackerConfig::default()).unwrap();
            assert!(seq.masks().iter().all(|x| *x == m));
        }
        assert!(propagate(&BinaryMask::empty(4, 4), 0, &video, &TrackerConfig::default()).is_err());
        assert!(propagate(&m, 5, &video, &TrackerConfig::default()).is_err());
    }
}
