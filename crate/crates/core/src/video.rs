//! Frames, videos, binary masks and queries.
//!
//! All images are row-major with a top-left origin; `x` indexes columns and
//! `y` indexes rows everywhere in the crate.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl Frame {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::dims("non-empty frame", format!("{width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::dims("1 or 3 channels", channels));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::dims(width * height * channels, pixels.len()));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::dims("pixel values in [0,1]", v));
        }
        Ok(Frame { width, height, channels, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Frame::new(width, height, 1, vec![value; width * height]).expect("valid constant frame")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Mean over channels at a pixel.
    #[inline]
    pub fn luma(&self, x: usize, y: usize) -> f32 {
        if self.channels == 1 {
            return self.pixels[y * self.width + x];
        }
        let base = (y * self.width + x) * self.channels;
        self.pixels[base..base + self.channels].iter().sum::<f32>() / self.channels as f32
    }

    /// Single-channel copy (channel mean).
    pub fn to_gray(&self) -> Frame {
        if self.channels == 1 {
            return self.clone();
        }
        let mut out = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(self.luma(x, y));
            }
        }
        Frame { width: self.width, height: self.height, channels: 1, pixels: out }
    }

    /// Bilinear resize with half-pixel centers and edge clamping. An integer
    /// downscale by 2 therefore averages each 2x2 block.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Frame {
        assert!(width >= 1 && height >= 1);
        if width == self.width && height == self.height {
            return self.clone();
        }
        let xs = bilinear_taps(self.width, width);
        let ys = bilinear_taps(self.height, height);
        let mut out = Vec::with_capacity(width * height * self.channels);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                for c in 0..self.channels {
                    let top = self.get(x0, y0, c) * (1.0 - fx) + self.get(x1, y0, c) * fx;
                    let bot = self.get(x0, y1, c) * (1.0 - fx) + self.get(x1, y1, c) * fx;
                    out.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
                }
            }
        }
        Frame { width, height, channels: self.channels, pixels: out }
    }
}

/// Source taps `(lo, hi, weight_hi)` for each destination index of a 1-D
/// bilinear resize with half-pixel centers.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, (pos - lo as f64) as f32)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    frames: Vec<Frame>,
}

impl Video {
    pub fn new(id: impl Into<String>, frames: Vec<Frame>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::dims("at least one frame", 0))?;
        let shape = (first.width, first.height, first.channels);
        for f in &frames {
            let s = (f.width, f.height, f.channels);
            if s != shape {
                return Err(Error::dims(format!("{shape:?}"), format!("{s:?}")));
            }
        }
        Ok(Video { id: id.into(), frames })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn channels(&self) -> usize {
        self.frames[0].channels
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BinaryMask {}x{}", self.width, self.height)?;
        for row in self.bits.chunks(self.width) {
            let line: String = row.iter().map(|&b| if b { '#' } else { '.' }).collect();
            writeln!(f, "  {line}")?;
        }
        Ok(())
    }
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::dims(width * height, bits.len()));
        }
        Ok(BinaryMask { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        BinaryMask { width, height, bits: vec![false; width * height] }
    }

    pub fn full(width: usize, height: usize) -> Self {
        BinaryMask { width, height, bits: vec![true; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        BinaryMask { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        mask_area(self)
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn check_same_shape(&self, other: &BinaryMask) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::dims(
                format!("{}x{}", self.width, self.height),
                format!("{}x{}", other.width, other.height),
            ));
        }
        Ok(())
    }
}

pub fn mask_area(m: &BinaryMask) -> usize {
    m.bits.iter().filter(|&&b| b).count()
}

/// `(|a ∩ b|, |a ∪ b|)`.
pub fn mask_intersection_union(a: &BinaryMask, b: &BinaryMask) -> Result<(usize, usize)> {
    a.check_same_shape(b)?;
    let mut inter = 0;
    let mut union = 0;
    for (&p, &q) in a.bits.iter().zip(&b.bits) {
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    Ok((inter, union))
}

/// Nearest-neighbour resize with `src = floor(dst * src_len / dst_len)`.
pub fn resize_mask_nearest(m: &BinaryMask, width: usize, height: usize) -> BinaryMask {
    assert!(width >= 1 && height >= 1, "target size must be positive");
    BinaryMask::from_fn(width, height, |x, y| {
        m.get(x * m.width / width, y * m.height / height)
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSequence {
    masks: Vec<BinaryMask>,
}

impl MaskSequence {
    pub fn new(masks: Vec<BinaryMask>) -> Result<Self> {
        if let Some(first) = masks.first() {
            for m in &masks {
                first.check_same_shape(m)?;
            }
        }
        Ok(MaskSequence { masks })
    }

    pub fn empty(len: usize, width: usize, height: usize) -> Self {
        MaskSequence { masks: vec![BinaryMask::empty(width, height); len] }
    }

    pub fn masks(&self) -> &[BinaryMask] {
        &self.masks
    }

    pub fn into_masks(self) -> Vec<BinaryMask> {
        self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Dimensions `(width, height)` of the masks, if any.
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.masks.first().map(|m| (m.width, m.height))
    }

    /// True when every mask has no foreground.
    pub fn all_empty(&self) -> bool {
        self.masks.iter().all(BinaryMask::is_empty)
    }

    /// Checks that this sequence can be paired with `video`.
    pub fn check_matches(&self, video: &Video) -> Result<()> {
        if self.len() != video.len() {
            return Err(Error::dims(format!("{} masks", video.len()), self.len()));
        }
        if let Some((w, h)) = self.dims() {
            if (w, h) != (video.width(), video.height()) {
                return Err(Error::dims(
                    format!("{}x{}", video.width(), video.height()),
                    format!("{w}x{h}"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QueryKind {
    Referring,
    Reasoning,
    Negative,
}

impl QueryKind {
    pub const ALL: [QueryKind; 3] = [QueryKind::Referring, QueryKind::Reasoning, QueryKind::Negative];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryKind::Referring => "referring",
            QueryKind::Reasoning => "reasoning",
            QueryKind::Negative => "negative",
        }
    }
}

impl fmt::Display for QueryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QueryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "referring" => Ok(QueryKind::Referring),
            "reasoning" => Ok(QueryKind::Reasoning),
            "negative" => Ok(QueryKind::Negative),
            other => Err(Error::Config(format!("unknown query kind {other:?}"))),
        }
    }
}

/// A tokenized text instruction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Query {
    pub tokens: Vec<u32>,
    pub kind: QueryKind,
    pub raw_text: String,
}

impl Query {
    pub fn new(tokens: Vec<u32>, kind: QueryKind, raw_text: impl Into<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Config("query has no tokens".into()));
        }
        Ok(Query { tokens, kind, raw_text: raw_text.into() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows_set(w: usize, h: usize, rows: std::ops::Range<usize>) -> BinaryMask {
        BinaryMask::from_fn(w, h, |_, y| rows.contains(&y))
    }

    #[test]
    fn area_cases() {
        assert_eq!(mask_area(&BinaryMask::empty(4, 4)), 0);
        assert_eq!(mask_area(&BinaryMask::full(4, 4)), 16);
        assert_eq!(mask_area(&rows_set(4, 4, 0..2)), 8);
    }

    #[test]
    fn intersection_union_cases() {
        let a = BinaryMask::from_fn(4, 4, |x, y| y * 4 + x < 5);
        assert_eq!(mask_intersection_union(&a, &a).unwrap(), (5, 5));

        let p = BinaryMask::from_fn(4, 4, |x, y| y == 0 && x < 3);
        let q = BinaryMask::from_fn(4, 4, |x, y| y == 3 && x < 4);
        assert_eq!(mask_intersection_union(&p, &q).unwrap(), (0, 7));

        let r01 = rows_set(4, 4, 0..2);
        let r12 = rows_set(4, 4, 1..3);
        assert_eq!(mask_intersection_union(&r01, &r12).unwrap(), (4, 12));
    }

    #[test]
    fn intersection_union_rejects_shape_mismatch() {
        let err = mask_intersection_union(&BinaryMask::empty(4, 4), &BinaryMask::empty(4, 3));
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn nearest_resize_cases() {
        let checker = BinaryMask::from_fn(2, 2, |x, y| (x + y) % 2 == 0);
        let up = resize_mask_nearest(&checker, 4, 4);
        assert_eq!(up, BinaryMask::from_fn(4, 4, |x, y| (x / 2 + y / 2) % 2 == 0));

        assert_eq!(resize_mask_nearest(&checker, 2, 2), checker);

        let single = BinaryMask::from_fn(4, 4, |x, y| x == 0 && y == 0);
        let down = resize_mask_nearest(&single, 2, 2);
        assert_eq!(down, BinaryMask::from_fn(2, 2, |x, y| x == 0 && y == 0));
    }

    #[test]
    fn frame_validation() {
        assert!(Frame::new(0, 2, 1, vec![]).is_err());
        assert!(Frame::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(Frame::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Frame::new(2, 2, 1, vec![0.0, 0.5, 1.0, 1.5]).is_err());
        assert!(Frame::new(2, 2, 3, vec![0.25; 12]).is_ok());
    }

    #[test]
    fn video_requires_uniform_frames() {
        assert!(Video::new("v", vec![]).is_err());
        let a = Frame::filled(4, 4, 0.0);
        let b = Frame::filled(4, 5, 0.0);
        assert!(Video::new("v", vec![a.clone(), b]).is_err());
        assert_eq!(Video::new("v", vec![a.clone(), a]).unwrap().len(), 2);
    }

    #[test]
    fn bilinear_halving_averages_blocks() {
        let f = Frame::new(4, 2, 1, vec![0.0, 1.0, 0.2, 0.4, 1.0, 0.0, 0.6, 0.8]).unwrap();
        let g = f.resize_bilinear(2, 1);
        assert!((g.get(0, 0, 0) - 0.5).abs() < 1e-6);
        assert!((g.get(1, 0, 0) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn query_requires_tokens() {
        assert!(Query::new(vec![], QueryKind::Referring, "").is_err());
    }
}
