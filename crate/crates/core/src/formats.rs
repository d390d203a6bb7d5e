//! On-disk formats for masks (`VRLE1`) and raw videos (`VRAW1`).
//!
//! VRLE is 7-bit text: a header line `VRLE1 <width> <height> <T>` followed by
//! one line per frame holding space-separated decimal run lengths. Runs
//! alternate background/foreground starting with background, so a mask whose
//! first pixel is set starts with an explicit `0` run.
//!
//! VRAW is a header line `VRAW1 <width> <height> <channels> <T>` followed by
//! `T*width*height*channels` bytes, each `round(value*255)`, frame-major and
//! row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::video::{BinaryMask, Frame, MaskSequence, Video};

/// Background-first run lengths of a mask in row-major order.
pub fn encode_runs(m: &BinaryMask) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut count = 0;
    for &b in m.bits() {
        if b != current {
            runs.push(count);
            count = 0;
            current = b;
        }
        count += 1;
    }
    runs.push(count);
    runs
}

pub fn decode_runs(width: usize, height: usize, runs: &[usize]) -> Result<BinaryMask> {
    let total: usize = runs.iter().sum();
    if total != width * height {
        return Err(Error::MalformedRle(format!("runs sum to {total}, expected {}", width * height)));
    }
    if runs.iter().skip(1).any(|&r| r == 0) {
        return Err(Error::MalformedRle("zero-length run after the first".into()));
    }
    let mut bits = Vec::with_capacity(total);
    for (i, &r) in runs.iter().enumerate() {
        bits.extend(std::iter::repeat(i % 2 == 1).take(r));
    }
    BinaryMask::new(width, height, bits)
}

/// Encodes a single mask as a one-frame VRLE record.
pub fn rle_encode(m: &BinaryMask) -> Vec<u8> {
    encode_vrle(std::slice::from_ref(m), m.width(), m.height())
}

/// Decodes a one-frame VRLE record.
pub fn rle_decode(bytes: &[u8]) -> Result<BinaryMask> {
    let seq = decode_vrle(bytes)?;
    let mut masks = seq.into_masks();
    if masks.len() != 1 {
        return Err(Error::MalformedRle(format!("expected 1 frame, found {}", masks.len())));
    }
    Ok(masks.pop().expect("one mask"))
}

/// Encodes a mask sequence. `width`/`height` are only consulted when the
/// sequence is empty.
pub fn encode_vrle(masks: &[BinaryMask], width: usize, height: usize) -> Vec<u8> {
    let (w, h) = masks.first().map(|m| (m.width(), m.height())).unwrap_or((width, height));
    let mut out = format!("VRLE1 {w} {h} {}\n", masks.len());
    for m in masks {
        let runs = encode_runs(m);
        let line: Vec<String> = runs.iter().map(usize::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out.into_bytes()
}

pub fn encode_sequence(seq: &MaskSequence) -> Vec<u8> {
    encode_vrle(seq.masks(), 0, 0)
}

fn parse_usize(tok: &str, what: &str) -> Result<usize> {
    if tok.is_empty() || !tok.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::MalformedRle(format!("non-numeric {what} {tok:?}")));
    }
    tok.parse().map_err(|_| Error::MalformedRle(format!("{what} out of range: {tok:?}")))
}

pub fn decode_vrle(bytes: &[u8]) -> Result<MaskSequence> {
    if !bytes.is_ascii() {
        return Err(Error::MalformedRle("non-ASCII content".into()));
    }
    let text = std::str::from_utf8(bytes).expect("ascii is utf-8");
    let body = text
        .strip_suffix('\n')
        .ok_or_else(|| Error::MalformedRle("missing trailing newline".into()))?;
    let mut lines = body.split('\n');
    let header = lines.next().unwrap_or_default();
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 4 || fields[0] != "VRLE1" {
        return Err(Error::MalformedRle(format!("bad header {header:?}")));
    }
    let width = parse_usize(fields[1], "width")?;
    let height = parse_usize(fields[2], "height")?;
    let frames = parse_usize(fields[3], "frame count")?;
    if width == 0 || height == 0 {
        return Err(Error::MalformedRle(format!("bad header {header:?}")));
    }
    let mut masks = Vec::with_capacity(frames);
    for line in lines {
        let runs = line
            .split(' ')
            .map(|t| parse_usize(t, "run"))
            .collect::<Result<Vec<_>>>()?;
        masks.push(decode_runs(width, height, &runs)?);
    }
    if masks.len() != frames {
        return Err(Error::MalformedRle(format!("header says {frames} frames, found {}", masks.len())));
    }
    MaskSequence::new(masks)
}

pub fn write_vrle(path: &Path, seq: &MaskSequence) -> Result<()> {
    write_atomic(path, &encode_sequence(seq))
}

pub fn read_vrle(path: &Path) -> Result<MaskSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_vrle(&bytes)
}

pub fn encode_vraw(video: &Video) -> Vec<u8> {
    let (w, h, c, t) = (video.width(), video.height(), video.channels(), video.len());
    let mut out = format!("VRAW1 {w} {h} {c} {t}\n").into_bytes();
    out.reserve(w * h * c * t);
    for frame in video.frames() {
        out.extend(frame.pixels().iter().map(|&v| quantize(v)));
    }
    out
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

#[inline]
pub fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

pub fn decode_vraw(id: &str, bytes: &[u8]) -> Result<Video> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedRaw("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::MalformedRaw("header is not text".into()))?;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 5 || fields[0] != "VRAW1" {
        return Err(Error::MalformedRaw(format!("bad header {header:?}")));
    }
    let nums = fields[1..]
        .iter()
        .map(|f| f.parse::<usize>().map_err(|_| Error::MalformedRaw(format!("bad header {header:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let (w, h, c, t) = (nums[0], nums[1], nums[2], nums[3]);
    let per_frame = w * h * c;
    let data = &bytes[nl + 1..];
    if data.len() != per_frame * t {
        return Err(Error::MalformedRaw(format!("expected {} pixel bytes, found {}", per_frame * t, data.len())));
    }
    if per_frame == 0 {
        return Err(Error::MalformedRaw(format!("bad header {header:?}")));
    }
    let frames = data
        .chunks(per_frame)
        .map(|chunk| {
            Frame::new(w, h, c, chunk.iter().map(|&b| dequantize(b)).collect())
                .map_err(|e| Error::MalformedRaw(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    Video::new(id, frames).map_err(|e| Error::MalformedRaw(e.to_string()))
}

pub fn write_vraw(path: &Path, video: &Video) -> Result<()> {
    write_atomic(path, &encode_vraw(video))
}

pub fn read_vraw(path: &Path, id: &str) -> Result<Video> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_vraw(id, &bytes)
}

/// Writes via a sibling temporary file and rename so readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
