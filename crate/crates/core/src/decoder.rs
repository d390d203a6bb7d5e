//! Promptable mask decoder.
//!
//! A per-pixel ramp stem feeds a stride-4 patch projection (the backbone
//! feature map at 1/4 resolution). The prompt `h_seg` reads the feature map
//! once through attention, the refined prompt scores every coarse position,
//! and the score map is bilinearly upsampled by 4. A full-resolution
//! pixel-affinity term is added before the logistic so boundaries are not
//! limited to the coarse grid.

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::ProbabilityMap;
use crate::model::{VisaModel, DECODER_STRIDE};
use crate::video::{BinaryMask, Frame};

/// Backbone output for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    /// Side of the mask-path frame.
    pub resolution: usize,
    /// `[res² x pixel_channels]` stem features.
    pub pixel: Tensor,
    /// `[(res/4)² x feature_channels]` backbone features.
    pub coarse: Tensor,
}

impl FeatureMap {
    pub fn coarse_side(&self) -> usize {
        self.resolution / DECODER_STRIDE
    }
}

/// Gray mask-path pixels as a `[res² x 1]` tensor.
pub fn mask_pixels(model: &VisaModel, frame: &Frame) -> Tensor {
    let res = model.dims().mask_res;
    let f = frame.to_gray().resize_bilinear(res, res);
    Tensor::new(res * res, 1, f.pixels().iter().map(|&v| v as f64).collect())
}

/// Stem and backbone on the tape; returns `(pixel, coarse)` features.
pub fn backbone_on_tape(model: &VisaModel, tape: &mut Tape, v: &[Var], pixels: Var) -> (Var, Var) {
    let (d, ids) = (model.dims(), &model.ids);
    let pre = tape.matmul(pixels, v[ids.dec_pix_w]);
    let pre = tape.add_row(pre, v[ids.dec_pix_b]);
    let phi = tape.tanh(pre);
    let side = d.mask_res / DECODER_STRIDE;
    let patches = tape.gather(
        phi,
        model.decoder_patches.clone(),
        side * side,
        DECODER_STRIDE * DECODER_STRIDE * d.pixel_channels,
    );
    let f = tape.matmul(patches, v[ids.dec_patch_w]);
    let f = tape.add_row(f, v[ids.dec_patch_b]);
    (phi, tape.tanh(f))
}

/// Probability column `[res² x 1]` for prompt `h` (`1 x prompt_dim`).
pub fn decode_on_tape(model: &VisaModel, tape: &mut Tape, v: &[Var], pixel: Var, coarse: Var, h: Var) -> Var {
    let (d, ids) = (model.dims(), &model.ids);
    let c = d.feature_channels;
    let q = tape.matmul(h, v[ids.dec_q]);
    let scores = tape.matmul_nt(q, coarse);
    let scores = tape.scale(scores, 1.0 / (c as f64).sqrt());
    let attn = tape.softmax_rows(scores, false);
    let read = tape.matmul(attn, coarse);
    let base = tape.matmul(h, v[ids.dec_p]);
    let refined = tape.matmul(read, v[ids.dec_o]);
    let prompt = tape.add(base, refined);
    let key = tape.matmul_nt(prompt, v[ids.dec_f]);
    let score = tape.matmul_nt(coarse, key);
    let side = d.mask_res / DECODER_STRIDE;
    let grid: std::sync::Arc<[usize]> = (0..side * side).collect();
    let grid = tape.gather(score, grid, side, side);
    let up = tape.constant(Tensor::new(d.mask_res, side, model.upsample.clone()));
    let rows = tape.matmul(up, grid);
    let full = tape.matmul_nt(rows, up);
    let column: std::sync::Arc<[usize]> = (0..d.mask_res * d.mask_res).collect();
    let full = tape.gather(full, column, d.mask_res * d.mask_res, 1);
    let pix_key = tape.matmul(prompt, v[ids.dec_pix]);
    let pix = tape.matmul_nt(pixel, pix_key);
    let logits = tape.add(full, pix);
    let bias = tape.rows(v[ids.dec_bias], &[0]);
    let bias = tape.gather(bias, vec![0; d.mask_res * d.mask_res].into(), d.mask_res * d.mask_res, 1);
    let logits = tape.add(logits, bias);
    tape.sigmoid(logits)
}

/// Backbone features of a frame resized to the mask path.
pub fn backbone(model: &VisaModel, frame: &Frame) -> FeatureMap {
    let mut tape = Tape::new();
    let v = model.bind(&mut tape, false);
    let px = tape.constant(mask_pixels(model, frame));
    let (pixel, coarse) = backbone_on_tape(model, &mut tape, &v, px);
    FeatureMap { resolution: model.dims().mask_res, pixel: tape.value(pixel).clone(), coarse: tape.value(coarse).clone() }
}

pub fn decode_mask(model: &VisaModel, features: &FeatureMap, h_seg: &[f64]) -> Result<ProbabilityMap> {
    let d = model.dims();
    let side = d.mask_res / DECODER_STRIDE;
    if features.resolution != d.mask_res
        || (features.pixel.rows, features.pixel.cols) != (d.mask_res * d.mask_res, d.pixel_channels)
        || (features.coarse.rows, features.coarse.cols) != (side * side, d.feature_channels)
    {
        return Err(Error::dims(format!("{0}x{0} mask-path features", d.mask_res), format!("{}", features.resolution)));
    }
    if h_seg.len() != d.prompt_dim {
        return Err(Error::dims(format!("prompt of {}", d.prompt_dim), h_seg.len()));
    }
    let mut tape = Tape::new();
    let v = model.bind(&mut tape, false);
    let pixel = tape.constant(features.pixel.clone());
    let coarse = tape.constant(features.coarse.clone());
    let h = tape.constant(Tensor::new(1, h_seg.len(), h_seg.to_vec()));
    let p = decode_on_tape(model, &mut tape, &v, pixel, coarse, h);
    // keep strictly inside (0, 1) even when the logistic saturates
    let values = tape.value(p).data.iter().map(|&x| x.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)).collect();
    ProbabilityMap::new(d.mask_res, d.mask_res, values)
}

/// Bit set where the probability is strictly above `tau`.
pub fn binarize(p: &ProbabilityMap, tau: f64) -> BinaryMask {
    assert!(tau > 0.0 && tau < 1.0, "threshold {tau} outside (0, 1)");
    BinaryMask::from_fn(p.width(), p.height(), |x, y| p.get(x, y) > tau)
}
