//! Toy multimodal sequence model with a `<seg>` token, plus the parameters of
//! the promptable mask decoder. Both live in one parameter list so a single
//! checkpoint holds the trainable model set.

pub mod checkpoint;
pub mod prompt;
pub mod tokenizer;
pub mod vocab;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::video::{Frame, Query, Video};
use prompt::{build_prompt, Prompt, Slot, VisualBlock};
use vocab::{Vocabulary, EOS, IMG_REF, IMG_TGT, SEG};

/// Longest generated answer.
pub const MAX_ANSWER: usize = 16;
/// Spatial stride of the decoder backbone.
pub const DECODER_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub ffn: usize,
    /// Merged visual tokens per frame (L).
    pub tokens: usize,
    /// Side of the square token-path frame.
    pub token_res: usize,
    pub patch: usize,
    /// Channels of the per-pixel feature stems.
    pub pixel_channels: usize,
    /// Text positions with a learned position embedding.
    pub max_text: usize,
    /// Size of the mask prompt `h_seg`.
    pub prompt_dim: usize,
    /// Side of the square mask-path frame.
    pub mask_res: usize,
    pub feature_channels: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            vocab: Vocabulary::default().len(),
            d_model: 32,
            layers: 2,
            ffn: 128,
            tokens: 112,
            token_res: 32,
            patch: 2,
            pixel_channels: 8,
            max_text: 48,
            prompt_dim: 32,
            mask_res: 64,
            feature_channels: 16,
        }
    }
}

impl ModelDims {
    pub const FIELDS: usize = 12;

    pub fn to_array(&self) -> [usize; Self::FIELDS] {
        [
            self.vocab,
            self.d_model,
            self.layers,
            self.ffn,
            self.tokens,
            self.token_res,
            self.patch,
            self.pixel_channels,
            self.max_text,
            self.prompt_dim,
            self.mask_res,
            self.feature_channels,
        ]
    }

    pub fn from_array(a: [usize; Self::FIELDS]) -> Self {
        ModelDims {
            vocab: a[0],
            d_model: a[1],
            layers: a[2],
            ffn: a[3],
            tokens: a[4],
            token_res: a[5],
            patch: a[6],
            pixel_channels: a[7],
            max_text: a[8],
            prompt_dim: a[9],
            mask_res: a[10],
            feature_channels: a[11],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if self.vocab > 128 || self.vocab < 6 {
            return Err(Error::Config(format!("vocabulary size {} outside 6..=128", self.vocab)));
        }
        if self.token_res % self.patch != 0 {
            return Err(Error::IndivisibleResolution { width: self.token_res, height: self.token_res, patch: self.patch });
        }
        if self.mask_res % DECODER_STRIDE != 0 {
            return Err(Error::IndivisibleResolution { width: self.mask_res, height: self.mask_res, patch: DECODER_STRIDE });
        }
        let patches = self.token_res / self.patch;
        tokenizer::merge_matrix(self.tokens, patches, patches).map(|_| ())
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zero,
    One,
    /// Uniform in `±scale * sqrt(3 / fan_in)`.
    Fan(f64),
    Uniform(f64),
    /// Tanh ramps with thresholds spread over `[0, 1]`.
    RampWeight,
    RampBias,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerIds {
    pub norm1: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub norm2: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Indices into the parameter list.
#[derive(Clone, Debug)]
pub(crate) struct Ids {
    pub tok_pix_w: usize,
    pub tok_pix_b: usize,
    pub tok_patch_w: usize,
    pub tok_patch_b: usize,
    pub embed: usize,
    pub cell: usize,
    pub time: usize,
    pub text_pos: usize,
    pub layers: Vec<LayerIds>,
    pub norm_f: usize,
    pub head: usize,
    pub seg_w1: usize,
    pub seg_b1: usize,
    pub seg_w2: usize,
    pub seg_b2: usize,
    pub dec_pix_w: usize,
    pub dec_pix_b: usize,
    pub dec_patch_w: usize,
    pub dec_patch_b: usize,
    pub dec_q: usize,
    pub dec_p: usize,
    pub dec_o: usize,
    pub dec_f: usize,
    pub dec_pix: usize,
    pub dec_bias: usize,
}

#[derive(Default)]
struct Layout {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl Layout {
    fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> usize {
        self.names.push(name.into());
        self.shapes.push((rows, cols));
        self.inits.push(init);
        self.names.len() - 1
    }
}

fn layout(d: &ModelDims) -> (Layout, Ids) {
    let mut l = Layout::default();
    let (dm, c1) = (d.d_model, d.pixel_channels);
    let tok_pix_w = l.add("tok.pixel.w", 1, c1, Init::RampWeight);
    let tok_pix_b = l.add("tok.pixel.b", 1, c1, Init::RampBias);
    let tok_patch_w = l.add("tok.patch.w", d.patch * d.patch * c1, dm, Init::Fan(1.0));
    let tok_patch_b = l.add("tok.patch.b", 1, dm, Init::Zero);
    let embed = l.add("lm.embed", d.vocab, dm, Init::Uniform(0.5));
    let cell = l.add("lm.cell", d.tokens, dm, Init::Uniform(0.2));
    let time = l.add("lm.time", 1, dm, Init::Uniform(0.5));
    let text_pos = l.add("lm.text_pos", d.max_text, dm, Init::Uniform(0.2));
    let layers = (0..d.layers)
        .map(|i| LayerIds {
            norm1: l.add(format!("lm.{i}.norm1"), 1, dm, Init::One),
            wq: l.add(format!("lm.{i}.wq"), dm, dm, Init::Fan(1.0)),
            wk: l.add(format!("lm.{i}.wk"), dm, dm, Init::Fan(1.0)),
            wv: l.add(format!("lm.{i}.wv"), dm, dm, Init::Fan(1.0)),
            wo: l.add(format!("lm.{i}.wo"), dm, dm, Init::Fan(0.5)),
            norm2: l.add(format!("lm.{i}.norm2"), 1, dm, Init::One),
            w1: l.add(format!("lm.{i}.w1"), dm, d.ffn, Init::Fan(1.0)),
            b1: l.add(format!("lm.{i}.b1"), 1, d.ffn, Init::Zero),
            w2: l.add(format!("lm.{i}.w2"), d.ffn, dm, Init::Fan(0.5)),
            b2: l.add(format!("lm.{i}.b2"), 1, dm, Init::Zero),
        })
        .collect();
    let norm_f = l.add("lm.norm_f", 1, dm, Init::One);
    let head = l.add("lm.head", dm, d.vocab, Init::Fan(1.0));
    let seg_w1 = l.add("seg.w1", dm, dm, Init::Fan(1.0));
    let seg_b1 = l.add("seg.b1", 1, dm, Init::Zero);
    let seg_w2 = l.add("seg.w2", dm, d.prompt_dim, Init::Fan(1.0));
    let seg_b2 = l.add("seg.b2", 1, d.prompt_dim, Init::Zero);
    let c = d.feature_channels;
    let s = DECODER_STRIDE;
    let dec_pix_w = l.add("dec.pixel.w", 1, c1, Init::RampWeight);
    let dec_pix_b = l.add("dec.pixel.b", 1, c1, Init::RampBias);
    let dec_patch_w = l.add("dec.patch.w", s * s * c1, c, Init::Fan(1.0));
    let dec_patch_b = l.add("dec.patch.b", 1, c, Init::Zero);
    let dec_q = l.add("dec.query", d.prompt_dim, c, Init::Fan(1.0));
    let dec_p = l.add("dec.prompt", d.prompt_dim, c, Init::Fan(1.0));
    let dec_o = l.add("dec.read", c, c, Init::Zero);
    let dec_f = l.add("dec.affinity", c, c, Init::Fan(1.0));
    let dec_pix = l.add("dec.pixel_affinity", c, c1, Init::Fan(1.0));
    let dec_bias = l.add("dec.bias", 1, 1, Init::Zero);
    let ids = Ids {
        tok_pix_w,
        tok_pix_b,
        tok_patch_w,
        tok_patch_b,
        embed,
        cell,
        time,
        text_pos,
        layers,
        norm_f,
        head,
        seg_w1,
        seg_b1,
        seg_w2,
        seg_b2,
        dec_pix_w,
        dec_pix_b,
        dec_patch_w,
        dec_patch_b,
        dec_q,
        dec_p,
        dec_o,
        dec_f,
        dec_pix,
        dec_bias,
    };
    (l, ids)
}

/// Rounds every value to the nearest `f32`, the precision checkpoints store.
pub fn round_to_f32(values: &mut [f64]) {
    values.iter_mut().for_each(|v| *v = *v as f32 as f64);
}

/// Trainable model set: visual tokenizer, sequence model, `<seg>` projection
/// and mask decoder.
#[derive(Clone, Debug)]
pub struct VisaModel {
    dims: ModelDims,
    names: Vec<String>,
    params: Vec<Tensor>,
    pub(crate) ids: Ids,
    merge: Vec<f64>,
    token_patches: Arc<[usize]>,
    pub(crate) decoder_patches: Arc<[usize]>,
    pub(crate) upsample: Vec<f64>,
}

impl VisaModel {
    /// Fresh parameters drawn from `seed`, rounded to `f32`.
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let (layout, ids) = layout(&dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout
            .shapes
            .iter()
            .zip(&layout.inits)
            .map(|(&(rows, cols), init)| {
                let n = rows * cols;
                let mut data: Vec<f64> = match *init {
                    Init::Zero => vec![0.0; n],
                    Init::One => vec![1.0; n],
                    Init::Fan(s) => {
                        let a = s * (3.0 / rows as f64).sqrt();
                        (0..n).map(|_| rng.gen_range(-a..a)).collect()
                    }
                    Init::Uniform(a) => (0..n).map(|_| rng.gen_range(-a..a)).collect(),
                    Init::RampWeight => vec![RAMP_GAIN; n],
                    Init::RampBias => (0..n).map(|k| -RAMP_GAIN * (k as f64 + 0.5) / n as f64).collect(),
                };
                round_to_f32(&mut data);
                Tensor::new(rows, cols, data)
            })
            .collect();
        Self::assemble(dims, layout.names, params, ids)
    }

    fn assemble(dims: ModelDims, names: Vec<String>, params: Vec<Tensor>, ids: Ids) -> Result<Self> {
        let patches = dims.token_res / dims.patch;
        let merge = tokenizer::merge_matrix(dims.tokens, patches, patches)?;
        let token_patches = tokenizer::patch_indices(dims.token_res, dims.token_res, dims.pixel_channels, dims.patch)?;
        let decoder_patches =
            tokenizer::patch_indices(dims.mask_res, dims.mask_res, dims.pixel_channels, DECODER_STRIDE)?;
        let coarse = dims.mask_res / DECODER_STRIDE;
        let mut upsample = vec![0.0; dims.mask_res * coarse];
        for (i, (lo, hi, w)) in crate::video::bilinear_taps(coarse, dims.mask_res).into_iter().enumerate() {
            upsample[i * coarse + lo] += 1.0 - w as f64;
            upsample[i * coarse + hi] += w as f64;
        }
        Ok(VisaModel { dims, names, params, ids, merge, token_patches, decoder_patches, upsample })
    }

    /// Rebuilds a model from stored parameters, checking every shape.
    pub fn from_parts(dims: ModelDims, params: Vec<Tensor>) -> Result<Self> {
        dims.validate()?;
        let (layout, ids) = layout(&dims);
        if params.len() != layout.shapes.len() {
            return Err(Error::dims(format!("{} parameter tensors", layout.shapes.len()), params.len()));
        }
        for ((t, &(r, c)), name) in params.iter().zip(&layout.shapes).zip(&layout.names) {
            if (t.rows, t.cols) != (r, c) {
                return Err(Error::dims(format!("{name} {r}x{c}"), format!("{}x{}", t.rows, t.cols)));
            }
        }
        Self::assemble(dims, layout.names, params, ids)
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Puts every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| if trainable { tape.param(i, p) } else { tape.constant(p.clone()) })
            .collect()
    }

    /// Gray token-path pixels as a `[res² x 1]` tensor.
    pub fn token_pixels(&self, frame: &Frame) -> Tensor {
        let res = self.dims.token_res;
        let f = frame.to_gray().resize_bilinear(res, res);
        Tensor::new(res * res, 1, f.pixels().iter().map(|&v| v as f64).collect())
    }

    /// Per-pixel ramp features, patch projection and grid merging to `L`
    /// tokens.
    pub fn visual_tokens(&self, tape: &mut Tape, v: &[Var], pixels: Var) -> Var {
        let (d, ids) = (&self.dims, &self.ids);
        let pre = tape.matmul(pixels, v[ids.tok_pix_w]);
        let pre = tape.add_row(pre, v[ids.tok_pix_b]);
        let phi = tape.tanh(pre);
        let n_patches = (d.token_res / d.patch).pow(2);
        let patches =
            tape.gather(phi, self.token_patches.clone(), n_patches, d.patch * d.patch * d.pixel_channels);
        let emb = tape.matmul(patches, v[ids.tok_patch_w]);
        let emb = tape.add_row(emb, v[ids.tok_patch_b]);
        let merge = tape.constant(Tensor::new(d.tokens, n_patches, self.merge.clone()));
        tape.matmul(merge, emb)
    }

    /// Exactly `L` merged embeddings for a frame.
    pub fn tokenize_frame(&self, frame: &Frame) -> Result<Tensor> {
        let d = &self.dims;
        if d.token_res % d.patch != 0 {
            return Err(Error::IndivisibleResolution { width: d.token_res, height: d.token_res, patch: d.patch });
        }
        let mut tape = Tape::new();
        let v = self.bind(&mut tape, false);
        let px = tape.constant(self.token_pixels(frame));
        let out = self.visual_tokens(&mut tape, &v, px);
        Ok(tape.value(out).clone())
    }

    pub fn visual_block(&self, video: &Video, t: usize) -> Result<VisualBlock> {
        Ok(VisualBlock { tokens: self.tokenize_frame(&video.frames()[t])?, time: frame_time(t, video.len()) })
    }

    /// Tokenizes the target and reference frames and lays out the prompt.
    pub fn prompt_for(
        &self,
        video: &Video,
        t_tgt: usize,
        references: &[usize],
        query: &Query,
        vocab: &Vocabulary,
    ) -> Result<Prompt> {
        let target = self.visual_block(video, t_tgt)?;
        let refs = references.iter().map(|&t| self.visual_block(video, t)).collect::<Result<Vec<_>>>()?;
        build_prompt(target, refs, query, vocab)
    }

    /// Input embeddings `[n x d]` for a slot sequence. `blocks` holds the
    /// merged tokens and normalized time of each image block.
    pub fn embed_slots(&self, tape: &mut Tape, v: &[Var], slots: &[Slot], blocks: &[(Var, f64)]) -> Result<Var> {
        let ids = &self.ids;
        let text: Vec<usize> = slots
            .iter()
            .filter_map(|s| match s {
                Slot::Text(id) => Some(*id as usize),
                Slot::Image { .. } => None,
            })
            .collect();
        if text.len() > self.dims.max_text {
            return Err(Error::dims(format!("at most {} text tokens", self.dims.max_text), text.len()));
        }
        if let Some(&bad) = text.iter().find(|&&id| id >= self.dims.vocab) {
            return Err(Error::dims(format!("token id below {}", self.dims.vocab), bad));
        }
        let words = tape.rows(v[ids.embed], &text);
        let positions: Vec<usize> = (0..text.len()).collect();
        let pos = tape.rows(v[ids.text_pos], &positions);
        let mut parts = vec![tape.add(words, pos)];
        for (b, &(tokens, time)) in blocks.iter().enumerate() {
            let with_cell = tape.add(tokens, v[ids.cell]);
            let kind = tape.rows(v[ids.embed], &[if b == 0 { IMG_TGT as usize } else { IMG_REF as usize }]);
            let typed = tape.add_row(with_cell, kind);
            let t = tape.scale(v[ids.time], time);
            parts.push(tape.add_row(typed, t));
        }
        let l = self.dims.tokens;
        let mut next_text = 0;
        let order: Vec<usize> = slots
            .iter()
            .map(|s| match *s {
                Slot::Text(_) => {
                    next_text += 1;
                    next_text - 1
                }
                Slot::Image { block, cell } => text.len() + block * l + cell,
            })
            .collect();
        if let Some(&bad) = order.iter().find(|&&i| i >= text.len() + blocks.len() * l) {
            return Err(Error::dims(format!("{} image blocks", blocks.len()), format!("slot row {bad}")));
        }
        let all = tape.concat_rows(&parts);
        Ok(tape.rows(all, &order))
    }

    /// Pre-norm causal transformer; returns the final normalized hidden
    /// states.
    pub fn transformer(&self, tape: &mut Tape, v: &[Var], x: Var) -> Var {
        let inv_sqrt_d = 1.0 / (self.dims.d_model as f64).sqrt();
        let mut x = x;
        for layer in &self.ids.layers {
            let n = tape.rms_norm(x);
            let n = tape.mul_row(n, v[layer.norm1]);
            let q = tape.matmul(n, v[layer.wq]);
            let k = tape.matmul(n, v[layer.wk]);
            let val = tape.matmul(n, v[layer.wv]);
            let scores = tape.matmul_nt(q, k);
            let scores = tape.scale(scores, inv_sqrt_d);
            let attn = tape.softmax_rows(scores, true);
            let read = tape.matmul(attn, val);
            let out = tape.matmul(read, v[layer.wo]);
            x = tape.add(x, out);
            let n = tape.rms_norm(x);
            let n = tape.mul_row(n, v[layer.norm2]);
            let h = tape.matmul(n, v[layer.w1]);
            let h = tape.add_row(h, v[layer.b1]);
            let h = tape.tanh(h);
            let h = tape.matmul(h, v[layer.w2]);
            let h = tape.add_row(h, v[layer.b2]);
            x = tape.add(x, h);
        }
        let n = tape.rms_norm(x);
        tape.mul_row(n, v[self.ids.norm_f])
    }

    pub fn logits(&self, tape: &mut Tape, v: &[Var], hidden: Var) -> Var {
        tape.matmul(hidden, v[self.ids.head])
    }

    /// Two-layer projection of a `<seg>` hidden row to the mask prompt.
    pub fn seg_projection(&self, tape: &mut Tape, v: &[Var], hidden_row: Var) -> Var {
        let ids = &self.ids;
        let h = tape.matmul(hidden_row, v[ids.seg_w1]);
        let h = tape.add_row(h, v[ids.seg_b1]);
        let h = tape.tanh(h);
        let h = tape.matmul(h, v[ids.seg_w2]);
        tape.add_row(h, v[ids.seg_b2])
    }

    fn forward_prompt(&self, prompt: &Prompt, answer: &[u32]) -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let v = self.bind(&mut tape, false);
        let blocks: Vec<(Var, f64)> = prompt.blocks.iter().map(|b| (tape.constant(b.tokens.clone()), b.time)).collect();
        let mut slots = prompt.slots.clone();
        slots.extend(answer.iter().map(|&id| Slot::Text(id)));
        let x = self.embed_slots(&mut tape, &v, &slots, &blocks)?;
        let hidden = self.transformer(&mut tape, &v, x);
        Ok((tape, v, hidden))
    }

    /// Next-token logits after `prompt` followed by `answer`.
    pub fn next_logits(&self, prompt: &Prompt, answer: &[u32]) -> Result<Vec<f64>> {
        let (mut tape, v, hidden) = self.forward_prompt(prompt, answer)?;
        let last = tape.value(hidden).rows - 1;
        let row = tape.rows(hidden, &[last]);
        let logits = self.logits(&mut tape, &v, row);
        Ok(tape.value(logits).data.clone())
    }

    /// Greedy answer for a prompt, without the terminating EOS.
    pub fn generate(&self, prompt: &Prompt) -> Result<Vec<u32>> {
        greedy_decode(|answer| self.next_logits(prompt, answer))
    }

    /// `h_seg` from the last-layer state at the first `<seg>` of `output`.
    pub fn extract_seg_embedding(&self, prompt: &Prompt, output: &[u32]) -> Result<Vec<f64>> {
        let pos = output.iter().position(|&t| t == SEG).ok_or(Error::NoSegToken)?;
        let (mut tape, v, hidden) = self.forward_prompt(prompt, &output[..=pos])?;
        let row = tape.rows(hidden, &[prompt.len() + pos]);
        let h = self.seg_projection(&mut tape, &v, row);
        Ok(tape.value(h).data.clone())
    }
}

const RAMP_GAIN: f64 = 8.0;

/// Normalized time `t / (T - 1)`, zero for single-frame videos.
pub fn frame_time(t: usize, frames: usize) -> f64 {
    if frames <= 1 { 0.0 } else { t as f64 / (frames - 1) as f64 }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding loop: stops at EOS (not emitted) or after
/// [`MAX_ANSWER`] tokens.
pub fn greedy_decode(mut next: impl FnMut(&[u32]) -> Result<Vec<f64>>) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    while out.len() < MAX_ANSWER {
        let id = argmax_lowest(&next(&out)?) as u32;
        if id == EOS {
            break;
        }
        out.push(id);
    }
    Ok(out)
}
