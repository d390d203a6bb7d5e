//! Deterministic moving-shapes benchmark: scenes, queries, ground truth and
//! on-disk datasets.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::formats::{self, dequantize};
use crate::model::vocab::Vocabulary;
use crate::video::{BinaryMask, Frame, MaskSequence, Query, QueryKind, Video};

/// Named object intensities, stored as 8-bit levels so rendered frames are
/// exactly representable in VRAW files.
pub const PALETTE: [(&str, u8); 4] = [("dark", 64), ("gray", 115), ("light", 166), ("white", 230)];

/// Minimum gap separating the winner of a reasoning query from the runner-up.
pub const SPEED_MARGIN: f64 = 0.5;
pub const FRAME_MARGIN: usize = 2;

pub fn palette_value(index: usize) -> f32 {
    dequantize(PALETTE[index].1)
}

/// Name of the palette level nearest to `v`.
pub fn intensity_name(v: f32) -> &'static str {
    PALETTE
        .iter()
        .min_by(|a, b| {
            let da = (dequantize(a.1) - v).abs();
            let db = (dequantize(b.1) - v).abs();
            da.total_cmp(&db)
        })
        .map(|p| p.0)
        .expect("palette is non-empty")
}

pub fn palette_index(name: &str) -> Option<usize> {
    PALETTE.iter().position(|p| p.0 == name)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub size: f64,
    pub intensity: f32,
    pub start: (f64, f64),
    pub velocity: (f64, f64),
}

impl ObjectSpec {
    pub fn center(&self, t: usize) -> (f64, f64) {
        (self.start.0 + self.velocity.0 * t as f64, self.start.1 + self.velocity.1 * t as f64)
    }

    pub fn speed(&self) -> f64 {
        self.velocity.0.hypot(self.velocity.1)
    }

    fn contains(&self, cx: f64, cy: f64, px: f64, py: f64) -> bool {
        let half = self.size / 2.0;
        match self.shape {
            Shape::Square => px >= cx - half && px < cx + half && py >= cy - half && py < cy + half,
            Shape::Circle => (px - cx).powi(2) + (py - cy).powi(2) < half * half,
            Shape::Triangle => {
                let top = cy - half;
                py >= top && py < cy + half && (px - cx).abs() < (py - top) / 2.0
            }
        }
    }

    /// Unoccluded rasterization at frame `t`: a pixel is set when its center
    /// lies inside the shape.
    pub fn rasterize(&self, t: usize, width: usize, height: usize) -> BinaryMask {
        let (cx, cy) = self.center(t);
        BinaryMask::from_fn(width, height, |x, y| self.contains(cx, cy, x as f64 + 0.5, y as f64 + 0.5))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<ObjectSpec>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > 4 {
            return Err(Error::InvalidSpec(format!("{} objects, expected 1..=4", self.objects.len())));
        }
        if self.frames < 4 {
            return Err(Error::InvalidSpec(format!("{} frames, expected at least 4", self.frames)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidSpec("empty frame size".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.size < 3.0 {
                return Err(Error::InvalidSpec(format!("object {i} has size {} < 3", o.size)));
            }
            if !(o.intensity > 0.0 && o.intensity <= 1.0) {
                return Err(Error::InvalidSpec(format!("object {i} intensity {} outside (0,1]", o.intensity)));
            }
            if self.objects[..i].iter().any(|p| p.intensity == o.intensity) {
                return Err(Error::InvalidSpec(format!("object {i} repeats intensity {}", o.intensity)));
            }
        }
        Ok(())
    }

    /// Unoccluded masks of one object over all frames.
    pub fn raw_masks(&self, object: usize) -> Vec<BinaryMask> {
        (0..self.frames).map(|t| self.objects[object].rasterize(t, self.width, self.height)).collect()
    }

    /// First frame with a non-empty unoccluded mask, or `frames` if never visible.
    pub fn enter_frame(&self, object: usize) -> usize {
        (0..self.frames)
            .find(|&t| !self.objects[object].rasterize(t, self.width, self.height).is_empty())
            .unwrap_or(self.frames)
    }

    /// First frame after entering whose unoccluded mask is empty, or `frames`
    /// if the object never leaves.
    pub fn exit_frame(&self, object: usize) -> usize {
        let enter = self.enter_frame(object);
        (enter..self.frames)
            .find(|&t| self.objects[object].rasterize(t, self.width, self.height).is_empty())
            .unwrap_or(self.frames)
    }
}

/// Renders frames and per-object visible masks. Later objects occlude
/// earlier ones; the background is 0.
pub fn render_scene(spec: &SceneSpec) -> Result<(Video, Vec<MaskSequence>)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut frames = Vec::with_capacity(spec.frames);
    let mut per_object: Vec<Vec<BinaryMask>> = vec![Vec::with_capacity(spec.frames); spec.objects.len()];
    for t in 0..spec.frames {
        let raw: Vec<BinaryMask> = spec.objects.iter().map(|o| o.rasterize(t, w, h)).collect();
        let mut pixels = vec![0.0f32; w * h];
        let mut owner = vec![usize::MAX; w * h];
        for (i, (m, o)) in raw.iter().zip(&spec.objects).enumerate() {
            for (p, &b) in m.bits().iter().enumerate() {
                if b {
                    pixels[p] = o.intensity;
                    owner[p] = i;
                }
            }
        }
        for (i, masks) in per_object.iter_mut().enumerate() {
            let bits = owner.iter().map(|&o| o == i).collect();
            masks.push(BinaryMask::new(w, h, bits)?);
        }
        frames.push(Frame::new(w, h, 1, pixels)?);
    }
    let video = Video::new(format!("scene{}", spec.seed), frames)?;
    let masks = per_object.into_iter().map(MaskSequence::new).collect::<Result<Vec<_>>>()?;
    Ok((video, masks))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReasoningTemplate {
    Fastest,
    ExitsLast,
    EntersLatest,
}

impl ReasoningTemplate {
    pub const ALL: [ReasoningTemplate; 3] =
        [ReasoningTemplate::Fastest, ReasoningTemplate::ExitsLast, ReasoningTemplate::EntersLatest];

    pub fn description(self) -> &'static str {
        match self {
            ReasoningTemplate::Fastest => "fastest shape",
            ReasoningTemplate::ExitsLast => "shape that exits the frame last",
            ReasoningTemplate::EntersLatest => "shape that enters latest",
        }
    }

    pub fn from_description(text: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.description() == text)
    }
}

/// Index of the unique maximum of `values`, requiring the runner-up to trail
/// by at least `margin`.
fn unique_argmax(values: &[f64], margin: f64) -> Option<usize> {
    let best = (0..values.len()).max_by(|&a, &b| values[a].total_cmp(&values[b]))?;
    let clear = values
        .iter()
        .enumerate()
        .all(|(i, &v)| i == best || values[best] - v >= margin);
    clear.then_some(best)
}

/// Object answering a reasoning template. Depends only on the object set,
/// not on listing order.
pub fn reasoning_target(spec: &SceneSpec, template: ReasoningTemplate) -> Result<usize> {
    let n = spec.objects.len();
    let (values, margin): (Vec<f64>, f64) = match template {
        ReasoningTemplate::Fastest => (spec.objects.iter().map(ObjectSpec::speed).collect(), SPEED_MARGIN),
        ReasoningTemplate::ExitsLast => ((0..n).map(|i| spec.exit_frame(i) as f64).collect(), FRAME_MARGIN as f64),
        ReasoningTemplate::EntersLatest => {
            ((0..n).map(|i| spec.enter_frame(i) as f64).collect(), FRAME_MARGIN as f64)
        }
    };
    unique_argmax(&values, margin)
        .ok_or_else(|| Error::Unsatisfiable(format!("no unique answer to {:?}", template.description())))
}

fn referring_description(o: &ObjectSpec) -> String {
    format!("{} {}", intensity_name(o.intensity), o.shape.name())
}

/// Builds a query of `kind` against `spec`, returning the target object index
/// (`None` for negative queries).
pub fn make_query(
    spec: &SceneSpec,
    kind: QueryKind,
    seed: u64,
    vocab: &Vocabulary,
) -> Result<(Query, Option<usize>)> {
    make_query_with(spec, kind, seed, vocab, &ReasoningTemplate::ALL)
}

pub fn make_query_with(
    spec: &SceneSpec,
    kind: QueryKind,
    seed: u64,
    vocab: &Vocabulary,
    templates: &[ReasoningTemplate],
) -> Result<(Query, Option<usize>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (text, target) = match kind {
        QueryKind::Referring => {
            let i = rng.gen_range(0..spec.objects.len());
            let name = intensity_name(spec.objects[i].intensity);
            if spec.objects.iter().filter(|o| intensity_name(o.intensity) == name).count() > 1 {
                return Err(Error::Unsatisfiable(format!("intensity {name} is not unique")));
            }
            (referring_description(&spec.objects[i]), Some(i))
        }
        QueryKind::Reasoning => {
            let mut order = templates.to_vec();
            order.shuffle(&mut rng);
            let found = order.into_iter().find_map(|t| reasoning_target(spec, t).ok().map(|i| (t, i)));
            let (t, i) = found.ok_or_else(|| Error::Unsatisfiable("no reasoning template has a unique answer".into()))?;
            (t.description().to_string(), Some(i))
        }
        QueryKind::Negative => {
            let absent: Vec<Shape> =
                Shape::ALL.into_iter().filter(|s| spec.objects.iter().all(|o| o.shape != *s)).collect();
            let shape = *absent
                .choose(&mut rng)
                .ok_or_else(|| Error::Unsatisfiable("every shape is present".into()))?;
            let level = PALETTE[rng.gen_range(0..PALETTE.len())].0;
            (format!("{level} {}", shape.name()), None)
        }
    };
    let tokens = vocab.tokenize(&text)?;
    Ok((Query::new(tokens, kind, text)?, target))
}

/// 64-bit finalizer used to derive independent per-item seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(index))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub n_videos: usize,
    pub seed: u64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub max_speed: f64,
    pub queries_per_video: usize,
    /// Proportions of referring, reasoning and negative queries.
    pub proportions: [f64; 3],
    pub val_fraction: f64,
    /// Every target enters during the final quarter of its video.
    pub late_targets: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_videos: 10,
            seed: 7,
            frames: 16,
            width: 64,
            height: 64,
            max_objects: 3,
            min_size: 8,
            max_size: 14,
            max_speed: 2.5,
            queries_per_video: 2,
            proportions: [0.5, 0.4, 0.1],
            val_fraction: 0.2,
            late_targets: false,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_videos == 0 || self.queries_per_video == 0 {
            return bad("dataset needs at least one video and one query per video".into());
        }
        if self.max_objects == 0 || self.max_objects > 4 {
            return bad(format!("max_objects {} outside 1..=4", self.max_objects));
        }
        if self.min_size < 3 || self.max_size < self.min_size {
            return bad(format!("bad size range {}..={}", self.min_size, self.max_size));
        }
        if self.proportions.iter().any(|p| *p < 0.0 || !p.is_finite()) || self.proportions.iter().sum::<f64>() <= 0.0 {
            return bad(format!("bad query proportions {:?}", self.proportions));
        }
        if !(0.0..=1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0,1]", self.val_fraction));
        }
        if self.frames < 4 {
            return bad(format!("{} frames, expected at least 4", self.frames));
        }
        Ok(())
    }
}

/// Largest-remainder allocation of `total` items across `proportions`; ties in
/// the remainder go to the earlier entry.
pub fn allocate_counts(proportions: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = proportions.iter().sum();
    let exact: Vec<f64> = proportions.iter().map(|p| p / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetRecord {
    pub video_id: String,
    pub kind: QueryKind,
    pub query_text: String,
    /// Ground-truth VRLE path relative to the dataset root.
    pub gt_path: String,
    pub split: Split,
}

impl DatasetRecord {
    /// Stable identifier, the ground-truth file stem.
    pub fn record_id(&self) -> String {
        Path::new(&self.gt_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.gt_path.clone())
    }

    pub fn video_path(&self) -> String {
        format!("videos/{}.vraw", self.video_id)
    }

    pub fn query(&self, vocab: &Vocabulary) -> Result<Query> {
        Query::new(vocab.tokenize(&self.query_text)?, self.kind, self.query_text.clone())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<DatasetRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

impl DatasetManifest {
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.video_id, r.kind, r.query_text, r.gt_path, r.split));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(Error::Config(format!("manifest line {}: expected 5 fields, found {}", n + 1, f.len())));
            }
            records.push(DatasetRecord {
                video_id: f[0].to_string(),
                kind: f[1].parse()?,
                query_text: f[2].to_string(),
                gt_path: f[3].to_string(),
                split: f[4].parse()?,
            });
        }
        Ok(DatasetManifest { records })
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_tsv(&text)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        formats::write_atomic(&root.join(MANIFEST_FILE), self.to_tsv().as_bytes())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// A generated video with its queries and ground truth, before it hits disk.
#[derive(Clone, Debug)]
pub struct GeneratedVideo {
    pub spec: SceneSpec,
    pub video: Video,
    pub queries: Vec<(Query, Option<usize>, MaskSequence)>,
}

fn random_object(cfg: &DatasetConfig, rng: &mut ChaCha8Rng, intensity: f32) -> ObjectSpec {
    let shape = Shape::ALL[rng.gen_range(0..3)];
    let size = rng.gen_range(cfg.min_size..=cfg.max_size) as f64;
    let speed = rng.gen_range(0.0..cfg.max_speed);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let velocity = (speed * angle.cos(), speed * angle.sin());
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let start = if rng.gen_bool(0.6) {
        (rng.gen_range(size / 2.0..w - size / 2.0), rng.gen_range(size / 2.0..h - size / 2.0))
    } else {
        (rng.gen_range(-w / 2.0..1.5 * w), rng.gen_range(-h / 2.0..1.5 * h))
    };
    ObjectSpec { shape, size, intensity, start, velocity }
}

/// An object that is invisible before `enter` and visible from `enter` on.
fn late_object(cfg: &DatasetConfig, rng: &mut ChaCha8Rng, intensity: f32, enter: usize) -> ObjectSpec {
    let shape = Shape::ALL[rng.gen_range(0..3)];
    let size = rng.gen_range(cfg.min_size..=cfg.max_size) as f64;
    let speed = rng.gen_range(1.5..2.5);
    let half = size / 2.0;
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let along = |len: f64, rng: &mut ChaCha8Rng| rng.gen_range(half + 2.0..len - half - 2.0);
    // Leading edge sits 1.5 px inside the frame at the entry frame.
    let (center, velocity) = match rng.gen_range(0..4) {
        0 => ((1.5 - half, along(h, rng)), (speed, 0.0)),
        1 => ((w - 1.5 + half, along(h, rng)), (-speed, 0.0)),
        2 => ((along(w, rng), 1.5 - half), (0.0, speed)),
        _ => ((along(w, rng), h - 1.5 + half), (0.0, -speed)),
    };
    let t = enter as f64;
    let start = (center.0 - velocity.0 * t, center.1 - velocity.1 * t);
    ObjectSpec { shape, size, intensity, start, velocity }
}

pub fn random_scene(cfg: &DatasetConfig, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=cfg.max_objects);
    let mut levels: Vec<usize> = (0..PALETTE.len()).collect();
    levels.shuffle(&mut rng);
    let mut objects = Vec::with_capacity(n);
    for &level in levels.iter().take(n) {
        let intensity = palette_value(level);
        // Keep objects that are on screen for a reasonable stretch.
        let obj = loop {
            let o = random_object(cfg, &mut rng, intensity);
            let visible = (0..cfg.frames).filter(|&t| !o.rasterize(t, cfg.width, cfg.height).is_empty()).count();
            if visible >= 4.min(cfg.frames) {
                break o;
            }
        };
        objects.push(obj);
    }
    SceneSpec { seed, frames: cfg.frames, width: cfg.width, height: cfg.height, objects }
}

/// Scene whose last object enters in the final quarter while the others stay
/// fully visible throughout.
pub fn late_target_scene(cfg: &DatasetConfig, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=cfg.max_objects.max(2));
    let mut levels: Vec<usize> = (0..PALETTE.len()).collect();
    levels.shuffle(&mut rng);
    let t = cfg.frames;
    let enter = (3 * t).div_ceil(4);
    let mut objects = Vec::with_capacity(n);
    for &level in levels.iter().take(n - 1) {
        let intensity = palette_value(level);
        let obj = loop {
            let mut o = random_object(cfg, &mut rng, intensity);
            o.velocity = (o.velocity.0 * 0.4, o.velocity.1 * 0.4);
            let full = (o.size * o.size * 0.4) as usize;
            if (0..t).all(|f| o.rasterize(f, cfg.width, cfg.height).area() >= full) {
                break o;
            }
        };
        objects.push(obj);
    }
    objects.push(late_object(cfg, &mut rng, palette_value(levels[n - 1]), enter));
    SceneSpec { seed, frames: t, width: cfg.width, height: cfg.height, objects }
}

fn visible_target(masks: &[MaskSequence], target: Option<usize>, spec: &SceneSpec) -> MaskSequence {
    match target {
        Some(i) => masks[i].clone(),
        None => MaskSequence::empty(spec.frames, spec.width, spec.height),
    }
}

/// Generates video `index` of a dataset with the given per-query kinds. The
/// scene is re-drawn with a derived seed until every query is satisfiable and
/// every positive target is visible somewhere.
pub fn generate_video(
    cfg: &DatasetConfig,
    index: usize,
    kinds: &[QueryKind],
    vocab: &Vocabulary,
) -> Result<GeneratedVideo> {
    let base = mix_seed(cfg.seed, index as u64);
    let templates: &[ReasoningTemplate] =
        if cfg.late_targets { &[ReasoningTemplate::EntersLatest] } else { &ReasoningTemplate::ALL };
    for attempt in 0..1000u64 {
        let scene_seed = mix_seed(base, attempt);
        let spec = if cfg.late_targets { late_target_scene(cfg, scene_seed) } else { random_scene(cfg, scene_seed) };
        let (mut video, masks) = render_scene(&spec)?;
        video.id = format!("vid{index:04}");
        let mut queries = Vec::with_capacity(kinds.len());
        let mut ok = true;
        for (j, &kind) in kinds.iter().enumerate() {
            let qseed = mix_seed(scene_seed, 1000 + j as u64);
            let made = if cfg.late_targets && kind == QueryKind::Referring {
                late_referring_query(&spec, vocab)
            } else {
                make_query_with(&spec, kind, qseed, vocab, templates)
            };
            match made {
                Ok((q, target)) => {
                    if cfg.late_targets && kind != QueryKind::Negative && target != Some(spec.objects.len() - 1) {
                        ok = false;
                        break;
                    }
                    let gt = visible_target(&masks, target, &spec);
                    if target.is_some() && gt.all_empty() {
                        ok = false;
                        break;
                    }
                    queries.push((q, target, gt));
                }
                Err(Error::Unsatisfiable(_)) => {
                    ok = false;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if ok {
            return Ok(GeneratedVideo { spec, video, queries });
        }
    }
    Err(Error::Unsatisfiable(format!("could not draw a satisfiable scene for video {index}")))
}

fn late_referring_query(spec: &SceneSpec, vocab: &Vocabulary) -> Result<(Query, Option<usize>)> {
    let i = spec.objects.len() - 1;
    let text = referring_description(&spec.objects[i]);
    Ok((Query::new(vocab.tokenize(&text)?, QueryKind::Referring, text)?, Some(i)))
}

/// Query kinds for every (video, query) slot, following the configured
/// proportions exactly and shuffled deterministically.
pub fn plan_kinds(cfg: &DatasetConfig) -> Vec<Vec<QueryKind>> {
    let total = cfg.n_videos * cfg.queries_per_video;
    let counts = allocate_counts(&cfg.proportions, total);
    let mut kinds: Vec<QueryKind> = QueryKind::ALL
        .iter()
        .zip(&counts)
        .flat_map(|(&k, &c)| std::iter::repeat(k).take(c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, u64::MAX));
    kinds.shuffle(&mut rng);
    kinds.chunks(cfg.queries_per_video).map(<[QueryKind]>::to_vec).collect()
}

pub fn split_of(cfg: &DatasetConfig, index: usize) -> Split {
    let n_val = (cfg.n_videos as f64 * cfg.val_fraction).round() as usize;
    if index < cfg.n_videos - n_val {
        Split::Train
    } else {
        Split::Val
    }
}

/// Generates every video in memory (in parallel) without touching disk.
pub fn generate_all(cfg: &DatasetConfig, vocab: &Vocabulary) -> Result<Vec<GeneratedVideo>> {
    use rayon::prelude::*;
    cfg.validate()?;
    let plan = plan_kinds(cfg);
    plan.par_iter().enumerate().map(|(i, kinds)| generate_video(cfg, i, kinds, vocab)).collect()
}

/// Writes videos, ground truth and the manifest under `root`.
pub fn build_dataset(cfg: &DatasetConfig, root: &Path, vocab: &Vocabulary) -> Result<DatasetManifest> {
    let videos = generate_all(cfg, vocab)?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = DatasetManifest::default();
    for (i, g) in videos.iter().enumerate() {
        let split = split_of(cfg, i);
        let record_video = g.video.id.clone();
        formats::write_vraw(&root.join(format!("videos/{record_video}.vraw")), &g.video)?;
        for (j, (q, _, gt)) in g.queries.iter().enumerate() {
            let gt_path = format!("gt/{record_video}_q{j}.vrle");
            formats::write_vrle(&root.join(&gt_path), gt)?;
            manifest.records.push(DatasetRecord {
                video_id: record_video.clone(),
                kind: q.kind,
                query_text: q.raw_text.clone(),
                gt_path,
                split,
            });
        }
    }
    manifest.write(root)?;
    Ok(manifest)
}

/// A dataset loaded from disk: manifest plus the root it is relative to.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        Ok(Dataset { root: root.to_path_buf(), manifest: DatasetManifest::read(root)? })
    }

    pub fn video(&self, record: &DatasetRecord) -> Result<Video> {
        formats::read_vraw(&self.root.join(record.video_path()), &record.video_id)
    }

    pub fn ground_truth(&self, record: &DatasetRecord) -> Result<MaskSequence> {
        formats::read_vrle(&self.root.join(&record.gt_path))
    }
}
