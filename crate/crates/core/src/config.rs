//! Pipeline configuration and its line-based `section.key = value` file
//! format. Unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::vocab::Vocabulary;
use crate::model::ModelDims;
use crate::sampler::{SamplerConfig, Strategy};
use crate::synth::DatasetConfig;
use crate::tracker::TrackerConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; zero uses every logical core.
    pub workers: usize,
    /// Probability threshold of the decoded target-frame mask.
    pub threshold: f64,
    pub data: DatasetConfig,
    pub sampler: SamplerConfig,
    pub tracker: TrackerConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub model: ModelDims,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            workers: 0,
            threshold: 0.5,
            data: DatasetConfig::default(),
            sampler: SamplerConfig::default(),
            tracker: TrackerConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            model: ModelDims::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::Config(format!("{key}: expected 0 or 1, found {value:?}"))),
    }
}

fn flag(b: bool) -> String {
    if b { "1".into() } else { "0".into() }
}

type Getter = fn(&PipelineConfig) -> String;
type Setter = fn(&mut PipelineConfig, &str, &str) -> Result<()>;

macro_rules! keys {
    ($( $key:literal => [$($field:tt)+] $kind:ident ),* $(,)?) => {
        const KEYS: &[(&str, Getter, Setter)] = &[
            $( ($key, |c| keys!(@show $kind, c.$($field)+), |c, k, v| { c.$($field)+ = keys!(@read $kind, k, v); Ok(()) }) ),*
        ];
    };
    (@show num, $e:expr) => { format!("{:?}", $e) };
    (@show flag, $e:expr) => { flag($e) };
    (@show strategy, $e:expr) => { $e.as_str().to_string() };
    (@read num, $k:expr, $v:expr) => { parse($k, $v)? };
    (@read flag, $k:expr, $v:expr) => { parse_flag($k, $v)? };
    (@read strategy, $k:expr, $v:expr) => { { let _ = $k; $v.parse::<Strategy>()? } };
}

keys! {
    "run.seed" => [seed] num,
    "run.workers" => [workers] num,
    "run.threshold" => [threshold] num,
    "data.n_videos" => [data.n_videos] num,
    "data.frames" => [data.frames] num,
    "data.width" => [data.width] num,
    "data.height" => [data.height] num,
    "data.max_objects" => [data.max_objects] num,
    "data.min_size" => [data.min_size] num,
    "data.max_size" => [data.max_size] num,
    "data.max_speed" => [data.max_speed] num,
    "data.queries_per_video" => [data.queries_per_video] num,
    "data.referring" => [data.proportions[0]] num,
    "data.reasoning" => [data.proportions[1]] num,
    "data.negative" => [data.proportions[2]] num,
    "data.val_fraction" => [data.val_fraction] num,
    "data.late_targets" => [data.late_targets] flag,
    "sampler.k" => [sampler.k] num,
    "sampler.t_r" => [sampler.t_r] num,
    "sampler.strategy" => [sampler.strategy] strategy,
    "sampler.baseline_f0" => [sampler.baseline_first_frame] flag,
    "sampler.temperature" => [sampler.temperature] num,
    "tracker.patch_radius" => [tracker.patch_radius] num,
    "tracker.search_radius" => [tracker.search_radius] num,
    "tracker.memory" => [tracker.memory] num,
    "tracker.top_k" => [tracker.top_k] num,
    "tracker.sharpness" => [tracker.sharpness] num,
    "tracker.distance_penalty" => [tracker.distance_penalty] num,
    "tracker.center_weight" => [tracker.center_weight] num,
    "loss.text" => [loss.text] num,
    "loss.mask" => [loss.mask] num,
    "loss.bce" => [loss.bce] num,
    "loss.dice" => [loss.dice] num,
    "train.epochs" => [train.epochs] num,
    "train.batch_size" => [train.batch_size] num,
    "train.base_lr" => [train.base_lr] num,
    "train.lr_multiplier" => [train.lr_multiplier] num,
    "train.beta1" => [train.beta1] num,
    "train.beta2" => [train.beta2] num,
    "train.eps" => [train.eps] num,
    "train.weight_decay" => [train.weight_decay] num,
    "train.min_refs" => [train.min_refs] num,
    "train.max_refs" => [train.max_refs] num,
    "model.d_model" => [model.d_model] num,
    "model.layers" => [model.layers] num,
    "model.ffn" => [model.ffn] num,
    "model.tokens" => [model.tokens] num,
    "model.token_res" => [model.token_res] num,
    "model.patch" => [model.patch] num,
    "model.pixel_channels" => [model.pixel_channels] num,
    "model.max_text" => [model.max_text] num,
    "model.prompt_dim" => [model.prompt_dim] num,
    "model.mask_res" => [model.mask_res] num,
    "model.feature_channels" => [model.feature_channels] num,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.sampler.validate()?;
        self.tracker.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.model.validate()?;
        if self.model.vocab != Vocabulary::default().len() {
            return Err(Error::Config(format!("model vocabulary must be {}", Vocabulary::default().len())));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("run.threshold = {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }

    /// Dataset settings with the run seed.
    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig { seed: self.seed, ..self.data.clone() }
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (_, _, set) = KEYS
            .iter()
            .find(|(k, _, _)| *k == key)
            .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        set(self, key, value)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, get, _)| get(self))
    }

    /// Every key with its value, one per line; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, get, _) in KEYS {
            let _ = writeln!(out, "{k} = {}", get(self));
        }
        out
    }

    /// Defaults overridden by the lines of `text`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `section.key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: {key} set twice", n + 1)));
            }
            cfg.set(key, value).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
            seen.push(key);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
