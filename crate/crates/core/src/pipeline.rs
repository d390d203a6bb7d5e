//! Orchestration: segmenting one video, and the dataset-level train / infer /
//! eval / ablate runs behind the command line.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::decoder::{backbone, binarize, decode_mask};
use crate::error::{Error, Result};
use crate::formats::{read_vrle, write_atomic, write_vrle};
use crate::metrics::{evaluate_dataset, EvalReport};
use crate::model::checkpoint::save_checkpoint;
use crate::model::vocab::{Vocabulary, SEG};
use crate::model::VisaModel;
use crate::sampler::{plan, HeuristicResponder, SamplerConfig, SamplerPlan, Strategy};
use crate::synth::{Dataset, DatasetRecord, Split};
use crate::tracker::propagate;
use crate::train::{curve_tsv, train, CurvePoint, TrainSample};
use crate::video::{resize_mask_nearest, BinaryMask, MaskSequence, Query, Video};

/// Everything produced for one query.
#[derive(Clone, Debug)]
pub struct Segmentation {
    pub plan: SamplerPlan,
    pub answer: Vec<u32>,
    pub masks: MaskSequence,
}

/// Everything before propagation: the plan, the generated answer and, when
/// the answer holds a `<seg>`, the binarized target-frame mask at video
/// resolution.
pub fn target_mask(
    model: &VisaModel,
    vocab: &Vocabulary,
    video: &Video,
    query: &Query,
    cfg: &PipelineConfig,
) -> Result<(SamplerPlan, Vec<u32>, Option<BinaryMask>)> {
    let responder = HeuristicResponder::new(cfg.sampler.temperature, cfg.seed);
    let plan = plan(video, query, &responder, &cfg.sampler)?;
    let prompt = model.prompt_for(video, plan.t_tgt, &plan.references, query, vocab)?;
    let answer = model.generate(&prompt)?;
    if !answer.contains(&SEG) {
        return Ok((plan, answer, None));
    }
    let h_seg = model.extract_seg_embedding(&prompt, &answer)?;
    let features = backbone(model, &video.frames()[plan.t_tgt]);
    let p = decode_mask(model, &features, &h_seg)?;
    let m_tgt = resize_mask_nearest(&binarize(&p, cfg.threshold), video.width(), video.height());
    Ok((plan, answer, Some(m_tgt)))
}

/// Frame sampling, prompting, generation and, when the answer holds a
/// `<seg>`, mask decoding on the target frame and propagation. Answers
/// without `<seg>` give an all-empty sequence.
pub fn segment_video(
    model: &VisaModel,
    vocab: &Vocabulary,
    video: &Video,
    query: &Query,
    cfg: &PipelineConfig,
) -> Result<Segmentation> {
    let (plan, answer, m_tgt) = target_mask(model, vocab, video, query, cfg)?;
    let masks = match m_tgt {
        Some(m) => propagate(&m, plan.t_tgt, video, &cfg.tracker)?,
        None => MaskSequence::empty(video.len(), video.width(), video.height()),
    };
    Ok(Segmentation { plan, answer, masks })
}

/// Runs `f` on a pool of `cfg.workers` threads (all cores when zero).
pub fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Loads every record of `split` with its video and ground truth. Videos
/// shared by several queries are read once.
pub fn load_split(data: &Dataset, split: Split, vocab: &Vocabulary) -> Result<Vec<(DatasetRecord, TrainSample)>> {
    let mut videos: BTreeMap<String, Arc<Video>> = BTreeMap::new();
    let mut out = Vec::new();
    for r in data.manifest.split(split) {
        let video = match videos.get(&r.video_id) {
            Some(v) => v.clone(),
            None => {
                let v = Arc::new(data.video(r)?);
                videos.insert(r.video_id.clone(), v.clone());
                v
            }
        };
        let gt = Arc::new(data.ground_truth(r)?);
        gt.check_matches(&video)?;
        out.push((r.clone(), TrainSample { video, query: r.query(vocab)?, gt }));
    }
    Ok(out)
}

/// Trains a fresh model on the training split; writes `model.tmm` and
/// `loss_curve.tsv` under `out`.
pub fn run_train(
    data: &Dataset,
    cfg: &PipelineConfig,
    out: &Path,
    progress: impl FnMut(&CurvePoint) + Send,
) -> Result<(VisaModel, Vec<CurvePoint>)> {
    cfg.validate()?;
    let vocab = Vocabulary::default();
    let samples: Vec<TrainSample> = load_split(data, Split::Train, &vocab)?.into_iter().map(|(_, s)| s).collect();
    let mut model = VisaModel::new(cfg.model, cfg.seed)?;
    let train_cfg = crate::train::TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    let curve = with_pool(cfg.workers, || train(&mut model, &vocab, &samples, &cfg.loss, &train_cfg, progress))??;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &model)?;
    write_atomic(&out.join(CURVE_FILE), curve_tsv(&curve).as_bytes())?;
    Ok((model, curve))
}

pub const CHECKPOINT_FILE: &str = "model.tmm";
pub const CURVE_FILE: &str = "loss_curve.tsv";
pub const REPORT_FILE: &str = "report.tsv";
pub const RECORDS_FILE: &str = "records.csv";

/// Predictions for every record of `split`, keyed by record id.
pub fn predict_split(
    model: &VisaModel,
    data: &Dataset,
    split: Split,
    cfg: &PipelineConfig,
) -> Result<BTreeMap<String, MaskSequence>> {
    let vocab = Vocabulary::default();
    let records = load_split(data, split, &vocab)?;
    let preds = with_pool(cfg.workers, || {
        records
            .par_iter()
            .map(|(r, s)| Ok((r.record_id(), segment_video(model, &vocab, &s.video, &s.query, cfg)?.masks)))
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(preds.into_iter().collect())
}

/// Writes `<out>/<record id>.vrle` for every record of `split`.
pub fn run_infer(model: &VisaModel, data: &Dataset, split: Split, cfg: &PipelineConfig, out: &Path) -> Result<usize> {
    let preds = predict_split(model, data, split, cfg)?;
    for (id, seq) in &preds {
        write_vrle(&out.join(format!("{id}.vrle")), seq)?;
    }
    Ok(preds.len())
}

/// Scores the prediction files in `pred_dir` against the ground truth of
/// `split`.
pub fn run_eval(data: &Dataset, split: Split, pred_dir: &Path) -> Result<EvalReport> {
    let mut records = Vec::new();
    let mut preds = BTreeMap::new();
    let mut gts = BTreeMap::new();
    for r in data.manifest.split(split) {
        let id = r.record_id();
        let path = pred_dir.join(format!("{id}.vrle"));
        if !path.exists() {
            return Err(Error::MissingPrediction(id));
        }
        preds.insert(id.clone(), read_vrle(&path)?);
        gts.insert(id.clone(), data.ground_truth(r)?);
        records.push((id, r.kind));
    }
    evaluate_dataset(&records, &preds, &gts)
}

pub fn evaluate_predictions(data: &Dataset, split: Split, preds: &BTreeMap<String, MaskSequence>) -> Result<EvalReport> {
    let mut records = Vec::new();
    let mut gts = BTreeMap::new();
    for r in data.manifest.split(split) {
        gts.insert(r.record_id(), data.ground_truth(r)?);
        records.push((r.record_id(), r.kind));
    }
    evaluate_dataset(&records, preds, &gts)
}

pub fn write_report(report: &EvalReport, out: &Path) -> Result<()> {
    write_atomic(&out.join(REPORT_FILE), report.to_tsv().as_bytes())?;
    write_atomic(&out.join(RECORDS_FILE), report.records_csv().as_bytes())
}

/// One cell of the sampling ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub first_frame: bool,
    /// `None` for the run without reference frames.
    pub strategy: Option<Strategy>,
    pub t_r: usize,
    pub report: EvalReport,
}

impl AblationCell {
    pub fn jf(&self) -> f64 {
        self.report.overall.map_or(0.0, |s| s.jf)
    }
}

/// The grid `{f_0, f_tgt} x ({no references} + {global, local,
/// global_local} x {6, 12})`.
pub fn ablation_settings() -> Vec<(bool, Option<Strategy>, usize)> {
    let mut out = Vec::new();
    for first_frame in [true, false] {
        out.push((first_frame, None, 0));
        for s in [Strategy::Global, Strategy::Local, Strategy::GlobalLocal] {
            for t_r in [6, 12] {
                out.push((first_frame, Some(s), t_r));
            }
        }
    }
    out
}

/// Runs every cell of [`ablation_settings`]. Cells often decode the same
/// target-frame mask for a query, so propagations are shared between cells.
pub fn run_ablation(model: &VisaModel, data: &Dataset, split: Split, cfg: &PipelineConfig) -> Result<Vec<AblationCell>> {
    let vocab = Vocabulary::default();
    let records = load_split(data, split, &vocab)?;
    let mut propagated: HashMap<(usize, usize, Vec<bool>), MaskSequence> = HashMap::new();
    let mut cells = Vec::new();
    for (first_frame, strategy, t_r) in ablation_settings() {
        let sampler = SamplerConfig {
            t_r,
            strategy: strategy.unwrap_or(cfg.sampler.strategy),
            baseline_first_frame: first_frame,
            ..cfg.sampler.clone()
        };
        let cell_cfg = PipelineConfig { sampler, ..cfg.clone() };
        let targets = with_pool(cfg.workers, || {
            records
                .par_iter()
                .map(|(_, s)| target_mask(model, &vocab, &s.video, &s.query, &cell_cfg))
                .collect::<Result<Vec<_>>>()
        })??;
        let mut missing = Vec::new();
        for (i, (plan, _, m)) in targets.iter().enumerate() {
            if let Some(m) = m {
                let key = (i, plan.t_tgt, m.bits().to_vec());
                if !propagated.contains_key(&key) && !missing.iter().any(|(k, _)| *k == key) {
                    missing.push((key, m));
                }
            }
        }
        let fresh = with_pool(cfg.workers, || {
            missing
                .into_par_iter()
                .map(|(key, m)| Ok((key.clone(), propagate(m, key.1, &records[key.0].1.video, &cfg.tracker)?)))
                .collect::<Result<Vec<_>>>()
        })??;
        propagated.extend(fresh);
        let mut preds = BTreeMap::new();
        for (i, ((r, s), (plan, _, m))) in records.iter().zip(&targets).enumerate() {
            let seq = match m {
                Some(m) => propagated[&(i, plan.t_tgt, m.bits().to_vec())].clone(),
                None => MaskSequence::empty(s.video.len(), s.video.width(), s.video.height()),
            };
            preds.insert(r.record_id(), seq);
        }
        let report = evaluate_predictions(data, split, &preds)?;
        cells.push(AblationCell { first_frame, strategy, t_r, report });
    }
    Ok(cells)
}

/// Table with one row per frame mode and one column per sampling setting,
/// J&F x100.
pub fn ablation_tsv(cells: &[AblationCell]) -> String {
    let mut out = String::from("frame\tw/o sample");
    for s in ["global", "local", "global_local"] {
        for t_r in [6, 12] {
            let _ = write!(out, "\t{s} T_r={t_r}");
        }
    }
    out.push('\n');
    for first_frame in [true, false] {
        out.push_str(if first_frame { "f_0" } else { "f_tgt" });
        for c in cells.iter().filter(|c| c.first_frame == first_frame) {
            let _ = write!(out, "\t{:.1}", crate::metrics::percent_1dp(c.jf()));
        }
        out.push('\n');
    }
    out
}
