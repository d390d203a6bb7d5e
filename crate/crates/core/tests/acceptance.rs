//! Acceptance suite. Each criterion prints one PASS/FAIL line; the test fails
//! if any criterion fails.

mod oracles;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use visa_core::config::PipelineConfig;
use visa_core::formats::{decode_vraw, decode_vrle, dequantize, encode_sequence, encode_vraw};
use visa_core::losses::{bce, bce_grad, cross_entropy, cross_entropy_grad, dice, dice_grad, LossWeights};
use visa_core::metrics::{contour_accuracy, default_tolerance, overall, percent_1dp, region_similarity, robustness, Scores};
use visa_core::model::checkpoint::encode_checkpoint;
use visa_core::model::vocab::Vocabulary;
use visa_core::model::{ModelDims, VisaModel};
use visa_core::pipeline::{ablation_tsv, evaluate_predictions, predict_split, run_ablation, run_train, AblationCell};
use visa_core::sampler::{aggregate_target_index, sample_references, SamplerPlan, Strategy};
use visa_core::synth::{build_dataset, render_scene, Dataset, DatasetConfig, Split};
use visa_core::tracker::{propagate, TrackerConfig};
use visa_core::train::{sample_loss, TrainSample};
use visa_core::video::{BinaryMask, Frame, MaskSequence, Query, QueryKind, Video};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> BinaryMask {
    match rng.gen_range(0..4) {
        0 => BinaryMask::empty(w, h),
        1 => {
            let p = rng.gen_range(0.05..0.95);
            BinaryMask::new(w, h, (0..w * h).map(|_| rng.gen_bool(p)).collect()).unwrap()
        }
        _ => {
            let mut m = BinaryMask::empty(w, h);
            for _ in 0..rng.gen_range(1..=3) {
                let (x0, y0) = (rng.gen_range(0..w), rng.gen_range(0..h));
                let (x1, y1) = (rng.gen_range(x0..w), rng.gen_range(y0..h));
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        m.set(x, y, true);
                    }
                }
            }
            m
        }
    }
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..1000 {
        let (w, h) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let (p, g) = (random_mask(&mut rng, w, h), random_mask(&mut rng, w, h));
        let tol = default_tolerance(w, h);
        let ps = MaskSequence::new(vec![p.clone()]).unwrap();
        let gs = MaskSequence::new(vec![g.clone()]).unwrap();
        let j = region_similarity(&ps, &gs).unwrap();
        let j_ref = oracles::brute_force_iou(&p, &g);
        ensure!(j == j_ref, "case {case}: J {j} vs oracle {j_ref}");
        let f = contour_accuracy(&ps, &gs, tol).unwrap();
        let f_ref = oracles::brute_force_f(&p, &g, tol).map_err(|e| format!("{e:?}"))?;
        ensure!(f == f_ref, "case {case}: F {f} vs oracle {f_ref}");
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.2} s");
    Ok(format!("1000 pairs exact, {secs:.2} s"))
}

fn aggregation() -> Outcome {
    let j = overall(Some(Scores::new(0.166, 0.166)), Some(Scores::new(0.119, 0.119))).unwrap();
    let jf = overall(Some(Scores::new(0.166, 0.166)), Some(Scores::new(0.171, 0.171))).unwrap();
    let (a, b) = (percent_1dp(j.j), percent_1dp(jf.jf));
    ensure!(a == 14.3, "overall J {a}");
    ensure!(b == 16.9, "overall J&F {b}");
    Ok(format!("(16.6, 11.9) -> {a:.1}, (16.6, 17.1) -> {b:.1}"))
}

fn tiny_dims(rng: &mut ChaCha8Rng) -> ModelDims {
    ModelDims {
        d_model: 8,
        layers: rng.gen_range(1..=2),
        ffn: 12,
        tokens: 4,
        token_res: 8,
        patch: 2,
        pixel_channels: 3,
        prompt_dim: 6,
        mask_res: 8,
        feature_channels: 4,
        ..ModelDims::default()
    }
}

fn tiny_instance(rng: &mut ChaCha8Rng, vocab: &Vocabulary) -> (TrainSample, SamplerPlan) {
    let (t, w, h) = (rng.gen_range(3..=5), 12, 12);
    let kind = *[QueryKind::Referring, QueryKind::Reasoning, QueryKind::Negative].choose(rng).unwrap();
    let masks: Vec<BinaryMask> = (0..t).map(|_| random_mask(rng, w, h)).collect();
    let frames = masks
        .iter()
        .map(|m| {
            let px = m.bits().iter().map(|&b| if b { 0.6 } else { rng.gen_range(0.0..0.2) }).collect();
            Frame::new(w, h, 1, px).unwrap()
        })
        .collect();
    let text = match kind {
        QueryKind::Referring => "gray square",
        QueryKind::Reasoning => "fastest shape",
        QueryKind::Negative => "white circle",
    };
    let gt = if kind == QueryKind::Negative { MaskSequence::empty(t, w, h) } else { MaskSequence::new(masks).unwrap() };
    let sample = TrainSample {
        video: Arc::new(Video::new("g", frames).unwrap()),
        query: Query::new(vocab.tokenize(text).unwrap(), kind, text).unwrap(),
        gt: Arc::new(gt),
    };
    let t_tgt = rng.gen_range(0..t);
    let mut refs: Vec<usize> = (0..t).filter(|&i| i != t_tgt).collect();
    refs.shuffle(rng);
    refs.truncate(rng.gen_range(0..=2));
    refs.sort_unstable();
    (sample, SamplerPlan { t_tgt, references: refs })
}

fn check_grad(case: &str, analytic: &[f64], numeric: &[f64], worst: &mut f64) -> Result<(), String> {
    let err = oracles::relative_error(numeric, analytic);
    *worst = worst.max(err);
    ensure!(err < 1e-4, "{case}: relative error {err:.3e}");
    Ok(())
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let h = 1e-5;
    for case in 0..50 {
        let n = rng.gen_range(1..=20);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.02..0.98)).collect();
        let g: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        let fd = |f: fn(&[f64], &[bool]) -> f64| oracles::finite_diff_grad(|x| f(x, &g), &p, h).map_err(|e| format!("{e:?}"));
        check_grad(&format!("bce {case}"), &bce_grad(&p, &g), &fd(bce)?, &mut worst)?;
        check_grad(&format!("dice {case}"), &dice_grad(&p, &g), &fd(dice)?, &mut worst)?;

        let (rows, vocab) = (rng.gen_range(1..=4), rng.gen_range(2..=7));
        let logits: Vec<f64> = (0..rows * vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let targets: Vec<u32> = (0..rows).map(|_| rng.gen_range(0..vocab as u32)).collect();
        let numeric = oracles::finite_diff_grad(|z| cross_entropy(z, vocab, &targets).unwrap(), &logits, h)
            .map_err(|e| format!("{e:?}"))?;
        check_grad(&format!("ce {case}"), &cross_entropy_grad(&logits, vocab, &targets), &numeric, &mut worst)?;
    }

    let vocab = Vocabulary::default();
    let weights = LossWeights::default();
    for case in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + case);
        let model = VisaModel::new(tiny_dims(&mut rng), case).unwrap();
        let (sample, plan) = tiny_instance(&mut rng, &vocab);
        let out = sample_loss(&model, &vocab, &sample, &plan, &weights, true).map_err(|e| e.to_string())?;
        let grads = out.grads.expect("gradients requested").0;
        let analytic: Vec<f64> = model
            .params()
            .iter()
            .zip(&grads)
            .flat_map(|(p, g)| g.clone().unwrap_or_else(|| vec![0.0; p.len()]))
            .collect();
        let x0: Vec<f64> = model.params().iter().flat_map(|p| p.data.iter().copied()).collect();
        let loss = |x: &[f64]| {
            let mut m = model.clone();
            let mut rest = x;
            for p in m.params_mut() {
                let (head, tail) = rest.split_at(p.data.len());
                p.data.copy_from_slice(head);
                rest = tail;
            }
            sample_loss(&m, &vocab, &sample, &plan, &weights, false).unwrap().total
        };
        let numeric = oracles::finite_diff_grad(loss, &x0, h).map_err(|e| format!("{e:?}"))?;
        check_grad(&format!("composite {case} ({:?})", sample.query.kind), &analytic, &numeric, &mut worst)?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!("worst relative error {worst:.2e}, {secs:.1} s"))
}

fn tfs_properties() -> Outcome {
    let examples = [
        (aggregate_target_index(&[0.5; 10], 100), 50),
        (aggregate_target_index(&(1..=10).map(|i| i as f64 / 10.0).collect::<Vec<_>>(), 20), 11),
        (aggregate_target_index(&[1.0; 10], 20), 19),
    ];
    for (i, (got, want)) in examples.into_iter().enumerate() {
        let got = got.map_err(|e| e.to_string())?;
        ensure!(got == want, "worked example {i}: {got} != {want}");
    }
    let input = (prop::collection::vec(0.0..=1.0f64, 1..16), 1usize..200);
    let mut runner = TestRunner::new(PropConfig { cases: 500, ..PropConfig::default() });
    runner
        .run(&(input.clone(), any::<prop::sample::Index>()), |((fr, t), rot)| {
            let a = aggregate_target_index(&fr, t).unwrap();
            let mut perm = fr.clone();
            perm.rotate_left(rot.index(fr.len()));
            perm.reverse();
            prop_assert_eq!(a, aggregate_target_index(&perm, t).unwrap());
            Ok(())
        })
        .map_err(|e| format!("permutation invariance: {e}"))?;
    let mut runner = TestRunner::new(PropConfig { cases: 500, ..PropConfig::default() });
    runner
        .run(&(input.clone(), 1e-3..0.5f64), |((fr, t), delta)| {
            let raised: Vec<f64> = fr.iter().map(|f| f + delta).collect();
            prop_assert!(aggregate_target_index(&raised, t).unwrap() >= aggregate_target_index(&fr, t).unwrap());
            Ok(())
        })
        .map_err(|e| format!("monotonicity: {e}"))?;
    let mut runner = TestRunner::new(PropConfig { cases: 500, ..PropConfig::default() });
    runner
        .run(&(prop::collection::vec(-1.0..=2.0f64, 1..16), 1usize..200), |(fr, t)| {
            let a = aggregate_target_index(&fr, t).unwrap();
            let mean = fr.iter().sum::<f64>() / fr.len() as f64;
            let expect = (t as f64 * mean).round().clamp(0.0, (t - 1) as f64) as usize;
            prop_assert!(a < t);
            prop_assert_eq!(a, expect);
            Ok(())
        })
        .map_err(|e| format!("clamp: {e}"))?;
    Ok("3 worked examples, 3 x 500 property cases".into())
}

fn sampling_strategies() -> Outcome {
    let mut n = 0usize;
    for frames in 1..=64usize {
        for t_r in 0..=16usize {
            for t_tgt in 0..frames {
                for s in [Strategy::Global, Strategy::Local, Strategy::GlobalLocal] {
                    let got = sample_references(frames, t_tgt, t_r, s);
                    let want = oracles::enum_sampler_reference(frames, t_tgt, t_r, s);
                    ensure!(got == want, "T={frames} t_tgt={t_tgt} T_r={t_r} {s}: {got:?} != {want:?}");
                    n += 1;
                    if s == Strategy::Global && t_r >= 2 && frames > t_r {
                        let bound = (frames - 1).div_ceil(t_r - 1) + 1;
                        let gap = got.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0);
                        ensure!(gap <= bound, "T={frames} t_tgt={t_tgt} T_r={t_r}: gap {gap} > {bound}");
                    }
                }
            }
        }
    }
    Ok(format!("{n} combinations match the enumeration"))
}

/// Byte contents of every file below `root`, keyed by relative path.
fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn end_to_end_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.seed = 1;
    cfg.model.tokens = 16;
    cfg.data.n_videos = 250;
    cfg.data.val_fraction = 0.2;
    cfg
}

struct Run {
    model: VisaModel,
    data: Dataset,
    preds: BTreeMap<String, MaskSequence>,
    report_text: String,
}

fn train_and_predict(root: &Path, cfg: &PipelineConfig) -> Result<Run, String> {
    let s = |e: visa_core::Error| e.to_string();
    build_dataset(&cfg.dataset(), &root.join("data"), &Vocabulary::default()).map_err(s)?;
    let data = Dataset::open(&root.join("data")).map_err(s)?;
    fs::create_dir_all(root.join("run")).map_err(|e| e.to_string())?;
    let (model, _) = run_train(&data, cfg, &root.join("run"), |_| {}).map_err(s)?;
    let preds = predict_split(&model, &data, Split::Val, cfg).map_err(s)?;
    let report = evaluate_predictions(&data, Split::Val, &preds).map_err(s)?;
    let report_text = report.to_tsv() + &report.records_csv();
    Ok(Run { model, data, preds, report_text })
}

fn negative_robustness(model: &VisaModel, root: &Path, cfg: &PipelineConfig) -> Result<(f64, usize), String> {
    let s = |e: visa_core::Error| e.to_string();
    let neg = DatasetConfig {
        n_videos: 20,
        seed: cfg.seed + 1000,
        queries_per_video: 1,
        proportions: [0.0, 0.0, 1.0],
        val_fraction: 1.0,
        ..cfg.data.clone()
    };
    build_dataset(&neg, root, &Vocabulary::default()).map_err(s)?;
    let data = Dataset::open(root).map_err(s)?;
    let preds = predict_split(model, &data, Split::Val, cfg).map_err(s)?;
    let items: Vec<(QueryKind, &MaskSequence)> = preds.values().map(|p| (QueryKind::Negative, p)).collect();
    Ok((robustness(&items).map_err(s)?, items.len()))
}

fn end_to_end(dir: &Path, first: &Run, second: &Run, secs: f64) -> Outcome {
    let cfg = end_to_end_config();
    let videos = |split| first.data.manifest.split(split).map(|r| r.video_id.as_str()).collect::<std::collections::BTreeSet<_>>().len();
    let (train, val) = (videos(Split::Train), videos(Split::Val));
    let report = evaluate_predictions(&first.data, Split::Val, &first.preds).map_err(|e| e.to_string())?;
    let jf = report.overall.map_or(0.0, |s| s.jf);
    let (r, n_neg) = negative_robustness(&first.model, &dir.join("negatives"), &cfg)?;
    let summary = format!(
        "{train} train / {val} val videos, J&F {:.1}, R(surrogate) {:.1} on {n_neg} negatives, {secs:.0} s",
        percent_1dp(jf),
        percent_1dp(r)
    );
    ensure!(jf >= 0.70, "J&F below 0.70: {summary}");
    ensure!(r >= 0.90, "R below 0.90: {summary}");
    ensure!(n_neg == 20 && (train, val) == (200, 50), "{summary}");
    ensure!(secs < 1800.0, "over 30 minutes: {summary}");
    ensure!(encode_checkpoint(&first.model) == encode_checkpoint(&second.model), "checkpoints differ between runs");
    ensure!(first.report_text == second.report_text, "reports differ between runs");
    Ok(summary)
}

fn late_ablation(model: &VisaModel, root: &Path) -> Outcome {
    let s = |e: visa_core::Error| e.to_string();
    let mut cfg = end_to_end_config();
    cfg.data = DatasetConfig {
        n_videos: 50,
        seed: 77,
        val_fraction: 1.0,
        late_targets: true,
        proportions: [0.5, 0.5, 0.0],
        ..cfg.data.clone()
    };
    build_dataset(&cfg.data, root, &Vocabulary::default()).map_err(s)?;
    let data = Dataset::open(root).map_err(s)?;
    let cells = run_ablation(model, &data, Split::Val, &cfg).map_err(s)?;
    let table = ablation_tsv(&cells);
    println!("{table}");
    let pts = |c: &AblationCell| percent_1dp(c.jf());
    let find = |first: bool, strategy: Option<Strategy>, t_r: usize| {
        cells.iter().find(|c| c.first_frame == first && c.strategy == strategy && c.t_r == t_r).map(pts).unwrap()
    };
    let (f0, ftgt) = (find(true, None, 0), find(false, Some(Strategy::GlobalLocal), 12));
    let mut problems = Vec::new();
    if ftgt - f0 < 5.0 {
        problems.push(format!("f_tgt {ftgt:.1} vs f_0 {f0:.1}"));
    }
    for first in [true, false] {
        let row = if first { "f_0" } else { "f_tgt" };
        let none = find(first, None, 0);
        for s in [Strategy::Global, Strategy::Local, Strategy::GlobalLocal] {
            let (six, twelve) = (find(first, Some(s), 6), find(first, Some(s), 12));
            if !(twelve >= six && six >= none) {
                problems.push(format!("{row} {s}: T_r=0 {none:.1}, 6 {six:.1}, 12 {twelve:.1}"));
            }
        }
        for t_r in [6, 12] {
            let gl = find(first, Some(Strategy::GlobalLocal), t_r);
            let best = find(first, Some(Strategy::Global), t_r).max(find(first, Some(Strategy::Local), t_r));
            if gl < best - 1.0 {
                problems.push(format!("{row} T_r={t_r}: global_local {gl:.1} < {best:.1} - 1"));
            }
        }
    }
    ensure!(problems.is_empty(), "{}", problems.join("; "));
    Ok(format!("f_0 {f0:.1}, f_tgt {ftgt:.1}"))
}

fn tracker_quality() -> Outcome {
    let tracker = TrackerConfig::default();
    let (mut sum, mut n, mut worst) = (0.0, 0usize, 1.0f64);
    let start = Instant::now();
    for i in 0..50u64 {
        let (video, masks) = render_scene(&oracles::rigid_scene(5000 + i)).unwrap();
        let gt = &masks[0];
        let t_tgt = (i as usize * 7) % 16;
        let out = propagate(&gt.masks()[t_tgt], t_tgt, &video, &tracker).map_err(|e| e.to_string())?;
        for (p, g) in out.masks().iter().zip(gt.masks()) {
            let j = visa_core::metrics::frame_iou(p, g);
            worst = worst.min(j);
            sum += j;
            n += 1;
        }
    }
    let per_video = start.elapsed().as_secs_f64() / 50.0;
    let mean = sum / n as f64;
    ensure!(mean >= 0.90 && worst >= 0.85, "mean J {mean:.4}, worst frame {worst:.4}");
    ensure!(per_video < 1.0, "{per_video:.3} s per video");

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let frame = Frame::new(20, 18, 1, (0..360).map(|_| dequantize(rng.gen())).collect()).unwrap();
    let video = Video::new("static", vec![frame; 8]).unwrap();
    for t in 0..8 {
        let m = random_mask(&mut rng, 20, 18);
        let out = propagate(&m, t, &video, &tracker).map_err(|e| e.to_string())?;
        ensure!(out.masks().iter().all(|x| *x == m), "static video, seed frame {t}: mask changed");
    }
    Ok(format!("mean J {mean:.4}, worst frame J {worst:.4}, {per_video:.3} s per video, static copies exact"))
}

fn determinism(dir: &Path, first: &Run, second: &Run) -> Outcome {
    let a = tree_bytes(&dir.join("a/data"));
    ensure!(a == tree_bytes(&dir.join("b/data")), "datasets differ");
    let ck = encode_checkpoint(&first.model);
    ensure!(ck == encode_checkpoint(&second.model), "checkpoints differ");
    ensure!(
        fs::read(dir.join("a/run/model.tmm")).ok() == fs::read(dir.join("b/run/model.tmm")).ok(),
        "checkpoint files differ"
    );
    for (id, p) in &first.preds {
        ensure!(second.preds.get(id).map(encode_sequence) == Some(encode_sequence(p)), "prediction {id} differs");
    }
    ensure!(first.report_text == second.report_text, "reports differ");

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..1000 {
        let (t, w, h) = (rng.gen_range(1..=6), rng.gen_range(1..=24), rng.gen_range(1..=24));
        let seq = MaskSequence::new((0..t).map(|_| random_mask(&mut rng, w, h)).collect()).unwrap();
        let bytes = encode_sequence(&seq);
        let back = decode_vrle(&bytes).map_err(|e| format!("VRLE case {case}: {e}"))?;
        ensure!(back == seq && encode_sequence(&back) == bytes, "VRLE case {case} not bit-exact");

        let (c, t) = (*[1usize, 3].choose(&mut rng).unwrap(), rng.gen_range(1..=4));
        let frames = (0..t)
            .map(|_| Frame::new(w, h, c, (0..w * h * c).map(|_| dequantize(rng.gen())).collect()).unwrap())
            .collect();
        let video = Video::new("v", frames).unwrap();
        let bytes = encode_vraw(&video);
        let back = decode_vraw("v", &bytes).map_err(|e| format!("VRAW case {case}: {e}"))?;
        ensure!(back.frames() == video.frames() && encode_vraw(&back) == bytes, "VRAW case {case} not bit-exact");
    }
    Ok(format!("{} dataset files, checkpoint of {} bytes, {} predictions identical; 1000 VRLE and VRAW round trips", a.len(), ck.len(), first.preds.len()))
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |id, name, outcome: Outcome| {
        match &outcome {
            Ok(msg) => println!("[PASS] {id} {name}: {msg}"),
            Err(msg) => println!("[FAIL] {id} {name}: {msg}"),
        }
        results.push((id, name, outcome));
    };

    report(1, "metric oracle equivalence", metric_oracles());
    report(2, "split aggregation", aggregation());
    report(3, "gradient checks", gradient_checks());
    report(4, "target-frame aggregation", tfs_properties());
    report(5, "sampling strategies", sampling_strategies());
    report(8, "tracker quality", tracker_quality());

    let cfg = end_to_end_config();
    let start = Instant::now();
    let first = train_and_predict(&dir.join("a"), &cfg);
    let secs = start.elapsed().as_secs_f64();
    let second = train_and_predict(&dir.join("b"), &cfg);
    match (&first, &second) {
        (Ok(a), Ok(b)) => {
            report(6, "end-to-end training", end_to_end(dir, a, b, secs));
            report(7, "late-target sampling ablation", late_ablation(&a.model, &dir.join("late")));
            report(9, "determinism and formats", determinism(dir, a, b));
        }
        (Err(e), _) | (_, Err(e)) => {
            for (id, name) in [(6, "end-to-end training"), (7, "late-target sampling ablation"), (9, "determinism and formats")] {
                report(id, name, Err(format!("pipeline run failed: {e}")));
            }
        }
    }

    let failed: Vec<u32> = results.iter().filter(|(_, _, o)| o.is_err()).map(|(id, _, _)| *id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
