//! Training loop (Adam, step-wise lr drop, per-epoch CSV log) and dataset
//! evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::encoder::FrameImage;
use crate::error::{Error, Result};
use crate::map_eval::{mean_ap, Detection, GtBox, MapReport, DEFAULT_IOU_THRESHOLD};
use crate::matching::{match_predictions, total_loss, GroundTruth, LossWeights};
use crate::model::{detections_from, ContextFrame, PtseFormer};
use crate::nn::AdamState;
use crate::synthvid::{nearest_context, sample_context, Dataset, FrameAnnotations};
use crate::tensor::Tape;

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.05;

/// All frames of a dataset decoded into memory. Everything here is
/// desk-scale, so this is cheaper than re-reading PPMs every step.
pub struct FrameCache {
    pub frames: Vec<Vec<FrameImage>>,
}

impl FrameCache {
    pub fn load(ds: &Dataset) -> Result<FrameCache> {
        let mut frames = Vec::with_capacity(ds.manifest.sequences.len());
        for s in 0..ds.manifest.sequences.len() {
            let mut seq = Vec::with_capacity(ds.sequence_len(s));
            for t in 0..ds.sequence_len(s) {
                seq.push(ds.frame(s, t)?);
            }
            frames.push(seq);
        }
        Ok(FrameCache { frames })
    }
}

fn ground_truth_of(fa: &FrameAnnotations) -> GroundTruth {
    GroundTruth {
        boxes: fa.objects.iter().map(|o| o.to_box()).collect(),
        classes: fa.objects.iter().map(|o| o.class).collect(),
    }
}

/// Set-prediction loss for one training item: the final detection set plus
/// deep-supervision losses from intermediate decoder layers, each with its
/// own Hungarian assignment.
fn item_loss(
    tape: &Tape,
    out: &crate::model::ModelOutput,
    gt: &GroundTruth,
    w: &LossWeights,
) -> Result<crate::tensor::Tensor> {
    let assignment = match_predictions(&out.detections, gt, w)?;
    let mut loss = total_loss(tape, &out.detections, gt, &assignment, w)?;
    for det in &out.aux {
        let a = match_predictions(det, gt, w)?;
        loss = tape.add(&loss, &total_loss(tape, det, gt, &a, w)?)?;
    }
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    All,
    OccludedOnly,
    CleanOnly,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    /// context frames per target (0 = single-frame evaluation)
    pub n_ctx: usize,
    pub window: usize,
    pub score_threshold: f64,
    pub iou_threshold: f64,
    pub split: EvalSplit,
}

impl EvalOptions {
    pub fn for_model(model: &PtseFormer) -> EvalOptions {
        EvalOptions {
            n_ctx: model.cfg.num_context,
            window: model.cfg.window,
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            split: EvalSplit::All,
        }
    }
}

fn image_id(seq: usize, t: usize) -> usize {
    seq * 100_000 + t
}

/// Run the model over every frame of the dataset (deterministic nearest-N
/// context) and score it.
pub fn evaluate_model(
    model: &PtseFormer,
    ds: &Dataset,
    cache: &FrameCache,
    opts: &EvalOptions,
) -> Result<MapReport> {
    let mut dets: Vec<Detection> = Vec::new();
    let mut gts: Vec<GtBox> = Vec::new();
    for s in 0..cache.frames.len() {
        let seq_len = cache.frames[s].len();
        for t in 0..seq_len {
            let ctx = if opts.n_ctx == 0 {
                vec![]
            } else {
                nearest_context(seq_len, t, opts.window, opts.n_ctx)?
                    .into_iter()
                    .map(|i| ContextFrame {
                        image: cache.frames[s][i].clone(),
                        offset: i as i64 - t as i64,
                    })
                    .collect()
            };
            let tape = Tape::new();
            let out = model.forward(&tape, &cache.frames[s][t], &ctx)?;
            dets.extend(detections_from(&out.detections, image_id(s, t), opts.score_threshold));
            for o in &ds.annotations[s][t].objects {
                let ignore = match opts.split {
                    EvalSplit::All => false,
                    EvalSplit::OccludedOnly => !o.occluded,
                    EvalSplit::CleanOnly => o.occluded,
                };
                gts.push(GtBox {
                    image_id: image_id(s, t),
                    class: o.class,
                    bbox: o.to_box(),
                    ignore,
                });
            }
        }
    }
    Ok(mean_ap(&dets, &gts, ds.manifest.num_classes, opts.iou_threshold))
}

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// None on epochs where evaluation was skipped
    pub map: Option<f64>,
}

pub struct TrainSummary {
    pub logs: Vec<EpochLog>,
    pub checkpoint: PathBuf,
    pub final_map: f64,
}

/// CSV with full float round-trip precision so identical runs produce
/// byte-identical logs.
pub fn logs_to_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,mean_loss,map\n");
    for l in logs {
        let map = l.map.map(|m| format!("{m:?}")).unwrap_or_default();
        let _ = writeln!(out, "{},{:?},{:?},{}", l.epoch, l.lr, l.mean_loss, map);
    }
    out
}

fn dump_nan_diagnostics(dir: &Path, step: usize, loss: f64, model: &PtseFormer) -> PathBuf {
    let path = dir.join("nan_dump.txt");
    let mut body = format!("non-finite loss {loss} at step {step}\nparameter stats:\n");
    for (name, t) in model.params() {
        let data = t.to_vec();
        let max = data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let finite = data.iter().all(|v| v.is_finite());
        let _ = writeln!(body, "  {name}: len={} max_abs={max:.6e} finite={finite}", data.len());
    }
    let _ = std::fs::write(&path, body);
    path
}

/// Train on a generated dataset. Writes `model.ptse`, a sibling
/// `config.json`, and `train_log.csv` into `out_dir`.
pub fn train_model(
    cfg: &RunConfig,
    ds: &Dataset,
    cache: &FrameCache,
    out_dir: &Path,
    verbose: bool,
) -> Result<TrainSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (s, seq) in cache.frames.iter().enumerate() {
        if seq.len() < cfg.model.num_context + 1 {
            return Err(Error::Contract(format!(
                "sequence {s} has {} frames, too short for {} context frames",
                seq.len(),
                cfg.model.num_context
            )));
        }
    }
    let model = PtseFormer::new(&cfg.model, cfg.train.seed)?;
    let params = model.params();
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(1));
    let mut logs = Vec::with_capacity(cfg.train.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.train.epochs {
        let lr = cfg.train.lr_for_epoch(epoch);
        let batch = cfg.train.batch_size.max(1);
        let mut loss_sum = 0.0;
        for _ in 0..cfg.train.steps_per_epoch {
            let step_lr = cfg.train.lr_for_step(epoch, step);
            let tape = Tape::new();
            let mut batch_loss: Option<crate::tensor::Tensor> = None;
            for _ in 0..batch {
                let s = rng.gen_range(0..cache.frames.len());
                let seq_len = cache.frames[s].len();
                let t = rng.gen_range(0..seq_len);
                let picked =
                    sample_context(&mut rng, seq_len, t, cfg.model.window, cfg.model.num_context)?;
                let ctx: Vec<ContextFrame> = picked
                    .into_iter()
                    .map(|i| ContextFrame {
                        image: cache.frames[s][i].clone(),
                        offset: i as i64 - t as i64,
                    })
                    .collect();
                let gt = ground_truth_of(&ds.annotations[s][t]);
                let out = model.forward(&tape, &cache.frames[s][t], &ctx)?;
                let item = item_loss(&tape, &out, &gt, &cfg.loss)?;
                batch_loss = Some(match batch_loss {
                    None => item,
                    Some(acc) => tape.add(&acc, &item)?,
                });
            }
            let loss = tape.scale(&batch_loss.expect("batch_size >= 1"), 1.0 / batch as f64)?;
            let loss_val = loss.item();
            if !loss_val.is_finite() {
                let dump = dump_nan_diagnostics(out_dir, step, loss_val, &model);
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {step}; diagnostics in {}",
                    dump.display()
                )));
            }
            tape.backward(&loss)?;
            adam.step(&params, step_lr)?;
            loss_sum += loss_val;
            step += 1;
        }
        let mean_loss = loss_sum / cfg.train.steps_per_epoch.max(1) as f64;
        let eval_now = epoch + 1 == cfg.train.epochs
            || (cfg.train.eval_every > 0 && (epoch + 1) % cfg.train.eval_every == 0);
        let map = if eval_now {
            Some(evaluate_model(&model, ds, cache, &EvalOptions::for_model(&model))?.map)
        } else {
            None
        };
        if verbose {
            match map {
                Some(m) => eprintln!("epoch {epoch}: lr={lr:.1e} loss={mean_loss:.4} mAP={m:.4}"),
                None => eprintln!("epoch {epoch}: lr={lr:.1e} loss={mean_loss:.4}"),
            }
        }
        logs.push(EpochLog {
            epoch,
            lr,
            mean_loss,
            map,
        });
    }
    let final_map = logs.last().and_then(|l| l.map).unwrap_or(0.0);

    let ckpt = out_dir.join("model.ptse");
    model.save(&ckpt)?;
    cfg.save(&out_dir.join("config.json"))?;
    let csv = out_dir.join("train_log.csv");
    std::fs::write(&csv, logs_to_csv(&logs)).map_err(|e| Error::io(&csv, e))?;
    Ok(TrainSummary {
        logs,
        checkpoint: ckpt,
        final_map,
    })
}

/// Repeatedly fit a fixed list of (sequence, frame) items, accumulating the
/// whole list into each optimizer step, and return the per-step mean-loss
/// curve. Used to verify the optimizer can drive the loss down and that runs
/// are reproducible.
pub fn overfit_curve(
    cfg: &RunConfig,
    ds: &Dataset,
    cache: &FrameCache,
    items: &[(usize, usize)],
    steps: usize,
) -> Result<Vec<f64>> {
    if items.is_empty() {
        return Err(Error::Contract("overfit needs at least one item".into()));
    }
    let model = PtseFormer::new(&cfg.model, cfg.train.seed)?;
    let params = model.params();
    let mut adam = AdamState::new(&params);
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let tape = Tape::new();
        let mut batch_loss: Option<crate::tensor::Tensor> = None;
        for &(s, t) in items {
            let seq_len = cache.frames[s].len();
            let ctx: Vec<ContextFrame> =
                nearest_context(seq_len, t, cfg.model.window, cfg.model.num_context)?
                    .into_iter()
                    .map(|i| ContextFrame {
                        image: cache.frames[s][i].clone(),
                        offset: i as i64 - t as i64,
                    })
                    .collect();
            let gt = ground_truth_of(&ds.annotations[s][t]);
            let out = model.forward(&tape, &cache.frames[s][t], &ctx)?;
            let item = item_loss(&tape, &out, &gt, &cfg.loss)?;
            batch_loss = Some(match batch_loss {
                None => item,
                Some(acc) => tape.add(&acc, &item)?,
            });
        }
        let loss = tape.scale(&batch_loss.expect("items non-empty"), 1.0 / items.len() as f64)?;
        let loss_val = loss.item();
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at overfit step {step}")));
        }
        curve.push(loss_val);
        tape.backward(&loss)?;
        adam.step(&params, cfg.train.lr)?;
    }
    Ok(curve)
}

/// Loss weights live on RunConfig for serialization; re-export the type for
/// callers that only need them.
pub type Weights = LossWeights;
