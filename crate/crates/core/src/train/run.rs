use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{adamw_step, AdamWParams, OptimState};
use super::schedule::{lr_at, ScheduleSpec};
use crate::autodiff::Tape;
use crate::data::{segmentation_loss, threshold_logits, Confusion, Dataset, MetricsReport, SampleBatch};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, MobileUnetr};
use crate::nn::{Ctx, BN_MOMENTUM};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const META_FILE: &str = "train_meta.json";

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub schedule: ScheduleSpec,
    pub batch_size: usize,
    pub seed: u64,
    pub adamw: AdamWParams,
    /// Random horizontal/vertical flips, each with probability 0.5.
    pub augment: bool,
    /// Write a numbered checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    /// Log and checkpoints go here; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            schedule: ScheduleSpec::default(),
            batch_size: 8,
            seed: 0,
            adamw: AdamWParams::default(),
            augment: true,
            checkpoint_every: 50,
            out_dir: None,
        }
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate at the start of the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_iou: f64,
    pub val_dice: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dice: f64,
    pub optimizer: OptimState,
}

#[derive(Serialize)]
struct TrainMeta<'a> {
    config: &'a crate::model::ModelConfig,
    schedule: &'a ScheduleSpec,
    adamw: &'a AdamWParams,
    batch_size: usize,
    seed: u64,
    train_samples: usize,
    val_samples: usize,
    augmentation: &'static str,
    metric_aggregation: &'static str,
}

/// Forward, backward and one AdamW update on a batch; returns the loss.
pub fn train_step(model: &mut MobileUnetr<f32>, optim: &mut OptimState, batch: &SampleBatch, lr: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.images.clone());
    let y = tape.constant(batch.masks.clone());
    let (loss, bindings, stats) = {
        let mut cx = Ctx::new(&mut tape, model.store(), true);
        let logits = model.forward(&mut cx, x)?;
        let stats = cx.take_batch_stats();
        let bindings = cx.bindings();
        (segmentation_loss(cx.tape, logits, y)?, bindings, stats)
    };
    let value = tape.value(loss).item()? as f64;
    let grads = tape.backward(loss)?;
    let store = model.store_mut();
    store.zero_grads();
    store.absorb_grads(&bindings, &grads);
    store.apply_batch_stats(&stats, BN_MOMENTUM);
    adamw_step(store, optim, lr)?;
    Ok(value)
}

/// Eval-mode metrics pooled over every pixel of every sample.
pub fn evaluate(model: &MobileUnetr<f32>, data: &Dataset, batch_size: usize) -> Result<MetricsReport> {
    let mut total = Confusion::default();
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk, None)?;
        let pred = threshold_logits(&model.predict(&batch.images)?);
        total.merge(&Confusion::from_masks(pred.data(), batch.masks.data())?);
    }
    Ok(total.report())
}

fn write_file(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Trains for `schedule.total_epochs` epochs, evaluating on `val` after each.
///
/// The learning rate follows the schedule per step (fractional epochs). When
/// `val` is empty the training set is evaluated instead. `on_epoch` sees each
/// log line as it is produced.
pub fn train(
    model: &mut MobileUnetr<f32>,
    train_set: &Dataset,
    val: &Dataset,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::arg("train", "training set is empty"));
    }
    if opts.batch_size == 0 {
        return Err(Error::arg("train", "batch size must be at least 1"));
    }
    opts.schedule.validate()?;
    let val = if val.is_empty() { train_set } else { val };
    let epochs = opts.schedule.total_epochs.round() as usize;
    let adamw = AdamWParams {
        base_lr: opts.schedule.base_lr,
        ..opts.adamw.clone()
    };
    let mut optim = OptimState::new(model.store(), adamw);

    let mut log = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            let meta = TrainMeta {
                config: model.config(),
                schedule: &opts.schedule,
                adamw: &optim.hyper,
                batch_size: opts.batch_size,
                seed: opts.seed,
                train_samples: train_set.len(),
                val_samples: val.len(),
                augmentation: if opts.augment { "flip_h p=0.5, flip_v p=0.5" } else { "none" },
                metric_aggregation: "pixel-pooled over the dataset",
            };
            write_file(dir.join(META_FILE), &(serde_json::to_string_pretty(&meta)? + "\n"))?;
            let path = dir.join(LOG_FILE);
            Some(std::fs::File::create(&path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?)
        }
        None => None,
    };

    let steps = train_set.len().div_ceil(opts.batch_size);
    let mut history = Vec::with_capacity(epochs);
    let (mut best_epoch, mut best_dice) = (0, f64::NEG_INFINITY);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(epoch as u64 + 1);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let epoch_lr = lr_at(epoch as f64, &opts.schedule)?;
        for (b, chunk) in order.chunks(opts.batch_size).enumerate() {
            let flips: Vec<(bool, bool)> = chunk
                .iter()
                .map(|_| {
                    if opts.augment {
                        (rng.random_bool(0.5), rng.random_bool(0.5))
                    } else {
                        (false, false)
                    }
                })
                .collect();
            let batch = train_set.batch(chunk, Some(&flips))?;
            let lr = lr_at(epoch as f64 + b as f64 / steps as f64, &opts.schedule)?;
            let nan = Error::NanLoss { epoch, batch: b, lr };
            let loss = match train_step(model, &mut optim, &batch, lr) {
                Err(Error::NonFinite { .. }) => return Err(nan),
                other => other?,
            };
            if !loss.is_finite() {
                return Err(nan);
            }
            loss_sum += loss * chunk.len() as f64;
        }

        let report = evaluate(model, val, opts.batch_size)?;
        let entry = EpochLog {
            epoch: epoch + 1,
            lr: epoch_lr,
            train_loss: loss_sum / train_set.len() as f64,
            val_iou: report.iou,
            val_dice: report.dice,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(f) = log.as_mut() {
            let line = serde_json::to_string(&entry)? + "\n";
            f.write_all(line.as_bytes()).map_err(|e| Error::io("writing training log", e))?;
        }
        if let Some(dir) = &opts.out_dir {
            if report.dice > best_dice {
                save_checkpoint(model, Some(&optim), &dir.join("best.mutr"))?;
            }
            if opts.checkpoint_every > 0 && (epoch + 1) % opts.checkpoint_every == 0 {
                save_checkpoint(model, Some(&optim), &dir.join(format!("epoch_{:04}.mutr", epoch + 1)))?;
            }
        }
        if report.dice > best_dice {
            best_dice = report.dice;
            best_epoch = epoch + 1;
        }
        on_epoch(&entry);
        history.push(entry);
    }
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(model, Some(&optim), &dir.join("final.mutr"))?;
    }
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_dice,
        optimizer: optim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::model::{build_model, ModelConfig};

    fn short(epochs: usize) -> TrainOptions {
        TrainOptions {
            schedule: ScheduleSpec {
                warmup_epochs: 1.0,
                total_epochs: epochs as f64,
                ..Default::default()
            },
            batch_size: 2,
            seed: 4,
            ..Default::default()
        }
    }

    #[test]
    fn two_epoch_smoke_run_writes_log() {
        let mut cfg = ModelConfig::tiny();
        cfg.image_size = 32;
        let data = gen_synthetic(4, 32, 1, false);
        let dir = tempfile::tempdir().unwrap();
        let mut opts = short(2);
        opts.out_dir = Some(dir.path().to_path_buf());
        let mut model = build_model(&cfg, 0).unwrap();
        let out = train(&mut model, &data, &Dataset::default(), &opts, |_| {}).unwrap();
        assert_eq!(out.history.len(), 2);
        assert!(out.history.iter().all(|e| e.train_loss.is_finite()));
        let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 2);
        assert!(dir.path().join("final.mutr").exists());
        assert!(dir.path().join("best.mutr").exists());
        assert!(dir.path().join(META_FILE).exists());
    }

    #[test]
    fn same_seed_same_trajectory() {
        let data = gen_synthetic(3, 32, 2, false);
        let run = || {
            let mut model = build_model(&ModelConfig::tiny(), 1).unwrap();
            let out = train(&mut model, &data, &Dataset::default(), &short(2), |_| {}).unwrap();
            out.history.iter().map(|e| (e.train_loss, e.val_dice)).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn evaluate_all_background() {
        let mut data = gen_synthetic(2, 32, 3, false);
        for s in &mut data.samples {
            s.mask.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut model = build_model(&ModelConfig::tiny(), 0).unwrap();
        // Force every logit negative through the classifier bias.
        let last = model.store().params().len() - 1;
        let p = &mut model.store_mut().params_mut()[last];
        assert!(p.name.ends_with("classifier.bias"));
        p.tensor.data_mut()[0] = -1e4;
        let r = evaluate(&model, &data, 2).unwrap();
        assert_eq!((r.acc, r.sp), (1.0, 1.0));
        assert_eq!(r, evaluate(&model, &data, 1).unwrap());
    }
}
