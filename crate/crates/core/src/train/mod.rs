//! Optimization loop: seeded shuffling and augmentation, Adam updates,
//! per-epoch validation, plateau LR reduction, early stopping, checkpoints
//! and a CSV epoch log.

mod adam;
mod checkpoint;
mod policy;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState, DEFAULT_LR};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, NamedTensor, FORMAT_VERSION,
    MAGIC,
};
pub use policy::{
    EarlyStopConfig, EarlyStopPolicy, PlateauConfig, PlateauPolicy, StopDecision,
};

use crate::autodiff::{Graph, Var};
use crate::data::{
    self, augment, count_labels, derive_class_weights, frequencies_from_counts, load_sample,
    make_batch, AugmentPolicy, Batch, Sample, SampleManifest, Split,
};
use crate::error::{Error, Result};
use crate::loss::{cce, hybrid_loss, ClassWeights, HybridLossConfig, LossConfig};
use crate::metrics::{labels_from_probs, metrics, ConfusionCounts, MetricReport};
use crate::model::Model;
use crate::nn::Forward;
use crate::tensor::Tensor;

pub const EPOCH_LOG_HEADER: &str = "epoch,train_loss,val_dice,val_miou,lr";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Defaults to the resolution rule in [`data::default_batch_size`].
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub adam: AdamConfig,
    pub plateau: PlateauConfig,
    pub early_stop: EarlyStopConfig,
    pub augment: AugmentPolicy,
    /// Defaults to CCE for multi-channel heads and the hybrid loss for one.
    pub loss: Option<LossConfig>,
    /// Share of training images held out when the manifest has no `val` split.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: None,
            seed: 0,
            adam: AdamConfig::default(),
            plateau: PlateauConfig::default(),
            early_stop: EarlyStopConfig::default(),
            augment: AugmentPolicy::default(),
            loss: None,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        if let Some(LossConfig::Hybrid { config, .. }) = &self.loss {
            config.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
    pub val_miou: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    /// Dice of the training-mode predictions made during the epoch's steps.
    /// Not part of the CSV log.
    pub train_dice: f64,
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.train_loss, self.val_dice, self.val_miou, self.lr
        )
    }
}

/// Training and validation samples, already brought to patch size.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    /// No held-out images were available; validation reuses `train`.
    pub val_is_train: bool,
}

impl Dataset {
    pub fn new(train: Vec<Sample>, val: Vec<Sample>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let val_is_train = val.is_empty();
        let val = if val_is_train { train.clone() } else { val };
        Ok(Self {
            train,
            val,
            val_is_train,
        })
    }

    /// Loads a manifest's `train` and `val` entries. Without a `val` split,
    /// `floor(val_fraction · n)` training images chosen by `seed` are held out.
    pub fn from_manifest(manifest: &SampleManifest, val_fraction: f64, seed: u64) -> Result<Self> {
        let mut train: Vec<_> = manifest.split(Split::Train).collect();
        let mut val: Vec<_> = manifest.split(Split::Val).collect();
        if train.is_empty() {
            return Err(Error::data(&manifest.root, "manifest has no training entries"));
        }
        if val.is_empty() {
            let n_val = (train.len() as f64 * val_fraction).floor() as usize;
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5641_4c5f_5350_4c54));
            let held: Vec<usize> = order[..n_val].to_vec();
            val = held.iter().map(|&i| train[i]).collect();
            let mut keep = vec![true; train.len()];
            for &i in &held {
                keep[i] = false;
            }
            let mut k = keep.iter();
            train.retain(|_| *k.next().expect("same length"));
        }
        let load = |entries: Vec<&data::ManifestEntry>| -> Result<Vec<Sample>> {
            let per_image: Vec<Vec<Sample>> = entries
                .par_iter()
                .map(|e| data::to_patches(&load_sample(manifest, e)?, manifest.patch_size))
                .collect::<Result<_>>()?;
            Ok(per_image.into_iter().flatten().collect())
        };
        Self::new(load(train)?, load(val)?)
    }
}

/// The loss a given head trains with.
#[derive(Debug, Clone)]
pub enum ResolvedLoss {
    Cce,
    Hybrid {
        config: HybridLossConfig,
        weights: ClassWeights,
    },
}

impl ResolvedLoss {
    /// Checks the loss against the head; hybrid weights default to the
    /// inverse class frequencies of `train`.
    pub fn resolve(loss: Option<&LossConfig>, channels: usize, train: &[Sample]) -> Result<Self> {
        let loss = loss.cloned().unwrap_or_else(|| LossConfig::for_classes(channels));
        match loss {
            LossConfig::Cce if channels >= 2 => Ok(ResolvedLoss::Cce),
            LossConfig::Cce => Err(Error::Config(
                "categorical cross-entropy needs a head with at least 2 classes".into(),
            )),
            LossConfig::Hybrid { config, weights } if channels == 1 => {
                config.validate()?;
                let weights = match weights {
                    Some(w) => w,
                    None => {
                        let mut counts = [0u64; 2];
                        for s in train {
                            let fg: Vec<u8> = s.labels.data.iter().map(|&l| l.min(1)).collect();
                            let lm = data::LabelMap::new(s.height(), s.width(), fg)?;
                            count_labels(&lm, 2, &mut counts)?;
                        }
                        derive_class_weights(&frequencies_from_counts(&counts))?
                    }
                };
                Ok(ResolvedLoss::Hybrid { config, weights })
            }
            LossConfig::Hybrid { .. } => Err(Error::Config(
                "the hybrid loss needs a single-channel sigmoid head (num_classes = 1)".into(),
            )),
        }
    }

    pub fn apply(&self, g: &Graph<f32>, y_pred: Var, y_true: &Tensor<f32>) -> Result<Var> {
        match self {
            ResolvedLoss::Cce => cce(g, y_pred, y_true),
            ResolvedLoss::Hybrid { config, weights } => {
                hybrid_loss(g, config, y_pred, y_true, weights)
            }
        }
    }
}

/// What one optimizer step saw before updating the weights.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: f64,
    /// Confusion counts of the training-mode predictions on the batch.
    pub counts: ConfusionCounts,
}

/// One optimizer step on a batch.
pub fn train_step(
    model: &mut Model<f32>,
    adam: &mut AdamState<f32>,
    batch: &Batch,
    loss: &ResolvedLoss,
) -> Result<StepOutcome> {
    let graph = Graph::new();
    let channels = model.config().num_classes;
    let (value, counts, grads, updates) = {
        let f = Forward::train(&graph, &model.params);
        let x = graph.constant(batch.images.clone());
        let y = model.net.forward(&f, x)?;
        let l = loss.apply(&graph, y, &batch.targets)?;
        let value = graph.value(l).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss ({value})")));
        }
        let mut counts = ConfusionCounts::new(label_classes(channels));
        counts.update(&labels_from_probs(&graph.value(y)), &batch.labels)?;
        let g = graph.backward(l)?;
        (value, counts, f.param_grads(&g), f.take_stat_updates())
    };
    adam.step(&mut model.params, &grads)?;
    for (id, s) in updates {
        model.params.set_stats(id, s)?;
    }
    Ok(StepOutcome {
        loss: value,
        counts,
    })
}

/// Label classes a head with `channels` outputs predicts.
pub fn label_classes(channels: usize) -> usize {
    channels.max(2)
}

/// Eval-mode confusion counts over `samples`.
pub fn confusion_over(model: &Model<f32>, samples: &[Sample], batch_size: usize) -> Result<ConfusionCounts> {
    let channels = model.config().num_classes;
    let mut counts = ConfusionCounts::new(label_classes(channels));
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = make_batch(chunk, channels)?;
        let probs = model.predict(&batch.images)?;
        counts.update(&labels_from_probs(&probs), &batch.labels)?;
    }
    Ok(counts)
}

pub fn evaluate(model: &Model<f32>, samples: &[Sample], batch_size: usize) -> Result<MetricReport> {
    Ok(metrics(&confusion_over(model, samples, batch_size)?))
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub epoch_log: PathBuf,
}

impl RunFiles {
    pub fn in_dir(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            best_checkpoint: dir.join("best.ocun"),
            last_checkpoint: dir.join("last.ocun"),
            epoch_log: dir.join("epochs.csv"),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub baseline_dice: f64,
    pub best_epoch: usize,
    pub best_dice: f64,
    pub stopped_early: bool,
    pub steps: usize,
    /// Validation metrics after the last epoch.
    pub final_report: MetricReport,
}

/// Derives an independent stream for one (epoch, sample) pair.
fn sample_seed(seed: u64, epoch: usize, position: usize) -> u64 {
    let mut z = seed
        ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (position as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn train(
    model: &mut Model<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    files: Option<&RunFiles>,
) -> Result<TrainReport> {
    train_observed(model, data, cfg, files, &mut |_| {})
}

/// [`train`], calling `on_epoch` after each epoch's validation.
pub fn train_observed(
    model: &mut Model<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    files: Option<&RunFiles>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    let channels = model.config().num_classes;
    let (h, w) = (data.train[0].height(), data.train[0].width());
    let batch_size = cfg.batch_size.unwrap_or_else(|| data::default_batch_size(h, w));
    let loss = ResolvedLoss::resolve(cfg.loss.as_ref(), channels, &data.train)?;

    let mut log = match files {
        Some(f) => {
            let file = File::create(&f.epoch_log).map_err(|e| Error::io(&f.epoch_log, e))?;
            let mut wtr = BufWriter::new(file);
            writeln!(wtr, "{EPOCH_LOG_HEADER}").map_err(|e| Error::io(&f.epoch_log, e))?;
            Some(wtr)
        }
        None => None,
    };

    let mut adam = AdamState::new(cfg.adam, &model.params);
    let baseline = evaluate(model, &data.val, batch_size)?;
    let baseline_dice = baseline.headline_dice();
    let mut plateau = PlateauPolicy::new(cfg.plateau, Some(baseline_dice));
    let mut stopper = EarlyStopPolicy::new(cfg.early_stop, Some(baseline_dice));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut steps = 0usize;
    let mut stopped_early = false;
    let mut final_report = baseline;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let lr = adam.lr();
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut train_counts = ConfusionCounts::new(label_classes(channels));
        for (step, chunk) in order.chunks(batch_size).enumerate() {
            let start = step * batch_size;
            let samples: Vec<Sample> = chunk
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let mut r = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, epoch, start + k));
                    augment(&data.train[i], &cfg.augment.sample(&mut r))
                })
                .collect::<Result<_>>()?;
            let batch = make_batch(&samples, channels)?;
            let out = train_step(model, &mut adam, &batch, &loss).map_err(|e| Error::Training {
                epoch,
                step: step + 1,
                message: e.to_string(),
            })?;
            train_counts += &out.counts;
            loss_sum += out.loss * samples.len() as f64;
            seen += samples.len();
            steps += 1;
        }

        let report = evaluate(model, &data.val, batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_dice: report.headline_dice(),
            val_miou: report.miou,
            lr,
            train_dice: metrics(&train_counts).headline_dice(),
        };
        if let (Some(wtr), Some(f)) = (log.as_mut(), files) {
            writeln!(wtr, "{}", record.csv_line())
                .and_then(|_| wtr.flush())
                .map_err(|e| Error::io(&f.epoch_log, e))?;
        }
        on_epoch(&record);
        history.push(record.clone());

        let improved = best.is_none_or(|(_, d)| record.val_dice > d);
        if improved {
            best = Some((epoch, record.val_dice));
        }
        if let Some(f) = files {
            let meta = CheckpointMeta {
                epoch,
                history: history.clone(),
                best_dice: best.map(|b| b.1),
                adam: None,
            };
            let ckpt = Checkpoint::from_model(model, Some(&adam), meta);
            if improved {
                save_checkpoint(&f.best_checkpoint, &ckpt)?;
            }
            save_checkpoint(&f.last_checkpoint, &ckpt)?;
        }

        adam.set_lr(plateau.update(record.val_dice, lr));
        final_report = report;
        if stopper.check(epoch, record.val_dice) == StopDecision::Stop {
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, best_dice) = best.unwrap_or((0, baseline_dice));
    Ok(TrainReport {
        history,
        baseline_dice,
        best_epoch,
        best_dice,
        stopped_early,
        steps,
        final_report,
    })
}
