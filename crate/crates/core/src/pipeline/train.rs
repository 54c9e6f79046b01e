use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DatasetIndex;
use crate::detector::{BoxSet, Detector};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult, IOU_THRESHOLD};
use crate::tensor::{AdamW, AdamWConfig, Tape, Tensor};

/// Images and normalized ground truth, decoded once.
pub struct Samples {
    pub ids: Vec<u64>,
    pub images: Vec<Tensor>,
    pub targets: Vec<BoxSet>,
    n_classes: usize,
}

impl Samples {
    pub fn new(ds: &DatasetIndex) -> Result<Self> {
        let ids: Vec<u64> = ds.images().iter().map(|i| i.id).collect();
        Ok(Self {
            images: ids.iter().map(|&id| ds.image_tensor(id)).collect::<Result<_>>()?,
            targets: ids.iter().map(|&id| ds.ground_truth(id)).collect::<Result<_>>()?,
            ids,
            n_classes: ds.categories().len(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to zero over the run, stepped
    /// once per epoch.
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * (epoch - 1) as f64 / epochs as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Global gradient-norm clip applied to each batch.
    pub grad_clip: Option<f64>,
    pub schedule: LrSchedule,
    /// Corruption draws averaged per image and step.
    pub draws: usize,
    pub eval_interval: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_map: Option<f64>,
}

/// Trains `det` on `train`, calling `on_eval(epoch, det)` every
/// `eval_interval` epochs; the returned value is recorded as that epoch's
/// validation score.
pub fn train(
    det: &mut Detector,
    train: &Samples,
    cfg: &TrainConfig,
    mut on_eval: impl FnMut(usize, &Detector) -> Result<f64>,
) -> Result<Vec<EpochLog>> {
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.eval_interval == 0 {
        return Err(Error::Config("batch size and eval interval must be positive".into()));
    }
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let base_lr = cfg.optimizer.lr as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        opt.config.lr = (base_lr * cfg.schedule.factor(epoch, cfg.epochs)) as f32;
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            det.store.zero_grad();
            for &i in batch {
                let mut tape = Tape::new();
                let loss = det.training_loss_draws(&mut tape, &train.images[i], &train.targets[i], cfg.draws, &mut rng)?;
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Numeric(format!("training loss diverged at epoch {epoch}")));
                }
                total += value;
                tape.backward(loss, &mut det.store)?;
            }
            det.store.scale_grads(1.0 / batch.len() as f32);
            if let Some(clip) = cfg.grad_clip {
                let norm = det.store.grad_norm();
                if norm > clip {
                    det.store.scale_grads((clip / norm) as f32);
                }
            }
            opt.step(&mut det.store)?;
        }
        let val_map = if epoch % cfg.eval_interval == 0 {
            Some(on_eval(epoch, det)?)
        } else {
            None
        };
        logs.push(EpochLog {
            epoch,
            train_loss: total / train.len() as f64,
            val_map,
        });
    }
    Ok(logs)
}

/// Mean training loss over every sample with fixed corruption draws, so
/// successive calls on the same weights agree exactly.
pub fn probe_loss(det: &Detector, samples: &Samples, seed: u64, draws: usize) -> Result<f64> {
    let mut total = 0.0;
    for (k, (img, gt)) in samples.images.iter().zip(&samples.targets).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64) << 32));
        for _ in 0..draws {
            let mut tape = Tape::new();
            let loss = det.training_loss(&mut tape, img, gt, &mut rng)?;
            total += tape.scalar(loss);
        }
    }
    Ok(total / (samples.len() * draws) as f64)
}

/// Runs inference on every image (image `id` uses seed `seed + id`) and
/// scores it at IoU 0.5 with the detector's detection cap.
pub fn evaluate_detector(det: &Detector, samples: &Samples, seed: u64) -> Result<EvalResult> {
    let preds: Vec<BoxSet> = samples
        .ids
        .par_iter()
        .zip(&samples.images)
        .map(|(&id, img)| det.infer(img, seed.wrapping_add(id)))
        .collect::<Result<_>>()?;
    let dets: BTreeMap<u64, BoxSet> = samples.ids.iter().copied().zip(preds).collect();
    let gts: BTreeMap<u64, BoxSet> = samples.ids.iter().copied().zip(samples.targets.iter().cloned()).collect();
    let classes: Vec<u32> = (0..samples.n_classes as u32).collect();
    evaluate(&dets, &gts, &classes, IOU_THRESHOLD, det.config.max_detections)
}
