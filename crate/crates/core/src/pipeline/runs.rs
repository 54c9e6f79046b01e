use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{sample_k_shot, split, synth_generate, DatasetIndex, EpisodeSpec};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::lora::{adapter_checkpoint, inject, trainable_count, AdapterConfig};
use crate::tensor::{read_checkpoint, write_checkpoint, AdamWConfig, Checkpoint, ParamId, ParamStore};

use super::plan::{Cell, DatasetSource, ExperimentPlan, Strategy};
use super::train::{evaluate_detector, probe_loss, train, EpochLog, LrSchedule, Samples, TrainConfig};

const PROBE_SEED: u64 = 0x5eed;
const PROBE_DRAWS: usize = 4;

/// Index of the best validation score, earliest on ties.
pub fn select_checkpoint(trace: &[f64]) -> Result<usize> {
    if trace.is_empty() {
        return Err(Error::Contract("cannot select a checkpoint from an empty trace".into()));
    }
    let mut best = 0;
    for (i, &v) in trace.iter().enumerate() {
        if v > trace[best] {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub epoch: usize,
    pub val_map50: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainResult {
    pub epochs: usize,
    pub val_trace: Vec<TracePoint>,
    pub best_epoch: usize,
    pub best_val_map50: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub cell: Cell,
    pub epochs: usize,
    pub episode_images: Vec<u64>,
    pub val_trace: Vec<TracePoint>,
    pub best_epoch: usize,
    pub best_val_map50: f64,
    /// Test mAP of the best-validation checkpoint.
    pub test_map50: f64,
    pub initial_val_map50: f64,
    pub initial_test_map50: f64,
    /// Fixed-draw training loss on the episode before and after training.
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    /// Same loss for the source-pretrained model, where every strategy
    /// starts; differs from `initial_train_loss` only after a baseline stage.
    pub source_train_loss: f64,
    pub trainable_params: usize,
    pub total_params: usize,
    pub seconds: f64,
}

struct Datasets {
    source_train: Samples,
    source_val: Samples,
    pool: DatasetIndex,
    target_val: Samples,
    target_test: Samples,
}

/// Results directory bound to an experiment plan.
pub struct Workspace {
    root: PathBuf,
    plan: ExperimentPlan,
    data: OnceLock<Datasets>,
}

fn load_source(src: &DatasetSource) -> Result<DatasetIndex> {
    match src {
        DatasetSource::Synthetic(cfg) => synth_generate(cfg),
        DatasetSource::Coco { path } => DatasetIndex::load_dir(path),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("result serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_trace(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["epoch", "train_loss", "val_map50"]).map_err(io)?;
    for l in logs {
        let val = l.val_map.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([l.epoch.to_string(), l.train_loss.to_string(), val]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Training state captured at the best validation score so far.
struct Best {
    score: f64,
    epoch: usize,
    store: ParamStore,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, plan: ExperimentPlan) -> Result<Self> {
        plan.validate()?;
        Ok(Self {
            root: root.into(),
            plan,
            data: OnceLock::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn plan(&self) -> &ExperimentPlan {
        &self.plan
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.root.join("pretrain")
    }

    pub fn pretrained_path(&self) -> PathBuf {
        self.pretrain_dir().join("model.ldck")
    }

    pub fn cell_dir(&self, cell: &Cell) -> PathBuf {
        self.root.join(cell.to_string())
    }

    fn data(&self) -> Result<&Datasets> {
        if let Some(d) = self.data.get() {
            return Ok(d);
        }
        let p = &self.plan;
        let source = load_source(&p.source)?;
        let s = split(&source, p.pretrain.val_fraction, p.split_seed)?;
        let target = load_source(&p.target)?;
        let held = split(&target, p.test_fraction, p.split_seed)?;
        let rest = split(&held.train, p.val_fraction, p.split_seed.wrapping_add(1))?;
        let d = Datasets {
            source_train: Samples::new(&s.train)?,
            source_val: Samples::new(&s.val)?,
            target_val: Samples::new(&rest.val)?,
            target_test: Samples::new(&held.val)?,
            pool: rest.train,
        };
        Ok(self.data.get_or_init(|| d))
    }

    /// Target-domain images episodes are drawn from; disjoint from the
    /// validation and test images.
    pub fn episode_pool(&self) -> Result<&DatasetIndex> {
        Ok(&self.data()?.pool)
    }

    pub fn episode(&self, shots: usize, seed: u64) -> Result<DatasetIndex> {
        let pool = self.episode_pool()?;
        sample_k_shot(pool, &EpisodeSpec::all_classes(pool, shots, seed))
    }

    fn fresh_detector(&self) -> Result<Detector> {
        Detector::new(self.plan.detector.clone(), self.plan.pretrain.seed)
    }

    /// The source-pretrained detector.
    pub fn pretrained(&self) -> Result<Detector> {
        let path = self.pretrained_path();
        if !path.exists() {
            return Err(Error::Dependency(format!(
                "pretrained checkpoint {} not found; run `lodet pretrain` first",
                path.display()
            )));
        }
        let mut det = self.fresh_detector()?;
        det.load_checkpoint(&read_checkpoint(&path)?)?;
        Ok(det)
    }

    pub fn validation_map(&self, det: &Detector) -> Result<f64> {
        Ok(evaluate_detector(det, &self.data()?.target_val, self.plan.eval_seed)?.map50)
    }

    pub fn test_map(&self, det: &Detector) -> Result<f64> {
        Ok(evaluate_detector(det, &self.data()?.target_test, self.plan.eval_seed)?.map50)
    }

    /// Trains from scratch on the source domain and keeps the checkpoint
    /// with the best source-validation mAP.
    pub fn pretrain(&self) -> Result<PretrainResult> {
        let start = Instant::now();
        let p = &self.plan.pretrain;
        let data = self.data()?;
        let mut det = self.fresh_detector()?;
        let cfg = TrainConfig {
            epochs: p.epochs,
            batch_size: p.batch_size,
            optimizer: AdamWConfig {
                lr: p.lr as f32,
                weight_decay: self.plan.weight_decay as f32,
                ..Default::default()
            },
            grad_clip: self.plan.grad_clip,
            schedule: LrSchedule::Constant,
            draws: 1,
            eval_interval: p.eval_interval,
            seed: p.seed,
        };
        let mut best: Option<Best> = None;
        let logs = train(&mut det, &data.source_train, &cfg, |epoch, det| {
            let score = evaluate_detector(det, &data.source_val, self.plan.eval_seed)?.map50;
            log::info!("pretrain epoch {epoch}: source val mAP50 {score:.4}");
            if best.as_ref().is_none_or(|b| score > b.score) {
                best = Some(Best {
                    score,
                    epoch,
                    store: det.store.clone(),
                });
            }
            Ok(score)
        })?;
        let best = best.ok_or_else(|| Error::Config("pretraining ran no evaluation".into()))?;

        let dir = self.pretrain_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_checkpoint(&self.pretrained_path(), &best.store.to_checkpoint())?;
        write_trace(&dir.join("trace.csv"), &logs)?;
        let result = PretrainResult {
            epochs: p.epochs,
            val_trace: trace_points(&logs),
            best_epoch: best.epoch,
            best_val_map50: best.score,
            seconds: start.elapsed().as_secs_f64(),
        };
        write_json(&dir.join("result.json"), &result)?;
        Ok(result)
    }

    pub fn pretrain_result(&self) -> Result<PretrainResult> {
        read_json(&self.pretrain_dir().join("result.json"))
    }

    /// Reads the stored result of a completed cell.
    pub fn result(&self, cell: &Cell) -> Result<RunResult> {
        read_json(&self.cell_dir(cell).join("result.json"))
    }

    pub fn is_complete(&self, cell: &Cell) -> bool {
        self.cell_dir(cell).join("result.json").exists()
    }

    /// Starting model of a cell: the adapted detector and, for adapter
    /// strategies, the adapter configuration.
    pub fn initial_model(&self, cell: &Cell) -> Result<(Detector, Option<AdapterConfig>)> {
        let mut det = match cell.baseline() {
            Some(base) => {
                let path = self.cell_dir(&base).join("best.ldck");
                if !path.exists() {
                    return Err(Error::Dependency(format!(
                        "baseline checkpoint {} not found; run the `{base}` cell first",
                        path.display()
                    )));
                }
                let mut det = self.fresh_detector()?;
                det.load_checkpoint(&read_checkpoint(&path)?)?;
                det
            }
            None => self.pretrained()?,
        };
        let adapter = match cell.rank {
            Some(r) => {
                let cfg = self.plan.adapter_config(r, cell.seed);
                inject(&mut det, &cfg)?;
                Some(cfg)
            }
            None => {
                det.store.unfreeze_all();
                None
            }
        };
        Ok((det, adapter))
    }

    fn checkpoint_of(det: &Detector, adapter: &Option<AdapterConfig>) -> Checkpoint {
        match adapter {
            Some(cfg) => adapter_checkpoint(det, cfg),
            None => det.checkpoint(),
        }
    }

    /// Runs one grid cell and writes its trace, checkpoints and result.
    pub fn run(&self, cell: &Cell) -> Result<RunResult> {
        self.run_with_epochs(cell, None)
    }

    /// Like [`Workspace::run`] with an overridden epoch budget.
    pub fn run_with_epochs(&self, cell: &Cell, epochs: Option<usize>) -> Result<RunResult> {
        let start = Instant::now();
        let plan = &self.plan;
        let epochs = epochs.unwrap_or(match cell.strategy {
            Strategy::LoraAfterFt => plan.stage2_epochs(),
            _ => plan.epochs,
        });
        if epochs == 0 || epochs % plan.eval_interval != 0 {
            return Err(Error::Config(format!(
                "epoch budget {epochs} must be a positive multiple of {}",
                plan.eval_interval
            )));
        }
        let episode = self.episode(cell.shots, cell.seed)?;
        let samples = Samples::new(&episode)?;
        let (mut det, adapter) = self.initial_model(cell)?;
        let frozen_before: Vec<(ParamId, Vec<f32>)> = det
            .store
            .iter()
            .filter(|(_, p)| !p.trainable())
            .map(|(id, p)| (id, p.tensor.data().to_vec()))
            .collect();

        let count = trainable_count(&det.store);
        let initial_val = self.validation_map(&det)?;
        let initial_test = self.test_map(&det)?;
        let initial_loss = probe_loss(&det, &samples, PROBE_SEED, PROBE_DRAWS)?;
        let source_loss = match cell.baseline() {
            Some(_) => probe_loss(&self.pretrained()?, &samples, PROBE_SEED, PROBE_DRAWS)?,
            None => initial_loss,
        };
        let lr = if adapter.is_some() { plan.adapter_lr() } else { plan.lr };
        let cfg = TrainConfig {
            epochs,
            batch_size: plan.batch_size,
            optimizer: AdamWConfig {
                lr: lr as f32,
                weight_decay: plan.weight_decay as f32,
                ..Default::default()
            },
            grad_clip: plan.grad_clip,
            schedule: plan.lr_schedule,
            draws: plan.draws,
            eval_interval: plan.eval_interval,
            seed: cell.seed,
        };
        let mut best: Option<Best> = None;
        let logs = train(&mut det, &samples, &cfg, |epoch, det| {
            let score = self.validation_map(det)?;
            log::debug!("{cell} epoch {epoch}: val mAP50 {score:.4}");
            if best.as_ref().is_none_or(|b| score > b.score) {
                best = Some(Best {
                    score,
                    epoch,
                    store: det.store.clone(),
                });
            }
            Ok(score)
        })?;
        let final_loss = probe_loss(&det, &samples, PROBE_SEED, PROBE_DRAWS)?;

        for (id, before) in &frozen_before {
            let now = det.store.get(*id);
            if now.tensor.data() != before.as_slice() {
                return Err(Error::State(format!("frozen parameter `{}` changed during training", now.name)));
            }
        }

        let dir = self.cell_dir(cell);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_checkpoint(&dir.join("last.ldck"), &Self::checkpoint_of(&det, &adapter))?;
        let trace = trace_points(&logs);
        let scores: Vec<f64> = trace.iter().map(|t| t.val_map50).collect();
        let best_idx = select_checkpoint(&scores)?;
        let best = best.expect("training evaluated at least once");
        debug_assert_eq!(best.epoch, trace[best_idx].epoch);
        det.store = best.store;
        write_checkpoint(&dir.join("best.ldck"), &Self::checkpoint_of(&det, &adapter))?;
        let test_map = self.test_map(&det)?;
        write_trace(&dir.join("trace.csv"), &logs)?;

        let result = RunResult {
            cell: *cell,
            epochs,
            episode_images: episode.images().iter().map(|i| i.id).collect(),
            best_epoch: trace[best_idx].epoch,
            best_val_map50: trace[best_idx].val_map50,
            val_trace: trace,
            test_map50: test_map,
            initial_val_map50: initial_val,
            initial_test_map50: initial_test,
            initial_train_loss: initial_loss,
            final_train_loss: final_loss,
            source_train_loss: source_loss,
            trainable_params: count.trainable,
            total_params: count.total,
            seconds: start.elapsed().as_secs_f64(),
        };
        write_json(&dir.join("result.json"), &result)?;
        log::info!(
            "{cell}: test mAP50 {:.4} (best epoch {}), loss {:.3} -> {:.3}, {:.0}s",
            result.test_map50,
            result.best_epoch,
            result.initial_train_loss,
            result.final_train_loss,
            result.seconds
        );
        Ok(result)
    }

    /// Runs every cell of the plan in dependency order, skipping completed
    /// cells unless `force` is set.
    pub fn run_grid(&self, force: bool) -> Result<Vec<RunResult>> {
        let mut out = Vec::new();
        for cell in self.plan.cells() {
            let r = if !force && self.is_complete(&cell) {
                self.result(&cell)?
            } else {
                self.run(&cell)?
            };
            out.push(r);
        }
        Ok(out)
    }
}

fn trace_points(logs: &[EpochLog]) -> Vec<TracePoint> {
    logs.iter()
        .filter_map(|l| {
            l.val_map.map(|v| TracePoint {
                epoch: l.epoch,
                val_map50: v,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_selection() {
        assert_eq!(select_checkpoint(&[0.1, 0.3, 0.2]).unwrap(), 1);
        assert_eq!(select_checkpoint(&[0.1, 0.2, 0.3]).unwrap(), 2);
        assert_eq!(select_checkpoint(&[0.2, 0.3, 0.3]).unwrap(), 1);
        assert!(select_checkpoint(&[]).is_err());
    }
}
