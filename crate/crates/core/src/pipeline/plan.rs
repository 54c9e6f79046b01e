use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::detector::{Detector, DetectorConfig, DEFAULT_SELECTOR};
use crate::error::{Error, Result};
use crate::lora::{inject, AdapterConfig};

use super::train::LrSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Full fine-tuning of every parameter.
    BaselineFt,
    /// Adapters on the source-pretrained model.
    LoraDirect,
    /// Adapters on the best full fine-tuning checkpoint.
    LoraAfterFt,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::BaselineFt, Strategy::LoraDirect, Strategy::LoraAfterFt];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::BaselineFt => "baseline_ft",
            Strategy::LoraDirect => "lora_direct",
            Strategy::LoraAfterFt => "lora_after_ft",
        }
    }

    pub fn uses_adapters(self) -> bool {
        self != Strategy::BaselineFt
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// One grid cell: a single training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub strategy: Strategy,
    /// `None` for the baseline.
    pub rank: Option<usize>,
    pub shots: usize,
    pub seed: u64,
}

impl Cell {
    pub fn new(strategy: Strategy, rank: Option<usize>, shots: usize, seed: u64) -> Result<Self> {
        match (strategy.uses_adapters(), rank) {
            (true, None) => Err(Error::Config(format!("{strategy} needs a rank"))),
            (false, Some(_)) => Err(Error::Config("the baseline takes no rank".into())),
            _ if shots == 0 => Err(Error::Config("shots must be positive".into())),
            _ => Ok(Self {
                strategy,
                rank,
                shots,
                seed,
            }),
        }
    }

    /// The baseline run this cell starts from, if any.
    pub fn baseline(&self) -> Option<Cell> {
        (self.strategy == Strategy::LoraAfterFt).then_some(Cell {
            strategy: Strategy::BaselineFt,
            rank: None,
            ..*self
        })
    }

    /// Table column label.
    pub fn column(&self) -> String {
        match self.rank {
            Some(r) => format!("{}@{r}", self.strategy),
            None => self.strategy.to_string(),
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.rank {
            Some(r) => write!(f, "{}-r{r}-k{}-s{}", self.strategy, self.shots, self.seed),
            None => write!(f, "{}-k{}-s{}", self.strategy, self.shots, self.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SynthConfig),
    /// Directory with `annotations.json` and the referenced images.
    Coco { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_interval: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            lr: 1e-3,
            eval_interval: 5,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterSettings {
    pub selector: String,
    /// Defaults to the rank.
    pub alpha: Option<f32>,
    pub init_scale: f32,
}

impl Default for AdapterSettings {
    fn default() -> Self {
        Self {
            selector: DEFAULT_SELECTOR.to_owned(),
            alpha: None,
            init_scale: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    /// Row label in the result table.
    pub dataset: String,
    pub strategies: Vec<Strategy>,
    pub shots: Vec<usize>,
    pub ranks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    /// Stage-two budget of `lora_after_ft`; defaults to `epochs`.
    pub stage2_epochs: Option<usize>,
    pub eval_interval: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate of adapter training; `lr` when unset.
    pub adapter_lr: Option<f64>,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub lr_schedule: LrSchedule,
    /// Corruption draws averaged per image and step.
    pub draws: usize,
    pub eval_seed: u64,
    /// Share of the target pool held out for testing.
    pub test_fraction: f64,
    /// Share of the remaining target pool held out for validation.
    pub val_fraction: f64,
    pub split_seed: u64,
    pub source: DatasetSource,
    pub target: DatasetSource,
    pub pretrain: PretrainConfig,
    pub detector: DetectorConfig,
    pub adapter: AdapterSettings,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            dataset: "synthetic".to_owned(),
            strategies: Strategy::ALL.to_vec(),
            shots: vec![1, 5, 10, 50],
            ranks: vec![4, 8, 32, 128],
            seeds: vec![0, 1, 2, 3, 4],
            epochs: 300,
            stage2_epochs: None,
            eval_interval: 10,
            batch_size: 4,
            lr: 1e-3,
            adapter_lr: Some(3e-3),
            weight_decay: 1e-4,
            grad_clip: Some(1.0),
            lr_schedule: LrSchedule::Cosine,
            draws: 4,
            eval_seed: 0,
            test_fraction: 0.25,
            val_fraction: 0.2,
            split_seed: 0,
            source: DatasetSource::Synthetic(SynthConfig::source(1)),
            target: DatasetSource::Synthetic(SynthConfig::target(2)),
            pretrain: PretrainConfig::default(),
            detector: DetectorConfig::default(),
            adapter: AdapterSettings::default(),
        }
    }
}

impl ExperimentPlan {
    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("plan serializes")
    }

    pub fn adapter_config(&self, rank: usize, seed: u64) -> AdapterConfig {
        let mut cfg = AdapterConfig::new(rank, self.adapter.selector.clone());
        if let Some(alpha) = self.adapter.alpha {
            cfg.alpha = alpha;
        }
        cfg.init_scale = self.adapter.init_scale;
        cfg.seed = seed;
        cfg
    }

    pub fn stage2_epochs(&self) -> usize {
        self.stage2_epochs.unwrap_or(self.epochs)
    }

    pub fn adapter_lr(&self) -> f64 {
        self.adapter_lr.unwrap_or(self.lr)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("plan has no seeds".into()));
        }
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(Error::Config("shots must be a non-empty list of positive counts".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("plan has no strategies".into()));
        }
        if self.strategies.iter().any(|s| s.uses_adapters()) && self.ranks.is_empty() {
            return Err(Error::Config("adapter strategies need at least one rank".into()));
        }
        if self.epochs == 0 || self.eval_interval == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs, eval interval and batch size must be positive".into()));
        }
        if self.epochs % self.eval_interval != 0 || self.stage2_epochs() % self.eval_interval != 0 {
            return Err(Error::Config(format!(
                "epoch budgets must be multiples of the eval interval {}",
                self.eval_interval
            )));
        }
        if self.pretrain.epochs == 0 || self.pretrain.eval_interval == 0 || self.pretrain.batch_size == 0 {
            return Err(Error::Config("pretrain epochs, eval interval and batch size must be positive".into()));
        }
        if self.draws == 0 {
            return Err(Error::Config("draws must be positive".into()));
        }
        for lr in [self.lr, self.adapter_lr(), self.pretrain.lr] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rate {lr} must be positive")));
            }
        }
        self.detector.validate()?;
        // Ranks must fit every selected layer of the configured detector.
        for &r in &self.ranks {
            let mut det = Detector::new(self.detector.clone(), 0)?;
            let cfg = self.adapter_config(r, 0);
            cfg.validate()?;
            inject(&mut det, &cfg)?;
        }
        Ok(())
    }

    /// Every cell of the grid, ordered so that each baseline precedes the
    /// runs that depend on it.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &shots in &self.shots {
            for &seed in &self.seeds {
                for &strategy in &Strategy::ALL {
                    let wanted = self.strategies.contains(&strategy)
                        || (strategy == Strategy::BaselineFt && self.strategies.contains(&Strategy::LoraAfterFt));
                    if !wanted {
                        continue;
                    }
                    if strategy.uses_adapters() {
                        out.extend(self.ranks.iter().map(|&r| Cell {
                            strategy,
                            rank: Some(r),
                            shots,
                            seed,
                        }));
                    } else {
                        out.push(Cell {
                            strategy,
                            rank: None,
                            shots,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }

    /// Table columns in display order.
    pub fn columns(&self) -> Vec<String> {
        let mut cols = Vec::new();
        for s in Strategy::ALL {
            if !self.strategies.contains(&s) {
                continue;
            }
            if s.uses_adapters() {
                cols.extend(self.ranks.iter().map(|r| format!("{s}@{r}")));
            } else {
                cols.push(s.to_string());
            }
        }
        cols
    }
}
