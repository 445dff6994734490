//! Training configuration: a TOML file whose keys mirror the `train` flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelConfig, NormKind};
use crate::optim::SgdConfig;
use crate::pretext::PretextConfig;
use crate::task::Task;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineMode {
    /// One backward pass and step over the weighted sum of all task losses.
    #[default]
    Sum,
    /// One task per step, round robin over tasks with non-zero weight.
    Alternate,
}

impl std::str::FromStr for CombineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(CombineMode::Sum),
            "alternate" => Ok(CombineMode::Alternate),
            _ => Err(Error::config(format!("unknown combination mode {s:?} (sum|alternate)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSizes {
    pub labeled: usize,
    pub unlabeled: usize,
}

impl Default for BatchSizes {
    fn default() -> Self {
        BatchSizes {
            labeled: 8,
            unlabeled: 8,
        }
    }
}

/// Network shape knobs; task heads and class counts come from elsewhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub norm: NormKind,
    pub groups: usize,
    pub encoder_channels: Vec<usize>,
    pub eps: f64,
    pub norm_momentum: f64,
    pub switch_shared: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        ArchConfig {
            norm: m.norm,
            groups: m.groups,
            encoder_channels: m.encoder_channels,
            eps: m.eps,
            norm_momentum: m.norm_momentum,
            switch_shared: m.switch_shared,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Dataset directory holding `manifest.json`.
    pub data: PathBuf,
    pub seed: u64,
    pub epochs: usize,
    /// Overrides the sampler's epoch length.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps_per_epoch: Option<usize>,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_every: usize,
    pub mode: CombineMode,
    pub tasks: Vec<Task>,
    /// Loss weight per task; tasks not listed get 1.
    pub weights: BTreeMap<Task, f64>,
    pub batch: BatchSizes,
    pub model: ArchConfig,
    pub optim: SgdConfig,
    pub pretext: PretextConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data: PathBuf::from("data"),
            seed: 0,
            epochs: 20,
            steps_per_epoch: None,
            eval_every: 1,
            mode: CombineMode::Sum,
            tasks: vec![Task::Segmentation],
            weights: BTreeMap::new(),
            batch: BatchSizes::default(),
            model: ArchConfig::default(),
            optim: SgdConfig::default(),
            pretext: PretextConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::config(format!("bad config: {e}")))?;
        Ok(cfg)
    }

    /// Reads a config file. A relative `data` path is taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.data.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data = dir.join(&cfg.data);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn weight(&self, task: Task) -> f64 {
        self.weights.get(&task).copied().unwrap_or(1.0)
    }

    /// Active tasks in canonical order.
    pub fn sorted_tasks(&self) -> Vec<Task> {
        let mut t = self.tasks.clone();
        t.sort();
        t.dedup();
        t
    }

    pub fn pretext_tasks(&self) -> Vec<Task> {
        self.sorted_tasks().into_iter().filter(|t| t.is_pretext()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::config("at least one task is required"));
        }
        if self.sorted_tasks().len() != self.tasks.len() {
            return Err(Error::config("tasks must not repeat"));
        }
        if let Some(t) = self.weights.keys().find(|t| !self.tasks.contains(t)) {
            return Err(Error::config(format!("weight given for inactive task {t}")));
        }
        for t in &self.tasks {
            let w = self.weight(*t);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(format!("weight for {t} must be finite and >= 0, got {w}")));
            }
        }
        if self.tasks.iter().all(|&t| self.weight(t) == 0.0) {
            return Err(Error::config("at least one task weight must be > 0"));
        }
        if self.tasks.contains(&Task::Segmentation) && self.batch.labeled == 0 {
            return Err(Error::config("segmentation needs batch.labeled >= 1"));
        }
        if !self.pretext_tasks().is_empty() && self.batch.unlabeled == 0 {
            return Err(Error::config("pretext tasks need batch.unlabeled >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::config("steps_per_epoch must be >= 1"));
        }
        self.optim.validate()?;
        self.pretext.validate()?;
        Ok(())
    }

    pub fn model_config(&self, nb_classes: usize) -> ModelConfig {
        ModelConfig {
            tasks: self.sorted_tasks(),
            in_channels: 3,
            encoder_channels: self.model.encoder_channels.clone(),
            norm: self.model.norm,
            groups: self.model.groups,
            eps: self.model.eps,
            norm_momentum: self.model.norm_momentum,
            switch_shared: self.model.switch_shared,
            nb_classes,
            palette_size: self.pretext.palette_size,
            jigsaw_grid: self.pretext.jigsaw_grid,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut cfg = TrainConfig {
            tasks: vec![Task::Segmentation, Task::Jigsaw],
            steps_per_epoch: Some(3),
            ..TrainConfig::default()
        };
        cfg.weights.insert(Task::Jigsaw, 0.5);
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn sections_parse() {
        let text = r#"
            data = "d"
            tasks = ["segmentation", "denoising"]
            mode = "alternate"
            [weights]
            denoising = 0.25
            [batch]
            labeled = 4
            unlabeled = 2
            [model]
            norm = "group"
            groups = 2
            [optim]
            lr0 = 0.1
            [pretext]
            noise_sigma = 0.0
        "#;
        let cfg = TrainConfig::from_toml(text).unwrap();
        assert_eq!(cfg.mode, CombineMode::Alternate);
        assert_eq!(cfg.weight(Task::Denoising), 0.25);
        assert_eq!(cfg.weight(Task::Segmentation), 1.0);
        assert_eq!(cfg.batch, BatchSizes { labeled: 4, unlabeled: 2 });
        assert_eq!(cfg.model.norm, NormKind::Group);
        assert_eq!(cfg.optim.lr0, 0.1);
        assert_eq!(cfg.optim.momentum, SgdConfig::default().momentum);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_keys_and_bad_values() {
        assert!(TrainConfig::from_toml("learning_rate = 1").is_err());
        assert!(TrainConfig::from_toml("tasks = [\"painting\"]").is_err());
        let mut cfg = TrainConfig::default();
        cfg.weights.insert(Task::Segmentation, 0.0);
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { tasks: vec![], ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            tasks: vec![Task::Jigsaw],
            batch: BatchSizes { labeled: 8, unlabeled: 0 },
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.weights.insert(Task::Jigsaw, 1.0);
        assert!(cfg.validate().is_err());
    }
}
