use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::{Architecture, Modality, ModelConfig};
use crate::nn::optim::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    /// Maximum global gradient norm.
    pub clip_norm: f64,
    pub epochs: usize,
    /// Optional hard cap on optimizer steps, checked before `epochs`.
    pub max_steps: Option<u64>,
    /// Validate every this many steps; `None` validates at each epoch end.
    pub eval_interval: Option<u64>,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

pub const DEFAULT_EPOCHS: usize = 20;

impl TrainConfig {
    /// Published hyperparameters: Adam at 1e-5, batch 32, dropout 0.5,
    /// positive weight 0.25, gradient norm clipped to 1.
    pub fn preset(architecture: Architecture) -> Self {
        TrainConfig {
            model: ModelConfig::preset(architecture),
            optimizer: AdamConfig::default(),
            batch_size: 32,
            clip_norm: 1.0,
            epochs: DEFAULT_EPOCHS,
            max_steps: None,
            eval_interval: None,
            seed: 0,
            checkpoint_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return err("batch_size must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return err("clip_norm must be positive");
        }
        if !(self.optimizer.lr >= 0.0) {
            return err("learning rate must be non-negative");
        }
        if self.eval_interval == Some(0) {
            return err("eval_interval must be positive");
        }
        Ok(())
    }

    /// Reads a [`TrainConfigFile`] and resolves it.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: TrainConfigFile = serde_json::from_slice(&bytes).map_err(|e| {
            Error::Config(format!("{}: {e}", path.display()))
        })?;
        file.resolve()
    }
}

/// The on-disk training configuration: an optional preset (or a complete
/// `model` section) plus flat overrides of individual fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfigFile {
    pub preset: Option<Architecture>,
    pub model: Option<ModelConfig>,
    pub model_dim: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub dropout: Option<f64>,
    pub pos_weight: Option<f64>,
    pub threshold: Option<f64>,
    pub norm_first: Option<bool>,
    /// Restricts the model to these modalities, in this order.
    pub modalities: Option<Vec<Modality>>,
    /// Temporally average OCR and ASR (multi-transformer only).
    pub average_text: Option<bool>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub clip_norm: Option<f64>,
    pub epochs: Option<usize>,
    pub max_steps: Option<u64>,
    pub eval_interval: Option<u64>,
    pub seed: Option<u64>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfigFile {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match (&self.model, self.preset) {
            (Some(m), _) => TrainConfig {
                model: m.clone(),
                ..TrainConfig::preset(m.architecture)
            },
            (None, Some(a)) => TrainConfig::preset(a),
            (None, None) => {
                return Err(Error::Config(
                    "training config needs either \"preset\" or \"model\"".into(),
                ))
            }
        };
        let m = &mut cfg.model;
        if let Some(v) = self.model_dim {
            m.model_dim = v;
        }
        if let Some(v) = self.layers {
            m.layers = v;
        }
        if let Some(v) = self.heads {
            m.heads = v;
        }
        if let Some(v) = self.dropout {
            m.dropout = v;
        }
        if let Some(v) = self.pos_weight {
            m.pos_weight = v;
        }
        if let Some(v) = self.threshold {
            m.threshold = v;
        }
        if let Some(v) = self.norm_first {
            m.norm_first = v;
        }
        if let Some(avg) = self.average_text {
            for s in &mut m.modalities {
                if s.name.is_textual() {
                    s.temporal_average = avg;
                }
            }
        }
        if let Some(keep) = &self.modalities {
            let pairs: Vec<(Modality, bool)> = keep
                .iter()
                .map(|&k| (k, m.modality(k).is_some_and(|s| s.temporal_average)))
                .collect();
            *m = m.restricted(&pairs)?;
        }
        if let Some(v) = self.lr {
            cfg.optimizer.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.clip_norm {
            cfg.clip_norm = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if self.max_steps.is_some() {
            cfg.max_steps = self.max_steps;
        }
        if self.eval_interval.is_some() {
            cfg.eval_interval = self.eval_interval;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.checkpoint_dir.is_some() {
            cfg.checkpoint_dir = self.checkpoint_dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
