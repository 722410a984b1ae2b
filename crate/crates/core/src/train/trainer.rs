//! The training loop.
//!
//! Every random draw is derived from the configured seed and a counter:
//! the sample order of epoch `e` from `(seed, e)`, the dropout masks of
//! step `s` from `(seed, s)`, the initial parameters from `seed` alone. A
//! run can therefore stop at any step boundary, be checkpointed, and resume
//! bit-identically.

use std::path::{Path, PathBuf};

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::data::batch::make_batch;
use crate::data::manifest::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::MetricsReport;
use crate::model::checkpoint::{load_checkpoint, save_checkpoint};
use crate::model::classifier::GenreClassifier;
use crate::nn::layers::ForwardCtx;
use crate::nn::optim::{adam_step, clip_global_norm};
use crate::nn::params::Gradients;
use crate::rng::SeededRng;
use crate::train::config::TrainConfig;
use crate::train::eval::evaluate;
use crate::train::history::{TrainHistory, ValSummary};

const STREAM_INIT: u64 = 0;
const STREAM_EPOCH: u64 = 1;
const STREAM_STEP: u64 = 2;

pub const LAST_CHECKPOINT: &str = "last.json";
pub const BEST_CHECKPOINT: &str = "best.json";

/// Position of the loop, stored in checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    /// Optimizer steps taken.
    pub step: u64,
    pub epoch: u64,
    /// Batches of `epoch` already consumed.
    pub batch_in_epoch: usize,
    pub history: TrainHistory,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    pub final_val: Option<MetricsReport>,
    /// Highest-validation-mAP model, or the final one without validation.
    pub best_model: GenreClassifier<f32>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    model: GenreClassifier<f32>,
    train: &'a Dataset,
    val: Option<&'a Dataset>,
    state: TrainerState,
    order: Vec<usize>,
    order_epoch: Option<u64>,
    last_val: Option<MetricsReport>,
    best_model: Option<GenreClassifier<f32>>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, train: &'a Dataset, val: Option<&'a Dataset>) -> Result<Self> {
        cfg.validate()?;
        let model = GenreClassifier::new(cfg.model.clone(), SeededRng::derive_seed(cfg.seed, &[STREAM_INIT]))?;
        Self::with_model(cfg, model, TrainerState::default(), train, val)
    }

    /// Continues from a checkpoint written by a previous run. The model
    /// section of `cfg` must match the checkpoint; step limits may differ.
    pub fn resume(
        cfg: TrainConfig,
        checkpoint: &Path,
        train: &'a Dataset,
        val: Option<&'a Dataset>,
    ) -> Result<Self> {
        cfg.validate()?;
        let ck = load_checkpoint(checkpoint)?;
        if ck.model.config() != &cfg.model {
            return Err(Error::Config(format!(
                "{}: model configuration differs from the one being resumed",
                checkpoint.display()
            )));
        }
        let state: TrainerState = match ck.trainer {
            Some(v) => serde_json::from_value(v)
                .map_err(|e| Error::Config(format!("{}: bad trainer state: {e}", checkpoint.display())))?,
            None => {
                return Err(Error::Config(format!(
                    "{} has no trainer state to resume from",
                    checkpoint.display()
                )))
            }
        };
        Self::with_model(cfg, ck.model, state, train, val)
    }

    fn with_model(
        cfg: TrainConfig,
        model: GenreClassifier<f32>,
        state: TrainerState,
        train: &'a Dataset,
        val: Option<&'a Dataset>,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        Ok(Trainer {
            cfg,
            model,
            train,
            val,
            state,
            order: Vec::new(),
            order_epoch: None,
            last_val: None,
            best_model: None,
        })
    }

    pub fn model(&self) -> &GenreClassifier<f32> {
        &self.model
    }

    pub fn into_model(self) -> GenreClassifier<f32> {
        self.model
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn history(&self) -> &TrainHistory {
        &self.state.history
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.cfg.batch_size)
    }

    /// Total steps the configuration allows.
    pub fn step_budget(&self) -> u64 {
        let by_epochs = self.cfg.epochs as u64 * self.batches_per_epoch() as u64;
        self.cfg.max_steps.map_or(by_epochs, |m| m.min(by_epochs))
    }

    pub fn finished(&self) -> bool {
        self.state.step >= self.step_budget()
    }

    fn epoch_order(&mut self) -> &[usize] {
        if self.order_epoch != Some(self.state.epoch) {
            let mut order: Vec<usize> = (0..self.train.len()).collect();
            SeededRng::derive(self.cfg.seed, &[STREAM_EPOCH, self.state.epoch]).shuffle(&mut order);
            self.order = order;
            self.order_epoch = Some(self.state.epoch);
        }
        &self.order
    }

    /// One optimizer step. Returns the batch loss, or `None` when the step
    /// budget is exhausted.
    pub fn step(&mut self) -> Result<Option<f64>> {
        if self.finished() {
            return Ok(None);
        }
        let bs = self.cfg.batch_size;
        let start = self.state.batch_in_epoch * bs;
        let indices: Vec<usize> = {
            let order = self.epoch_order();
            order[start..(start + bs).min(order.len())].to_vec()
        };
        let records = self.train.records(&indices)?;
        let refs: Vec<_> = records.iter().collect();
        let batch = make_batch(&refs, &self.cfg.model.modalities)?;

        let step = self.state.step + 1;
        let mut g = Graph::new();
        let bound = self.model.params().bind(&mut g);
        let mut rng = SeededRng::derive(self.cfg.seed, &[STREAM_STEP, step]);
        let logits = self.model.forward(&mut g, &bound, &batch, &mut ForwardCtx::train(&mut rng))?;
        let loss = g.weighted_bce(logits, &batch.labels, self.cfg.model.pos_weight)?;
        let loss_value = g.value(loss).data()[0] as f64;
        let non_finite = |what: &str| {
            Error::Numeric(format!(
                "non-finite {what} at step {step} (epoch {}); batch ids: {}",
                self.state.epoch,
                batch.ids.join(", ")
            ))
        };
        if !loss_value.is_finite() {
            return Err(non_finite("loss"));
        }
        let mut raw = g.backward(loss)?;
        let mut grads = Gradients::collect(self.model.params(), &bound, &mut raw);
        if !grads.all_finite() {
            return Err(non_finite("gradient"));
        }
        clip_global_norm(&mut grads, self.cfg.clip_norm)?;
        adam_step(self.model.params_mut(), &grads, &self.cfg.optimizer)?;

        self.state.step = step;
        self.state.history.push(step, loss_value);
        self.state.batch_in_epoch += 1;
        if self.state.batch_in_epoch == self.batches_per_epoch() {
            self.state.batch_in_epoch = 0;
            self.state.epoch += 1;
        }
        debug!("step {step} loss {loss_value:.6}");
        Ok(Some(loss_value))
    }

    fn validation_due(&self) -> bool {
        match self.cfg.eval_interval {
            Some(k) => self.state.step % k == 0,
            None => self.state.batch_in_epoch == 0,
        }
    }

    /// Validates the current model, records the result, and writes
    /// checkpoints when a directory is configured.
    pub fn validate_now(&mut self) -> Result<Option<MetricsReport>> {
        let Some(val) = self.val else {
            return Ok(None);
        };
        let report = evaluate(&self.model, val, self.cfg.model.threshold)?.report;
        let improved = self.state.history.record_validation(ValSummary::from(&report));
        info!(
            "step {} val mAP {:.4} P {:.4} R {:.4}",
            self.state.step, report.mean_ap, report.macro_precision, report.macro_recall
        );
        if improved {
            self.best_model = Some(self.model.clone());
            if let Some(dir) = &self.cfg.checkpoint_dir {
                self.save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
        self.last_val = Some(report.clone());
        Ok(Some(report))
    }

    /// Writes the model, optimizer state and loop position.
    pub fn save(&self, path: &Path) -> Result<()> {
        let state = serde_json::to_value(&self.state)
            .map_err(|e| Error::Config(format!("cannot serialize trainer state: {e}")))?;
        save_checkpoint(path, &self.model, Some(&state))
    }

    /// Trains until the step budget is used up.
    pub fn run(&mut self) -> Result<TrainOutcome> {
        let mut validated_at = None;
        while self.step()?.is_some() {
            if self.validation_due() {
                self.validate_now()?;
                validated_at = Some(self.state.step);
                if let Some(dir) = &self.cfg.checkpoint_dir {
                    self.save(&dir.join(LAST_CHECKPOINT))?;
                }
            }
        }
        if validated_at != Some(self.state.step) && self.state.step > 0 {
            self.validate_now()?;
        }
        let mut best_checkpoint = None;
        let mut last_checkpoint = None;
        if let Some(dir) = &self.cfg.checkpoint_dir {
            let last = dir.join(LAST_CHECKPOINT);
            self.save(&last)?;
            let best = dir.join(BEST_CHECKPOINT);
            if self.val.is_none() {
                self.save(&best)?;
            }
            best_checkpoint = Some(best);
            last_checkpoint = Some(last);
        }
        Ok(TrainOutcome {
            history: self.state.history.clone(),
            final_val: self.last_val.clone(),
            best_model: self.best_model.clone().unwrap_or_else(|| self.model.clone()),
            best_checkpoint,
            last_checkpoint,
        })
    }
}
