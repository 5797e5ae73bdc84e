use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mc::McConfig;

/// Which unlabeled samples enter the training epoch with their pseudo-label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// Every unlabeled sample (`θ = 1`).
    AllData,
    /// Samples whose MC entropy is below the labeled-pool mean `θ`.
    StepWise,
    /// None: train on ground truth only.
    LabeledOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionPolicy {
    MaxEntropy,
    /// Uniformly among samples with above-average entropy.
    AboveAverage,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StagnationMetric {
    /// Eval-mode accuracy on the labeled pool.
    Train,
    Validation,
}

/// How the initial model is fitted to the labeled pool.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSchedule {
    /// Every labeled sample is shown `count` times, in shuffled mini-batches.
    Presentations { count: usize },
    /// Epochs over the labeled pool until `metric` has not improved
    /// by `min_delta` for `patience` epochs, or `max_epochs` is reached.
    Stagnation {
        metric: StagnationMetric,
        patience: usize,
        min_delta: f64,
        max_epochs: usize,
    },
}

impl InitialSchedule {
    pub fn stagnation(metric: StagnationMetric) -> Self {
        InitialSchedule::Stagnation {
            metric,
            patience: 20,
            min_delta: 0.001,
            max_epochs: 5000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    pub threshold_policy: ThresholdPolicy,
    pub acquisition_policy: AcquisitionPolicy,
    /// Labels requested per acquisition event.
    pub acquire_count: usize,
    /// Acquisition fires at 1-based iterations divisible by this.
    pub acquire_every: usize,
    pub iterations: usize,
    /// Copies of each ground-truth sample per epoch.
    pub upsample_factor: usize,
    pub mc: McConfig,
    pub batch_size: usize,
    /// Experiments replace this with the per-run seed.
    #[serde(default)]
    pub seed: u64,
    /// Random rotation and scaling of ground-truth images during training.
    #[serde(default)]
    pub augment: bool,
    pub initial: InitialSchedule,
    /// Iterations the loop may run ahead of an unanswered request before it
    /// waits for the answer or its expiry. `None` never waits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_oracle_lag: Option<usize>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            threshold_policy: ThresholdPolicy::AllData,
            acquisition_policy: AcquisitionPolicy::MaxEntropy,
            acquire_count: 10,
            acquire_every: 10,
            iterations: 200,
            upsample_factor: 20,
            mc: McConfig::default(),
            batch_size: 256,
            seed: 0,
            augment: false,
            initial: InitialSchedule::Presentations { count: 2000 },
            max_oracle_lag: None,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        self.mc.validate()?;
        if self.acquire_every == 0 {
            return Err(Error::Config("acquire_every must be at least 1".into()));
        }
        if self.upsample_factor == 0 {
            return Err(Error::Config("upsample_factor must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.acquisition_policy != AcquisitionPolicy::None && self.acquire_count == 0 {
            return Err(Error::Config("acquire_count must be at least 1 when acquiring".into()));
        }
        match self.initial {
            InitialSchedule::Presentations { count: 0 } => {
                Err(Error::Config("the initial schedule needs at least one presentation".into()))
            }
            InitialSchedule::Stagnation {
                patience, max_epochs, min_delta, ..
            } if patience == 0 || max_epochs == 0 || !(min_delta >= 0.0) => Err(Error::Config(
                "stagnation needs positive patience and max_epochs and a non-negative min_delta".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Labels the oracle is asked for over the whole run.
    pub fn label_budget(&self) -> usize {
        match self.acquisition_policy {
            AcquisitionPolicy::None => 0,
            _ => self.iterations / self.acquire_every * self.acquire_count,
        }
    }

    /// Whether the 1-based `iteration` is an acquisition event.
    pub fn acquires_at(&self, iteration: usize) -> bool {
        self.acquisition_policy != AcquisitionPolicy::None && iteration.is_multiple_of(self.acquire_every)
    }
}
