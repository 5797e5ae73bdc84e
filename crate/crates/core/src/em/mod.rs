//! The active EM loop.
//!
//! Each iteration applies oracle answers that have arrived, infers
//! MC-dropout predictions on the unlabeled pool, admits pseudo-labeled
//! samples, acquires new labels on schedule and trains one epoch on the
//! upsampled ground truth plus the admitted pseudo-labels.

mod config;
mod report;
mod select;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::time::Duration;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use config::{AcquisitionPolicy, InitialSchedule, LoopConfig, StagnationMetric, ThresholdPolicy};
pub use report::{Collector, CsvReporter, IterationReport, JsonlReporter, Reporter, StatusReporter, CSV_HEADER};
pub use select::{admit, select_above_average, select_max_entropy};

use crate::datasets::{augment, DataPools, Dataset, HiddenTruth, Inputs, LabelSource};
use crate::error::{Error, Result};
use crate::mc::{ground_truth_threshold, mc_pool, predict_pool};
use crate::models::{Checkpoint, Model, ModelSpec, Network};
use crate::oracle::{AnswerSource, Oracle, OracleRequest, Payload};
use crate::rng::{derive_seed, Rng};

// child streams of the run seed
const MODEL_INIT: u64 = 0;
const INITIAL_TRAINING: u64 = 1;
const ITERATION: u64 = 2;

// child streams of one iteration
const MC_UNLABELED: u64 = 0;
const MC_THRESHOLD: u64 = 1;
const MC_LABELED: u64 = 2;
const ACQUISITION: u64 = 3;
const EPOCH: u64 = 4;

const ORACLE_POLL: Duration = Duration::from_millis(100);

/// A ground-truth label that joined the labeled pool during the run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcquiredLabel {
    pub iteration: usize,
    pub request_id: u64,
    pub sample_id: usize,
    pub label: usize,
    pub source: LabelSource,
}

/// A pseudo-labeled sample admitted to the current epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoEntry {
    pub id: usize,
    pub label: usize,
    pub entropy: f64,
}

/// The model, the pools and the bookkeeping of one run.
#[derive(Debug)]
pub struct Learner<'a> {
    cfg: LoopConfig,
    net: Network,
    pools: DataPools,
    validation: &'a Dataset,
    truth: Option<&'a HiddenTruth>,
    root: Rng,
    /// Outstanding request id to sample id and issuing iteration.
    pending: BTreeMap<u64, (usize, usize)>,
    next_request: Option<u64>,
    iteration: usize,
    acquired: Vec<AcquiredLabel>,
    pseudo: Vec<PseudoEntry>,
}

impl<'a> Learner<'a> {
    /// `truth` is only used for the pseudo-label error diagnostic.
    pub fn new(
        cfg: LoopConfig,
        spec: ModelSpec,
        pools: DataPools,
        validation: &'a Dataset,
        truth: Option<&'a HiddenTruth>,
    ) -> Result<Self> {
        cfg.validate()?;
        let net = Network::new(spec, derive_seed(cfg.seed, MODEL_INIT))?;
        Self::with_network(cfg, net, pools, validation, truth)
    }

    pub fn with_network(
        cfg: LoopConfig,
        net: Network,
        pools: DataPools,
        validation: &'a Dataset,
        truth: Option<&'a HiddenTruth>,
    ) -> Result<Self> {
        cfg.validate()?;
        let shape = &net.model.spec().input_shape;
        for (what, inputs, classes) in [
            ("pool", pools.inputs(), pools.classes()),
            ("validation", &validation.inputs, validation.classes),
        ] {
            if inputs.sample_shape() != &shape[..] {
                return Err(Error::Dimension(format!(
                    "{what} samples have shape {:?}, the model expects {shape:?}",
                    inputs.sample_shape()
                )));
            }
            if classes != net.model.num_classes() {
                return Err(Error::Config(format!(
                    "{what} has {classes} classes, the model {}",
                    net.model.num_classes()
                )));
            }
        }
        let root = Rng::from_seed(cfg.seed);
        Ok(Self {
            cfg,
            net,
            pools,
            validation,
            truth,
            root,
            pending: BTreeMap::new(),
            next_request: None,
            iteration: 0,
            acquired: Vec::new(),
            pseudo: Vec::new(),
        })
    }

    pub fn config(&self) -> &LoopConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model<f32> {
        &self.net.model
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn pools(&self) -> &DataPools {
        &self.pools
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn acquired(&self) -> &[AcquiredLabel] {
        &self.acquired
    }

    /// Pseudo-labeled samples of the latest epoch.
    pub fn pseudo(&self) -> &[PseudoEntry] {
        &self.pseudo
    }

    /// Sample ids with an unanswered oracle request.
    pub fn pending_samples(&self) -> Vec<usize> {
        self.pending.values().map(|p| p.0).collect()
    }

    pub fn into_parts(self) -> (Network, DataPools, Vec<AcquiredLabel>) {
        (self.net, self.pools, self.acquired)
    }

    fn inputs(&self) -> &Inputs {
        self.pools.inputs()
    }

    /// Eval-mode accuracy on the validation set.
    pub fn validation_accuracy(&self) -> Result<f64> {
        let ids: Vec<usize> = (0..self.validation.len()).collect();
        accuracy(&self.net.model, &self.validation.inputs, &ids, &self.validation.labels)
    }

    /// Eval-mode accuracy on the labeled pool.
    pub fn train_accuracy(&self) -> Result<f64> {
        let ids = self.pools.labeled_ids();
        let labels: Vec<usize> = self.pools.labeled().iter().map(|e| e.class).collect();
        accuracy(&self.net.model, self.inputs(), &ids, &labels)
    }

    fn ground_truth(&self, copies: usize) -> Vec<(usize, usize, bool)> {
        let mut v = Vec::with_capacity(self.pools.labeled().len() * copies);
        for _ in 0..copies {
            v.extend(self.pools.labeled().iter().map(|e| (e.id, e.class, true)));
        }
        v
    }

    /// Fits the initial model to the labeled pool and reports it as
    /// iteration 0.
    pub fn initial_train(&mut self) -> Result<IterationReport> {
        if self.pools.labeled().is_empty() {
            return Err(Error::Config("initial training needs at least one labeled sample".into()));
        }
        let rng = self.root.stream(INITIAL_TRAINING);
        let loss = match self.cfg.initial {
            InitialSchedule::Presentations { count } => {
                let entries = self.ground_truth(count);
                self.train_epoch(entries, &rng.stream(0))?
            }
            InitialSchedule::Stagnation {
                metric,
                patience,
                min_delta,
                max_epochs,
            } => {
                let mut best = f64::NEG_INFINITY;
                let mut stale = 0;
                let mut loss = 0.0;
                for epoch in 0..max_epochs {
                    let entries = self.ground_truth(1);
                    loss = self.train_epoch(entries, &rng.stream(epoch as u64))?;
                    let score = match metric {
                        StagnationMetric::Train => self.train_accuracy()?,
                        StagnationMetric::Validation => self.validation_accuracy()?,
                    };
                    if score >= best + min_delta {
                        best = score;
                        stale = 0;
                    } else {
                        stale += 1;
                        if stale >= patience {
                            break;
                        }
                    }
                }
                loss
            }
        };
        Ok(IterationReport {
            iteration: 0,
            val_acc: self.validation_accuracy()?,
            n_labeled: self.pools.labeled().len(),
            n_unlabeled: self.pools.unlabeled().len(),
            n_pseudo: 0,
            pseudo_err: None,
            theta: None,
            max_admitted_entropy: None,
            requested: 0,
            acquired: 0,
            pending: self.pending.len(),
            oracle_error: None,
            train_loss: Some(loss),
            train_acc: Some(self.train_accuracy()?),
        })
    }

    /// Moves answered samples into the labeled pool and forgets expired
    /// requests. Returns how many labels joined.
    fn apply_answers(&mut self, oracle: &mut dyn Oracle, oracle_error: &mut Option<String>) -> Result<usize> {
        let collected = match oracle.collect() {
            Ok(c) => c,
            Err(e) => {
                *oracle_error = Some(e.to_string());
                return Ok(0);
            }
        };
        for id in collected.expired {
            self.pending.remove(&id);
        }
        let mut joined = 0;
        for a in collected.answers {
            // answers to unknown or already applied requests are dropped
            let Some((sample, _)) = self.pending.remove(&a.request_id) else { continue };
            if sample != a.sample_id {
                return Err(Error::Oracle(format!(
                    "answer to request {} names sample {}, expected {sample}",
                    a.request_id, a.sample_id
                )));
            }
            let source = match a.source {
                AnswerSource::Simulated => LabelSource::Simulated,
                AnswerSource::Human => LabelSource::Human,
            };
            self.pools.acquire(sample, a.label, source)?;
            self.acquired.push(AcquiredLabel {
                iteration: self.iteration,
                request_id: a.request_id,
                sample_id: sample,
                label: a.label,
                source,
            });
            joined += 1;
        }
        Ok(joined)
    }

    /// One EM iteration.
    pub fn em_iteration(&mut self, oracle: &mut dyn Oracle) -> Result<IterationReport> {
        self.iteration += 1;
        let it = self.iteration;
        let rng = self.root.stream2(ITERATION, it as u64);
        let mut oracle_error = None;
        let mut joined = self.apply_answers(oracle, &mut oracle_error)?;
        if let Some(lag) = self.cfg.max_oracle_lag {
            while oracle_error.is_none() && self.pending.values().any(|&(_, issued)| it > issued + lag) {
                std::thread::sleep(ORACLE_POLL);
                joined += self.apply_answers(oracle, &mut oracle_error)?;
            }
        }

        let unlabeled = self.pools.unlabeled().to_vec();
        let dists = mc_pool(
            &self.net.model,
            self.inputs(),
            &unlabeled,
            self.cfg.mc.passes_unlabeled,
            &rng.stream(MC_UNLABELED),
        )?;
        let theta = match self.cfg.threshold_policy {
            ThresholdPolicy::AllData => Some(1.0),
            ThresholdPolicy::StepWise => Some(ground_truth_threshold(
                &self.net.model,
                self.inputs(),
                &self.pools.labeled_ids(),
                &self.cfg.mc,
                &rng.stream(MC_THRESHOLD),
            )?),
            ThresholdPolicy::LabeledOnly => None,
        };
        let mut pseudo = admit(&unlabeled, &dists, self.cfg.threshold_policy, theta.unwrap_or(0.0));

        let mut requested = 0;
        if self.cfg.acquires_at(it) {
            let waiting: HashSet<usize> = self.pending.values().map(|p| p.0).collect();
            let candidates: Vec<usize> = (0..unlabeled.len()).filter(|&j| !waiting.contains(&unlabeled[j])).collect();
            let entropies: Vec<f64> = candidates.iter().map(|&j| dists[j].entropy()).collect();
            let k = self.cfg.acquire_count;
            let picks = match self.cfg.acquisition_policy {
                AcquisitionPolicy::AboveAverage => {
                    let labeled = mc_pool(
                        &self.net.model,
                        self.inputs(),
                        &self.pools.labeled_ids(),
                        self.cfg.mc.passes_unlabeled,
                        &rng.stream(MC_LABELED),
                    )?;
                    let lab_h: Vec<f64> = labeled.iter().map(|d| d.entropy()).collect();
                    select_above_average(&entropies, &lab_h, k, &mut rng.stream(ACQUISITION))
                }
                _ => select_max_entropy(&entropies, k),
            };
            let mut next = match self.next_request {
                Some(n) => n,
                None => oracle.next_request_id(),
            };
            let mut requests = Vec::with_capacity(picks.len());
            for p in picks {
                let j = candidates[p];
                let id = unlabeled[j];
                requests.push(OracleRequest {
                    request_id: next,
                    sample_id: id,
                    payload: Payload::from_sample(self.inputs().sample_shape(), self.inputs().get(id))?,
                    entropy: entropies[p],
                    suggestion: dists[j].pseudo_label(),
                    iteration: it,
                });
                next += 1;
            }
            self.next_request = Some(next);
            let issued: Vec<(u64, (usize, usize))> = requests.iter().map(|r| (r.request_id, (r.sample_id, it))).collect();
            match oracle.ask(requests) {
                Ok(()) => {
                    requested = issued.len();
                    self.pending.extend(issued);
                    joined += self.apply_answers(oracle, &mut oracle_error)?;
                }
                Err(e) => oracle_error = Some(e.to_string()),
            }
        }
        let still_unlabeled: HashSet<usize> = self.pools.unlabeled().iter().copied().collect();
        pseudo.retain(|(id, _, _)| still_unlabeled.contains(id));

        let mut entries = self.ground_truth(self.cfg.upsample_factor);
        entries.extend(pseudo.iter().map(|&(id, label, _)| (id, label, false)));
        let loss = self.train_epoch(entries, &rng.stream(EPOCH))?;

        let pairs: Vec<(usize, usize)> = pseudo.iter().map(|&(id, l, _)| (id, l)).collect();
        self.pseudo = pseudo
            .iter()
            .map(|&(id, label, entropy)| PseudoEntry { id, label, entropy })
            .collect();
        Ok(IterationReport {
            iteration: it,
            val_acc: self.validation_accuracy()?,
            n_labeled: self.pools.labeled().len(),
            n_unlabeled: self.pools.unlabeled().len(),
            n_pseudo: pairs.len(),
            pseudo_err: self.truth.and_then(|t| t.error_rate(&pairs)),
            theta,
            max_admitted_entropy: self.pseudo.iter().map(|p| p.entropy).reduce(f64::max),
            requested,
            acquired: joined,
            pending: self.pending.len(),
            oracle_error,
            train_loss: Some(loss),
            train_acc: None,
        })
    }

    /// One shuffled pass over `(id, class, is_ground_truth)` entries.
    /// Returns the mean training loss.
    fn train_epoch(&mut self, mut entries: Vec<(usize, usize, bool)>, rng: &Rng) -> Result<f64> {
        entries.shuffle(&mut rng.stream(0));
        let mut dropout = rng.stream(1);
        let mut warp = rng.stream(2);
        let inputs = self.pools.inputs().clone();
        let shape = inputs.sample_shape().to_vec();
        let augment_images = self.cfg.augment && shape.len() == 3;
        let width = inputs.width();
        let mut total = 0.0;
        let mut ids = Vec::with_capacity(self.cfg.batch_size);
        let mut targets = Vec::with_capacity(self.cfg.batch_size);
        for chunk in entries.chunks(self.cfg.batch_size) {
            ids.clear();
            targets.clear();
            ids.extend(chunk.iter().map(|e| e.0));
            targets.extend(chunk.iter().map(|e| e.1));
            let mut batch = inputs.batch(&ids)?;
            if augment_images {
                let hwc = [shape[0], shape[1], shape[2]];
                for (row, e) in chunk.iter().enumerate().filter(|(_, e)| e.2) {
                    let warped = augment(inputs.get(e.0), hwc, &mut warp);
                    batch.data_mut()[row * width..(row + 1) * width].copy_from_slice(&warped);
                }
            }
            let loss = self
                .net
                .model
                .train_step(&mut self.net.optimizer, &batch, &targets, &mut dropout)?;
            total += loss * chunk.len() as f64;
        }
        Ok(if entries.is_empty() { 0.0 } else { total / entries.len() as f64 })
    }
}

fn accuracy(model: &Model<f32>, inputs: &Inputs, ids: &[usize], labels: &[usize]) -> Result<f64> {
    if ids.is_empty() {
        return Ok(0.0);
    }
    let dists = predict_pool(model, inputs, ids)?;
    let hits = dists.iter().zip(labels).filter(|(d, &l)| d.pseudo_label() == l).count();
    Ok(hits as f64 / ids.len() as f64)
}

/// Everything a finished run leaves behind.
#[derive(Debug)]
pub struct RunOutput {
    pub reports: Vec<IterationReport>,
    pub network: Network,
    pub pools: DataPools,
    pub acquired: Vec<AcquiredLabel>,
}

/// Initial training followed by `cfg.iterations` EM iterations.
///
/// With `checkpoint`, the final model is written there. If an iteration
/// fails, the model as it was before that iteration is written instead and
/// the error is returned.
#[allow(clippy::too_many_arguments)]
pub fn run(
    cfg: &LoopConfig,
    spec: ModelSpec,
    pools: DataPools,
    validation: &Dataset,
    truth: Option<&HiddenTruth>,
    oracle: &mut dyn Oracle,
    reporter: &mut dyn Reporter,
    checkpoint: Option<&Path>,
) -> Result<RunOutput> {
    let mut learner = Learner::new(cfg.clone(), spec, pools, validation, truth)?;
    let mut reports = Vec::with_capacity(cfg.iterations + 1);
    let first = learner.initial_train()?;
    reporter.report(&first)?;
    reports.push(first);
    for _ in 0..cfg.iterations {
        let snapshot = learner.model().clone();
        match learner.em_iteration(oracle) {
            Ok(r) => {
                reporter.report(&r)?;
                reports.push(r);
            }
            Err(e) => {
                if let Some(path) = checkpoint {
                    Checkpoint::save(&snapshot, path)?;
                }
                return Err(e);
            }
        }
    }
    if let Some(path) = checkpoint {
        Checkpoint::save(learner.model(), path)?;
    }
    let (network, pools, acquired) = learner.into_parts();
    Ok(RunOutput {
        reports,
        network,
        pools,
        acquired,
    })
}
