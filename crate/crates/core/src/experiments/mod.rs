//! Experiment configs, named presets and multi-run execution.

mod grid;
mod presets;

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};

pub use grid::{export_decision_grid, write_decision_grid, Bounds, GridPoint};
pub use presets::{preset, preset_names, preset_text};

use crate::datasets::{generate_yinyang, load_mnist_idx, make_pools, DataPools, Dataset, HiddenTruth, YinYangSample};
use crate::em::{self, JsonlReporter, LoopConfig, Reporter};
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::oracle::{Oracle, SimulatedOracle};
use crate::rng::{derive_seed, Rng};

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Freshly drawn toy data for every run; validation is a separate draw.
    Yinyang {
        train_per_class: usize,
        validation_per_class: usize,
        labeled: usize,
        balanced: bool,
    },
    /// The IDX files in `dir`; the training files form the pools and the
    /// test files the validation set.
    Mnist {
        dir: PathBuf,
        labeled: usize,
        balanced: bool,
        /// Caps the unlabeled pool at a random subset of this size.
        #[serde(default)]
        pool_size: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleConfig {
    Simulated,
    /// A human answers through the HTTP service.
    Remote {
        bind: String,
        /// Seconds before an unanswered request expires.
        #[serde(default)]
        timeout_secs: Option<u64>,
        #[serde(default)]
        journal: Option<PathBuf>,
        #[serde(default)]
        token: Option<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// A named architecture, see [`ModelSpec::named`].
    pub model: String,
    pub runs: usize,
    /// Master seed; run `k` uses `derive_seed(seed, k)`.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(rename = "loop")]
    pub loop_cfg: LoopConfig,
    pub oracle: OracleConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        ModelSpec::named(&self.model)?;
        self.loop_cfg.validate()
    }

    /// Fails when a referenced input directory is missing. Kept apart from
    /// [`validate`](Self::validate) so presets parse without the data.
    pub fn check_paths(&self) -> Result<()> {
        if let DatasetConfig::Mnist { dir, .. } = &self.dataset {
            if !dir.is_dir() {
                return Err(Error::Config(format!("dataset directory {} does not exist", dir.display())));
            }
        }
        Ok(())
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        derive_seed(self.seed, run as u64)
    }

    /// Pools, hidden truth and validation set for one run.
    pub fn prepare_data(&self, run_seed: u64) -> Result<PreparedData> {
        let rng = Rng::from_seed(run_seed);
        match &self.dataset {
            DatasetConfig::Yinyang {
                train_per_class,
                validation_per_class,
                labeled,
                balanced,
            } => {
                let train = YinYangSample::to_dataset(&generate_yinyang(*train_per_class, &mut rng.stream(1))?)?;
                let validation =
                    YinYangSample::to_dataset(&generate_yinyang(*validation_per_class, &mut rng.stream(2))?)?;
                let (pools, truth) = make_pools(&train, *labeled, *balanced, &mut rng.stream(3))?;
                Ok(PreparedData {
                    pools,
                    truth,
                    validation,
                })
            }
            DatasetConfig::Mnist {
                dir,
                labeled,
                balanced,
                pool_size,
            } => {
                let train = load_mnist_idx(&dir.join(MNIST_TRAIN_IMAGES), &dir.join(MNIST_TRAIN_LABELS))?;
                let validation = load_mnist_idx(&dir.join(MNIST_TEST_IMAGES), &dir.join(MNIST_TEST_LABELS))?;
                let (pools, truth) = make_pools(&train, *labeled, *balanced, &mut rng.stream(3))?;
                let (pools, truth) = match pool_size {
                    Some(n) => cap_pool(&train, pools, *n, &mut rng.stream(4))?,
                    None => (pools, truth),
                };
                Ok(PreparedData {
                    pools,
                    truth,
                    validation,
                })
            }
        }
    }
}

/// Keeps a random `size`-subset of the unlabeled pool, in pool order.
fn cap_pool(data: &Dataset, pools: DataPools, size: usize, rng: &mut Rng) -> Result<(DataPools, HiddenTruth)> {
    let unl = pools.unlabeled();
    if size >= unl.len() {
        let truth = HiddenTruth::new(unl.iter().map(|&i| (i, data.labels[i])).collect());
        return Ok((pools, truth));
    }
    let mut keep: Vec<usize> = index::sample(rng, unl.len(), size).into_iter().map(|j| unl[j]).collect();
    keep.sort_unstable();
    let truth = HiddenTruth::new(keep.iter().map(|&i| (i, data.labels[i])).collect());
    let capped = DataPools::new(pools.inputs().clone(), pools.classes(), pools.labeled().to_vec(), keep)?;
    Ok((capped, truth))
}

#[derive(Debug)]
pub struct PreparedData {
    pub pools: DataPools,
    pub truth: HiddenTruth,
    pub validation: Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    /// `None` when the run failed.
    pub final_val_acc: Option<f64>,
    pub n_labeled: Option<usize>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub runs: Vec<RunRecord>,
    pub completed: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation; `None` with fewer than two completed runs.
    pub std: Option<f64>,
}

/// Mean and sample standard deviation, in input order.
pub fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some(var.sqrt()))
}

fn na(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| x.to_string())
}

pub fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join(&cfg.name)
}

/// Runs one repetition with the simulated oracle, writing its JSONL report
/// and checkpoint into `dir`.
pub fn run_once(cfg: &ExperimentConfig, run: usize, dir: &Path) -> Result<em::RunOutput> {
    run_once_with(cfg, run, dir, &mut |_| Ok(()), None)
}

/// [`run_once`] with an extra reporter and an optional oracle in place of
/// the simulated one.
pub fn run_once_with(
    cfg: &ExperimentConfig,
    run: usize,
    dir: &Path,
    extra: &mut dyn FnMut(&em::IterationReport) -> Result<()>,
    oracle: Option<&mut dyn Oracle>,
) -> Result<em::RunOutput> {
    struct Hook<'a>(&'a mut dyn FnMut(&em::IterationReport) -> Result<()>);
    impl Reporter for Hook<'_> {
        fn report(&mut self, r: &em::IterationReport) -> Result<()> {
            (self.0)(r)
        }
    }
    let seed = cfg.run_seed(run);
    let data = cfg.prepare_data(seed)?;
    let mut loop_cfg = cfg.loop_cfg.clone();
    loop_cfg.seed = seed;
    let spec = ModelSpec::named(&cfg.model)?;
    let report_path = dir.join(format!("run-{run}.jsonl"));
    let file = File::create(&report_path).map_err(|e| Error::io(&report_path, e))?;
    let mut reporter = (JsonlReporter(BufWriter::new(file)), Hook(extra));
    let checkpoint = dir.join(format!("run-{run}.checkpoint.json"));
    let mut simulated;
    let oracle: &mut dyn Oracle = match oracle {
        Some(o) => o,
        None => {
            simulated = SimulatedOracle::new(data.truth.clone());
            &mut simulated
        }
    };
    em::run(
        &loop_cfg,
        spec,
        data.pools,
        &data.validation,
        Some(&data.truth),
        oracle,
        &mut reporter,
        Some(&checkpoint),
    )
}

/// Executes every run of `cfg` with the simulated oracle and writes
/// `runs.csv` and `summary.csv` next to the per-run artifacts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Summary> {
    run_experiment_with(cfg, &mut |_, _| {})
}

/// [`run_experiment`] calling `progress(run, report)` after every iteration.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    progress: &mut dyn FnMut(usize, &em::IterationReport),
) -> Result<Summary> {
    cfg.validate()?;
    cfg.check_paths()?;
    if !matches!(cfg.oracle, OracleConfig::Simulated) {
        return Err(Error::Config(
            "run_experiment drives the simulated oracle; serve remote runs through the oracle service".into(),
        ));
    }
    let dir = run_dir(cfg);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut records = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs {
        let seed = cfg.run_seed(run);
        let mut hook = |r: &em::IterationReport| {
            progress(run, r);
            Ok(())
        };
        records.push(match run_once_with(cfg, run, &dir, &mut hook, None) {
            Ok(out) => RunRecord {
                run,
                seed,
                final_val_acc: out.reports.last().map(|r| r.val_acc),
                n_labeled: Some(out.pools.labeled().len()),
                error: None,
            },
            Err(e) => RunRecord {
                run,
                seed,
                final_val_acc: None,
                n_labeled: None,
                error: Some(e.to_string()),
            },
        });
    }
    let finals: Vec<f64> = records.iter().filter_map(|r| r.final_val_acc).collect();
    let (mean, std) = mean_std(&finals);
    let summary = Summary {
        name: cfg.name.clone(),
        completed: finals.len(),
        runs: records,
        mean,
        std,
    };
    write_summary(&summary, &dir)?;
    Ok(summary)
}

pub fn write_summary(summary: &Summary, dir: &Path) -> Result<()> {
    let mut runs = String::from("run,seed,status,final_val_acc,n_labeled,error\n");
    for r in &summary.runs {
        let _ = writeln!(
            runs,
            "{},{},{},{},{},{}",
            r.run,
            r.seed,
            if r.error.is_none() { "completed" } else { "failed" },
            na(r.final_val_acc),
            r.n_labeled.map_or_else(|| "NA".into(), |n| n.to_string()),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], " ")
        );
    }
    let path = dir.join("runs.csv");
    fs::write(&path, runs).map_err(|e| Error::io(&path, e))?;
    let text = format!(
        "experiment,runs,completed,mean_val_acc,std_val_acc\n{},{},{},{},{}\n",
        summary.name,
        summary.runs.len(),
        summary.completed,
        na(summary.mean),
        na(summary.std)
    );
    let path = dir.join("summary.csv");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
