use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::oracle::{OracleQueue, RunState};

/// State after one iteration. Iteration 0 describes the initial model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub val_acc: f64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_pseudo: usize,
    /// Pseudo-label error rate against the hidden truth, when available.
    pub pseudo_err: Option<f64>,
    /// Admission threshold; `None` when nothing is admitted.
    pub theta: Option<f64>,
    /// Largest entropy among admitted samples.
    pub max_admitted_entropy: Option<f64>,
    /// Labels requested from the oracle this iteration.
    pub requested: usize,
    /// Labels that joined the labeled pool this iteration.
    pub acquired: usize,
    /// Requests still waiting for an answer.
    pub pending: usize,
    /// Set when the oracle could not be reached.
    pub oracle_error: Option<String>,
    pub train_loss: Option<f64>,
    /// Eval-mode accuracy on the labeled pool; reported for iteration 0.
    pub train_acc: Option<f64>,
}

pub trait Reporter {
    fn report(&mut self, r: &IterationReport) -> Result<()>;
}

/// Keeps every report in memory.
#[derive(Clone, Debug, Default)]
pub struct Collector(pub Vec<IterationReport>);

impl Reporter for Collector {
    fn report(&mut self, r: &IterationReport) -> Result<()> {
        self.0.push(r.clone());
        Ok(())
    }
}

/// One JSON object per line.
#[derive(Debug)]
pub struct JsonlReporter<W>(pub W);

impl<W: Write> Reporter for JsonlReporter<W> {
    fn report(&mut self, r: &IterationReport) -> Result<()> {
        let mut line = serde_json::to_vec(r)?;
        line.push(b'\n');
        self.0.write_all(&line).map_err(|e| crate::Error::io("report", e))?;
        self.0.flush().map_err(|e| crate::Error::io("report", e))
    }
}

pub const CSV_HEADER: &str = "iteration,val_acc,n_labeled,n_pseudo,pseudo_err,theta";

/// `iteration,val_acc,n_labeled,n_pseudo,pseudo_err,theta`; missing values
/// are written as `NA`.
#[derive(Debug)]
pub struct CsvReporter<W> {
    out: W,
    header_written: bool,
}

impl<W: Write> CsvReporter<W> {
    pub fn new(out: W) -> Self {
        Self {
            out,
            header_written: false,
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl<W: Write> Reporter for CsvReporter<W> {
    fn report(&mut self, r: &IterationReport) -> Result<()> {
        let io = |e| crate::Error::io("report", e);
        if !self.header_written {
            writeln!(self.out, "{CSV_HEADER}").map_err(io)?;
            self.header_written = true;
        }
        writeln!(
            self.out,
            "{},{},{},{},{},{}",
            r.iteration,
            r.val_acc,
            r.n_labeled,
            r.n_pseudo,
            opt(r.pseudo_err),
            opt(r.theta)
        )
        .map_err(io)?;
        self.out.flush().map_err(io)
    }
}

/// Mirrors progress into an oracle queue's run status.
#[derive(Clone, Debug)]
pub struct StatusReporter(pub OracleQueue);

impl Reporter for StatusReporter {
    fn report(&mut self, r: &IterationReport) -> Result<()> {
        self.0.update_status(|s| {
            s.state = RunState::Running;
            s.iteration = r.iteration;
            s.val_acc = Some(r.val_acc);
            s.theta = r.theta;
            s.n_labeled = r.n_labeled;
            s.labels_acquired += r.acquired;
        });
        Ok(())
    }
}

impl<R: Reporter + ?Sized> Reporter for &mut R {
    fn report(&mut self, r: &IterationReport) -> Result<()> {
        (**self).report(r)
    }
}

impl<R: Reporter> Reporter for Vec<R> {
    fn report(&mut self, r: &IterationReport) -> Result<()> {
        self.iter_mut().try_for_each(|x| x.report(r))
    }
}

impl<A: Reporter, B: Reporter> Reporter for (A, B) {
    fn report(&mut self, r: &IterationReport) -> Result<()> {
        self.0.report(r)?;
        self.1.report(r)
    }
}
