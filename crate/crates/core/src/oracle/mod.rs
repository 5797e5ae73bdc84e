//! Oracles answer label requests for unlabeled samples.
//!
//! [`SimulatedOracle`] answers at once from the hidden truth.
//! [`RemoteOracle`] forwards requests to an [`OracleQueue`] that a human
//! drains through the HTTP service; its answers arrive whenever they arrive.
//!
//! Labels are 0-based class indices throughout, including on the wire.

mod queue;

use std::collections::{HashSet, VecDeque};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::datasets::HiddenTruth;
use crate::error::{Error, Result};

pub use queue::{
    Clock, ManualClock, OracleQueue, QueueConfig, RequestState, RequestView, RunState, RunStatus, SubmitError, SystemClock,
    Ticket,
};

/// What the labeler is shown for a sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    /// Grayscale pixels, row-major, 0 is black.
    Image { height: usize, width: usize, pixels: Vec<u8> },
    Point { x: f64, y: f64 },
}

impl Payload {
    /// Renders a model input: `[2]` becomes a point, `[h, w, 1]` an image
    /// with values in `[0, 1]` scaled to bytes.
    pub fn from_sample(shape: &[usize], data: &[f32]) -> Result<Self> {
        match *shape {
            [2] => Ok(Payload::Point {
                x: data[0] as f64,
                y: data[1] as f64,
            }),
            [height, width, 1] => Ok(Payload::Image {
                height,
                width,
                pixels: data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
            }),
            _ => Err(Error::Dimension(format!("no payload rendering for samples of shape {shape:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRequest {
    pub request_id: u64,
    pub sample_id: usize,
    pub payload: Payload,
    /// Normalized MC entropy of the sample when it was selected.
    pub entropy: f64,
    /// Current pseudo-label.
    pub suggestion: usize,
    pub iteration: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerSource {
    Simulated,
    Human,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleAnswer {
    pub request_id: u64,
    pub sample_id: usize,
    pub label: usize,
    /// Milliseconds since the Unix epoch.
    pub answered_at: u64,
    pub source: AnswerSource,
}

/// Everything that happened to outstanding requests since the last collect.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Collected {
    pub answers: Vec<OracleAnswer>,
    /// Request ids that timed out unanswered.
    pub expired: Vec<u64>,
}

pub trait Oracle {
    /// Hands requests over. Must not block on the answers.
    fn ask(&mut self, requests: Vec<OracleRequest>) -> Result<()>;

    /// Drains answers and expiries that arrived since the last call.
    fn collect(&mut self) -> Result<Collected>;

    /// Lowest request id not yet used by this oracle.
    fn next_request_id(&self) -> u64 {
        1
    }
}

pub(crate) fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Answers every request from the hidden truth table.
#[derive(Debug)]
pub struct SimulatedOracle {
    truth: HiddenTruth,
    seen: HashSet<u64>,
    ready: VecDeque<OracleAnswer>,
}

impl SimulatedOracle {
    pub fn new(truth: HiddenTruth) -> Self {
        Self {
            truth,
            seen: HashSet::new(),
            ready: VecDeque::new(),
        }
    }

    pub fn truth(&self) -> &HiddenTruth {
        &self.truth
    }

    /// The true label of the requested sample.
    pub fn simulated_answer(&mut self, request: &OracleRequest) -> Result<OracleAnswer> {
        if self.seen.contains(&request.request_id) {
            return Err(Error::Oracle(format!("duplicate request id {}", request.request_id)));
        }
        let label = self
            .truth
            .reveal(request.sample_id)
            .ok_or_else(|| Error::Lookup(format!("sample {} has no hidden label", request.sample_id)))?;
        self.seen.insert(request.request_id);
        Ok(OracleAnswer {
            request_id: request.request_id,
            sample_id: request.sample_id,
            label,
            answered_at: now_ms(),
            source: AnswerSource::Simulated,
        })
    }
}

impl Oracle for SimulatedOracle {
    fn ask(&mut self, requests: Vec<OracleRequest>) -> Result<()> {
        for r in &requests {
            let a = self.simulated_answer(r)?;
            self.ready.push_back(a);
        }
        Ok(())
    }

    fn collect(&mut self) -> Result<Collected> {
        Ok(Collected {
            answers: self.ready.drain(..).collect(),
            expired: Vec::new(),
        })
    }

    fn next_request_id(&self) -> u64 {
        self.seen.iter().max().map_or(1, |m| m + 1)
    }
}

/// An oracle backed by a shared queue that humans answer asynchronously.
#[derive(Clone, Debug)]
pub struct RemoteOracle {
    queue: OracleQueue,
}

impl RemoteOracle {
    pub fn new(queue: OracleQueue) -> Self {
        Self { queue }
    }

    pub fn queue(&self) -> &OracleQueue {
        &self.queue
    }
}

impl Oracle for RemoteOracle {
    fn ask(&mut self, requests: Vec<OracleRequest>) -> Result<()> {
        for r in requests {
            self.queue.enqueue(r)?;
        }
        Ok(())
    }

    fn collect(&mut self) -> Result<Collected> {
        Ok(Collected {
            answers: self.queue.poll_answers()?,
            expired: self.queue.take_expired(),
        })
    }

    fn next_request_id(&self) -> u64 {
        self.queue.next_request_id()
    }
}
