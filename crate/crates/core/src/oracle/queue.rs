//! The request queue between a training run and human labelers.
//!
//! One producer enqueues, any number of clients answer. Each request is
//! answered at most once; unanswered requests expire after the configured
//! timeout. With a journal path every event is appended as one JSON line
//! and synced before the call returns, and reopening the queue replays it.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{AnswerSource, OracleAnswer, OracleRequest};
use crate::error::{Error, Result};

pub trait Clock: Send + Sync + fmt::Debug {
    /// Milliseconds since the Unix epoch.
    fn now_ms(&self) -> u64;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        super::now_ms()
    }
}

/// A clock that only moves when told to.
#[derive(Clone, Debug, Default)]
pub struct ManualClock(Arc<AtomicU64>);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self(Arc::new(AtomicU64::new(start_ms)))
    }

    pub fn advance(&self, by: Duration) {
        self.0.fetch_add(by.as_millis() as u64, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Clone, Debug)]
pub struct QueueConfig {
    pub run_id: String,
    pub classes: usize,
    /// `None` keeps requests open forever.
    pub timeout: Option<Duration>,
    pub journal: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestState {
    Pending,
    Answered,
    Expired,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ticket {
    pub request_id: u64,
    /// `None` when requests never expire.
    pub expires_at: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Starting,
    Running,
    Completed,
    Failed,
}

/// Progress of the run that owns the queue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub run_id: String,
    pub state: RunState,
    pub iteration: usize,
    pub iterations: usize,
    pub val_acc: Option<f64>,
    pub theta: Option<f64>,
    pub n_labeled: usize,
    pub labels_acquired: usize,
    pub labels_budget: usize,
    pub pending: usize,
}

/// Why an answer was refused.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SubmitError {
    UnknownRequest(u64),
    AlreadyAnswered(u64),
    Expired(u64),
    InvalidLabel { label: usize, classes: usize },
    Storage(String),
}

impl fmt::Display for SubmitError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubmitError::UnknownRequest(id) => write!(f, "request {id} does not exist"),
            SubmitError::AlreadyAnswered(id) => write!(f, "request {id} was already answered"),
            SubmitError::Expired(id) => write!(f, "request {id} has expired"),
            SubmitError::InvalidLabel { label, classes } => write!(f, "label {label} outside 0..{classes}"),
            SubmitError::Storage(m) => write!(f, "answer could not be stored: {m}"),
        }
    }
}

impl std::error::Error for SubmitError {}

/// A request as listed to clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestView {
    #[serde(flatten)]
    pub request: OracleRequest,
    pub state: RequestState,
    pub issued_at: u64,
    pub expires_at: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Request { request: OracleRequest, issued_at: u64 },
    Answer { answer: OracleAnswer },
    Delivered { request_id: u64 },
    Expired { request_id: u64 },
}

#[derive(Debug)]
struct Entry {
    request: OracleRequest,
    issued_at: u64,
    state: RequestState,
}

#[derive(Debug)]
struct State {
    entries: BTreeMap<u64, Entry>,
    /// Enqueue order.
    order: Vec<u64>,
    undelivered: VecDeque<OracleAnswer>,
    expired: Vec<u64>,
    status: RunStatus,
    journal: Option<File>,
}

#[derive(Clone, Debug)]
pub struct OracleQueue {
    cfg: Arc<QueueConfig>,
    clock: Arc<dyn Clock>,
    state: Arc<Mutex<State>>,
}

impl OracleQueue {
    pub fn open(cfg: QueueConfig) -> Result<Self> {
        Self::with_clock(cfg, Arc::new(SystemClock))
    }

    pub fn with_clock(cfg: QueueConfig, clock: Arc<dyn Clock>) -> Result<Self> {
        if cfg.classes == 0 {
            return Err(Error::Config("an oracle queue needs at least one class".into()));
        }
        let mut state = State {
            entries: BTreeMap::new(),
            order: Vec::new(),
            undelivered: VecDeque::new(),
            expired: Vec::new(),
            status: RunStatus {
                run_id: cfg.run_id.clone(),
                state: RunState::Starting,
                iteration: 0,
                iterations: 0,
                val_acc: None,
                theta: None,
                n_labeled: 0,
                labels_acquired: 0,
                labels_budget: 0,
                pending: 0,
            },
            journal: None,
        };
        if let Some(path) = &cfg.journal {
            if path.exists() {
                replay(path, &mut state)?;
            }
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            state.journal = Some(file);
        }
        Ok(Self {
            cfg: Arc::new(cfg),
            clock,
            state: Arc::new(Mutex::new(state)),
        })
    }

    pub fn run_id(&self) -> &str {
        &self.cfg.run_id
    }

    pub fn classes(&self) -> usize {
        self.cfg.classes
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        // a panic while holding the lock leaves the maps consistent: every
        // mutation is a single insert or field write after journaling
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn expires_at(&self, issued_at: u64) -> Option<u64> {
        self.cfg.timeout.map(|t| issued_at + t.as_millis() as u64)
    }

    /// Moves overdue pending requests to the expired state.
    fn expire(&self, st: &mut State) -> Result<()> {
        let now = self.clock.now_ms();
        let overdue: Vec<u64> = st
            .order
            .iter()
            .copied()
            .filter(|id| {
                let e = &st.entries[id];
                e.state == RequestState::Pending && self.expires_at(e.issued_at).is_some_and(|t| now >= t)
            })
            .collect();
        for id in overdue {
            append(&mut st.journal, self.cfg.journal.as_deref(), &Event::Expired { request_id: id })?;
            if let Some(e) = st.entries.get_mut(&id) {
                e.state = RequestState::Expired;
            }
            st.expired.push(id);
        }
        Ok(())
    }

    pub fn enqueue(&self, request: OracleRequest) -> Result<Ticket> {
        let mut st = self.lock();
        let id = request.request_id;
        if st.entries.contains_key(&id) {
            return Err(Error::Oracle(format!("duplicate request id {id}")));
        }
        let issued_at = self.clock.now_ms();
        let event = Event::Request { request, issued_at };
        append(&mut st.journal, self.cfg.journal.as_deref(), &event)?;
        let Event::Request { request, .. } = event else { unreachable!() };
        st.entries.insert(
            id,
            Entry {
                request,
                issued_at,
                state: RequestState::Pending,
            },
        );
        st.order.push(id);
        Ok(Ticket {
            request_id: id,
            expires_at: self.expires_at(issued_at),
        })
    }

    /// Requests in enqueue order, optionally filtered by state.
    pub fn requests(&self, filter: Option<RequestState>) -> Result<Vec<RequestView>> {
        let mut st = self.lock();
        self.expire(&mut st)?;
        Ok(st
            .order
            .iter()
            .map(|id| &st.entries[id])
            .filter(|e| filter.is_none_or(|f| e.state == f))
            .map(|e| RequestView {
                request: e.request.clone(),
                state: e.state,
                issued_at: e.issued_at,
                expires_at: self.expires_at(e.issued_at),
            })
            .collect())
    }

    pub fn pending(&self) -> Result<Vec<RequestView>> {
        self.requests(Some(RequestState::Pending))
    }

    /// Records an answer. The answer is durable when this returns `Ok`.
    pub fn submit_answer(
        &self,
        request_id: u64,
        label: usize,
        source: AnswerSource,
    ) -> std::result::Result<OracleAnswer, SubmitError> {
        let mut st = self.lock();
        self.expire(&mut st).map_err(|e| SubmitError::Storage(e.to_string()))?;
        let entry = st.entries.get(&request_id).ok_or(SubmitError::UnknownRequest(request_id))?;
        if label >= self.cfg.classes {
            return Err(SubmitError::InvalidLabel {
                label,
                classes: self.cfg.classes,
            });
        }
        match entry.state {
            RequestState::Answered => return Err(SubmitError::AlreadyAnswered(request_id)),
            RequestState::Expired => return Err(SubmitError::Expired(request_id)),
            RequestState::Pending => {}
        }
        let answer = OracleAnswer {
            request_id,
            sample_id: entry.request.sample_id,
            label,
            answered_at: self.clock.now_ms(),
            source,
        };
        let event = Event::Answer { answer: answer.clone() };
        append(&mut st.journal, self.cfg.journal.as_deref(), &event).map_err(|e| SubmitError::Storage(e.to_string()))?;
        if let Some(e) = st.entries.get_mut(&request_id) {
            e.state = RequestState::Answered;
        }
        st.undelivered.push_back(answer.clone());
        Ok(answer)
    }

    /// Drains answers not yet handed to the training loop.
    pub fn poll_answers(&self) -> Result<Vec<OracleAnswer>> {
        let mut st = self.lock();
        let answers: Vec<OracleAnswer> = st.undelivered.drain(..).collect();
        for a in &answers {
            append(
                &mut st.journal,
                self.cfg.journal.as_deref(),
                &Event::Delivered { request_id: a.request_id },
            )?;
        }
        Ok(answers)
    }

    /// Drains the ids of requests that expired since the last call.
    pub fn take_expired(&self) -> Vec<u64> {
        let mut st = self.lock();
        // journaling failures surface on the next submit or poll
        let _ = self.expire(&mut st);
        std::mem::take(&mut st.expired)
    }

    pub fn next_request_id(&self) -> u64 {
        self.lock().entries.keys().next_back().map_or(1, |m| m + 1)
    }

    pub fn status(&self) -> RunStatus {
        let mut st = self.lock();
        let _ = self.expire(&mut st);
        let pending = st.entries.values().filter(|e| e.state == RequestState::Pending).count();
        RunStatus {
            pending,
            ..st.status.clone()
        }
    }

    pub fn update_status(&self, f: impl FnOnce(&mut RunStatus)) {
        f(&mut self.lock().status);
    }
}

fn append(journal: &mut Option<File>, path: Option<&Path>, event: &Event) -> Result<()> {
    let Some(file) = journal else { return Ok(()) };
    let path = path.unwrap_or(Path::new("journal"));
    let mut line = serde_json::to_vec(event)?;
    line.push(b'\n');
    file.write_all(&line).map_err(|e| Error::io(path, e))?;
    file.sync_data().map_err(|e| Error::io(path, e))
}

/// Rebuilds `st` from the journal. A torn final line is cut off so that
/// later appends start on a fresh line.
fn replay(path: &Path, st: &mut State) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8_lossy(&bytes);
    let mut offset = 0;
    let mut keep = bytes.len();
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    let last = lines.len().saturating_sub(1);
    for (i, raw) in lines.iter().enumerate() {
        let start = offset;
        offset += raw.len();
        let line = raw.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        let event: Event = match serde_json::from_str(line) {
            Ok(e) => e,
            // a torn final line is a write that was never acknowledged
            Err(_) if i == last && !raw.ends_with('\n') => {
                keep = start;
                break;
            }
            Err(e) => return Err(Error::format(format!("journal line {}", i + 1), e.to_string())),
        };
        match event {
            Event::Request { request, issued_at } => {
                let id = request.request_id;
                st.order.push(id);
                st.entries.insert(
                    id,
                    Entry {
                        request,
                        issued_at,
                        state: RequestState::Pending,
                    },
                );
            }
            Event::Answer { answer } => {
                if let Some(e) = st.entries.get_mut(&answer.request_id) {
                    e.state = RequestState::Answered;
                }
                st.undelivered.push_back(answer);
            }
            Event::Delivered { request_id } => st.undelivered.retain(|a| a.request_id != request_id),
            Event::Expired { request_id } => {
                if let Some(e) = st.entries.get_mut(&request_id) {
                    e.state = RequestState::Expired;
                }
            }
        }
    }
    if keep < bytes.len() {
        let file = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
        file.set_len(keep as u64).map_err(|e| Error::io(path, e))?;
    } else if !bytes.is_empty() && !bytes.ends_with(b"\n") {
        let mut file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
