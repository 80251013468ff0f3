//! Annotation task queue backed by an append-only JSONL journal.
//!
//! One task per prompt holds its sampled responses. An annotator leases a
//! task, submits one rubric record per response, and the lease ends once all
//! responses are covered. A task is done after [`REQUIRED_ANNOTATORS`]
//! distinct annotators have covered every response. Time is passed in
//! explicitly as milliseconds since the Unix epoch.

use crate::error::{Error, Result};
use crate::io::{append_jsonl, read_jsonl, PromptRecord, ResponseRecord};
use crate::preference::{rank_annotations, AnnotationRecord, RankedResponseSet};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

pub const REQUIRED_ANNOTATORS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Open,
    InProgress,
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub annotator: String,
    pub expires_at_ms: u64,
}

/// One journal line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case", deny_unknown_fields)]
pub enum JournalEvent {
    Lease {
        task_id: String,
        annotator: String,
        expires_at_ms: u64,
    },
    Annotation { record: AnnotationRecord },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub prompt: PromptRecord,
    pub responses: Vec<ResponseRecord>,
    pub records: Vec<AnnotationRecord>,
    pub lease: Option<Lease>,
}

impl Task {
    pub fn id(&self) -> &str {
        &self.prompt.id
    }

    /// Annotators who have rated every response, in name order.
    pub fn completed_by(&self) -> BTreeSet<&str> {
        let mut seen: BTreeMap<&str, BTreeSet<u32>> = BTreeMap::new();
        for r in &self.records {
            seen.entry(&r.annotator).or_default().insert(r.response_id);
        }
        seen.into_iter()
            .filter(|(_, ids)| ids.len() == self.responses.len())
            .map(|(a, _)| a)
            .collect()
    }

    fn has_completed(&self, annotator: &str) -> bool {
        self.completed_by().contains(annotator)
    }

    pub fn active_lease(&self, now_ms: u64) -> Option<&Lease> {
        self.lease
            .as_ref()
            .filter(|l| l.expires_at_ms > now_ms && !self.has_completed(&l.annotator))
    }

    pub fn status(&self, now_ms: u64) -> TaskStatus {
        if self.completed_by().len() >= REQUIRED_ANNOTATORS {
            TaskStatus::Done
        } else if self.active_lease(now_ms).is_some() {
            TaskStatus::InProgress
        } else {
            TaskStatus::Open
        }
    }

    /// Ranking from the completed annotators' records.
    pub fn ranking(&self) -> Result<RankedResponseSet> {
        let done = self.completed_by();
        let records: Vec<AnnotationRecord> = self
            .records
            .iter()
            .filter(|r| done.contains(r.annotator.as_str()))
            .cloned()
            .collect();
        rank_annotations(self.id(), &records)
    }
}

/// Why a request was refused; maps onto HTTP statuses in the server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rejection {
    UnknownTask(String),
    /// The record breaks the rubric or does not belong to the task.
    Invalid(String),
    /// The submitter holds no live lease, or already rated this response.
    Conflict(String),
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rejection::UnknownTask(m) | Rejection::Invalid(m) | Rejection::Conflict(m) => f.write_str(m),
        }
    }
}

#[derive(Debug)]
pub enum SubmitError {
    Rejected(Rejection),
    /// The journal append failed; nothing was stored.
    Storage(Error),
}

impl From<Rejection> for SubmitError {
    fn from(r: Rejection) -> Self {
        SubmitError::Rejected(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Progress {
    pub total: usize,
    pub open: usize,
    pub in_progress: usize,
    pub done: usize,
    pub annotations: usize,
}

#[derive(Debug)]
pub struct AnnotationStore {
    tasks: Vec<Task>,
    index: BTreeMap<String, usize>,
    journal: Option<PathBuf>,
    lease_ms: u64,
}

impl AnnotationStore {
    /// Builds one task per prompt from `responses`; every prompt needs at
    /// least two responses with distinct ids.
    pub fn new(prompts: Vec<PromptRecord>, responses: Vec<ResponseRecord>, lease_ms: u64) -> Result<Self> {
        let mut index = BTreeMap::new();
        let mut tasks: Vec<Task> = Vec::with_capacity(prompts.len());
        for p in prompts {
            if index.insert(p.id.clone(), tasks.len()).is_some() {
                return Err(Error::Schema(format!("duplicate prompt id `{}`", p.id)));
            }
            tasks.push(Task {
                prompt: p,
                responses: Vec::new(),
                records: Vec::new(),
                lease: None,
            });
        }
        for r in responses {
            let &i = index
                .get(&r.prompt_id)
                .ok_or_else(|| Error::Schema(format!("response for unknown prompt `{}`", r.prompt_id)))?;
            if tasks[i].responses.iter().any(|x| x.response_id == r.response_id) {
                return Err(Error::Schema(format!(
                    "duplicate response {} for prompt `{}`",
                    r.response_id, r.prompt_id
                )));
            }
            tasks[i].responses.push(r);
        }
        tasks.retain(|t| !t.responses.is_empty());
        if let Some(t) = tasks.iter().find(|t| t.responses.len() < 2) {
            return Err(Error::Schema(format!("prompt `{}` has fewer than 2 responses", t.id())));
        }
        let index = tasks.iter().enumerate().map(|(i, t)| (t.id().to_string(), i)).collect();
        Ok(Self {
            tasks,
            index,
            journal: None,
            lease_ms,
        })
    }

    /// Replays `path` if it exists, then appends every later event to it.
    pub fn with_journal(mut self, path: &Path) -> Result<Self> {
        if path.exists() {
            for event in read_jsonl::<JournalEvent>(path)? {
                self.apply(event)
                    .map_err(|r| Error::Schema(format!("{}: cannot replay event: {r}", path.display())))?;
            }
        }
        self.journal = Some(path.to_path_buf());
        Ok(self)
    }

    fn apply(&mut self, event: JournalEvent) -> Result<(), Rejection> {
        match event {
            JournalEvent::Lease {
                task_id,
                annotator,
                expires_at_ms,
            } => {
                let i = self.find(&task_id)?;
                self.tasks[i].lease = Some(Lease {
                    annotator,
                    expires_at_ms,
                });
            }
            JournalEvent::Annotation { record } => {
                let i = self.find(&record.prompt_id)?;
                self.tasks[i].records.push(record);
            }
        }
        Ok(())
    }

    fn record(&mut self, event: JournalEvent) -> Result<()> {
        if let Some(path) = &self.journal {
            append_jsonl(path, &event)?;
        }
        self.apply(event).expect("validated before recording");
        Ok(())
    }

    fn find(&self, task_id: &str) -> Result<usize, Rejection> {
        self.index
            .get(task_id)
            .copied()
            .ok_or_else(|| Rejection::UnknownTask(format!("unknown task `{task_id}`")))
    }

    pub fn task(&self, task_id: &str) -> Result<&Task, Rejection> {
        self.find(task_id).map(|i| &self.tasks[i])
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    /// The annotator's live lease if any, else the oldest task that is not
    /// done, not leased by someone else and not yet rated by this annotator.
    /// Leasing it is journaled. `Ok(None)` means the queue is empty for them.
    pub fn next_task(&mut self, annotator: &str, now_ms: u64) -> Result<Option<&Task>> {
        if annotator.is_empty() {
            return Err(Error::invalid("annotator label must be non-empty"));
        }
        let held = self.tasks.iter().position(|t| {
            t.status(now_ms) != TaskStatus::Done && t.active_lease(now_ms).is_some_and(|l| l.annotator == annotator)
        });
        let pick = held.or_else(|| {
            self.tasks.iter().position(|t| {
                t.status(now_ms) == TaskStatus::Open && !t.records.iter().any(|r| r.annotator == annotator)
            })
        });
        let Some(i) = pick else {
            return Ok(None);
        };
        if held.is_none() {
            self.record(JournalEvent::Lease {
                task_id: self.tasks[i].id().to_string(),
                annotator: annotator.to_string(),
                expires_at_ms: now_ms + self.lease_ms,
            })?;
        }
        Ok(Some(&self.tasks[i]))
    }

    /// Validates and stores one record, returning the task's new status.
    pub fn submit(&mut self, task_id: &str, record: AnnotationRecord, now_ms: u64) -> Result<TaskStatus, SubmitError> {
        let i = self.find(task_id)?;
        let task = &self.tasks[i];
        record
            .levels
            .validate()
            .map_err(|e| Rejection::Invalid(e.to_string()))?;
        if record.prompt_id != task_id {
            return Err(SubmitError::Rejected(Rejection::Invalid(format!(
                "record is for prompt `{}`, not task `{task_id}`",
                record.prompt_id
            ))));
        }
        if !task.responses.iter().any(|r| r.response_id == record.response_id) {
            return Err(SubmitError::Rejected(Rejection::Invalid(format!(
                "task `{task_id}` has no response {}",
                record.response_id
            ))));
        }
        match task.active_lease(now_ms) {
            Some(l) if l.annotator == record.annotator => {}
            Some(_) => return Err(SubmitError::Rejected(Rejection::Conflict(format!("task `{task_id}` is leased to another annotator")))),
            None => {
                return Err(SubmitError::Rejected(Rejection::Conflict(format!(
                    "annotator `{}` holds no live lease on `{task_id}`",
                    record.annotator
                ))))
            }
        }
        if task
            .records
            .iter()
            .any(|r| r.annotator == record.annotator && r.response_id == record.response_id)
        {
            return Err(SubmitError::Rejected(Rejection::Conflict(format!(
                "response {} already rated by `{}`",
                record.response_id, record.annotator
            ))));
        }
        self.record(JournalEvent::Annotation { record }).map_err(SubmitError::Storage)?;
        Ok(self.tasks[i].status(now_ms))
    }

    pub fn progress(&self, now_ms: u64) -> Progress {
        let mut p = Progress {
            total: self.tasks.len(),
            open: 0,
            in_progress: 0,
            done: 0,
            annotations: 0,
        };
        for t in &self.tasks {
            p.annotations += t.records.len();
            match t.status(now_ms) {
                TaskStatus::Open => p.open += 1,
                TaskStatus::InProgress => p.in_progress += 1,
                TaskStatus::Done => p.done += 1,
            }
        }
        p
    }

    /// Records and rankings of every done task, in task order.
    pub fn finished(&self, now_ms: u64) -> Result<(Vec<AnnotationRecord>, Vec<RankedResponseSet>)> {
        let mut records = Vec::new();
        let mut rankings = Vec::new();
        for t in self.tasks.iter().filter(|t| t.status(now_ms) == TaskStatus::Done) {
            let done = t.completed_by();
            records.extend(t.records.iter().filter(|r| done.contains(r.annotator.as_str())).cloned());
            rankings.push(t.ranking()?);
        }
        Ok((records, rankings))
    }
}
