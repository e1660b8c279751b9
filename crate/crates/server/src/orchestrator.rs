//! Persistent FIFO task queue with in-process worker threads.
//!
//! Every state change is appended to `tasks.jsonl` before it becomes visible,
//! so the log alone reconstructs the queue after a restart. Tasks that were
//! processing when the process died are marked failed with reason
//! [`INTERRUPTED`] instead of being re-run: fine-tunes are not idempotent.
//!
//! With one worker, tasks finish in submission order. With more, each worker
//! still takes the oldest pending task, but completions may interleave.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::ids::Id;
use crate::task::{Job, Task, TaskKind, TaskState};

pub const TASKS_FILE: &str = "tasks.jsonl";
pub const INTERRUPTED: &str = "interrupted";

/// Executes one task and returns its `result_ref`.
pub trait TaskHandler: Send + Sync {
    fn handle(&self, task: &Task) -> Result<String>;
}

impl<F> TaskHandler for F
where
    F: Fn(&Task) -> Result<String> + Send + Sync,
{
    fn handle(&self, task: &Task) -> Result<String> {
        self(task)
    }
}

/// One line of the task log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transition {
    pub task_id: Id,
    pub state: TaskState,
    pub timestamp: DateTime<Utc>,
    pub detail: Value,
}

#[derive(Debug, Clone, Default)]
pub struct TaskFilter {
    pub state: Option<TaskState>,
    pub kind: Option<TaskKind>,
    pub offset: usize,
    pub limit: Option<usize>,
}

struct Queue {
    tasks: BTreeMap<u64, Task>,
    pending: VecDeque<u64>,
    next_id: u64,
    accepting: bool,
    running: bool,
    log: File,
}

impl Queue {
    fn append(&mut self, tr: &Transition) -> Result<()> {
        let mut line = serde_json::to_vec(tr)?;
        line.push(b'\n');
        self.log.write_all(&line)?;
        Ok(())
    }

    /// Logs and applies a transition of an existing task.
    fn advance(&mut self, id: u64, state: TaskState, detail: Value) -> Result<Task> {
        let now = Utc::now();
        let current = self.tasks[&id].state;
        assert!(current.can_become(state), "illegal transition {current:?} -> {state:?}");
        self.append(&Transition {
            task_id: Id(id),
            state,
            timestamp: now,
            detail: detail.clone(),
        })?;
        let task = self.tasks.get_mut(&id).expect("task exists");
        apply(task, state, now, &detail);
        Ok(task.clone())
    }
}

fn apply(task: &mut Task, state: TaskState, at: DateTime<Utc>, detail: &Value) {
    task.state = state;
    match state {
        TaskState::Pending => {}
        TaskState::Processing => task.started_at = Some(at),
        TaskState::Finished => {
            task.ended_at = Some(at);
            task.result_ref = detail["result_ref"].as_str().map(str::to_string);
        }
        TaskState::Failed => {
            task.ended_at = Some(at);
            task.error = Some(detail["error"].as_str().unwrap_or("unknown error").to_string());
        }
    }
}

struct Shared {
    queue: Mutex<Queue>,
    work: Condvar,
    settled: Condvar,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Queue> {
        // handlers never run under this lock, so poisoning means a bug here
        self.queue.lock().expect("task queue lock poisoned")
    }
}

pub struct Orchestrator {
    shared: Arc<Shared>,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

impl Orchestrator {
    /// Replays `dir/tasks.jsonl`, failing any task left processing.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let path = dir.join(TASKS_FILE);
        let data = match fs::read(&path) {
            Ok(d) => d,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let (tasks, valid_len) = replay(&data)?;
        if valid_len < data.len() {
            log::warn!("dropping torn final line of {}", path.display());
            OpenOptions::new().write(true).open(&path)?.set_len(valid_len as u64)?;
        }
        let log = OpenOptions::new().create(true).append(true).open(&path)?;
        let next_id = tasks.keys().next_back().map_or(1, |&id| id + 1);
        let pending = tasks
            .values()
            .filter(|t| t.state == TaskState::Pending)
            .map(|t| t.task_id.0)
            .collect();
        let mut queue = Queue {
            tasks,
            pending,
            next_id,
            accepting: true,
            running: false,
            log,
        };
        let stranded: Vec<u64> = queue
            .tasks
            .values()
            .filter(|t| t.state == TaskState::Processing)
            .map(|t| t.task_id.0)
            .collect();
        for id in stranded {
            log::warn!("task {id} was interrupted by a restart");
            queue.advance(id, TaskState::Failed, json!({ "error": INTERRUPTED }))?;
        }
        Ok(Self {
            shared: Arc::new(Shared {
                queue: Mutex::new(queue),
                work: Condvar::new(),
                settled: Condvar::new(),
            }),
            workers: Mutex::new(Vec::new()),
        })
    }

    /// Spawns `worker_count` threads that drain the queue through `handler`.
    pub fn start(&self, handler: Arc<dyn TaskHandler>, worker_count: usize) {
        let mut workers = self.workers.lock().expect("worker list lock");
        self.shared.lock().running = true;
        for index in 0..worker_count.max(1) {
            let shared = Arc::clone(&self.shared);
            let handler = Arc::clone(&handler);
            let handle = std::thread::Builder::new()
                .name(format!("prefpaint-worker-{index}"))
                .spawn(move || worker_loop(&shared, handler.as_ref(), index))
                .expect("spawn worker thread");
            workers.push(handle);
        }
    }

    pub fn enqueue(&self, job: Job) -> Result<Task> {
        job.validate()?;
        let mut q = self.shared.lock();
        if !q.accepting {
            return Err(Error::Unavailable);
        }
        let id = q.next_id;
        let now = Utc::now();
        q.append(&Transition {
            task_id: Id(id),
            state: TaskState::Pending,
            timestamp: now,
            detail: serde_json::to_value(&job)?,
        })?;
        q.next_id += 1;
        let task = Task {
            task_id: Id(id),
            job,
            state: TaskState::Pending,
            enqueued_at: now,
            started_at: None,
            ended_at: None,
            result_ref: None,
            error: None,
        };
        q.tasks.insert(id, task.clone());
        q.pending.push_back(id);
        drop(q);
        self.shared.work.notify_one();
        Ok(task)
    }

    pub fn get(&self, id: Id) -> Result<Task> {
        self.shared
            .lock()
            .tasks
            .get(&id.0)
            .cloned()
            .ok_or_else(|| Error::not_found(format!("task {id}")))
    }

    /// Matching tasks, newest first.
    pub fn list(&self, filter: &TaskFilter) -> Vec<Task> {
        let q = self.shared.lock();
        q.tasks
            .values()
            .rev()
            .filter(|t| filter.state.is_none_or(|s| t.state == s))
            .filter(|t| filter.kind.is_none_or(|k| t.kind() == k))
            .skip(filter.offset)
            .take(filter.limit.unwrap_or(usize::MAX))
            .cloned()
            .collect()
    }

    /// Blocks until the task is finished or failed, or `timeout` elapses;
    /// returns the latest snapshot either way.
    pub fn wait(&self, id: Id, timeout: Duration) -> Result<Task> {
        let deadline = Instant::now() + timeout;
        let mut q = self.shared.lock();
        loop {
            let task = q
                .tasks
                .get(&id.0)
                .cloned()
                .ok_or_else(|| Error::not_found(format!("task {id}")))?;
            let now = Instant::now();
            if task.state.is_terminal() || now >= deadline {
                return Ok(task);
            }
            q = self
                .shared
                .settled
                .wait_timeout(q, deadline - now)
                .expect("task queue lock poisoned")
                .0;
        }
    }

    /// Stops accepting tasks, lets running handlers finish and joins the
    /// workers. Pending tasks stay in the log for the next start.
    pub fn shutdown(&self) {
        {
            let mut q = self.shared.lock();
            q.accepting = false;
            q.running = false;
        }
        self.shared.work.notify_all();
        let handles: Vec<_> = self.workers.lock().expect("worker list lock").drain(..).collect();
        for h in handles {
            if h.join().is_err() {
                log::error!("worker thread panicked outside a handler");
            }
        }
    }
}

impl Drop for Orchestrator {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn worker_loop(shared: &Shared, handler: &dyn TaskHandler, index: usize) {
    loop {
        let task = {
            let mut q = shared.lock();
            let id = loop {
                if !q.running {
                    return;
                }
                if let Some(id) = q.pending.pop_front() {
                    break id;
                }
                q = shared.work.wait(q).expect("task queue lock poisoned");
            };
            match q.advance(id, TaskState::Processing, json!({ "worker": index })) {
                Ok(t) => t,
                Err(e) => {
                    // unlogged starts would break at-most-once; leave it queued
                    log::error!("cannot record start of task {id}: {e}");
                    q.pending.push_front(id);
                    q.running = false;
                    return;
                }
            }
        };
        log::info!("worker {index} running task {} ({:?})", task.task_id, task.kind());
        let (state, detail) = match catch_unwind(AssertUnwindSafe(|| handler.handle(&task))) {
            Ok(Ok(result)) => (TaskState::Finished, json!({ "result_ref": result })),
            Ok(Err(e)) => (TaskState::Failed, json!({ "error": e.to_string() })),
            Err(panic) => (
                TaskState::Failed,
                json!({ "error": format!("handler panicked: {}", panic_message(panic.as_ref())) }),
            ),
        };
        let mut q = shared.lock();
        if let Err(e) = q.advance(task.task_id.0, state, detail.clone()) {
            log::error!("cannot record end of task {}: {e}", task.task_id);
            let t = q.tasks.get_mut(&task.task_id.0).expect("task exists");
            apply(t, state, Utc::now(), &detail);
        }
        drop(q);
        shared.settled.notify_all();
    }
}

fn panic_message(panic: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = panic.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = panic.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".into()
    }
}

/// Rebuilds task records from log bytes. Returns the tasks and the length of
/// the prefix made of complete lines.
fn replay(data: &[u8]) -> Result<(BTreeMap<u64, Task>, usize)> {
    let mut tasks: BTreeMap<u64, Task> = BTreeMap::new();
    let mut valid_len = 0;
    for (n, line) in data.split_inclusive(|&b| b == b'\n').enumerate() {
        let lineno = n + 1;
        if line.last() != Some(&b'\n') {
            break;
        }
        let bad = |reason: String| Error::TaskLog { line: lineno, reason };
        let tr: Transition = serde_json::from_slice(line).map_err(|e| bad(e.to_string()))?;
        let id = tr.task_id.0;
        if tr.state == TaskState::Pending {
            if tasks.keys().next_back().is_some_and(|&last| id <= last) {
                return Err(bad(format!("task id {id} is not above earlier ids")));
            }
            let job: Job = serde_json::from_value(tr.detail).map_err(|e| bad(e.to_string()))?;
            tasks.insert(
                id,
                Task {
                    task_id: tr.task_id,
                    job,
                    state: TaskState::Pending,
                    enqueued_at: tr.timestamp,
                    started_at: None,
                    ended_at: None,
                    result_ref: None,
                    error: None,
                },
            );
        } else {
            let task = tasks.get_mut(&id).ok_or_else(|| bad(format!("unknown task {id}")))?;
            if !task.state.can_become(tr.state) {
                return Err(bad(format!(
                    "illegal transition {} -> {} for task {id}",
                    task.state.as_str(),
                    tr.state.as_str()
                )));
            }
            apply(task, tr.state, tr.timestamp, &tr.detail);
        }
        valid_len += line.len();
    }
    Ok((tasks, valid_len))
}
