//! Task records and their kind-specific payloads.

use chrono::{DateTime, Utc};
use prefpaint_core::preference::DpoConfig;
use prefpaint_core::registry::is_valid_hash;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::Id;

pub const MAX_SAMPLE_COUNT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Pending,
    Processing,
    Finished,
    Failed,
}

impl TaskState {
    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Finished | TaskState::Failed)
    }

    pub fn can_become(self, next: TaskState) -> bool {
        use TaskState::*;
        matches!(
            (self, next),
            (Pending, Processing) | (Processing, Finished) | (Processing, Failed)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskState::Pending => "pending",
            TaskState::Processing => "processing",
            TaskState::Finished => "finished",
            TaskState::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TrainBase,
    SamplePairs,
    Finetune,
    Infer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainBaseJob {
    pub domain: String,
    pub steps: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleJob {
    pub node_id: Id,
    pub count: usize,
    /// Tokens to cycle through; empty means the whole vocabulary.
    #[serde(default)]
    pub prompts: Vec<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneJob {
    pub node_id: Id,
    pub batch_ids: Vec<Id>,
    pub dpo: DpoConfig,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferJob {
    pub node_id: Id,
    /// Blob hash of the uploaded PGM image.
    pub image_ref: String,
    /// Blob hash of the uploaded PGM mask.
    pub mask_ref: String,
    pub prompt: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Job {
    TrainBase(TrainBaseJob),
    SamplePairs(SampleJob),
    Finetune(FinetuneJob),
    Infer(InferJob),
}

impl Job {
    pub fn kind(&self) -> TaskKind {
        match self {
            Job::TrainBase(_) => TaskKind::TrainBase,
            Job::SamplePairs(_) => TaskKind::SamplePairs,
            Job::Finetune(_) => TaskKind::Finetune,
            Job::Infer(_) => TaskKind::Infer,
        }
    }

    /// Checks that do not need the registry or the store.
    pub fn validate(&self) -> Result<()> {
        match self {
            Job::TrainBase(j) => {
                if j.domain.trim().is_empty() {
                    return Err(Error::validation("domain must not be empty"));
                }
                if j.steps == 0 {
                    return Err(Error::validation("steps must be >= 1"));
                }
            }
            Job::SamplePairs(j) => {
                if !(1..=MAX_SAMPLE_COUNT).contains(&j.count) {
                    return Err(Error::validation(format!(
                        "count must be in 1..={MAX_SAMPLE_COUNT}, got {}",
                        j.count
                    )));
                }
            }
            Job::Finetune(j) => {
                if j.batch_ids.is_empty() {
                    return Err(Error::validation("batch_ids must not be empty"));
                }
            }
            Job::Infer(j) => {
                for (field, hash) in [("image_ref", &j.image_ref), ("mask_ref", &j.mask_ref)] {
                    if !is_valid_hash(hash) {
                        return Err(Error::validation(format!("{field} must be a blob hash, got {hash:?}")));
                    }
                }
                if j.prompt.is_empty() {
                    return Err(Error::validation("prompt must not be empty"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: Id,
    #[serde(flatten)]
    pub job: Job,
    pub state: TaskState,
    pub enqueued_at: DateTime<Utc>,
    pub started_at: Option<DateTime<Utc>>,
    pub ended_at: Option<DateTime<Utc>>,
    /// Id of whatever the task produced: a node, a batch or a showcase entry.
    pub result_ref: Option<String>,
    pub error: Option<String>,
}

impl Task {
    pub fn kind(&self) -> TaskKind {
        self.job.kind()
    }
}
