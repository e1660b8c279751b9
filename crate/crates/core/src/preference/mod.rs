//! Reward-model-free preference fine-tuning with low-rank adapters.

pub mod adapter;
pub mod dpo;
pub mod pairs;

pub use adapter::{AdapterWeights, LoraLayer};
pub use dpo::{
    dpo_step_loss, finetune_run, neg_log_sigmoid, DpoConfig, DpoObjective, FinetuneOutcome, PairSource,
    PreferencePair, StepTerms,
};
pub use pairs::{check_feedback_value, pairs_from_feedback, FeedbackRecord, DEFAULT_MAX_PAIRS_PER_GROUP, DISLIKE, LIKE};
