//! Turning per-image like/dislike ratings into winner/loser pairs.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::dpo::{PairSource, PreferencePair};
use crate::diffusion::Trajectory;
use crate::error::{Error, Result};
use crate::image::Mask;

pub const LIKE: i32 = 0;
pub const DISLIKE: i32 = -1;
pub const DEFAULT_MAX_PAIRS_PER_GROUP: usize = 4;

/// One rating of one generated sample: `0` = like, `-1` = dislike.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub sample_id: String,
    pub value: i32,
    pub rater_id: String,
    pub submitted_at: DateTime<Utc>,
}

impl FeedbackRecord {
    pub fn new(sample_id: impl Into<String>, value: i32, rater_id: impl Into<String>) -> Self {
        Self {
            sample_id: sample_id.into(),
            value,
            rater_id: rater_id.into(),
            submitted_at: Utc::now(),
        }
    }
}

pub fn check_feedback_value(value: i32) -> Result<()> {
    if value == LIKE || value == DISLIKE {
        Ok(())
    } else {
        Err(Error::Protocol(format!(
            "feedback value must be 0 (like) or -1 (dislike), got {value}"
        )))
    }
}

/// Groups samples by `(prompt, mask)` and pairs every liked sample with every
/// disliked one in the same group, in submission order, up to
/// `max_per_group` pairs. Groups without opposing labels yield nothing.
pub fn pairs_from_feedback(
    samples: &[(String, Arc<Trajectory>)],
    feedback: &[FeedbackRecord],
    max_per_group: usize,
    source: PairSource,
) -> Result<Vec<PreferencePair>> {
    let by_id: HashMap<&str, &Arc<Trajectory>> = samples.iter().map(|(id, tr)| (id.as_str(), tr)).collect();
    let mut seen = HashSet::new();
    // group key -> (liked, disliked), groups kept in first-seen order
    let mut groups: Vec<((usize, &Mask), Vec<&Arc<Trajectory>>, Vec<&Arc<Trajectory>>)> = Vec::new();
    for record in feedback {
        check_feedback_value(record.value)?;
        let tr = by_id.get(record.sample_id.as_str()).ok_or_else(|| {
            Error::Validation(format!("feedback references unknown sample {}", record.sample_id))
        })?;
        if !seen.insert(record.sample_id.as_str()) {
            return Err(Error::Validation(format!("sample {} rated twice", record.sample_id)));
        }
        let key = (tr.prompt_index, &tr.mask);
        let idx = match groups.iter().position(|(k, _, _)| *k == key) {
            Some(i) => i,
            None => {
                groups.push((key, Vec::new(), Vec::new()));
                groups.len() - 1
            }
        };
        if record.value == LIKE {
            groups[idx].1.push(tr);
        } else {
            groups[idx].2.push(tr);
        }
    }

    let mut pairs = Vec::new();
    for (_, liked, disliked) in groups {
        let mut formed = 0;
        'group: for w in &liked {
            for l in &disliked {
                if formed == max_per_group {
                    break 'group;
                }
                pairs.push(PreferencePair::new(Arc::clone(w), Arc::clone(l), source)?);
                formed += 1;
            }
        }
    }
    Ok(pairs)
}
