//! Sample batches (with their feedback) and the showcase gallery.
//!
//! Each batch lives in its own JSON file, rewritten atomically when its
//! feedback arrives, so a batch is either open or submitted with all of its
//! ratings. Showcase entries are append-only JSON lines.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use prefpaint_core::preference::FeedbackRecord;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::Id;

pub const BATCHES_DIR: &str = "batches";
pub const SHOWCASE_FILE: &str = "showcase.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchStatus {
    Open,
    Submitted,
}

/// One generated sample awaiting (or carrying) a rating. All `*_ref` fields
/// are blob hashes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleItem {
    pub sample_id: String,
    pub prompt: String,
    /// Items sharing a group were inpainted from the same image and mask.
    pub group: usize,
    pub known_ref: String,
    pub mask_ref: String,
    pub image_ref: String,
    pub trajectory_ref: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub batch_id: Id,
    pub node_id: Id,
    pub task_id: Id,
    pub status: BatchStatus,
    pub items: Vec<SampleItem>,
    pub created_at: DateTime<Utc>,
    pub submitted_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub feedback: Vec<FeedbackRecord>,
    pub pairs_formed: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShowcaseEntry {
    pub entry_id: Id,
    pub node_id: Id,
    pub task_id: Id,
    pub prompt: String,
    pub input_ref: String,
    pub mask_ref: String,
    pub output_ref: String,
    pub seed: u64,
    pub created_at: DateTime<Utc>,
}

struct State {
    batches: BTreeMap<u64, SampleBatch>,
    showcase: Vec<ShowcaseEntry>,
    showcase_log: File,
}

pub struct Store {
    dir: PathBuf,
    state: Mutex<State>,
}

impl Store {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let batch_dir = dir.join(BATCHES_DIR);
        fs::create_dir_all(&batch_dir)?;
        let mut batches = BTreeMap::new();
        for entry in fs::read_dir(&batch_dir)? {
            let path = entry?.path();
            if path.extension().is_none_or(|e| e != "json") {
                continue;
            }
            let batch: SampleBatch = serde_json::from_slice(&fs::read(&path)?).map_err(|e| {
                prefpaint_core::Error::Data(format!("batch file {}: {e}", path.display()))
            })?;
            batches.insert(batch.batch_id.0, batch);
        }

        let showcase_path = dir.join(SHOWCASE_FILE);
        let mut showcase = Vec::new();
        let mut valid_len = 0u64;
        if showcase_path.exists() {
            let mut reader = BufReader::new(File::open(&showcase_path)?);
            let mut line = String::new();
            while reader.read_line(&mut line)? > 0 {
                if !line.ends_with('\n') {
                    log::warn!("dropping torn final line of {}", showcase_path.display());
                    break;
                }
                let entry: ShowcaseEntry = serde_json::from_str(&line)
                    .map_err(|e| prefpaint_core::Error::Data(format!("{SHOWCASE_FILE}: {e}")))?;
                showcase.push(entry);
                valid_len += line.len() as u64;
                line.clear();
            }
            OpenOptions::new().write(true).open(&showcase_path)?.set_len(valid_len)?;
        }
        let showcase_log = OpenOptions::new().create(true).append(true).open(&showcase_path)?;
        Ok(Self {
            dir,
            state: Mutex::new(State {
                batches,
                showcase,
                showcase_log,
            }),
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().expect("store lock poisoned")
    }

    fn write_batch(&self, batch: &SampleBatch) -> Result<()> {
        let dir = self.dir.join(BATCHES_DIR);
        let tmp = dir.join(format!(".{}.json.tmp", batch.batch_id));
        let mut f = File::create(&tmp)?;
        f.write_all(&serde_json::to_vec_pretty(batch)?)?;
        f.sync_all()?;
        fs::rename(&tmp, dir.join(format!("{}.json", batch.batch_id)))?;
        Ok(())
    }

    /// Persists a new open batch. Item ids are assigned here as
    /// `<batch_id>.<index>`.
    pub fn create_batch(&self, node_id: Id, task_id: Id, mut items: Vec<SampleItem>) -> Result<SampleBatch> {
        let mut st = self.lock();
        let batch_id = Id(st.batches.keys().next_back().map_or(1, |&id| id + 1));
        for (i, item) in items.iter_mut().enumerate() {
            item.sample_id = format!("{batch_id}.{i}");
        }
        let batch = SampleBatch {
            batch_id,
            node_id,
            task_id,
            status: BatchStatus::Open,
            items,
            created_at: Utc::now(),
            submitted_at: None,
            feedback: Vec::new(),
            pairs_formed: None,
        };
        self.write_batch(&batch)?;
        st.batches.insert(batch_id.0, batch.clone());
        Ok(batch)
    }

    pub fn batch(&self, id: Id) -> Result<SampleBatch> {
        self.lock()
            .batches
            .get(&id.0)
            .cloned()
            .ok_or_else(|| Error::not_found(format!("batch {id}")))
    }

    /// Batches, newest first.
    pub fn batches(&self) -> Vec<SampleBatch> {
        self.lock().batches.values().rev().cloned().collect()
    }

    /// Closes an open batch with its ratings. Fails with a conflict if the
    /// batch was already submitted.
    pub fn submit(&self, id: Id, feedback: Vec<FeedbackRecord>, pairs_formed: usize) -> Result<SampleBatch> {
        let mut st = self.lock();
        let current = st.batches.get(&id.0).ok_or_else(|| Error::not_found(format!("batch {id}")))?;
        if current.status == BatchStatus::Submitted {
            return Err(Error::conflict(format!("batch {id} was already submitted")));
        }
        let mut batch = current.clone();
        batch.status = BatchStatus::Submitted;
        batch.submitted_at = Some(Utc::now());
        batch.feedback = feedback;
        batch.pairs_formed = Some(pairs_formed);
        self.write_batch(&batch)?;
        st.batches.insert(id.0, batch.clone());
        Ok(batch)
    }

    pub fn add_showcase(&self, mut entry: ShowcaseEntry) -> Result<ShowcaseEntry> {
        let mut st = self.lock();
        entry.entry_id = Id(st.showcase.last().map_or(1, |e| e.entry_id.0 + 1));
        let mut line = serde_json::to_vec(&entry)?;
        line.push(b'\n');
        st.showcase_log.write_all(&line)?;
        st.showcase.push(entry.clone());
        Ok(entry)
    }

    pub fn showcase_entry(&self, id: Id) -> Result<ShowcaseEntry> {
        self.lock()
            .showcase
            .iter()
            .find(|e| e.entry_id == id)
            .cloned()
            .ok_or_else(|| Error::not_found(format!("showcase entry {id}")))
    }

    /// Newest-first page; returns the page and the total entry count.
    pub fn showcase_page(&self, page: usize, per_page: usize) -> (Vec<ShowcaseEntry>, usize) {
        let st = self.lock();
        let items = st
            .showcase
            .iter()
            .rev()
            .skip(page.saturating_mul(per_page))
            .take(per_page)
            .cloned()
            .collect();
        (items, st.showcase.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(group: usize) -> SampleItem {
        SampleItem {
            sample_id: String::new(),
            prompt: "circle".into(),
            group,
            known_ref: "k".into(),
            mask_ref: "m".into(),
            image_ref: "i".into(),
            trajectory_ref: "t".into(),
            seed: 1,
        }
    }

    fn entry(prompt: &str) -> ShowcaseEntry {
        ShowcaseEntry {
            entry_id: Id(0),
            node_id: Id(1),
            task_id: Id(1),
            prompt: prompt.into(),
            input_ref: "a".into(),
            mask_ref: "b".into(),
            output_ref: "c".into(),
            seed: 0,
            created_at: Utc::now(),
        }
    }

    #[test]
    fn batch_lifecycle_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let b = store.create_batch(Id(1), Id(7), vec![item(0), item(0)]).unwrap();
        assert_eq!(b.batch_id, Id(1));
        assert_eq!(b.items[1].sample_id, "1.1");
        let fb = vec![FeedbackRecord::new("1.0", 0, "r"), FeedbackRecord::new("1.1", -1, "r")];
        store.submit(b.batch_id, fb.clone(), 1).unwrap();
        assert!(matches!(
            store.submit(b.batch_id, fb, 1),
            Err(Error::Core(prefpaint_core::Error::Conflict(_)))
        ));

        let again = Store::open(dir.path()).unwrap();
        let b = again.batch(Id(1)).unwrap();
        assert_eq!(b.status, BatchStatus::Submitted);
        assert_eq!(b.pairs_formed, Some(1));
        assert_eq!(again.create_batch(Id(1), Id(8), vec![item(0)]).unwrap().batch_id, Id(2));
    }

    #[test]
    fn showcase_is_newest_first() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = Store::open(dir.path()).unwrap();
            for p in ["a", "b", "c"] {
                store.add_showcase(entry(p)).unwrap();
            }
        }
        let store = Store::open(dir.path()).unwrap();
        let (page, total) = store.showcase_page(0, 2);
        assert_eq!(total, 3);
        assert_eq!(page.iter().map(|e| e.prompt.as_str()).collect::<Vec<_>>(), vec!["c", "b"]);
        let (page, _) = store.showcase_page(1, 2);
        assert_eq!(page[0].entry_id, Id(1));
        assert!(store.showcase_page(5, 2).0.is_empty());
    }
}
