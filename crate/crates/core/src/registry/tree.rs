//! The model tree: one base root per domain, adapter nodes below it.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::blobs::BlobStore;
use super::checkpoint::Checkpoint;
use crate::diffusion::ModelWeights;
use crate::error::{Error, Result};
use crate::preference::AdapterWeights;

pub const NODES_FILE: &str = "nodes.jsonl";
pub const BLOBS_DIR: &str = "blobs";

pub type NodeId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Base,
    Adapter,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelNode {
    pub node_id: NodeId,
    pub parent_id: Option<NodeId>,
    pub kind: NodeKind,
    /// Content hash of the checkpoint blob.
    pub payload_ref: String,
    pub description: String,
    pub created_at: DateTime<Utc>,
    pub domain_tag: String,
}

#[derive(Debug, Default)]
struct Tree {
    nodes: Vec<ModelNode>,
    index: HashMap<NodeId, usize>,
    roots: HashMap<String, NodeId>,
}

impl Tree {
    /// Admits `node` if it keeps the tree well formed.
    fn admit(&mut self, node: ModelNode) -> Result<()> {
        if self.index.contains_key(&node.node_id) {
            return Err(Error::Conflict(format!("node {} already exists", node.node_id)));
        }
        if self.nodes.last().is_some_and(|n| n.node_id >= node.node_id) {
            return Err(Error::Data(format!("node {} is out of creation order", node.node_id)));
        }
        match (node.kind, node.parent_id) {
            (NodeKind::Base, None) => {
                if let Some(existing) = self.roots.get(&node.domain_tag) {
                    return Err(Error::Conflict(format!(
                        "domain {:?} already has root node {existing}",
                        node.domain_tag
                    )));
                }
                self.roots.insert(node.domain_tag.clone(), node.node_id);
            }
            (NodeKind::Adapter, Some(parent)) => {
                let p = self.get(parent)?;
                if p.domain_tag != node.domain_tag {
                    return Err(Error::Data(format!(
                        "node {} is in domain {:?} but its parent is in {:?}",
                        node.node_id, node.domain_tag, p.domain_tag
                    )));
                }
            }
            (kind, parent) => {
                return Err(Error::Data(format!(
                    "node {}: kind {kind:?} with parent {parent:?}",
                    node.node_id
                )))
            }
        }
        self.index.insert(node.node_id, self.nodes.len());
        self.nodes.push(node);
        Ok(())
    }

    fn get(&self, id: NodeId) -> Result<&ModelNode> {
        self.index
            .get(&id)
            .map(|&i| &self.nodes[i])
            .ok_or_else(|| Error::NotFound(format!("model node {id}")))
    }

    fn next_id(&self) -> NodeId {
        self.nodes.last().map_or(1, |n| n.node_id + 1)
    }
}

/// Persistent model tree over `nodes.jsonl` and a blob directory.
///
/// Creates are serialized; readers never observe a node whose record is not
/// yet on disk.
#[derive(Debug)]
pub struct ModelRegistry {
    dir: PathBuf,
    blobs: BlobStore,
    tree: RwLock<Tree>,
    log: Mutex<File>,
    cache: Mutex<HashMap<NodeId, Arc<ModelWeights>>>,
}

impl ModelRegistry {
    /// Opens (or initializes) the registry under `dir`. A torn final record,
    /// left by a crash mid-append, is dropped.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let blobs = BlobStore::open(dir.join(BLOBS_DIR))?;
        let path = dir.join(NODES_FILE);
        let mut tree = Tree::default();
        let mut valid_len = 0u64;
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            let mut lines = reader.split(b'\n').peekable();
            let total = fs::metadata(&path)?.len();
            let mut offset = 0u64;
            let mut lineno = 0;
            while let Some(line) = lines.next() {
                let line = line?;
                lineno += 1;
                let consumed = line.len() as u64 + 1;
                let complete = offset + consumed <= total;
                offset += consumed;
                if line.iter().all(u8::is_ascii_whitespace) {
                    if complete {
                        valid_len = offset;
                    }
                    continue;
                }
                match serde_json::from_slice::<ModelNode>(&line) {
                    Ok(node) if complete => {
                        tree.admit(node)?;
                        valid_len = offset;
                    }
                    Ok(_) | Err(_) if !complete && lines.peek().is_none() => {
                        log::warn!("{}: dropping torn final record", path.display());
                    }
                    Ok(_) => unreachable!("only the last line can be incomplete"),
                    Err(e) => {
                        return Err(Error::Data(format!("{}:{lineno}: {e}", path.display())));
                    }
                }
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(&path)?;
        if log.metadata()?.len() != valid_len {
            log.set_len(valid_len)?;
        }
        Ok(Self {
            dir,
            blobs,
            tree: RwLock::new(tree),
            log: Mutex::new(log),
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn blobs(&self) -> &BlobStore {
        &self.blobs
    }

    pub fn create_root(
        &self,
        weights: &ModelWeights,
        description: impl Into<String>,
        domain_tag: impl Into<String>,
    ) -> Result<ModelNode> {
        let domain_tag = domain_tag.into();
        if domain_tag.trim().is_empty() {
            return Err(Error::Validation("domain_tag must not be empty".into()));
        }
        if let Some(id) = self.read().roots.get(&domain_tag) {
            return Err(Error::Conflict(format!("domain {domain_tag:?} already has root node {id}")));
        }
        let payload_ref = self.save_checkpoint(&Checkpoint::Base(weights.clone()))?;
        self.commit(|tree| ModelNode {
            node_id: tree.next_id(),
            parent_id: None,
            kind: NodeKind::Base,
            payload_ref,
            description: description.into(),
            created_at: Utc::now(),
            domain_tag,
        })
    }

    pub fn create_child(
        &self,
        parent_id: NodeId,
        adapter: &AdapterWeights<f32>,
        description: impl Into<String>,
    ) -> Result<ModelNode> {
        let parent = self.get(parent_id)?;
        let root_arch = self.resolve_weights(self.lineage(parent_id)?[0].node_id)?.arch();
        if !adapter.fits(&root_arch) {
            return Err(Error::Shape(format!(
                "adapter does not fit the architecture of tree {:?}",
                parent.domain_tag
            )));
        }
        let payload_ref = self.save_checkpoint(&Checkpoint::Adapter(adapter.clone()))?;
        self.commit(|tree| ModelNode {
            node_id: tree.next_id(),
            parent_id: Some(parent_id),
            kind: NodeKind::Adapter,
            payload_ref,
            description: description.into(),
            created_at: Utc::now(),
            domain_tag: parent.domain_tag.clone(),
        })
    }

    /// Appends a node under the write lock, so ids follow commit order.
    fn commit(&self, make: impl FnOnce(&Tree) -> ModelNode) -> Result<ModelNode> {
        let mut tree = self.tree.write().expect("registry lock poisoned");
        let node = make(&tree);
        // check invariants on a dry run before touching the log
        if let (NodeKind::Base, Some(id)) = (node.kind, tree.roots.get(&node.domain_tag)) {
            return Err(Error::Conflict(format!(
                "domain {:?} already has root node {id}",
                node.domain_tag
            )));
        }
        let mut line = serde_json::to_vec(&node)?;
        line.push(b'\n');
        {
            let mut log = self.log.lock().expect("registry log poisoned");
            log.write_all(&line)?;
            log.sync_data()?;
        }
        tree.admit(node.clone())?;
        Ok(node)
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Tree> {
        self.tree.read().expect("registry lock poisoned")
    }

    pub fn get(&self, id: NodeId) -> Result<ModelNode> {
        self.read().get(id).cloned()
    }

    /// All nodes in creation order.
    pub fn nodes(&self) -> Vec<ModelNode> {
        self.read().nodes.clone()
    }

    pub fn roots(&self) -> Vec<ModelNode> {
        self.read().nodes.iter().filter(|n| n.parent_id.is_none()).cloned().collect()
    }

    pub fn root_for(&self, domain_tag: &str) -> Option<ModelNode> {
        let tree = self.read();
        let id = *tree.roots.get(domain_tag)?;
        tree.get(id).ok().cloned()
    }

    pub fn children(&self, id: NodeId) -> Result<Vec<ModelNode>> {
        let tree = self.read();
        tree.get(id)?;
        Ok(tree.nodes.iter().filter(|n| n.parent_id == Some(id)).cloned().collect())
    }

    /// Path from the root to `id`, inclusive.
    pub fn lineage(&self, id: NodeId) -> Result<Vec<ModelNode>> {
        let tree = self.read();
        let mut path = vec![tree.get(id)?.clone()];
        while let Some(parent) = path.last().and_then(|n| n.parent_id) {
            path.push(tree.get(parent)?.clone());
        }
        path.reverse();
        Ok(path)
    }

    pub fn save_checkpoint(&self, checkpoint: &Checkpoint) -> Result<String> {
        self.blobs.put(&checkpoint.to_bytes()?)
    }

    /// Loads and decodes a checkpoint; a missing or damaged blob is reported
    /// as corruption naming its hash.
    pub fn load_checkpoint(&self, hash: &str) -> Result<Checkpoint> {
        let bytes = self.blobs.get(hash).map_err(|e| match e {
            Error::NotFound(_) => Error::Corruption {
                hash: hash.to_string(),
                reason: "checkpoint blob is missing".into(),
            },
            other => other,
        })?;
        Checkpoint::from_bytes(&bytes).map_err(|e| Error::Corruption {
            hash: hash.to_string(),
            reason: e.to_string(),
        })
    }

    /// Root base weights plus every adapter delta on the root→node path, in
    /// order. Results are cached per node.
    pub fn resolve_weights(&self, id: NodeId) -> Result<Arc<ModelWeights>> {
        if let Some(w) = self.cache.lock().expect("cache poisoned").get(&id) {
            return Ok(Arc::clone(w));
        }
        let lineage = self.lineage(id)?;
        // start from the deepest cached ancestor
        let (start, mut weights) = {
            let cache = self.cache.lock().expect("cache poisoned");
            lineage
                .iter()
                .enumerate()
                .rev()
                .find_map(|(i, n)| cache.get(&n.node_id).map(|w| (i + 1, Arc::clone(w))))
                .map_or((0, None), |(i, w)| (i, Some(w)))
        };
        for node in &lineage[start..] {
            let next = match (self.load_checkpoint(&node.payload_ref)?, weights) {
                (Checkpoint::Base(w), None) if node.kind == NodeKind::Base => w,
                (Checkpoint::Adapter(a), Some(w)) if node.kind == NodeKind::Adapter => a.apply_to(&w)?,
                _ => {
                    return Err(Error::Corruption {
                        hash: node.payload_ref.clone(),
                        reason: format!("checkpoint kind does not match node {}", node.node_id),
                    })
                }
            };
            let next = Arc::new(next);
            self.cache
                .lock()
                .expect("cache poisoned")
                .insert(node.node_id, Arc::clone(&next));
            weights = Some(next);
        }
        Ok(weights.expect("lineage is non-empty"))
    }

    pub fn load_adapter(&self, id: NodeId) -> Result<AdapterWeights<f32>> {
        let node = self.get(id)?;
        match self.load_checkpoint(&node.payload_ref)? {
            Checkpoint::Adapter(a) => Ok(a),
            Checkpoint::Base(_) => Err(Error::Validation(format!("node {id} is a base model"))),
        }
    }
}
