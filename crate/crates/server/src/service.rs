//! The service behind the API: request checks, feedback submission and the
//! task handlers that drive sampling, fine-tuning and inference.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use prefpaint_core::diffusion::{
    make_schedule, sample_inpaint, sample_inpaint_batch, train_base, DiffusionConfig, InpaintRequest, ModelWeights,
    Schedule, Trajectory,
};
use prefpaint_core::image::{Image, Mask};
use prefpaint_core::preference::{
    check_feedback_value, finetune_run, pairs_from_feedback, DpoConfig, FeedbackRecord, PairSource, PreferencePair,
    DEFAULT_MAX_PAIRS_PER_GROUP,
};
use prefpaint_core::registry::{ModelNode, ModelRegistry, NodeKind};
use prefpaint_core::synthetic::{gen_dataset, random_scenario_for, templates, ScenarioSpec, ShapeTemplate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::Id;
use crate::orchestrator::TaskHandler;
use crate::store::{BatchStatus, SampleBatch, SampleItem, ShowcaseEntry, Store};
use crate::task::{FinetuneJob, InferJob, Job, SampleJob, Task, TrainBaseJob};

pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub diffusion: DiffusionConfig,
    /// Defaults for fine-tunes; requests may override single fields.
    pub dpo: DpoConfig,
    /// Where sampled batches draw their conditioning images and masks from.
    pub scenario: ScenarioSpec,
    pub dataset_per_class: usize,
    pub dataset_jitter: usize,
    pub train_steps: usize,
    pub max_pairs_per_group: usize,
    /// Seed for tasks that do not carry their own.
    pub seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            diffusion: DiffusionConfig::default(),
            dpo: DpoConfig::default(),
            scenario: ScenarioSpec::default(),
            dataset_per_class: 100,
            dataset_jitter: 2,
            train_steps: 3000,
            max_pairs_per_group: DEFAULT_MAX_PAIRS_PER_GROUP,
            seed: 0,
        }
    }
}

impl ServiceConfig {
    /// Reads `dir/config.json` if present, defaults otherwise.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        match fs::read(&path) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(e.into()),
        }
    }
}

/// Outcome of a feedback submission.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeedbackOutcome {
    pub batch_id: Id,
    pub accepted: usize,
    pub pairs_formed: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeView {
    pub node_id: Id,
    pub parent_id: Option<Id>,
    pub kind: NodeKind,
    pub description: String,
    pub domain_tag: String,
    pub payload_ref: String,
    pub created_at: DateTime<Utc>,
    pub depth: usize,
    pub children: Vec<Id>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeView {
    pub roots: Vec<Id>,
    /// Parents always precede their children.
    pub nodes: Vec<NodeView>,
}

pub struct Service {
    config: ServiceConfig,
    schedule: Schedule,
    templates: Vec<ShapeTemplate>,
    registry: ModelRegistry,
    store: Store,
    _lock: fs::File,
}

/// Registry and store cache their files in memory, so only one process may
/// own a data directory at a time.
pub const LOCK_FILE: &str = ".lock";

fn lock_data_dir(dir: &Path) -> Result<fs::File> {
    fs::create_dir_all(dir)?;
    let file = fs::OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(dir.join(LOCK_FILE))?;
    match file.try_lock() {
        Ok(()) => Ok(file),
        Err(fs::TryLockError::WouldBlock) => Err(Error::DataDirLocked(dir.to_path_buf())),
        Err(fs::TryLockError::Error(e)) => Err(e.into()),
    }
}

impl Service {
    /// Opens the registry and store under `data_dir`.
    pub fn open(data_dir: impl AsRef<Path>, config: ServiceConfig) -> Result<Self> {
        let dir = data_dir.as_ref();
        config.diffusion.validate()?;
        config.dpo.validate(config.diffusion.timesteps)?;
        let schedule = make_schedule(&config.diffusion)?;
        let templates = templates(&config.diffusion.prompt_vocab, config.diffusion.image_side)?;
        let lock = lock_data_dir(dir)?;
        Ok(Self {
            _lock: lock,
            registry: ModelRegistry::open(dir)?,
            store: Store::open(dir)?,
            config,
            schedule,
            templates,
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn registry(&self) -> &ModelRegistry {
        &self.registry
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn templates(&self) -> &[ShapeTemplate] {
        &self.templates
    }

    pub fn node(&self, id: Id) -> Result<ModelNode> {
        Ok(self.registry.get(id.0)?)
    }

    fn task_seed(&self, explicit: Option<u64>, task_id: Id) -> u64 {
        explicit.unwrap_or_else(|| splitmix(self.config.seed ^ splitmix(task_id.0)))
    }

    /// Registers externally trained weights as the root of `domain`.
    pub fn import_base(&self, weights: &ModelWeights, domain: &str, description: &str) -> Result<ModelNode> {
        let arch = weights.arch();
        if arch.pixels != self.config.diffusion.pixels() || arch.prompts != self.config.diffusion.prompt_vocab.len() {
            return Err(prefpaint_core::Error::Shape(format!(
                "checkpoint has {} pixels and {} prompts, service expects {} and {}",
                arch.pixels,
                arch.prompts,
                self.config.diffusion.pixels(),
                self.config.diffusion.prompt_vocab.len()
            ))
            .into());
        }
        Ok(self.registry.create_root(weights, description, domain)?)
    }

    pub fn tree(&self, domain: Option<&str>) -> TreeView {
        let nodes: Vec<ModelNode> = self
            .registry
            .nodes()
            .into_iter()
            .filter(|n| domain.is_none_or(|d| n.domain_tag == d))
            .collect();
        let mut views: Vec<NodeView> = Vec::with_capacity(nodes.len());
        for n in &nodes {
            let depth = match n.parent_id {
                None => 0,
                Some(p) => views.iter().find(|v| v.node_id.0 == p).map_or(0, |v| v.depth + 1),
            };
            views.push(NodeView {
                node_id: Id(n.node_id),
                parent_id: n.parent_id.map(Id),
                kind: n.kind,
                description: n.description.clone(),
                domain_tag: n.domain_tag.clone(),
                payload_ref: n.payload_ref.clone(),
                created_at: n.created_at,
                depth,
                children: nodes
                    .iter()
                    .filter(|c| c.parent_id == Some(n.node_id))
                    .map(|c| Id(c.node_id))
                    .collect(),
            });
        }
        TreeView {
            roots: views.iter().filter(|v| v.parent_id.is_none()).map(|v| v.node_id).collect(),
            nodes: views,
        }
    }

    /// Decodes and checks uploaded PGMs, stores them as blobs and builds the
    /// inference job.
    pub fn prepare_infer(&self, node_id: Id, image: &[u8], mask: &[u8], prompt: &str, seed: Option<u64>) -> Result<Job> {
        self.node(node_id)?;
        let img = Image::from_pgm(image)?;
        let m = Mask::from_pgm(mask)?;
        self.check_infer_inputs(&img, &m, prompt)?;
        let blobs = self.registry.blobs();
        Ok(Job::Infer(InferJob {
            node_id,
            image_ref: blobs.put(image)?,
            mask_ref: blobs.put(mask)?,
            prompt: prompt.to_string(),
            seed,
        }))
    }

    fn check_infer_inputs(&self, img: &Image, mask: &Mask, prompt: &str) -> Result<usize> {
        let side = self.config.diffusion.image_side;
        if img.side() != side || mask.side() != side {
            return Err(prefpaint_core::Error::Shape(format!(
                "image is {0}x{0} and mask {1}x{1}; both must be {side}x{side}",
                img.side(),
                mask.side()
            ))
            .into());
        }
        let p = self.config.diffusion.prompt_index(prompt)?;
        if mask.hole_count() == 0 {
            return Err(prefpaint_core::Error::NothingToInpaint.into());
        }
        Ok(p)
    }

    /// Checks that need the registry or store; run before enqueueing and
    /// again when the task starts.
    pub fn check_job(&self, job: &Job) -> Result<()> {
        match job {
            Job::TrainBase(j) => {
                if self.registry.root_for(&j.domain).is_some() {
                    return Err(Error::conflict(format!("domain {:?} already has a root", j.domain)));
                }
            }
            Job::SamplePairs(j) => {
                self.node(j.node_id)?;
                for p in &j.prompts {
                    self.config.diffusion.prompt_index(p)?;
                }
            }
            Job::Finetune(j) => {
                j.dpo.validate(self.config.diffusion.timesteps)?;
                self.finetune_batches(j)?;
            }
            Job::Infer(j) => {
                self.node(j.node_id)?;
                self.config.diffusion.prompt_index(&j.prompt)?;
            }
        }
        Ok(())
    }

    /// The submitted batches named by a fine-tune, all generated inside the
    /// lineage of its node and yielding at least one pair between them.
    fn finetune_batches(&self, job: &FinetuneJob) -> Result<Vec<SampleBatch>> {
        let lineage: HashSet<u64> = self.registry.lineage(job.node_id.0)?.iter().map(|n| n.node_id).collect();
        let mut seen = HashSet::new();
        let mut batches = Vec::with_capacity(job.batch_ids.len());
        for &id in &job.batch_ids {
            if !seen.insert(id) {
                return Err(Error::validation(format!("batch {id} listed twice")));
            }
            let batch = self.store.batch(id).map_err(|_| Error::validation(format!("unknown batch {id}")))?;
            if batch.status != BatchStatus::Submitted {
                return Err(Error::validation(format!("batch {id} has not been rated yet")));
            }
            if !lineage.contains(&batch.node_id.0) {
                return Err(Error::validation(format!(
                    "batch {id} was generated by node {}, outside the lineage of node {}",
                    batch.node_id, job.node_id
                )));
            }
            batches.push(batch);
        }
        if batches.iter().all(|b| b.pairs_formed == Some(0)) {
            return Err(prefpaint_core::Error::Feedback("the selected batches form no preference pairs".into()).into());
        }
        Ok(batches)
    }

    fn load_samples(&self, batch: &SampleBatch) -> Result<Vec<(String, Arc<Trajectory>)>> {
        batch
            .items
            .iter()
            .map(|item| {
                let bytes = self.registry.blobs().get(&item.trajectory_ref)?;
                Ok((item.sample_id.clone(), Arc::new(Trajectory::from_bytes(&bytes)?)))
            })
            .collect()
    }

    /// Records like (`0`) / dislike (`-1`) ratings for every item of an open
    /// batch and closes it.
    pub fn submit_feedback(&self, batch_id: Id, ratings: &[(String, i32)], rater_id: &str) -> Result<FeedbackOutcome> {
        let batch = self.store.batch(batch_id)?;
        if batch.status == BatchStatus::Submitted {
            return Err(Error::conflict(format!("batch {batch_id} was already submitted")));
        }
        for (_, value) in ratings {
            check_feedback_value(*value)?;
        }
        let ids: HashSet<&str> = batch.items.iter().map(|i| i.sample_id.as_str()).collect();
        let mut rated = HashSet::new();
        for (sample_id, _) in ratings {
            if !ids.contains(sample_id.as_str()) {
                return Err(Error::validation(format!("sample {sample_id} is not part of batch {batch_id}")));
            }
            if !rated.insert(sample_id.as_str()) {
                return Err(Error::validation(format!("sample {sample_id} rated twice")));
            }
        }
        if rated.len() != ids.len() {
            return Err(Error::validation(format!(
                "all items must be rated ({} of {} rated)",
                rated.len(),
                ids.len()
            )));
        }
        let records: Vec<FeedbackRecord> = ratings
            .iter()
            .map(|(id, v)| FeedbackRecord::new(id.clone(), *v, rater_id))
            .collect();
        let samples = self.load_samples(&batch)?;
        let pairs = pairs_from_feedback(&samples, &records, self.config.max_pairs_per_group, PairSource::Human)?.len();
        self.store.submit(batch_id, records, pairs)?;
        Ok(FeedbackOutcome {
            batch_id,
            accepted: ratings.len(),
            pairs_formed: pairs,
            warning: (pairs == 0).then(|| "no group has both a liked and a disliked sample; no pairs formed".into()),
        })
    }

    fn run_train_base(&self, task: &Task, job: &TrainBaseJob) -> Result<String> {
        let seed = self.task_seed(job.seed, task.task_id);
        let dataset = gen_dataset(&self.templates, self.config.dataset_per_class, self.config.dataset_jitter, seed)?;
        let trained = train_base(&dataset, &self.config.diffusion, job.steps, seed)?;
        let description = if job.description.is_empty() {
            format!("base model, {} steps, seed {seed}", job.steps)
        } else {
            job.description.clone()
        };
        let root = self.registry.create_root(&trained.weights, description, &job.domain)?;
        Ok(root.node_id.to_string())
    }

    fn run_sample(&self, task: &Task, job: &SampleJob) -> Result<String> {
        let weights = self.registry.resolve_weights(job.node_id.0)?;
        let vocab = &self.config.diffusion.prompt_vocab;
        let prompts: Vec<usize> = if job.prompts.is_empty() {
            (0..vocab.len()).collect()
        } else {
            job.prompts
                .iter()
                .map(|p| self.config.diffusion.prompt_index(p))
                .collect::<prefpaint_core::Result<_>>()?
        };
        let groups = prompts.len().min(job.count);
        let mut rng = ChaCha8Rng::seed_from_u64(self.task_seed(job.seed, task.task_id));
        let scenarios: Vec<(usize, Image, Mask)> = prompts[..groups]
            .iter()
            .map(|&p| {
                let s = random_scenario_for(&mut rng, &self.templates, p, &self.config.scenario);
                (p, s.known.quantized(), s.mask)
            })
            .collect();
        let seeds: Vec<u64> = (0..job.count).map(|_| rng.random()).collect();
        // round-robin keeps group sizes within one of each other
        let requests: Vec<InpaintRequest<'_>> = seeds
            .iter()
            .enumerate()
            .map(|(i, &seed)| {
                let (p, known, mask) = &scenarios[i % groups];
                InpaintRequest {
                    known,
                    mask,
                    prompt_index: *p,
                    seed,
                }
            })
            .collect();
        let results = sample_inpaint_batch(weights.as_ref(), &requests, &self.schedule, true)?;

        let blobs = self.registry.blobs();
        let group_refs = scenarios
            .iter()
            .map(|(_, known, mask)| Ok((blobs.put(&known.to_pgm())?, blobs.put(&mask.to_pgm())?)))
            .collect::<Result<Vec<_>>>()?;
        let mut items = Vec::with_capacity(results.len());
        for (i, ((image, trajectory), req)) in results.into_iter().zip(&requests).enumerate() {
            let trajectory = trajectory.expect("recorded trajectory");
            let (known_ref, mask_ref) = group_refs[i % groups].clone();
            items.push(SampleItem {
                sample_id: String::new(),
                prompt: vocab[req.prompt_index].clone(),
                group: i % groups,
                known_ref,
                mask_ref,
                image_ref: blobs.put(&image.to_pgm())?,
                trajectory_ref: blobs.put(&trajectory.to_bytes())?,
                seed: req.seed,
            });
        }
        let batch = self.store.create_batch(job.node_id, task.task_id, items)?;
        Ok(batch.batch_id.to_string())
    }

    fn run_finetune(&self, task: &Task, job: &FinetuneJob) -> Result<String> {
        let batches = self.finetune_batches(job)?;
        let mut pairs: Vec<PreferencePair> = Vec::new();
        for batch in &batches {
            let samples = self.load_samples(batch)?;
            pairs.extend(pairs_from_feedback(
                &samples,
                &batch.feedback,
                self.config.max_pairs_per_group,
                PairSource::Human,
            )?);
        }
        let parent = self.registry.resolve_weights(job.node_id.0)?;
        let seed = self.task_seed(job.seed, task.task_id);
        let outcome = finetune_run(parent.as_ref(), &pairs, &self.schedule, &job.dpo, seed)?;
        if let (Some(first), Some(last)) = (
            outcome.curve.mean_where_first(0),
            outcome.curve.mean_where_first(job.dpo.epochs - 1),
        ) {
            log::info!("fine-tune of node {}: epoch loss {first:.4} -> {last:.4}", job.node_id);
        }
        let description = if job.description.is_empty() {
            let ids: Vec<String> = job.batch_ids.iter().map(Id::to_string).collect();
            format!("fine-tuned on {} pairs from batches {}", pairs.len(), ids.join(", "))
        } else {
            job.description.clone()
        };
        let child = self.registry.create_child(job.node_id.0, &outcome.adapter, description)?;
        Ok(child.node_id.to_string())
    }

    fn run_infer(&self, task: &Task, job: &InferJob) -> Result<String> {
        let blobs = self.registry.blobs();
        let image = Image::from_pgm(&blobs.get(&job.image_ref)?)?;
        let mask = Mask::from_pgm(&blobs.get(&job.mask_ref)?)?;
        let prompt_index = self.check_infer_inputs(&image, &mask, &job.prompt)?;
        let weights = self.registry.resolve_weights(job.node_id.0)?;
        let seed = self.task_seed(job.seed, task.task_id);
        let (output, _) = sample_inpaint(weights.as_ref(), &image, &mask, prompt_index, seed, &self.schedule, false)?;
        let entry = self.store.add_showcase(ShowcaseEntry {
            entry_id: Id(0),
            node_id: job.node_id,
            task_id: task.task_id,
            prompt: job.prompt.clone(),
            input_ref: job.image_ref.clone(),
            mask_ref: job.mask_ref.clone(),
            output_ref: blobs.put(&output.to_pgm())?,
            seed,
            created_at: Utc::now(),
        })?;
        Ok(entry.entry_id.to_string())
    }
}

impl TaskHandler for Service {
    fn handle(&self, task: &Task) -> Result<String> {
        self.check_job(&task.job)?;
        match &task.job {
            Job::TrainBase(j) => self.run_train_base(task, j),
            Job::SamplePairs(j) => self.run_sample(task, j),
            Job::Finetune(j) => self.run_finetune(task, j),
            Job::Infer(j) => self.run_infer(task, j),
        }
    }
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
