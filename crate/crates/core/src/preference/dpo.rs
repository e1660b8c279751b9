//! Per-denoising-step direct preference optimization.
//!
//! For a winner/loser pair and a timestep `t`, each trajectory contributes the
//! log-ratio of its recorded transition `x_t -> x_{t-1}` under the policy
//! (frozen parent plus adapter) and under the frozen parent:
//!
//! ```text
//! z    = [log pi(w,t) - log ref(w,t)] - [log pi(l,t) - log ref(l,t)]
//! loss = -log sigmoid(beta_pref * z)
//! ```
//!
//! Densities are taken over hole pixels only; known pixels are pasted by the
//! sampler rather than drawn from the policy.

use std::sync::Arc;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adapter::{AdapterWeights, DEFAULT_ALPHA, DEFAULT_RANK};
use crate::curve::LossCurve;
use crate::diffusion::network::encode_inputs;
use crate::diffusion::sampler::{mean_from_eps, predict_means};
use crate::diffusion::{DenoiserWeights, Schedule, Trajectory};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Human,
    Oracle,
}

/// Two same-prompt, same-mask trajectories with a preference label.
#[derive(Debug, Clone)]
pub struct PreferencePair {
    pub winner: Arc<Trajectory>,
    pub loser: Arc<Trajectory>,
    pub prompt_index: usize,
    pub source: PairSource,
}

impl PreferencePair {
    pub fn new(winner: Arc<Trajectory>, loser: Arc<Trajectory>, source: PairSource) -> Result<Self> {
        if winner.prompt_index != loser.prompt_index {
            return Err(Error::Pair(format!(
                "prompts differ: {} vs {}",
                winner.prompt_index, loser.prompt_index
            )));
        }
        if winner.mask != loser.mask {
            return Err(Error::Pair("masks differ".into()));
        }
        if winner.states.len() != loser.states.len() {
            return Err(Error::Pair(format!(
                "trajectory lengths differ: {} vs {}",
                winner.states.len(),
                loser.states.len()
            )));
        }
        if winner.seed == loser.seed {
            return Err(Error::Pair(format!("winner and loser share seed {}", winner.seed)));
        }
        Ok(Self {
            prompt_index: winner.prompt_index,
            winner,
            loser,
            source,
        })
    }

    pub fn swapped(&self) -> Self {
        Self {
            winner: Arc::clone(&self.loser),
            loser: Arc::clone(&self.winner),
            prompt_index: self.prompt_index,
            source: self.source,
        }
    }

    fn check_against(&self, schedule: &Schedule, pixels: usize) -> Result<()> {
        for tr in [&self.winner, &self.loser] {
            if tr.timesteps() != schedule.timesteps() {
                return Err(Error::Pair(format!(
                    "trajectory has {} steps, schedule has {}",
                    tr.timesteps(),
                    schedule.timesteps()
                )));
            }
            if tr.mask.len() != pixels || tr.states.iter().any(|s| s.len() != pixels) {
                return Err(Error::Pair(format!("trajectory states do not have {pixels} pixels")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub beta_pref: f64,
    /// Timesteps drawn per pair per batch (`K`).
    pub timestep_subsample: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_pairs: usize,
    pub adapter_rank: usize,
    pub adapter_alpha: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta_pref: 0.1,
            timestep_subsample: 8,
            learning_rate: 1e-4,
            epochs: 4,
            batch_pairs: 16,
            adapter_rank: DEFAULT_RANK,
            adapter_alpha: DEFAULT_ALPHA,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if !(self.beta_pref > 0.0) || !self.beta_pref.is_finite() {
            return Err(Error::Validation(format!("beta_pref must be > 0, got {}", self.beta_pref)));
        }
        if self.timestep_subsample == 0 || self.timestep_subsample + 1 > timesteps {
            return Err(Error::Validation(format!(
                "timestep_subsample must be in 1..={}, got {}",
                timesteps.saturating_sub(1),
                self.timestep_subsample
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Validation("learning_rate must be > 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be >= 1".into()));
        }
        if self.batch_pairs == 0 {
            return Err(Error::Validation("batch_pairs must be >= 1".into()));
        }
        Ok(())
    }
}

/// `-log sigmoid(x)`, computed without overflow.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// DPO objective anchored at a frozen reference; the policy is the
/// reference plus a trainable adapter.
pub struct DpoObjective<'a, F> {
    reference: &'a DenoiserWeights<F>,
    schedule: &'a Schedule,
    beta: f64,
}

/// Per-item diagnostics of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTerms {
    /// `z` before scaling by `beta_pref`.
    pub margin: f64,
    pub loss: f64,
}

impl<'a, F: Real> DpoObjective<'a, F> {
    pub fn new(reference: &'a DenoiserWeights<F>, schedule: &'a Schedule, beta_pref: f64) -> Self {
        Self {
            reference,
            schedule,
            beta: beta_pref,
        }
    }

    fn check_items(&self, items: &[(&PreferencePair, usize)]) -> Result<()> {
        let pixels = self.reference.arch().pixels;
        for (pair, t) in items {
            self.schedule.check_step(*t)?;
            if *t < 2 {
                return Err(Error::DegenerateVariance(*t));
            }
            pair.check_against(self.schedule, pixels)?;
            if pair.prompt_index >= self.reference.arch().prompts {
                return Err(Error::UnknownPrompt {
                    index: pair.prompt_index,
                    vocab: self.reference.arch().prompts,
                });
            }
        }
        Ok(())
    }

    /// Mean loss over `items` and its gradient w.r.t. the adapter factors.
    pub fn evaluate(
        &self,
        adapter: &AdapterWeights<F>,
        items: &[(&PreferencePair, usize)],
    ) -> Result<(f64, AdapterWeights<F>, Vec<StepTerms>)> {
        self.check_items(items)?;
        if items.is_empty() {
            return Ok((0.0, adapter.zeros_like(), Vec::new()));
        }
        let policy = adapter.apply_to(self.reference)?;
        let arch = policy.arch();
        let d = arch.pixels;
        let rows = items.len() * 2;

        let mut x = Array2::<F>::zeros((rows, d));
        let mut ts = Vec::with_capacity(rows);
        let mut prompts = Vec::with_capacity(rows);
        for (k, (pair, t)) in items.iter().enumerate() {
            for (j, tr) in [&pair.winner, &pair.loser].into_iter().enumerate() {
                let mut row = x.row_mut(2 * k + j);
                for (dst, &src) in row.iter_mut().zip(tr.state(*t).pixels()) {
                    *dst = F::lit(f64::from(src));
                }
                ts.push(*t);
                prompts.push(pair.prompt_index);
            }
        }

        let acts = policy.forward(encode_inputs(&arch, x.view(), &ts, &prompts));
        let mut mean_pol = acts.output.clone();
        mean_from_eps(x.view(), &mut mean_pol, &ts, self.schedule);
        let mean_ref = predict_means(self.reference, x.view(), &ts, &prompts, self.schedule);

        let n = items.len() as f64;
        let mut d_out = Array2::<F>::zeros((rows, d));
        let mut total = 0.0;
        let mut terms = Vec::with_capacity(items.len());
        for (k, (pair, t)) in items.iter().enumerate() {
            let var = self.schedule.sigma2(*t);
            // d mu / d eps_hat
            let dmu_deps = -self.schedule.eps_coef(*t) / self.schedule.alpha(*t).sqrt();
            let mut log_ratio = [0.0f64; 2];
            for (j, tr) in [&pair.winner, &pair.loser].into_iter().enumerate() {
                let row = 2 * k + j;
                let prev = tr.state(*t - 1).pixels();
                let mut acc = 0.0;
                for i in 0..d {
                    if tr.mask.is_known(i) {
                        continue;
                    }
                    let xv = f64::from(prev[i]);
                    let dp = xv - mean_pol[[row, i]].to_f64_lossy();
                    let dr = xv - mean_ref[[row, i]].to_f64_lossy();
                    acc += dr * dr - dp * dp;
                }
                log_ratio[j] = acc / (2.0 * var);
            }
            let margin = log_ratio[0] - log_ratio[1];
            let loss = neg_log_sigmoid(self.beta * margin);
            total += loss;
            terms.push(StepTerms { margin, loss });
            let dloss_dmargin = -self.beta * sigmoid(-self.beta * margin) / n;
            for (j, tr) in [&pair.winner, &pair.loser].into_iter().enumerate() {
                let row = 2 * k + j;
                let sign = if j == 0 { 1.0 } else { -1.0 };
                let prev = tr.state(*t - 1).pixels();
                for i in 0..d {
                    if tr.mask.is_known(i) {
                        continue;
                    }
                    let dp = f64::from(prev[i]) - mean_pol[[row, i]].to_f64_lossy();
                    // d log pi / d mu = (x_prev - mu) / var
                    d_out[[row, i]] = F::lit(sign * dloss_dmargin * dp / var * dmu_deps);
                }
            }
        }
        let dense_grads = policy.backward(&acts, d_out.view());
        Ok((total / n, adapter.grads_from_dense(&dense_grads), terms))
    }

    /// Mean loss only.
    pub fn loss(&self, adapter: &AdapterWeights<F>, items: &[(&PreferencePair, usize)]) -> Result<f64> {
        Ok(self.evaluate(adapter, items)?.0)
    }
}

/// Loss and adapter gradient for one pair at one timestep.
pub fn dpo_step_loss<F: Real>(
    reference: &DenoiserWeights<F>,
    adapter: &AdapterWeights<F>,
    pair: &PreferencePair,
    t: usize,
    schedule: &Schedule,
    cfg: &DpoConfig,
) -> Result<(f64, AdapterWeights<F>)> {
    let objective = DpoObjective::new(reference, schedule, cfg.beta_pref);
    let (loss, grad, _) = objective.evaluate(adapter, &[(pair, t)])?;
    Ok((loss, grad))
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<F> {
    pub adapter: AdapterWeights<F>,
    /// `epoch,batch,loss`
    pub curve: LossCurve,
}

/// Trains a fresh adapter on top of `parent` from preference pairs. The
/// parent doubles as the frozen reference and is never modified.
pub fn finetune_run<F: Real>(
    parent: &DenoiserWeights<F>,
    pairs: &[PreferencePair],
    schedule: &Schedule,
    cfg: &DpoConfig,
    seed: u64,
) -> Result<FinetuneOutcome<F>> {
    cfg.validate(schedule.timesteps())?;
    if pairs.is_empty() {
        return Err(Error::Feedback("no opposing-label pairs collected".into()));
    }
    let arch = parent.arch();
    for pair in pairs {
        pair.check_against(schedule, arch.pixels)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adapter = AdapterWeights::<F>::init(&arch, cfg.adapter_rank, cfg.adapter_alpha, &mut rng)?;
    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..Default::default()
    });
    let objective = DpoObjective::new(parent, schedule, cfg.beta_pref);
    let mut curve = LossCurve::new(&["epoch", "batch"]);
    let steps_available = schedule.timesteps() - 1;
    let mut order: Vec<usize> = (0..pairs.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (batch, chunk) in order.chunks(cfg.batch_pairs).enumerate() {
            let mut items = Vec::with_capacity(chunk.len() * cfg.timestep_subsample);
            for &p in chunk {
                for k in index::sample(&mut rng, steps_available, cfg.timestep_subsample) {
                    items.push((&pairs[p], k + 2));
                }
            }
            let (loss, grad, _) = objective.evaluate(&adapter, &items)?;
            adam.step(&mut adapter, &grad);
            curve.push(&[epoch, batch], loss);
        }
    }
    log::debug!(
        "finetune: {} pairs, {} optimizer steps, final batch loss {:?}",
        pairs.len(),
        adam.steps_taken(),
        curve.losses().last()
    );
    Ok(FinetuneOutcome { adapter, curve })
}
