//! Deterministic stand-in for a human rater, and oracle-judged evaluation.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::shapes::{l2_sq, render_jittered, ShapeTemplate};
use crate::diffusion::{sample_inpaint_batch, InpaintRequest, ModelWeights, Schedule, Trajectory};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::preference::{pairs_from_feedback, FeedbackRecord, PairSource, PreferencePair, DISLIKE, LIKE};

pub const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preference {
    First,
    Second,
    Tie,
}

impl Preference {
    pub fn reversed(self) -> Self {
        match self {
            Self::First => Self::Second,
            Self::Second => Self::First,
            Self::Tie => Self::Tie,
        }
    }
}

/// L2 distance to the prompt's template over the hole pixels of `mask`.
pub fn hole_distance(img: &Image, mask: &Mask, template: &ShapeTemplate) -> Result<f64> {
    if img.len() != mask.len() || template.pixels.len() != mask.len() {
        return Err(Error::Shape(format!(
            "image ({}), mask ({}) and template ({}) sizes differ",
            img.len(),
            mask.len(),
            template.pixels.len()
        )));
    }
    Ok(l2_sq(img.pixels(), template.pixels.pixels(), Some(mask)).sqrt())
}

/// Prefers the image whose hole region is closer to the prompt's template.
pub fn oracle_prefer(a: &Image, b: &Image, mask: &Mask, template: &ShapeTemplate) -> Result<Preference> {
    let da = hole_distance(a, mask, template)?;
    let db = hole_distance(b, mask, template)?;
    Ok(if (da - db).abs() <= TIE_TOLERANCE {
        Preference::Tie
    } else if da < db {
        Preference::First
    } else {
        Preference::Second
    })
}

/// Per-image like/dislike for a group sharing prompt and mask: the closer
/// half is liked, the rest disliked. A group whose distances all tie is liked
/// uniformly and therefore yields no pairs.
pub fn oracle_rate_group(images: &[&Image], mask: &Mask, template: &ShapeTemplate) -> Result<Vec<i32>> {
    let dists = images
        .iter()
        .map(|img| hole_distance(img, mask, template))
        .collect::<Result<Vec<f64>>>()?;
    let (lo, hi) = dists
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    if hi - lo <= TIE_TOLERANCE {
        return Ok(vec![LIKE; images.len()]);
    }
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.sort_by(|&i, &j| dists[i].total_cmp(&dists[j]));
    let liked = images.len().div_ceil(2).min(images.len() - 1).max(1);
    let mut labels = vec![DISLIKE; images.len()];
    for &i in &order[..liked] {
        labels[i] = LIKE;
    }
    Ok(labels)
}

/// Distribution of inpainting requests used for sampling and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    /// Position jitter of the conditioning shape.
    pub jitter: usize,
    /// Hole rectangle side range (inclusive). `0` means the whole canvas is a hole.
    pub min_hole: usize,
    pub max_hole: usize,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            jitter: 2,
            min_hole: 8,
            max_hole: 12,
        }
    }
}

impl ScenarioSpec {
    /// Pure generation: every pixel is a hole.
    pub fn unconditional() -> Self {
        Self {
            jitter: 0,
            min_hole: 0,
            max_hole: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintScenario {
    pub prompt_index: usize,
    pub known: Image,
    pub mask: Mask,
}

pub fn random_scenario<R: Rng + ?Sized>(rng: &mut R, templates: &[ShapeTemplate], spec: &ScenarioSpec) -> InpaintScenario {
    let prompt_index = rng.random_range(0..templates.len());
    random_scenario_for(rng, templates, prompt_index, spec)
}

pub fn random_scenario_for<R: Rng + ?Sized>(
    rng: &mut R,
    templates: &[ShapeTemplate],
    prompt_index: usize,
    spec: &ScenarioSpec,
) -> InpaintScenario {
    let template = &templates[prompt_index];
    let side = template.pixels.side();
    let (known, _) = render_jittered(template, spec.jitter, rng);
    let mask = if spec.max_hole == 0 {
        Mask::all_holes(side)
    } else {
        let lo = spec.min_hole.clamp(1, side);
        let hi = spec.max_hole.clamp(lo, side);
        let h = rng.random_range(lo..=hi);
        let w = rng.random_range(lo..=hi);
        let r0 = rng.random_range(0..=side - h);
        let c0 = rng.random_range(0..=side - w);
        Mask::rect_hole(side, r0, c0, h, w)
    };
    InpaintScenario {
        prompt_index,
        known,
        mask,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinRate {
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
}

impl WinRate {
    pub fn total(&self) -> usize {
        self.wins + self.ties + self.losses
    }

    /// Wins plus half the ties, over all comparisons.
    pub fn rate(&self) -> f64 {
        (self.wins as f64 + 0.5 * self.ties as f64) / self.total() as f64
    }
}

/// Oracle-judged head-to-head: each comparison shares prompt, mask and
/// conditioning image; candidate samples with seed `seed + 2i`, baseline with
/// `seed + 2i + 1`.
pub fn win_rate(
    candidate: &ModelWeights,
    baseline: &ModelWeights,
    schedule: &Schedule,
    templates: &[ShapeTemplate],
    n_pairs: usize,
    seed: u64,
    spec: &ScenarioSpec,
) -> Result<WinRate> {
    if n_pairs == 0 {
        return Err(Error::Validation("n_pairs must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenarios: Vec<InpaintScenario> = (0..n_pairs).map(|_| random_scenario(&mut rng, templates, spec)).collect();
    let requests = |offset: u64| -> Vec<InpaintRequest<'_>> {
        scenarios
            .iter()
            .enumerate()
            .map(|(i, s)| InpaintRequest {
                known: &s.known,
                mask: &s.mask,
                prompt_index: s.prompt_index,
                seed: seed.wrapping_add(2 * (i as u64 + 1)).wrapping_add(offset),
            })
            .collect()
    };
    let cand = sample_inpaint_batch(candidate, &requests(0), schedule, false)?;
    let base = sample_inpaint_batch(baseline, &requests(1), schedule, false)?;
    let mut tally = WinRate {
        wins: 0,
        ties: 0,
        losses: 0,
    };
    for ((s, (a, _)), (b, _)) in scenarios.iter().zip(&cand).zip(&base) {
        match oracle_prefer(a, b, &s.mask, &templates[s.prompt_index])? {
            Preference::First => tally.wins += 1,
            Preference::Second => tally.losses += 1,
            Preference::Tie => tally.ties += 1,
        }
    }
    Ok(tally)
}

/// Generated samples grouped by scenario, with oracle ratings.
#[derive(Debug, Clone)]
pub struct RatedSamples {
    pub samples: Vec<(String, Arc<Trajectory>)>,
    pub feedback: Vec<FeedbackRecord>,
}

impl RatedSamples {
    pub fn pairs(&self, max_per_group: usize) -> Result<Vec<PreferencePair>> {
        pairs_from_feedback(&self.samples, &self.feedback, max_per_group, PairSource::Oracle)
    }
}

/// Samples `groups * group_size` trajectories, `group_size` per random
/// scenario, and rates each group with the oracle.
pub fn oracle_rated_samples(
    weights: &ModelWeights,
    schedule: &Schedule,
    templates: &[ShapeTemplate],
    groups: usize,
    group_size: usize,
    seed: u64,
    spec: &ScenarioSpec,
) -> Result<RatedSamples> {
    if group_size < 2 {
        return Err(Error::Validation("groups need at least two samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenarios: Vec<InpaintScenario> = (0..groups).map(|_| random_scenario(&mut rng, templates, spec)).collect();
    let mut requests = Vec::with_capacity(groups * group_size);
    for s in &scenarios {
        for _ in 0..group_size {
            requests.push(InpaintRequest {
                known: &s.known,
                mask: &s.mask,
                prompt_index: s.prompt_index,
                seed: rng.random(),
            });
        }
    }
    let results = sample_inpaint_batch(weights, &requests, schedule, true)?;
    let mut samples = Vec::with_capacity(results.len());
    let mut feedback = Vec::with_capacity(results.len());
    for (g, (s, chunk)) in scenarios.iter().zip(results.chunks(group_size)).enumerate() {
        let images: Vec<&Image> = chunk.iter().map(|(img, _)| img).collect();
        let labels = oracle_rate_group(&images, &s.mask, &templates[s.prompt_index])?;
        for (k, ((_, tr), label)) in chunk.iter().zip(labels).enumerate() {
            let id = format!("g{g}-{k}");
            samples.push((id.clone(), Arc::new(tr.clone().expect("recorded"))));
            feedback.push(FeedbackRecord::new(id, label, "oracle"));
        }
    }
    Ok(RatedSamples { samples, feedback })
}
