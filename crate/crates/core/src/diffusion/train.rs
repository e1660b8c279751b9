use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::DiffusionConfig;
use super::network::{encode_inputs, Architecture, DenoiserWeights, ModelWeights};
use super::schedule::make_schedule;
use crate::curve::LossCurve;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 64,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub weights: ModelWeights,
    /// `step,loss`
    pub curve: LossCurve,
}

/// Trains a base denoiser with default batch size and optimizer settings.
pub fn train_base(
    dataset: &[(Image, usize)],
    config: &DiffusionConfig,
    steps: usize,
    seed: u64,
) -> Result<TrainedModel> {
    let opts = TrainOptions {
        steps,
        seed,
        ..Default::default()
    };
    train_base_with(dataset, config, &opts)
}

/// Minimizes the mean squared noise-prediction error `||eps - eps_hat(x_t, t, c)||^2`
/// over random `(image, t, noise)` draws.
pub fn train_base_with(
    dataset: &[(Image, usize)],
    config: &DiffusionConfig,
    opts: &TrainOptions,
) -> Result<TrainedModel> {
    let schedule = make_schedule(config)?;
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    if opts.steps == 0 {
        return Err(Error::Validation("training steps must be >= 1".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Validation("batch size must be >= 1".into()));
    }
    let arch = Architecture::from_config(config);
    for (i, (img, p)) in dataset.iter().enumerate() {
        if img.len() != arch.pixels {
            return Err(Error::Data(format!(
                "item {i} has {} pixels, expected {}",
                img.len(),
                arch.pixels
            )));
        }
        if *p >= arch.prompts {
            return Err(Error::UnknownPrompt {
                index: *p,
                vocab: arch.prompts,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut weights = ModelWeights::init(arch, &mut rng);
    let mut adam = Adam::new(opts.adam);
    let mut curve = LossCurve::new(&["step"]);
    let n = opts.batch_size;
    let d = arch.pixels;
    let big_t = schedule.timesteps();
    let scale = 2.0 / (n * d) as f32;

    for step in 1..=opts.steps {
        let mut x_t = Array2::<f32>::zeros((n, d));
        let mut noise = Array2::<f32>::zeros((n, d));
        let mut ts = Vec::with_capacity(n);
        let mut prompts = Vec::with_capacity(n);
        for row in 0..n {
            let (img, prompt) = &dataset[rng.random_range(0..dataset.len())];
            let t = rng.random_range(1..=big_t);
            let signal = schedule.alpha_bar(t).sqrt() as f32;
            let spread = (1.0 - schedule.alpha_bar(t)).sqrt() as f32;
            for (i, &x0) in img.pixels().iter().enumerate() {
                let eps: f64 = StandardNormal.sample(&mut rng);
                let eps = eps as f32;
                noise[[row, i]] = eps;
                x_t[[row, i]] = signal * x0 + spread * eps;
            }
            ts.push(t);
            prompts.push(*prompt);
        }
        let acts = weights.forward(encode_inputs(&arch, x_t.view(), &ts, &prompts));
        let diff = &acts.output - &noise;
        let loss = f64::from(diff.iter().map(|v| v * v).sum::<f32>()) / (n * d) as f64;
        let d_out = diff * scale;
        let grads = weights.backward(&acts, d_out.view());
        adam.step(&mut weights, &grads);
        curve.push(&[step], loss);
        if !loss.is_finite() {
            return Err(Error::Data(format!("training diverged at step {step}")));
        }
    }
    Ok(TrainedModel { weights, curve })
}

/// Convenience for tests and tools that need a weights value of some precision.
pub fn init_weights<F: crate::real::Real>(config: &DiffusionConfig, seed: u64) -> DenoiserWeights<F> {
    DenoiserWeights::init(Architecture::from_config(config), &mut ChaCha8Rng::seed_from_u64(seed))
}
