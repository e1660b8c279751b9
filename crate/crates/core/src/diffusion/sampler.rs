//! Forward noising, reverse means, per-step transition densities and
//! mask-constrained ancestral sampling.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::network::{encode_inputs, DenoiserWeights};
use super::schedule::Schedule;
use super::trajectory::Trajectory;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::real::Real;

/// `sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * noise`.
pub fn forward_diffuse(x0: &Image, t: usize, noise: &Image, schedule: &Schedule) -> Result<Image> {
    schedule.check_step(t)?;
    if x0.len() != noise.len() {
        return Err(Error::Shape(format!(
            "image has {} pixels, noise has {}",
            x0.len(),
            noise.len()
        )));
    }
    let signal = schedule.alpha_bar(t).sqrt();
    let spread = (1.0 - schedule.alpha_bar(t)).sqrt();
    let px = x0
        .pixels()
        .iter()
        .zip(noise.pixels())
        .map(|(&x, &n)| (signal * f64::from(x) + spread * f64::from(n)) as f32)
        .collect();
    Image::new(x0.side(), px)
}

fn check_prompt<F: Real>(weights: &DenoiserWeights<F>, prompt_index: usize) -> Result<()> {
    let vocab = weights.arch().prompts;
    if prompt_index >= vocab {
        return Err(Error::UnknownPrompt {
            index: prompt_index,
            vocab,
        });
    }
    Ok(())
}

fn check_pixels<F: Real>(weights: &DenoiserWeights<F>, what: &str, len: usize) -> Result<()> {
    let want = weights.arch().pixels;
    if len != want {
        return Err(Error::Shape(format!("{what} has {len} pixels, model expects {want}")));
    }
    Ok(())
}

/// Converts predicted noise into the reverse-step mean, in place.
///
/// `mu = (x_t - beta[t]/sqrt(1-alpha_bar[t]) * eps) / sqrt(alpha[t])`
pub(crate) fn mean_from_eps<F: Real>(x: ArrayView2<F>, eps: &mut Array2<F>, timesteps: &[usize], schedule: &Schedule) {
    for (row, &t) in timesteps.iter().enumerate() {
        let coef = F::lit(schedule.eps_coef(t));
        let inv_sqrt_alpha = F::lit(1.0 / schedule.alpha(t).sqrt());
        let mut e = eps.row_mut(row);
        for (ev, &xv) in e.iter_mut().zip(x.row(row)) {
            *ev = (xv - coef * *ev) * inv_sqrt_alpha;
        }
    }
}

/// Reverse-step means for a batch of noisy rows.
pub fn predict_means<F: Real>(
    weights: &DenoiserWeights<F>,
    x: ArrayView2<F>,
    timesteps: &[usize],
    prompts: &[usize],
    schedule: &Schedule,
) -> Array2<F> {
    let input = encode_inputs(&weights.arch(), x, timesteps, prompts);
    let mut eps = weights.predict_eps(input);
    mean_from_eps(x, &mut eps, timesteps, schedule);
    eps
}

/// Mean of `p(x_{t-1} | x_t, prompt)` under the denoiser.
pub fn predict_mean<F: Real>(
    weights: &DenoiserWeights<F>,
    x_t: &Image,
    t: usize,
    prompt_index: usize,
    schedule: &Schedule,
) -> Result<Vec<F>> {
    schedule.check_step(t)?;
    check_prompt(weights, prompt_index)?;
    check_pixels(weights, "x_t", x_t.len())?;
    let x = image_row::<F>(x_t);
    Ok(predict_means(weights, x.view(), &[t], &[prompt_index], schedule).into_raw_vec_and_offset().0)
}

pub(crate) fn image_row<F: Real>(img: &Image) -> Array2<F> {
    Array2::from_shape_vec((1, img.len()), img.pixels().iter().map(|&v| F::lit(f64::from(v))).collect())
        .expect("row shape")
}

/// Isotropic Gaussian log-density of `x` around `mean`, optionally restricted
/// to the hole pixels of `mask`.
pub fn gaussian_logprob<F: Real>(x: &[f32], mean: &[F], sigma2: f64, mask: Option<&Mask>) -> f64 {
    let mut sq = 0.0;
    let mut dims = 0usize;
    for (i, (&xv, &m)) in x.iter().zip(mean).enumerate() {
        if mask.is_some_and(|mk| mk.is_known(i)) {
            continue;
        }
        let d = f64::from(xv) - m.to_f64_lossy();
        sq += d * d;
        dims += 1;
    }
    -0.5 * dims as f64 * (2.0 * std::f64::consts::PI * sigma2).ln() - sq / (2.0 * sigma2)
}

fn check_density_step(t: usize, schedule: &Schedule) -> Result<()> {
    schedule.check_step(t)?;
    if t < 2 || schedule.sigma2(t) <= 0.0 {
        return Err(Error::DegenerateVariance(t));
    }
    Ok(())
}

/// `log N(x_prev; mu(x_t, t, prompt), sigma2[t] I)` over all pixels.
pub fn step_logprob<F: Real>(
    weights: &DenoiserWeights<F>,
    x_t: &Image,
    x_prev: &Image,
    t: usize,
    prompt_index: usize,
    schedule: &Schedule,
) -> Result<f64> {
    transition_logprob(weights, x_t, x_prev, t, prompt_index, None, schedule)
}

/// Transition log-density restricted to the hole pixels of `mask` (all
/// pixels when `mask` is `None`). Known pixels are overwritten by the sampler
/// and carry no policy density.
pub fn transition_logprob<F: Real>(
    weights: &DenoiserWeights<F>,
    x_t: &Image,
    x_prev: &Image,
    t: usize,
    prompt_index: usize,
    mask: Option<&Mask>,
    schedule: &Schedule,
) -> Result<f64> {
    check_density_step(t, schedule)?;
    check_pixels(weights, "x_prev", x_prev.len())?;
    let mean = predict_mean(weights, x_t, t, prompt_index, schedule)?;
    if x_t.pixels().iter().chain(x_prev.pixels()).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite state".into()));
    }
    Ok(gaussian_logprob(x_prev.pixels(), &mean, schedule.sigma2(t), mask))
}

/// One inpainting job inside a batched sampling run.
#[derive(Debug, Clone, Copy)]
pub struct InpaintRequest<'a> {
    pub known: &'a Image,
    pub mask: &'a Mask,
    pub prompt_index: usize,
    pub seed: u64,
}

/// Samples one inpainting of `known` outside the hole of `mask`.
#[allow(clippy::too_many_arguments)]
pub fn sample_inpaint<F: Real>(
    weights: &DenoiserWeights<F>,
    known: &Image,
    mask: &Mask,
    prompt_index: usize,
    seed: u64,
    schedule: &Schedule,
    record: bool,
) -> Result<(Image, Option<Trajectory>)> {
    let req = InpaintRequest {
        known,
        mask,
        prompt_index,
        seed,
    };
    let mut out = sample_inpaint_batch(weights, &[req], schedule, record)?;
    Ok(out.pop().expect("one result per request"))
}

/// Ancestral sampling with known-region replacement, run for several
/// requests at once. Each request draws from its own seeded stream, so its
/// result does not depend on the other requests in the batch.
pub fn sample_inpaint_batch<F: Real>(
    weights: &DenoiserWeights<F>,
    requests: &[InpaintRequest<'_>],
    schedule: &Schedule,
    record: bool,
) -> Result<Vec<(Image, Option<Trajectory>)>> {
    let arch = weights.arch();
    for req in requests {
        check_prompt(weights, req.prompt_index)?;
        check_pixels(weights, "known image", req.known.len())?;
        check_pixels(weights, "mask", req.mask.len())?;
        if req.mask.hole_count() == 0 {
            return Err(Error::NothingToInpaint);
        }
    }
    let n = requests.len();
    let d = arch.pixels;
    let side = requests.first().map_or(0, |r| r.known.side());
    let big_t = schedule.timesteps();
    let mut rngs: Vec<ChaCha8Rng> = requests.iter().map(|r| ChaCha8Rng::seed_from_u64(r.seed)).collect();
    let prompts: Vec<usize> = requests.iter().map(|r| r.prompt_index).collect();

    let mut x = Array2::<F>::zeros((n, d));
    for (row, rng) in rngs.iter_mut().enumerate() {
        for v in x.row_mut(row).iter_mut() {
            *v = F::lit(f64::from(gaussian(rng) as f32));
        }
    }
    let mut histories: Vec<Vec<Image>> = vec![Vec::new(); n];
    if record {
        snapshot(&x, side, &mut histories);
    }

    for t in (1..=big_t).rev() {
        let ts = vec![t; n];
        let mean = predict_means(weights, x.view(), &ts, &prompts, schedule);
        let sigma = F::lit(schedule.sigma2(t).sqrt());
        let keep = if t > 1 {
            Some((schedule.alpha_bar(t - 1).sqrt(), (1.0 - schedule.alpha_bar(t - 1)).sqrt()))
        } else {
            None
        };
        for (row, (req, rng)) in requests.iter().zip(rngs.iter_mut()).enumerate() {
            let mut xr = x.row_mut(row);
            let mr = mean.row(row);
            if t > 1 {
                for (xv, &m) in xr.iter_mut().zip(mr) {
                    *xv = m + sigma * F::lit(gaussian(rng));
                }
                let (signal, spread) = keep.expect("t > 1");
                for (i, xv) in xr.iter_mut().enumerate() {
                    let z = gaussian(rng);
                    if req.mask.is_known(i) {
                        let k = f64::from(req.known.pixels()[i]);
                        *xv = F::lit(f64::from((signal * k + spread * z) as f32));
                    }
                }
            } else {
                xr.assign(&mr);
                for (i, xv) in xr.iter_mut().enumerate() {
                    if req.mask.is_known(i) {
                        *xv = F::lit(f64::from(req.known.pixels()[i]));
                    }
                }
            }
            // states are stored at image precision
            for xv in xr.iter_mut() {
                *xv = F::lit(f64::from(xv.to_f64_lossy() as f32));
            }
        }
        if record {
            snapshot(&x, side, &mut histories);
        }
    }

    let mut results = Vec::with_capacity(n);
    for (row, req) in requests.iter().enumerate() {
        let mut px: Vec<f32> = x.row(row).iter().map(|v| v.to_f64_lossy() as f32).collect();
        for (i, p) in px.iter_mut().enumerate() {
            if req.mask.is_known(i) {
                *p = req.known.pixels()[i];
            }
        }
        let image = Image::new(side, px)?;
        let trajectory = if record {
            let mut states = std::mem::take(&mut histories[row]);
            *states.last_mut().expect("recorded") = image.clone();
            Some(Trajectory {
                prompt_index: req.prompt_index,
                mask: req.mask.clone(),
                states,
                seed: req.seed,
            })
        } else {
            None
        };
        results.push((image, trajectory));
    }
    Ok(results)
}

fn snapshot<F: Real>(x: &Array2<F>, side: usize, histories: &mut [Vec<Image>]) {
    for (row, hist) in histories.iter_mut().enumerate() {
        let px = x.row(row).iter().map(|v| v.to_f64_lossy() as f32).collect();
        hist.push(Image::new(side, px).expect("sampler states are finite"));
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}
