//! Dense epsilon-prediction denoiser with hand-written backpropagation.
//!
//! Input row = noisy pixels ++ sinusoidal time embedding ++ prompt one-hot.
//! Two SiLU hidden layers, linear output of the same width as the image.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::DiffusionConfig;
use crate::error::{Error, Result};
use crate::optim::Parameters;
use crate::real::Real;

pub const LAYERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub pixels: usize,
    pub time_dim: usize,
    pub prompts: usize,
    pub hidden: usize,
}

impl Architecture {
    pub fn from_config(cfg: &DiffusionConfig) -> Self {
        Self {
            pixels: cfg.pixels(),
            time_dim: cfg.time_embed_dim,
            prompts: cfg.prompt_vocab.len(),
            hidden: cfg.hidden_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.pixels + self.time_dim + self.prompts
    }

    /// `(out, in)` of each dense layer.
    pub fn layer_shapes(&self) -> [(usize, usize); LAYERS] {
        [
            (self.hidden, self.input_dim()),
            (self.hidden, self.hidden),
            (self.pixels, self.hidden),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    /// `out x in`
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserWeights<F> {
    arch: Architecture,
    layers: Vec<Dense<F>>,
}

/// Production weights.
pub type ModelWeights = DenoiserWeights<f32>;

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Activations<F> {
    pub input: Array2<F>,
    pre1: Array2<F>,
    h1: Array2<F>,
    pre2: Array2<F>,
    h2: Array2<F>,
    pub output: Array2<F>,
}

impl<F: Real> DenoiserWeights<F> {
    /// Uniform `±1/sqrt(fan_in)` weights and biases.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let layers = arch
            .layer_shapes()
            .iter()
            .map(|&(out, inp)| {
                let bound = 1.0 / (inp as f64).sqrt();
                let mut draw = || F::lit(rng.random_range(-bound..bound));
                let weight = Array2::from_shape_simple_fn((out, inp), &mut draw);
                let bias = Array1::from_shape_simple_fn(out, &mut draw);
                Dense { weight, bias }
            })
            .collect();
        Self { arch, layers }
    }

    pub fn zeros(arch: Architecture) -> Self {
        let layers = arch
            .layer_shapes()
            .iter()
            .map(|&(out, inp)| Dense {
                weight: Array2::zeros((out, inp)),
                bias: Array1::zeros(out),
            })
            .collect();
        Self { arch, layers }
    }

    pub fn from_layers(arch: Architecture, layers: Vec<Dense<F>>) -> Result<Self> {
        let shapes = arch.layer_shapes();
        if layers.len() != LAYERS {
            return Err(Error::Shape(format!(
                "expected {LAYERS} dense layers, got {}",
                layers.len()
            )));
        }
        for (i, (layer, &(out, inp))) in layers.iter().zip(shapes.iter()).enumerate() {
            if layer.weight.dim() != (out, inp) || layer.bias.len() != out {
                return Err(Error::Shape(format!(
                    "layer {i}: expected weight {out}x{inp}, got {:?} / bias {}",
                    layer.weight.dim(),
                    layer.bias.len()
                )));
            }
        }
        Ok(Self { arch, layers })
    }

    /// Zeroes the output layer so the predicted noise is identically zero.
    pub fn zero_output_layer(&mut self) {
        let last = &mut self.layers[LAYERS - 1];
        last.weight.fill(F::zero());
        last.bias.fill(F::zero());
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn layers(&self) -> &[Dense<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<F>] {
        &mut self.layers
    }

    pub fn cast<G: Real>(&self) -> DenoiserWeights<G> {
        let conv = |x: &F| G::lit(x.to_f64_lossy());
        DenoiserWeights {
            arch: self.arch,
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: l.weight.map(conv),
                    bias: l.bias.map(conv),
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn forward(&self, input: Array2<F>) -> Activations<F> {
        let [l1, l2, l3] = [&self.layers[0], &self.layers[1], &self.layers[2]];
        let pre1 = input.dot(&l1.weight.t()) + &l1.bias;
        let h1 = pre1.mapv(silu);
        let pre2 = h1.dot(&l2.weight.t()) + &l2.bias;
        let h2 = pre2.mapv(silu);
        let output = h2.dot(&l3.weight.t()) + &l3.bias;
        Activations {
            input,
            pre1,
            h1,
            pre2,
            h2,
            output,
        }
    }

    pub fn predict_eps(&self, input: Array2<F>) -> Array2<F> {
        self.forward(input).output
    }

    /// Gradients of a scalar objective w.r.t. every weight, given its
    /// gradient `d_out` w.r.t. the network output.
    pub fn backward(&self, acts: &Activations<F>, d_out: ArrayView2<F>) -> Self {
        let d3 = d_out;
        let g3 = Dense {
            weight: d3.t().dot(&acts.h2),
            bias: d3.sum_axis(Axis(0)),
        };
        let mut d2 = d3.dot(&self.layers[2].weight);
        Zip::from(&mut d2)
            .and(&acts.pre2)
            .for_each(|d, &a| *d = *d * silu_grad(a));
        let g2 = Dense {
            weight: d2.t().dot(&acts.h1),
            bias: d2.sum_axis(Axis(0)),
        };
        let mut d1 = d2.dot(&self.layers[1].weight);
        Zip::from(&mut d1)
            .and(&acts.pre1)
            .for_each(|d, &a| *d = *d * silu_grad(a));
        let g1 = Dense {
            weight: d1.t().dot(&acts.input),
            bias: d1.sum_axis(Axis(0)),
        };
        Self {
            arch: self.arch,
            layers: vec![g1, g2, g3],
        }
    }
}

impl<F: Real> Parameters<F> for DenoiserWeights<F> {
    fn tensors(&self) -> Vec<&[F]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn silu<F: Real>(x: F) -> F {
    x * sigmoid(x)
}

fn silu_grad<F: Real>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

/// Sinusoidal embedding of a timestep: `[sin(t w_i)..., cos(t w_i)...]`
/// with `w_i = 10000^(-i / (dim/2))`.
pub fn time_embedding<F: Real>(t: usize, dim: usize) -> Vec<F> {
    let half = dim / 2;
    let mut out = vec![F::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let angle = t as f64 * freq;
        out[i] = F::lit(angle.sin());
        out[half + i] = F::lit(angle.cos());
    }
    out
}

/// Assembles network input rows from noisy images, timesteps and prompts.
pub fn encode_inputs<F: Real>(
    arch: &Architecture,
    x: ArrayView2<F>,
    timesteps: &[usize],
    prompts: &[usize],
) -> Array2<F> {
    let n = x.nrows();
    debug_assert_eq!(timesteps.len(), n);
    debug_assert_eq!(prompts.len(), n);
    let mut input = Array2::zeros((n, arch.input_dim()));
    input.slice_mut(s![.., ..arch.pixels]).assign(&x);
    for (row, (&t, &p)) in timesteps.iter().zip(prompts).enumerate() {
        let emb = time_embedding::<F>(t, arch.time_dim);
        let base = arch.pixels;
        for (j, v) in emb.into_iter().enumerate() {
            input[[row, base + j]] = v;
        }
        input[[row, base + arch.time_dim + p]] = F::one();
    }
    input
}
