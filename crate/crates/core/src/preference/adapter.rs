use ndarray::Array2;
use rand::Rng;

use crate::diffusion::{Architecture, DenoiserWeights};
use crate::error::{Error, Result};
use crate::optim::Parameters;
use crate::real::Real;

/// Low-rank factors of one dense layer: `delta = scale * B A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer<F> {
    /// `rank x in`
    pub a: Array2<F>,
    /// `out x rank`
    pub b: Array2<F>,
}

/// Low-rank additive deltas for every dense layer of a denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights<F> {
    rank: usize,
    alpha: f64,
    layers: Vec<LoraLayer<F>>,
}

pub const DEFAULT_RANK: usize = 4;
pub const DEFAULT_ALPHA: f64 = 8.0;

impl<F: Real> AdapterWeights<F> {
    /// `A` uniform in `±1/sqrt(in)`, `B = 0`, so the delta starts at zero.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rank: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        check_rank(rank, alpha)?;
        let layers = arch
            .layer_shapes()
            .iter()
            .map(|&(out, inp)| {
                let bound = 1.0 / (inp as f64).sqrt();
                LoraLayer {
                    a: Array2::from_shape_simple_fn((rank, inp), || F::lit(rng.random_range(-bound..bound))),
                    b: Array2::zeros((out, rank)),
                }
            })
            .collect();
        Ok(Self { rank, alpha, layers })
    }

    pub fn zeros(arch: &Architecture, rank: usize, alpha: f64) -> Result<Self> {
        check_rank(rank, alpha)?;
        let layers = arch
            .layer_shapes()
            .iter()
            .map(|&(out, inp)| LoraLayer {
                a: Array2::zeros((rank, inp)),
                b: Array2::zeros((out, rank)),
            })
            .collect();
        Ok(Self { rank, alpha, layers })
    }

    pub fn from_layers(rank: usize, alpha: f64, layers: Vec<LoraLayer<F>>) -> Result<Self> {
        check_rank(rank, alpha)?;
        for (i, l) in layers.iter().enumerate() {
            if l.a.nrows() != rank || l.b.ncols() != rank {
                return Err(Error::Shape(format!("adapter layer {i} does not have rank {rank}")));
            }
        }
        Ok(Self { rank, alpha, layers })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn layers(&self) -> &[LoraLayer<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LoraLayer<F>] {
        &mut self.layers
    }

    pub fn fits(&self, arch: &Architecture) -> bool {
        self.layers.len() == arch.layer_shapes().len()
            && self
                .layers
                .iter()
                .zip(arch.layer_shapes())
                .all(|(l, (out, inp))| l.a.ncols() == inp && l.b.nrows() == out)
    }

    /// Dense delta `scale * B A` of layer `i`.
    pub fn delta(&self, i: usize) -> Array2<F> {
        let l = &self.layers[i];
        l.b.dot(&l.a) * F::lit(self.scale())
    }

    /// `base + scale * B A` for every layer; biases are untouched.
    pub fn apply_to(&self, base: &DenoiserWeights<F>) -> Result<DenoiserWeights<F>> {
        if !self.fits(&base.arch()) {
            return Err(Error::Shape("adapter does not match the denoiser architecture".into()));
        }
        let mut out = base.clone();
        for (i, layer) in out.layers_mut().iter_mut().enumerate() {
            layer.weight += &self.delta(i);
        }
        Ok(out)
    }

    /// Chain rule from dense-weight gradients to the low-rank factors.
    pub fn grads_from_dense(&self, dense: &DenoiserWeights<F>) -> Self {
        let s = F::lit(self.scale());
        let layers = self
            .layers
            .iter()
            .zip(dense.layers())
            .map(|(l, g)| LoraLayer {
                a: l.b.t().dot(&g.weight) * s,
                b: g.weight.dot(&l.a.t()) * s,
            })
            .collect();
        Self {
            rank: self.rank,
            alpha: self.alpha,
            layers,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            rank: self.rank,
            alpha: self.alpha,
            layers: self
                .layers
                .iter()
                .map(|l| LoraLayer {
                    a: Array2::zeros(l.a.raw_dim()),
                    b: Array2::zeros(l.b.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> AdapterWeights<G> {
        let conv = |x: &F| G::lit(x.to_f64_lossy());
        AdapterWeights {
            rank: self.rank,
            alpha: self.alpha,
            layers: self
                .layers
                .iter()
                .map(|l| LoraLayer {
                    a: l.a.map(conv),
                    b: l.b.map(conv),
                })
                .collect(),
        }
    }
}

impl<F: Real> Parameters<F> for AdapterWeights<F> {
    fn tensors(&self) -> Vec<&[F]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.a.as_slice().expect("standard layout"),
                    l.b.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.a.as_slice_mut().expect("standard layout"),
                    l.b.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }
}

fn check_rank(rank: usize, alpha: f64) -> Result<()> {
    if rank == 0 {
        return Err(Error::Validation("adapter rank must be >= 1".into()));
    }
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::Validation(format!("adapter alpha must be positive, got {alpha}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch() -> Architecture {
        Architecture {
            pixels: 4,
            time_dim: 2,
            prompts: 2,
            hidden: 3,
        }
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = DenoiserWeights::<f32>::init(arch(), &mut rng);
        let adapter = AdapterWeights::<f32>::init(&arch(), 4, 8.0, &mut rng).unwrap();
        assert_eq!(adapter.apply_to(&base).unwrap(), base);
        assert_eq!(adapter.scale(), 2.0);
    }

    #[test]
    fn delta_is_scaled_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut adapter = AdapterWeights::<f64>::init(&arch(), 2, 4.0, &mut rng).unwrap();
        adapter.layers_mut()[1].b.fill(0.5);
        let d = adapter.delta(1);
        let l = &adapter.layers()[1];
        for r in 0..3 {
            for c in 0..3 {
                let manual: f64 = (0..2).map(|k| l.b[[r, k]] * l.a[[k, c]]).sum::<f64>() * 2.0;
                assert!((d[[r, c]] - manual).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rank_zero_rejected() {
        assert!(AdapterWeights::<f32>::zeros(&arch(), 0, 8.0).is_err());
        assert!(AdapterWeights::<f32>::zeros(&arch(), 2, 0.0).is_err());
    }
}
