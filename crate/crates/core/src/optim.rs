use crate::real::Real;

/// A set of flat parameter tensors visited in a fixed order.
pub trait Parameters<F> {
    fn tensors(&self) -> Vec<&[F]>;
    fn tensors_mut(&mut self) -> Vec<&mut [F]>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    cfg: AdamConfig,
    step: i32,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step<P: Parameters<F>>(&mut self, params: &mut P, grads: &P) {
        let grads = grads.tensors();
        let mut params = params.tensors_mut();
        assert_eq!(params.len(), grads.len(), "parameter/gradient tensor count");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![F::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let b1 = F::lit(self.cfg.beta1);
        let b2 = F::lit(self.cfg.beta2);
        let one = F::one();
        let corr1 = F::lit(1.0 - self.cfg.beta1.powi(self.step));
        let corr2 = F::lit(1.0 - self.cfg.beta2.powi(self.step));
        let lr = F::lit(self.cfg.learning_rate);
        let eps = F::lit(self.cfg.epsilon);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Vector(Vec<f64>);

    impl Parameters<f64> for Vector {
        fn tensors(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.1,
            ..Default::default()
        });
        let mut p = Vector(vec![1.0, -2.0]);
        adam.step(&mut p, &Vector(vec![3.0, -0.5]));
        assert!((p.0[0] - 0.9).abs() < 1e-6);
        assert!((p.0[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.05,
            ..Default::default()
        });
        let mut p = Vector(vec![3.0, -4.0]);
        for _ in 0..2000 {
            let g = Vector(p.0.iter().map(|x| 2.0 * x).collect());
            adam.step(&mut p, &g);
        }
        assert!(p.0.iter().all(|x| x.abs() < 1e-2), "{:?}", p.0);
    }
}
