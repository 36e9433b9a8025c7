use super::{DiffError, Grads, ParamSet, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with an optional per-parameter learning-rate multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Multiplies `config.lr` for each parameter.
    pub lr_scale: Vec<f64>,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.rows, t.cols)).collect();
        Self { config, step: 0, m: zeros(), v: zeros(), lr_scale: vec![1.0; params.len()] }
    }

    /// Applies one update. A zero gradient leaves parameters unchanged.
    pub fn update(&mut self, params: &mut ParamSet, grads: &Grads) -> Result<(), DiffError> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(DiffError::Shape(format!(
                "{} gradients / {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads.iter()) {
            if params.get(id).shape() != g.shape() || self.m[id.0].shape() != g.shape() {
                return Err(DiffError::Shape(format!("gradient shape for {}", params.name(id))));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in params.ids().zip(grads.iter()) {
            let step = lr * self.lr_scale[id.0];
            let (m, v) = (&mut self.m[id.0].data, &mut self.v[id.0].data);
            let p = &mut params.get_mut(id).data;
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g.data[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g.data[i] * g.data[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= step * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.add("x", Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one_param(1.25);
        let mut adam = Adam::new(&p, AdamConfig::default());
        let g = Grads::zeros_like(&p);
        for _ in 0..5 {
            adam.update(&mut p, &g).unwrap();
        }
        assert_eq!(p.flat(), vec![1.25]);
        assert_eq!(adam.step, 5);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let mut p = one_param(0.0);
        let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        let mut adam = Adam::new(&p, cfg);
        let mut g = Grads::zeros_like(&p);
        g.tensors[0].data[0] = 3.0;
        let mut last = 0.0;
        for _ in 0..200 {
            adam.update(&mut p, &g).unwrap();
            let now = p.flat()[0];
            let delta = now - last;
            assert!(delta < 0.0);
            assert!((delta + cfg.lr).abs() < 1e-6);
            last = now;
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = one_param(0.0);
        let mut adam = Adam::new(&p, AdamConfig::default());
        let other = Grads::zeros_like(&ParamSet::new());
        assert!(adam.update(&mut p, &other).is_err());
    }
}
