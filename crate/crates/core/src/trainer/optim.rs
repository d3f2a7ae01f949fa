use serde::{Deserialize, Serialize};

use crate::nn::{ParamStore, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to parameters of rank two or more.
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.01, grad_clip: 1.0 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), String> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err("eps must be positive; weight_decay and grad_clip non-negative".into());
        }
        Ok(())
    }
}

/// AdamW with global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    cfg: OptimConfig,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    steps: u64,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(cfg: OptimConfig, params: &ParamStore<F>) -> Self {
        let zeros = || params.iter().map(|p| vec![F::zero(); p.tensor.len()]).collect();
        AdamW { cfg, m: zeros(), v: zeros(), steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. `grads[i]` belongs to parameter `i`; `None` means
    /// a zero gradient. Returns the global gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &[Option<&[F]>], lr: f64) -> f64 {
        assert_eq!(grads.len(), self.m.len(), "one gradient slot per parameter");
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|&x| {
                let x = x.to_f64().unwrap_or(f64::NAN);
                x * x
            })
            .sum::<f64>()
            .sqrt();
        let scale = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip { self.cfg.grad_clip / norm } else { 1.0 };

        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let c = |x: f64| F::from_f64(x).expect("finite hyperparameter");
        let (b1f, b2f, one) = (c(b1), c(b2), F::one());
        let (step_size, bc2_sqrt, eps) = (c(lr / bc1), c(bc2.sqrt()), c(self.cfg.eps));
        let scale = c(scale);
        for (i, p) in params.iter_mut().enumerate() {
            if self.cfg.weight_decay > 0.0 && p.tensor.shape().len() >= 2 {
                let decay = c(1.0 - lr * self.cfg.weight_decay);
                p.tensor.data_mut().iter_mut().for_each(|w| *w *= decay);
            }
            let Some(g) = grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let gj = g[j] * scale;
                m[j] = b1f * m[j] + (one - b1f) * gj;
                v[j] = b2f * v[j] + (one - b2f) * gj * gj;
                *w -= step_size * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
            }
        }
        norm
    }
}
