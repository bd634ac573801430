use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    /// Learning rate reached at the end of warmup.
    pub lr_peak: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr_peak: 7e-4, warmup: 4000, beta1: 0.9, beta2: 0.98, eps: 1e-9, clip_norm: 5.0 }
    }
}

impl AdamConfig {
    /// Linear warmup to `lr_peak`, then decay with the inverse square root
    /// of the step. Steps are 1-based.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.lr_peak * (s / w).min((w / s).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_peak > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Statistics of one update.
#[derive(Debug, Clone, Copy)]
pub struct UpdateStats {
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Adam with bias correction and global-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam<F: Real = f32> {
    pub config: AdamConfig,
    step: usize,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig, params: &ParamSet<F>) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![F::zero(); t.numel()]).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// Completed updates.
    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Continues the schedule from `step` with fresh moment estimates.
    pub fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    /// Applies one update. Parameters without a gradient are left alone.
    pub fn update(&mut self, params: &mut ParamSet<F>, grads: &[Option<Tensor<F>>]) -> Result<UpdateStats> {
        if grads.len() != params.len() {
            return Err(Error::contract(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|&x| x.f64() * x.f64())
            .sum::<f64>()
            .sqrt();
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let lr = self.config.learning_rate(self.step);
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (fb1, fb2, fclip) = (F::of(b1), F::of(b2), F::of(clip));
        let (step_size, eps) = (F::of(lr / c1), F::of(self.config.eps));
        let inv_c2 = F::of(1.0 / c2);
        for (k, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[k] else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let mut w = params.get(id).to_vec();
            for (((w, &g), m), v) in w.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * fclip;
                *m = fb1 * *m + (F::one() - fb1) * g;
                *v = fb2 * *v + (F::one() - fb2) * g * g;
                *w -= step_size * *m / ((*v * inv_c2).sqrt() + eps);
            }
            params.set(id, Tensor::new(params.get(id).shape().to_vec(), w)?)?;
        }
        Ok(UpdateStats { lr, grad_norm: norm })
    }
}
