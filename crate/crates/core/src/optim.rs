//! AdamW with decoupled weight decay and a linear warmup/decay schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers for an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step_count: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            m: Vec::new(),
            v: Vec::new(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update of `params` using their accumulated gradients; a missing
    /// gradient counts as zero. Parameter order must be the same on every call.
    ///
    /// `θ ← θ − lr·(m̂/(√v̂+eps) + wd·θ)`
    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::Input(format!("learning rate must be >= 0, got {lr}")));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
            return Err(Error::Input("AdamW: parameter list changed between steps".into()));
        }
        for p in params.iter() {
            if let Some(g) = p.grad() {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numeric("AdamW: non-finite gradient".into()));
                }
            }
        }

        self.step_count += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad().map(|g| g.to_vec());
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * data[i]);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then linear decay to zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    /// Warmup length is `ceil(ratio · total)`.
    pub fn with_ratio(peak_lr: f64, warmup_ratio: f64, total_steps: usize) -> Self {
        let warmup_steps = (warmup_ratio.clamp(0.0, 1.0) * total_steps as f64).ceil() as usize;
        LrSchedule {
            peak_lr,
            warmup_steps,
            total_steps,
        }
    }

    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            peak_lr: lr,
            warmup_steps: 0,
            total_steps: usize::MAX,
        }
    }

    /// Rate for the update at zero-based step `t`.
    pub fn lr(&self, t: usize) -> f64 {
        if self.total_steps == usize::MAX {
            return self.peak_lr;
        }
        if self.total_steps == 0 || t >= self.total_steps {
            return 0.0;
        }
        let warmup = self.warmup_steps.min(self.total_steps);
        if t < warmup {
            self.peak_lr * (t + 1) as f64 / warmup as f64
        } else {
            let span = (self.total_steps - warmup) as f64;
            let progress = (t - warmup) as f64 / span;
            self.peak_lr * (1.0 - progress).max(0.0)
        }
    }
}
