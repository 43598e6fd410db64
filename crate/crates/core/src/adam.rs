use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Bias-corrected Adam over a fixed, ordered parameter list.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(lr: f32, param_sizes: &[usize]) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: param_sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: param_sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f32>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "adam: {} params, {} grads, state has {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let t = self.step as f32;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, p) in params.iter_mut().enumerate() {
            if p.numel() != grads[i].len() {
                return Err(CoreError::ShapeMismatch(format!(
                    "adam: param {} has {} elements, grad {}",
                    i,
                    p.numel(),
                    grads[i].len()
                )));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (j, g) in grads[i].iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup over the first 5% of steps, then cosine decay to 10% of peak.
pub fn scheduled_lr(base_lr: f32, step: u64, total_steps: u64) -> f32 {
    let warmup = (total_steps / 20).max(1);
    if step < warmup {
        return base_lr * (step + 1) as f32 / warmup as f32;
    }
    let progress = (step - warmup) as f32 / (total_steps - warmup).max(1) as f32;
    let cos = 0.5 * (1.0 + (std::f32::consts::PI * progress.min(1.0)).cos());
    base_lr * (0.1 + 0.9 * cos)
}
