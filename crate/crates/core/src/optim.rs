//! AdamW with a cosine learning-rate schedule.
//!
//! ```text
//! lr_t  = base * (1 + cos(pi * (t - 1) / horizon)) / 2
//! theta = theta - lr_t * wd * theta
//! m     = b1 m + (1 - b1) g
//! v     = b2 v + (1 - b2) g^2
//! theta = theta - lr_t * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
//! ```

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps over which the learning rate decays to zero.
    pub horizon: u64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64, horizon: u64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            horizon,
        }
    }
}

/// Cosine decay from `base` at step 0 to 0 at `horizon`.
pub fn cosine_lr(base: f64, step: u64, horizon: u64) -> f64 {
    if horizon == 0 {
        return base;
    }
    let progress = step.min(horizon) as f64 / horizon as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone)]
pub struct OptState {
    pub config: AdamWConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl OptState {
    pub fn new<'a>(
        config: AdamWConfig,
        params: impl IntoIterator<Item = &'a Tensor>,
    ) -> Result<Self> {
        let first = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            second: first.clone(),
            first,
            step: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Learning rate the next call to [`adamw_step`] will use.
    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.config.lr, self.step, self.config.horizon)
    }
}

/// One AdamW update of `params` in place from `grads`.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptState,
) -> Result<()> {
    if params.len() != state.first.len() || grads.len() != params.len() {
        return Err(shape_err!(
            "optimizer tracks {} tensors, got {} params and {} grads",
            state.first.len(),
            params.len(),
            grads.len()
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
        p.expect_shape(m.shape(), "optimizer param")?;
        g.expect_shape(m.shape(), "optimizer grad")?;
    }

    let cfg = state.config;
    let lr = state.current_lr();
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;

    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gi = gi as f64;
            let m_new = cfg.beta1 * *mi as f64 + (1.0 - cfg.beta1) * gi;
            let v_new = cfg.beta2 * *vi as f64 + (1.0 - cfg.beta2) * gi * gi;
            *mi = m_new as f32;
            *vi = v_new as f32;
            let update = (m_new / bc1) / ((v_new / bc2).sqrt() + cfg.eps);
            *pi = (*pi as f64 * decay - lr * update) as f32;
        }
    }
    Ok(())
}
