//! AdamW with decoupled weight decay, warmup-cosine schedule and global-norm
//! gradient clipping.

use std::f64::consts::PI;

use thiserror::Error;

use crate::model::{GradStore, ParamId, ParamStore, TrainConfig};
use crate::tensor::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("shape mismatch: parameter has {param} values, gradient {grad}, moments {moments}")]
    Shape { param: usize, grad: usize, moments: usize },
    #[error("learning rate must be non-negative, got {0}")]
    NegativeLr(f64),
    #[error("optimizer state does not match the parameter store")]
    StateMismatch,
    #[error("warmup of {warmup} steps must be shorter than the {total}-step schedule")]
    Schedule { warmup: usize, total: usize },
}

/// Linear warmup from zero, then half-cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub lr_peak: f64,
}

impl Schedule {
    pub fn new(warmup_steps: usize, total_steps: usize, lr_peak: f64) -> Result<Self, OptimError> {
        if warmup_steps >= total_steps {
            return Err(OptimError::Schedule { warmup: warmup_steps, total: total_steps });
        }
        Ok(Self { warmup_steps, total_steps, lr_peak })
    }

    /// Schedule for `total_steps` optimizer steps under `train`. Warmup is
    /// shortened when a run is too brief to contain it.
    pub fn from_config(train: &TrainConfig, total_steps: usize) -> Self {
        let total_steps = total_steps.max(1);
        let warmup_steps = train.warmup.steps(total_steps).min(total_steps - 1);
        Self { warmup_steps, total_steps, lr_peak: train.lr }
    }
}

/// Learning rate at `step`; steps past the end clamp to the final value.
pub fn cosine_lr(step: usize, schedule: &Schedule) -> f64 {
    let Schedule { warmup_steps, total_steps, lr_peak } = *schedule;
    let step = step.min(total_steps);
    if step < warmup_steps {
        return lr_peak * step as f64 / warmup_steps as f64;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    lr_peak * 0.5 * (1.0 + (PI * progress).cos())
}

/// Scale every buffer by `max_norm / norm` when the joint L2 norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_buffers<T: Scalar>(buffers: &mut [&mut [T]], max_norm: f64) -> f64 {
    let norm = buffers.iter().flat_map(|b| b.iter()).map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let factor = T::of(max_norm / norm);
        buffers.iter_mut().for_each(|b| b.iter_mut().for_each(|g| *g *= factor));
    }
    norm
}

/// [`clip_buffers`] over every touched gradient slot.
pub fn clip_global_norm<T: Scalar>(grads: &mut GradStore<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(T::of(max_norm / norm));
    }
    norm
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamW {
    fn from(t: &TrainConfig) -> Self {
        Self { beta1: t.beta1, beta2: t.beta2, eps: t.eps, weight_decay: t.weight_decay }
    }
}

impl AdamW {
    /// One update of a single buffer. `t` is the step count after increment;
    /// decay (when `decay` is set) uses the pre-update weights.
    #[allow(clippy::too_many_arguments)]
    pub fn update<T: Scalar>(
        &self,
        w: &mut [T],
        g: &[T],
        m: &mut [T],
        v: &mut [T],
        t: u64,
        lr: f64,
        decay: bool,
    ) -> Result<(), OptimError> {
        if g.len() != w.len() || m.len() != w.len() || v.len() != w.len() {
            return Err(OptimError::Shape { param: w.len(), grad: g.len(), moments: m.len().min(v.len()) });
        }
        if lr.is_nan() || lr < 0.0 {
            return Err(OptimError::NegativeLr(lr));
        }
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let one = T::one();
        let c1 = T::of(1.0 - self.beta1.powi(t as i32));
        let c2 = T::of(1.0 - self.beta2.powi(t as i32));
        let lr_t = T::of(lr);
        let eps = T::of(self.eps);
        let shrink = T::of(if decay { lr * self.weight_decay } else { 0.0 });
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            w[i] = w[i] - lr_t * m_hat / (v_hat.sqrt() + eps) - shrink * w[i];
        }
        Ok(())
    }
}

/// Moments and step counters for every (parameter, group copy) slot.
///
/// Steps are counted per slot: a per-group copy only advances when its group
/// appears in a batch, so its bias correction matches the updates it received.
#[derive(Debug, Clone)]
pub struct OptimState<T> {
    pub hyper: AdamW,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    steps: Vec<Vec<u64>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ParamStore<T>, hyper: AdamW) -> Self {
        let groups = params.groups();
        let specs = params.specs();
        Self {
            hyper,
            m: specs.iter().map(|s| vec![T::zero(); s.numel() * s.copies(groups)]).collect(),
            v: specs.iter().map(|s| vec![T::zero(); s.numel() * s.copies(groups)]).collect(),
            steps: specs.iter().map(|s| vec![0; s.copies(groups)]).collect(),
        }
    }

    /// Updates applied so far to one slot.
    pub fn step(&self, id: ParamId, copy: usize) -> u64 {
        self.steps[id.0][copy]
    }

    pub fn moments(&self, id: ParamId) -> (&[T], &[T]) {
        (&self.m[id.0], &self.v[id.0])
    }
}

/// Apply one AdamW update to every slot that received a gradient. Untouched
/// slots (other groups' banks, blocks outside the composite) are left as is,
/// weight decay included.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &GradStore<T>,
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<(), OptimError> {
    if state.m.len() != params.len() || grads.num_params() != params.len() {
        return Err(OptimError::StateMismatch);
    }
    let hyper = state.hyper;
    for i in 0..params.len() {
        let id = ParamId(i);
        let (n, decay) = {
            let spec = params.spec(id);
            (spec.numel(), spec.decay)
        };
        for copy in 0..grads.copies(id) {
            let Some(g) = grads.slice(id, copy) else { continue };
            state.steps[i][copy] += 1;
            let t = state.steps[i][copy];
            let range = copy * n..(copy + 1) * n;
            hyper.update(
                params.slice_mut(id, copy),
                g,
                &mut state.m[i][range.clone()],
                &mut state.v[i][range],
                t,
                lr,
                decay,
            )?;
        }
    }
    Ok(())
}
