//! Optimization: AdamW with decoupled weight decay, the warmup+cosine
//! learning-rate schedule, and global gradient-norm clipping.
//!
//! All moment and norm arithmetic runs in f64 regardless of the model's
//! scalar type, so f32 training follows the textbook update exactly and
//! deterministically.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Gradients aligned to a parameter store: slot `i` belongs to the store
/// entry with index `i` (`None` when that entry received no gradient).
pub type GradSlots<S> = Vec<Option<Tensor<S>>>;

/// Empty gradient slots sized for a store.
pub fn empty_grads<S: Scalar>(store: &ParamStore<S>) -> GradSlots<S> {
    (0..store.len()).map(|_| None).collect()
}

/// AdamW with decoupled decay: per step,
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
/// `p ← p − lr·( m̂/(√v̂+ε) + wd·p )` with bias-corrected moments.
/// Decay is applied directly to the weights of every updated tensor,
/// never through the gradients.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<S: Scalar>(store: &ParamStore<S>, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let m = store
            .ids()
            .into_iter()
            .map(|id| vec![0.0; store.get(id).numel()])
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamW {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First, second moment of one parameter (for serialization).
    pub fn moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        (&self.m[id.index()], &self.v[id.index()])
    }

    /// Restore optimizer state (moments and step counter) verbatim.
    pub fn restore(&mut self, id: ParamId, m: Vec<f64>, v: Vec<f64>) -> Result<()> {
        if m.len() != self.m[id.index()].len() || v.len() != self.v[id.index()].len() {
            return Err(Error::shape(
                "adamw.restore",
                format!(
                    "moment lengths {}/{} do not match parameter of {} elements",
                    m.len(),
                    v.len(),
                    self.m[id.index()].len()
                ),
            ));
        }
        self.m[id.index()] = m;
        self.v[id.index()] = v;
        Ok(())
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    /// One update over every trainable parameter that has a gradient.
    /// Trainable parameters without a gradient still receive weight decay
    /// (their gradient is treated as zero).
    pub fn step<S: Scalar>(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &GradSlots<S>,
        lr: f64,
    ) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape(
                "adamw.step",
                format!("{} gradient slots for {} parameters", grads.len(), store.len()),
            ));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in store.ids() {
            let i = id.index();
            if !store.entry(id).trainable {
                continue;
            }
            let numel = store.get(id).numel();
            if let Some(g) = &grads[i] {
                if g.shape() != store.get(id).shape() {
                    return Err(Error::shape(
                        "adamw.step",
                        format!(
                            "gradient shape {:?} does not match parameter '{}' {:?}",
                            g.shape(),
                            store.name(id),
                            store.get(id).shape()
                        ),
                    ));
                }
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let grad = grads[i].as_ref();
            let tensor = store.get_mut(id);
            let data = tensor.data_mut();
            for j in 0..numel {
                let g = grad.map_or(0.0, |t| t.data()[j].to_f64());
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let p = data[j].to_f64();
                let update = m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p;
                data[j] = S::from_f64(p - lr * update);
            }
        }
        Ok(())
    }
}

/// Warmup+cosine schedule: linear from `warmup_lr` to `base_lr` over
/// `warmup_steps`, then cosine from `base_lr` down to `min_lr`, reaching
/// it exactly at `total_steps`. Steps beyond the end stay at `min_lr`.
pub fn cosine_lr(
    step: u64,
    total_steps: u64,
    warmup_steps: u64,
    warmup_lr: f64,
    base_lr: f64,
    min_lr: f64,
) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        let t = step as f64 / warmup_steps as f64;
        return warmup_lr + (base_lr - warmup_lr) * t;
    }
    if step >= total_steps {
        return min_lr;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 || step == warmup_steps {
        // Exact at the boundary; `min + (base-min)` need not round back
        // to `base` in floating point.
        return base_lr;
    }
    let u = (step - warmup_steps) as f64 / span as f64;
    min_lr + (base_lr - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * u).cos())
}

/// Global L2 norm over all gradient slots, accumulated in f64.
pub fn grad_norm<S: Scalar>(grads: &GradSlots<S>) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        for v in g.data() {
            let x = v.to_f64();
            sq += x * x;
        }
    }
    sq.sqrt()
}

/// Scale all gradients so the global L2 norm is at most `max_norm`;
/// returns the factor applied (1.0 when already within bounds).
pub fn clip_grad_norm<S: Scalar>(grads: &mut GradSlots<S>, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip threshold must be positive");
    let norm = grad_norm(grads);
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut().flatten() {
        for v in g.data_mut() {
            *v = S::from_f64(v.to_f64() * scale);
        }
    }
    scale
}
