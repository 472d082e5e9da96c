//! Adam with bias correction and global L2 gradient clipping.

use super::params::{GradStore, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(shapes: &[Tensor]) -> Self {
        Self {
            step: 0,
            m: shapes.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
            v: shapes.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }

    pub fn for_store(store: &ParamStore) -> Self {
        let shapes: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self::new(&shapes)
    }
}

fn update(p: &mut Tensor, g: &Tensor, m: &mut Tensor, v: &mut Tensor, cfg: &AdamConfig, bc1: f64, bc2: f64) {
    let pd = p.data_mut();
    let (md, vd) = (m.data_mut(), v.data_mut());
    for (i, &gi) in g.data().iter().enumerate() {
        md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
        vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
        let m_hat = md[i] / bc1;
        let v_hat = vd[i] / bc2;
        pd[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// One Adam update of aligned `params` / `grads`.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::ShapeMismatch(format!(
                "adam: param {i} {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (bc1, bc2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        update(p, g, m, v, cfg, bc1, bc2);
    }
    Ok(())
}

/// Adam update of every trainable tensor in `store`.
pub fn adam_step_store(store: &mut ParamStore, grads: &GradStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.tensors().len() != store.len() || state.m.len() != store.len() {
        return Err(Error::ShapeMismatch("adam: store, grads and state disagree".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (bc1, bc2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        let i = id.0;
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        update(store.value_mut(id), grads.get(id), m, v, cfg, bc1, bc2);
    }
    for p in store.iter() {
        if !p.value.all_finite() {
            return Err(Error::Numeric(format!("parameter {} became non-finite", p.name)));
        }
    }
    Ok(())
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_l2(grads: &mut [Tensor], max_norm: f64) -> f64 {
    debug_assert!(max_norm > 0.0);
    let norm = grads.iter().map(Tensor::l2_norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}
