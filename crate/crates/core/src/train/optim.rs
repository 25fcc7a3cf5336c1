use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::Tensor;

/// Linear warmup to `lr_peak`, then cosine decay to exactly zero at
/// `total_tokens`.
pub fn cosine_lr(step_tokens: u64, lr_peak: f64, warmup_tokens: u64, total_tokens: u64) -> f64 {
    let t = step_tokens.min(total_tokens);
    if t < warmup_tokens {
        return lr_peak * t as f64 / warmup_tokens as f64;
    }
    let span = total_tokens.saturating_sub(warmup_tokens);
    if span == 0 {
        return lr_peak;
    }
    let progress = (t - warmup_tokens) as f64 / span as f64;
    lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Global L2 norm over every tensor; fails on the first non-finite one.
pub fn global_norm(grads: &impl Parameters) -> Result<f64> {
    let mut sq = 0.0;
    let mut bad = None;
    grads.visit("", &mut |name, t| {
        if bad.is_none() && t.data().iter().any(|v| !v.is_finite()) {
            bad = Some(name);
        }
        sq += t.sq_norm();
    });
    match bad {
        Some(name) => Err(Error::NonFinite(format!("gradient {name}"))),
        None => Ok(sq.sqrt()),
    }
}

/// Rescales `grads` so the global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut impl Parameters, max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads)?;
    if norm > max_norm {
        let s = max_norm / norm;
        grads.visit_mut("", &mut |_, t| t.scale(s));
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One AdamW update of a flat slice. `step` counts from 1.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    hp: &AdamWParams,
    decay: bool,
) {
    let c1 = 1.0 - hp.beta1.powi(step as i32);
    let c2 = 1.0 - hp.beta2.powi(step as i32);
    let wd = if decay { hp.weight_decay } else { 0.0 };
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= lr * (m_hat / (v_hat.sqrt() + hp.eps) + wd * theta[i]);
    }
}

/// Layer-norm parameters and routers are not decayed.
pub fn is_decayed(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    let in_norm = name.split('.').any(|part| part.starts_with("norm") || part == "final_norm");
    !(in_norm || last == "router")
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub hp: AdamWParams,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &impl Parameters, hp: AdamWParams) -> Self {
        let mut m = Vec::new();
        params.visit("", &mut |_, t| m.push(t.zeros_like()));
        AdamW {
            hp,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// Updates every tensor except those for which `skip(name)` holds;
    /// skipped tensors keep their values and moments.
    pub fn step(
        &mut self,
        params: &mut impl Parameters,
        grads: &impl Parameters,
        lr: f64,
        skip: &dyn Fn(&str) -> bool,
    ) -> Result<()> {
        let mut g = Vec::with_capacity(self.m.len());
        grads.visit("", &mut |_, t| g.push(t.data().to_vec()));
        if g.len() != self.m.len() {
            return Err(Error::State("gradient and optimizer state disagree"));
        }
        self.step += 1;
        let step = self.step;
        let hp = self.hp;
        let mut k = 0;
        let mut mismatch = None;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut("", &mut |name, t| {
            let i = k;
            k += 1;
            if t.numel() != g[i].len() || t.dims() != ms[i].dims() {
                mismatch.get_or_insert((t.dims().to_vec(), ms[i].dims().to_vec()));
                return;
            }
            if skip(&name) {
                return;
            }
            let decay = is_decayed(&name);
            adamw_update(t.data_mut(), &g[i], ms[i].data_mut(), vs[i].data_mut(), step, lr, &hp, decay);
        });
        match mismatch {
            Some((a, b)) => Err(Error::shape("adamw", &a, &b)),
            None => Ok(()),
        }
    }

    /// True when every moment is finite.
    pub fn is_finite(&self) -> bool {
        self.m.iter().chain(&self.v).all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}
