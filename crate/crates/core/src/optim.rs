//! AdamW with decoupled weight decay, global-norm clipping and a linear
//! warmup followed by cosine decay. The same arithmetic runs either on plain
//! tensors or on the tape, where it stays differentiable; both paths give
//! bit-identical results.

use datarater_autodiff::{clip_by_global_norm, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added under the square root so the update stays twice
    /// differentiable when a second moment is exactly zero.
    pub eps_root: f64,
    pub weight_decay: f64,
    /// Global-norm clip applied to the gradient before the moments.
    pub clip_norm: Option<f64>,
    pub warmup_steps: u64,
    /// Step at which cosine decay bottoms out; 0 keeps the rate constant
    /// after warmup.
    pub cosine_horizon: u64,
    /// Final learning rate as a fraction of `lr`.
    pub final_lr_ratio: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eps_root: 1e-16,
            weight_decay: 0.0,
            clip_norm: None,
            warmup_steps: 0,
            cosine_horizon: 0,
            final_lr_ratio: 0.1,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps >= 0.0
            && self.eps_root >= 0.0
            && self.eps + self.eps_root > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0)
            && (0.0..=1.0).contains(&self.final_lr_ratio);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings: {self:?}"
            )))
        }
    }

    /// Learning rate for the step taken after `step` completed steps.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.cosine_horizon <= self.warmup_steps {
            return self.lr;
        }
        let span = (self.cosine_horizon - self.warmup_steps) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.final_lr_ratio + (1.0 - self.final_lr_ratio) * cos)
    }
}

/// First and second moments plus the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

fn bias_corrections(cfg: &AdamWConfig, t: u64) -> (f64, f64) {
    let t = t as i32;
    (
        1.0 / (1.0 - cfg.beta1.powi(t)),
        1.0 / (1.0 - cfg.beta2.powi(t)),
    )
}

fn clip_plain(cfg: &AdamWConfig, grads: &[Tensor]) -> Vec<Tensor> {
    let Some(c) = cfg.clip_norm else {
        return grads.to_vec();
    };
    let norm_sq: f64 = grads.iter().map(Tensor::squared_norm).sum();
    if norm_sq.sqrt() <= c {
        return grads.to_vec();
    }
    let mut total = grads[0].squared_norm();
    for g in &grads[1..] {
        total += g.squared_norm();
    }
    let scale = c / total.sqrt();
    grads.iter().map(|g| g.map(|x| x * scale)).collect()
}

/// Moment update and normalized direction `m̂ / (sqrt(v̂ + eps_root) + eps)`.
fn direction(cfg: &AdamWConfig, state: &mut AdamState, grads: &[Tensor]) -> Result<Vec<Tensor>> {
    if grads.len() != state.m.len() {
        return Err(Error::Config(format!(
            "{} gradients for {} parameters",
            grads.len(),
            state.m.len()
        )));
    }
    let grads = clip_plain(cfg, grads);
    state.t += 1;
    let (c1, c2) = bias_corrections(cfg, state.t);
    let mut out = Vec::with_capacity(grads.len());
    for ((g, m), v) in grads.iter().zip(&mut state.m).zip(&mut state.v) {
        *m = m.zip_map(g, |m, g| m * cfg.beta1 + g * (1.0 - cfg.beta1))?;
        *v = v.zip_map(g, |v, g| v * cfg.beta2 + (g * g) * (1.0 - cfg.beta2))?;
        let d = m.zip_map(v, |m, v| {
            (m * c1) / ((v * c2 + cfg.eps_root).sqrt() + cfg.eps)
        })?;
        out.push(d);
    }
    Ok(out)
}

/// One AdamW step on plain tensors, in place.
pub fn adamw_step(
    cfg: &AdamWConfig,
    lr: f64,
    params: &mut [Tensor],
    state: &mut AdamState,
    grads: &[Tensor],
) -> Result<()> {
    let dirs = direction(cfg, state, grads)?;
    let decay = 1.0 - lr * cfg.weight_decay;
    for (p, d) in params.iter_mut().zip(&dirs) {
        *p = p.zip_map(d, |p, d| p * decay - d * lr)?;
        if !p.is_finite() {
            return Err(Error::Numerical(
                "optimizer produced a non-finite parameter".into(),
            ));
        }
    }
    Ok(())
}

/// The AdamW change `-(lr * direction + lr * wd * param)` without applying
/// it; used where several candidate updates are averaged.
pub fn adamw_delta(
    cfg: &AdamWConfig,
    lr: f64,
    params: &[Tensor],
    state: &mut AdamState,
    grads: &[Tensor],
) -> Result<Vec<Tensor>> {
    let dirs = direction(cfg, state, grads)?;
    let wd = lr * cfg.weight_decay;
    let mut out = Vec::with_capacity(params.len());
    for (p, d) in params.iter().zip(&dirs) {
        let delta = d.zip_map(p, |d, p| -(d * lr + p * wd))?;
        if !delta.is_finite() {
            return Err(Error::Numerical(
                "optimizer produced a non-finite update".into(),
            ));
        }
        out.push(delta);
    }
    Ok(out)
}

/// Parameters and optimizer moments as tape nodes.
#[derive(Clone, Debug)]
pub struct TapeAdam<'t> {
    pub params: Vec<Var<'t>>,
    pub m: Vec<Var<'t>>,
    pub v: Vec<Var<'t>>,
    pub t: u64,
}

impl<'t> TapeAdam<'t> {
    pub fn from_state(tape: &'t Tape, params: &[Tensor], state: &AdamState) -> Result<Self> {
        let leaf = |xs: &[Tensor]| -> Result<Vec<Var<'t>>> {
            Ok(xs
                .iter()
                .map(|x| tape.leaf(x.clone()))
                .collect::<std::result::Result<_, _>>()?)
        };
        Ok(Self {
            params: leaf(params)?,
            m: leaf(&state.m)?,
            v: leaf(&state.v)?,
            t: state.t,
        })
    }

    pub fn param_values(&self) -> Vec<Tensor> {
        self.params.iter().map(Var::value).collect()
    }

    pub fn state_values(&self) -> AdamState {
        AdamState {
            m: self.m.iter().map(Var::value).collect(),
            v: self.v.iter().map(Var::value).collect(),
            t: self.t,
        }
    }

    /// One differentiable AdamW step; the result depends on `grads` through
    /// tape nodes only.
    pub fn step(
        &self,
        tape: &'t Tape,
        cfg: &AdamWConfig,
        lr: f64,
        grads: &[Var<'t>],
    ) -> Result<TapeAdam<'t>> {
        if grads.len() != self.params.len() {
            return Err(Error::Config(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        let grads = match cfg.clip_norm {
            Some(c) => clip_by_global_norm(tape, grads, c)?,
            None => grads.to_vec(),
        };
        let t = self.t + 1;
        let (c1, c2) = bias_corrections(cfg, t);
        let decay = 1.0 - lr * cfg.weight_decay;
        let mut next = TapeAdam {
            params: Vec::with_capacity(grads.len()),
            m: Vec::with_capacity(grads.len()),
            v: Vec::with_capacity(grads.len()),
            t,
        };
        for (i, g) in grads.iter().enumerate() {
            let m = self.m[i].scale(cfg.beta1)?.add(g.scale(1.0 - cfg.beta1)?)?;
            let v = self.v[i]
                .scale(cfg.beta2)?
                .add(g.square()?.scale(1.0 - cfg.beta2)?)?;
            let den = v
                .scale(c2)?
                .add_scalar(cfg.eps_root)?
                .sqrt()?
                .add_scalar(cfg.eps)?;
            let d = m.scale(c1)?.div(den)?;
            let p = self.params[i].scale(decay)?.sub(d.scale(lr)?)?;
            next.params.push(p);
            next.m.push(m);
            next.v.push(v);
        }
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = AdamWConfig {
            lr: 1.0,
            warmup_steps: 4,
            cosine_horizon: 14,
            final_lr_ratio: 0.0,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 0.25);
        assert_eq!(cfg.lr_at(3), 1.0);
        assert_eq!(cfg.lr_at(4), 1.0);
        assert!((cfg.lr_at(9) - 0.5).abs() < 1e-12);
        assert!(cfg.lr_at(14).abs() < 1e-12);
        assert!(cfg.lr_at(100).abs() < 1e-12);
    }

    #[test]
    fn constant_schedule_without_horizon() {
        let cfg = AdamWConfig::default();
        assert_eq!(cfg.lr_at(0), cfg.lr);
        assert_eq!(cfg.lr_at(10_000), cfg.lr);
    }
}
