//! First-order optimizers over a [`ParamSet`].

use serde::{Deserialize, Serialize};

use crate::model::ParamSet;
use crate::tensor::Tensor;

use super::{Result, TrainError};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Length of the approximated simple moving average below which RAdam
/// skips the adaptive term.
pub const RADAM_THRESHOLD: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Radam,
}

/// Adam or RAdam with per-parameter first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

/// Which update an RAdam step used.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RadamBranch {
    /// Momentum only; the variance estimate is not yet trustworthy.
    Unrectified,
    /// Adaptive step scaled by the rectification factor.
    Rectified(f64),
}

/// `ρ_t` and the branch RAdam takes at 1-based step `t`.
pub fn radam_branch(t: u64, beta2: f64) -> (f64, RadamBranch) {
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let b2t = beta2.powi(t as i32);
    let rho = rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t);
    if rho > RADAM_THRESHOLD {
        let r = ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
        (rho, RadamBranch::Rectified(r))
    } else {
        (rho, RadamBranch::Unrectified)
    }
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamSet) -> Self {
        Self {
            kind,
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            step: 0,
            m: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn adam(lr: f64, params: &ParamSet) -> Self {
        Self::new(OptimizerKind::Adam, lr, params)
    }

    pub fn radam(lr: f64, params: &ParamSet) -> Self {
        Self::new(OptimizerKind::Radam, lr, params)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Rejects non-finite gradients before touching any
    /// state.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor<f32>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(TrainError::Invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (name, g) in params.names().iter().zip(grads) {
            if !g.all_finite() {
                return Err(TrainError::Diverged(format!(
                    "non-finite gradient for {name} at step {}",
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let t = self.step;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        let branch = match self.kind {
            OptimizerKind::Adam => None,
            OptimizerKind::Radam => Some(radam_branch(t, b2).1),
        };
        for (k, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let m_hat = mi / bc1;
                let delta = match branch {
                    None => m_hat / ((vi / bc2).sqrt() + self.eps),
                    Some(RadamBranch::Unrectified) => m_hat,
                    Some(RadamBranch::Rectified(r)) => r * m_hat / ((vi / bc2).sqrt() + self.eps),
                };
                *w = (*w as f64 - self.lr * delta) as f32;
            }
        }
        Ok(())
    }

    /// Moments as named tensors, for checkpointing. Moments are stored in
    /// `f32`, so a restored optimizer continues bit-identically.
    pub fn state(&self, params: &ParamSet) -> ParamSet {
        let mut out = ParamSet::new();
        for (k, (name, t)) in params.iter().enumerate() {
            let to_t = |xs: &[f32]| Tensor::new(t.shape().to_vec(), xs.to_vec()).expect("same shape");
            out.push(format!("opt.m.{name}"), to_t(&self.m[k]));
            out.push(format!("opt.v.{name}"), to_t(&self.v[k]));
        }
        out
    }

    /// Restores moments saved by [`state`](Self::state).
    pub fn restore(&mut self, params: &ParamSet, saved: &ParamSet, step: u64) -> Result<()> {
        for (k, (name, _)) in params.iter().enumerate() {
            for (prefix, dst) in [("m", &mut self.m[k]), ("v", &mut self.v[k])] {
                let src = saved
                    .by_name(&format!("opt.{prefix}.{name}"))
                    .ok_or_else(|| TrainError::Invalid(format!("checkpoint lacks optimizer state for {name}")))?;
                if src.len() != dst.len() {
                    return Err(TrainError::Invalid(format!("optimizer state for {name} has the wrong size")));
                }
                dst.copy_from_slice(src.data());
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
