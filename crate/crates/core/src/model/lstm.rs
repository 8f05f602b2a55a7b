use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::MaskSpec;
use crate::tensor::{Real, Tape, Tensor, Var};

use super::params::{fan_in_uniform, Bound, Linear, ParamId, ParamSet};
use super::{ModelError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmConfig {
    pub latent_dim: usize,
}

/// Autoregressive latent forecaster: one LSTM cell whose hidden state has
/// the latent width, with a linear read-out to the next latent.
#[derive(Clone, Debug)]
pub struct LatentLstm {
    config: LstmConfig,
    params: ParamSet,
    w_x: ParamId,
    w_h: ParamId,
    bias: ParamId,
    head: Linear,
}

/// Hidden and cell state, each `[1, d]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LatentLstm {
    pub fn new<R: Rng + ?Sized>(config: LstmConfig, rng: &mut R) -> Result<Self> {
        let d = config.latent_dim;
        if d == 0 {
            return Err(ModelError::Config("latent_dim must be ≥ 1".into()));
        }
        let mut ps = ParamSet::new();
        // Gate blocks along the output axis: input, forget, cell, output.
        let w_x = ps.push("cell.w_x", fan_in_uniform(&[d, 4 * d], d, rng));
        let w_h = ps.push("cell.w_h", fan_in_uniform(&[d, 4 * d], d, rng));
        let bias = ps.push("cell.bias", fan_in_uniform(&[4 * d], d, rng));
        let head = Linear::fan_in(&mut ps, "head", d, d, rng);
        Ok(Self {
            config,
            params: ps,
            w_x,
            w_h,
            bias,
            head,
        })
    }

    pub fn config(&self) -> &LstmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn zero_state<T: Real>(&self, tape: &mut Tape<T>) -> LstmState {
        let d = self.config.latent_dim;
        LstmState {
            h: tape.constant(Tensor::zeros([1, d]).expect("d ≥ 1")),
            c: tape.constant(Tensor::zeros([1, d]).expect("d ≥ 1")),
        }
    }

    /// One cell update for input `x[1, d]`.
    pub fn cell<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, s: LstmState) -> Result<LstmState> {
        let d = self.config.latent_dim;
        let gx = tape.matmul(x, p.var(self.w_x))?;
        let gh = tape.matmul(s.h, p.var(self.w_h))?;
        let g = tape.add(gx, gh)?;
        let g = tape.add_bias(g, p.var(self.bias))?;
        let i = tape.slice_cols(g, 0, d)?;
        let f = tape.slice_cols(g, d, d)?;
        let c_hat = tape.slice_cols(g, 2 * d, d)?;
        let o = tape.slice_cols(g, 3 * d, d)?;
        let i = tape.sigmoid(i)?;
        let f = tape.sigmoid(f)?;
        let c_hat = tape.tanh(c_hat)?;
        let o = tape.sigmoid(o)?;
        let keep = tape.mul(f, s.c)?;
        let write = tape.mul(i, c_hat)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    /// Latent prediction for the next step from the current hidden state.
    pub fn readout<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, s: LstmState) -> Result<Var> {
        self.head.forward(tape, p, s.h)
    }

    /// Teacher-forced one-step predictions: feeds `inputs[t]` and returns the
    /// prediction for step `t + 1`, for every row of `inputs[T, d]`.
    pub fn teacher_forced<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, inputs: Var) -> Result<Var> {
        let steps = tape.shape(inputs)[0];
        let mut s = self.zero_state(tape);
        let mut preds = Vec::with_capacity(steps);
        for t in 0..steps {
            let x = tape.index(inputs, t)?;
            let x = tape.reshape(x, [1, self.config.latent_dim])?;
            s = self.cell(tape, p, x, s)?;
            let y = self.readout(tape, p, s)?;
            preds.push(tape.reshape(y, [self.config.latent_dim])?);
        }
        Ok(tape.stack(&preds)?)
    }

    /// Warms up on `history[T, d]` then feeds its own predictions back for
    /// `horizon` steps, returning them as `[horizon, d]`.
    pub fn rollout<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, history: Var, horizon: usize) -> Result<Var> {
        let d = self.config.latent_dim;
        let steps = tape.shape(history)[0];
        let mut s = self.zero_state(tape);
        for t in 0..steps {
            let x = tape.index(history, t)?;
            let x = tape.reshape(x, [1, d])?;
            s = self.cell(tape, p, x, s)?;
        }
        let mut preds = Vec::with_capacity(horizon);
        for k in 0..horizon {
            let y = self.readout(tape, p, s)?;
            preds.push(tape.reshape(y, [d])?);
            if k + 1 < horizon {
                s = self.cell(tape, p, y, s)?;
            }
        }
        Ok(tape.stack(&preds)?)
    }
}

/// Fills missing input steps by linear interpolation between the nearest
/// observed neighbours, holding the nearest value beyond the first or last
/// observation. `latents` is `[t_in, d]` with arbitrary content at missing
/// rows.
pub fn interpolate_missing(latents: &Tensor<f32>, mask: &MaskSpec) -> Result<Tensor<f32>> {
    let (t_in, d) = match *latents.shape() {
        [t, d] if t == mask.t_in => (t, d),
        ref s => return Err(ModelError::Shape(format!("latents {s:?} do not cover {} inputs", mask.t_in))),
    };
    if mask.observed.is_empty() {
        return Err(ModelError::Shape("nothing observed to interpolate from".into()));
    }
    let src = latents.data();
    let mut out = src.to_vec();
    for t in 0..t_in {
        if mask.is_observed(t) {
            continue;
        }
        let before = mask.observed.iter().rev().find(|&&o| o < t).copied();
        let after = mask.observed.iter().find(|&&o| o > t).copied();
        let row = &mut out[t * d..(t + 1) * d];
        match (before, after) {
            (Some(a), Some(b)) => {
                let w = (t - a) as f32 / (b - a) as f32;
                for (k, v) in row.iter_mut().enumerate() {
                    *v = (1.0 - w) * src[a * d + k] + w * src[b * d + k];
                }
            }
            (Some(a), None) => row.copy_from_slice(&src[a * d..(a + 1) * d]),
            (None, Some(b)) => row.copy_from_slice(&src[b * d..(b + 1) * d]),
            (None, None) => unreachable!("observed set is non-empty"),
        }
    }
    Ok(Tensor::new([t_in, d], out)?)
}
