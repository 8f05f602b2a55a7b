//! Optimization: autoencoder pre-training, masked-transformer training on a
//! frozen autoencoder, and the autoregressive LSTM baseline.

mod baseline;
mod cae;
mod data;
mod optim;
mod pstmae;

pub use baseline::{evaluate_lstm, persistence_forecast, predict_lstm, train_lstm, LstmRun};
pub use cae::{fit_frames, reconstruction_mse, train_cae, CaeRun};
pub use data::{encode_sequences, window_frames, SplitWindows, WindowRef};
pub use optim::{clip_global_norm, radam_branch, Optimizer, OptimizerKind, RadamBranch, BETA1, BETA2, EPSILON};
pub use pstmae::{evaluate_pstmae, predict_pstmae, train_pstmae, PstmaeRun, WindowLosses};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{frozen_mask, DatasetError, MaskSpec};
use crate::model::ModelError;
use crate::tensor::{Real, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("invalid training setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Hyperparameters shared by the three training phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the latent term in the combined loss.
    pub lambda: f64,
    pub batch_size: usize,
    pub lr_cae: f64,
    pub lr_pstmae: f64,
    pub lr_baseline: f64,
    pub cae_epochs: usize,
    pub epochs: usize,
    pub baseline_epochs: usize,
    pub seed: u64,
    pub t_in: usize,
    pub t_out: usize,
    /// Fraction of input steps hidden from the model.
    pub missing_ratio: f64,
    /// When set, each training batch draws its missing-step count uniformly
    /// from this inclusive range instead of using `missing_ratio`.
    pub missing_range: Option<[usize; 2]>,
    /// Global gradient-norm cap for transformer training; `None` disables.
    pub clip_norm: Option<f64>,
    /// Offset between consecutive training windows.
    pub window_stride: usize,
    /// Per-epoch learning-rate schedule shared by all three phases.
    pub lr_decay: LrDecay,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrDecay {
    #[default]
    Constant,
    /// Half-cosine from the base rate at epoch 1 towards zero after the last.
    Cosine,
}

/// Learning rate for 1-based `epoch` of `total`.
pub fn epoch_lr(base: f64, decay: LrDecay, epoch: usize, total: usize) -> f64 {
    match decay {
        LrDecay::Constant => base,
        LrDecay::Cosine => {
            let frac = (epoch.saturating_sub(1)) as f64 / total.max(1) as f64;
            0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            batch_size: 8,
            lr_cae: 1e-3,
            lr_pstmae: 3e-4,
            lr_baseline: 1e-3,
            cae_epochs: 20,
            epochs: 30,
            baseline_epochs: 30,
            seed: 0,
            t_in: crate::dataset::DEFAULT_T_IN,
            t_out: crate::dataset::DEFAULT_T_OUT,
            missing_ratio: 0.5,
            missing_range: None,
            clip_norm: Some(1.0),
            window_stride: 1,
            lr_decay: LrDecay::Constant,
        }
    }
}

impl TrainConfig {
    /// Published full-scale settings (batch 32).
    pub fn paper() -> Self {
        Self {
            batch_size: 32,
            ..Self::default()
        }
    }

    pub fn window_len(&self) -> usize {
        self.t_in + self.t_out
    }

    /// Missing-step count used for evaluation masks.
    pub fn eval_missing(&self) -> usize {
        crate::dataset::missing_count(self.t_in, self.missing_ratio)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Invalid(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be ≥ 0, got {}", self.lambda));
        }
        for (name, lr) in [("lr_cae", self.lr_cae), ("lr_pstmae", self.lr_pstmae), ("lr_baseline", self.lr_baseline)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.batch_size == 0 || self.window_stride == 0 {
            return bad("batch_size and window_stride must be ≥ 1".into());
        }
        if self.t_in == 0 {
            return bad("t_in must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.missing_ratio) || self.eval_missing() >= self.t_in {
            return bad(format!("missing_ratio {} leaves no observed input", self.missing_ratio));
        }
        if let Some([lo, hi]) = self.missing_range {
            if lo > hi || hi >= self.t_in {
                return bad(format!("missing_range [{lo}, {hi}] must satisfy lo ≤ hi < t_in"));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Terms of the combined objective, each a scalar on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub full: Var,
    pub latent: Var,
}

/// `MSE(x̂, x) + λ · MSE(ẑ, z)` over whole aligned sequences. With equal-sized
/// steps this equals the step-average of the per-step terms.
pub fn combined_loss<T: Real>(
    tape: &mut Tape<T>,
    x_hat: Var,
    x: Var,
    z_hat: Var,
    z: Var,
    lambda: f64,
) -> std::result::Result<LossParts, TensorError> {
    let full = tape.mse(x_hat, x)?;
    let latent = tape.mse(z_hat, z)?;
    let weighted = tape.scale(latent, T::lit(lambda))?;
    let total = tape.add(full, weighted)?;
    Ok(LossParts { total, full, latent })
}

/// Independent stream for epoch `epoch` of training phase `phase`, so a
/// resumed run replays exactly the shuffles and masks of an uninterrupted one.
pub fn epoch_rng(seed: u64, phase: &str, epoch: usize) -> ChaCha8Rng {
    // FNV-1a over the phase name keeps streams of different phases apart.
    let tag = phase
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag);
    rng.set_stream(epoch as u64);
    rng
}

/// Seed offset separating evaluation masks from training randomness.
const EVAL_MASK_SALT: u64 = 0x5eed_e7a1;

/// Frozen mask for evaluation window `index` with `missing` hidden inputs.
/// Shared by every model so they are scored on identical inputs.
pub fn eval_mask(cfg: &TrainConfig, index: usize, missing: usize) -> Result<MaskSpec> {
    Ok(frozen_mask(cfg.seed ^ EVAL_MASK_SALT, index as u64, cfg.t_in, cfg.t_out, missing)?)
}

/// One row of a loss curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub full_mse: f64,
    /// Absent for the autoencoder, which has no latent target.
    pub latent_mse: Option<f64>,
}

pub const LOSS_CSV_HEADER: &str = "epoch,split,full_mse,latent_mse";

pub fn write_loss_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{LOSS_CSV_HEADER}")?;
    for r in records {
        let latent = r.latent_mse.map(|v| format!("{v:e}")).unwrap_or_default();
        writeln!(f, "{},{},{:e},{}", r.epoch, r.split, r.full_mse, latent)?;
    }
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        let parse_err = || TrainError::Invalid(format!("{}: bad line {}", path.display(), i + 1));
        if parts.len() != 4 {
            return Err(parse_err());
        }
        out.push(EpochRecord {
            epoch: parts[0].parse().map_err(|_| parse_err())?,
            split: parts[1].to_string(),
            full_mse: parts[2].parse().map_err(|_| parse_err())?,
            latent_mse: if parts[3].is_empty() {
                None
            } else {
                Some(parts[3].parse().map_err(|_| parse_err())?)
            },
        });
    }
    Ok(out)
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}
