//! Field sequences and the transforms that turn them into training windows.
//!
//! Time indices are 0-based throughout this module: a window of
//! `t_in + t_out` frames has inputs `0..t_in` and targets `t_in..t_in+t_out`.

mod io;
mod sequence;

pub use io::{read_manifest, read_sequence, write_manifest, write_sequence, ManifestEntry};
pub use sequence::{ChannelStats, FieldSequence};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("sequence of length {len} is shorter than a window of {need}")]
    TooShort { len: usize, need: usize },
    #[error("{n} sequences cannot fill every split (need at least {need})")]
    TooFewSequences { n: usize, need: usize },
    #[error("dilation must be at least 1, got {0}")]
    InvalidDilation(usize),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("bad sequence file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

pub const DEFAULT_T_IN: usize = 10;
pub const DEFAULT_T_OUT: usize = 5;

/// Per-channel min/max over all frames of the training split.
pub fn fit_channel_stats(train: &[FieldSequence]) -> Result<Vec<ChannelStats>> {
    let first = train
        .first()
        .ok_or_else(|| DatasetError::Invalid("training split is empty".into()))?;
    let mut stats = first.channel_extrema();
    for seq in &train[1..] {
        if seq.channels() != stats.len() {
            return Err(DatasetError::Shape(format!(
                "channel count {} differs from {}",
                seq.channels(),
                stats.len()
            )));
        }
        for (s, e) in stats.iter_mut().zip(seq.channel_extrema()) {
            s.min = s.min.min(e.min);
            s.max = s.max.max(e.max);
        }
    }
    Ok(stats)
}

/// Min-max maps each channel with `stats` and clamps to `[0, 1]`.
///
/// A constant channel maps to 0.5. The result carries `stats` so it can be
/// inverted with [`denormalize`].
pub fn normalize(seq: &FieldSequence, stats: &[ChannelStats]) -> Result<FieldSequence> {
    if stats.len() != seq.channels() {
        return Err(DatasetError::Shape(format!(
            "{} stats for {} channels",
            stats.len(),
            seq.channels()
        )));
    }
    for (c, s) in stats.iter().enumerate() {
        if s.is_constant() {
            log::warn!("channel {c} is constant ({}); mapping it to 0.5", s.min);
        }
    }
    Ok(seq.map_channels(stats.to_vec(), |c, v| {
        let s = stats[c];
        if s.is_constant() {
            return 0.5;
        }
        let x = (v as f64 - s.min as f64) / (s.max as f64 - s.min as f64);
        x.clamp(0.0, 1.0) as f32
    }))
}

/// Inverse of [`normalize`] using the stats the sequence carries.
pub fn denormalize(seq: &FieldSequence) -> FieldSequence {
    let stats = seq.stats().to_vec();
    seq.map_channels(stats.clone(), |c, v| {
        let s = stats[c];
        (s.min as f64 + v as f64 * (s.max as f64 - s.min as f64)) as f32
    })
}

/// Normalizes every split with statistics taken from `train` alone.
pub fn normalize_channelwise(
    splits: &Splits<FieldSequence>,
) -> Result<(Splits<FieldSequence>, Vec<ChannelStats>)> {
    let stats = fit_channel_stats(&splits.train)?;
    let apply = |set: &[FieldSequence]| -> Result<Vec<FieldSequence>> {
        set.iter().map(|s| normalize(s, &stats)).collect()
    };
    Ok((
        Splits {
            train: apply(&splits.train)?,
            val: apply(&splits.val)?,
            test: apply(&splits.test)?,
        },
        stats,
    ))
}

/// Start offsets of all windows of `len` frames taken every `stride` steps.
pub fn window_starts(seq_len: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 || window == 0 {
        return Err(DatasetError::Invalid("window and stride must be positive".into()));
    }
    if seq_len < window {
        return Err(DatasetError::TooShort {
            len: seq_len,
            need: window,
        });
    }
    Ok((0..=seq_len - window).step_by(stride).collect())
}

/// All windows of `t_in + t_out` consecutive frames.
pub fn shifting_windows(
    seq: &FieldSequence,
    t_in: usize,
    t_out: usize,
    stride: usize,
) -> Result<Vec<FieldSequence>> {
    let w = t_in + t_out;
    window_starts(seq.len(), w, stride)?
        .into_iter()
        .map(|s| seq.select(&(s..s + w).collect::<Vec<_>>()))
        .collect()
}

/// Frame indices kept by dilation `d`: `0, d, 2d, …` up to the last frame.
pub fn dilation_indices(len: usize, d: usize) -> Result<Vec<usize>> {
    if d < 1 {
        return Err(DatasetError::InvalidDilation(d));
    }
    Ok((0..len).step_by(d).collect())
}

/// Keeps every `d`-th frame, starting with the first.
pub fn dilate(seq: &FieldSequence, d: usize) -> Result<FieldSequence> {
    seq.select(&dilation_indices(seq.len(), d)?)
}

/// Which input steps are observed and which are missing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub t_in: usize,
    pub t_out: usize,
    /// Sorted observed input indices.
    pub observed: Vec<usize>,
    /// Sorted missing input indices.
    pub missing: Vec<usize>,
}

impl MaskSpec {
    /// Builds a mask from its missing input indices.
    pub fn from_missing(t_in: usize, t_out: usize, missing: &[usize]) -> Result<Self> {
        let mut flags = vec![false; t_in];
        for &m in missing {
            if m >= t_in {
                return Err(DatasetError::IndexOutOfRange { index: m, len: t_in });
            }
            flags[m] = true;
        }
        Ok(Self {
            t_in,
            t_out,
            observed: (0..t_in).filter(|&t| !flags[t]).collect(),
            missing: (0..t_in).filter(|&t| flags[t]).collect(),
        })
    }

    pub fn window_len(&self) -> usize {
        self.t_in + self.t_out
    }

    pub fn outputs(&self) -> std::ops::Range<usize> {
        self.t_in..self.t_in + self.t_out
    }

    /// Missing inputs followed by the forecast steps.
    pub fn hidden(&self) -> Vec<usize> {
        self.missing.iter().copied().chain(self.outputs()).collect()
    }

    pub fn is_observed(&self, t: usize) -> bool {
        self.observed.binary_search(&t).is_ok()
    }
}

/// Number of missing steps implied by a ratio, rounded to nearest.
pub fn missing_count(t_in: usize, ratio: f64) -> usize {
    (ratio * t_in as f64).round() as usize
}

/// Uniformly random mask with exactly `count` missing inputs.
pub fn sample_mask_count<R: Rng + ?Sized>(
    t_in: usize,
    t_out: usize,
    count: usize,
    rng: &mut R,
) -> Result<MaskSpec> {
    if count > 0 && count >= t_in {
        return Err(DatasetError::Invalid(format!(
            "{count} missing steps leave nothing observed out of {t_in}"
        )));
    }
    let missing = index::sample(rng, t_in, count).into_vec();
    MaskSpec::from_missing(t_in, t_out, &missing)
}

/// Uniformly random mask with `round(ratio · t_in)` missing inputs.
pub fn sample_mask<R: Rng + ?Sized>(t_in: usize, t_out: usize, ratio: f64, rng: &mut R) -> Result<MaskSpec> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(DatasetError::Invalid(format!("missing ratio {ratio} not in [0, 1)")));
    }
    sample_mask_count(t_in, t_out, missing_count(t_in, ratio), rng)
}

/// Deterministic mask for evaluation window `window_id`, independent of
/// iteration order.
pub fn frozen_mask(seed: u64, window_id: u64, t_in: usize, t_out: usize, count: usize) -> Result<MaskSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ window_id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    sample_mask_count(t_in, t_out, count, &mut rng)
}

/// Replaces missing and forecast frames with the zero field.
pub fn apply_placeholders(window: &FieldSequence, mask: &MaskSpec) -> Result<FieldSequence> {
    if window.len() != mask.window_len() {
        return Err(DatasetError::Shape(format!(
            "window of {} frames, mask expects {}",
            window.len(),
            mask.window_len()
        )));
    }
    let n = window.frame_len();
    let mut data = window.data().to_vec();
    for t in mask.hidden() {
        data[t * n..(t + 1) * n].fill(0.0);
    }
    let mut out = FieldSequence::new(window.dims(), data)?.with_stats(window.stats().to_vec())?;
    out.source = window.source.clone();
    Ok(out)
}

/// Train/validation/test partition.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Splits<T> {
    pub fn get(&self, name: &str) -> Option<&Vec<T>> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn map<U>(self, mut f: impl FnMut(T) -> U) -> Splits<U> {
        Splits {
            train: self.train.into_iter().map(&mut f).collect(),
            val: self.val.into_iter().map(&mut f).collect(),
            test: self.test.into_iter().map(&mut f).collect(),
        }
    }
}

pub const MIN_SEQUENCES: usize = 10;

/// Shuffles `0..n` with `seed` and cuts it into train/val/test by `ratios`.
///
/// Train and validation sizes are rounded; the test split takes the rest.
pub fn split_indices(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<Splits<usize>> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(DatasetError::Invalid(format!("split ratios {ratios:?} must sum to 1")));
    }
    if n < MIN_SEQUENCES {
        return Err(DatasetError::TooFewSequences { n, need: MIN_SEQUENCES });
    }
    let n_train = (a * n as f64).round() as usize;
    let n_val = (b * n as f64).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(DatasetError::TooFewSequences { n, need: MIN_SEQUENCES });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = index::sample(&mut rng, n, n).into_vec();
    Ok(Splits {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    })
}

/// Splits whole sequences, so no window can straddle two splits.
pub fn split<T: Clone>(items: &[T], ratios: (f64, f64, f64), seed: u64) -> Result<Splits<T>> {
    Ok(split_indices(items.len(), ratios, seed)?.map(|i| items[i].clone()))
}
