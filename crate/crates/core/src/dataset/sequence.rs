use serde::{Deserialize, Serialize};

use super::DatasetError;

/// Min/max of one channel, the affine map used for min-max normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub min: f32,
    pub max: f32,
}

impl ChannelStats {
    pub fn is_constant(&self) -> bool {
        self.max <= self.min
    }
}

/// Snapshots laid out `(T, C, H, W)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSequence {
    dims: [usize; 4],
    data: Vec<f32>,
    stats: Vec<ChannelStats>,
    /// Free-form provenance label, e.g. the generator run it came from.
    pub source: Option<String>,
}

impl FieldSequence {
    /// Builds a sequence; `stats` default to the per-channel extrema of `data`.
    pub fn new(dims: [usize; 4], data: Vec<f32>) -> Result<Self, DatasetError> {
        if dims.contains(&0) || dims.iter().product::<usize>() != data.len() {
            return Err(DatasetError::Shape(format!(
                "dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        let mut seq = Self {
            dims,
            data,
            stats: Vec::new(),
            source: None,
        };
        seq.stats = seq.channel_extrema();
        Ok(seq)
    }

    pub fn with_stats(mut self, stats: Vec<ChannelStats>) -> Result<Self, DatasetError> {
        if stats.len() != self.channels() {
            return Err(DatasetError::Shape(format!(
                "{} stats for {} channels",
                stats.len(),
                self.channels()
            )));
        }
        self.stats = stats;
        Ok(self)
    }

    /// Stacks equal-shaped `(C, H, W)` frames.
    pub fn from_frames(frames: &[Vec<f32>], chw: [usize; 3]) -> Result<Self, DatasetError> {
        let mut data = Vec::with_capacity(frames.len() * chw.iter().product::<usize>());
        for f in frames {
            data.extend_from_slice(f);
        }
        Self::new([frames.len(), chw[0], chw[1], chw[2]], data)
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.dims[0]
    }

    pub fn is_empty(&self) -> bool {
        self.dims[0] == 0
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn frame_dims(&self) -> [usize; 3] {
        [self.dims[1], self.dims[2], self.dims[3]]
    }

    pub fn frame_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn stats(&self) -> &[ChannelStats] {
        &self.stats
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    /// Values of channel `c` at step `t`.
    pub fn plane(&self, t: usize, c: usize) -> &[f32] {
        let hw = self.dims[2] * self.dims[3];
        &self.frame(t)[c * hw..(c + 1) * hw]
    }

    /// New sequence made of the frames at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self, DatasetError> {
        let mut data = Vec::with_capacity(indices.len() * self.frame_len());
        for &t in indices {
            if t >= self.len() {
                return Err(DatasetError::IndexOutOfRange {
                    index: t,
                    len: self.len(),
                });
            }
            data.extend_from_slice(self.frame(t));
        }
        let [_, c, h, w] = self.dims;
        Ok(Self {
            dims: [indices.len(), c, h, w],
            data,
            stats: self.stats.clone(),
            source: self.source.clone(),
        })
    }

    pub fn channel_extrema(&self) -> Vec<ChannelStats> {
        let hw = self.dims[2] * self.dims[3];
        (0..self.channels())
            .map(|c| {
                let mut s = ChannelStats {
                    min: f32::INFINITY,
                    max: f32::NEG_INFINITY,
                };
                for t in 0..self.len() {
                    for &v in &self.frame(t)[c * hw..(c + 1) * hw] {
                        s.min = s.min.min(v);
                        s.max = s.max.max(v);
                    }
                }
                s
            })
            .collect()
    }

    pub(crate) fn map_channels(&self, stats: Vec<ChannelStats>, f: impl Fn(usize, f32) -> f32) -> Self {
        let hw = self.dims[2] * self.dims[3];
        let c = self.channels();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| f((i / hw) % c, v))
            .collect();
        Self {
            dims: self.dims,
            data,
            stats,
            source: self.source.clone(),
        }
    }
}
