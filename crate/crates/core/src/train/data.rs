use crate::dataset::{window_starts, FieldSequence};
use crate::model::Cae;
use crate::tensor::Tensor;

use super::Result;

/// Window `start..start + len` of sequence `seq`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowRef {
    pub seq: usize,
    pub start: usize,
}

/// Every window of one split, referenced by position rather than copied.
#[derive(Clone, Debug)]
pub struct SplitWindows {
    pub window_len: usize,
    pub windows: Vec<WindowRef>,
}

impl SplitWindows {
    pub fn new(sequences: &[FieldSequence], window_len: usize, stride: usize) -> Result<Self> {
        let mut windows = Vec::new();
        for (seq, s) in sequences.iter().enumerate() {
            for start in window_starts(s.len(), window_len, stride)? {
                windows.push(WindowRef { seq, start });
            }
        }
        Ok(Self { window_len, windows })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Frames `start..start + len` as a `[len, C, H, W]` tensor.
pub fn window_frames(seq: &FieldSequence, start: usize, len: usize) -> Tensor<f32> {
    let n = seq.frame_len();
    let [_, c, h, w] = seq.dims();
    Tensor::new([len, c, h, w], seq.data()[start * n..(start + len) * n].to_vec()).expect("window inside sequence")
}

/// Rows `rows` of a `[T, d]` tensor.
pub(crate) fn gather_rows(t: &Tensor<f32>, rows: impl IntoIterator<Item = usize>) -> Tensor<f32> {
    let d = t.shape()[1];
    let mut data = Vec::new();
    for r in rows {
        data.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
    }
    let n = data.len() / d;
    Tensor::new([n, d], data).expect("at least one row")
}

const ENCODE_CHUNK: usize = 64;

/// Latents of every frame of every sequence under a fixed autoencoder,
/// one `[T, d]` tensor per sequence.
pub fn encode_sequences(cae: &Cae, sequences: &[FieldSequence]) -> Result<Vec<Tensor<f32>>> {
    let d = cae.config().latent_dim;
    sequences
        .iter()
        .map(|s| {
            let mut data = Vec::with_capacity(s.len() * d);
            let mut start = 0;
            while start < s.len() {
                let n = ENCODE_CHUNK.min(s.len() - start);
                let z = cae.encode_frames(&window_frames(s, start, n))?;
                data.extend_from_slice(z.data());
                start += n;
            }
            Ok(Tensor::new([s.len(), d], data)?)
        })
        .collect()
}
