use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tape, Tensor, Var};

use super::params::{fan_in_uniform, Bound, Linear, ParamId, ParamSet};
use super::{ModelError, Result};

/// Shape of the convolutional autoencoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaeConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Feature maps per resolution level, finest first. The first level
    /// keeps full resolution; each further level halves it.
    #[serde(default = "CaeConfig::default_ladder")]
    pub ladder: Vec<usize>,
    #[serde(default = "CaeConfig::default_latent")]
    pub latent_dim: usize,
}

impl CaeConfig {
    pub fn default_ladder() -> Vec<usize> {
        vec![8, 16, 32, 64, 128]
    }

    pub fn default_latent() -> usize {
        128
    }

    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            ladder: Self::default_ladder(),
            latent_dim: Self::default_latent(),
        }
    }

    /// Spatial downsampling factor between input and bottleneck.
    pub fn reduction(&self) -> usize {
        1 << (self.ladder.len().saturating_sub(1))
    }

    /// Bottleneck feature map `(C, H, W)` feeding the linear head.
    pub fn bottleneck(&self) -> [usize; 3] {
        let r = self.reduction();
        [*self.ladder.last().unwrap_or(&0), self.height / r, self.width / r]
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.channels == 0 || self.latent_dim == 0 {
            return err("channels and latent_dim must be ≥ 1".into());
        }
        if self.ladder.len() < 2 || self.ladder.contains(&0) {
            return err(format!("ladder {:?} needs at least two non-zero levels", self.ladder));
        }
        let r = self.reduction();
        if self.height == 0 || self.width == 0 || self.height % r != 0 || self.width % r != 0 {
            return err(format!(
                "spatial dims {}×{} must be positive multiples of {r} for a {}-level ladder",
                self.height,
                self.width,
                self.ladder.len()
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    kernel: ParamId,
    bias: ParamId,
}

impl Conv {
    fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let fan_in = c_in * 9;
        Self {
            kernel: ps.push(format!("{name}.kernel"), fan_in_uniform(&[c_out, c_in, 3, 3], fan_in, rng)),
            bias: ps.push(format!("{name}.bias"), fan_in_uniform(&[c_out], fan_in, rng)),
        }
    }

    /// Transposed kernel `[c_in, c_out, 3, 3]`; fan-in follows the output
    /// channels, as the kernel's second axis.
    fn transposed<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let fan_in = c_out * 9;
        Self {
            kernel: ps.push(format!("{name}.kernel"), fan_in_uniform(&[c_in, c_out, 3, 3], fan_in, rng)),
            bias: ps.push(format!("{name}.bias"), fan_in_uniform(&[c_out], fan_in, rng)),
        }
    }
}

/// Convolutional autoencoder mapping `(C, H, W)` frames to `latent_dim`
/// vectors and back. The decoder ends in a sigmoid, so reconstructions lie
/// in `(0, 1)`.
#[derive(Clone, Debug)]
pub struct Cae {
    config: CaeConfig,
    params: ParamSet,
    enc_convs: Vec<Conv>,
    enc_head: Linear,
    dec_head: Linear,
    dec_convs: Vec<Conv>,
    out_conv: Conv,
}

impl Cae {
    pub fn new<R: Rng + ?Sized>(config: CaeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let l = &config.ladder;
        let mut enc_convs = vec![Conv::new(&mut ps, "enc.0", config.channels, l[0], rng)];
        for i in 1..l.len() {
            enc_convs.push(Conv::new(&mut ps, &format!("enc.{i}"), l[i - 1], l[i], rng));
        }
        let flat: usize = config.bottleneck().iter().product();
        let enc_head = Linear::fan_in(&mut ps, "enc.head", flat, config.latent_dim, rng);
        let dec_head = Linear::fan_in(&mut ps, "dec.head", config.latent_dim, flat, rng);
        let dec_convs = (1..l.len())
            .rev()
            .enumerate()
            .map(|(j, i)| Conv::transposed(&mut ps, &format!("dec.{j}"), l[i], l[i - 1], rng))
            .collect();
        let out_conv = Conv::new(&mut ps, "dec.out", l[0], config.channels, rng);
        Ok(Self {
            config,
            params: ps,
            enc_convs,
            enc_head,
            dec_head,
            dec_convs,
            out_conv,
        })
    }

    pub fn config(&self) -> &CaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_frames(&self, shape: &[usize]) -> Result<usize> {
        let c = &self.config;
        match *shape {
            [n, ch, h, w] if [ch, h, w] == [c.channels, c.height, c.width] => Ok(n),
            _ => Err(ModelError::Shape(format!(
                "expected frames [N,{},{},{}], got {shape:?}",
                c.channels, c.height, c.width
            ))),
        }
    }

    /// `frames[N,C,H,W]` → latents `[N, latent_dim]`.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, frames: Var) -> Result<Var> {
        let n = self.check_frames(tape.shape(frames))?;
        let mut x = frames;
        for (i, conv) in self.enc_convs.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            x = tape.conv2d(x, p.var(conv.kernel), p.var(conv.bias), stride)?;
            x = tape.gelu(x)?;
        }
        let flat: usize = self.config.bottleneck().iter().product();
        let x = tape.reshape(x, [n, flat])?;
        self.enc_head.forward(tape, p, x)
    }

    /// Latents `[N, latent_dim]` → frames `[N,C,H,W]` in `(0, 1)`.
    pub fn decode<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, latents: Var) -> Result<Var> {
        let n = match *tape.shape(latents) {
            [n, d] if d == self.config.latent_dim => n,
            ref s => {
                return Err(ModelError::Shape(format!(
                    "expected latents [N,{}], got {s:?}",
                    self.config.latent_dim
                )))
            }
        };
        let x = self.dec_head.forward(tape, p, latents)?;
        let x = tape.gelu(x)?;
        let [c, h, w] = self.config.bottleneck();
        let mut x = tape.reshape(x, [n, c, h, w])?;
        for conv in &self.dec_convs {
            x = tape.conv2d_transpose(x, p.var(conv.kernel), p.var(conv.bias))?;
            x = tape.gelu(x)?;
        }
        let x = tape.conv2d(x, p.var(self.out_conv.kernel), p.var(self.out_conv.bias), 1)?;
        Ok(tape.sigmoid(x)?)
    }

    /// Encodes frames outside any training graph.
    pub fn encode_frames(&self, frames: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(frames.clone());
        let z = self.encode(&mut tape, &p, x)?;
        Ok(tape.value(z).clone())
    }

    /// Decodes latents outside any training graph.
    pub fn decode_latents(&self, latents: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let z = tape.constant(latents.clone());
        let x = self.decode(&mut tape, &p, z)?;
        Ok(tape.value(x).clone())
    }
}
