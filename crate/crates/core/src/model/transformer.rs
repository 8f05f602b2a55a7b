use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::MaskSpec;
use crate::tensor::{Real, Tape, Tensor, Var};

use super::cae::Cae;
use super::params::{normal, Bound, LayerNorm, Linear, ParamId, ParamSet};
use super::{ModelError, Result};

/// Shape of the masked latent transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub latent_dim: usize,
    #[serde(default = "TransformerConfig::default_heads")]
    pub heads: usize,
    #[serde(default = "TransformerConfig::default_encoder_depth")]
    pub encoder_depth: usize,
    #[serde(default = "TransformerConfig::default_decoder_depth")]
    pub decoder_depth: usize,
    /// Hidden width of the feed-forward sublayer as a multiple of `latent_dim`.
    #[serde(default = "TransformerConfig::default_ff_mult")]
    pub ff_mult: usize,
}

impl TransformerConfig {
    fn default_heads() -> usize {
        2
    }
    fn default_encoder_depth() -> usize {
        4
    }
    fn default_decoder_depth() -> usize {
        1
    }
    fn default_ff_mult() -> usize {
        4
    }

    pub fn new(latent_dim: usize) -> Self {
        Self {
            latent_dim,
            heads: 2,
            encoder_depth: 4,
            decoder_depth: 1,
            ff_mult: 4,
        }
    }

    /// Larger preset used for global sea-surface temperature.
    pub fn sst(latent_dim: usize) -> Self {
        Self {
            heads: 8,
            encoder_depth: 8,
            ..Self::new(latent_dim)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.latent_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.heads == 0 || self.latent_dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "latent_dim {} must be a positive multiple of heads {}",
                self.latent_dim, self.heads
            )));
        }
        if self.encoder_depth == 0 || self.decoder_depth == 0 || self.ff_mult == 0 {
            return Err(ModelError::Config("depths and ff_mult must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Sinusoidal embedding: `sin(t / 10000^(2i/d))` at even components and the
/// matching cosine at odd ones.
pub fn positional_embedding(t: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|k| {
            let i2 = (k - k % 2) as f64;
            let angle = t as f64 / 10000f64.powf(i2 / d as f64);
            if k % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Embeddings for 1-based positions `t + 1` of 0-based indices `positions`.
pub fn embedding_table<T: Real>(positions: &[usize], d: usize) -> Tensor<T> {
    let data = positions
        .iter()
        .flat_map(|&t| positional_embedding(t + 1, d))
        .map(T::lit)
        .collect();
    Tensor::new([positions.len(), d], data).expect("positions non-empty")
}

/// Pre-norm transformer block with the query residual
/// `O' = Linear(softmax(QKᵀ/√d_k)·V) + Q`, followed by a GELU feed-forward
/// sublayer with its own residual.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    heads: usize,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, cfg: &TransformerConfig, rng: &mut R) -> Self {
        let d = cfg.latent_dim;
        let hidden = cfg.ff_mult * d;
        Self {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), d),
            q: Linear::xavier(ps, &format!("{name}.q"), d, d, rng),
            k: Linear::xavier(ps, &format!("{name}.k"), d, d, rng),
            v: Linear::xavier(ps, &format!("{name}.v"), d, d, rng),
            out: Linear::xavier(ps, &format!("{name}.out"), d, d, rng),
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), d),
            ff1: Linear::xavier(ps, &format!("{name}.ff1"), d, hidden, rng),
            ff2: Linear::xavier(ps, &format!("{name}.ff2"), hidden, d, rng),
            heads: cfg.heads,
        }
    }

    /// `x[n, d]` → `[n, d]`. Attention matrices (`[n, n]`, one per head) are
    /// appended to `attn` when given.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        mut attn: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let d = match *tape.shape(x) {
            [_, d] => d,
            ref s => return Err(ModelError::Shape(format!("attention input must be [n,d], got {s:?}"))),
        };
        let dk = d / self.heads;
        let h = self.norm1.forward(tape, p, x)?;
        let q = self.q.forward(tape, p, h)?;
        let k = self.k.forward(tape, p, h)?;
        let v = self.v.forward(tape, p, h)?;
        let scale = T::one() / T::lit(dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let (qi, ki, vi) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, i * dk, dk)?,
                    tape.slice_cols(k, i * dk, dk)?,
                    tape.slice_cols(v, i * dk, dk)?,
                )
            };
            let kt = tape.transpose(ki)?;
            let scores = tape.matmul(qi, kt)?;
            let scores = tape.scale(scores, scale)?;
            let a = tape.softmax_lastdim(scores)?;
            if let Some(list) = attn.as_deref_mut() {
                list.push(a);
            }
            heads.push(tape.matmul(a, vi)?);
        }
        let o = if self.heads == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let o = self.out.forward(tape, p, o)?;
        let o = tape.add(o, q)?;
        let h = self.norm2.forward(tape, p, o)?;
        let h = self.ff1.forward(tape, p, h)?;
        let h = tape.gelu(h)?;
        let h = self.ff2.forward(tape, p, h)?;
        Ok(tape.add(o, h)?)
    }
}

/// Masked transformer over latent sequences: an encoder that sees only the
/// observed steps and a decoder that fills every other step from a shared
/// learnable mask token.
#[derive(Clone, Debug)]
pub struct Pstmae {
    config: TransformerConfig,
    params: ParamSet,
    mask_token: ParamId,
    encoder: Vec<AttentionBlock>,
    decoder: Vec<AttentionBlock>,
    head: Linear,
}

/// Outputs of one forward pass over a window.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// Reconstructed latents `[t_in + t_out, d]`.
    pub latents: Var,
    /// Decoded frames `[t_in + t_out, C, H, W]`, when a CAE was supplied.
    pub frames: Option<Var>,
}

impl Pstmae {
    pub fn new<R: Rng + ?Sized>(config: TransformerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let mask_token = ps.push("mask_token", normal(&[config.latent_dim], 0.02, rng));
        let encoder = (0..config.encoder_depth)
            .map(|i| AttentionBlock::new(&mut ps, &format!("encoder.{i}"), &config, rng))
            .collect();
        let decoder = (0..config.decoder_depth)
            .map(|i| AttentionBlock::new(&mut ps, &format!("decoder.{i}"), &config, rng))
            .collect();
        let head = Linear::xavier(&mut ps, "head", config.latent_dim, config.latent_dim, rng);
        Ok(Self {
            config,
            params: ps,
            mask_token,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn mask_token_id(&self) -> ParamId {
        self.mask_token
    }

    /// Runs the encoder blocks over observed latents `[|T_obs|, d]`, after
    /// adding their positional embeddings.
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        observed: Var,
        mask: &MaskSpec,
        mut attn: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        if mask.observed.is_empty() {
            return Err(ModelError::Shape("no observed steps to encode".into()));
        }
        let d = self.config.latent_dim;
        if tape.shape(observed) != [mask.observed.len(), d] {
            return Err(ModelError::Shape(format!(
                "observed latents {:?} do not match {} observed steps of width {d}",
                tape.shape(observed),
                mask.observed.len()
            )));
        }
        let pos = tape.constant(embedding_table(&mask.observed, d));
        let mut x = tape.add(observed, pos)?;
        for block in &self.encoder {
            x = block.forward(tape, p, x, attn.as_deref_mut())?;
        }
        Ok(x)
    }

    /// Places encoded tokens at their observed steps and `mask token + δ_t`
    /// everywhere else, then runs the decoder and the output head.
    pub fn decode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        encoded: Var,
        mask: &MaskSpec,
        mut attn: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let d = self.config.latent_dim;
        if tape.shape(encoded) != [mask.observed.len(), d] {
            return Err(ModelError::Shape(format!(
                "encoded tokens {:?} misaligned with {} observed steps",
                tape.shape(encoded),
                mask.observed.len()
            )));
        }
        let len = mask.window_len();
        let token = p.var(self.mask_token);
        let mut rows = Vec::with_capacity(len);
        let mut next_obs = 0;
        for t in 0..len {
            if mask.is_observed(t) {
                rows.push(tape.index(encoded, next_obs)?);
                next_obs += 1;
            } else {
                let pos = tape.constant(
                    Tensor::new([d], positional_embedding(t + 1, d).into_iter().map(T::lit).collect())
                        .expect("d ≥ 1"),
                );
                rows.push(tape.add(token, pos)?);
            }
        }
        let mut x = tape.stack(&rows)?;
        for block in &self.decoder {
            x = block.forward(tape, p, x, attn.as_deref_mut())?;
        }
        self.head.forward(tape, p, x)
    }

    /// Reconstructs all `t_in + t_out` latents from the observed ones.
    pub fn forward_latents<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        observed: Var,
        mask: &MaskSpec,
        mut attn: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let enc = self.encode(tape, p, observed, mask, attn.as_deref_mut())?;
        self.decode(tape, p, enc, mask, attn)
    }

    /// Full single-pass prediction for one placeholder-filled window
    /// `[t_in + t_out, C, H, W]`: encode observed frames with the CAE, run the
    /// transformer, decode every step. Frames at masked positions are never
    /// read.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        cae: &Cae,
        cae_p: &Bound,
        window: Var,
        mask: &MaskSpec,
    ) -> Result<Prediction> {
        let shape = tape.shape(window).to_vec();
        if shape.len() != 4 || shape[0] != mask.window_len() {
            return Err(ModelError::Shape(format!(
                "window {shape:?} does not hold {} frames",
                mask.window_len()
            )));
        }
        let frames: Vec<Var> = mask
            .observed
            .iter()
            .map(|&t| tape.index(window, t))
            .collect::<std::result::Result<_, _>>()?;
        let observed = tape.stack(&frames)?;
        let z_obs = cae.encode(tape, cae_p, observed)?;
        let latents = self.forward_latents(tape, p, z_obs, mask, None)?;
        let frames = cae.decode(tape, cae_p, latents)?;
        Ok(Prediction {
            latents,
            frames: Some(frames),
        })
    }
}
