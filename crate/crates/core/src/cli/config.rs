//! Experiment configuration: one JSON document layered over a scale preset.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::{CaeConfig, TransformerConfig};
use crate::sim::{DrParams, SimParams, SweParams};
use crate::train::TrainConfig;

use super::CliError;

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "PSTMAE_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Swe,
    Dr,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Swe => "swe",
            Kind::Dr => "dr",
        }
    }

    pub fn variables(self) -> &'static [&'static str] {
        match self {
            Kind::Swe => &["h", "u", "v"],
            Kind::Dr => &["u", "v"],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Scale {
    /// 32×32 grids, 40 sequences, batch 8.
    #[default]
    Desk,
    /// 128×128 grids, 600 sequences, batch 32.
    Paper,
}

/// Fixed values replacing sampled shallow-water parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dx: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub friction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center_x: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center_y: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bump_height: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot_interval: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_u: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: Kind,
    pub sequences: usize,
    pub grid: usize,
    pub frames: usize,
    /// Temporal subsampling applied when sequences are loaded for training.
    pub dilation: usize,
    /// Train, validation and test fractions.
    pub splits: [f64; 3],
    pub swe: SweOverrides,
    pub dr: DrOverrides,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub ladder: Vec<usize>,
    pub latent_dim: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub ff_mult: usize,
}

impl ModelConfig {
    pub fn cae(&self, channels: usize, height: usize, width: usize) -> CaeConfig {
        CaeConfig {
            channels,
            height,
            width,
            ladder: self.ladder.clone(),
            latent_dim: self.latent_dim,
        }
    }

    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            latent_dim: self.latent_dim,
            heads: self.heads,
            encoder_depth: self.encoder_depth,
            decoder_depth: self.decoder_depth,
            ff_mult: self.ff_mult,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub split: String,
    /// Hidden input steps in evaluation masks; defaults to the training
    /// missing ratio.
    pub missing: Option<usize>,
    /// Windows rendered as error maps when maps are requested.
    pub error_map_windows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub lambda: Vec<f64>,
    pub missing: Vec<usize>,
    pub dilation: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; copied into `train.seed` on resolution.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

pub const LAMBDA_GRID: [f64; 9] = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 0.6, 0.7, 1.0];

impl ExperimentConfig {
    pub fn preset(scale: Scale) -> Self {
        let desk = scale == Scale::Desk;
        Self {
            seed: 0,
            data: DataConfig {
                kind: Kind::Swe,
                sequences: if desk { 40 } else { 600 },
                grid: if desk { 32 } else { 128 },
                frames: if desk { 40 } else { 200 },
                dilation: 1,
                splits: [0.8, 0.1, 0.1],
                swe: SweOverrides::default(),
                dr: DrOverrides::default(),
            },
            model: ModelConfig {
                ladder: CaeConfig::default_ladder(),
                latent_dim: 128,
                heads: 2,
                encoder_depth: 4,
                decoder_depth: 1,
                ff_mult: 4,
            },
            train: if desk { TrainConfig::default() } else { TrainConfig::paper() },
            eval: EvalConfig {
                split: "test".into(),
                missing: None,
                error_map_windows: 1,
            },
            sweep: SweepConfig {
                lambda: LAMBDA_GRID.to_vec(),
                missing: (1..=6).collect(),
                dilation: (1..=5).collect(),
            },
        }
    }

    /// Preset for `scale`, overlaid with the JSON document at `path` (if
    /// any), then the seed from the environment.
    pub fn load(path: Option<&Path>, scale: Scale) -> Result<Self, CliError> {
        let user = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("config {}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(s) => Some(
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| CliError::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        Self::resolve(user, scale, env_seed)
    }

    pub fn resolve(user: Value, scale: Scale, env_seed: Option<u64>) -> Result<Self, CliError> {
        if !user.is_object() {
            return Err(CliError::Config("config must be a JSON object".into()));
        }
        let mut base = serde_json::to_value(Self::preset(scale)).expect("config serializes");
        // A scale-dependent frame default: diffusion–reaction runs store 100
        // frames at paper scale.
        if scale == Scale::Paper && user.pointer("/data/kind") == Some(&Value::from("dr")) {
            base["data"]["frames"] = Value::from(100);
        }
        merge(&mut base, user);
        let mut cfg: Self = serde_json::from_value(base).map_err(|e| CliError::Config(format!("config: {e}")))?;
        if let Some(seed) = env_seed {
            cfg.seed = seed;
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let d = &self.data;
        if d.sequences == 0 || d.frames == 0 || d.grid == 0 || d.dilation == 0 {
            return bad("data.sequences, frames, grid and dilation must be ≥ 1".into());
        }
        if d.splits.iter().any(|r| !(*r >= 0.0)) || (d.splits.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("data.splits {:?} must be non-negative and sum to 1", d.splits));
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.model
            .transformer()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if !["train", "val", "test"].contains(&self.eval.split.as_str()) {
            return bad(format!("eval.split {:?} must be train, val or test", self.eval.split));
        }
        if let Some(k) = self.eval.missing {
            if k >= self.train.t_in {
                return bad(format!("eval.missing {k} leaves no observed input"));
            }
        }
        if self.sweep.lambda.iter().any(|l| !(*l >= 0.0)) {
            return bad("sweep.lambda values must be ≥ 0".into());
        }
        if self.sweep.missing.iter().any(|&k| k >= self.train.t_in) {
            return bad("sweep.missing values must be below t_in".into());
        }
        if self.sweep.dilation.contains(&0) {
            return bad("sweep.dilation values must be ≥ 1".into());
        }
        Ok(())
    }

    /// Solver parameters for sequence `index`.
    pub fn sim_params(&self, index: usize) -> SimParams {
        let seed = sequence_seed(self.seed, index);
        let d = &self.data;
        match d.kind {
            Kind::Swe => {
                let mut p = SweParams::sample(d.grid, d.frames, seed);
                let o = &d.swe;
                p.dt = o.dt.unwrap_or(p.dt);
                p.dx = o.dx.unwrap_or(p.dx);
                p.g = o.g.unwrap_or(p.g);
                p.friction = o.friction.unwrap_or(p.friction);
                p.center_x = o.center_x.unwrap_or(p.center_x);
                p.center_y = o.center_y.unwrap_or(p.center_y);
                p.bump_height = o.bump_height.unwrap_or(p.bump_height);
                p.radius = o.radius.unwrap_or(p.radius);
                p.snapshot_interval = o.snapshot_interval.unwrap_or(p.snapshot_interval);
                SimParams::Swe(p)
            }
            Kind::Dr => {
                let base = DrParams::default();
                let o = &d.dr;
                SimParams::Dr(DrParams {
                    grid: d.grid,
                    frames: d.frames,
                    seed,
                    t_end: o.t_end.unwrap_or(base.t_end),
                    alpha_u: o.alpha_u.unwrap_or(base.alpha_u),
                    alpha_v: o.alpha_v.unwrap_or(base.alpha_v),
                    c: o.c.unwrap_or(base.c),
                })
            }
        }
    }

    pub fn write_resolved(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }
}

/// Per-sequence solver seed, decorrelated from the master seed.
pub fn sequence_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Recursive object merge; non-object values in `over` replace `base`.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
