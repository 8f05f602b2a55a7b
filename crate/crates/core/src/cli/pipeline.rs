//! Shared plumbing for the commands: output layout, dataset loading and
//! checkpoint (de)serialization of models and resumable training state.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::dataset::{dilate, normalize_channelwise, read_manifest, read_sequence, ChannelStats, FieldSequence, Splits};
use crate::model::{Cae, CaeConfig, Checkpoint, LatentLstm, LstmConfig, ParamSet, Pstmae, TransformerConfig};
use crate::train::{EpochRecord, Optimizer, TrainConfig};

use super::config::Kind;
use super::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";

/// Fixed directory layout under an output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    fn dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.root.join(name);
        std::fs::create_dir_all(&d).map_err(|e| CliError::io(&d, e))?;
        Ok(d)
    }

    pub fn data(&self) -> Result<PathBuf> {
        self.dir("data")
    }

    pub fn ckpt(&self) -> Result<PathBuf> {
        self.dir("ckpt")
    }

    pub fn reports(&self) -> Result<PathBuf> {
        self.dir("reports")
    }

    pub fn maps(&self) -> Result<PathBuf> {
        self.dir("maps")
    }
}

/// Normalized, dilated splits ready for training.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub kind: Option<Kind>,
    pub splits: Splits<FieldSequence>,
    pub stats: Vec<ChannelStats>,
    /// Channels, height, width.
    pub frame: [usize; 3],
}

impl Prepared {
    pub fn split(&self, name: &str) -> Result<&[FieldSequence]> {
        match name {
            "train" => Ok(&self.splits.train),
            "val" => Ok(&self.splits.val),
            "test" => Ok(&self.splits.test),
            other => Err(CliError::Config(format!("unknown split {other:?}"))),
        }
    }

    pub fn variables(&self) -> Vec<String> {
        match self.kind {
            Some(k) if k.variables().len() == self.frame[0] => k.variables().iter().map(|s| s.to_string()).collect(),
            _ => (0..self.frame[0]).map(|c| format!("c{c}")).collect(),
        }
    }

    pub fn dataset_name(&self) -> &'static str {
        self.kind.map(Kind::as_str).unwrap_or("custom")
    }
}

/// Reads every sequence listed in `<dir>/manifest.json`, normalizes all
/// splits with training-split statistics, then applies `dilation`.
pub fn load_splits(dir: &Path, dilation: usize) -> Result<Prepared> {
    let manifest = dir.join(MANIFEST);
    if !manifest.is_file() {
        return Err(CliError::Config(format!(
            "dataset manifest {} not found (run `pstmae generate` first)",
            manifest.display()
        )));
    }
    let entries = read_manifest(&manifest)?;
    let mut raw: Splits<FieldSequence> = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for e in &entries {
        let path = dir.join(&e.file);
        let seq = read_sequence(&path).map_err(|err| CliError::Config(format!("{}: {err}", path.display())))?;
        match e.split.as_str() {
            "train" => raw.train.push(seq),
            "val" => raw.val.push(seq),
            "test" => raw.test.push(seq),
            s => return Err(CliError::Config(format!("{}: unknown split {s:?}", manifest.display()))),
        }
    }
    let first = raw
        .train
        .first()
        .ok_or_else(|| CliError::Config(format!("{} lists no training sequences", manifest.display())))?;
    let [_, c, h, w] = first.dims();
    let (normalized, stats) = normalize_channelwise(&raw)?;
    let dil = |v: Vec<FieldSequence>| -> Result<Vec<FieldSequence>> {
        v.iter().map(|s| Ok(dilate(s, dilation)?)).collect()
    };
    let splits = Splits {
        train: dil(normalized.train)?,
        val: dil(normalized.val)?,
        test: dil(normalized.test)?,
    };
    let kind = match entries[0].kind.as_str() {
        "swe" => Some(Kind::Swe),
        "dr" => Some(Kind::Dr),
        _ => None,
    };
    Ok(Prepared {
        kind,
        splits,
        stats,
        frame: [c, h, w],
    })
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

fn from_json<T: serde::de::DeserializeOwned>(v: &Value, what: &str) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| CliError::Config(format!("checkpoint {what}: {e}")))
}

pub fn cae_with(config: CaeConfig, params: &ParamSet) -> Result<Cae> {
    let mut cae = Cae::new(config, &mut rng())?;
    cae.params_mut().load_from(params)?;
    Ok(cae)
}

/// A model checkpoint: the autoencoder plus, for sequence models, the
/// transformer or LSTM trained on top of it.
#[derive(Clone, Debug)]
pub enum Model {
    Cae(Cae),
    Pstmae(Cae, Pstmae),
    Lstm(Cae, LatentLstm),
}

impl Model {
    pub fn name(&self) -> &'static str {
        match self {
            Model::Cae(_) => "cae",
            Model::Pstmae(..) => "pstmae",
            Model::Lstm(..) => "lstm",
        }
    }

    pub fn cae(&self) -> &Cae {
        match self {
            Model::Cae(c) | Model::Pstmae(c, _) | Model::Lstm(c, _) => c,
        }
    }

    fn config(&self) -> Value {
        match self {
            Model::Cae(c) => json!({ "cae": c.config() }),
            Model::Pstmae(c, m) => json!({ "cae": c.config(), "transformer": m.config() }),
            Model::Lstm(c, m) => json!({ "cae": c.config(), "lstm": m.config() }),
        }
    }

    /// Trainable parameters of the outermost model.
    fn own_params(&self) -> &ParamSet {
        match self {
            Model::Cae(c) => c.params(),
            Model::Pstmae(_, m) => m.params(),
            Model::Lstm(_, m) => m.params(),
        }
    }

    fn all_params(&self, own: &ParamSet) -> ParamSet {
        let mut ps = self.cae().params().prefixed("cae.");
        if !matches!(self, Model::Cae(_)) {
            ps.extend(own.prefixed(&format!("{}.", self.name())));
        }
        ps
    }

    fn load_own(&mut self, ps: &ParamSet) -> Result<()> {
        match self {
            Model::Cae(c) => c.params_mut().load_from(ps)?,
            Model::Pstmae(_, m) => m.params_mut().load_from(ps)?,
            Model::Lstm(_, m) => m.params_mut().load_from(ps)?,
        }
        Ok(())
    }

    /// Saves the model with `meta` (training config, data provenance, …).
    pub fn save(&self, path: &Path, meta: Value) -> Result<()> {
        let ck = Checkpoint {
            kind: self.name().into(),
            config: self.config(),
            meta,
            params: self.all_params(self.own_params()),
        };
        ck.save(path).map_err(CliError::from)
    }

    fn from_checkpoint(ck: &Checkpoint, kind: &str) -> Result<Self> {
        let cae_cfg: CaeConfig = from_json(&ck.config["cae"], "autoencoder config")?;
        let cae = cae_with(cae_cfg, &ck.params.strip_prefix("cae."))?;
        let mut model = match kind {
            "cae" => Model::Cae(cae),
            "pstmae" => {
                let cfg: TransformerConfig = from_json(&ck.config["transformer"], "transformer config")?;
                Model::Pstmae(cae, Pstmae::new(cfg, &mut rng())?)
            }
            "lstm" => {
                let cfg: LstmConfig = from_json(&ck.config["lstm"], "lstm config")?;
                Model::Lstm(cae, LatentLstm::new(cfg, &mut rng())?)
            }
            other => return Err(CliError::Config(format!("unknown checkpoint kind {other:?}"))),
        };
        if kind != "cae" {
            model.load_own(&ck.params.strip_prefix(&format!("{kind}.")))?;
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<(Self, Value)> {
        if !path.is_file() {
            return Err(CliError::Config(format!("checkpoint {} not found", path.display())));
        }
        let ck = Checkpoint::load(path)?;
        let kind = ck.kind.clone();
        Ok((Self::from_checkpoint(&ck, &kind)?, ck.meta))
    }
}

/// Everything needed to continue a training phase.
pub struct RunState {
    pub model: Model,
    pub optimizer_steps: u64,
    pub moments: ParamSet,
    pub epochs_done: usize,
    pub best: Option<(usize, f64, ParamSet)>,
    pub history: Vec<EpochRecord>,
}

pub struct RunView<'a> {
    pub model: &'a Model,
    pub own: &'a ParamSet,
    pub optimizer: &'a Optimizer,
    pub epochs_done: usize,
    pub best: &'a Option<(usize, f64, ParamSet)>,
    pub history: &'a [EpochRecord],
    pub train: &'a TrainConfig,
}

pub fn save_state(path: &Path, v: &RunView) -> Result<()> {
    let mut params = v.model.all_params(v.own);
    params.extend(v.optimizer.state(v.own));
    if let Some((_, _, best)) = v.best {
        params.extend(best.prefixed("best."));
    }
    let meta = json!({
        "epochs_done": v.epochs_done,
        "optimizer_steps": v.optimizer.steps(),
        "best_epoch": v.best.as_ref().map(|b| b.0),
        "best_val": v.best.as_ref().map(|b| b.1),
        "history": v.history,
        "train": v.train,
    });
    let ck = Checkpoint {
        kind: format!("{}-state", v.model.name()),
        config: v.model.config(),
        meta,
        params,
    };
    ck.save(path).map_err(CliError::from)
}

pub fn load_state(path: &Path, kind: &str) -> Result<RunState> {
    if !path.is_file() {
        return Err(CliError::Config(format!("resume checkpoint {} not found", path.display())));
    }
    let ck = Checkpoint::load(path)?;
    let want = format!("{kind}-state");
    if ck.kind != want {
        return Err(CliError::Config(format!(
            "{} holds {}, expected {want}",
            path.display(),
            ck.kind
        )));
    }
    let model = Model::from_checkpoint(&ck, kind)?;
    let own = model.own_params();
    let moments = {
        let mut m = ParamSet::new();
        for (n, _) in own.iter() {
            for p in ["opt.m.", "opt.v."] {
                let name = format!("{p}{n}");
                let t = ck
                    .params
                    .by_name(&name)
                    .ok_or_else(|| CliError::Config(format!("{}: missing {name}", path.display())))?;
                m.push(name, t.clone());
            }
        }
        m
    };
    let best = match (ck.meta["best_epoch"].as_u64(), ck.meta["best_val"].as_f64()) {
        (Some(e), Some(v)) => {
            let mut ps = own.clone();
            ps.load_from(&ck.params.strip_prefix("best."))?;
            Some((e as usize, v, ps))
        }
        _ => None,
    };
    Ok(RunState {
        optimizer_steps: ck.meta["optimizer_steps"].as_u64().unwrap_or(0),
        moments,
        epochs_done: ck.meta["epochs_done"].as_u64().unwrap_or(0) as usize,
        best,
        history: from_json(&ck.meta["history"], "history")?,
        model,
    })
}
