//! `train-cae`, `train-pstmae` and `train-baseline`.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::model::{Cae, LatentLstm, LstmConfig, ParamSet, Pstmae};
use crate::tensor::Tensor;
use crate::train::{
    encode_sequences, train_cae, train_lstm, train_pstmae, write_loss_csv, CaeRun, LstmRun, Optimizer, PstmaeRun,
    TrainConfig,
};

use super::config::ExperimentConfig;
use super::pipeline::{load_splits, load_state, save_state, Layout, Model, Prepared, RunView};
use super::{CliError, Result, TrainArgs};

const CAE_SALT: u64 = 0xCAE0;
const PSTMAE_SALT: u64 = 0x57AE;
const LSTM_SALT: u64 = 0x157A;

pub(super) fn model_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt)
}

/// Paths for one training phase.
pub(super) struct PhaseFiles {
    pub model: PathBuf,
    pub state: PathBuf,
    pub loss: PathBuf,
    pub config: PathBuf,
}

impl PhaseFiles {
    pub fn new(layout: &Layout, name: &str) -> Result<Self> {
        let ckpt = layout.ckpt()?;
        Ok(Self {
            model: ckpt.join(format!("{name}.ckpt")),
            state: ckpt.join(format!("{name}.state.ckpt")),
            loss: layout.reports()?.join(format!("{name}_loss.csv")),
            config: ckpt.join(format!("{name}.config.json")),
        })
    }
}

fn data_dir(layout: &Layout, explicit: Option<&Path>) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| layout.root.join("data"))
}

fn model_meta(phase: &str, best: &Option<(usize, f64, ParamSet)>, train: &TrainConfig, data: &Prepared, dilation: usize) -> Value {
    json!({
        "phase": phase,
        "best_epoch": best.as_ref().map(|b| b.0),
        "best_val_mse": best.as_ref().map(|b| b.1),
        "train": train,
        "dilation": dilation,
        "stats": data.stats,
    })
}

/// Writes the loss curve, the resumable state and the best model after an
/// epoch.
fn persist(files: &PhaseFiles, view: &RunView, best: &Model, meta: Value) -> Result<()> {
    write_loss_csv(&files.loss, view.history)?;
    save_state(&files.state, view)?;
    best.save(&files.model, meta)
}

fn resume_optimizer(opt: &mut Optimizer, own: &ParamSet, moments: &ParamSet, steps: u64) -> Result<()> {
    opt.restore(own, moments, steps)?;
    Ok(())
}

/// Loads the frozen autoencoder and checks it matches the data.
pub(super) fn load_cae(path: &Path, data: &Prepared) -> Result<Cae> {
    let (model, _) = Model::load(path)?;
    let Model::Cae(cae) = model else {
        return Err(CliError::Config(format!("{} is not an autoencoder checkpoint", path.display())));
    };
    let c = cae.config();
    if [c.channels, c.height, c.width] != data.frame {
        return Err(CliError::Config(format!(
            "autoencoder expects {}×{}×{} frames, dataset has {:?}",
            c.channels, c.height, c.width, data.frame
        )));
    }
    Ok(cae)
}

/// Trains an autoencoder on `data` and writes its artifacts under `layout`.
pub(super) fn run_cae(
    cfg: &ExperimentConfig,
    tc: &TrainConfig,
    data: &Prepared,
    layout: &Layout,
    resume: Option<&Path>,
) -> Result<Cae> {
    let files = PhaseFiles::new(layout, "cae")?;
    cfg.write_resolved(&files.config)?;
    let [c, h, w] = data.frame;
    let mut run = match resume {
        Some(path) => {
            let s = load_state(path, "cae")?;
            let Model::Cae(cae) = s.model else { unreachable!("kind checked") };
            let mut run = CaeRun::new(cae, tc);
            resume_optimizer(&mut run.optimizer, run.cae.params(), &s.moments, s.optimizer_steps)?;
            run.epochs_done = s.epochs_done;
            run.best = s.best;
            run.history = s.history;
            run
        }
        None => CaeRun::new(Cae::new(cfg.model.cae(c, h, w), &mut model_rng(tc.seed, CAE_SALT))?, tc),
    };
    let dilation = cfg.data.dilation;
    let save = |run: &CaeRun| -> Result<()> {
        let view = RunView {
            model: &Model::Cae(run.cae.clone()),
            own: run.cae.params(),
            optimizer: &run.optimizer,
            epochs_done: run.epochs_done,
            best: &run.best,
            history: &run.history,
            train: tc,
        };
        persist(&files, &view, &Model::Cae(run.best_cae()), model_meta("cae", &run.best, tc, data, dilation))
    };
    let mut err = None;
    train_cae(&mut run, &data.splits.train, &data.splits.val, tc, &mut |r| {
        save(r).map_err(|e| {
            let msg = e.to_string();
            err = Some(e);
            crate::train::TrainError::Invalid(msg)
        })
    })
    .map_err(|e| err.take().unwrap_or_else(|| e.into()))?;
    save(&run)?;
    log::info!("autoencoder written to {}", files.model.display());
    Ok(run.best_cae())
}

pub(super) fn train_cae_cmd(cfg: &ExperimentConfig, a: &TrainArgs) -> Result<()> {
    let layout = Layout::new(&a.out);
    let data = load_splits(&data_dir(&layout, a.data.as_deref()), cfg.data.dilation)?;
    let mut tc = cfg.train.clone();
    if let Some(n) = a.epochs {
        tc.cae_epochs = n;
    }
    run_cae(cfg, &tc, &data, &layout, a.resume.as_deref()).map(|_| ())
}

/// Frozen-autoencoder latents of the training and validation splits.
pub(super) fn latents(cae: &Cae, data: &Prepared) -> Result<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)> {
    Ok((encode_sequences(cae, &data.splits.train)?, encode_sequences(cae, &data.splits.val)?))
}

pub(super) fn run_pstmae(
    cfg: &ExperimentConfig,
    tc: &TrainConfig,
    data: &Prepared,
    cae: Option<&Cae>,
    layout: &Layout,
    resume: Option<&Path>,
) -> Result<Pstmae> {
    let files = PhaseFiles::new(layout, "pstmae")?;
    cfg.write_resolved(&files.config)?;
    let (cae, mut run) = match resume {
        Some(path) => {
            let s = load_state(path, "pstmae")?;
            let Model::Pstmae(cae, model) = s.model else { unreachable!("kind checked") };
            let mut run = PstmaeRun::new(model, tc);
            resume_optimizer(&mut run.optimizer, run.model.params(), &s.moments, s.optimizer_steps)?;
            run.epochs_done = s.epochs_done;
            run.best = s.best;
            run.history = s.history;
            (cae, run)
        }
        None => {
            let cae = cae.ok_or_else(|| CliError::Config("a frozen autoencoder is required".into()))?;
            let model = Pstmae::new(cfg.model.transformer(), &mut model_rng(tc.seed, PSTMAE_SALT))?;
            (cae.clone(), PstmaeRun::new(model, tc))
        }
    };
    let (z_train, z_val) = latents(&cae, data)?;
    let dilation = cfg.data.dilation;
    let save = |run: &PstmaeRun| -> Result<()> {
        let view = RunView {
            model: &Model::Pstmae(cae.clone(), run.model.clone()),
            own: run.model.params(),
            optimizer: &run.optimizer,
            epochs_done: run.epochs_done,
            best: &run.best,
            history: &run.history,
            train: tc,
        };
        let best = Model::Pstmae(cae.clone(), run.best_model());
        persist(&files, &view, &best, model_meta("pstmae", &run.best, tc, data, dilation))
    };
    let mut err = None;
    train_pstmae(
        &mut run,
        &cae,
        (&data.splits.train, &z_train),
        (&data.splits.val, &z_val),
        tc,
        &mut |r| {
            save(r).map_err(|e| {
                let msg = e.to_string();
                err = Some(e);
                crate::train::TrainError::Invalid(msg)
            })
        },
    )
    .map_err(|e| err.take().unwrap_or_else(|| e.into()))?;
    save(&run)?;
    log::info!("transformer written to {}", files.model.display());
    Ok(run.best_model())
}

pub(super) fn run_lstm(
    cfg: &ExperimentConfig,
    tc: &TrainConfig,
    data: &Prepared,
    cae: Option<&Cae>,
    layout: &Layout,
    resume: Option<&Path>,
) -> Result<LatentLstm> {
    let files = PhaseFiles::new(layout, "lstm")?;
    cfg.write_resolved(&files.config)?;
    let (cae, mut run) = match resume {
        Some(path) => {
            let s = load_state(path, "lstm")?;
            let Model::Lstm(cae, model) = s.model else { unreachable!("kind checked") };
            let mut run = LstmRun::new(model, tc);
            resume_optimizer(&mut run.optimizer, run.model.params(), &s.moments, s.optimizer_steps)?;
            run.epochs_done = s.epochs_done;
            run.best = s.best;
            run.history = s.history;
            (cae, run)
        }
        None => {
            let cae = cae.ok_or_else(|| CliError::Config("a frozen autoencoder is required".into()))?;
            let lc = LstmConfig {
                latent_dim: cae.config().latent_dim,
            };
            (cae.clone(), LstmRun::new(LatentLstm::new(lc, &mut model_rng(tc.seed, LSTM_SALT))?, tc))
        }
    };
    let (z_train, z_val) = latents(&cae, data)?;
    let dilation = cfg.data.dilation;
    let save = |run: &LstmRun| -> Result<()> {
        let view = RunView {
            model: &Model::Lstm(cae.clone(), run.model.clone()),
            own: run.model.params(),
            optimizer: &run.optimizer,
            epochs_done: run.epochs_done,
            best: &run.best,
            history: &run.history,
            train: tc,
        };
        let best = Model::Lstm(cae.clone(), run.best_model());
        persist(&files, &view, &best, model_meta("lstm", &run.best, tc, data, dilation))
    };
    let mut err = None;
    train_lstm(
        &mut run,
        &cae,
        (&data.splits.train, &z_train),
        (&data.splits.val, &z_val),
        tc,
        &mut |r| {
            save(r).map_err(|e| {
                let msg = e.to_string();
                err = Some(e);
                crate::train::TrainError::Invalid(msg)
            })
        },
    )
    .map_err(|e| err.take().unwrap_or_else(|| e.into()))?;
    save(&run)?;
    log::info!("baseline written to {}", files.model.display());
    Ok(run.best_model())
}

fn frozen_cae(layout: &Layout, a: &TrainArgs, data: &Prepared) -> Result<Cae> {
    let path = a.cae.clone().unwrap_or_else(|| layout.root.join("ckpt").join("cae.ckpt"));
    load_cae(&path, data)
}

pub(super) fn train_pstmae_cmd(cfg: &ExperimentConfig, a: &TrainArgs) -> Result<()> {
    let layout = Layout::new(&a.out);
    let data = load_splits(&data_dir(&layout, a.data.as_deref()), cfg.data.dilation)?;
    let mut tc = cfg.train.clone();
    if let Some(n) = a.epochs {
        tc.epochs = n;
    }
    // A state checkpoint carries its own autoencoder.
    let cae = match a.resume {
        Some(_) => None,
        None => Some(frozen_cae(&layout, a, &data)?),
    };
    run_pstmae(cfg, &tc, &data, cae.as_ref(), &layout, a.resume.as_deref()).map(|_| ())
}

pub(super) fn train_baseline_cmd(cfg: &ExperimentConfig, a: &TrainArgs) -> Result<()> {
    let layout = Layout::new(&a.out);
    let data = load_splits(&data_dir(&layout, a.data.as_deref()), cfg.data.dilation)?;
    let mut tc = cfg.train.clone();
    if let Some(n) = a.epochs {
        tc.baseline_epochs = n;
    }
    let cae = match a.resume {
        Some(_) => None,
        None => Some(frozen_cae(&layout, a, &data)?),
    };
    run_lstm(cfg, &tc, &data, cae.as_ref(), &layout, a.resume.as_deref()).map(|_| ())
}
