use rand::seq::SliceRandom;

use crate::dataset::FieldSequence;
use crate::model::{Cae, ParamSet};
use crate::tensor::{Tape, Tensor};

use super::data::window_frames;
use super::{epoch_rng, EpochRecord, Optimizer, Result, TrainConfig, TrainError};

/// Autoencoder training state; everything needed to resume.
#[derive(Clone, Debug)]
pub struct CaeRun {
    pub cae: Cae,
    pub optimizer: Optimizer,
    pub epochs_done: usize,
    pub best: Option<(usize, f64, ParamSet)>,
    pub history: Vec<EpochRecord>,
}

impl CaeRun {
    pub fn new(cae: Cae, cfg: &TrainConfig) -> Self {
        let optimizer = Optimizer::adam(cfg.lr_cae, cae.params());
        Self {
            cae,
            optimizer,
            epochs_done: 0,
            best: None,
            history: Vec::new(),
        }
    }

    /// Autoencoder with the best-validation parameters.
    pub fn best_cae(&self) -> Cae {
        let mut cae = self.cae.clone();
        if let Some((_, _, p)) = &self.best {
            cae.params_mut().load_from(p).expect("same architecture");
        }
        cae
    }
}

fn stack_frames(seqs: &[FieldSequence], refs: &[(usize, usize)]) -> Tensor<f32> {
    let frames: Vec<Tensor<f32>> = refs
        .iter()
        .map(|&(s, t)| window_frames(&seqs[s], t, 1).index(0).expect("one frame"))
        .collect();
    Tensor::stack(&frames).expect("non-empty batch")
}

fn frame_refs(seqs: &[FieldSequence]) -> Vec<(usize, usize)> {
    seqs.iter()
        .enumerate()
        .flat_map(|(s, q)| (0..q.len()).map(move |t| (s, t)))
        .collect()
}

/// Reconstruction MSE of `cae` over every frame of `seqs`.
pub fn reconstruction_mse(cae: &Cae, seqs: &[FieldSequence]) -> Result<f64> {
    let refs = frame_refs(seqs);
    let mut sq = 0.0;
    let mut count = 0usize;
    for chunk in refs.chunks(64) {
        let x = stack_frames(seqs, chunk);
        let y = cae.decode_latents(&cae.encode_frames(&x)?)?;
        sq += x.data().iter().zip(y.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>();
        count += x.len();
    }
    Ok(sq / count.max(1) as f64)
}

/// One gradient step on a frame batch; returns the batch MSE before the step.
fn step(cae: &mut Cae, opt: &mut Optimizer, x: Tensor<f32>) -> Result<f64> {
    let mut tape: Tape<f32> = Tape::new();
    let p = cae.params().bind(&mut tape, true);
    let xv = tape.constant(x);
    let z = cae.encode(&mut tape, &p, xv)?;
    let y = cae.decode(&mut tape, &p, z)?;
    let loss = tape.mse(y, xv)?;
    let value = tape.value(loss).item().unwrap_or(f32::NAN) as f64;
    if !value.is_finite() {
        return Err(TrainError::Diverged(format!("autoencoder loss {value}")));
    }
    tape.backward(loss)?;
    let grads = cae.params().grads(&tape, &p);
    opt.step(cae.params_mut(), &grads)?;
    Ok(value)
}

/// Per-frame reconstruction training until `cfg.cae_epochs`, keeping the
/// parameters with the lowest validation MSE. `on_epoch` runs after every
/// epoch (for checkpointing).
pub fn train_cae(
    run: &mut CaeRun,
    train: &[FieldSequence],
    val: &[FieldSequence],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&CaeRun) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    let refs = frame_refs(train);
    if refs.is_empty() {
        return Err(TrainError::Invalid("training split has no frames".into()));
    }
    while run.epochs_done < cfg.cae_epochs {
        let epoch = run.epochs_done + 1;
        run.optimizer.lr = super::epoch_lr(cfg.lr_cae, cfg.lr_decay, epoch, cfg.cae_epochs);
        let mut order = refs.clone();
        order.shuffle(&mut epoch_rng(cfg.seed, "cae", epoch));
        let mut sum = 0.0;
        let mut n = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let x = stack_frames(train, batch);
            sum += step(&mut run.cae, &mut run.optimizer, x)? * batch.len() as f64;
            n += batch.len();
        }
        let train_mse = sum / n as f64;
        let val_mse = if val.is_empty() { train_mse } else { reconstruction_mse(&run.cae, val)? };
        log::info!("cae epoch {epoch}: train {train_mse:.3e}, val {val_mse:.3e}");
        run.history.push(EpochRecord {
            epoch,
            split: "train".into(),
            full_mse: train_mse,
            latent_mse: None,
        });
        run.history.push(EpochRecord {
            epoch,
            split: "val".into(),
            full_mse: val_mse,
            latent_mse: None,
        });
        if run.best.as_ref().is_none_or(|(_, b, _)| val_mse < *b) {
            run.best = Some((epoch, val_mse, run.cae.params().clone()));
        }
        run.epochs_done = epoch;
        on_epoch(run)?;
    }
    Ok(())
}

/// Full-batch Adam on a fixed set of frames `[N, C, H, W]` until the MSE
/// drops below `target` or `max_steps` is reached. Returns the number of
/// steps taken and the final MSE.
pub fn fit_frames(cae: &mut Cae, frames: &Tensor<f32>, lr: f64, max_steps: usize, target: f64) -> Result<(usize, f64)> {
    let mut opt = Optimizer::adam(lr, cae.params());
    for s in 0..max_steps {
        let mse = step(cae, &mut opt, frames.clone())?;
        if mse < target {
            return Ok((s, mse));
        }
    }
    let y = cae.decode_latents(&cae.encode_frames(frames)?)?;
    let mse = frames
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / frames.len() as f64;
    Ok((max_steps, mse))
}
