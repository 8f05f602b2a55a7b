use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::{sample_mask_count, FieldSequence, MaskSpec};
use crate::model::{Cae, ParamSet, Pstmae};
use crate::tensor::{Tape, Tensor};

use super::data::{gather_rows, window_frames, SplitWindows, WindowRef};
use super::{clip_global_norm, combined_loss, epoch_rng, eval_mask, EpochRecord, Optimizer, Result, TrainConfig, TrainError};

/// Masked-transformer training state; everything needed to resume.
#[derive(Clone, Debug)]
pub struct PstmaeRun {
    pub model: Pstmae,
    pub optimizer: Optimizer,
    pub epochs_done: usize,
    pub best: Option<(usize, f64, ParamSet)>,
    pub history: Vec<EpochRecord>,
}

impl PstmaeRun {
    pub fn new(model: Pstmae, cfg: &TrainConfig) -> Self {
        let optimizer = Optimizer::radam(cfg.lr_pstmae, model.params());
        Self {
            model,
            optimizer,
            epochs_done: 0,
            best: None,
            history: Vec::new(),
        }
    }

    pub fn best_model(&self) -> Pstmae {
        let mut m = self.model.clone();
        if let Some((_, _, p)) = &self.best {
            m.params_mut().load_from(p).expect("same architecture");
        }
        m
    }
}

/// Mean full-space and latent MSE over a set of windows.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WindowLosses {
    pub full_mse: f64,
    pub latent_mse: f64,
}

impl WindowLosses {
    pub fn combined(&self, lambda: f64) -> f64 {
        self.full_mse + lambda * self.latent_mse
    }
}

struct Batch {
    x: Tensor<f32>,
    z: Tensor<f32>,
    observed: Vec<Tensor<f32>>,
    masks: Vec<MaskSpec>,
}

fn assemble(
    seqs: &[FieldSequence],
    latents: &[Tensor<f32>],
    windows: &[WindowRef],
    masks: Vec<MaskSpec>,
    len: usize,
) -> Batch {
    let frames: Vec<Tensor<f32>> = windows.iter().map(|w| window_frames(&seqs[w.seq], w.start, len)).collect();
    let [_, c, h, wd] = seqs[windows[0].seq].dims();
    let x = Tensor::new(
        [windows.len() * len, c, h, wd],
        frames.iter().flat_map(|f| f.data().iter().copied()).collect(),
    )
    .expect("consistent frame shapes");
    let d = latents[0].shape()[1];
    let z = Tensor::new(
        [windows.len() * len, d],
        windows
            .iter()
            .flat_map(|w| latents[w.seq].data()[w.start * d..(w.start + len) * d].iter().copied())
            .collect(),
    )
    .expect("windows inside sequences");
    let observed = windows
        .iter()
        .zip(&masks)
        .map(|(w, m)| gather_rows(&latents[w.seq], m.observed.iter().map(|&t| w.start + t)))
        .collect();
    Batch { x, z, observed, masks }
}

struct StepOut {
    full: f64,
    latent: f64,
}

fn train_step(run: &mut PstmaeRun, cae: &Cae, batch: Batch, cfg: &TrainConfig) -> Result<StepOut> {
    let mut tape: Tape<f32> = Tape::new();
    let p = run.model.params().bind(&mut tape, true);
    let cp = cae.params().bind(&mut tape, false);
    let mut preds = Vec::with_capacity(batch.masks.len());
    for (obs, mask) in batch.observed.into_iter().zip(&batch.masks) {
        let zo = tape.constant(obs);
        preds.push(run.model.forward_latents(&mut tape, &p, zo, mask, None)?);
    }
    let z_hat = tape.stack(&preds)?;
    let d = run.model.config().latent_dim;
    let rows = batch.masks.len() * cfg.window_len();
    let z_hat = tape.reshape(z_hat, [rows, d])?;
    let x_hat = cae.decode(&mut tape, &cp, z_hat)?;
    let x = tape.constant(batch.x);
    let z = tape.constant(batch.z);
    let loss = combined_loss(&mut tape, x_hat, x, z_hat, z, cfg.lambda)?;
    let full = tape.value(loss.full).item().unwrap_or(f32::NAN) as f64;
    let latent = tape.value(loss.latent).item().unwrap_or(f32::NAN) as f64;
    if !(full.is_finite() && latent.is_finite()) {
        return Err(TrainError::Diverged(format!("loss full {full}, latent {latent}")));
    }
    tape.backward(loss.total)?;
    let mut grads = run.model.params().grads(&tape, &p);
    if let Some(max) = cfg.clip_norm {
        clip_global_norm(&mut grads, max);
    }
    run.optimizer.step(run.model.params_mut(), &grads)?;
    Ok(StepOut { full, latent })
}

/// Single-pass prediction for one window from cached latents of its
/// observed frames. Returns `(ẑ [L, d], x̂ [L, C, H, W])`.
pub fn predict_pstmae(
    model: &Pstmae,
    cae: &Cae,
    latents: &Tensor<f32>,
    start: usize,
    mask: &MaskSpec,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut tape: Tape<f32> = Tape::new();
    let p = model.params().bind(&mut tape, false);
    let cp = cae.params().bind(&mut tape, false);
    let zo = tape.constant(gather_rows(latents, mask.observed.iter().map(|&t| start + t)));
    let z_hat = model.forward_latents(&mut tape, &p, zo, mask, None)?;
    let x_hat = cae.decode(&mut tape, &cp, z_hat)?;
    Ok((tape.value(z_hat).clone(), tape.value(x_hat).clone()))
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

/// Mean losses over every window of a split under frozen evaluation masks.
pub fn evaluate_pstmae(
    model: &Pstmae,
    cae: &Cae,
    seqs: &[FieldSequence],
    latents: &[Tensor<f32>],
    windows: &SplitWindows,
    cfg: &TrainConfig,
    missing: usize,
) -> Result<WindowLosses> {
    let mut acc = WindowLosses::default();
    for (i, w) in windows.windows.iter().enumerate() {
        let mask = eval_mask(cfg, i, missing)?;
        let (z_hat, x_hat) = predict_pstmae(model, cae, &latents[w.seq], w.start, &mask)?;
        let x = window_frames(&seqs[w.seq], w.start, windows.window_len);
        let z = gather_rows(&latents[w.seq], w.start..w.start + windows.window_len);
        acc.full_mse += mse(x_hat.data(), x.data());
        acc.latent_mse += mse(z_hat.data(), z.data());
    }
    let n = windows.len().max(1) as f64;
    acc.full_mse /= n;
    acc.latent_mse /= n;
    Ok(acc)
}

/// Trains the transformer on a frozen autoencoder until `cfg.epochs`.
///
/// Every batch draws fresh masks (one missing count per batch). Latent
/// targets are the autoencoder's encodings of the ground-truth frames,
/// supplied precomputed in `*_latents`. Validation uses frozen masks; the
/// parameters with the lowest validation full-space MSE are kept.
pub fn train_pstmae(
    run: &mut PstmaeRun,
    cae: &Cae,
    train: (&[FieldSequence], &[Tensor<f32>]),
    val: (&[FieldSequence], &[Tensor<f32>]),
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&PstmaeRun) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    let len = cfg.window_len();
    let train_w = SplitWindows::new(train.0, len, cfg.window_stride)?;
    let val_w = SplitWindows::new(val.0, len, 1)?;
    if train_w.is_empty() {
        return Err(TrainError::Invalid("no training windows".into()));
    }
    while run.epochs_done < cfg.epochs {
        let epoch = run.epochs_done + 1;
        run.optimizer.lr = super::epoch_lr(cfg.lr_pstmae, cfg.lr_decay, epoch, cfg.epochs);
        let mut rng = epoch_rng(cfg.seed, "pstmae", epoch);
        let mut order = train_w.windows.clone();
        order.shuffle(&mut rng);
        let (mut full, mut latent, mut n) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let count = match cfg.missing_range {
                Some([lo, hi]) => rng.random_range(lo..=hi),
                None => cfg.eval_missing(),
            };
            let masks = chunk
                .iter()
                .map(|_| sample_mask_count(cfg.t_in, cfg.t_out, count, &mut rng))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let batch = assemble(train.0, train.1, chunk, masks, len);
            let out = train_step(run, cae, batch, cfg)?;
            full += out.full * chunk.len() as f64;
            latent += out.latent * chunk.len() as f64;
            n += chunk.len();
        }
        let val_loss = if val_w.is_empty() {
            WindowLosses {
                full_mse: full / n as f64,
                latent_mse: latent / n as f64,
            }
        } else {
            evaluate_pstmae(&run.model, cae, val.0, val.1, &val_w, cfg, cfg.eval_missing())?
        };
        log::info!(
            "pstmae epoch {epoch}: train {:.3e}/{:.3e}, val {:.3e}/{:.3e}",
            full / n as f64,
            latent / n as f64,
            val_loss.full_mse,
            val_loss.latent_mse
        );
        run.history.push(EpochRecord {
            epoch,
            split: "train".into(),
            full_mse: full / n as f64,
            latent_mse: Some(latent / n as f64),
        });
        run.history.push(EpochRecord {
            epoch,
            split: "val".into(),
            full_mse: val_loss.full_mse,
            latent_mse: Some(val_loss.latent_mse),
        });
        if run.best.as_ref().is_none_or(|(_, b, _)| val_loss.full_mse < *b) {
            run.best = Some((epoch, val_loss.full_mse, run.model.params().clone()));
        }
        run.epochs_done = epoch;
        on_epoch(run)?;
    }
    Ok(())
}
