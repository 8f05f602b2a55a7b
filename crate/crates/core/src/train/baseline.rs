use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::{sample_mask_count, FieldSequence, MaskSpec};
use crate::model::{interpolate_missing, Cae, LatentLstm, ParamSet};
use crate::tensor::{Tape, Tensor};

use super::data::{gather_rows, window_frames, SplitWindows, WindowRef};
use super::{epoch_rng, eval_mask, EpochRecord, Optimizer, Result, TrainConfig, TrainError, WindowLosses};

/// LSTM baseline training state; everything needed to resume.
#[derive(Clone, Debug)]
pub struct LstmRun {
    pub model: LatentLstm,
    pub optimizer: Optimizer,
    pub epochs_done: usize,
    pub best: Option<(usize, f64, ParamSet)>,
    pub history: Vec<EpochRecord>,
}

impl LstmRun {
    pub fn new(model: LatentLstm, cfg: &TrainConfig) -> Self {
        let optimizer = Optimizer::adam(cfg.lr_baseline, model.params());
        Self {
            model,
            optimizer,
            epochs_done: 0,
            best: None,
            history: Vec::new(),
        }
    }

    pub fn best_model(&self) -> LatentLstm {
        let mut m = self.model.clone();
        if let Some((_, _, p)) = &self.best {
            m.params_mut().load_from(p).expect("same architecture");
        }
        m
    }
}

/// Teacher-forcing inputs for one window: interpolated latents over the
/// input steps, ground truth over the forecast steps.
fn lstm_inputs(latents: &Tensor<f32>, w: WindowRef, mask: &MaskSpec) -> Result<Tensor<f32>> {
    let len = mask.window_len();
    let inputs = interpolate_missing(&gather_rows(latents, w.start..w.start + mask.t_in), mask)?;
    let tail = gather_rows(latents, w.start + mask.t_in..w.start + len);
    let d = inputs.shape()[1];
    let mut data = inputs.into_data();
    data.extend_from_slice(tail.data());
    Ok(Tensor::new([len, d], data)?)
}

fn train_step(
    run: &mut LstmRun,
    cae: &Cae,
    seqs: &[FieldSequence],
    latents: &[Tensor<f32>],
    batch: &[(WindowRef, MaskSpec)],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let (t_in, len) = (cfg.t_in, cfg.window_len());
    let d = run.model.config().latent_dim;
    let mut tape: Tape<f32> = Tape::new();
    let p = run.model.params().bind(&mut tape, true);
    let cp = cae.params().bind(&mut tape, false);
    let (mut next, mut next_true, mut fore, mut frames) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (w, mask) in batch {
        let inputs = lstm_inputs(&latents[w.seq], *w, mask)?;
        let x = tape.constant(gather_rows(&inputs, 0..len - 1));
        let pred = run.model.teacher_forced(&mut tape, &p, x)?;
        next.push(pred);
        next_true.push(gather_rows(&latents[w.seq], w.start + 1..w.start + len));
        for t in t_in - 1..len - 1 {
            fore.push(tape.index(pred, t)?);
        }
        frames.push(window_frames(&seqs[w.seq], w.start + t_in, len - t_in));
    }
    let next = tape.stack(&next)?;
    let next = tape.reshape(next, [batch.len() * (len - 1), d])?;
    let next_true = tape.constant(Tensor::stack(&next_true)?.reshape([batch.len() * (len - 1), d])?);
    let fore = tape.stack(&fore)?;
    let x_hat = cae.decode(&mut tape, &cp, fore)?;
    let [_, c, h, wd] = seqs[batch[0].0.seq].dims();
    let x = tape.constant(Tensor::stack(&frames)?.reshape([batch.len() * (len - t_in), c, h, wd])?);
    let loss = super::combined_loss(&mut tape, x_hat, x, next, next_true, cfg.lambda)?;
    let full = tape.value(loss.full).item().unwrap_or(f32::NAN) as f64;
    let latent = tape.value(loss.latent).item().unwrap_or(f32::NAN) as f64;
    if !(full.is_finite() && latent.is_finite()) {
        return Err(TrainError::Diverged(format!("baseline loss full {full}, latent {latent}")));
    }
    tape.backward(loss.total)?;
    let mut grads = run.model.params().grads(&tape, &p);
    if let Some(max) = cfg.clip_norm {
        super::clip_global_norm(&mut grads, max);
    }
    run.optimizer.step(run.model.params_mut(), &grads)?;
    Ok((full, latent))
}

/// Baseline prediction for one window: missing inputs filled by latent
/// interpolation, a warm-up over the input steps, then an autoregressive
/// rollout. Returns `(ẑ [L, d], x̂ [L, C, H, W])`.
pub fn predict_lstm(
    model: &LatentLstm,
    cae: &Cae,
    latents: &Tensor<f32>,
    start: usize,
    mask: &MaskSpec,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let filled = interpolate_missing(&gather_rows(latents, start..start + mask.t_in), mask)?;
    let mut tape: Tape<f32> = Tape::new();
    let p = model.params().bind(&mut tape, false);
    let cp = cae.params().bind(&mut tape, false);
    let d = filled.shape()[1];
    let mut z_hat = filled.data().to_vec();
    if mask.t_out > 0 {
        let hist = tape.constant(filled);
        let fore = model.rollout(&mut tape, &p, hist, mask.t_out)?;
        z_hat.extend_from_slice(tape.value(fore).data());
    }
    let z_hat = Tensor::new([mask.window_len(), d], z_hat)?;
    let zv = tape.constant(z_hat.clone());
    let x_hat = cae.decode(&mut tape, &cp, zv)?;
    Ok((z_hat, tape.value(x_hat).clone()))
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

/// Mean losses of the baseline over every window under the shared frozen
/// evaluation masks.
pub fn evaluate_lstm(
    model: &LatentLstm,
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
        let (z_hat, x_hat) = predict_lstm(model, cae, &latents[w.seq], w.start, &mask)?;
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

/// Trains the LSTM baseline on a frozen autoencoder until
/// `cfg.baseline_epochs`. Inputs see the same random masks as the
/// transformer, filled by interpolation; the loss is the decoded-frame MSE
/// over the forecast steps plus λ times the next-step latent MSE.
pub fn train_lstm(
    run: &mut LstmRun,
    cae: &Cae,
    train: (&[FieldSequence], &[Tensor<f32>]),
    val: (&[FieldSequence], &[Tensor<f32>]),
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&LstmRun) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if cfg.t_out == 0 {
        return Err(TrainError::Invalid("the baseline needs t_out ≥ 1".into()));
    }
    let len = cfg.window_len();
    let train_w = SplitWindows::new(train.0, len, cfg.window_stride)?;
    let val_w = SplitWindows::new(val.0, len, 1)?;
    if train_w.is_empty() {
        return Err(TrainError::Invalid("no training windows".into()));
    }
    while run.epochs_done < cfg.baseline_epochs {
        let epoch = run.epochs_done + 1;
        run.optimizer.lr = super::epoch_lr(cfg.lr_baseline, cfg.lr_decay, epoch, cfg.baseline_epochs);
        let mut rng = epoch_rng(cfg.seed, "lstm", epoch);
        let mut order = train_w.windows.clone();
        order.shuffle(&mut rng);
        let (mut full, mut latent, mut n) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let count = match cfg.missing_range {
                Some([lo, hi]) => rng.random_range(lo..=hi),
                None => cfg.eval_missing(),
            };
            let batch = chunk
                .iter()
                .map(|&w| Ok((w, sample_mask_count(cfg.t_in, cfg.t_out, count, &mut rng)?)))
                .collect::<Result<Vec<_>>>()?;
            let (f, l) = train_step(run, cae, train.0, train.1, &batch, cfg)?;
            full += f * chunk.len() as f64;
            latent += l * chunk.len() as f64;
            n += chunk.len();
        }
        let (full, latent) = (full / n as f64, latent / n as f64);
        let val_loss = if val_w.is_empty() {
            WindowLosses {
                full_mse: full,
                latent_mse: latent,
            }
        } else {
            evaluate_lstm(&run.model, cae, val.0, val.1, &val_w, cfg, cfg.eval_missing())?
        };
        log::info!(
            "lstm epoch {epoch}: train {full:.3e}/{latent:.3e}, val {:.3e}/{:.3e}",
            val_loss.full_mse,
            val_loss.latent_mse
        );
        run.history.push(EpochRecord {
            epoch,
            split: "train".into(),
            full_mse: full,
            latent_mse: Some(latent),
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

/// Repeats the most recent observed frame: step `t` gets the last observed
/// input at or before `t`, or the first observed input when none precedes
/// it. `window` is `[L, C, H, W]`.
pub fn persistence_forecast(window: &Tensor<f32>, mask: &MaskSpec) -> Result<Tensor<f32>> {
    let len = mask.window_len();
    if window.shape().first() != Some(&len) {
        return Err(TrainError::Invalid(format!("window {:?} does not match mask length {len}", window.shape())));
    }
    let Some(&first) = mask.observed.first() else {
        return Err(TrainError::Invalid("persistence needs an observed input".into()));
    };
    let n = window.len() / len;
    let src = window.data();
    let mut out = Vec::with_capacity(window.len());
    for t in 0..len {
        let s = mask.observed.iter().copied().filter(|&o| o <= t).next_back().unwrap_or(first);
        out.extend_from_slice(&src[s * n..(s + 1) * n]);
    }
    Ok(Tensor::new(window.shape().to_vec(), out)?)
}
