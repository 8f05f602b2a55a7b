//! `evaluate`: metrics and error maps of a checkpoint on one split.

use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::dataset::FieldSequence;
use crate::metrics::{error_map, MetricsAccumulator, MetricsReport};
use crate::tensor::Tensor;
use crate::train::{
    encode_sequences, eval_mask, persistence_forecast, predict_lstm, predict_pstmae, window_frames, SplitWindows,
    TrainConfig,
};

use super::config::ExperimentConfig;
use super::pipeline::{load_splits, Layout, Model, Prepared};
use super::{CliError, Result};

/// Where to write error maps and for how many windows.
pub(super) struct MapRequest<'a> {
    pub dir: &'a Path,
    pub windows: usize,
}

fn check_frame(model: &Model, data: &Prepared) -> Result<()> {
    let c = model.cae().config();
    if [c.channels, c.height, c.width] != data.frame {
        return Err(CliError::Config(format!(
            "checkpoint expects {}×{}×{} frames, dataset has {:?}",
            c.channels, c.height, c.width, data.frame
        )));
    }
    Ok(())
}

fn write_maps(
    req: &MapRequest,
    model: &str,
    window: usize,
    steps: std::ops::Range<usize>,
    pred: &Tensor<f32>,
    truth: &Tensor<f32>,
    variables: &[String],
) -> Result<()> {
    let s = pred.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let plane = h * w;
    for t in steps {
        for (v, name) in variables.iter().enumerate().take(c) {
            let o = (t * c + v) * plane;
            let map = error_map(&pred.data()[o..o + plane], &truth.data()[o..o + plane], h, w)?;
            let path = req.dir.join(format!("{model}_w{window:03}_t{:02}_{name}.pgm", t + 1));
            map.write(&path)?;
        }
    }
    Ok(())
}

/// Scores `model` on `seqs` with every shifting window under the frozen
/// evaluation masks hiding `missing` inputs. Sequence models are reported
/// alongside the persistence baseline; the autoencoder reconstructs each
/// window frame by frame.
pub(super) fn score(
    model: &Model,
    data: &Prepared,
    seqs: &[FieldSequence],
    tc: &TrainConfig,
    missing: usize,
    maps: Option<&MapRequest>,
) -> Result<MetricsReport> {
    check_frame(model, data)?;
    let len = tc.window_len();
    let windows = SplitWindows::new(seqs, len, 1)?;
    if windows.is_empty() {
        return Err(CliError::Config(format!("no window of {len} frames fits the evaluation split")));
    }
    let vars = data.variables();
    let var_refs: Vec<&str> = vars.iter().map(String::as_str).collect();
    let [_, h, w] = data.frame;
    let acc = |name: &str| MetricsAccumulator::new(data.dataset_name(), name, &var_refs, len, [h, w]);
    let mut main = acc(model.name());
    let mut persist = acc("persistence");
    let cae = model.cae();
    let latents = match model {
        Model::Cae(_) => Vec::new(),
        _ => encode_sequences(cae, seqs)?,
    };
    for (i, win) in windows.windows.iter().enumerate() {
        let truth = window_frames(&seqs[win.seq], win.start, len);
        let mask = eval_mask(tc, i, missing)?;
        let pred = match model {
            Model::Cae(c) => c.decode_latents(&c.encode_frames(&truth)?)?,
            Model::Pstmae(c, m) => predict_pstmae(m, c, &latents[win.seq], win.start, &mask)?.1,
            Model::Lstm(c, m) => predict_lstm(m, c, &latents[win.seq], win.start, &mask)?.1,
        };
        main.add(pred.data(), truth.data())?;
        if !matches!(model, Model::Cae(_)) {
            let p = persistence_forecast(&truth, &mask)?;
            persist.add(p.data(), truth.data())?;
        }
        if let Some(req) = maps {
            if i < req.windows {
                let steps = match model {
                    Model::Cae(_) => 0..len,
                    _ => mask.outputs(),
                };
                write_maps(req, model.name(), i, steps, &pred, &truth, &vars)?;
            }
        }
    }
    let mut report = main.finish();
    if !matches!(model, Model::Cae(_)) {
        report.extend(persist.finish());
    }
    Ok(report)
}

/// Mean MSE of `model` over the forecast steps only.
pub(super) fn forecast_mse(report: &MetricsReport, model: &str, tc: &TrainConfig) -> Option<f64> {
    let rows: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.model == model && r.variable == "all")
        .filter_map(|r| r.step.parse::<usize>().ok().filter(|&s| s > tc.t_in).map(|_| r.mse))
        .collect();
    (!rows.is_empty()).then(|| rows.iter().sum::<f64>() / rows.len() as f64)
}

fn train_config(meta: &Value, cfg: &ExperimentConfig) -> Result<TrainConfig> {
    let mut tc: TrainConfig = match meta.get("train") {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| CliError::Config(format!("checkpoint training config: {e}")))?,
        None => cfg.train.clone(),
    };
    tc.seed = cfg.seed;
    Ok(tc)
}

pub fn run(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out: Option<&Path>,
    data: Option<&Path>,
    error_maps: Option<&Path>,
) -> Result<()> {
    let (model, meta) = Model::load(checkpoint)?;
    let root: PathBuf = match out {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .and_then(Path::parent)
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    let layout = Layout::new(&root);
    let dilation = meta["dilation"].as_u64().map(|d| d as usize).unwrap_or(cfg.data.dilation);
    let data_dir = data.map(Path::to_path_buf).unwrap_or_else(|| root.join("data"));
    let prepared = load_splits(&data_dir, dilation)?;
    let tc = train_config(&meta, cfg)?;
    let missing = cfg.eval.missing.unwrap_or_else(|| tc.eval_missing());
    if missing >= tc.t_in {
        return Err(CliError::Config(format!("missing {missing} leaves no observed input")));
    }
    let split = cfg.eval.split.as_str();
    let seqs = prepared.split(split)?;
    let map_dir = match error_maps {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| CliError::io(d, e))?;
            Some(d.to_path_buf())
        }
        None => None,
    };
    let req = map_dir.as_deref().map(|dir| MapRequest {
        dir,
        windows: cfg.eval.error_map_windows,
    });
    let report = score(&model, &prepared, seqs, &tc, missing, req.as_ref())?;
    let reports = layout.reports()?;
    let path = reports.join(format!("metrics_{}_{split}.csv", model.name()));
    report.write_csv(&path)?;
    cfg.write_resolved(&reports.join(format!("metrics_{}_{split}.config.json", model.name())))?;
    for r in report.rows.iter().filter(|r| r.variable == "all" && r.step == "all") {
        log::info!(
            "{} on {split}: mse {:.4e}, ssim {:.4}, psnr {:.2} dB",
            r.model,
            r.mse,
            r.ssim,
            r.psnr_mean_db
        );
    }
    log::info!("metrics written to {}", path.display());
    Ok(())
}
