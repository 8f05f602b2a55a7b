//! `sweep`: retrain and score across one ablation axis.
//!
//! Each grid point lives in `<out>/sweep/<axis>/<value>/` and is finished
//! once its `point.json` exists, so an interrupted sweep resumes by
//! skipping completed points.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::metrics::MetricsReport;
use crate::model::Cae;
use crate::train::TrainConfig;

use super::config::ExperimentConfig;
use super::evaluate::{forecast_mse, score};
use super::generate::parallel_map;
use super::pipeline::{load_splits, Layout, Model, Prepared};
use super::training::{load_cae, run_cae, run_lstm, run_pstmae};
use super::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    /// Latent loss weight λ.
    Lambda,
    /// Hidden input steps, used both in training and evaluation.
    Missing,
    /// Temporal subsampling of the sequences.
    Dilation,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Lambda => "lambda",
            Axis::Missing => "missing",
            Axis::Dilation => "dilation",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mse: f64,
    pub forecast_mse: Option<f64>,
    pub ssim: f64,
    pub psnr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis: String,
    pub value: String,
    pub pstmae: Summary,
    pub lstm: Option<Summary>,
    pub persistence: Option<Summary>,
}

pub const SWEEP_CSV_HEADER: &str = "axis,value,model,mse,forecast_mse,ssim,psnr_db";

fn summary(report: &MetricsReport, model: &str, tc: &TrainConfig) -> Result<Summary> {
    let r = report
        .overall(model)
        .ok_or_else(|| CliError::Config(format!("no {model} rows in report")))?;
    Ok(Summary {
        mse: r.mse,
        forecast_mse: forecast_mse(report, model, tc),
        ssim: r.ssim,
        psnr_db: r.psnr_mean_db,
    })
}

/// One grid point: the adjusted configuration and the hidden-input count
/// used for scoring.
struct Point {
    label: String,
    cfg: ExperimentConfig,
    missing: usize,
}

fn points(cfg: &ExperimentConfig, axis: Axis) -> Vec<Point> {
    let base_missing = cfg.eval.missing.unwrap_or_else(|| cfg.train.eval_missing());
    match axis {
        Axis::Lambda => cfg
            .sweep
            .lambda
            .iter()
            .map(|&l| {
                let mut c = cfg.clone();
                c.train.lambda = l;
                Point {
                    label: format!("{l}"),
                    cfg: c,
                    missing: base_missing,
                }
            })
            .collect(),
        Axis::Missing => cfg
            .sweep
            .missing
            .iter()
            .map(|&k| {
                let mut c = cfg.clone();
                c.train.missing_ratio = k as f64 / c.train.t_in as f64;
                c.train.missing_range = None;
                Point {
                    label: k.to_string(),
                    cfg: c,
                    missing: k,
                }
            })
            .collect(),
        Axis::Dilation => cfg
            .sweep
            .dilation
            .iter()
            .map(|&d| {
                let mut c = cfg.clone();
                c.data.dilation = d;
                Point {
                    label: d.to_string(),
                    cfg: c,
                    missing: base_missing,
                }
            })
            .collect(),
    }
}

fn run_point(axis: Axis, p: &Point, data_dir: &Path, base: Option<&Prepared>, cae: &Cae, dir: &Path) -> Result<SweepPoint> {
    let marker = dir.join("point.json");
    if marker.is_file() {
        let text = std::fs::read_to_string(&marker).map_err(|e| CliError::io(&marker, e))?;
        if let Ok(done) = serde_json::from_str::<SweepPoint>(&text) {
            log::info!("{} = {}: already done", axis.as_str(), p.label);
            return Ok(done);
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let owned;
    let data = match base {
        Some(d) => d,
        None => {
            owned = load_splits(data_dir, p.cfg.data.dilation)?;
            &owned
        }
    };
    let layout = Layout::new(dir);
    let tc = &p.cfg.train;
    log::info!("{} = {}: training", axis.as_str(), p.label);
    let pstmae = run_pstmae(&p.cfg, tc, data, Some(cae), &layout, None)?;
    let seqs = data.split(&p.cfg.eval.split)?;
    let report = score(&Model::Pstmae(cae.clone(), pstmae), data, seqs, tc, p.missing, None)?;
    let with_baselines = axis != Axis::Lambda;
    let (lstm, persistence) = if with_baselines {
        let lstm = run_lstm(&p.cfg, tc, data, Some(cae), &layout, None)?;
        let lr = score(&Model::Lstm(cae.clone(), lstm), data, seqs, tc, p.missing, None)?;
        (Some(summary(&lr, "lstm", tc)?), Some(summary(&report, "persistence", tc)?))
    } else {
        (None, None)
    };
    let point = SweepPoint {
        axis: axis.as_str().into(),
        value: p.label.clone(),
        pstmae: summary(&report, "pstmae", tc)?,
        lstm,
        persistence,
    };
    report.write_csv(&layout.reports()?.join("metrics.csv"))?;
    let text = serde_json::to_string_pretty(&point).expect("point serializes");
    std::fs::write(&marker, text + "\n").map_err(|e| CliError::io(&marker, e))?;
    Ok(point)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from(SWEEP_CSV_HEADER);
    s.push('\n');
    for p in points {
        let models = [("pstmae", Some(&p.pstmae)), ("lstm", p.lstm.as_ref()), ("persistence", p.persistence.as_ref())];
        for (name, m) in models {
            if let Some(m) = m {
                s.push_str(&format!(
                    "{},{},{name},{:e},{},{},{}\n",
                    p.axis,
                    p.value,
                    m.mse,
                    opt(m.forecast_mse),
                    m.ssim,
                    m.psnr_db
                ));
            }
        }
    }
    s
}

pub fn run(
    cfg: &ExperimentConfig,
    axis: Axis,
    out: &Path,
    data: Option<&Path>,
    cae: Option<&Path>,
    jobs: usize,
) -> Result<()> {
    let layout = Layout::new(out);
    let data_dir: PathBuf = data.map(Path::to_path_buf).unwrap_or_else(|| out.join("data"));
    let base = load_splits(&data_dir, cfg.data.dilation)?;
    let cae = match cae {
        Some(p) => load_cae(p, &base)?,
        None => {
            let own = layout.root.join("ckpt").join("cae.ckpt");
            if own.is_file() {
                load_cae(&own, &base)?
            } else {
                run_cae(cfg, &cfg.train, &base, &layout, None)?
            }
        }
    };
    let grid = points(cfg, axis);
    if grid.is_empty() {
        return Err(CliError::Config(format!("sweep.{} is empty", axis.as_str())));
    }
    let root = out.join("sweep").join(axis.as_str());
    let shared = (axis != Axis::Dilation).then_some(&base);
    let results = parallel_map(grid.len(), jobs, |i| {
        let p = &grid[i];
        run_point(axis, p, &data_dir, shared, &cae, &root.join(&p.label))
    });
    let done = results.into_iter().collect::<Result<Vec<_>>>()?;
    let path = layout.reports()?.join(format!("sweep_{}.csv", axis.as_str()));
    std::fs::write(&path, sweep_csv(&done)).map_err(|e| CliError::io(&path, e))?;
    cfg.write_resolved(&root.join("config.json"))?;
    for p in &done {
        log::info!("{} = {}: pstmae mse {:.4e}", p.axis, p.value, p.pstmae.mse);
    }
    log::info!("sweep table written to {}", path.display());
    Ok(())
}
