//! Field-quality metrics on normalized snapshots: MSE, SSIM and PSNR per
//! variable and forecast step, plus absolute-error maps.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("malformed report: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Reported PSNR when the error vanishes.
pub const PSNR_CAP_DB: f64 = 120.0;
/// MSE below which two fields count as an exact match.
pub const EXACT_MSE: f64 = 1e-12;

fn check_len(pred: &[f32], truth: &[f32]) -> Result<()> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(MetricsError::Shape(format!("{} vs {} values", pred.len(), truth.len())));
    }
    Ok(())
}

/// Mean squared difference, accumulated in `f64`.
pub fn mse_field(pred: &[f32], truth: &[f32]) -> Result<f64> {
    check_len(pred, truth)?;
    let sum: f64 = pred.iter().zip(truth).map(|(&p, &t)| (p as f64 - t as f64).powi(2)).sum();
    Ok(sum / pred.len() as f64)
}

/// PSNR in dB with an exact-match flag; capped at [`PSNR_CAP_DB`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Psnr {
    pub db: f64,
    pub exact: bool,
}

pub fn psnr_from_mse(mse: f64, max: f64) -> Psnr {
    if mse < EXACT_MSE {
        Psnr {
            db: PSNR_CAP_DB,
            exact: true,
        }
    } else {
        Psnr {
            db: (10.0 * (max * max / mse).log10()).min(PSNR_CAP_DB),
            exact: false,
        }
    }
}

pub fn psnr_field(pred: &[f32], truth: &[f32], max: f64) -> Result<Psnr> {
    Ok(psnr_from_mse(mse_field(pred, truth)?, max))
}

/// Gaussian-window SSIM settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
        }
    }
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mean local SSIM of one `h × w` plane over every window position that
/// lies fully inside the field. Windows larger than the field shrink to the
/// largest odd size that fits.
pub fn ssim_field(pred: &[f32], truth: &[f32], h: usize, w: usize, p: &SsimParams) -> Result<f64> {
    check_len(pred, truth)?;
    if pred.len() != h * w {
        return Err(MetricsError::Shape(format!("{} values for a {h}×{w} field", pred.len())));
    }
    let fit = h.min(w);
    let win = if p.window <= fit { p.window } else { fit - (1 - fit % 2) };
    let k = gaussian_kernel(win, p.sigma);
    let c1 = (p.k1 * p.range).powi(2);
    let c2 = (p.k2 * p.range).powi(2);
    let (oh, ow) = (h - win + 1, w - win + 1);
    let mut total = 0.0;
    for i in 0..oh {
        for j in 0..ow {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for a in 0..win {
                for b in 0..win {
                    let wt = k[a] * k[b];
                    let x = pred[(i + a) * w + j + b] as f64;
                    let y = truth[(i + a) * w + j + b] as f64;
                    mx += wt * x;
                    my += wt * y;
                    xx += wt * x * x;
                    yy += wt * y * y;
                    xy += wt * x * y;
                }
            }
            let (sx, sy, sxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += (2.0 * mx * my + c1) * (2.0 * sxy + c2) / ((mx * mx + my * my + c1) * (sx + sy + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// One row of a metrics table. `variable` and `step` are `"all"` on
/// aggregate rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub model: String,
    pub variable: String,
    pub step: String,
    /// Number of frames averaged.
    pub count: usize,
    pub mse: f64,
    pub ssim: f64,
    /// Mean of per-frame PSNR values.
    pub psnr_mean_db: f64,
    /// PSNR of the mean MSE.
    pub psnr_of_mean_mse: f64,
    /// Frames whose PSNR hit the cap.
    pub exact_matches: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

pub const REPORT_CSV_HEADER: &str = "dataset,model,variable,step,count,mse,ssim,psnr_mean_db,psnr_of_mean_mse,exact_matches";

impl MetricsReport {
    /// The overall aggregate row of `model`, if present.
    pub fn overall(&self, model: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.model == model && r.variable == "all" && r.step == "all")
    }

    pub fn extend(&mut self, other: MetricsReport) {
        self.rows.extend(other.rows);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{:e},{:e},{:e},{:e},{}\n",
                r.dataset, r.model, r.variable, r.step, r.count, r.mse, r.ssim, r.psnr_mean_db, r.psnr_of_mean_mse, r.exact_matches
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_CSV_HEADER) {
            return Err(MetricsError::Format("unexpected header".into()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || MetricsError::Format(format!("line {}", i + 2));
            if f.len() != 10 {
                return Err(bad());
            }
            rows.push(MetricRow {
                dataset: f[0].into(),
                model: f[1].into(),
                variable: f[2].into(),
                step: f[3].into(),
                count: f[4].parse().map_err(|_| bad())?,
                mse: f[5].parse().map_err(|_| bad())?,
                ssim: f[6].parse().map_err(|_| bad())?,
                psnr_mean_db: f[7].parse().map_err(|_| bad())?,
                psnr_of_mean_mse: f[8].parse().map_err(|_| bad())?,
                exact_matches: f[9].parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { rows })
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Sums {
    count: usize,
    mse: f64,
    ssim: f64,
    psnr: f64,
    exact: usize,
}

impl Sums {
    fn add(&mut self, o: &Sums) {
        self.count += o.count;
        self.mse += o.mse;
        self.ssim += o.ssim;
        self.psnr += o.psnr;
        self.exact += o.exact;
    }
}

/// Accumulates per-frame metrics of `[L, C, H, W]` windows by variable and
/// window step.
#[derive(Clone, Debug)]
pub struct MetricsAccumulator {
    dataset: String,
    model: String,
    variables: Vec<String>,
    steps: usize,
    frame: [usize; 2],
    ssim: SsimParams,
    sums: Vec<Sums>,
}

impl MetricsAccumulator {
    pub fn new(dataset: &str, model: &str, variables: &[&str], steps: usize, frame: [usize; 2]) -> Self {
        Self {
            dataset: dataset.into(),
            model: model.into(),
            variables: variables.iter().map(|v| v.to_string()).collect(),
            steps,
            frame,
            ssim: SsimParams::default(),
            sums: vec![Sums::default(); variables.len() * steps],
        }
    }

    /// Adds one window of `steps` frames.
    pub fn add(&mut self, pred: &[f32], truth: &[f32]) -> Result<()> {
        let [h, w] = self.frame;
        let plane = h * w;
        let c = self.variables.len();
        if pred.len() != self.steps * c * plane {
            return Err(MetricsError::Shape(format!(
                "{} values for {} steps × {c} variables × {h}×{w}",
                pred.len(),
                self.steps
            )));
        }
        check_len(pred, truth)?;
        for t in 0..self.steps {
            for v in 0..c {
                let o = (t * c + v) * plane;
                let (p, q) = (&pred[o..o + plane], &truth[o..o + plane]);
                let mse = mse_field(p, q)?;
                let psnr = psnr_from_mse(mse, 1.0);
                let s = &mut self.sums[v * self.steps + t];
                s.count += 1;
                s.mse += mse;
                s.ssim += ssim_field(p, q, h, w, &self.ssim)?;
                s.psnr += psnr.db;
                s.exact += psnr.exact as usize;
            }
        }
        Ok(())
    }

    fn row(&self, variable: &str, step: String, s: &Sums) -> MetricRow {
        let n = s.count.max(1) as f64;
        let mse = s.mse / n;
        MetricRow {
            dataset: self.dataset.clone(),
            model: self.model.clone(),
            variable: variable.into(),
            step,
            count: s.count,
            mse,
            ssim: s.ssim / n,
            psnr_mean_db: s.psnr / n,
            psnr_of_mean_mse: psnr_from_mse(mse, 1.0).db,
            exact_matches: s.exact,
        }
    }

    /// Per-(variable, step) rows, per-variable and per-step aggregates, and
    /// the overall row last. Steps are reported 1-based.
    pub fn finish(&self) -> MetricsReport {
        let mut rows = Vec::new();
        let mut overall = Sums::default();
        for (v, name) in self.variables.iter().enumerate() {
            let mut all = Sums::default();
            for t in 0..self.steps {
                let s = &self.sums[v * self.steps + t];
                rows.push(self.row(name, (t + 1).to_string(), s));
                all.add(s);
            }
            rows.push(self.row(name, "all".into(), &all));
            overall.add(&all);
        }
        for t in 0..self.steps {
            let mut s = Sums::default();
            for v in 0..self.variables.len() {
                s.add(&self.sums[v * self.steps + t]);
            }
            rows.push(self.row("all", (t + 1).to_string(), &s));
        }
        rows.push(self.row("all", "all".into(), &overall));
        MetricsReport { rows }
    }
}

/// Per-pixel absolute error quantized linearly to 8 bits; pixel 255 is
/// `max_error`.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMap {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub max_error: f64,
}

/// Sidecar describing how to turn pixel values back into errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMapScale {
    pub width: usize,
    pub height: usize,
    pub scale: String,
    pub min_error: f64,
    pub max_error: f64,
}

pub fn error_map(pred: &[f32], truth: &[f32], h: usize, w: usize) -> Result<ErrorMap> {
    check_len(pred, truth)?;
    if pred.len() != h * w {
        return Err(MetricsError::Shape(format!("{} values for a {h}×{w} map", pred.len())));
    }
    let err: Vec<f64> = pred.iter().zip(truth).map(|(&p, &t)| (p as f64 - t as f64).abs()).collect();
    let max_error = err.iter().cloned().fold(0.0, f64::max);
    let pixels = err
        .iter()
        .map(|&e| if max_error > 0.0 { (255.0 * e / max_error).round() as u8 } else { 0 })
        .collect();
    Ok(ErrorMap {
        height: h,
        width: w,
        pixels,
        max_error,
    })
}

impl ErrorMap {
    pub fn scale(&self) -> ErrorMapScale {
        ErrorMapScale {
            width: self.width,
            height: self.height,
            scale: "linear".into(),
            min_error: 0.0,
            max_error: self.max_error,
        }
    }

    /// Writes `path` as binary PGM and the scale to `path` with a `.json`
    /// extension.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P5\n{} {}\n255\n", self.width, self.height)?;
        f.write_all(&self.pixels)?;
        f.flush()?;
        std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&self.scale())?)?;
        Ok(())
    }
}

pub fn read_error_map_scale(path: &Path) -> Result<ErrorMapScale> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
