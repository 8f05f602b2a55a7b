//! Finite-difference solvers for the shallow-water and FitzHugh–Nagumo
//! diffusion–reaction systems.
//!
//! Both use explicit forward Euler. Shallow water uses the conservative flux
//! form with centered differences on a periodic grid; diffusion–reaction uses
//! a 5-point Laplacian with zero-flux (edge-replicated) boundaries. State is
//! kept in `f64` and snapshots are stored as `f32`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, FieldSequence};

/// Any state magnitude above this is treated as a blow-up.
pub const BLOWUP_LIMIT: f64 = 1e3;

/// Grid size the published parameter ranges refer to.
pub const REFERENCE_GRID: usize = 128;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("solver became unstable at step {step}")]
    Unstable { step: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Uniform sampling ranges for shallow-water runs on the 128×128 grid.
pub mod swe_ranges {
    pub const CENTER: (f64, f64) = (54.0, 74.0);
    pub const HEIGHT: (f64, f64) = (0.05, 0.20);
    pub const RADIUS: (f64, f64) = (8.94, 12.65);
    pub const FRICTION: (f64, f64) = (0.02, 2.00);
    pub const INTERVAL: (usize, usize) = (60, 100);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweParams {
    pub grid: usize,
    pub dt: f64,
    pub dx: f64,
    pub g: f64,
    pub friction: f64,
    /// Bump centre in grid units (column, row).
    pub center_x: f64,
    pub center_y: f64,
    pub bump_height: f64,
    /// Bump radius in grid units.
    pub radius: f64,
    pub base_height: f64,
    pub snapshot_interval: usize,
    pub frames: usize,
    pub seed: u64,
}

impl Default for SweParams {
    fn default() -> Self {
        Self {
            grid: REFERENCE_GRID,
            dt: 1e-4,
            dx: 1e-2,
            g: 1.0,
            friction: 0.5,
            center_x: 64.0,
            center_y: 64.0,
            bump_height: 0.1,
            radius: 10.0,
            base_height: 1.0,
            snapshot_interval: 80,
            frames: 200,
            seed: 0,
        }
    }
}

fn within(v: f64, (lo, hi): (f64, f64)) -> bool {
    v >= lo - 1e-9 && v <= hi + 1e-9
}

impl SweParams {
    /// Draws friction, bump geometry and snapshot gap uniformly from the
    /// reference ranges. Bump centre and radius scale with `grid / 128` so a
    /// coarser grid sees the same physical layout.
    pub fn sample(grid: usize, frames: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = grid as f64 / REFERENCE_GRID as f64;
        let mut draw = |(lo, hi): (f64, f64)| rng.random_range(lo..=hi);
        let center_x = draw(swe_ranges::CENTER) * s;
        let center_y = draw(swe_ranges::CENTER) * s;
        let bump_height = draw(swe_ranges::HEIGHT);
        let radius = draw(swe_ranges::RADIUS) * s;
        let friction = draw(swe_ranges::FRICTION);
        let (lo, hi) = swe_ranges::INTERVAL;
        let snapshot_interval = rng.random_range(lo..=hi);
        Self {
            grid,
            friction,
            center_x,
            center_y,
            bump_height,
            radius,
            snapshot_interval,
            frames,
            seed,
            ..Self::default()
        }
    }

    /// Checks physical sanity; with `strict`, also that every sampled
    /// quantity lies inside the reference ranges (scaled to this grid).
    pub fn validate(&self, strict: bool) -> Result<()> {
        if self.grid < 3 {
            return Err(SimError::Param(format!("grid {} too small", self.grid)));
        }
        for (name, v) in [("dt", self.dt), ("dx", self.dx), ("g", self.g)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::Param(format!("{name} must be positive, got {v}")));
            }
        }
        if self.frames == 0 || self.snapshot_interval == 0 {
            return Err(SimError::Param("frames and snapshot_interval must be ≥ 1".into()));
        }
        if self.friction < 0.0 || self.radius < 0.0 || self.base_height <= 0.0 {
            return Err(SimError::Param(
                "friction and radius must be non-negative, base height positive".into(),
            ));
        }
        // The disk must overlap the grid square.
        let edge = (self.grid - 1) as f64;
        let nx = self.center_x.clamp(0.0, edge);
        let ny = self.center_y.clamp(0.0, edge);
        if ((nx - self.center_x).powi(2) + (ny - self.center_y).powi(2)).sqrt() > self.radius {
            return Err(SimError::Param(format!(
                "bump at ({}, {}) with radius {} misses the {}×{} grid",
                self.center_x, self.center_y, self.radius, self.grid, self.grid
            )));
        }
        if strict {
            let s = self.grid as f64 / REFERENCE_GRID as f64;
            let scaled = |(lo, hi): (f64, f64)| (lo * s, hi * s);
            let checks = [
                ("friction", self.friction, swe_ranges::FRICTION),
                ("bump_height", self.bump_height, swe_ranges::HEIGHT),
                ("center_x", self.center_x, scaled(swe_ranges::CENTER)),
                ("center_y", self.center_y, scaled(swe_ranges::CENTER)),
                ("radius", self.radius, scaled(swe_ranges::RADIUS)),
                (
                    "snapshot_interval",
                    self.snapshot_interval as f64,
                    (swe_ranges::INTERVAL.0 as f64, swe_ranges::INTERVAL.1 as f64),
                ),
            ];
            for (name, v, range) in checks {
                if !within(v, range) {
                    return Err(SimError::Param(format!(
                        "{name} = {v} outside [{}, {}]",
                        range.0, range.1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Shallow-water state: surface height and depth-averaged velocities.
#[derive(Clone, Debug, PartialEq)]
pub struct SweState {
    pub n: usize,
    pub h: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Flat water at `base_height` plus a cylindrical bump; zero velocity.
pub fn swe_init(p: &SweParams) -> Result<SweState> {
    p.validate(false)?;
    let n = p.grid;
    let mut h = vec![p.base_height; n * n];
    for row in 0..n {
        for col in 0..n {
            let d2 = (col as f64 - p.center_x).powi(2) + (row as f64 - p.center_y).powi(2);
            if d2 <= p.radius * p.radius {
                h[row * n + col] += p.bump_height;
            }
        }
    }
    Ok(SweState {
        n,
        h,
        u: vec![0.0; n * n],
        v: vec![0.0; n * n],
    })
}

fn check_state(step: usize, fields: &[&[f64]]) -> Result<()> {
    if fields
        .iter()
        .any(|f| f.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP_LIMIT))
    {
        return Err(SimError::Unstable { step });
    }
    Ok(())
}

/// One forward-Euler step; `step` only labels instability errors.
pub fn swe_step(s: &SweState, p: &SweParams, step: usize) -> Result<SweState> {
    let n = s.n;
    let k = p.dt / (2.0 * p.dx);
    let damp = 1.0 - p.friction * p.dt;
    let mut out = SweState {
        n,
        h: vec![0.0; n * n],
        u: vec![0.0; n * n],
        v: vec![0.0; n * n],
    };
    for row in 0..n {
        let up = (row + n - 1) % n;
        let down = (row + 1) % n;
        for col in 0..n {
            let left = (col + n - 1) % n;
            let right = (col + 1) % n;
            let i = row * n + col;
            let (ir, il, id, iu) = (row * n + right, row * n + left, down * n + col, up * n + col);
            let flux_x = s.h[ir] * s.u[ir] - s.h[il] * s.u[il];
            let flux_y = s.h[id] * s.v[id] - s.h[iu] * s.v[iu];
            out.h[i] = s.h[i] - k * (flux_x + flux_y);
            out.u[i] = damp * s.u[i] - k * p.g * (s.h[ir] - s.h[il]);
            out.v[i] = damp * s.v[i] - k * p.g * (s.h[id] - s.h[iu]);
        }
    }
    check_state(step, &[&out.h, &out.u, &out.v])?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrParams {
    pub grid: usize,
    pub t_end: f64,
    pub frames: usize,
    pub alpha_u: f64,
    pub alpha_v: f64,
    pub c: f64,
    pub seed: u64,
}

impl Default for DrParams {
    fn default() -> Self {
        Self {
            grid: REFERENCE_GRID,
            t_end: 5.0,
            frames: 100,
            alpha_u: 1e-3,
            alpha_v: 5e-3,
            c: 5e-3,
            seed: 0,
        }
    }
}

impl DrParams {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 {
            return Err(SimError::Param(format!("grid {} too small", self.grid)));
        }
        if !(self.alpha_u > 0.0 && self.alpha_v > 0.0) {
            return Err(SimError::Param("diffusion coefficients must be positive".into()));
        }
        if !(self.t_end > 0.0) || self.frames == 0 {
            return Err(SimError::Param("t_end and frames must be positive".into()));
        }
        Ok(())
    }

    /// Grid spacing on `[-1, 1]`.
    pub fn dx(&self) -> f64 {
        2.0 / self.grid as f64
    }

    /// Euler substeps between stored frames, chosen so the explicit
    /// diffusion limit holds with a factor-of-four margin and `dt ≤ 0.01`.
    pub fn steps_per_frame(&self) -> usize {
        let frame_dt = self.t_end / self.frames as f64;
        let alpha = self.alpha_u.max(self.alpha_v);
        let dt_max = (0.25 * self.dx().powi(2) / (4.0 * alpha)).min(0.01);
        (frame_dt / dt_max).ceil().max(1.0) as usize
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.frames as f64 / self.steps_per_frame() as f64
    }

    /// Homogeneous equilibrium `u = v = -c^(1/3)`.
    pub fn fixed_point(&self) -> f64 {
        -self.c.cbrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DrState {
    pub n: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Smooth random field in `[-1, 1]`: uniform noise on an 8×8 lattice,
/// bilinearly interpolated onto the grid.
pub fn dr_init(p: &DrParams) -> Result<DrState> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let n = p.grid;
    let coarse = 8usize;
    let field = |rng: &mut ChaCha8Rng| {
        let lattice: Vec<f64> = (0..coarse * coarse).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let mut out = vec![0.0; n * n];
        for row in 0..n {
            let fy = row as f64 / (n.max(2) - 1) as f64 * (coarse - 1) as f64;
            let (y0, ty) = ((fy.floor() as usize).min(coarse - 2), fy - (fy.floor()).min((coarse - 2) as f64));
            for col in 0..n {
                let fx = col as f64 / (n.max(2) - 1) as f64 * (coarse - 1) as f64;
                let (x0, tx) = ((fx.floor() as usize).min(coarse - 2), fx - (fx.floor()).min((coarse - 2) as f64));
                let at = |y: usize, x: usize| lattice[y * coarse + x];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                out[row * n + col] = top * (1.0 - ty) + bottom * ty;
            }
        }
        out
    };
    let u = field(&mut rng);
    let v = field(&mut rng);
    Ok(DrState { n, u, v })
}

fn laplacian_neumann(f: &[f64], n: usize, inv_dx2: f64, out: &mut [f64]) {
    for row in 0..n {
        let up = row.saturating_sub(1);
        let down = (row + 1).min(n - 1);
        for col in 0..n {
            let left = col.saturating_sub(1);
            let right = (col + 1).min(n - 1);
            let c = f[row * n + col];
            out[row * n + col] = (f[row * n + left] + f[row * n + right] + f[up * n + col]
                + f[down * n + col]
                - 4.0 * c)
                * inv_dx2;
        }
    }
}

/// One forward-Euler step of size `dt`. `reaction = false` leaves pure
/// diffusion, which conserves the field sums.
pub fn dr_step_with(s: &DrState, p: &DrParams, dt: f64, reaction: bool, step: usize) -> Result<DrState> {
    let n = s.n;
    let inv_dx2 = 1.0 / p.dx().powi(2);
    let mut lu = vec![0.0; n * n];
    let mut lv = vec![0.0; n * n];
    laplacian_neumann(&s.u, n, inv_dx2, &mut lu);
    laplacian_neumann(&s.v, n, inv_dx2, &mut lv);
    let mut u = Vec::with_capacity(n * n);
    let mut v = Vec::with_capacity(n * n);
    for i in 0..n * n {
        let (a, b) = (s.u[i], s.v[i]);
        let (fu, fv) = if reaction {
            (a - a * a * a - p.c - b, a - b)
        } else {
            (0.0, 0.0)
        };
        u.push(a + dt * (p.alpha_u * lu[i] + fu));
        v.push(b + dt * (p.alpha_v * lv[i] + fv));
    }
    check_state(step, &[&u, &v])?;
    Ok(DrState { n, u, v })
}

pub fn dr_step(s: &DrState, p: &DrParams, step: usize) -> Result<DrState> {
    dr_step_with(s, p, p.dt(), true, step)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SimParams {
    Swe(SweParams),
    Dr(DrParams),
}

impl SimParams {
    pub fn kind(&self) -> &'static str {
        match self {
            SimParams::Swe(_) => "swe",
            SimParams::Dr(_) => "dr",
        }
    }
}

fn to_f32(fields: &[&[f64]]) -> Vec<f32> {
    fields.iter().flat_map(|f| f.iter().map(|&v| v as f32)).collect()
}

/// Runs the solver and records `frames` snapshots, one after every
/// snapshot interval. Shallow water yields channels `[h, u, v]`,
/// diffusion–reaction `[u, v]`.
pub fn simulate_sequence(params: &SimParams) -> Result<FieldSequence> {
    match params {
        SimParams::Swe(p) => {
            let mut state = swe_init(p)?;
            let mut frames = Vec::with_capacity(p.frames);
            let mut step = 0;
            for _ in 0..p.frames {
                for _ in 0..p.snapshot_interval {
                    step += 1;
                    state = swe_step(&state, p, step)?;
                }
                frames.push(to_f32(&[&state.h, &state.u, &state.v]));
            }
            let mut seq = FieldSequence::from_frames(&frames, [3, p.grid, p.grid])?;
            seq.source = Some(format!("swe seed {}", p.seed));
            Ok(seq)
        }
        SimParams::Dr(p) => {
            let mut state = dr_init(p)?;
            let (dt, per_frame) = (p.dt(), p.steps_per_frame());
            let mut frames = Vec::with_capacity(p.frames);
            let mut step = 0;
            for _ in 0..p.frames {
                for _ in 0..per_frame {
                    step += 1;
                    state = dr_step_with(&state, p, dt, true, step)?;
                }
                frames.push(to_f32(&[&state.u, &state.v]));
            }
            let mut seq = FieldSequence::from_frames(&frames, [2, p.grid, p.grid])?;
            seq.source = Some(format!("dr seed {}", p.seed));
            Ok(seq)
        }
    }
}
