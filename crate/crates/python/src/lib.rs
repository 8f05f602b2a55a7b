//! Python bindings: the PDE solvers, dilation, metrics and the full
//! command-line pipeline.
//!
//! Fields cross the boundary as `(shape, flat values)` so the module needs
//! nothing beyond the interpreter; `numpy.asarray(values).reshape(shape)`
//! recovers an array.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use pstmae::dataset::dilation_indices;
use pstmae::metrics::{psnr_from_mse, ssim_field, SsimParams};
use pstmae::sim::{simulate_sequence, DrParams, SimParams, SweParams};

type Field = (Vec<usize>, Vec<f32>);

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn run(params: SimParams) -> PyResult<Field> {
    let seq = simulate_sequence(&params).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((seq.dims().to_vec(), seq.data().to_vec()))
}

/// Shallow-water sequence `[frames, 3, grid, grid]` (h, u, v) with
/// parameters drawn from `seed`.
#[pyfunction]
#[pyo3(signature = (grid, frames, seed = 0))]
fn simulate_swe(grid: usize, frames: usize, seed: u64) -> PyResult<Field> {
    let p = SweParams::sample(grid, frames, seed);
    p.validate(false).map_err(value_err)?;
    run(SimParams::Swe(p))
}

/// Diffusion–reaction sequence `[frames, 2, grid, grid]` (u, v).
#[pyfunction]
#[pyo3(signature = (grid, frames, seed = 0))]
fn simulate_dr(grid: usize, frames: usize, seed: u64) -> PyResult<Field> {
    run(SimParams::Dr(DrParams {
        grid,
        frames,
        seed,
        ..DrParams::default()
    }))
}

/// Frame indices kept when every `d`-th frame of `length` is used.
#[pyfunction]
fn dilation(length: usize, d: usize) -> PyResult<Vec<usize>> {
    dilation_indices(length, d).map_err(value_err)
}

/// PSNR in dB for a given MSE and dynamic range (capped for exact matches).
#[pyfunction]
#[pyo3(signature = (mse, max_value = 1.0))]
fn psnr(mse: f64, max_value: f64) -> f64 {
    psnr_from_mse(mse, max_value).db
}

/// Gaussian-window SSIM of two `height × width` planes.
#[pyfunction]
fn ssim(pred: Vec<f32>, truth: Vec<f32>, height: usize, width: usize) -> PyResult<f64> {
    ssim_field(&pred, &truth, height, width, &SsimParams::default()).map_err(value_err)
}

/// Runs the `pstmae` command line with `args` (without the program name)
/// and returns its exit status.
#[pyfunction]
fn cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv = std::iter::once("pstmae".to_string()).chain(args);
    py.allow_threads(|| pstmae::cli::main_with_args(argv))
}

#[pymodule]
fn pstmae_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(simulate_swe, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_dr, m)?)?;
    m.add_function(wrap_pyfunction!(dilation, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    m.add("EXIT_CONFIG", pstmae::cli::EXIT_CONFIG)?;
    m.add("EXIT_NUMERIC", pstmae::cli::EXIT_NUMERIC)?;
    Ok(())
}
