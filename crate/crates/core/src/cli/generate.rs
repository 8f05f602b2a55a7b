//! `generate`: simulate the dataset and write it with its manifest.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::dataset::{split_indices, write_manifest, write_sequence, FieldSequence, ManifestEntry};
use crate::sim::{simulate_sequence, SimParams};

use super::config::ExperimentConfig;
use super::pipeline::{Layout, MANIFEST};
use super::{CliError, Result};

pub fn sequence_file(index: usize) -> String {
    format!("seq_{index:04}.pstm")
}

/// Runs `f(i)` for `i in 0..n` on `jobs` threads; results keep index order.
pub(super) fn parallel_map<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut out: Vec<(usize, T)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|_| {
                s.spawn(|| {
                    let mut mine = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= n {
                            break mine;
                        }
                        mine.push((i, f(i)));
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, v)| v).collect()
}

fn check(params: &SimParams, strict: bool) -> Result<()> {
    match params {
        SimParams::Swe(p) => p.validate(strict)?,
        SimParams::Dr(p) => p.validate()?,
    }
    Ok(())
}

pub fn run(cfg: &ExperimentConfig, out: &Path, strict: bool, jobs: usize) -> Result<()> {
    let n = cfg.data.sequences;
    let [a, b, c] = cfg.data.splits;
    let splits = split_indices(n, (a, b, c), cfg.seed)?;
    let params: Vec<SimParams> = (0..n).map(|i| cfg.sim_params(i)).collect();
    for p in &params {
        check(p, strict)?;
    }
    let dir = Layout::new(out).data()?;
    cfg.write_resolved(&dir.join("config.json"))?;
    log::info!("simulating {n} {} sequences on {jobs} thread(s)", cfg.data.kind.as_str());
    let results: Vec<Result<()>> = parallel_map(n, jobs, |i| {
        let seq: FieldSequence = simulate_sequence(&params[i])?;
        let path = dir.join(sequence_file(i));
        write_sequence(&path, &seq).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        log::debug!("wrote {}", path.display());
        Ok(())
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;
    let split_of = |i: usize| {
        if splits.train.contains(&i) {
            "train"
        } else if splits.val.contains(&i) {
            "val"
        } else {
            "test"
        }
    };
    let entries: Vec<ManifestEntry> = params
        .iter()
        .enumerate()
        .map(|(i, p)| ManifestEntry {
            file: sequence_file(i),
            kind: p.kind().into(),
            params: serde_json::to_value(p).expect("params serialize"),
            split: split_of(i).into(),
        })
        .collect();
    let manifest = dir.join(MANIFEST);
    write_manifest(&manifest, &entries).map_err(|e| CliError::Config(format!("{}: {e}", manifest.display())))?;
    log::info!("dataset written to {}", dir.display());
    Ok(())
}
