//! The nine acceptance criteria, each reported as one PASS/FAIL line.

mod common;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use common::{pstmae, pstmae_ok, tree, write_config, TINY_CONFIG};
use pstmae::cli::LAMBDA_GRID;
use pstmae::dataset::{dilation_indices, fit_channel_stats, normalize, MaskSpec};
use pstmae::metrics::{psnr_from_mse, ssim_field, MetricsAccumulator, MetricsReport, SsimParams};
use pstmae::model::{positional_embedding, AttentionBlock, Cae, CaeConfig, ParamSet, Pstmae, TransformerConfig};
use pstmae::sim::{simulate_sequence, SimParams, SweParams};
use pstmae::tensor::{Tape, Tensor};
use pstmae::train::{fit_frames, read_loss_csv, window_frames};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let report = common::primitive_gradient_report(20, 7);
    let (worst_name, worst) = report
        .iter()
        .cloned()
        .fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let token = common::mask_token_gradient_error();
    let secs = t.elapsed().as_secs_f64();
    check(
        worst < 1e-3 && token < 1e-2 && secs < 60.0,
        format!(
            "{} primitives, worst {worst_name} {worst:.2e}; mask token {token:.2e}; {secs:.1} s",
            report.len()
        ),
    )
}

fn swe_conservation() -> Outcome {
    let t = Instant::now();
    let drift = common::swe_mass_drift(64, 10_000);
    let secs = t.elapsed().as_secs_f64();
    let flat = common::swe_flat_change(64, 1_000);
    check(
        drift < 1e-6 && flat <= 1e-15 && secs < 30.0,
        format!("mass drift {drift:.2e} over 1e4 steps at N=64 in {secs:.1} s; flat state change {flat:.1e}"),
    )
}

fn dr_fixed_point() -> Outcome {
    let t = Instant::now();
    let drift = common::dr_fixed_point_drift(1_000);
    let secs = t.elapsed().as_secs_f64();
    check(drift < 1e-6 && secs < 10.0, format!("max deviation {drift:.2e} after 1e3 steps in {secs:.2} s"))
}

fn model_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Attention rows.
    let cfg = TransformerConfig::new(16);
    let mut ps = ParamSet::new();
    let block = AttentionBlock::new(&mut ps, "b", &cfg, &mut rng);
    let mut tape: Tape<f32> = Tape::new();
    let p = ps.bind(&mut tape, false);
    let x = tape.constant(Tensor::uniform([9, 16], -2.0, 2.0, &mut rng).unwrap());
    let mut attn = Vec::new();
    block.forward(&mut tape, &p, x, Some(&mut attn)).unwrap();
    let row_err = attn
        .iter()
        .flat_map(|&a| tape.value(a).data().chunks(9).map(|r| (r.iter().sum::<f32>() - 1.0).abs() as f64).collect::<Vec<_>>())
        .fold(0.0, f64::max);

    // Positional embedding against the sine-cosine formula.
    let d = 128;
    let mut pe_err: f64 = 0.0;
    for t in 1..=15usize {
        let e = positional_embedding(t, d);
        for i in 0..d / 2 {
            let w = (t as f64) * (-(2.0 * i as f64 / d as f64) * 10000f64.ln()).exp();
            pe_err = pe_err.max((e[2 * i] - w.sin()).abs()).max((e[2 * i + 1] - w.cos()).abs());
        }
    }

    // Default-size forward pass and placeholder invariance.
    let cae = Cae::new(CaeConfig::new(3, 32, 32), &mut rng).unwrap();
    let model = Pstmae::new(TransformerConfig::new(128), &mut rng).unwrap();
    let mask = MaskSpec::from_missing(10, 5, &[0, 2, 5, 6, 9]).unwrap();
    let window = Tensor::<f32>::uniform([15, 3, 32, 32], 0.0, 1.0, &mut rng).unwrap();
    let mut junk = window.clone();
    let n = 3 * 32 * 32;
    for t in mask.hidden() {
        for v in &mut junk.data_mut()[t * n..(t + 1) * n] {
            *v = rng.random_range(-100.0..100.0);
        }
    }
    let run = |w: &Tensor<f32>| {
        let mut tape: Tape<f32> = Tape::new();
        let p = model.params().bind(&mut tape, false);
        let cp = cae.params().bind(&mut tape, false);
        let w = tape.constant(w.clone());
        let pred = model.forward(&mut tape, &p, &cae, &cp, w, &mask).unwrap();
        (tape.value(pred.latents).clone(), tape.value(pred.frames.unwrap()).clone())
    };
    let (za, xa) = run(&window);
    let (zb, xb) = run(&junk);
    let invariant = za.data() == zb.data() && xa.data() == xb.data();
    let shapes = za.shape() == [15, 128] && xa.shape() == [15, 3, 32, 32];
    check(
        row_err < 1e-6 && pe_err < 1e-7 && invariant && shapes,
        format!(
            "softmax row error {row_err:.1e}; embedding error {pe_err:.1e}; placeholder invariant {invariant}; shapes {:?} {:?}",
            za.shape(),
            xa.shape()
        ),
    )
}

fn cae_capacity() -> Outcome {
    let seq = simulate_sequence(&SimParams::Swe(SweParams::sample(32, 8, 21))).unwrap();
    let stats = fit_channel_stats(std::slice::from_ref(&seq)).unwrap();
    let seq = normalize(&seq, &stats).unwrap();
    let frames = window_frames(&seq, 0, 8);
    let mut cae = Cae::new(CaeConfig::new(3, 32, 32), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let t = Instant::now();
    let (steps, mse) = fit_frames(&mut cae, &frames, 1e-3, 2000, 1e-3).unwrap();
    let secs = t.elapsed().as_secs_f64();
    check(
        mse < 1e-3 && steps <= 2000 && secs < 300.0,
        format!("reconstruction MSE {mse:.2e} after {steps} steps in {secs:.1} s"),
    )
}

/// Desk-scale SWE run under the dilation-3 protocol. Forty frames leave
/// only fourteen after dilation, shorter than one window, so sequences are
/// simulated with 64 frames.
const DESK_RUN: &str = r#"{
  "data": {"sequences": 40, "grid": 32, "frames": 64, "dilation": 3},
  "train": {
    "missing_ratio": 0.5,
    "cae_epochs": 20,
    "epochs": 50,
    "baseline_epochs": 50,
    "lr_pstmae": 5e-4,
    "lr_decay": "cosine"
  }
}"#;

fn overall_mse(path: &Path, model: &str) -> f64 {
    let report = MetricsReport::from_csv(&std::fs::read_to_string(path).unwrap()).unwrap();
    report.overall(model).unwrap().mse
}

fn desk_training() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), DESK_RUN);
    let out = dir.path().join("desk");
    let o = s(&out);
    let t = Instant::now();
    pstmae_ok(&["--config", &cfg, "generate", "--out", o]);
    pstmae_ok(&["--config", &cfg, "train-cae", "--out", o]);
    pstmae_ok(&["--config", &cfg, "train-pstmae", "--out", o]);
    pstmae_ok(&["--config", &cfg, "train-baseline", "--out", o]);
    for m in ["pstmae", "lstm"] {
        let ckpt = out.join(format!("ckpt/{m}.ckpt"));
        pstmae_ok(&["--config", &cfg, "evaluate", "--checkpoint", s(&ckpt), "--split", "test"]);
    }
    let mins = t.elapsed().as_secs_f64() / 60.0;

    let history = read_loss_csv(&out.join("reports/pstmae_loss.csv")).unwrap();
    let lambda = 0.5;
    let val: Vec<f64> = history
        .iter()
        .filter(|r| r.split == "val")
        .map(|r| r.full_mse + lambda * r.latent_mse.unwrap_or(0.0))
        .collect();
    let smooth: Vec<f64> = val.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    let rises: Vec<usize> = (1..smooth.len()).filter(|&i| smooth[i] > smooth[i - 1]).map(|i| i + 5).collect();
    let reports = out.join("reports");
    let p = overall_mse(&reports.join("metrics_pstmae_test.csv"), "pstmae");
    let persist = overall_mse(&reports.join("metrics_pstmae_test.csv"), "persistence");
    let lstm = overall_mse(&reports.join("metrics_lstm_test.csv"), "lstm");
    let (a, b, c) = (rises.is_empty(), p < persist, p <= lstm);
    check(
        a && b && c && mins < 30.0,
        format!(
            "(a) smoothed val loss non-increasing: {a} (rises ending at epochs {rises:?}); \
             (b) test MSE {p:.3e} < persistence {persist:.3e}: {b}; \
             (c) ≤ LSTM {lstm:.3e}: {c}; {} epochs in {mins:.1} min",
            val.len()
        ),
    )
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = SsimParams::default();
    let x: Vec<f32> = (0..32 * 32).map(|_| rng.random_range(0.0..1.0)).collect();
    let self_ssim = ssim_field(&x, &x, 32, 32, &p).unwrap();
    let (a, b) = (0.3f64, 0.7f64);
    let c1 = (p.k1 * p.range).powi(2);
    let closed = (2.0 * a * b + c1) / (a * a + b * b + c1);
    let fa = vec![a as f32; 16 * 16];
    let fb = vec![b as f32; 16 * 16];
    let constant = ssim_field(&fa, &fb, 16, 16, &p).unwrap();
    // The f32 fields carry a tiny representation error of 0.3 and 0.7.
    let closed_f32 = {
        let (a, b) = (a as f32 as f64, b as f32 as f64);
        (2.0 * a * b + c1) / (a * a + b * b + c1)
    };
    let psnr = psnr_from_mse(1e-4, 1.0).db;

    let mut acc = MetricsAccumulator::new("toy", "m", &["u", "v"], 3, [8, 8]);
    for _ in 0..4 {
        let t: Vec<f32> = (0..3 * 2 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
        let q: Vec<f32> = t.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
        acc.add(&q, &t).unwrap();
    }
    let report = acc.finish();
    let overall = report.overall("m").unwrap();
    let cells: Vec<_> = report.rows.iter().filter(|r| r.variable != "all" && r.step != "all").collect();
    let mean = cells.iter().map(|r| r.mse * r.count as f64).sum::<f64>() / overall.count as f64;
    let identity = (mean - overall.mse).abs() <= 1e-15 && cells.iter().map(|r| r.count).sum::<usize>() == overall.count;
    check(
        (self_ssim - 1.0).abs() <= 1e-9 && (constant - closed_f32).abs() <= 1e-9 && psnr == 40.0 && identity,
        format!(
            "SSIM(x,x) = {self_ssim}; constant SSIM {constant:.12} vs closed form {closed:.12}; PSNR(1e-4) = {psnr} dB; aggregation identity {identity}"
        ),
    )
}

fn sweep_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .filter(|l| l.split(',').nth(2) == Some("pstmae"))
        .map(|l| l.split(',').nth(1).unwrap().to_string())
        .collect()
}

fn protocol() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY_CONFIG);
    let out = dir.path().join("o");
    let o = s(&out);
    pstmae_ok(&["--config", &cfg, "generate", "--out", o]);
    pstmae_ok(&["--config", &cfg, "train-cae", "--out", o]);
    pstmae_ok(&["--config", &cfg, "sweep", "--axis", "lambda", "--out", o]);
    pstmae_ok(&["--config", &cfg, "sweep", "--axis", "missing", "--out", o]);
    let lambdas: Vec<f64> = sweep_rows(&out.join("reports/sweep_lambda.csv"))
        .iter()
        .map(|v| v.parse().unwrap())
        .collect();
    let missing = sweep_rows(&out.join("reports/sweep_missing.csv"));
    let lambda_ok = lambdas == LAMBDA_GRID;
    let missing_ok = missing == ["1", "2", "3", "4", "5", "6"];

    let mut cases = 0;
    let mut dil_ok = true;
    for len in 1..=20usize {
        for d in 1..=6usize {
            // One-based frame k is kept when k = 1 + j·d for some j ≥ 0.
            let brute: Vec<usize> = (1..=len).filter(|k| (k - 1) % d == 0).map(|k| k - 1).collect();
            dil_ok &= dilation_indices(len, d).unwrap() == brute;
            cases += 1;
        }
    }
    check(
        lambda_ok && missing_ok && dil_ok,
        format!(
            "λ rows {} {lambdas:?}; missing rows {} {missing:?}; dilation sets match on {cases} cases: {dil_ok}",
            lambdas.len(),
            missing.len()
        ),
    )
}

fn full_run(root: &Path, cfg: &str) {
    let o = s(root);
    pstmae_ok(&["--config", cfg, "generate", "--out", o, "--jobs", "2"]);
    pstmae_ok(&["--config", cfg, "train-cae", "--out", o]);
    pstmae_ok(&["--config", cfg, "train-pstmae", "--out", o]);
    pstmae_ok(&["--config", cfg, "train-baseline", "--out", o]);
    for m in ["cae", "pstmae", "lstm"] {
        let ckpt = root.join(format!("ckpt/{m}.ckpt"));
        let maps = root.join("maps");
        pstmae_ok(&["--config", cfg, "evaluate", "--checkpoint", s(&ckpt), "--error-maps", s(&maps)]);
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY_CONFIG);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    full_run(&a, &cfg);
    full_run(&b, &cfg);
    let (ta, tb) = (tree(&a), tree(&b));
    let differing: Vec<&str> = ta
        .iter()
        .zip(&tb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let same = ta.len() == tb.len() && differing.is_empty();
    let (code, _) = pstmae(&["--config", &cfg, "generate", "--out", s(&dir.path().join("c"))], &[("PSTMAE_SEED", "1")]);
    let reseeded = code == 0
        && std::fs::read(a.join("data/manifest.json")).unwrap() != std::fs::read(dir.path().join("c/data/manifest.json")).unwrap();
    check(
        same && reseeded,
        format!("{} files compared, differing {differing:?}; another seed changes the data: {reseeded}", ta.len()),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", gradients),
        ("shallow-water conservation", swe_conservation),
        ("diffusion-reaction fixed point", dr_fixed_point),
        ("attention and model invariants", model_invariants),
        ("autoencoder capacity", cae_capacity),
        ("end-to-end desk training", desk_training),
        ("metrics oracle", metrics_oracle),
        ("protocol fidelity", protocol),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    writeln!(std::io::stdout().lock()).unwrap();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let line = match &outcome {
            Ok(d) => format!("PASS {} {name}: {d}", i + 1),
            Err(d) => format!("FAIL {} {name}: {d}", i + 1),
        };
        // Written past the test harness capture so the lines always show.
        let mut out = std::io::stdout().lock();
        writeln!(out, "{line}").unwrap();
        out.flush().unwrap();
        if outcome.is_err() {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
