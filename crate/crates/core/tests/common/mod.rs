#![allow(dead_code)]

use pstmae::tensor::{Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>;

/// Scalar objective `Σ w ⊙ f(x)` with fixed random weights, so every output
/// element contributes.
fn objective(
    inputs: &[Tensor<f64>],
    weights_seed: u64,
    f: &Build,
) -> Result<(Tape<f64>, Vec<Var>, Var), TensorError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let shape = tape.shape(out).to_vec();
    let mut wr = ChaCha8Rng::seed_from_u64(weights_seed);
    let w = Tensor::from_fn(shape, |_| wr.random_range(0.5..1.5))?;
    let w = tape.constant(w);
    let weighted = tape.mul(out, w)?;
    let loss = tape.sum(weighted)?;
    Ok((tape, vars, loss))
}

/// Largest normwise relative error between the tape gradient and central
/// finite differences with step `h`, over all inputs.
pub fn gradient_error(inputs: &[Tensor<f64>], f: &Build, h: f64) -> f64 {
    let (mut tape, vars, loss) = objective(inputs, 99, f).expect("forward");
    tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad(v).expect("grad").clone()).collect();

    let eval = |xs: &[Tensor<f64>]| {
        let (tape, _, loss) = objective(xs, 99, f).expect("forward");
        tape.value(loss).item().unwrap()
    };
    let mut worst: f64 = 0.0;
    for (k, a) in analytic.iter().enumerate() {
        let mut xs = inputs.to_vec();
        let mut numeric = Vec::with_capacity(a.len());
        for i in 0..a.len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + h;
            let up = eval(&xs);
            xs[k].data_mut()[i] = orig - h;
            let down = eval(&xs);
            xs[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        let diff: f64 = a.data().iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    worst
}

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng).unwrap()
}

pub struct Primitive {
    pub name: &'static str,
    /// Random input tensors for one trial.
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    pub build: Box<Build>,
}

fn dim(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

/// Every differentiable tape primitive, each with a random-shape generator.
pub fn primitives() -> Vec<Primitive> {
    vec![
        Primitive {
            name: "matmul",
            inputs: |r| {
                let (m, k, n) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
                vec![rand_tensor(&[m, k], r), rand_tensor(&[k, n], r)]
            },
            build: Box::new(|t, v| t.matmul(v[0], v[1])),
        },
        Primitive {
            name: "conv2d_stride1",
            inputs: |r| {
                let (ci, co, h, w) = (dim(r, 1, 2), dim(r, 1, 2), dim(r, 2, 4), dim(r, 2, 4));
                vec![rand_tensor(&[ci, h, w], r), rand_tensor(&[co, ci, 3, 3], r), rand_tensor(&[co], r)]
            },
            build: Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 1)),
        },
        Primitive {
            name: "conv2d_stride2",
            inputs: |r| {
                let (ci, co, h, w) = (dim(r, 1, 2), dim(r, 1, 2), 2 * dim(r, 1, 2), 2 * dim(r, 1, 2));
                vec![rand_tensor(&[ci, h, w], r), rand_tensor(&[co, ci, 3, 3], r), rand_tensor(&[co], r)]
            },
            build: Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 2)),
        },
        Primitive {
            name: "conv2d_transpose",
            inputs: |r| {
                let (ci, co, h, w) = (dim(r, 1, 2), dim(r, 1, 2), dim(r, 1, 2), dim(r, 1, 2));
                vec![rand_tensor(&[ci, h, w], r), rand_tensor(&[ci, co, 3, 3], r), rand_tensor(&[co], r)]
            },
            build: Box::new(|t, v| t.conv2d_transpose(v[0], v[1], v[2])),
        },
        Primitive {
            name: "conv2d_batched",
            inputs: |r| {
                let (n, ci, co, h, w) = (dim(r, 2, 3), dim(r, 1, 2), dim(r, 1, 2), 2 * dim(r, 1, 2), 2 * dim(r, 1, 2));
                vec![rand_tensor(&[n, ci, h, w], r), rand_tensor(&[co, ci, 3, 3], r), rand_tensor(&[co], r)]
            },
            build: Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 2)),
        },
        Primitive {
            name: "conv2d_transpose_batched",
            inputs: |r| {
                let (n, ci, co, h, w) = (dim(r, 2, 3), dim(r, 1, 2), dim(r, 1, 2), dim(r, 1, 2), dim(r, 1, 2));
                vec![rand_tensor(&[n, ci, h, w], r), rand_tensor(&[ci, co, 3, 3], r), rand_tensor(&[co], r)]
            },
            build: Box::new(|t, v| t.conv2d_transpose(v[0], v[1], v[2])),
        },
        Primitive {
            name: "linear",
            inputs: |r| {
                let (n, i, o) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
                vec![rand_tensor(&[n, i], r), rand_tensor(&[i, o], r), rand_tensor(&[o], r)]
            },
            build: Box::new(|t, v| t.linear(v[0], v[1], v[2])),
        },
        Primitive {
            name: "add",
            inputs: |r| {
                let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
                vec![rand_tensor(&[a, b], r), rand_tensor(&[a, b], r)]
            },
            build: Box::new(|t, v| t.add(v[0], v[1])),
        },
        Primitive {
            name: "sub",
            inputs: |r| {
                let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
                vec![rand_tensor(&[a, b], r), rand_tensor(&[a, b], r)]
            },
            build: Box::new(|t, v| t.sub(v[0], v[1])),
        },
        Primitive {
            name: "mul",
            inputs: |r| {
                let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
                vec![rand_tensor(&[a, b], r), rand_tensor(&[a, b], r)]
            },
            build: Box::new(|t, v| t.mul(v[0], v[1])),
        },
        Primitive {
            name: "scale",
            inputs: |r| {
                let a = dim(r, 1, 6);
                vec![rand_tensor(&[a], r)]
            },
            build: Box::new(|t, v| t.scale(v[0], -1.7)),
        },
        Primitive {
            name: "add_bias",
            inputs: |r| {
                let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
                vec![rand_tensor(&[a, b], r), rand_tensor(&[b], r)]
            },
            build: Box::new(|t, v| t.add_bias(v[0], v[1])),
        },
        Primitive {
            name: "mul_bias",
            inputs: |r| {
                let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
                vec![rand_tensor(&[a, b], r), rand_tensor(&[b], r)]
            },
            build: Box::new(|t, v| t.mul_bias(v[0], v[1])),
        },
        Primitive {
            name: "gelu",
            inputs: |r| {
                let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
                vec![rand_tensor(&[a, b], r).map(|x| 3.0 * x)]
            },
            build: Box::new(|t, v| t.gelu(v[0])),
        },
        Primitive {
            name: "sigmoid",
            inputs: |r| {
                let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
                vec![rand_tensor(&[a, b], r).map(|x| 3.0 * x)]
            },
            build: Box::new(|t, v| t.sigmoid(v[0])),
        },
        Primitive {
            name: "tanh",
            inputs: |r| {
                let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
                vec![rand_tensor(&[a, b], r).map(|x| 2.0 * x)]
            },
            build: Box::new(|t, v| t.tanh(v[0])),
        },
        Primitive {
            name: "softmax_lastdim",
            inputs: |r| {
                let (a, b) = (dim(r, 1, 4), dim(r, 2, 5));
                vec![rand_tensor(&[a, b], r).map(|x| 2.0 * x)]
            },
            build: Box::new(|t, v| t.softmax_lastdim(v[0])),
        },
        Primitive {
            name: "layer_norm_lastdim",
            inputs: |r| {
                let (a, b) = (dim(r, 1, 4), dim(r, 2, 5));
                vec![rand_tensor(&[a, b], r).map(|x| 2.0 * x), rand_tensor(&[b], r), rand_tensor(&[b], r)]
            },
            build: Box::new(|t, v| t.layer_norm_lastdim(v[0], v[1], v[2], 1e-5)),
        },
        Primitive {
            name: "mse",
            inputs: |r| {
                let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
                vec![rand_tensor(&[a, b], r), rand_tensor(&[a, b], r)]
            },
            build: Box::new(|t, v| t.mse(v[0], v[1])),
        },
        Primitive {
            name: "sum",
            inputs: |r| {
                let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
                vec![rand_tensor(&[a, b], r)]
            },
            build: Box::new(|t, v| t.sum(v[0])),
        },
        Primitive {
            name: "mean",
            inputs: |r| {
                let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
                vec![rand_tensor(&[a, b], r)]
            },
            build: Box::new(|t, v| t.mean(v[0])),
        },
        Primitive {
            name: "reshape",
            inputs: |r| {
                let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
                vec![rand_tensor(&[a, b], r)]
            },
            build: Box::new(|t, v| {
                let n = t.value(v[0]).len();
                t.reshape(v[0], [n])
            }),
        },
        Primitive {
            name: "transpose",
            inputs: |r| {
                let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
                vec![rand_tensor(&[a, b], r)]
            },
            build: Box::new(|t, v| t.transpose(v[0])),
        },
        Primitive {
            name: "index",
            inputs: |r| {
                let (a, b) = (dim(r, 2, 4), dim(r, 1, 4));
                vec![rand_tensor(&[a, b], r)]
            },
            build: Box::new(|t, v| t.index(v[0], 1)),
        },
        Primitive {
            name: "stack",
            inputs: |r| {
                let b = dim(r, 1, 4);
                vec![rand_tensor(&[b], r), rand_tensor(&[b], r)]
            },
            build: Box::new(|t, v| t.stack(&[v[0], v[1], v[0]])),
        },
        Primitive {
            name: "slice_cols",
            inputs: |r| {
                let (a, b) = (dim(r, 1, 4), dim(r, 2, 5));
                vec![rand_tensor(&[a, b], r)]
            },
            build: Box::new(|t, v| {
                let c = t.shape(v[0])[1];
                t.slice_cols(v[0], 1, c - 1)
            }),
        },
        Primitive {
            name: "concat_cols",
            inputs: |r| {
                let (a, b, c) = (dim(r, 1, 4), dim(r, 1, 3), dim(r, 1, 3));
                vec![rand_tensor(&[a, b], r), rand_tensor(&[a, c], r)]
            },
            build: Box::new(|t, v| t.concat_cols(&[v[0], v[1]])),
        },
    ]
}

/// Runs `trials` random-shape finite-difference checks per primitive and
/// returns `(name, worst relative error)` for each.
pub fn primitive_gradient_report(trials: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    primitives()
        .into_iter()
        .map(|p| {
            let worst = (0..trials)
                .map(|_| gradient_error(&(p.inputs)(&mut rng), &*p.build, 1e-3))
                .fold(0.0, f64::max);
            (p.name, worst)
        })
        .collect()
}

/// Runs the `pstmae` binary with `args`; returns (exit code, stderr).
pub fn pstmae(args: &[&str], env: &[(&str, &str)]) -> (i32, String) {
    let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_pstmae"));
    cmd.args(args).env_remove("PSTMAE_SEED").env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("spawn pstmae");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

pub fn pstmae_ok(args: &[&str]) {
    let (code, err) = pstmae(args, &[]);
    assert_eq!(code, 0, "pstmae {args:?} failed: {err}");
}

/// A seconds-scale experiment: 10 sequences of 24 frames on a 16×16 grid,
/// a two-stage autoencoder and one epoch per phase.
pub const TINY_CONFIG: &str = r#"{
  "data": {"sequences": 10, "grid": 16, "frames": 24},
  "model": {"ladder": [4, 8], "latent_dim": 16},
  "train": {"cae_epochs": 1, "epochs": 1, "baseline_epochs": 1}
}"#;

pub fn write_config(dir: &std::path::Path, text: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn tree(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &std::path::Path, d: &std::path::Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Relative error between the tape gradient of the combined loss with
/// respect to the mask token and central differences, on an 8×8 instance
/// evaluated in f64.
pub fn mask_token_gradient_error() -> f64 {
    use pstmae::dataset::MaskSpec;
    use pstmae::model::{Cae, CaeConfig, Pstmae, TransformerConfig};
    use pstmae::train::combined_loss;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cae = Cae::new(
        CaeConfig {
            channels: 2,
            height: 8,
            width: 8,
            ladder: vec![4, 8],
            latent_dim: 8,
        },
        &mut rng,
    )
    .unwrap();
    let mut model = Pstmae::new(
        TransformerConfig {
            latent_dim: 8,
            heads: 2,
            encoder_depth: 2,
            decoder_depth: 1,
            ff_mult: 2,
        },
        &mut rng,
    )
    .unwrap();
    let mask = MaskSpec::from_missing(10, 5, &[1, 4, 5, 8, 9]).unwrap();
    let window = Tensor::from_fn(vec![15, 2, 8, 8], |_| rng.random_range(0.0..1.0)).unwrap();
    let token = model.mask_token_id();

    let loss = |model: &Pstmae, grad: bool| -> (f64, Option<Tensor<f64>>) {
        let mut tape: Tape<f64> = Tape::new();
        let p = model.params().bind(&mut tape, grad);
        let cp = cae.params().bind(&mut tape, false);
        let x = tape.constant(window.clone());
        let pred = model.forward(&mut tape, &p, &cae, &cp, x, &mask).unwrap();
        let z = cae.encode(&mut tape, &cp, x).unwrap();
        let parts = combined_loss(&mut tape, pred.frames.unwrap(), x, pred.latents, z, 0.5).unwrap();
        let value = tape.value(parts.total).item().unwrap();
        if !grad {
            return (value, None);
        }
        tape.backward(parts.total).unwrap();
        (value, tape.grad(p.var(token)).cloned())
    };
    let (_, g) = loss(&model, true);
    let analytic = g.expect("mask token receives a gradient");
    let h = 1e-3f32;
    let mut num = Vec::new();
    for i in 0..analytic.len() {
        let orig = model.params().get(token).data()[i];
        let mut eval = |v: f32| {
            model.params_mut().get_mut(token).data_mut()[i] = v;
            loss(&model, false).0
        };
        let (up, down) = (orig + h, orig - h);
        let d = (eval(up) - eval(down)) / (up as f64 - down as f64);
        eval(orig);
        num.push(d);
    }
    let diff: f64 = analytic.data().iter().zip(&num).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = num.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

/// Relative drift of Σh over `steps` solver steps on an `n`×`n` grid with
/// sampled reference parameters.
pub fn swe_mass_drift(n: usize, steps: usize) -> f64 {
    use pstmae::sim::{swe_init, swe_step, SweParams};
    let p = SweParams::sample(n, 1, 5);
    p.validate(true).unwrap();
    let mut s = swe_init(&p).unwrap();
    let m0: f64 = s.h.iter().sum();
    for step in 1..=steps {
        s = swe_step(&s, &p, step).unwrap();
    }
    let m1: f64 = s.h.iter().sum();
    (m1 - m0).abs() / m0
}

/// Largest change of a flat, resting water column over `steps` steps.
pub fn swe_flat_change(n: usize, steps: usize) -> f64 {
    use pstmae::sim::{swe_init, swe_step, SweParams};
    let p = SweParams {
        bump_height: 0.0,
        ..SweParams::sample(n, 1, 5)
    };
    let s0 = swe_init(&p).unwrap();
    let mut s = s0.clone();
    for step in 1..=steps {
        s = swe_step(&s, &p, step).unwrap();
    }
    s.h.iter()
        .zip(&s0.h)
        .map(|(a, b)| (a - b).abs())
        .chain(s.u.iter().chain(&s.v).map(|x| x.abs()))
        .fold(0.0, f64::max)
}

/// Largest deviation from the uniform fixed point `u* = v* = -c^{1/3}` after
/// `steps` diffusion–reaction steps.
pub fn dr_fixed_point_drift(steps: usize) -> f64 {
    use pstmae::sim::{dr_step, DrParams, DrState};
    let p = DrParams {
        grid: 32,
        ..DrParams::default()
    };
    let star = -p.c.cbrt();
    let mut s = DrState {
        n: 32,
        u: vec![star; 32 * 32],
        v: vec![star; 32 * 32],
    };
    for step in 1..=steps {
        s = dr_step(&s, &p, step).unwrap();
    }
    s.u.iter().chain(&s.v).map(|x| (x - star).abs()).fold(0.0, f64::max)
}
