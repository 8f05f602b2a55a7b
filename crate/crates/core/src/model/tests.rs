use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::MaskSpec;
use crate::tensor::{Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn desk_cae() -> Cae {
    Cae::new(CaeConfig::new(3, 32, 32), &mut rng(0)).unwrap()
}

fn small_cae() -> Cae {
    let cfg = CaeConfig {
        channels: 2,
        height: 8,
        width: 8,
        ladder: vec![4, 8, 16],
        latent_dim: 8,
    };
    Cae::new(cfg, &mut rng(1)).unwrap()
}

fn frames(n: usize, chw: [usize; 3], seed: u64) -> Tensor<f32> {
    Tensor::uniform([n, chw[0], chw[1], chw[2]], 0.0, 1.0, &mut rng(seed)).unwrap()
}

#[test]
fn cae_desk_shapes() {
    let cae = desk_cae();
    assert_eq!(cae.config().bottleneck(), [128, 2, 2]);
    let x = frames(2, [3, 32, 32], 3);
    let z = cae.encode_frames(&x).unwrap();
    assert_eq!(z.shape(), &[2, 128]);
    let y = cae.decode_latents(&z).unwrap();
    assert_eq!(y.shape(), &[2, 3, 32, 32]);
}

#[test]
fn cae_paper_scale_decode_shape() {
    let cae = Cae::new(CaeConfig::new(3, 128, 128), &mut rng(0)).unwrap();
    assert_eq!(cae.config().bottleneck(), [128, 8, 8]);
    let z = Tensor::uniform([1, 128], -1.0, 1.0, &mut rng(2)).unwrap();
    assert_eq!(cae.decode_latents(&z).unwrap().shape(), &[1, 3, 128, 128]);
}

#[test]
fn cae_decoder_output_in_unit_interval() {
    let cae = small_cae();
    let z = Tensor::uniform([16, 8], -3.0, 3.0, &mut rng(4)).unwrap();
    let y = cae.decode_latents(&z).unwrap();
    assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn cae_is_pure_per_frame() {
    let cae = small_cae();
    let one = frames(1, [2, 8, 8], 5);
    let two = Tensor::stack(&[one.index(0).unwrap(), one.index(0).unwrap()]).unwrap();
    let z = cae.encode_frames(&two).unwrap();
    assert_eq!(z.index(0).unwrap(), z.index(1).unwrap());
    assert_eq!(cae.encode_frames(&one).unwrap().index(0).unwrap(), z.index(0).unwrap());
}

#[test]
fn cae_rejects_bad_dims() {
    let bad = CaeConfig::new(3, 24, 32);
    assert!(matches!(Cae::new(bad, &mut rng(0)), Err(ModelError::Config(_))));
    let cae = small_cae();
    assert!(cae.encode_frames(&frames(1, [3, 8, 8], 0)).is_err());
    assert!(cae.decode_latents(&Tensor::zeros([1, 7]).unwrap()).is_err());
}

#[test]
fn positional_embedding_examples() {
    let e0 = positional_embedding(0, 6);
    assert_eq!(e0, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    let e1 = positional_embedding(1, 128);
    assert!((e1[0] - 0.841_470_984_807_896_5).abs() < 1e-12);
    assert!((e1[1] - 0.540_302_305_868_139_8).abs() < 1e-12);
    for t in 0..50 {
        assert!(positional_embedding(t, 128).iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn embedding_table_matches_direct_formula() {
    let d = 16;
    let table: Tensor<f32> = embedding_table(&[0, 3, 14], d);
    for (row, t) in [1usize, 4, 15].iter().enumerate() {
        for i in 0..d / 2 {
            let angle = *t as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            assert!((table.data()[row * d + 2 * i] as f64 - angle.sin()).abs() < 1e-7);
            assert!((table.data()[row * d + 2 * i + 1] as f64 - angle.cos()).abs() < 1e-7);
        }
    }
}

fn block(d: usize, heads: usize, ff_mult: usize, seed: u64) -> (AttentionBlock, ParamSet) {
    let cfg = TransformerConfig {
        latent_dim: d,
        heads,
        encoder_depth: 1,
        decoder_depth: 1,
        ff_mult,
    };
    let mut ps = ParamSet::new();
    let b = AttentionBlock::new(&mut ps, "b", &cfg, &mut rng(seed));
    // Give every parameter a non-trivial value so biases and norms matter.
    let mut r = rng(seed + 100);
    for t in ps.tensors_mut() {
        *t = Tensor::uniform(t.shape().to_vec(), -0.8, 0.8, &mut r).unwrap();
    }
    (b, ps)
}

#[test]
fn singleton_attention_is_one() {
    let (b, ps) = block(4, 2, 4, 0);
    let mut tape: Tape<f64> = Tape::new();
    let p = ps.bind(&mut tape, false);
    let x = tape.constant(Tensor::uniform([1, 4], -1.0, 1.0, &mut rng(1)).unwrap());
    let mut attn = Vec::new();
    b.forward(&mut tape, &p, x, Some(&mut attn)).unwrap();
    assert_eq!(attn.len(), 2);
    for a in attn {
        assert_eq!(tape.value(a).data(), &[1.0]);
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let (b, ps) = block(8, 2, 4, 3);
    let mut tape: Tape<f32> = Tape::new();
    let p = ps.bind(&mut tape, false);
    let x = tape.constant(Tensor::uniform([7, 8], -2.0, 2.0, &mut rng(2)).unwrap());
    let mut attn = Vec::new();
    let y = b.forward(&mut tape, &p, x, Some(&mut attn)).unwrap();
    assert_eq!(tape.shape(y), &[7, 8]);
    for a in attn {
        for row in tape.value(a).data().chunks(7) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}

/// Scalar re-derivation of one block for `n` tokens, single head.
fn block_oracle(ps: &ParamSet, x: &[[f64; 2]], hidden: usize) -> Vec<[f64; 2]> {
    let get = |n: &str| -> Vec<f64> { ps.by_name(n).unwrap().data().iter().map(|&v| v as f64).collect() };
    let ln = |v: [f64; 2], g: &[f64], b: &[f64]| -> [f64; 2] {
        let m = (v[0] + v[1]) / 2.0;
        let var = ((v[0] - m).powi(2) + (v[1] - m).powi(2)) / 2.0;
        let s = 1.0 / (var + 1e-5).sqrt();
        [(v[0] - m) * s * g[0] + b[0], (v[1] - m) * s * g[1] + b[1]]
    };
    let lin = |v: &[f64], w: &[f64], b: &[f64], d_out: usize| -> Vec<f64> {
        (0..d_out)
            .map(|j| b[j] + v.iter().enumerate().map(|(i, &vi)| vi * w[i * d_out + j]).sum::<f64>())
            .collect()
    };
    let gelu = |v: f64| 0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt()));
    let (g1, b1, g2, b2) = (get("b.norm1.gain"), get("b.norm1.bias"), get("b.norm2.gain"), get("b.norm2.bias"));
    let h: Vec<[f64; 2]> = x.iter().map(|&v| ln(v, &g1, &b1)).collect();
    let proj = |name: &str| -> Vec<Vec<f64>> {
        let (w, b) = (get(&format!("b.{name}.weight")), get(&format!("b.{name}.bias")));
        h.iter().map(|v| lin(v, &w, &b, 2)).collect()
    };
    let (q, k, v) = (proj("q"), proj("k"), proj("v"));
    let n = x.len();
    let mut out = Vec::new();
    for i in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt())
            .collect();
        let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let o: Vec<f64> = (0..2).map(|c| (0..n).map(|j| e[j] / z * v[j][c]).sum()).collect();
        let o = lin(&o, &get("b.out.weight"), &get("b.out.bias"), 2);
        let o1 = [o[0] + q[i][0], o[1] + q[i][1]];
        let hh = ln(o1, &g2, &b2);
        let f: Vec<f64> = lin(&hh, &get("b.ff1.weight"), &get("b.ff1.bias"), hidden)
            .into_iter()
            .map(gelu)
            .collect();
        let f = lin(&f, &get("b.ff2.weight"), &get("b.ff2.bias"), 2);
        out.push([o1[0] + f[0], o1[1] + f[1]]);
    }
    out
}

#[test]
fn two_token_block_matches_scalar_oracle() {
    let (b, ps) = block(2, 1, 2, 7);
    let x = [[0.3, -1.2], [0.9, 0.4]];
    let mut tape: Tape<f32> = Tape::new();
    let p = ps.bind(&mut tape, false);
    let xv = tape.constant(Tensor::new([2, 2], x.iter().flatten().map(|&v| v as f32).collect()).unwrap());
    let y = b.forward(&mut tape, &p, xv, None).unwrap();
    let expected = block_oracle(&ps, &x, 4);
    for (got, want) in tape.value(y).data().chunks(2).zip(&expected) {
        assert!((got[0] as f64 - want[0]).abs() < 1e-5, "{got:?} vs {want:?}");
        assert!((got[1] as f64 - want[1]).abs() < 1e-5, "{got:?} vs {want:?}");
    }
}

fn small_model(seed: u64) -> Pstmae {
    let cfg = TransformerConfig {
        latent_dim: 8,
        heads: 2,
        encoder_depth: 2,
        decoder_depth: 1,
        ff_mult: 4,
    };
    Pstmae::new(cfg, &mut rng(seed)).unwrap()
}

#[test]
fn encoder_is_permutation_equivariant() {
    let model = small_model(0);
    let d = 8;
    let mask = MaskSpec::from_missing(10, 5, &[1, 4, 5]).unwrap();
    let n = mask.observed.len();
    let z = Tensor::<f64>::uniform([n, d], -1.0, 1.0, &mut rng(9)).unwrap();
    let mut tape: Tape<f64> = Tape::new();
    let p = model.params().bind(&mut tape, false);

    // Rows fed in reverse order, each paired with its own δ_t.
    let perm: Vec<usize> = (0..n).rev().collect();
    let zp = Tensor::stack(&perm.iter().map(|&i| z.index(i).unwrap()).collect::<Vec<_>>()).unwrap();
    let zv = tape.constant(z.clone());
    let zpv = tape.constant(zp);
    let pos = tape.constant(embedding_table(&mask.observed, d));
    let permuted_steps: Vec<usize> = perm.iter().map(|&i| mask.observed[i]).collect();
    let pos_p = tape.constant(embedding_table(&permuted_steps, d));
    let mut a = tape.add(zv, pos).unwrap();
    let mut b = tape.add(zpv, pos_p).unwrap();
    let direct = model.encode(&mut tape, &p, zv, &mask, None).unwrap();
    // Apply the same encoder blocks to the permuted inputs by hand.
    let cfg = model.config().clone();
    let mut ps = ParamSet::new();
    let blocks: Vec<AttentionBlock> =
        (0..cfg.encoder_depth).map(|i| AttentionBlock::new(&mut ps, &format!("encoder.{i}"), &cfg, &mut rng(0))).collect();
    ps.load_from(model.params()).unwrap();
    let q = ps.bind(&mut tape, false);
    for blk in &blocks {
        a = blk.forward(&mut tape, &q, a, None).unwrap();
        b = blk.forward(&mut tape, &q, b, None).unwrap();
    }
    let direct_v = tape.value(direct).clone();
    assert!(direct_v.max_abs_diff(tape.value(a)) < 1e-12);
    for (k, &i) in perm.iter().enumerate() {
        let row_b = tape.value(b).index(k).unwrap();
        let row_a = tape.value(a).index(i).unwrap();
        assert!(row_a.max_abs_diff(&row_b) < 1e-12);
    }
}

fn window_and_mask(cae: &Cae, seed: u64) -> (Tensor<f32>, MaskSpec) {
    let c = cae.config();
    let w = frames(15, [c.channels, c.height, c.width], seed);
    let mask = MaskSpec::from_missing(10, 5, &[0, 3, 4, 8, 9]).unwrap();
    (w, mask)
}

fn run_forward(model: &Pstmae, cae: &Cae, window: &Tensor<f32>, mask: &MaskSpec) -> (Tensor<f32>, Tensor<f32>) {
    let mut tape: Tape<f32> = Tape::new();
    let p = model.params().bind(&mut tape, false);
    let cp = cae.params().bind(&mut tape, false);
    let w = tape.constant(window.clone());
    let pred = model.forward(&mut tape, &p, cae, &cp, w, mask).unwrap();
    (tape.value(pred.latents).clone(), tape.value(pred.frames.unwrap()).clone())
}

#[test]
fn forward_shapes_range_and_determinism() {
    let cae = desk_cae();
    let model = Pstmae::new(TransformerConfig::new(128), &mut rng(2)).unwrap();
    let (w, mask) = window_and_mask(&cae, 1);
    let (z, x) = run_forward(&model, &cae, &w, &mask);
    assert_eq!(z.shape(), &[15, 128]);
    assert_eq!(x.shape(), &[15, 3, 32, 32]);
    assert!(x.data().iter().all(|&v| v > 0.0 && v < 1.0));
    let (z2, x2) = run_forward(&model, &cae, &w, &mask);
    assert_eq!(z, z2);
    assert_eq!(x, x2);
}

#[test]
fn placeholder_content_is_never_read() {
    let cae = small_cae();
    let model = small_model(4);
    let (w, mask) = window_and_mask(&cae, 2);
    let mut noisy = w.clone();
    let n = cae.config().frame_len();
    let mut r = rng(77);
    for t in mask.hidden() {
        let junk = Tensor::<f32>::uniform([n], -50.0, 50.0, &mut r).unwrap();
        noisy.data_mut()[t * n..(t + 1) * n].copy_from_slice(junk.data());
    }
    let (za, xa) = run_forward(&model, &cae, &w, &mask);
    let (zb, xb) = run_forward(&model, &cae, &noisy, &mask);
    assert_eq!(za.data(), zb.data());
    assert_eq!(xa.data(), xb.data());
}

#[test]
fn longer_horizon_needs_no_new_parameters() {
    let cae = small_cae();
    let model = small_model(5);
    let mask = MaskSpec::from_missing(10, 7, &[2, 6]).unwrap();
    let w = frames(17, [2, 8, 8], 3);
    let (z, x) = run_forward(&model, &cae, &w, &mask);
    assert_eq!(z.shape(), &[17, 8]);
    assert_eq!(x.shape(), &[17, 2, 8, 8]);
}

#[test]
fn encoder_rejects_empty_observation() {
    let model = small_model(0);
    let mask = MaskSpec {
        t_in: 2,
        t_out: 1,
        observed: vec![],
        missing: vec![0, 1],
    };
    let mut tape: Tape<f32> = Tape::new();
    let p = model.params().bind(&mut tape, false);
    let z = tape.constant(Tensor::zeros([1, 8]).unwrap());
    assert!(model.encode(&mut tape, &p, z, &mask, None).is_err());
}

#[test]
fn parameter_set_excludes_positional_table() {
    let model = small_model(0);
    assert!(model.params().names().iter().all(|n| !n.contains("pos")));
    assert_eq!(model.params().get(model.mask_token_id()).shape(), &[8]);
    let d = 8;
    let per_block = 2 * 2 * d + 4 * (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d);
    assert_eq!(model.params().numel(), d + 3 * per_block + d * d + d);
}

#[test]
fn lstm_cell_matches_gate_equations() {
    let lstm = LatentLstm::new(LstmConfig { latent_dim: 2 }, &mut rng(8)).unwrap();
    let get = |n: &str| -> Vec<f64> { lstm.params().by_name(n).unwrap().data().iter().map(|&v| v as f64).collect() };
    let (wx, wh, b) = (get("cell.w_x"), get("cell.w_h"), get("cell.bias"));
    let x = [0.7, -0.3];
    let h0 = [0.2, 0.5];
    let c0 = [-0.4, 0.1];
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let gate = |j: usize| -> f64 {
        b[j] + (0..2).map(|i| x[i] * wx[i * 8 + j] + h0[i] * wh[i * 8 + j]).sum::<f64>()
    };
    let mut h1 = [0.0; 2];
    let mut c1 = [0.0; 2];
    for k in 0..2 {
        let (i, f, g, o) = (sig(gate(k)), sig(gate(2 + k)), gate(4 + k).tanh(), sig(gate(6 + k)));
        c1[k] = f * c0[k] + i * g;
        h1[k] = o * c1[k].tanh();
    }

    let mut tape: Tape<f64> = Tape::new();
    let p = lstm.params().bind(&mut tape, false);
    let xv = tape.constant(Tensor::new([1, 2], x.to_vec()).unwrap());
    let s = LstmState {
        h: tape.constant(Tensor::new([1, 2], h0.to_vec()).unwrap()),
        c: tape.constant(Tensor::new([1, 2], c0.to_vec()).unwrap()),
    };
    let s1 = lstm.cell(&mut tape, &p, xv, s).unwrap();
    for k in 0..2 {
        assert!((tape.value(s1.h).data()[k] - h1[k]).abs() < 1e-6);
        assert!((tape.value(s1.c).data()[k] - c1[k]).abs() < 1e-6);
    }
}

#[test]
fn lstm_rollout_length() {
    let lstm = LatentLstm::new(LstmConfig { latent_dim: 4 }, &mut rng(0)).unwrap();
    let mut tape: Tape<f32> = Tape::new();
    let p = lstm.params().bind(&mut tape, false);
    let hist = tape.constant(Tensor::uniform([10, 4], -1.0, 1.0, &mut rng(1)).unwrap());
    let out = lstm.rollout(&mut tape, &p, hist, 5).unwrap();
    assert_eq!(tape.shape(out), &[5, 4]);
    let tf = lstm.teacher_forced(&mut tape, &p, hist).unwrap();
    assert_eq!(tape.shape(tf), &[10, 4]);
}

#[test]
fn interpolation_fills_gaps() {
    let z = Tensor::new([5, 2], vec![1.0, 2.0, 0.0, 0.0, 3.0, 6.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let mask = MaskSpec::from_missing(5, 0, &[1, 3, 4]).unwrap();
    let out = interpolate_missing(&z, &mask).unwrap();
    assert_eq!(out.data(), &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0, 3.0, 6.0, 3.0, 6.0]);
    let lead = MaskSpec::from_missing(5, 0, &[0]).unwrap();
    let z = Tensor::new([5, 1], vec![9.0, 4.0, 1.0, 1.0, 1.0]).unwrap();
    assert_eq!(interpolate_missing(&z, &lead).unwrap().data()[0], 4.0);
    // Uneven gap: a third of the way from step 0 to step 3.
    let gap = MaskSpec::from_missing(4, 0, &[1, 2]).unwrap();
    let z = Tensor::new([4, 1], vec![0.0, 0.0, 0.0, 3.0]).unwrap();
    assert_eq!(interpolate_missing(&z, &gap).unwrap().data(), &[0.0, 1.0, 2.0, 3.0]);
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let cae = small_cae();
    let ck = Checkpoint {
        kind: "cae".into(),
        config: serde_json::to_value(cae.config()).unwrap(),
        meta: serde_json::json!({"epoch": 3}),
        params: cae.params().clone(),
    };
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    assert!(back.clone().expect_kind("pstmae").is_err());

    let mut other = Cae::new(cae.config().clone(), &mut rng(99)).unwrap();
    assert_ne!(other.params(), cae.params());
    other.params_mut().load_from(&ck.params).unwrap();
    assert_eq!(other.params(), cae.params());
}
