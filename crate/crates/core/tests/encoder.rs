mod common;

use common::{indirect_oracle, random_mat, rng};
use rand::Rng;
use stepground::corpus::{generate_synthetic, Batch, LabelSource, Sample, SampleOptions, SynthConfig};
use stepground::encoder::{
    cosine_alignment, forward, forward_item, fuse, indirect_alignment, multimodal_encode, unimodal_encode,
    Activation, ForwardInput, Modality, ModelConfig, ModelParams,
};
use stepground::Mat;

fn identity_config(d: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        video_dim: d,
        narration_dim: d,
        step_dim: d,
        d_model: d,
        layers,
        heads: 1,
        ffn_mult: 1,
        max_frames: 16,
        max_narrations: 8,
        max_steps: 8,
        activation: Activation::Linear,
        ..ModelConfig::default()
    }
}

/// Identity MLPs everywhere; positional tables keep their random init
/// unless `zero_pos`.
fn identity_params(d: usize, layers: usize, zero_pos: bool) -> ModelParams {
    let mut p = ModelParams::init(&identity_config(d, layers), 3).unwrap();
    for prefix in ["video_mlp", "narration_mlp", "step_mlp"] {
        *p.get_mut(&format!("{prefix}.w1")).unwrap() = Mat::identity(d);
        *p.get_mut(&format!("{prefix}.w2")).unwrap() = Mat::identity(d);
        *p.get_mut(&format!("{prefix}.b1")).unwrap() = Mat::zeros(1, d);
        *p.get_mut(&format!("{prefix}.b2")).unwrap() = Mat::zeros(1, d);
    }
    if zero_pos {
        for name in ["pos.video", "pos.narration", "pos.step"] {
            let m = p.get_mut(name).unwrap();
            *m = Mat::zeros(m.rows(), m.cols());
        }
    }
    p
}

fn assert_close(a: &Mat, b: &Mat, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
    }
}

#[test]
fn identity_mlp_without_positions_returns_input() {
    let p = identity_params(4, 0, true);
    let x = random_mat(&mut rng(1), 5, 4, -2.0, 2.0);
    assert_eq!(unimodal_encode(&x, Modality::Video, &p).unwrap(), x);
}

#[test]
fn identity_mlp_adds_positions_rowwise() {
    let p = identity_params(4, 0, false);
    let x = random_mat(&mut rng(2), 5, 4, -2.0, 2.0);
    let h = unimodal_encode(&x, Modality::Narration, &p).unwrap();
    let pos = p.get("pos.narration").unwrap();
    for i in 0..5 {
        for j in 0..4 {
            assert_eq!(h[(i, j)], x[(i, j)] + pos[(i, j)]);
        }
    }
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

#[test]
fn mlp_matches_straight_line_evaluation() {
    let cfg = ModelConfig {
        video_dim: 5,
        d_model: 6,
        heads: 2,
        ..ModelConfig::default()
    };
    let p = ModelParams::init(&cfg, 11).unwrap();
    let x = random_mat(&mut rng(3), 3, 5, -1.0, 1.0);
    let h = unimodal_encode(&x, Modality::Video, &p).unwrap();
    let (w1, b1, w2, b2) = (
        p.get("video_mlp.w1").unwrap(),
        p.get("video_mlp.b1").unwrap(),
        p.get("video_mlp.w2").unwrap(),
        p.get("video_mlp.b2").unwrap(),
    );
    let pos = p.get("pos.video").unwrap();
    for i in 0..3 {
        let hidden: Vec<f64> = (0..6)
            .map(|j| gelu(b1[(0, j)] + (0..5).map(|k| x[(i, k)] * w1[(k, j)]).sum::<f64>()))
            .collect();
        for j in 0..6 {
            let want = b2[(0, j)] + (0..6).map(|k| hidden[k] * w2[(k, j)]).sum::<f64>() + pos[(i, j)];
            assert!((h[(i, j)] - want).abs() <= 1e-6 * want.abs().max(1e-12));
        }
    }
}

#[test]
fn empty_stack_is_identity() {
    let p = identity_params(4, 0, true);
    let mut r = rng(4);
    let (hv, hn, hs) = (random_mat(&mut r, 3, 4, -1.0, 1.0), random_mat(&mut r, 2, 4, -1.0, 1.0), random_mat(&mut r, 2, 4, -1.0, 1.0));
    let (zv, zn, zs) = multimodal_encode(&hv, &hn, &hs, [&[true; 3], &[true; 2], &[true; 2]], &p).unwrap();
    assert_eq!((zv, zn, zs), (hv, hn, hs));
}

#[test]
fn padding_does_not_leak_into_valid_tokens() {
    let cfg = ModelConfig {
        d_model: 8,
        heads: 2,
        layers: 2,
        ..ModelConfig::default()
    };
    let p = ModelParams::init(&cfg, 5).unwrap();
    let mut r = rng(5);
    let hv = random_mat(&mut r, 3, 8, -1.0, 1.0);
    let mut perturbed = hv.clone();
    for v in &mut perturbed.as_mut_slice()[8..] {
        *v += r.random_range(-5.0..5.0);
    }
    let empty = Mat::zeros(0, 8);
    let mask: [&[bool]; 3] = [&[true, false, false], &[], &[]];
    let (a, _, _) = multimodal_encode(&hv, &empty, &empty, mask, &p).unwrap();
    let (b, _, _) = multimodal_encode(&perturbed, &empty, &empty, mask, &p).unwrap();
    assert_eq!(a.row(0), b.row(0));
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j])
        .collect()
}

fn affine(x: &[f64], w: &Mat, b: &Mat) -> Vec<f64> {
    (0..w.cols())
        .map(|j| b[(0, j)] + x.iter().enumerate().map(|(k, v)| v * w[(k, j)]).sum::<f64>())
        .collect()
}

#[test]
fn one_attention_layer_matches_hand_computation() {
    let cfg = ModelConfig {
        video_dim: 2,
        narration_dim: 2,
        step_dim: 2,
        d_model: 2,
        layers: 1,
        heads: 1,
        ffn_mult: 1,
        ..ModelConfig::default()
    };
    let mut p = ModelParams::init(&cfg, 0).unwrap();
    let set = |p: &mut ModelParams, name: &str, rows: &[Vec<f64>]| {
        *p.get_mut(&format!("layers.0.{name}")).unwrap() = Mat::from_rows(rows);
    };
    set(&mut p, "ln1.g", &[vec![1.5, 0.5]]);
    set(&mut p, "ln1.b", &[vec![0.1, -0.2]]);
    set(&mut p, "attn.wq", &[vec![0.3, -0.4], vec![0.8, 0.2]]);
    set(&mut p, "attn.bq", &[vec![0.05, 0.0]]);
    set(&mut p, "attn.wk", &[vec![-0.6, 0.1], vec![0.4, 0.9]]);
    set(&mut p, "attn.bk", &[vec![0.0, 0.1]]);
    set(&mut p, "attn.wv", &[vec![1.0, 0.5], vec![-0.5, 1.0]]);
    set(&mut p, "attn.bv", &[vec![0.2, 0.0]]);
    set(&mut p, "attn.wo", &[vec![0.7, 0.0], vec![0.3, -0.9]]);
    set(&mut p, "attn.bo", &[vec![0.0, 0.3]]);
    set(&mut p, "ln2.g", &[vec![1.0, 2.0]]);
    set(&mut p, "ln2.b", &[vec![0.0, 0.1]]);
    set(&mut p, "ffn.w1", &[vec![0.5, -1.0], vec![1.2, 0.4]]);
    set(&mut p, "ffn.b1", &[vec![0.1, 0.1]]);
    set(&mut p, "ffn.w2", &[vec![-0.3, 0.6], vec![0.9, 0.2]]);
    set(&mut p, "ffn.b2", &[vec![0.0, -0.1]]);
    *p.get_mut("final_ln.g").unwrap() = Mat::from_rows(&[vec![0.9, 1.1]]);
    *p.get_mut("final_ln.b").unwrap() = Mat::from_rows(&[vec![0.05, -0.05]]);

    let x = [vec![0.4, -1.3], vec![2.0, 0.7]];
    let g = |n: &str| p.get(&format!("layers.0.{n}")).unwrap().clone();
    let h: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, g("ln1.g").row(0), g("ln1.b").row(0))).collect();
    let q: Vec<_> = h.iter().map(|r| affine(r, &g("attn.wq"), &g("attn.bq"))).collect();
    let k: Vec<_> = h.iter().map(|r| affine(r, &g("attn.wk"), &g("attn.bk"))).collect();
    let v: Vec<_> = h.iter().map(|r| affine(r, &g("attn.wv"), &g("attn.bv"))).collect();
    let mut want = Vec::new();
    for i in 0..2 {
        let s: Vec<f64> = (0..2).map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt()).collect();
        let e: Vec<f64> = s.iter().map(|z| z.exp()).collect();
        let ctx: Vec<f64> = (0..2).map(|c| (e[0] * v[0][c] + e[1] * v[1][c]) / (e[0] + e[1])).collect();
        let o = affine(&ctx, &g("attn.wo"), &g("attn.bo"));
        let x1: Vec<f64> = (0..2).map(|c| x[i][c] + o[c]).collect();
        let h2 = layer_norm(&x1, g("ln2.g").row(0), g("ln2.b").row(0));
        let f: Vec<f64> = affine(&h2, &g("ffn.w1"), &g("ffn.b1")).into_iter().map(gelu).collect();
        let f = affine(&f, &g("ffn.w2"), &g("ffn.b2"));
        let x2: Vec<f64> = (0..2).map(|c| x1[c] + f[c]).collect();
        want.push(layer_norm(&x2, p.get("final_ln.g").unwrap().row(0), p.get("final_ln.b").unwrap().row(0)));
    }
    let hv = Mat::from_rows(&x);
    let empty = Mat::zeros(0, 2);
    let (zv, _, _) = multimodal_encode(&hv, &empty, &empty, [&[true, true], &[], &[]], &p).unwrap();
    assert_close(&zv, &Mat::from_rows(&want), 1e-6);
}

#[test]
fn cosine_examples() {
    let c = cosine_alignment(&Mat::from_rows(&[vec![1.0, 0.0]]), &Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]));
    assert!((c[(0, 0)] - 1.0).abs() < 1e-12);
    assert_eq!(c[(0, 1)], 0.0);
    assert!((c[(0, 2)] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);
}

#[test]
fn single_narration_indirect_copies_its_row() {
    let nv = random_mat(&mut rng(6), 1, 5, -1.0, 1.0);
    let sn = random_mat(&mut rng(7), 3, 1, -1.0, 1.0);
    let snv = indirect_alignment(&sn, &nv, 0.07, &[true]).unwrap();
    for s in 0..3 {
        assert_eq!(snv.row(s), nv.row(0));
    }
}

#[test]
fn tied_narrations_average_their_rows() {
    let nv = random_mat(&mut rng(8), 2, 5, -1.0, 1.0);
    for xi in [0.01, 0.07, 3.0] {
        let snv = indirect_alignment(&Mat::from_rows(&[vec![0.4, 0.4]]), &nv, xi, &[true, true]).unwrap();
        for t in 0..5 {
            assert!((snv[(0, t)] - 0.5 * (nv[(0, t)] + nv[(1, t)])).abs() < 1e-15);
        }
    }
}

#[test]
fn indirect_matches_high_precision_reference() {
    let sn = Mat::from_rows(&[vec![0.2, 0.9, 0.1]]);
    let nv = Mat::from_rows(&[
        vec![-0.7115, -0.7644, -0.383, 0.6323],
        vec![-0.6385, 0.1632, 0.2778, -0.2552],
        vec![0.0955, -0.8744, -0.8808, -0.5881],
    ]);
    // Evaluated with 50-digit arithmetic.
    let want = [-0.638_495_328_434_865_8, 0.16314660079696889, 0.27775739639368573, -0.255_163_331_624_714_4];
    let snv = indirect_alignment(&sn, &nv, 0.07, &[true; 3]).unwrap();
    for t in 0..4 {
        assert!((snv[(0, t)] - want[t]).abs() <= 1e-6 * want[t].abs());
    }
}

#[test]
fn indirect_matches_oracle_and_stays_within_bounds() {
    let mut r = rng(9);
    for _ in 0..100 {
        let (s, n, t) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=8));
        let sn = random_mat(&mut r, s, n, -1.0, 1.0);
        let nv = random_mat(&mut r, n, t, -1.0, 1.0);
        let mut mask: Vec<bool> = (0..n).map(|_| r.random_bool(0.8)).collect();
        mask[r.random_range(0..n)] = true;
        let xi = r.random_range(0.02..1.0);
        let got = indirect_alignment(&sn, &nv, xi, &mask).unwrap();
        assert_close(&got, &indirect_oracle(&sn, &nv, xi, &mask), 1e-6);
        for ti in 0..t {
            let col: Vec<f64> = (0..n).filter(|&k| mask[k]).map(|k| nv[(k, ti)]).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for si in 0..s {
                assert!(got[(si, ti)] >= lo - 1e-12 && got[(si, ti)] <= hi + 1e-12);
            }
        }
        let sv = random_mat(&mut r, s, t, -1.0, 1.0);
        let f = fuse(&sv, &got).unwrap();
        for i in 0..f.len() {
            assert_eq!(f.as_slice()[i], 0.5 * (sv.as_slice()[i] + got.as_slice()[i]));
        }
    }
}

#[test]
fn fusion_examples() {
    let a = Mat::from_rows(&[vec![0.2, -0.3]]);
    assert_eq!(fuse(&a, &a).unwrap(), a);
    let f = fuse(&Mat::from_rows(&[vec![0.2]]), &Mat::from_rows(&[vec![0.6]])).unwrap();
    assert!((f[(0, 0)] - 0.4).abs() < 1e-15);
    let mut r = rng(10);
    let sv = random_mat(&mut r, 3, 7, -1.0, 1.0);
    let snv = random_mat(&mut r, 3, 7, -1.0, 1.0);
    let base = fuse(&sv, &snv).unwrap();
    let scaled = fuse(&sv.map(|x| 2.5 * x), &snv.map(|x| 2.5 * x)).unwrap();
    let am = |m: &Mat, s: usize| stepground::evalkit::argmax(m.row(s)).unwrap();
    for s in 0..3 {
        assert_eq!(am(&base, s), am(&scaled, s));
    }
    assert!(fuse(&sv, &Mat::zeros(2, 7)).is_err());
}

#[test]
fn alignment_shapes() {
    let cfg = ModelConfig {
        video_dim: 5,
        narration_dim: 4,
        step_dim: 3,
        d_model: 8,
        heads: 2,
        layers: 1,
        max_frames: 16,
        ..ModelConfig::default()
    };
    let p = ModelParams::init(&cfg, 1).unwrap();
    let mut r = rng(11);
    let (frames, nar, steps) = (random_mat(&mut r, 12, 5, -1.0, 1.0), random_mat(&mut r, 3, 4, -1.0, 1.0), random_mat(&mut r, 4, 3, -1.0, 1.0));
    let input = ForwardInput {
        frames: &frames,
        frame_mask: &[true; 12],
        narrations: &nar,
        narration_mask: &[true; 3],
        steps: &steps,
        step_mask: &[true; 4],
    };
    let al = forward_item(&input, &p, cfg.xi).unwrap();
    assert_eq!(al.nv.shape(), (3, 12));
    assert_eq!(al.sv.shape(), (4, 12));
    assert_eq!(al.sn.shape(), (4, 3));
    assert_eq!(al.snv.as_ref().unwrap().shape(), (4, 12));
    assert_eq!(al.fused.shape(), (4, 12));
}

#[test]
fn zero_layers_give_cosine_of_raw_inputs() {
    let p = identity_params(4, 0, false);
    let mut r = rng(12);
    let (frames, nar, steps) = (random_mat(&mut r, 6, 4, -1.0, 1.0), random_mat(&mut r, 2, 4, -1.0, 1.0), random_mat(&mut r, 3, 4, -1.0, 1.0));
    let input = ForwardInput {
        frames: &frames,
        frame_mask: &[true; 6],
        narrations: &nar,
        narration_mask: &[true; 2],
        steps: &steps,
        step_mask: &[true; 3],
    };
    let al = forward_item(&input, &p, 0.07).unwrap();
    let (pv, ps) = (p.get("pos.video").unwrap(), p.get("pos.step").unwrap());
    for s in 0..3 {
        for t in 0..6 {
            let a: Vec<f64> = (0..4).map(|j| steps[(s, j)] + ps[(s, j)]).collect();
            let b: Vec<f64> = (0..4).map(|j| frames[(t, j)] + pv[(t, j)]).collect();
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let want = dot / (norm(&a) * norm(&b));
            assert!((al.sv[(s, t)] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn batched_forward_matches_single_video_evaluation() {
    let corpus = generate_synthetic(&SynthConfig {
        num_tasks: 2,
        videos_per_task: 2,
        frames_range: (20, 40),
        seed: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = ModelConfig {
        d_model: 16,
        heads: 2,
        layers: 2,
        ..ModelConfig::desk(corpus.dims)
    };
    let p = ModelParams::init(&cfg, 2).unwrap();
    let samples: Vec<Sample> = corpus
        .videos
        .iter()
        .map(|v| {
            let article = &corpus.articles[v.task_id.as_ref().unwrap()];
            Sample::new(v, Some(article), 64, SampleOptions::default(), LabelSource::AsrTimestamps).unwrap()
        })
        .collect();
    let batched = forward(&Batch::collate(samples.clone()), &p, cfg.xi).unwrap();
    for (s, al) in samples.into_iter().zip(batched) {
        let single = forward(&Batch::collate(vec![s]), &p, cfg.xi).unwrap().remove(0);
        let (a, b) = (al.cropped(), single.cropped());
        assert_close(&a.nv, &b.nv, 1e-6);
        assert_close(&a.sv, &b.sv, 1e-6);
        assert_close(&a.fused, &b.fused, 1e-6);
    }
}
