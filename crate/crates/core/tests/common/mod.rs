//! Reference implementations used to check the library. They favour
//! plain loops and exhaustive search over speed.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stepground::corpus::{Batch, BatchItem, Segment};
use stepground::encoder::{forward, ModelConfig, ModelParams};
use stepground::evalkit::ScoredSegment;
use stepground::objective::{loss_and_gradients, total_loss, LossConfig, VideoTargets};
use stepground::Mat;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Direct ratio-of-sums form of the loss, no max shift.
pub fn info_nce_oracle(y: &Mat, a: &Mat, eta: f64, frame_mask: &[bool], rows: &[bool]) -> f64 {
    let mut per_row = Vec::new();
    for k in 0..a.rows() {
        if !rows[k] {
            continue;
        }
        let valid = || (0..a.cols()).filter(|&t| frame_mask[t]);
        let num = compensated_sum(valid().filter(|&t| y[(k, t)] > 0.5).map(|t| (a[(k, t)] / eta).exp()));
        let den = compensated_sum(valid().map(|t| (a[(k, t)] / eta).exp()));
        per_row.push(-(num / den).ln());
    }
    if per_row.is_empty() {
        0.0
    } else {
        compensated_sum(per_row.iter().copied()) / per_row.len() as f64
    }
}

/// Argmax by full scan, then the longest run around it whose values all
/// clear the threshold, found by trying every interval.
pub fn extract_oracle(row: &[f64], zeta: f64) -> (Segment, f64) {
    let peak = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let p = row.iter().position(|&v| v == peak).unwrap();
    let th = zeta * peak;
    let mut best = Segment::new(p, p);
    for s in 0..=p {
        for e in p..row.len() {
            if row[s..=e].iter().all(|&v| v >= th) && e - s > best.end - best.start {
                best = Segment::new(s, e);
            }
        }
    }
    (best, peak)
}

pub fn kept_oracle(peak: f64, gamma: f64) -> bool {
    peak >= gamma
}

/// Softmax over valid narrations, then the weighted sum of rows.
pub fn indirect_oracle(sn: &Mat, nv: &Mat, xi: f64, mask: &[bool]) -> Mat {
    let mut out = Mat::zeros(sn.rows(), nv.cols());
    for s in 0..sn.rows() {
        let m = (0..sn.cols()).filter(|&n| mask[n]).map(|n| sn[(s, n)]).fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = (0..sn.cols())
            .map(|n| if mask[n] { ((sn[(s, n)] - m) / xi).exp() } else { 0.0 })
            .collect();
        let z: f64 = w.iter().sum();
        for t in 0..nv.cols() {
            out[(s, t)] = (0..sn.cols()).map(|n| w[n] / z * nv[(n, t)]).sum();
        }
    }
    out
}

fn frames(s: Segment) -> BTreeSet<usize> {
    (s.start..=s.end).collect()
}

pub fn iou_oracle(a: Segment, b: Segment) -> f64 {
    let (fa, fb) = (frames(a), frames(b));
    fa.intersection(&fb).count() as f64 / fa.union(&fb).count() as f64
}

fn first_argmax(row: &[f64]) -> usize {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    row.iter().position(|&v| v == m).unwrap()
}

pub fn step_r1_oracle(a: &Mat, gt: &BTreeMap<usize, Vec<Segment>>) -> (usize, usize) {
    let mut hits = 0;
    let mut total = 0;
    for (&s, segs) in gt {
        if segs.is_empty() {
            continue;
        }
        total += 1;
        let t = first_argmax(a.row(s));
        if segs.iter().any(|g| frames(*g).contains(&t)) {
            hits += 1;
        }
    }
    (hits, total)
}

pub fn recall_oracle(
    dets: &BTreeMap<usize, Vec<ScoredSegment>>,
    gt: &BTreeMap<usize, Vec<Segment>>,
    k: usize,
    theta: f64,
) -> (usize, usize) {
    let mut hits = 0;
    let mut total = 0;
    for (s, segs) in gt {
        if segs.is_empty() {
            continue;
        }
        total += 1;
        let mut d = dets.get(s).cloned().unwrap_or_default();
        d.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let mut hit = false;
        for det in d.iter().take(k) {
            for g in segs {
                if iou_oracle(det.segment, *g) >= theta {
                    hit = true;
                }
            }
        }
        hits += usize::from(hit);
    }
    (hits, total)
}

pub fn narration_oracle(nv: &Mat, spans: &[Option<Segment>]) -> (usize, usize) {
    let mut hits = 0;
    let mut total = 0;
    for (n, span) in spans.iter().enumerate() {
        if let Some(s) = span {
            total += 1;
            if frames(*s).contains(&first_argmax(nv.row(n))) {
                hits += 1;
            }
        }
    }
    (hits, total)
}

/// Pairwise count over every (positive, negative) pair.
pub fn auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// The small model used for gradient checks: D=8, one layer, two heads.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        video_dim: 5,
        narration_dim: 4,
        step_dim: 4,
        d_model: 8,
        layers: 1,
        heads: 2,
        ffn_mult: 2,
        max_frames: 8,
        max_narrations: 4,
        max_steps: 4,
        ..ModelConfig::default()
    }
}

fn random_segment(rng: &mut ChaCha8Rng, t: usize) -> Segment {
    let a = rng.random_range(0..t);
    let b = rng.random_range(0..t);
    Segment::new(a.min(b), a.max(b))
}

fn labels(rng: &mut ChaCha8Rng, rows: usize, t: usize) -> Mat {
    let mut y = Mat::zeros(rows, t);
    for r in 0..rows {
        let s = random_segment(rng, t);
        y.row_mut(r)[s.start..=s.end].fill(1.0);
    }
    y
}

/// One-video batch with T=6 frames, N=2 narrations and S=2 steps.
pub fn tiny_instance(seed: u64) -> (ModelParams, Batch) {
    let cfg = tiny_config();
    let params = ModelParams::init(&cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let (t, n, s) = (6, 2, 2);
    let item = BatchItem {
        video_id: "v".into(),
        frames: random_mat(&mut r, t, cfg.video_dim, -1.0, 1.0),
        frame_mask: vec![true; t],
        narrations: random_mat(&mut r, n, cfg.narration_dim, -1.0, 1.0),
        narration_mask: vec![true; n],
        narration_index: (0..n).collect(),
        steps: random_mat(&mut r, s, cfg.step_dim, -1.0, 1.0),
        step_mask: vec![true; s],
        y_nv: labels(&mut r, n, t),
        nv_supervised: vec![true; n],
        y_sv: labels(&mut r, s, t),
        sv_supervised: vec![true; s],
    };
    let batch = Batch {
        items: vec![item],
        max_frames: t,
        max_narrations: n,
        max_steps: s,
    };
    (params, batch)
}

pub fn batch_loss(params: &ModelParams, batch: &Batch, cfg: &LossConfig) -> f64 {
    let al = forward(batch, params, params.config().xi).unwrap();
    let targets: Vec<VideoTargets<'_>> = batch.items.iter().map(VideoTargets::from_item).collect();
    total_loss(&al, &targets, cfg).unwrap().total
}

/// Worst relative error between analytic and central-difference gradients
/// over every scalar whose gradient exceeds `floor`, and how many were
/// compared.
pub fn gradient_check(params: &ModelParams, batch: &Batch, cfg: &LossConfig, h: f64, floor: f64) -> (f64, usize) {
    let (_, grads) = loss_and_gradients(params, batch, cfg, params.config().xi).unwrap();
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    let mut p = params.clone();
    for ti in 0..p.tensors().len() {
        for i in 0..p.tensors()[ti].len() {
            let orig = p.tensors()[ti].as_slice()[i];
            p.tensors_mut()[ti].as_mut_slice()[i] = orig + h;
            let up = batch_loss(&p, batch, cfg);
            p.tensors_mut()[ti].as_mut_slice()[i] = orig - h;
            let down = batch_loss(&p, batch, cfg);
            p.tensors_mut()[ti].as_mut_slice()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.tensors()[ti].as_slice()[i];
            if analytic.abs() > floor {
                compared += 1;
                worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()));
            }
        }
    }
    (worst, compared)
}
