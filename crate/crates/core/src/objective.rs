//! Alignment loss and its gradients.
//!
//! For each supervised query row `k` the loss is the negative log of the
//! softmax mass (temperature `eta`, valid frames only) that falls on the
//! row's positive frames. Rows are averaged within a video, videos are
//! averaged within a batch.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corpus::{Batch, BatchItem};
use crate::encoder::{bind_params, record_forward, AlignmentSet, ForwardInput, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub eta: f64,
    pub lambda_nv: f64,
    pub lambda_sv: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            eta: 0.07,
            lambda_nv: 1.0,
            lambda_sv: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::Config(format!("eta = {} must be > 0", self.eta)));
        }
        if !(self.lambda_nv >= 0.0) || !(self.lambda_sv >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub narration: f64,
    pub step: f64,
    /// Supervised narration rows across the batch.
    pub narration_rows: usize,
    /// Supervised step rows across the batch.
    pub step_rows: usize,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Loss value and `dL/dA`.
pub(crate) fn info_nce_with_grad(
    y: &Mat,
    a: &Mat,
    eta: f64,
    frame_mask: &[bool],
    row_supervised: &[bool],
) -> Result<(f64, Mat, usize)> {
    if !(eta > 0.0) {
        return Err(Error::Config(format!("eta = {eta} must be > 0")));
    }
    if y.shape() != a.shape() || frame_mask.len() != a.cols() || row_supervised.len() != a.rows() {
        return Err(Error::Shape(format!(
            "targets {:?}, scores {:?}, frame mask {}, row flags {}",
            y.shape(),
            a.shape(),
            frame_mask.len(),
            row_supervised.len()
        )));
    }
    let mut grad = Mat::zeros(a.rows(), a.cols());
    let rows: Vec<usize> = (0..a.rows()).filter(|&k| row_supervised[k]).collect();
    if rows.is_empty() {
        return Ok((0.0, grad, 0));
    }
    let frames: Vec<usize> = (0..a.cols()).filter(|&t| frame_mask[t]).collect();
    let weight = 1.0 / rows.len() as f64;
    let mut total = 0.0;
    for &k in &rows {
        let ar = a.row(k);
        let yr = y.row(k);
        let positives: Vec<usize> = frames.iter().copied().filter(|&t| yr[t] > 0.5).collect();
        if positives.is_empty() {
            return Err(Error::Contract(format!(
                "supervised row {k} has no positive among valid frames"
            )));
        }
        let all = log_sum_exp(frames.iter().map(|&t| ar[t] / eta));
        let pos = log_sum_exp(positives.iter().map(|&t| ar[t] / eta));
        total += all - pos;
        let g = grad.row_mut(k);
        for &t in &frames {
            g[t] += weight * (ar[t] / eta - all).exp() / eta;
        }
        for &t in &positives {
            g[t] -= weight * (ar[t] / eta - pos).exp() / eta;
        }
    }
    Ok((total * weight, grad, rows.len()))
}

/// Mean over supervised rows of `-log(Σ_pos exp(A/η) / Σ_valid exp(A/η))`.
pub fn info_nce(y: &Mat, a: &Mat, eta: f64, frame_mask: &[bool], row_supervised: &[bool]) -> Result<f64> {
    info_nce_with_grad(y, a, eta, frame_mask, row_supervised).map(|(l, _, _)| l)
}

/// Records the loss on `tape` as a scalar depending on `a`.
pub fn record_info_nce(
    tape: &mut Tape,
    a: Var,
    y: &Mat,
    eta: f64,
    frame_mask: &[bool],
    row_supervised: &[bool],
) -> Result<(Var, usize)> {
    let (loss, grad, k) = info_nce_with_grad(y, tape.value(a), eta, frame_mask, row_supervised)?;
    Ok((tape.precomputed_scalar(a, loss, grad), k))
}

/// Targets for one video.
#[derive(Debug, Clone, Copy)]
pub struct VideoTargets<'a> {
    pub y_nv: &'a Mat,
    pub nv_supervised: &'a [bool],
    pub y_sv: &'a Mat,
    pub sv_supervised: &'a [bool],
}

impl<'a> VideoTargets<'a> {
    pub fn from_item(item: &'a BatchItem) -> Self {
        VideoTargets {
            y_nv: &item.y_nv,
            nv_supervised: &item.nv_supervised,
            y_sv: &item.y_sv,
            sv_supervised: &item.sv_supervised,
        }
    }
}

/// Batch objective from already-computed alignments. Only the
/// narration-video and direct step-video matrices are supervised.
pub fn total_loss(alignments: &[AlignmentSet], targets: &[VideoTargets<'_>], cfg: &LossConfig) -> Result<LossReport> {
    cfg.validate()?;
    if alignments.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} alignment sets for {} target sets",
            alignments.len(),
            targets.len()
        )));
    }
    let mut report = LossReport::default();
    if alignments.is_empty() {
        return Ok(report);
    }
    for (al, y) in alignments.iter().zip(targets) {
        let (nv, _, kn) = info_nce_with_grad(y.y_nv, &al.nv, cfg.eta, &al.frame_mask, y.nv_supervised)?;
        let (sv, _, ks) = info_nce_with_grad(y.y_sv, &al.sv, cfg.eta, &al.frame_mask, y.sv_supervised)?;
        report.narration += nv;
        report.step += sv;
        report.narration_rows += kn;
        report.step_rows += ks;
    }
    finish(&mut report, cfg, alignments.len());
    Ok(report)
}

fn finish(report: &mut LossReport, cfg: &LossConfig, videos: usize) {
    let b = videos as f64;
    report.narration /= b;
    report.step /= b;
    report.total = cfg.lambda_nv * report.narration + cfg.lambda_sv * report.step;
}

/// Gradient of the scalar `loss` with respect to each bound parameter,
/// shaped like `params`.
pub fn gradients(tape: &Tape, loss: Var, pv: &crate::encoder::ParamVars, params: &ModelParams) -> Result<ModelParams> {
    let mut g = tape.backward(loss)?;
    let mut out = params.zeros_like();
    for (slot, &v) in out.tensors_mut().iter_mut().zip(pv.vars()) {
        if let Some(m) = g.take(v) {
            *slot = m;
        }
    }
    Ok(out)
}

struct VideoPass {
    narration: f64,
    step: f64,
    narration_rows: usize,
    step_rows: usize,
    grads: ModelParams,
}

fn video_pass(item: &BatchItem, params: &ModelParams, cfg: &LossConfig, xi: f64, scale: f64) -> Result<VideoPass> {
    let mut tape = Tape::new();
    let pv = bind_params(&mut tape, params);
    let r = record_forward(&mut tape, params, &pv, &ForwardInput::from_item(item), xi)?;
    let (nv, kn) = record_info_nce(&mut tape, r.nv, &item.y_nv, cfg.eta, &item.frame_mask, &item.nv_supervised)?;
    let (sv, ks) = record_info_nce(&mut tape, r.sv, &item.y_sv, cfg.eta, &item.frame_mask, &item.sv_supervised)?;
    let loss = tape.weighted_sum(&[(nv, cfg.lambda_nv * scale), (sv, cfg.lambda_sv * scale)]);
    let grads = gradients(&tape, loss, &pv, params)?;
    Ok(VideoPass {
        narration: tape.value(nv)[(0, 0)],
        step: tape.value(sv)[(0, 0)],
        narration_rows: kn,
        step_rows: ks,
        grads,
    })
}

/// Loss report and exact parameter gradients of the batch objective.
/// Per-video passes may run in parallel; their gradients are summed in
/// batch order so the result does not depend on scheduling.
pub fn loss_and_gradients(
    params: &ModelParams,
    batch: &Batch,
    cfg: &LossConfig,
    xi: f64,
) -> Result<(LossReport, ModelParams)> {
    cfg.validate()?;
    let mut grads = params.zeros_like();
    let mut report = LossReport::default();
    if batch.is_empty() {
        return Ok((report, grads));
    }
    let scale = 1.0 / batch.len() as f64;
    let passes = batch
        .items
        .par_iter()
        .map(|item| video_pass(item, params, cfg, xi, scale))
        .collect::<Result<Vec<_>>>()?;
    for p in passes {
        report.narration += p.narration;
        report.step += p.step;
        report.narration_rows += p.narration_rows;
        report.step_rows += p.step_rows;
        for (acc, g) in grads.tensors_mut().iter_mut().zip(p.grads.tensors()) {
            acc.add_assign(g);
        }
    }
    finish(&mut report, cfg, batch.len());
    Ok((report, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Mat {
        Mat::from_vec(1, v.len(), v.to_vec())
    }

    #[test]
    fn all_positive_row_costs_nothing() {
        let a = row(&[0.3, -0.2, 0.9]);
        let y = row(&[1.0, 1.0, 1.0]);
        assert_eq!(info_nce(&y, &a, 0.07, &[true; 3], &[true]).unwrap(), 0.0);
    }

    #[test]
    fn uniform_scores_give_log_of_frame_count() {
        let a = row(&[0.4; 4]);
        let y = row(&[0.0, 1.0, 0.0, 0.0]);
        let l = info_nce(&y, &a, 0.07, &[true; 4], &[true]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let l = info_nce(&row(&[1.0, 0.0]), &row(&[-0.7, -0.7]), 0.5, &[true; 2], &[true]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn padded_frames_are_ignored() {
        let a = row(&[0.4, 0.4, 50.0]);
        let y = row(&[1.0, 0.0, 0.0]);
        let l = info_nce(&y, &a, 0.07, &[true, true, false], &[true]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn supervised_row_without_positive_is_a_contract_error() {
        let a = row(&[0.1, 0.2]);
        let y = row(&[0.0, 0.0]);
        assert!(matches!(
            info_nce(&y, &a, 0.07, &[true; 2], &[true]),
            Err(Error::Contract(_))
        ));
        assert_eq!(info_nce(&y, &a, 0.07, &[true; 2], &[false]).unwrap(), 0.0);
    }

    #[test]
    fn unsupervised_rows_leave_k_out() {
        let a = Mat::from_rows(&[vec![0.5, 0.5], vec![0.9, 0.1]]);
        let y = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let l = info_nce(&y, &a, 1.0, &[true; 2], &[true, false]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn raising_a_positive_score_never_increases_loss() {
        let a = Mat::from_rows(&[vec![0.2, -0.1, 0.5, 0.3]]);
        let y = Mat::from_rows(&[vec![0.0, 1.0, 1.0, 0.0]]);
        let base = info_nce(&y, &a, 0.07, &[true; 4], &[true]).unwrap();
        for t in [1, 2] {
            let mut b = a.clone();
            b[(0, t)] += 1e-3;
            assert!(info_nce(&y, &b, 0.07, &[true; 4], &[true]).unwrap() <= base);
        }
    }
}
