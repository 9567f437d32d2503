//! Corpus-level evaluation of a trained model.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    alignability_auc, blob_detect, narration_r_at_1, recall_at_k_iou, step_r_at_1, MetricReport, ScoredSegment,
};
use crate::corpus::{article_for, Corpus, LabelSource, Sample, SampleOptions, Segment, VideoRecord};
use crate::encoder::{cosine_alignment, forward_item, unimodal_encode, AlignmentSet, ForwardInput, Modality, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_frames: usize,
    pub recall_k: Vec<usize>,
    pub iou_thresholds: Vec<f64>,
    /// Local maxima below this are not reported as detections.
    pub blob_min_score: f64,
    pub blob_zeta: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_frames: 1024,
            recall_k: vec![1, 5],
            iou_thresholds: vec![0.3, 0.5, 0.7],
            blob_min_score: 0.0,
            blob_zeta: 0.7,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_frames == 0 {
            return Err(Error::Config("eval max_frames must be >= 1".into()));
        }
        if self.recall_k.contains(&0) {
            return Err(Error::Config("recall K values must be >= 1".into()));
        }
        if self.iou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("IoU thresholds must lie in [0, 1]".into()));
        }
        if !(self.blob_zeta > 0.0 && self.blob_zeta <= 1.0) {
            return Err(Error::Config("blob_zeta must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Which step-to-video matrix a protocol reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMatrix {
    Direct,
    Indirect,
    Fused,
}

impl StepMatrix {
    pub fn pick<'a>(&self, al: &'a AlignmentSet) -> Result<&'a Mat> {
        match self {
            StepMatrix::Direct => Ok(&al.sv),
            StepMatrix::Fused => Ok(&al.fused),
            StepMatrix::Indirect => al
                .snv
                .as_ref()
                .ok_or_else(|| Error::Protocol("indirect alignment needs narrations in the input".into())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StepMatrix::Direct => "direct",
            StepMatrix::Indirect => "indirect",
            StepMatrix::Fused => "fused",
        }
    }
}

/// Model output for one video, with padding removed.
#[derive(Debug, Clone)]
pub struct VideoAlignment {
    pub video_id: String,
    /// Frames seen by the model after truncation.
    pub frames: usize,
    /// Original narration index of each narration row.
    pub narration_index: Vec<usize>,
    pub alignments: AlignmentSet,
}

/// Runs `params` on every video. Steps come from `assignment` (or each
/// video's own task); narrations are withheld when `use_narrations` is
/// false.
pub fn align_corpus(
    corpus: &Corpus,
    params: &ModelParams,
    assignment: Option<&BTreeMap<String, String>>,
    max_frames: usize,
    use_narrations: bool,
) -> Result<Vec<VideoAlignment>> {
    let opts = SampleOptions {
        narrations: use_narrations,
        steps: true,
    };
    let xi = params.config().xi;
    let max_frames = max_frames.min(params.config().max_frames);
    corpus
        .videos
        .par_iter()
        .map(|video| {
            let article = article_for(corpus, video, assignment);
            let s = Sample::new(video, article, max_frames, opts, LabelSource::AsrTimestamps)?;
            let frame_mask = vec![true; s.frames.rows()];
            let narration_mask = vec![true; s.narrations.rows()];
            let step_mask = vec![true; s.steps.rows()];
            let input = ForwardInput {
                frames: &s.frames,
                frame_mask: &frame_mask,
                narrations: &s.narrations,
                narration_mask: &narration_mask,
                steps: &s.steps,
                step_mask: &step_mask,
            };
            Ok(VideoAlignment {
                video_id: video.id.clone(),
                frames: s.frames.rows(),
                narration_index: s.narration_index,
                alignments: forward_item(&input, params, xi)?,
            })
        })
        .collect()
}

fn lookup<'a>(corpus: &'a Corpus, id: &str) -> Result<&'a VideoRecord> {
    corpus
        .video(id)
        .ok_or_else(|| Error::Validation(format!("aligned video `{id}` is not in the corpus")))
}

/// Ground-truth segments clipped to the frames the model saw; steps that
/// fall entirely past the cut are dropped.
fn clipped_gt(video: &VideoRecord, frames: usize) -> Result<BTreeMap<usize, Vec<Segment>>> {
    let gt = video
        .gt_step_segments
        .as_ref()
        .ok_or_else(|| Error::Protocol(format!("video `{}` has no ground-truth step segments", video.id)))?;
    Ok(gt
        .iter()
        .map(|(&s, segs)| (s, segs.iter().filter_map(|g| g.clip(frames)).collect::<Vec<_>>()))
        .filter(|(_, segs)| !segs.is_empty())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecall {
    /// Pooled over every ground-truth step.
    pub micro: MetricReport,
    /// Mean over videos of the per-video recall.
    pub macro_avg: f64,
}

pub fn corpus_step_r_at_1(corpus: &Corpus, aligned: &[VideoAlignment], matrix: StepMatrix) -> Result<StepRecall> {
    let mut micro = MetricReport::new(format!("step_r1_{}", matrix.name()), 0, 0);
    let mut per_video = Vec::new();
    for va in aligned {
        let video = lookup(corpus, &va.video_id)?;
        let gt = clipped_gt(video, va.frames)?;
        let r = step_r_at_1(matrix.pick(&va.alignments)?, &gt)?;
        if r.total > 0 {
            per_video.push(r.value);
        }
        micro.merge(&r);
    }
    if micro.total == 0 {
        return Err(Error::Protocol("no ground-truth steps to evaluate".into()));
    }
    let macro_avg = per_video.iter().sum::<f64>() / per_video.len() as f64;
    Ok(StepRecall { micro, macro_avg })
}

/// Blob detections for every step row of `alignment`.
pub fn detect_segments(alignment: &Mat, cfg: &EvalConfig) -> BTreeMap<usize, Vec<ScoredSegment>> {
    (0..alignment.rows())
        .map(|s| (s, blob_detect(alignment.row(s), cfg.blob_min_score, cfg.blob_zeta)))
        .collect()
}

/// Recall@K at each IoU threshold, pooled over videos; reports are ordered
/// by K, then threshold.
pub fn corpus_article_recall(
    corpus: &Corpus,
    aligned: &[VideoAlignment],
    matrix: StepMatrix,
    cfg: &EvalConfig,
) -> Result<Vec<MetricReport>> {
    cfg.validate()?;
    let mut pooled: Vec<MetricReport> = Vec::new();
    for va in aligned {
        let video = lookup(corpus, &va.video_id)?;
        let gt = clipped_gt(video, va.frames)?;
        let dets = detect_segments(matrix.pick(&va.alignments)?, cfg);
        let mut reports = Vec::new();
        for &k in &cfg.recall_k {
            reports.extend(recall_at_k_iou(&dets, &gt, k, &cfg.iou_thresholds)?);
        }
        if pooled.is_empty() {
            pooled = reports;
        } else {
            for (p, r) in pooled.iter_mut().zip(&reports) {
                p.merge(r);
            }
        }
    }
    for p in &mut pooled {
        p.metric = format!("article_recall_{}", matrix.name());
    }
    Ok(pooled)
}

fn alignment_spans(video: &VideoRecord) -> Result<&[Option<Segment>]> {
    video
        .narration_alignment
        .as_deref()
        .ok_or_else(|| Error::Protocol(format!("video `{}` has no narration alignment annotations", video.id)))
}

/// Narration R@1 over alignable narrations. `aligned` must have been
/// produced with narrations in the input.
pub fn corpus_narration_r_at_1(corpus: &Corpus, aligned: &[VideoAlignment]) -> Result<MetricReport> {
    let mut total = MetricReport::new("narration_r1", 0, 0);
    for va in aligned {
        let video = lookup(corpus, &va.video_id)?;
        let spans = alignment_spans(video)?;
        let rows: Vec<Option<Segment>> = va
            .narration_index
            .iter()
            .map(|&n| spans.get(n).copied().flatten().and_then(|s| s.clip(va.frames)))
            .collect();
        total.merge(&narration_r_at_1(&va.alignments.nv, &rows)?);
    }
    if total.total == 0 {
        return Err(Error::Protocol("no alignable narrations to evaluate".into()));
    }
    Ok(total)
}

/// Per narration, the best cosine similarity over frames between the
/// outputs of the single-modality encoders.
pub fn alignability_scores(frames: &Mat, narrations: &Mat, params: &ModelParams) -> Result<Vec<f64>> {
    if narrations.rows() == 0 {
        return Ok(Vec::new());
    }
    let hv = unimodal_encode(frames, Modality::Video, params)?;
    let hn = unimodal_encode(narrations, Modality::Narration, params)?;
    let sim = cosine_alignment(&hn, &hv);
    Ok((0..sim.rows())
        .map(|n| sim.row(n).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// ROC-AUC of [`alignability_scores`] against the alignable flags, pooled
/// over the corpus.
pub fn corpus_alignability_auc(corpus: &Corpus, params: &ModelParams, max_frames: usize) -> Result<f64> {
    let opts = SampleOptions {
        narrations: true,
        steps: false,
    };
    let max_frames = max_frames.min(params.config().max_frames);
    let per_video = corpus
        .videos
        .par_iter()
        .map(|video| {
            let spans = alignment_spans(video)?;
            let s = Sample::new(video, None, max_frames, opts, LabelSource::AsrTimestamps)?;
            let scores = alignability_scores(&s.frames, &s.narrations, params)?;
            let t = s.frames.rows();
            let labels: Vec<bool> = s
                .narration_index
                .iter()
                .map(|&n| spans.get(n).copied().flatten().and_then(|g| g.clip(t)).is_some())
                .collect();
            Ok((scores, labels))
        })
        .collect::<Result<Vec<_>>>()?;
    let (scores, labels): (Vec<f64>, Vec<bool>) = per_video
        .into_iter()
        .flat_map(|(s, l)| s.into_iter().zip(l))
        .unzip();
    alignability_auc(&scores, &labels)
}
