//! Step pseudo-labels from a teacher model, and the schedule that decides
//! when the teacher is refreshed.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{article_for, Corpus, LabelSource, Sample, SampleOptions, Segment, VideoRecord};
use crate::encoder::{forward_item, ForwardInput, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Which teacher alignment matrix step labels are read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoSource {
    #[default]
    DirectSv,
    Fused,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoConfig {
    /// Expansion threshold relative to the peak.
    pub zeta: f64,
    /// Rows whose peak is below this are discarded.
    pub gamma: f64,
    pub source: PseudoSource,
    pub burn_in_epochs: usize,
    pub refresh_every: usize,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        PseudoConfig {
            zeta: 0.7,
            gamma: 0.65,
            source: PseudoSource::DirectSv,
            burn_in_epochs: 3,
            refresh_every: 3,
        }
    }
}

impl PseudoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.zeta > 0.0 && self.zeta <= 1.0) {
            return Err(Error::Config(format!("zeta = {} must lie in (0, 1]", self.zeta)));
        }
        if !self.gamma.is_finite() {
            return Err(Error::Config("gamma must be finite".into()));
        }
        if self.refresh_every == 0 {
            return Err(Error::Config("refresh_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel {
    pub segment: Option<Segment>,
    pub peak: f64,
    pub kept: bool,
}

/// Peak-expanded segment of `row`: the argmax (lowest index on ties) grown
/// in both directions while the neighbour is `>= zeta * peak`.
pub fn extract_segment(row: &[f64], zeta: f64) -> Result<(Segment, f64)> {
    if row.is_empty() {
        return Err(Error::Validation("cannot extract a segment from an empty row".into()));
    }
    let mut p = 0;
    for (t, &v) in row.iter().enumerate() {
        if v > row[p] {
            p = t;
        }
    }
    let peak = row[p];
    let threshold = zeta * peak;
    let mut start = p;
    while start > 0 && row[start - 1] >= threshold {
        start -= 1;
    }
    let mut end = p;
    while end + 1 < row.len() && row[end + 1] >= threshold {
        end += 1;
    }
    Ok((Segment::new(start, end), peak))
}

/// One label per row of `alignment` (steps × unpadded frames). A row is
/// kept when its peak is at least `gamma`.
pub fn generate_pseudolabels(alignment: &Mat, cfg: &PseudoConfig) -> Vec<PseudoLabel> {
    if alignment.cols() == 0 {
        return (0..alignment.rows())
            .map(|_| PseudoLabel {
                segment: None,
                peak: 0.0,
                kept: false,
            })
            .collect();
    }
    (0..alignment.rows())
        .map(|s| {
            let (segment, peak) = extract_segment(alignment.row(s), cfg.zeta).expect("non-empty row");
            let kept = peak >= cfg.gamma;
            PseudoLabel {
                segment: kept.then_some(segment),
                peak,
                kept,
            }
        })
        .collect()
}

/// Whether the teacher is replaced by the student at the start of `epoch`.
pub fn is_refresh_epoch(epoch: usize, cfg: &PseudoConfig) -> bool {
    epoch >= cfg.burn_in_epochs && (epoch - cfg.burn_in_epochs).is_multiple_of(cfg.refresh_every.max(1))
}

/// Returns the teacher to use from `epoch` on and whether labels must be
/// regenerated from it.
pub fn curriculum_step(
    epoch: usize,
    cfg: &PseudoConfig,
    student: &ModelParams,
    teacher: Option<ModelParams>,
) -> (Option<ModelParams>, bool) {
    if is_refresh_epoch(epoch, cfg) {
        (Some(student.clone()), true)
    } else {
        (teacher, false)
    }
}

/// Pseudo-labels for every video, keyed by video id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoLabelStore {
    labels: BTreeMap<String, Vec<PseudoLabel>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelLine {
    video_id: String,
    step_index: usize,
    start: Option<usize>,
    end: Option<usize>,
    peak: f64,
    kept: bool,
}

impl PseudoLabelStore {
    pub fn insert(&mut self, video_id: String, labels: Vec<PseudoLabel>) {
        self.labels.insert(video_id, labels);
    }

    pub fn get(&self, video_id: &str) -> Option<&[PseudoLabel]> {
        self.labels.get(video_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[PseudoLabel])> {
        self.labels.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Kept rows over all rows; 0 for an empty store.
    pub fn kept_fraction(&self) -> f64 {
        let (kept, total) = self.labels.values().flatten().fold((0usize, 0usize), |(k, n), l| {
            (k + usize::from(l.kept), n + 1)
        });
        if total == 0 {
            0.0
        } else {
            kept as f64 / total as f64
        }
    }

    /// One JSON object per (video, step), videos in id order.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for (video_id, labels) in &self.labels {
            for (step_index, l) in labels.iter().enumerate() {
                let line = LabelLine {
                    video_id: video_id.clone(),
                    step_index,
                    start: l.segment.map(|s| s.start),
                    end: l.segment.map(|s| s.end),
                    peak: l.peak,
                    kept: l.kept,
                };
                serde_json::to_writer(&mut out, &line)?;
                out.push(b'\n');
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut store = PseudoLabelStore::default();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LabelLine =
                serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
            let segment = match (rec.start, rec.end) {
                (Some(s), Some(e)) if s <= e => Some(Segment::new(s, e)),
                (None, None) => None,
                _ => return Err(Error::format(path, format!("line {}: malformed segment", n + 1))),
            };
            if segment.is_some() != rec.kept {
                return Err(Error::format(path, format!("line {}: kept flag disagrees with segment", n + 1)));
            }
            let labels = store.labels.entry(rec.video_id).or_default();
            if rec.step_index != labels.len() {
                return Err(Error::format(path, format!("line {}: step index out of order", n + 1)));
            }
            labels.push(PseudoLabel {
                segment,
                peak: rec.peak,
                kept: rec.kept,
            });
        }
        Ok(store)
    }
}

fn label_corpus(
    corpus: &Corpus,
    assignment: Option<&BTreeMap<String, String>>,
    label_video: impl Fn(&VideoRecord, &Sample) -> Result<Vec<PseudoLabel>> + Sync,
    max_frames: usize,
    narrations: bool,
) -> Result<PseudoLabelStore> {
    let opts = SampleOptions { narrations, steps: true };
    let rows = corpus
        .videos
        .par_iter()
        .map(|video| {
            let article = article_for(corpus, video, assignment);
            let sample = Sample::new(video, article, max_frames, opts, LabelSource::AsrTimestamps)?;
            Ok((video.id.clone(), label_video(video, &sample)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut store = PseudoLabelStore::default();
    for (id, labels) in rows {
        store.insert(id, labels);
    }
    Ok(store)
}

/// Initial labels from a model trained on narrations only: each step text
/// is fed through the narration pathway and its narration-to-video row is
/// used as the step's alignment.
pub fn burn_in_labels(
    corpus: &Corpus,
    initial_teacher: &ModelParams,
    cfg: &PseudoConfig,
    max_frames: usize,
    assignment: Option<&BTreeMap<String, String>>,
) -> Result<PseudoLabelStore> {
    cfg.validate()?;
    let mc = initial_teacher.config();
    if mc.step_dim != mc.narration_dim {
        return Err(Error::Config(format!(
            "narration-only teacher needs step_dim == narration_dim, got {} and {}",
            mc.step_dim, mc.narration_dim
        )));
    }
    let no_steps = Mat::zeros(0, mc.step_dim);
    let max_frames = max_frames.min(mc.max_frames);
    label_corpus(
        corpus,
        assignment,
        |_, s| {
            let frame_mask = vec![true; s.frames.rows()];
            let text_mask = vec![true; s.steps.rows()];
            let input = ForwardInput {
                frames: &s.frames,
                frame_mask: &frame_mask,
                narrations: &s.steps,
                narration_mask: &text_mask,
                steps: &no_steps,
                step_mask: &[],
            };
            let al = forward_item(&input, initial_teacher, mc.xi)?;
            Ok(generate_pseudolabels(&al.nv, cfg))
        },
        max_frames,
        false,
    )
}

/// Labels from a full three-modality teacher, read from the matrix chosen
/// by `cfg.source`.
pub fn teacher_labels(
    corpus: &Corpus,
    teacher: &ModelParams,
    cfg: &PseudoConfig,
    max_frames: usize,
    assignment: Option<&BTreeMap<String, String>>,
) -> Result<PseudoLabelStore> {
    cfg.validate()?;
    let xi = teacher.config().xi;
    let max_frames = max_frames.min(teacher.config().max_frames);
    label_corpus(
        corpus,
        assignment,
        |_, s| {
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
            let al = forward_item(&input, teacher, xi)?;
            let m = match cfg.source {
                PseudoSource::DirectSv => &al.sv,
                PseudoSource::Fused => &al.fused,
            };
            Ok(generate_pseudolabels(m, cfg))
        },
        max_frames,
        true,
    )
}
