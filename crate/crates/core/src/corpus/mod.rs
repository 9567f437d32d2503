//! Videos, articles and the corpus that ties them together.

mod batch;
mod io;
mod synth;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub use batch::{batch_iter, Batch, BatchConfig, BatchItem, BatchIter, LabelSource, Sample, SampleOptions};
pub use io::{read_corpus, read_feature_file, write_corpus, write_feature_file, FEATURE_MAGIC, FEATURE_VERSION};
pub use synth::{generate_synthetic, SynthConfig, MIN_SEGMENT_FRAMES};
pub(crate) use batch::article_for;
pub(crate) use io::parse_header as io_parse_header;
pub(crate) use synth::mix_seed;

/// Row-major `f32` feature matrix as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if cols == 0 {
            return Err(Error::Shape("feature matrix needs at least one column".into()));
        }
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values do not fill a {rows}x{cols} feature matrix",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("feature matrix has non-finite values".into()));
        }
        Ok(FeatureMatrix { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    /// First `rows` rows widened to `f64`.
    pub fn to_mat_rows(&self, rows: usize) -> Mat {
        let rows = rows.min(self.rows);
        Mat::from_vec(
            rows,
            self.cols,
            self.values[..rows * self.cols].iter().map(|&v| f64::from(v)).collect(),
        )
    }

    pub fn to_mat(&self) -> Mat {
        self.to_mat_rows(self.rows)
    }

    pub fn from_mat(m: &Mat) -> Result<Self> {
        FeatureMatrix::new(m.rows(), m.cols(), m.as_slice().iter().map(|&v| v as f32).collect())
    }
}

/// Inclusive frame range `[start, end]`; one frame per second.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

#[allow(clippy::len_without_is_empty)]
impl Segment {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Segment { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn contains(&self, t: usize) -> bool {
        self.start <= t && t <= self.end
    }

    /// Intersection with `[0, frames)`; `None` when nothing remains.
    pub fn clip(&self, frames: usize) -> Option<Segment> {
        if frames == 0 || self.start >= frames {
            return None;
        }
        Some(Segment::new(self.start, self.end.min(frames - 1)))
    }

    pub fn overlaps(&self, other: &Segment) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub frame_features: FeatureMatrix,
    pub narration_texts: Vec<String>,
    pub narration_features: FeatureMatrix,
    /// ASR timestamps, possibly misaligned with what is shown.
    pub narration_spans: Vec<Segment>,
    pub task_id: Option<String>,
    pub gt_step_segments: Option<BTreeMap<usize, Vec<Segment>>>,
    /// True visual extent of each narration, `None` for narrations that are
    /// not alignable with the video.
    pub narration_alignment: Option<Vec<Option<Segment>>>,
}

impl VideoRecord {
    pub fn num_frames(&self) -> usize {
        self.frame_features.rows()
    }

    pub fn num_narrations(&self) -> usize {
        self.narration_texts.len()
    }

    fn validate(&self, dims: Dims) -> Result<()> {
        let t = self.num_frames();
        let fail = |msg: String| Err(Error::Validation(format!("video `{}`: {msg}", self.id)));
        if self.frame_features.cols() != dims.video {
            return fail(format!(
                "frame features have {} columns, corpus expects {}",
                self.frame_features.cols(),
                dims.video
            ));
        }
        let n = self.narration_texts.len();
        if self.narration_features.rows() != n {
            return fail(format!(
                "{} narration texts but {} narration feature rows",
                n,
                self.narration_features.rows()
            ));
        }
        if n > 0 && self.narration_features.cols() != dims.narration {
            return fail(format!(
                "narration features have {} columns, corpus expects {}",
                self.narration_features.cols(),
                dims.narration
            ));
        }
        if self.narration_spans.len() != n {
            return fail(format!("{} narrations but {} spans", n, self.narration_spans.len()));
        }
        let in_range = |s: &Segment| s.start <= s.end && s.end < t;
        if let Some(bad) = self.narration_spans.iter().find(|s| !in_range(s)) {
            return fail(format!("narration span {bad:?} outside [0, {t})"));
        }
        if let Some(gt) = &self.gt_step_segments {
            for (step, segs) in gt {
                if let Some(bad) = segs.iter().find(|s| !in_range(s)) {
                    return fail(format!("step {step} segment {bad:?} outside [0, {t})"));
                }
            }
        }
        if let Some(al) = &self.narration_alignment {
            if al.len() != n {
                return fail(format!("{} narrations but {} alignment entries", n, al.len()));
            }
            if let Some(bad) = al.iter().flatten().find(|s| !in_range(s)) {
                return fail(format!("narration alignment {bad:?} outside [0, {t})"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Article {
    pub task_id: String,
    pub title: String,
    pub step_texts: Vec<String>,
    pub step_features: FeatureMatrix,
}

impl Article {
    pub fn num_steps(&self) -> usize {
        self.step_texts.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub video: usize,
    pub narration: usize,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub videos: Vec<VideoRecord>,
    pub articles: BTreeMap<String, Article>,
    pub dims: Dims,
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        for (key, article) in &self.articles {
            if &article.task_id != key {
                return Err(Error::Validation(format!(
                    "article keyed `{key}` carries task id `{}`",
                    article.task_id
                )));
            }
            if article.step_texts.is_empty() {
                return Err(Error::Validation(format!("article `{key}` has no steps")));
            }
            if article.step_features.rows() != article.step_texts.len()
                || article.step_features.cols() != self.dims.step
            {
                return Err(Error::Validation(format!(
                    "article `{key}` step features are {}x{}, expected {}x{}",
                    article.step_features.rows(),
                    article.step_features.cols(),
                    article.step_texts.len(),
                    self.dims.step
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for v in &self.videos {
            if !seen.insert(v.id.as_str()) {
                return Err(Error::Validation(format!("duplicate video id `{}`", v.id)));
            }
            v.validate(self.dims)?;
            if let Some(task) = &v.task_id {
                let Some(article) = self.articles.get(task) else {
                    return Err(Error::Validation(format!(
                        "video `{}` references unknown task `{task}`",
                        v.id
                    )));
                };
                if let Some(gt) = &v.gt_step_segments {
                    if let Some(&step) = gt.keys().find(|&&s| s >= article.num_steps()) {
                        return Err(Error::Validation(format!(
                            "video `{}` has ground truth for step {step} but `{task}` has {} steps",
                            v.id,
                            article.num_steps()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn video(&self, id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.id == id)
    }

    /// Splits off every `every`-th video (by position) as a held-out set.
    /// `every == 0` keeps everything in the first part.
    pub fn split_holdout(&self, every: usize) -> (Corpus, Corpus) {
        let (mut train, mut held) = (Vec::new(), Vec::new());
        for (i, v) in self.videos.iter().enumerate() {
            if every > 0 && i % every == every - 1 {
                held.push(v.clone());
            } else {
                train.push(v.clone());
            }
        }
        let make = |videos| Corpus {
            videos,
            articles: self.articles.clone(),
            dims: self.dims,
        };
        (make(train), make(held))
    }

    /// Mean over ground-truth steps of the fraction of frames the step covers.
    pub fn mean_step_coverage(&self) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for v in &self.videos {
            let t = v.num_frames();
            for segs in v.gt_step_segments.iter().flat_map(|m| m.values()) {
                if segs.is_empty() || t == 0 {
                    continue;
                }
                let covered: BTreeSet<usize> = segs.iter().flat_map(|s| s.start..=s.end).collect();
                total += covered.len() as f64 / t as f64;
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }
}
