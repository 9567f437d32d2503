//! Padded mini-batches with validity masks and alignment targets.

use std::collections::BTreeMap;

use super::synth::seeded_shuffle;
use super::{Article, Corpus, VideoRecord};
use crate::error::{Error, Result};
use crate::pseudolabel::PseudoLabelStore;
use crate::tensor::Mat;

/// Where step targets come from. Narration targets always come from the
/// ASR spans.
#[derive(Debug, Clone, Copy)]
pub enum LabelSource<'a> {
    /// Narration targets only; every step row is unsupervised.
    AsrTimestamps,
    ProvidedPseudo(&'a PseudoLabelStore),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleOptions {
    pub narrations: bool,
    pub steps: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            narrations: true,
            steps: true,
        }
    }
}

/// One unpadded training/evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub video_id: String,
    pub frames: Mat,
    pub narrations: Mat,
    /// Index into the video's narration list for each narration row kept.
    pub narration_index: Vec<usize>,
    pub steps: Mat,
    pub y_nv: Mat,
    pub nv_supervised: Vec<bool>,
    pub y_sv: Mat,
    pub sv_supervised: Vec<bool>,
}

impl Sample {
    /// Truncates the video to `max_frames` and rasterizes targets. Narrations
    /// whose span falls entirely past the cut are dropped.
    pub fn new(
        video: &VideoRecord,
        article: Option<&Article>,
        max_frames: usize,
        opts: SampleOptions,
        labels: LabelSource<'_>,
    ) -> Result<Sample> {
        let t = video.num_frames().min(max_frames);
        let frames = video.frame_features.to_mat_rows(t);

        let mut narration_index = Vec::new();
        let mut nv_rows = Vec::new();
        if opts.narrations {
            for (n, span) in video.narration_spans.iter().enumerate() {
                if let Some(clipped) = span.clip(t) {
                    narration_index.push(n);
                    let mut row = vec![0.0; t];
                    row[clipped.start..=clipped.end].fill(1.0);
                    nv_rows.push(row);
                }
            }
        }
        let dn = video.narration_features.cols();
        let mut narrations = Mat::zeros(narration_index.len(), dn);
        for (r, &n) in narration_index.iter().enumerate() {
            for (dst, &src) in narrations.row_mut(r).iter_mut().zip(video.narration_features.row(n)) {
                *dst = f64::from(src);
            }
        }
        let y_nv = if nv_rows.is_empty() {
            Mat::zeros(0, t)
        } else {
            Mat::from_rows(&nv_rows)
        };
        let nv_supervised = vec![true; narration_index.len()];

        let (steps, y_sv, sv_supervised) = if opts.steps {
            let article = article.ok_or_else(|| {
                Error::Validation(format!("video `{}` has no article to draw steps from", video.id))
            })?;
            let s = article.num_steps();
            let mut y = Mat::zeros(s, t);
            let mut sup = vec![false; s];
            if let LabelSource::ProvidedPseudo(store) = labels {
                if let Some(set) = store.get(&video.id) {
                    for (step, label) in set.iter().enumerate().take(s) {
                        if let Some(seg) = label.segment.filter(|_| label.kept).and_then(|g| g.clip(t)) {
                            y.row_mut(step)[seg.start..=seg.end].fill(1.0);
                            sup[step] = true;
                        }
                    }
                }
            }
            (article.step_features.to_mat(), y, sup)
        } else {
            let ds = article.map_or(1, |a| a.step_features.cols());
            (Mat::zeros(0, ds), Mat::zeros(0, t), Vec::new())
        };

        Ok(Sample {
            video_id: video.id.clone(),
            frames,
            narrations,
            narration_index,
            steps,
            y_nv,
            nv_supervised,
            y_sv,
            sv_supervised,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }
}

/// A [`Sample`] padded to the batch maxima.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub video_id: String,
    pub frames: Mat,
    pub frame_mask: Vec<bool>,
    pub narrations: Mat,
    pub narration_mask: Vec<bool>,
    pub narration_index: Vec<usize>,
    pub steps: Mat,
    pub step_mask: Vec<bool>,
    pub y_nv: Mat,
    pub nv_supervised: Vec<bool>,
    pub y_sv: Mat,
    pub sv_supervised: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    pub max_frames: usize,
    pub max_narrations: usize,
    pub max_steps: usize,
}

fn pad_rows(m: &Mat, rows: usize) -> Mat {
    let mut out = Mat::zeros(rows, m.cols());
    out.as_mut_slice()[..m.len()].copy_from_slice(m.as_slice());
    out
}

fn pad(m: &Mat, rows: usize, cols: usize) -> Mat {
    let mut out = Mat::zeros(rows, cols);
    for i in 0..m.rows() {
        out.row_mut(i)[..m.cols()].copy_from_slice(m.row(i));
    }
    out
}

fn mask(valid: usize, total: usize) -> Vec<bool> {
    (0..total).map(|i| i < valid).collect()
}

impl Batch {
    pub fn collate(samples: Vec<Sample>) -> Batch {
        let t_max = samples.iter().map(|s| s.frames.rows()).max().unwrap_or(0);
        let n_max = samples.iter().map(|s| s.narrations.rows()).max().unwrap_or(0);
        let s_max = samples.iter().map(|s| s.steps.rows()).max().unwrap_or(0);
        let items = samples
            .into_iter()
            .map(|s| {
                let (t, n, k) = (s.frames.rows(), s.narrations.rows(), s.steps.rows());
                let mut nv_supervised = s.nv_supervised;
                nv_supervised.resize(n_max, false);
                let mut sv_supervised = s.sv_supervised;
                sv_supervised.resize(s_max, false);
                BatchItem {
                    video_id: s.video_id,
                    frames: pad_rows(&s.frames, t_max),
                    frame_mask: mask(t, t_max),
                    narrations: pad_rows(&s.narrations, n_max),
                    narration_mask: mask(n, n_max),
                    narration_index: s.narration_index,
                    steps: pad_rows(&s.steps, s_max),
                    step_mask: mask(k, s_max),
                    y_nv: pad(&s.y_nv, n_max, t_max),
                    nv_supervised,
                    y_sv: pad(&s.y_sv, s_max, t_max),
                    sv_supervised,
                }
            })
            .collect();
        Batch {
            items,
            max_frames: t_max,
            max_narrations: n_max,
            max_steps: s_max,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub max_frames: usize,
    /// `None` keeps corpus order.
    pub shuffle_seed: Option<u64>,
    pub options: SampleOptions,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            batch_size: 8,
            max_frames: 1024,
            shuffle_seed: None,
            options: SampleOptions::default(),
        }
    }
}

pub struct BatchIter<'a> {
    corpus: &'a Corpus,
    articles: Vec<Option<&'a Article>>,
    order: Vec<usize>,
    pos: usize,
    cfg: BatchConfig,
    labels: LabelSource<'a>,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.cfg.batch_size).min(self.order.len());
        let samples = self.order[self.pos..end]
            .iter()
            .map(|&i| {
                Sample::new(
                    &self.corpus.videos[i],
                    self.articles[i],
                    self.cfg.max_frames,
                    self.cfg.options,
                    self.labels,
                )
                .expect("article availability checked when the iterator was built")
            })
            .collect();
        self.pos = end;
        Some(Batch::collate(samples))
    }
}

impl BatchIter<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.cfg.batch_size)
    }
}

/// Resolves the article for a video: `assignment` first, then its metadata.
pub(crate) fn article_for<'a>(
    corpus: &'a Corpus,
    video: &VideoRecord,
    assignment: Option<&BTreeMap<String, String>>,
) -> Option<&'a Article> {
    let task = assignment
        .and_then(|a| a.get(&video.id))
        .or(video.task_id.as_ref())?;
    corpus.articles.get(task)
}

/// Iterates over the corpus in batches of `cfg.batch_size` videos.
pub fn batch_iter<'a>(
    corpus: &'a Corpus,
    cfg: BatchConfig,
    labels: LabelSource<'a>,
    assignment: Option<&BTreeMap<String, String>>,
) -> Result<BatchIter<'a>> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let articles: Vec<Option<&Article>> = corpus
        .videos
        .iter()
        .map(|v| article_for(corpus, v, assignment))
        .collect();
    if cfg.options.steps {
        let missing: Vec<&str> = corpus
            .videos
            .iter()
            .zip(&articles)
            .filter(|(_, a)| a.is_none())
            .map(|(v, _)| v.id.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Validation(format!("no article for videos {missing:?}")));
        }
    }
    let mut order: Vec<usize> = (0..corpus.videos.len()).collect();
    if let Some(seed) = cfg.shuffle_seed {
        seeded_shuffle(&mut order, seed);
    }
    Ok(BatchIter {
        corpus,
        articles,
        order,
        pos: 0,
        cfg,
        labels,
    })
}
