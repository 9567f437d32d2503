//! Synthetic procedural corpora with known ground truth.
//!
//! Each task owns a set of unit-norm latent step vectors. Videos realize a
//! subset of the steps as contiguous frame segments separated by background
//! frames. Frames, narrations and article steps are produced by three fixed
//! linear maps of the step latents, so every modality carries the same
//! underlying signal in a different basis.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Article, Corpus, Dims, FeatureMatrix, Segment, VideoRecord};
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Shortest segment a realized step may occupy.
pub const MIN_SEGMENT_FRAMES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_tasks: usize,
    /// Article length; with `min_steps_per_task` set, the largest article.
    pub steps_per_task: usize,
    pub min_steps_per_task: Option<usize>,
    pub videos_per_task: usize,
    pub frames_range: (usize, usize),
    pub dims: Dims,
    pub latent_dim: usize,
    pub noise_std: f64,
    pub p_miss_step: f64,
    pub p_swap_adjacent: f64,
    pub p_distract_narration: f64,
    /// How far the step-feature map departs from the narration map
    /// (0 = same text space, larger = less shared).
    pub text_map_divergence: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_tasks: 4,
            steps_per_task: 6,
            min_steps_per_task: Some(4),
            videos_per_task: 25,
            frames_range: (64, 128),
            dims: Dims {
                video: 32,
                narration: 24,
                step: 24,
            },
            latent_dim: 16,
            noise_std: 0.1,
            p_miss_step: 0.3,
            p_swap_adjacent: 0.1,
            p_distract_narration: 0.2,
            text_map_divergence: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {p} is not a probability")))
            }
        };
        prob("p_miss_step", self.p_miss_step)?;
        prob("p_swap_adjacent", self.p_swap_adjacent)?;
        prob("p_distract_narration", self.p_distract_narration)?;
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config(format!("noise_std = {} must be >= 0", self.noise_std)));
        }
        if !(self.text_map_divergence >= 0.0) {
            return Err(Error::Config("text_map_divergence must be >= 0".into()));
        }
        let (lo, hi) = self.frames_range;
        if lo > hi {
            return Err(Error::Config(format!("frames_range ({lo}, {hi}) has min > max")));
        }
        if self.steps_per_task == 0 {
            return Err(Error::Config("steps_per_task must be >= 1".into()));
        }
        if let Some(m) = self.min_steps_per_task {
            if m == 0 || m > self.steps_per_task {
                return Err(Error::Config(format!(
                    "min_steps_per_task = {m} must lie in [1, steps_per_task]"
                )));
            }
        }
        if self.steps_per_task * MIN_SEGMENT_FRAMES > lo {
            return Err(Error::Config(format!(
                "{} steps of at least {MIN_SEGMENT_FRAMES} frames do not fit in {lo} frames",
                self.steps_per_task
            )));
        }
        if self.latent_dim == 0 || self.dims.video == 0 || self.dims.narration == 0 || self.dims.step == 0 {
            return Err(Error::Config("feature and latent dimensions must be >= 1".into()));
        }
        Ok(())
    }
}

/// splitmix64 finalizer; decorrelates per-video seeds.
pub(crate) fn mix_seed(seed: u64, ordinal: u64) -> u64 {
    let mut z = seed ^ ordinal.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

fn unit_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut v = gaussian_vec(rng, n, 1.0);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn gaussian_mat(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_vec(rows, cols, gaussian_vec(rng, rows * cols, std))
}

fn project(latent: &[f64], map: &Mat) -> Vec<f32> {
    let x = Mat::from_vec(1, latent.len(), latent.to_vec());
    x.matmul(map).as_slice().iter().map(|&v| v as f32).collect()
}

fn noisy(rng: &mut impl Rng, latent: &[f64], std: f64) -> Vec<f64> {
    if std == 0.0 {
        return latent.to_vec();
    }
    latent
        .iter()
        .map(|&x| {
            let z: f64 = StandardNormal.sample(rng);
            x + std * z
        })
        .collect()
}

/// Splits `total` into integer parts proportional to `weights`; leftover
/// units go to the largest fractional remainders, lowest index first.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if sum <= 0.0 {
        let mut parts = vec![total / weights.len(); weights.len()];
        for p in parts.iter_mut().take(total % weights.len()) {
            *p += 1;
        }
        return parts;
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut parts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = total - parts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        parts[i] += 1;
        left -= 1;
    }
    parts
}

const SYLLABLES: [&str; 24] = [
    "ba", "ko", "ri", "mu", "te", "sa", "lo", "pi", "ne", "du", "ga", "vo", "ki", "ra", "zu", "fe",
    "mo", "ti", "la", "pe", "no", "si", "ha", "ju",
];

const FILLERS: [&str; 6] = ["now", "next", "ok so", "then", "and here", "alright"];

fn make_word(rng: &mut impl Rng) -> String {
    let n = rng.random_range(2..=3);
    (0..n).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect()
}

struct TaskSpec {
    task_id: String,
    title: String,
    title_words: Vec<String>,
    step_words: Vec<(String, String)>,
    latents: Vec<Vec<f64>>,
}

impl TaskSpec {
    fn step_text(&self, s: usize) -> String {
        let (verb, obj) = &self.step_words[s];
        format!("{verb} the {obj} {}", self.title_words[2])
    }

    fn narration_text(&self, rng: &mut impl Rng, s: usize) -> String {
        let (verb, obj) = &self.step_words[s];
        let filler = FILLERS[rng.random_range(0..FILLERS.len())];
        format!(
            "{filler} we {verb} the {obj} for the {} {}",
            self.title_words[1], self.title_words[2]
        )
    }
}

struct Maps {
    video: Mat,
    narration: Mat,
    step: Mat,
}

fn build_tasks(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<TaskSpec> {
    let mut used = std::collections::BTreeSet::new();
    let mut fresh = |rng: &mut ChaCha8Rng| loop {
        let w = make_word(rng);
        if used.insert(w.clone()) {
            return w;
        }
    };
    let min_steps = cfg.min_steps_per_task.unwrap_or(cfg.steps_per_task);
    (0..cfg.num_tasks)
        .map(|t| {
            let title_words: Vec<String> = (0..3).map(|_| fresh(rng)).collect();
            let steps = rng.random_range(min_steps..=cfg.steps_per_task);
            let step_words = (0..steps).map(|_| (fresh(rng), fresh(rng))).collect();
            let latents = (0..steps).map(|_| unit_vec(rng, cfg.latent_dim)).collect();
            TaskSpec {
                task_id: format!("task{t:03}"),
                title: title_words.join(" "),
                title_words,
                step_words,
                latents,
            }
        })
        .collect()
}

fn build_maps(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Maps {
    let l = cfg.latent_dim;
    let video = gaussian_mat(rng, l, cfg.dims.video, 1.0);
    let narration = gaussian_mat(rng, l, cfg.dims.narration, 1.0);
    let step = if cfg.dims.step == cfg.dims.narration {
        let shift = gaussian_mat(rng, l, cfg.dims.step, cfg.text_map_divergence);
        narration.zip_map(&shift, |a, b| a + b)
    } else {
        gaussian_mat(rng, l, cfg.dims.step, 1.0)
    };
    Maps {
        video,
        narration,
        step,
    }
}

/// Lays `k` segments left to right over `t` frames with random gaps.
fn layout(rng: &mut impl Rng, t: usize, k: usize) -> Vec<Segment> {
    let background = rng.random_range(0.15..0.4);
    let gap_total = ((background * t as f64).floor() as usize).min(t - MIN_SEGMENT_FRAMES * k);
    let extra = t - gap_total - MIN_SEGMENT_FRAMES * k;
    let seg_w: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
    let gap_w: Vec<f64> = (0..=k).map(|_| rng.random_range(0.0..1.0)).collect();
    let seg_extra = apportion(extra, &seg_w);
    let gaps = apportion(gap_total, &gap_w);
    let mut pos = gaps[0];
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let len = MIN_SEGMENT_FRAMES + seg_extra[i];
        out.push(Segment::new(pos, pos + len - 1));
        pos += len + gaps[i + 1];
    }
    debug_assert_eq!(pos, t);
    out
}

fn narration_span(rng: &mut impl Rng, seg: Segment, t: usize) -> Segment {
    let l = seg.len() as f64;
    let len = ((l * rng.random_range(0.5..1.0)).round() as usize).clamp(1, t);
    let center = (seg.start + seg.end) as f64 / 2.0 + rng.random_range(-0.3..0.3) * l;
    let start = (center - (len - 1) as f64 / 2.0).round().max(0.0) as usize;
    let start = start.min(t - len);
    Segment::new(start, start + len - 1)
}

struct NarrationDraft {
    text: String,
    features: Vec<f32>,
    span: Segment,
    alignment: Option<Segment>,
}

fn generate_video(
    cfg: &SynthConfig,
    tasks: &[TaskSpec],
    maps: &Maps,
    task: usize,
    ordinal: usize,
) -> Result<VideoRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, ordinal as u64));
    let spec = &tasks[task];
    let (lo, hi) = cfg.frames_range;
    let t = rng.random_range(lo..=hi);
    let n_steps = spec.latents.len();

    let mut kept: Vec<usize> = (0..n_steps)
        .filter(|_| !rng.random_bool(cfg.p_miss_step))
        .collect();
    if kept.is_empty() {
        kept.push(rng.random_range(0..n_steps));
    }
    let mut i = 0;
    while i + 1 < kept.len() {
        if rng.random_bool(cfg.p_swap_adjacent) {
            kept.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }

    let segments = layout(&mut rng, t, kept.len());
    let bg_std = 1.0 / (cfg.latent_dim as f64).sqrt();
    let mut frames = vec![None; t];
    for (&step, seg) in kept.iter().zip(&segments) {
        for f in frames.iter_mut().take(seg.end + 1).skip(seg.start) {
            *f = Some(step);
        }
    }
    let mut frame_values = Vec::with_capacity(t * cfg.dims.video);
    for f in &frames {
        let latent = match f {
            Some(step) => noisy(&mut rng, &spec.latents[*step], cfg.noise_std),
            None => gaussian_vec(&mut rng, cfg.latent_dim, bg_std),
        };
        frame_values.extend(project(&latent, &maps.video));
    }

    let mut drafts = Vec::new();
    for (&step, &seg) in kept.iter().zip(&segments) {
        let latent = noisy(&mut rng, &spec.latents[step], cfg.noise_std);
        drafts.push(NarrationDraft {
            text: spec.narration_text(&mut rng, step),
            features: project(&latent, &maps.narration),
            span: narration_span(&mut rng, seg, t),
            alignment: Some(seg),
        });
        if rng.random_bool(cfg.p_distract_narration) {
            let (text, latent) = if tasks.len() > 1 {
                let mut other = rng.random_range(0..tasks.len() - 1);
                if other >= task {
                    other += 1;
                }
                let o = &tasks[other];
                let s = rng.random_range(0..o.latents.len());
                (o.narration_text(&mut rng, s), noisy(&mut rng, &o.latents[s], cfg.noise_std))
            } else {
                let text = format!("{} {}", make_word(&mut rng), make_word(&mut rng));
                (text, unit_vec(&mut rng, cfg.latent_dim))
            };
            let len = rng.random_range(2..=8usize).min(t);
            let start = rng.random_range(0..=t - len);
            drafts.push(NarrationDraft {
                text,
                features: project(&latent, &maps.narration),
                span: Segment::new(start, start + len - 1),
                alignment: None,
            });
        }
    }
    drafts.sort_by_key(|d| d.span.start);

    let mut gt = BTreeMap::new();
    for (&step, &seg) in kept.iter().zip(&segments) {
        gt.insert(step, vec![seg]);
    }
    let n = drafts.len();
    Ok(VideoRecord {
        id: format!("vid{ordinal:05}"),
        frame_features: FeatureMatrix::new(t, cfg.dims.video, frame_values)?,
        narration_texts: drafts.iter().map(|d| d.text.clone()).collect(),
        narration_features: FeatureMatrix::new(
            n,
            cfg.dims.narration,
            drafts.iter().flat_map(|d| d.features.iter().copied()).collect(),
        )?,
        narration_spans: drafts.iter().map(|d| d.span).collect(),
        task_id: Some(spec.task_id.clone()),
        gt_step_segments: Some(gt),
        narration_alignment: Some(drafts.iter().map(|d| d.alignment).collect()),
    })
}

/// Builds a corpus from `cfg`; identical configs give identical corpora.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, u64::MAX));
    let tasks = build_tasks(cfg, &mut rng);
    let maps = build_maps(cfg, &mut rng);

    let mut articles = BTreeMap::new();
    let step_noise = 0.25 * cfg.noise_std;
    for spec in &tasks {
        let mut values = Vec::new();
        for latent in &spec.latents {
            values.extend(project(&noisy(&mut rng, latent, step_noise), &maps.step));
        }
        let article = Article {
            task_id: spec.task_id.clone(),
            title: spec.title.clone(),
            step_texts: (0..spec.latents.len()).map(|s| spec.step_text(s)).collect(),
            step_features: FeatureMatrix::new(spec.latents.len(), cfg.dims.step, values)?,
        };
        articles.insert(spec.task_id.clone(), article);
    }

    let jobs: Vec<(usize, usize)> = (0..cfg.num_tasks)
        .flat_map(|t| (0..cfg.videos_per_task).map(move |v| (t, t * cfg.videos_per_task + v)))
        .collect();
    let videos = jobs
        .par_iter()
        .map(|&(task, ordinal)| generate_video(cfg, &tasks, &maps, task, ordinal))
        .collect::<Result<Vec<_>>>()?;

    let corpus = Corpus {
        videos,
        articles,
        dims: cfg.dims,
    };
    corpus.validate()?;
    Ok(corpus)
}

/// Shuffles in place with a seeded generator.
pub(crate) fn seeded_shuffle<T>(items: &mut [T], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> SynthConfig {
        SynthConfig {
            num_tasks: 1,
            steps_per_task: 4,
            min_steps_per_task: None,
            videos_per_task: 1,
            frames_range: (30, 40),
            noise_std: 0.0,
            p_miss_step: 0.0,
            p_swap_adjacent: 0.0,
            p_distract_narration: 0.0,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_noise_segments_are_ordered_and_constant() {
        let c = generate_synthetic(&tiny(3)).unwrap();
        let v = &c.videos[0];
        let gt = v.gt_step_segments.as_ref().unwrap();
        assert_eq!(gt.len(), 4);
        let segs: Vec<Segment> = (0..4).map(|s| gt[&s][0]).collect();
        for w in segs.windows(2) {
            assert!(w[0].end < w[1].start);
        }
        for s in &segs {
            let first = v.frame_features.row(s.start);
            for f in s.start..=s.end {
                assert_eq!(v.frame_features.row(f), first);
            }
        }
        // distinct steps map to distinct features
        assert_ne!(v.frame_features.row(segs[0].start), v.frame_features.row(segs[1].start));
    }

    #[test]
    fn same_seed_same_corpus() {
        let cfg = SynthConfig {
            videos_per_task: 3,
            ..SynthConfig::default()
        };
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn oversized_articles_are_rejected() {
        let cfg = SynthConfig {
            steps_per_task: 40,
            min_steps_per_task: None,
            frames_range: (64, 128),
            ..SynthConfig::default()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn apportion_preserves_total() {
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(apportion(0, &[0.3, 0.7]), vec![0, 0]);
        assert_eq!(apportion(5, &[0.0, 0.0]), vec![3, 2]);
        assert_eq!(apportion(7, &[0.2, 0.5, 0.3]).iter().sum::<usize>(), 7);
    }

    #[test]
    fn distractors_are_not_alignable() {
        let cfg = SynthConfig {
            p_distract_narration: 1.0,
            videos_per_task: 2,
            ..SynthConfig::default()
        };
        let c = generate_synthetic(&cfg).unwrap();
        for v in &c.videos {
            let al = v.narration_alignment.as_ref().unwrap();
            let realized = v.gt_step_segments.as_ref().unwrap().len();
            assert_eq!(al.iter().filter(|a| a.is_some()).count(), realized);
            assert_eq!(al.len(), 2 * realized);
        }
    }
}
