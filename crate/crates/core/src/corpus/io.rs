//! On-disk corpus layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/features/<video_id>.frames.bin
//! <dir>/features/<video_id>.narrations.bin
//! <dir>/articles/<task_id>.steps.bin
//! ```
//!
//! Feature files carry a 16-byte little-endian header (`b"STAL"`, version,
//! rows, cols) followed by `rows * cols` `f32` values in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Article, Corpus, Dims, FeatureMatrix, Segment, VideoRecord};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"STAL";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn write_feature_file(path: &Path, m: &FeatureMatrix) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * m.values().len());
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub(crate) fn parse_header(path: &Path, bytes: &[u8], version: u32) -> Result<(usize, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if word(4) != version {
        return Err(Error::format(path, format!("unsupported version {} (expected {version})", word(4))));
    }
    Ok((word(8) as usize, word(12) as usize))
}

pub fn read_feature_file(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (rows, cols) = parse_header(path, &bytes, FEATURE_VERSION)?;
    let expected = HEADER_LEN + 4 * rows * cols;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("{rows}x{cols} needs {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMatrix::new(rows, cols, values).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    dims: Dims,
    videos: Vec<VideoEntry>,
    articles: Vec<ArticleEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VideoEntry {
    id: String,
    frames: usize,
    task_id: Option<String>,
    frame_file: String,
    narration_file: String,
    narration_texts: Vec<String>,
    spans: Vec<Segment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_segments: Option<BTreeMap<usize, Vec<Segment>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    narration_alignment: Option<Vec<Option<Segment>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArticleEntry {
    task_id: String,
    title: String,
    steps: Vec<String>,
    feature_file: String,
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `corpus` under `dir`, creating it if needed.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    ensure_dir(&dir.join("features"))?;
    ensure_dir(&dir.join("articles"))?;
    let mut videos = Vec::with_capacity(corpus.videos.len());
    for v in &corpus.videos {
        let frame_file = format!("features/{}.frames.bin", v.id);
        let narration_file = format!("features/{}.narrations.bin", v.id);
        write_feature_file(&dir.join(&frame_file), &v.frame_features)?;
        write_feature_file(&dir.join(&narration_file), &v.narration_features)?;
        videos.push(VideoEntry {
            id: v.id.clone(),
            frames: v.num_frames(),
            task_id: v.task_id.clone(),
            frame_file,
            narration_file,
            narration_texts: v.narration_texts.clone(),
            spans: v.narration_spans.clone(),
            gt_segments: v.gt_step_segments.clone(),
            narration_alignment: v.narration_alignment.clone(),
        });
    }
    let mut articles = Vec::with_capacity(corpus.articles.len());
    for a in corpus.articles.values() {
        let feature_file = format!("articles/{}.steps.bin", a.task_id);
        write_feature_file(&dir.join(&feature_file), &a.step_features)?;
        articles.push(ArticleEntry {
            task_id: a.task_id.clone(),
            title: a.title.clone(),
            steps: a.step_texts.clone(),
            feature_file,
        });
    }
    let manifest = Manifest {
        dims: corpus.dims,
        videos,
        articles,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn resolve(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel)
}

/// Loads and validates a corpus written by [`write_corpus`].
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;

    let mut articles = BTreeMap::new();
    for a in manifest.articles {
        let fpath = resolve(dir, &a.feature_file);
        let step_features = read_feature_file(&fpath)?;
        if step_features.rows() != a.steps.len() {
            return Err(Error::format(
                &fpath,
                format!("{} rows for {} steps", step_features.rows(), a.steps.len()),
            ));
        }
        let article = Article {
            task_id: a.task_id.clone(),
            title: a.title,
            step_texts: a.steps,
            step_features,
        };
        if articles.insert(a.task_id.clone(), article).is_some() {
            return Err(Error::Validation(format!("duplicate article `{}`", a.task_id)));
        }
    }

    let mut videos = Vec::with_capacity(manifest.videos.len());
    for v in manifest.videos {
        let fpath = resolve(dir, &v.frame_file);
        let frame_features = read_feature_file(&fpath)?;
        if frame_features.rows() != v.frames {
            return Err(Error::format(
                &fpath,
                format!("{} rows but manifest says {} frames", frame_features.rows(), v.frames),
            ));
        }
        let npath = resolve(dir, &v.narration_file);
        let narration_features = read_feature_file(&npath)?;
        if narration_features.rows() != v.narration_texts.len() {
            return Err(Error::format(
                &npath,
                format!(
                    "{} rows but manifest lists {} narrations",
                    narration_features.rows(),
                    v.narration_texts.len()
                ),
            ));
        }
        videos.push(VideoRecord {
            id: v.id,
            frame_features,
            narration_texts: v.narration_texts,
            narration_features,
            narration_spans: v.spans,
            task_id: v.task_id,
            gt_step_segments: v.gt_segments,
            narration_alignment: v.narration_alignment,
        });
    }
    let corpus = Corpus {
        videos,
        articles,
        dims: manifest.dims,
    };
    corpus.validate()?;
    Ok(corpus)
}
