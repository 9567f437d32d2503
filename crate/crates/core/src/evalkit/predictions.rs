//! JSON-lines interchange for alignments produced outside this crate.
//!
//! Each line names a video and either a step or a narration, and carries
//! either a full score row or a list of scored segments:
//!
//! ```text
//! {"video_id":"vid00001","step_index":2,"row":[0.1,0.7,0.3]}
//! {"video_id":"vid00001","step_index":2,"segments":[{"start":1,"end":2,"score":0.7}]}
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ScoredSegment;
use crate::corpus::Segment;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PredictionTarget {
    Step(usize),
    Narration(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub video_id: String,
    pub target: PredictionTarget,
    pub row: Option<Vec<f64>>,
    pub segments: Option<Vec<ScoredSegment>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentLine {
    start: usize,
    end: usize,
    score: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    video_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    narration_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    row: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    segments: Option<Vec<SegmentLine>>,
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: &str| Error::format(path, format!("line {}: {reason}", n + 1));
        let rec: Line = serde_json::from_str(&line).map_err(|e| bad(&e.to_string()))?;
        let target = match (rec.step_index, rec.narration_index) {
            (Some(s), None) => PredictionTarget::Step(s),
            (None, Some(k)) => PredictionTarget::Narration(k),
            _ => return Err(bad("exactly one of step_index and narration_index is required")),
        };
        if rec.row.is_none() && rec.segments.is_none() {
            return Err(bad("either row or segments is required"));
        }
        let segments = match rec.segments {
            Some(segs) => Some(
                segs.into_iter()
                    .map(|s| {
                        if s.start > s.end || !s.score.is_finite() {
                            Err(bad("segment needs start <= end and a finite score"))
                        } else {
                            Ok(ScoredSegment {
                                segment: Segment::new(s.start, s.end),
                                score: s.score,
                            })
                        }
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        out.push(Prediction {
            video_id: rec.video_id,
            target,
            row: rec.row,
            segments,
        });
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut buf = Vec::new();
    for p in predictions {
        let (step_index, narration_index) = match p.target {
            PredictionTarget::Step(s) => (Some(s), None),
            PredictionTarget::Narration(k) => (None, Some(k)),
        };
        let line = Line {
            video_id: p.video_id.clone(),
            step_index,
            narration_index,
            row: p.row.clone(),
            segments: p.segments.as_ref().map(|segs| {
                segs.iter()
                    .map(|s| SegmentLine {
                        start: s.segment.start,
                        end: s.segment.end,
                        score: s.score,
                    })
                    .collect()
            }),
        };
        serde_json::to_writer(&mut buf, &line)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
