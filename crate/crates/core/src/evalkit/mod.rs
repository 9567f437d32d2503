//! Grounding metrics and segment decoding.

mod predictions;
mod protocol;

pub use predictions::{read_predictions, write_predictions, Prediction, PredictionTarget};
pub use protocol::{
    align_corpus, alignability_scores, corpus_alignability_auc, corpus_article_recall, corpus_narration_r_at_1,
    corpus_step_r_at_1, detect_segments, EvalConfig, StepMatrix, StepRecall, VideoAlignment,
};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Segment;
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSegment {
    pub segment: Segment,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    /// `hits / total`, or 0 when nothing was counted.
    pub value: f64,
    pub hits: usize,
    pub total: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
}

impl MetricReport {
    pub fn new(metric: impl Into<String>, hits: usize, total: usize) -> Self {
        MetricReport {
            metric: metric.into(),
            value: if total > 0 { hits as f64 / total as f64 } else { 0.0 },
            hits,
            total,
            k: None,
            iou: None,
        }
    }

    /// Pools counts (micro average).
    pub fn merge(&mut self, other: &MetricReport) {
        self.hits += other.hits;
        self.total += other.total;
        self.value = if self.total > 0 {
            self.hits as f64 / self.total as f64
        } else {
            0.0
        };
    }
}

/// Fixed-width plain-text rendering, one report per line.
pub fn format_table(reports: &[MetricReport]) -> String {
    let mut out = format!("{:<24} {:>5} {:>6} {:>8} {:>8} {:>8}\n", "metric", "K", "IoU", "value", "hits", "total");
    for r in reports {
        let k = r.k.map_or("-".to_string(), |k| k.to_string());
        let iou = r.iou.map_or("-".to_string(), |t| format!("{t:.2}"));
        let _ = writeln!(
            out,
            "{:<24} {:>5} {:>6} {:>8.4} {:>8} {:>8}",
            r.metric, k, iou, r.value, r.hits, r.total
        );
    }
    out
}

/// Frame-count IoU of two inclusive segments.
pub fn interval_iou(a: Segment, b: Segment) -> f64 {
    let lo = a.start.max(b.start);
    let hi = a.end.min(b.end);
    let inter = if hi >= lo { hi - lo + 1 } else { 0 };
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> Option<usize> {
    if row.is_empty() {
        return None;
    }
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    Some(best)
}

/// Hits when a step row's argmax frame lies inside one of the step's
/// ground-truth segments. Steps with no segments are not counted.
pub fn step_r_at_1(alignment: &Mat, gt: &BTreeMap<usize, Vec<Segment>>) -> Result<MetricReport> {
    let mut hits = 0;
    let mut total = 0;
    for (&s, segs) in gt {
        if segs.is_empty() {
            continue;
        }
        if s >= alignment.rows() {
            return Err(Error::Shape(format!(
                "ground truth for step {s} but alignment has {} rows",
                alignment.rows()
            )));
        }
        total += 1;
        let t = argmax(alignment.row(s)).ok_or_else(|| Error::Shape("alignment has no frames".into()))?;
        if segs.iter().any(|g| g.contains(t)) {
            hits += 1;
        }
    }
    Ok(MetricReport::new("step_r1", hits, total))
}

/// Local maxima at or above `min_score`, each grown by the relative
/// threshold rule without entering frames claimed by stronger blobs.
/// A plateau counts once, at its leftmost frame. Output is ordered by
/// score, strongest first.
pub fn blob_detect(row: &[f64], min_score: f64, zeta: f64) -> Vec<ScoredSegment> {
    let n = row.len();
    let mut peaks = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && row[j + 1] == row[i] {
            j += 1;
        }
        let left_ok = i == 0 || row[i - 1] < row[i];
        let right_ok = j + 1 == n || row[j + 1] < row[i];
        if left_ok && right_ok && row[i] >= min_score {
            peaks.push(i);
        }
        i = j + 1;
    }
    peaks.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let mut claimed = vec![false; n];
    let mut out = Vec::new();
    for p in peaks {
        if claimed[p] {
            continue;
        }
        let threshold = zeta * row[p];
        let mut start = p;
        while start > 0 && !claimed[start - 1] && row[start - 1] >= threshold {
            start -= 1;
        }
        let mut end = p;
        while end + 1 < n && !claimed[end + 1] && row[end + 1] >= threshold {
            end += 1;
        }
        claimed[start..=end].fill(true);
        out.push(ScoredSegment {
            segment: Segment::new(start, end),
            score: row[p],
        });
    }
    out
}

/// One report per IoU threshold. A ground-truth step is a hit when any of
/// its `k` best detections overlaps one of its segments by at least the
/// threshold.
pub fn recall_at_k_iou(
    detections: &BTreeMap<usize, Vec<ScoredSegment>>,
    gt: &BTreeMap<usize, Vec<Segment>>,
    k: usize,
    thresholds: &[f64],
) -> Result<Vec<MetricReport>> {
    if k == 0 {
        return Err(Error::Config("K must be >= 1".into()));
    }
    // `None` when a step has no detections, so it misses even at IoU 0.
    let best: BTreeMap<usize, Option<f64>> = gt
        .iter()
        .filter(|(_, segs)| !segs.is_empty())
        .map(|(s, segs)| {
            let mut dets: Vec<&ScoredSegment> = detections.get(s).map(|d| d.iter().collect()).unwrap_or_default();
            dets.sort_by(|a, b| b.score.total_cmp(&a.score));
            let iou = dets
                .iter()
                .take(k)
                .flat_map(|d| segs.iter().map(move |g| interval_iou(d.segment, *g)))
                .reduce(f64::max);
            (*s, iou)
        })
        .collect();
    Ok(thresholds
        .iter()
        .map(|&th| {
            let hits = best.values().filter(|iou| iou.is_some_and(|v| v >= th)).count();
            let mut r = MetricReport::new("article_recall", hits, best.len());
            r.k = Some(k);
            r.iou = Some(th);
            r
        })
        .collect())
}

/// Hits when an alignable narration's argmax frame lies inside its span.
pub fn narration_r_at_1(nv: &Mat, spans: &[Option<Segment>]) -> Result<MetricReport> {
    if spans.len() != nv.rows() {
        return Err(Error::Shape(format!("{} spans for {} narration rows", spans.len(), nv.rows())));
    }
    let mut hits = 0;
    let mut total = 0;
    for (n, span) in spans.iter().enumerate() {
        let Some(span) = span else { continue };
        total += 1;
        if argmax(nv.row(n)).is_some_and(|t| span.contains(t)) {
            hits += 1;
        }
    }
    Ok(MetricReport::new("narration_r1", hits, total))
}

/// Mann-Whitney estimate of ROC-AUC; tied pairs count one half.
pub fn alignability_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Protocol("ROC-AUC needs both alignable and non-alignable items".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of positive ranks with average ranks for ties (1-based).
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&o| labels[o]).count() as f64;
        i = j + 1;
    }
    let (p, q) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(a: usize, b: usize) -> Segment {
        Segment::new(a, b)
    }

    #[test]
    fn iou_examples() {
        assert_eq!(interval_iou(seg(0, 10), seg(5, 15)), 0.375);
        assert_eq!(interval_iou(seg(3, 4), seg(3, 4)), 1.0);
        assert_eq!(interval_iou(seg(0, 1), seg(2, 3)), 0.0);
    }

    #[test]
    fn step_recall_counts() {
        let a = Mat::from_rows(&[
            vec![0.0, 1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ]);
        let gt: BTreeMap<_, _> = [
            (0, vec![seg(1, 1)]),
            (1, vec![seg(0, 0)]),
            (2, vec![seg(0, 1), seg(2, 2)]),
            (3, vec![seg(0, 2)]),
        ]
        .into();
        assert_eq!(step_r_at_1(&a, &gt).unwrap().value, 0.75);
    }

    #[test]
    fn blobs() {
        let b = blob_detect(&[0.1, 0.9, 0.1, 0.8, 0.1], 0.5, 0.7);
        assert_eq!(
            b,
            vec![
                ScoredSegment { segment: seg(1, 1), score: 0.9 },
                ScoredSegment { segment: seg(3, 3), score: 0.8 },
            ]
        );
        let mono: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let b = blob_detect(&mono, 0.0, 0.7);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].segment.end, 8);
        assert!(blob_detect(&[0.1, 0.2], 0.5, 0.7).is_empty());
        let plateau = blob_detect(&[0.2, 0.7, 0.7, 0.1], 0.5, 1.0);
        assert_eq!(plateau, vec![ScoredSegment { segment: seg(1, 2), score: 0.7 }]);
    }

    #[test]
    fn blobs_do_not_cross_claimed_frames() {
        let b = blob_detect(&[0.6, 0.8, 0.7, 1.0, 0.9], 0.0, 0.5);
        assert_eq!(b[0].segment, seg(0, 4));
        assert_eq!(b.len(), 1);
        let b = blob_detect(&[0.9, 0.5, 0.85, 0.1], 0.0, 0.5);
        assert_eq!(b[0].segment, seg(0, 2));
        assert_eq!(b.len(), 1, "the weaker peak was swallowed");
    }

    #[test]
    fn recall_thresholds() {
        let det: BTreeMap<_, _> = [(0, vec![ScoredSegment { segment: seg(5, 15), score: 1.0 }])].into();
        let gt: BTreeMap<_, _> = [(0, vec![seg(0, 10)])].into();
        let r = recall_at_k_iou(&det, &gt, 1, &[0.3, 0.5]).unwrap();
        assert_eq!((r[0].value, r[1].value), (1.0, 0.0));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(alignability_auc(&[0.9, 0.7, 0.4, 0.2], &[true, false, true, false]).unwrap(), 0.75);
        assert_eq!(alignability_auc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(alignability_auc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert!(alignability_auc(&[0.9, 0.8], &[true, true]).is_err());
    }

    #[test]
    fn narration_recall_skips_unalignable() {
        let nv = Mat::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]]);
        let r = narration_r_at_1(&nv, &[Some(seg(1, 1)), None, Some(seg(1, 1))]).unwrap();
        assert_eq!((r.hits, r.total), (1, 2));
    }
}
