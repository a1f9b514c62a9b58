//! Segmentation metrics: frame accuracy, edit score and overlap F1.
//!
//! All scores are percentages in `[0, 100]`.
//!
//! Dataset-level pooling ([`DatasetMetrics`]): accuracy is pooled over every
//! frame of every video, edit is averaged per video, and F1 is computed
//! once from true/false positive and false negative counts summed over
//! videos.

use std::fmt;

use crate::error::{Error, Result};

/// Overlap thresholds reported by default.
pub const OVERLAPS: [f64; 3] = [0.10, 0.25, 0.50];

/// A maximal run of one label; `start` and `end` are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub label: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn overlap(&self, other: &Segment) -> usize {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        if hi >= lo {
            hi - lo + 1
        } else {
            0
        }
    }

    /// Frame intersection-over-union with `other`.
    pub fn iou(&self, other: &Segment) -> f64 {
        let inter = self.overlap(other);
        let union = self.len() + other.len() - inter;
        inter as f64 / union as f64
    }
}

/// Splits a label sequence into maximal runs.
pub fn segments_from_labels(labels: &[usize]) -> Result<Vec<Segment>> {
    let Some(&first) = labels.first() else {
        return Err(Error::InvalidArgument("cannot segment an empty label sequence".into()));
    };
    let mut out = Vec::new();
    let mut cur = Segment {
        label: first,
        start: 0,
        end: 0,
    };
    for (i, &l) in labels.iter().enumerate().skip(1) {
        if l == cur.label {
            cur.end = i;
        } else {
            out.push(cur);
            cur = Segment {
                label: l,
                start: i,
                end: i,
            };
        }
    }
    out.push(cur);
    Ok(out)
}

fn check_pair(pred: &[usize], gt: &[usize]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch {
            expected: gt.len(),
            got: pred.len(),
        });
    }
    if gt.is_empty() {
        return Err(Error::InvalidArgument("empty label sequence".into()));
    }
    Ok(())
}

fn matching_frames(pred: &[usize], gt: &[usize]) -> usize {
    pred.iter().zip(gt).filter(|(a, b)| a == b).count()
}

pub fn frame_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(100.0 * matching_frames(pred, gt) as f64 / gt.len() as f64)
}

/// `100 · (1 − lev(segments(pred), segments(gt)) / max(#pred, #gt))`.
pub fn edit_score(pred: &[usize], gt: &[usize]) -> Result<f64> {
    check_pair(pred, gt)?;
    let p: Vec<usize> = segments_from_labels(pred)?.iter().map(|s| s.label).collect();
    let g: Vec<usize> = segments_from_labels(gt)?.iter().map(|s| s.label).collect();
    let dist = strsim::generic_levenshtein(&p, &g);
    Ok(100.0 * (1.0 - dist as f64 / p.len().max(g.len()) as f64))
}

/// Detection counts at one overlap threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OverlapCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl OverlapCounts {
    pub fn f1(&self) -> f64 {
        let denom_p = self.tp + self.fp;
        let denom_r = self.tp + self.fn_;
        if denom_p == 0 || denom_r == 0 {
            return 0.0;
        }
        let p = self.tp as f64 / denom_p as f64;
        let r = self.tp as f64 / denom_r as f64;
        if p + r == 0.0 {
            0.0
        } else {
            100.0 * 2.0 * p * r / (p + r)
        }
    }

    fn merge(&mut self, o: OverlapCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Greedy segment matching in prediction order.
///
/// Each predicted segment takes the not-yet-matched ground-truth segment of
/// the same label with the highest IoU (earliest on ties); it counts as a
/// hit only if that IoU is strictly above `tau`.
pub fn overlap_counts(pred: &[usize], gt: &[usize], tau: f64) -> Result<OverlapCounts> {
    check_pair(pred, gt)?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::OutOfRange(format!("overlap threshold must be in (0, 1), got {tau}")));
    }
    let ps = segments_from_labels(pred)?;
    let gs = segments_from_labels(gt)?;
    let mut used = vec![false; gs.len()];
    let mut tp = 0;
    for p in &ps {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gs.iter().enumerate() {
            if used[j] || g.label != p.label {
                continue;
            }
            let iou = p.iou(g);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, iou)) = best {
            if iou > tau {
                used[j] = true;
                tp += 1;
            }
        }
    }
    Ok(OverlapCounts {
        tp,
        fp: ps.len() - tp,
        fn_: gs.len() - tp,
    })
}

pub fn f1_at_overlap(pred: &[usize], gt: &[usize], tau: f64) -> Result<f64> {
    Ok(overlap_counts(pred, gt, tau)?.f1())
}

/// The five headline scores plus their mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub f1_10: f64,
    pub f1_25: f64,
    pub f1_50: f64,
    pub edit: f64,
    pub acc: f64,
}

impl MetricsReport {
    /// Unweighted mean of F1@10, F1@25, F1@50, Edit and Acc.
    pub fn avg(&self) -> f64 {
        (self.f1_10 + self.f1_25 + self.f1_50 + self.edit + self.acc) / 5.0
    }

    /// `name=value` pairs in a fixed order.
    pub fn pairs(&self) -> [(&'static str, f64); 6] {
        [
            ("f1@10", self.f1_10),
            ("f1@25", self.f1_25),
            ("f1@50", self.f1_50),
            ("edit", self.edit),
            ("acc", self.acc),
            ("avg", self.avg()),
        ]
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.pairs().iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        f.write_str(&parts.join(" "))
    }
}

/// Accumulates per-video results into dataset-level scores.
#[derive(Debug, Clone, Default)]
pub struct DatasetMetrics {
    frames: usize,
    correct: usize,
    edit_sum: f64,
    videos: usize,
    counts: [OverlapCounts; 3],
}

impl DatasetMetrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        check_pair(pred, gt)?;
        let edit = edit_score(pred, gt)?;
        let mut counts = [OverlapCounts::default(); 3];
        for (c, &tau) in counts.iter_mut().zip(&OVERLAPS) {
            *c = overlap_counts(pred, gt, tau)?;
        }
        self.frames += gt.len();
        self.correct += matching_frames(pred, gt);
        self.edit_sum += edit;
        self.videos += 1;
        for (acc, c) in self.counts.iter_mut().zip(counts) {
            acc.merge(c);
        }
        Ok(())
    }

    pub fn videos(&self) -> usize {
        self.videos
    }

    pub fn report(&self) -> Result<MetricsReport> {
        if self.videos == 0 {
            return Err(Error::InvalidArgument("no videos were evaluated".into()));
        }
        Ok(MetricsReport {
            f1_10: self.counts[0].f1(),
            f1_25: self.counts[1].f1(),
            f1_50: self.counts[2].f1(),
            edit: self.edit_sum / self.videos as f64,
            acc: 100.0 * self.correct as f64 / self.frames as f64,
        })
    }
}
