//! Detection evaluation: greedy matching, average precision, heading-weighted
//! average precision, and range-bucketed reporting.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxgeom::{bev_iou, iou_3d, wrap_angle, Box7};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouMode {
    Bev,
    #[serde(rename = "3d")]
    ThreeD,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub mode: IouMode,
    /// Upper edges of the finite range buckets; the last bucket is open.
    pub bucket_edges: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { iou_threshold: 0.7, mode: IouMode::Bev, bucket_edges: vec![30.0, 50.0] }
    }
}

impl EvalConfig {
    pub fn iou(&self, a: &Box7, b: &Box7) -> f64 {
        match self.mode {
            IouMode::Bev => bev_iou(a, b),
            IouMode::ThreeD => iou_3d(a, b),
        }
    }

    pub fn n_buckets(&self) -> usize {
        self.bucket_edges.len() + 1
    }

    pub fn bucket_of(&self, range: f64) -> usize {
        for (i, &edge) in self.bucket_edges.iter().enumerate() {
            if range < edge {
                return i;
            }
        }
        self.bucket_edges.len()
    }

    pub fn bucket_label(&self, i: usize) -> String {
        if self.bucket_edges.is_empty() {
            return "[0, inf)".into();
        }
        if i == 0 {
            format!("[0, {})", self.bucket_edges[0])
        } else if i < self.bucket_edges.len() {
            format!("[{}, {})", self.bucket_edges[i - 1], self.bucket_edges[i])
        } else {
            format!("[{}, inf)", self.bucket_edges[self.bucket_edges.len() - 1])
        }
    }
}

/// One detection or ground-truth record (JSONL schema).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Record {
    pub frame: u64,
    /// [x, y, z, l, w, h, theta]
    pub r#box: [f64; 7],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<u32>,
}

impl Record {
    pub fn to_box(&self) -> Box7 {
        let b = self.r#box;
        Box7::new(b[0], b[1], b[2], b[3], b[4], b[5], b[6])
    }
}

/// Per-detection match outcome, in descending-score order.
#[derive(Debug, Clone, Copy)]
pub struct DetMatch {
    pub score: f64,
    pub true_positive: bool,
    /// Index of the matched GT (within its frame) for TPs.
    pub gt_index: Option<usize>,
    /// Heading error wrapped to [-pi, pi], TPs only.
    pub heading_error: f64,
    /// Range bucket: the matched GT's bucket for TPs, the detection's own
    /// center range for FPs.
    pub bucket: usize,
}

#[derive(Debug, Clone, Default)]
pub struct MatchResult {
    pub matches: Vec<DetMatch>,
    pub n_gt: usize,
    /// GT count per range bucket.
    pub n_gt_bucket: Vec<usize>,
}

/// Greedy matching within one frame: detections in descending score order
/// each claim the highest-IoU unmatched ground truth at or above the
/// threshold; every ground truth is matched at most once.
pub fn match_frame(dets: &[(Box7, f64)], gts: &[Box7], cfg: &EvalConfig) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.partial_cmp(&dets[a].1).unwrap().then(a.cmp(&b)));
    let mut gt_taken = vec![false; gts.len()];
    let mut n_gt_bucket = vec![0usize; cfg.n_buckets()];
    for g in gts {
        n_gt_bucket[cfg.bucket_of(g.range())] += 1;
    }
    let mut matches = Vec::with_capacity(dets.len());
    for &di in &order {
        let (dbox, score) = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if gt_taken[gi] {
                continue;
            }
            let iou = cfg.iou(dbox, g);
            if iou >= cfg.iou_threshold {
                let better = match best {
                    None => true,
                    Some((_, b)) => iou > b,
                };
                if better {
                    best = Some((gi, iou));
                }
            }
        }
        match best {
            Some((gi, _)) => {
                gt_taken[gi] = true;
                matches.push(DetMatch {
                    score: *score,
                    true_positive: true,
                    gt_index: Some(gi),
                    heading_error: wrap_angle(dbox.theta - gts[gi].theta),
                    bucket: cfg.bucket_of(gts[gi].range()),
                });
            }
            None => matches.push(DetMatch {
                score: *score,
                true_positive: false,
                gt_index: None,
                heading_error: 0.0,
                bucket: cfg.bucket_of(dbox.range()),
            }),
        }
    }
    MatchResult { matches, n_gt: gts.len(), n_gt_bucket }
}

/// Pool per-frame match results for a global PR curve.
pub fn pool_matches(frames: &[MatchResult], n_buckets: usize) -> MatchResult {
    let mut all = MatchResult { matches: Vec::new(), n_gt: 0, n_gt_bucket: vec![0; n_buckets] };
    for f in frames {
        all.matches.extend_from_slice(&f.matches);
        all.n_gt += f.n_gt;
        for (a, b) in all.n_gt_bucket.iter_mut().zip(&f.n_gt_bucket) {
            *a += b;
        }
    }
    all.matches
        .sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    all
}

/// Heading accuracy weight: `max(0, 1 - |dtheta| / pi)`.
pub fn heading_weight(heading_error: f64) -> f64 {
    (1.0 - heading_error.abs() / std::f64::consts::PI).max(0.0)
}

fn envelope_ap(points: &[(f64, f64)]) -> f64 {
    // points: (recall, precision) at each detection, recall non-decreasing
    if points.is_empty() {
        return 0.0;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let (r, _) = points[i];
        // precision envelope: max precision at this recall or beyond
        let p_env = points[i..].iter().map(|&(_, p)| p).fold(0.0, f64::max);
        ap += (r - prev_recall).max(0.0) * p_env;
        prev_recall = r;
    }
    ap
}

/// Area under the precision-recall curve with all-point (envelope)
/// interpolation. `NaN` when there is no ground truth.
pub fn average_precision(matches: &[DetMatch], n_gt: usize) -> f64 {
    ap_weighted(matches, n_gt, |_| 1.0)
}

/// AP with every true positive's recall contribution scaled by its heading
/// accuracy; equals AP when all headings are exact and never exceeds it.
pub fn average_precision_heading(matches: &[DetMatch], n_gt: usize) -> f64 {
    ap_weighted(matches, n_gt, |m| heading_weight(m.heading_error))
}

fn ap_weighted(matches: &[DetMatch], n_gt: usize, weight: impl Fn(&DetMatch) -> f64) -> f64 {
    if n_gt == 0 {
        return f64::NAN;
    }
    if matches.is_empty() {
        return 0.0;
    }
    debug_assert!(matches.windows(2).all(|w| w[0].score >= w[1].score));
    let mut points = Vec::with_capacity(matches.len());
    let mut tp = 0usize;
    let mut wtp = 0.0;
    for (i, m) in matches.iter().enumerate() {
        if m.true_positive {
            tp += 1;
            wtp += weight(m);
        }
        let precision = tp as f64 / (i + 1) as f64;
        let recall = wtp / n_gt as f64;
        points.push((recall, precision));
    }
    envelope_ap(&points)
}

/// AP/APH for one range bucket plus the overall row.
#[derive(Debug, Clone)]
pub struct BucketRow {
    pub label: String,
    pub n_gt: usize,
    pub ap: f64,
    pub aph: f64,
}

#[derive(Debug, Clone)]
pub struct BucketedReport {
    pub overall: BucketRow,
    pub buckets: Vec<BucketRow>,
}

/// Evaluate per-frame, pool, and break the metrics down by range bucket.
/// Detections keep their matched GT's bucket; unmatched false positives fall
/// in their own center-range bucket.
pub fn bucketed_report(
    frames: &[(Vec<(Box7, f64)>, Vec<Box7>)],
    cfg: &EvalConfig,
) -> BucketedReport {
    let per_frame: Vec<MatchResult> =
        frames.iter().map(|(d, g)| match_frame(d, g, cfg)).collect();
    let pooled = pool_matches(&per_frame, cfg.n_buckets());

    let overall = BucketRow {
        label: "all".into(),
        n_gt: pooled.n_gt,
        ap: average_precision(&pooled.matches, pooled.n_gt),
        aph: average_precision_heading(&pooled.matches, pooled.n_gt),
    };
    let mut buckets = Vec::with_capacity(cfg.n_buckets());
    for b in 0..cfg.n_buckets() {
        let subset: Vec<DetMatch> =
            pooled.matches.iter().filter(|m| m.bucket == b).copied().collect();
        let n_gt = pooled.n_gt_bucket[b];
        buckets.push(BucketRow {
            label: cfg.bucket_label(b),
            n_gt,
            ap: average_precision(&subset, n_gt),
            aph: average_precision_heading(&subset, n_gt),
        });
    }
    BucketedReport { overall, buckets }
}

impl BucketedReport {
    /// Fixed-width text table, stable across runs for regression fixtures.
    pub fn to_table(&self, cfg: &EvalConfig) -> String {
        let mode = match cfg.mode {
            IouMode::Bev => "BEV",
            IouMode::ThreeD => "3D",
        };
        let fmt_metric = |v: f64| {
            if v.is_nan() {
                "     NaN".to_string()
            } else {
                format!("{:8.6}", v)
            }
        };
        let mut out = String::new();
        out.push_str(&format!("{} AP/APH at IoU >= {}\n", mode, cfg.iou_threshold));
        out.push_str(&format!("{:<12} {:>6} {:>8} {:>8}\n", "bucket", "n_gt", "AP", "APH"));
        for row in std::iter::once(&self.overall).chain(&self.buckets) {
            out.push_str(&format!(
                "{:<12} {:>6} {} {}\n",
                row.label,
                row.n_gt,
                fmt_metric(row.ap),
                fmt_metric(row.aph)
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// JSONL I/O
// ---------------------------------------------------------------------------

/// Read a detections or ground-truth JSONL file, grouped by frame id.
pub fn read_jsonl(path: &Path) -> Result<BTreeMap<u64, Vec<Record>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(0, e))?;
    let mut frames: BTreeMap<u64, Vec<Record>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("line {}: {}", i + 1, e)))?;
        frames.entry(rec.frame).or_default().push(rec);
    }
    Ok(frames)
}

pub fn write_jsonl(path: &Path, records: &[Record]) -> Result<()> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(0, e))
}

/// Pair detection and ground-truth frames by id (union of frames).
pub fn pair_frames(
    dets: &BTreeMap<u64, Vec<Record>>,
    gts: &BTreeMap<u64, Vec<Record>>,
) -> Vec<(Vec<(Box7, f64)>, Vec<Box7>)> {
    let mut ids: Vec<u64> = dets.keys().chain(gts.keys()).copied().collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter()
        .map(|id| {
            let d = dets
                .get(&id)
                .map(|v| v.iter().map(|r| (r.to_box(), r.score.unwrap_or(0.0))).collect())
                .unwrap_or_default();
            let g = gts
                .get(&id)
                .map(|v| v.iter().map(|r| r.to_box()).collect())
                .unwrap_or_default();
            (d, g)
        })
        .collect()
}
