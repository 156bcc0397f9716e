//! Detection scoring: IoU, NMS, greedy matching, PR curves, 101-point
//! interpolated AP, COCO-style threshold sweeps, and multi-run aggregation.
//!
//! Matching is the PASCAL VOC convention: per image, detections in
//! descending confidence order each claim the unmatched ground truth with
//! the highest IoU, and count as true positives only when that IoU strictly
//! exceeds the threshold. Evaluation is single-class; a per-class wrapper
//! is provided for completeness.

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

/// One predicted box with its confidence, tied to an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub image_id: String,
}

impl Detection {
    pub fn new(bbox: BoundingBox, confidence: f64, image_id: impl Into<String>) -> Result<Self> {
        let det = Self {
            bbox,
            confidence,
            image_id: image_id.into(),
        };
        det.validate()?;
        Ok(det)
    }

    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if !(0.0..=1.0).contains(&self.confidence) || !self.confidence.is_finite() {
            return Err(Error::invalid(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }
}

/// One labeled box, tied to an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BoundingBox,
    pub image_id: String,
}

impl GroundTruth {
    pub fn new(bbox: BoundingBox, image_id: impl Into<String>) -> Result<Self> {
        bbox.validate()?;
        Ok(Self {
            bbox,
            image_id: image_id.into(),
        })
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_raw(a, b))
}

fn iou_raw(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy non-maximum suppression. Detections are visited in descending
/// confidence (ties keep input order); one is kept iff its IoU with every
/// already-kept detection is at most `iou_threshold`. Output is in
/// descending confidence order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::invalid("NMS IoU threshold must lie in (0, 1)"));
    }
    for d in dets {
        d.validate()?;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].confidence.total_cmp(&dets[i].confidence));
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept.iter().any(|&k| {
            dets[i].image_id == dets[k].image_id
                && iou_raw(&dets[i].bbox, &dets[k].bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept.into_iter().map(|i| dets[i].clone()).collect())
}

/// Per-detection true-positive flags, aligned with the input order.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_threshold: f64,
) -> Result<Vec<bool>> {
    for d in dets {
        d.validate()?;
    }
    for g in gts {
        g.bbox.validate()?;
    }
    let mut gt_by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        gt_by_image.entry(&g.image_id).or_default().push(i);
    }
    let mut det_by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        det_by_image.entry(&d.image_id).or_default().push(i);
    }
    let mut flags = vec![false; dets.len()];
    let mut gt_taken = vec![false; gts.len()];
    for (image, det_indices) in det_by_image {
        let mut order = det_indices;
        order.sort_by(|&i, &j| dets[j].confidence.total_cmp(&dets[i].confidence));
        let gt_indices = gt_by_image.get(image).map(Vec::as_slice).unwrap_or(&[]);
        for det_idx in order {
            let mut best: Option<(usize, f64)> = None;
            for &gt_idx in gt_indices {
                if gt_taken[gt_idx] {
                    continue;
                }
                let overlap = iou_raw(&dets[det_idx].bbox, &gts[gt_idx].bbox);
                let better = match best {
                    None => true,
                    Some((_, b)) => overlap > b,
                };
                if better {
                    best = Some((gt_idx, overlap));
                }
            }
            if let Some((gt_idx, overlap)) = best {
                if overlap > iou_threshold {
                    flags[det_idx] = true;
                    gt_taken[gt_idx] = true;
                }
            }
        }
    }
    Ok(flags)
}

/// Precision-recall points at descending confidence cuts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PRCurve {
    /// `(recall, precision)` at each distinct confidence cut, high to low.
    pub points: Vec<(f64, f64)>,
    pub n_gt: usize,
}

/// Sweep every distinct confidence descending and accumulate TP/FP counts.
/// With no ground truth, recall is defined as 0.
pub fn pr_curve(flags: &[(f64, bool)], n_gt: usize) -> PRCurve {
    let mut order: Vec<usize> = (0..flags.len()).collect();
    order.sort_by(|&i, &j| flags[j].0.total_cmp(&flags[i].0));
    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let cut = flags[order[i]].0;
        while i < order.len() && flags[order[i]].0 == cut {
            if flags[order[i]].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
        let precision = tp as f64 / (tp + fp) as f64;
        points.push((recall, precision));
    }
    PRCurve { points, n_gt }
}

/// 101-point interpolated average precision: mean over recall levels
/// `{0.00, 0.01, ..., 1.00}` of the maximum precision at any achieved
/// recall at or above the level (0 when none is).
pub fn interpolated_ap(curve: &PRCurve) -> f64 {
    let mut total = 0.0;
    for level in 0..=100 {
        let r = level as f64 / 100.0;
        let p = curve
            .points
            .iter()
            .filter(|(recall, _)| *recall >= r)
            .map(|&(_, precision)| precision)
            .fold(f64::NEG_INFINITY, f64::max);
        if p.is_finite() {
            total += p;
        }
    }
    total / 101.0
}

/// Match, sweep, and interpolate in one call.
pub fn ap_at(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> Result<f64> {
    let tp_flags = match_detections(dets, gts, iou_threshold)?;
    let flags: Vec<(f64, bool)> = dets
        .iter()
        .zip(&tp_flags)
        .map(|(d, &tp)| (d.confidence, tp))
        .collect();
    Ok(interpolated_ap(&pr_curve(&flags, gts.len())))
}

/// The ten COCO IoU thresholds, 0.50 through 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

/// AP at each COCO threshold plus the usual summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    /// `(iou_threshold, ap)` pairs, thresholds ascending.
    pub ap_by_threshold: Vec<(f64, f64)>,
    /// Mean of the ten thresholds.
    pub ap_coco: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Per-run summaries when this report aggregates several runs.
    pub runs: Option<Vec<RunMetrics>>,
}

/// The headline numbers of one evaluation run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub ap_coco: f64,
    pub ap50: f64,
    pub ap75: f64,
}

impl APReport {
    pub fn summary(&self) -> RunMetrics {
        RunMetrics {
            ap_coco: self.ap_coco,
            ap50: self.ap50,
            ap75: self.ap75,
        }
    }

    /// Sample standard deviation of the aggregated runs, when present.
    pub fn run_std(&self) -> Option<RunMetrics> {
        let runs = self.runs.as_ref()?;
        let pull = |f: fn(&RunMetrics) -> f64| {
            let values: Vec<f64> = runs.iter().map(f).collect();
            sample_std(&values)
        };
        Some(RunMetrics {
            ap_coco: pull(|r| r.ap_coco),
            ap50: pull(|r| r.ap50),
            ap75: pull(|r| r.ap75),
        })
    }
}

impl fmt::Display for APReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "AP@[0.50:0.95] = {:.4}", self.ap_coco)?;
        writeln!(f, "AP@0.50        = {:.4}", self.ap50)?;
        writeln!(f, "AP@0.75        = {:.4}", self.ap75)?;
        for (thr, ap) in &self.ap_by_threshold {
            writeln!(f, "  AP@{thr:.2} = {ap:.4}")?;
        }
        if let (Some(runs), Some(std)) = (self.runs.as_ref(), self.run_std()) {
            writeln!(
                f,
                "over {} runs: AP {:.4} +/- {:.4}",
                runs.len(),
                self.ap_coco,
                std.ap_coco
            )?;
        }
        Ok(())
    }
}

/// Evaluate at the ten COCO thresholds.
pub fn coco_ap(dets: &[Detection], gts: &[GroundTruth]) -> Result<APReport> {
    let mut ap_by_threshold = Vec::new();
    for thr in coco_thresholds() {
        ap_by_threshold.push((thr, ap_at(dets, gts, thr)?));
    }
    let ap_coco = ap_by_threshold.iter().map(|&(_, ap)| ap).sum::<f64>()
        / ap_by_threshold.len() as f64;
    let pick = |t: f64| {
        ap_by_threshold
            .iter()
            .find(|&&(thr, _)| (thr - t).abs() < 1e-9)
            .map(|&(_, ap)| ap)
            .unwrap_or(0.0)
    };
    Ok(APReport {
        ap50: pick(0.50),
        ap75: pick(0.75),
        ap_by_threshold,
        ap_coco,
        runs: None,
    })
}

/// AP at one threshold, split by class label.
pub fn per_class_ap(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_threshold: f64,
) -> Result<BTreeMap<String, f64>> {
    let mut classes: Vec<&str> = gts.iter().map(|g| g.bbox.class_label.as_str()).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = BTreeMap::new();
    for class in classes {
        let class_dets: Vec<Detection> = dets
            .iter()
            .filter(|d| d.bbox.class_label == class)
            .cloned()
            .collect();
        let class_gts: Vec<GroundTruth> = gts
            .iter()
            .filter(|g| g.bbox.class_label == class)
            .cloned()
            .collect();
        out.insert(class.to_string(), ap_at(&class_dets, &class_gts, iou_threshold)?);
    }
    Ok(out)
}

/// Mean of a sample.
pub fn sample_mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n-1 denominator); 0 for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = sample_mean(values);
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Combine several evaluation runs into one report whose headline values
/// are per-metric means, with per-run summaries attached for spread.
pub fn aggregate_runs(reports: &[APReport]) -> Result<APReport> {
    if reports.is_empty() {
        return Err(Error::invalid("cannot aggregate zero runs"));
    }
    let thresholds: Vec<f64> = reports[0].ap_by_threshold.iter().map(|&(t, _)| t).collect();
    for r in reports {
        let mine: Vec<f64> = r.ap_by_threshold.iter().map(|&(t, _)| t).collect();
        if mine != thresholds {
            return Err(Error::invalid("runs use different threshold grids"));
        }
    }
    let ap_by_threshold: Vec<(f64, f64)> = thresholds
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let values: Vec<f64> = reports.iter().map(|r| r.ap_by_threshold[i].1).collect();
            (t, sample_mean(&values))
        })
        .collect();
    let collect = |f: fn(&APReport) -> f64| -> Vec<f64> { reports.iter().map(f).collect() };
    Ok(APReport {
        ap_by_threshold,
        ap_coco: sample_mean(&collect(|r| r.ap_coco)),
        ap50: sample_mean(&collect(|r| r.ap50)),
        ap75: sample_mean(&collect(|r| r.ap75)),
        runs: Some(reports.iter().map(APReport::summary).collect()),
    })
}
