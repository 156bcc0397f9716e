//! A color-blob detector: the simplest thing that closes the evaluation
//! loop on procedural scenes. Real detector outputs are ingested from files
//! instead; this exists so the pipeline can be exercised end to end without
//! any external model.
//!
//! Per image: threshold the color channels on Euclidean distance to the
//! target apple color, label 4-connected components, report each
//! component's tight box (pixels as unit squares centered on their
//! coordinates) with confidence equal to the mean color-match score.

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::metrics::Detection;
use crate::scene::{BackgroundSpec, ColorClass, APPLE_CLASS};
use crate::tensor::ImageTensor;
use serde::{Deserialize, Serialize};

/// Blob detection settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobDetectorConfig {
    /// Apple color to look for, `(red, green)` in model space.
    pub target_color: (f64, f64),
    /// A pixel matches when its color distance is strictly below this.
    pub distance_threshold: f64,
    /// Components smaller than this many pixels are discarded as noise.
    pub min_area: usize,
}

impl BlobDetectorConfig {
    /// Threshold at half the background-to-apple distance: an anti-aliased
    /// edge pixel matches exactly when the disc covers more than half of it,
    /// so mask footprints track the true disc radius.
    pub fn for_class(class: ColorClass, background: &BackgroundSpec) -> Self {
        let (ar, ag) = class.apple_color();
        let dist = ((ar - background.red).powi(2) + (ag - background.green).powi(2)).sqrt();
        Self {
            target_color: (ar, ag),
            distance_threshold: dist / 2.0,
            min_area: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.distance_threshold > 0.0 && self.distance_threshold.is_finite()) {
            return Err(Error::invalid("distance threshold must be positive"));
        }
        Ok(())
    }
}

/// Detect apple-colored blobs in one scene image (first two channels).
pub fn detect_blobs(
    image: &ImageTensor,
    config: &BlobDetectorConfig,
    image_id: &str,
) -> Result<Vec<Detection>> {
    config.validate()?;
    if image.channels() < 2 {
        return Err(Error::ShapeMismatch {
            expected: "at least 2 channels".into(),
            actual: format!("{} channels", image.channels()),
        });
    }
    let (_, h, w) = image.shape();
    let (tr, tg) = config.target_color;
    let score = |y: usize, x: usize| -> f64 {
        let d = ((image.at(0, y, x) - tr).powi(2) + (image.at(1, y, x) - tg).powi(2)).sqrt();
        1.0 - d / config.distance_threshold
    };
    let mask: Vec<bool> = (0..h * w)
        .map(|i| score(i / w, i % w) > 0.0)
        .collect();

    let mut labels = vec![false; h * w]; // visited
    let mut stack = Vec::new();
    let mut detections = Vec::new();
    for start in 0..h * w {
        if !mask[start] || labels[start] {
            continue;
        }
        labels[start] = true;
        stack.push(start);
        let (mut min_x, mut min_y) = (w, h);
        let (mut max_x, mut max_y) = (0usize, 0usize);
        let mut total_score = 0.0;
        let mut area = 0usize;
        while let Some(idx) = stack.pop() {
            let (y, x) = (idx / w, idx % w);
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
            total_score += score(y, x);
            area += 1;
            let mut visit = |ny: usize, nx: usize| {
                let nidx = ny * w + nx;
                if mask[nidx] && !labels[nidx] {
                    labels[nidx] = true;
                    stack.push(nidx);
                }
            };
            if y > 0 {
                visit(y - 1, x);
            }
            if y + 1 < h {
                visit(y + 1, x);
            }
            if x > 0 {
                visit(y, x - 1);
            }
            if x + 1 < w {
                visit(y, x + 1);
            }
        }
        if area < config.min_area {
            continue;
        }
        let bbox = BoundingBox::new(
            min_x as f64 - 0.5,
            min_y as f64 - 0.5,
            max_x as f64 + 0.5,
            max_y as f64 + 0.5,
            APPLE_CLASS,
        )?;
        let confidence = (total_score / area as f64).clamp(0.0, 1.0);
        detections.push(Detection::new(bbox, confidence, image_id)?);
    }
    Ok(detections)
}
