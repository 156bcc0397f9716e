//! Annotation files: a JSON record per image, plus YOLO text lines.
//!
//! The JSON schema is shared by ground truth and detector output — boxes
//! carry an optional confidence, omitted for ground truth:
//!
//! ```json
//! {"image": "x.png", "width": 32, "height": 32,
//!  "boxes": [{"x_min": 1.0, "y_min": 2.0, "x_max": 5.0, "y_max": 6.0,
//!             "class": "apple", "confidence": 0.9}]}
//! ```
//!
//! YOLO text is one `class_index cx cy w h` line per box, center/size
//! normalized by the image dims, printed at 6 decimals. The normalization
//! quantizes: a write/read roundtrip moves corners by at most
//! `7.5e-7 * dim` pixels (under 0.5 px for any dim below ~600k).

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::metrics::{Detection, GroundTruth};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl AnnotatedBox {
    pub fn to_bbox(&self) -> Result<BoundingBox> {
        BoundingBox::new(self.x_min, self.y_min, self.x_max, self.y_max, &self.class)
    }

    pub fn from_bbox(bbox: &BoundingBox, confidence: Option<f64>) -> Self {
        Self {
            x_min: bbox.x_min,
            y_min: bbox.y_min,
            x_max: bbox.x_max,
            y_max: bbox.y_max,
            class: bbox.class_label.clone(),
            confidence,
        }
    }
}

/// All boxes of one image, with the image's identity and dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<AnnotatedBox>,
}

impl AnnotationRecord {
    pub fn from_boxes(
        image: impl Into<String>,
        width: usize,
        height: usize,
        boxes: &[BoundingBox],
    ) -> Self {
        Self {
            image: image.into(),
            width,
            height,
            boxes: boxes
                .iter()
                .map(|b| AnnotatedBox::from_bbox(b, None))
                .collect(),
        }
    }

    pub fn from_detections(
        image: impl Into<String>,
        width: usize,
        height: usize,
        dets: &[Detection],
    ) -> Self {
        Self {
            image: image.into(),
            width,
            height,
            boxes: dets
                .iter()
                .map(|d| AnnotatedBox::from_bbox(&d.bbox, Some(d.confidence)))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.is_empty() {
            return Err(Error::invalid("annotation record with empty image name"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid(format!(
                "annotation record '{}' with zero image dims",
                self.image
            )));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            b.to_bbox()
                .map_err(|e| Error::invalid(format!("boxes[{i}]: {e}")))?;
            if b.class.is_empty() {
                return Err(Error::invalid(format!("boxes[{i}]: empty class")));
            }
            if let Some(c) = b.confidence {
                if !c.is_finite() || !(0.0..=1.0).contains(&c) {
                    return Err(Error::invalid(format!(
                        "boxes[{i}]: confidence {c} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn bounding_boxes(&self) -> Result<Vec<BoundingBox>> {
        self.validate()?;
        self.boxes.iter().map(|b| b.to_bbox()).collect()
    }

    /// Boxes as ground truth, `image_id` taken from the record.
    pub fn ground_truths(&self) -> Result<Vec<GroundTruth>> {
        self.validate()?;
        self.boxes
            .iter()
            .map(|b| GroundTruth::new(b.to_bbox()?, &self.image))
            .collect()
    }

    /// Boxes as detections; every box must carry a confidence.
    pub fn detections(&self) -> Result<Vec<Detection>> {
        self.validate()?;
        self.boxes
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let conf = b.confidence.ok_or_else(|| {
                    Error::invalid(format!(
                        "boxes[{i}] of '{}' has no confidence (not detector output?)",
                        self.image
                    ))
                })?;
                Detection::new(b.to_bbox()?, conf, &self.image)
            })
            .collect()
    }
}

pub fn write_annotation_json(path: &Path, record: &AnnotationRecord) -> Result<()> {
    record.validate()?;
    let mut text = serde_json::to_string_pretty(record)?;
    text.push('\n');
    crate::error::at_path(std::fs::write(path, text), path)?;
    Ok(())
}

pub fn read_annotation_json(path: &Path) -> Result<AnnotationRecord> {
    let display = path.display().to_string();
    let text = crate::error::at_path(std::fs::read_to_string(path), path)?;
    let record: AnnotationRecord =
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: display.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
    record.validate().map_err(|e| Error::Malformed {
        path: display,
        line: 0,
        message: e.to_string(),
    })?;
    Ok(record)
}

/// YOLO lines for a set of boxes. `classes` maps class label to line index;
/// every box must be in-bounds so the normalized values stay in [0, 1].
pub fn yolo_lines(
    boxes: &[BoundingBox],
    width: usize,
    height: usize,
    classes: &[String],
) -> Result<String> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("zero image dims"));
    }
    let mut out = String::new();
    for (i, b) in boxes.iter().enumerate() {
        b.validate()?;
        let index = classes
            .iter()
            .position(|c| c == &b.class_label)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "boxes[{i}]: class '{}' not in the class list",
                    b.class_label
                ))
            })?;
        if !b.within_bounds(width, height) {
            return Err(Error::invalid(format!(
                "boxes[{i}]: outside the {width}x{height} image"
            )));
        }
        let (cx, cy) = b.center();
        out.push_str(&format!(
            "{index} {:.6} {:.6} {:.6} {:.6}\n",
            cx / width as f64,
            cy / height as f64,
            b.width() / width as f64,
            b.height() / height as f64,
        ));
    }
    Ok(out)
}

pub fn write_yolo(
    path: &Path,
    boxes: &[BoundingBox],
    width: usize,
    height: usize,
    classes: &[String],
) -> Result<()> {
    crate::error::at_path(std::fs::write(path, yolo_lines(boxes, width, height, classes)?), path)?;
    Ok(())
}

/// Parse YOLO text back into boxes. Malformed lines are reported with their
/// line number and offending field.
pub fn parse_yolo(
    text: &str,
    width: usize,
    height: usize,
    classes: &[String],
    source: &str,
) -> Result<Vec<BoundingBox>> {
    let malformed = |line: usize, message: String| Error::Malformed {
        path: source.to_string(),
        line,
        message,
    };
    let mut boxes = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(malformed(
                lineno,
                format!("expected 5 fields, found {}", fields.len()),
            ));
        }
        let class_index: usize = fields[0]
            .parse()
            .map_err(|_| malformed(lineno, format!("field 1 (class index): '{}'", fields[0])))?;
        let class = classes.get(class_index).ok_or_else(|| {
            malformed(
                lineno,
                format!(
                    "class index {class_index} out of range (know {} classes)",
                    classes.len()
                ),
            )
        })?;
        let mut vals = [0.0f64; 4];
        for (j, v) in vals.iter_mut().enumerate() {
            let name = ["cx", "cy", "w", "h"][j];
            *v = fields[j + 1].parse().map_err(|_| {
                malformed(
                    lineno,
                    format!("field {} ({name}): '{}'", j + 2, fields[j + 1]),
                )
            })?;
            if !v.is_finite() || !(0.0..=1.0).contains(v) {
                return Err(malformed(
                    lineno,
                    format!("field {} ({name}): {v} outside [0, 1]", j + 2),
                ));
            }
        }
        let [cx, cy, w, h] = vals;
        let bbox = BoundingBox::new(
            (cx - w / 2.0) * width as f64,
            (cy - h / 2.0) * height as f64,
            (cx + w / 2.0) * width as f64,
            (cy + h / 2.0) * height as f64,
            class,
        )
        .map_err(|e| malformed(lineno, e.to_string()))?;
        boxes.push(bbox);
    }
    Ok(boxes)
}

pub fn read_yolo(
    path: &Path,
    width: usize,
    height: usize,
    classes: &[String],
) -> Result<Vec<BoundingBox>> {
    let text = crate::error::at_path(std::fs::read_to_string(path), path)?;
    parse_yolo(&text, width, height, classes, &path.display().to_string())
}
