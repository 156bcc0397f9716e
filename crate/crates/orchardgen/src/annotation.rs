//! Annotations carried inside an image channel.
//!
//! Boxes become either high-intensity square dots at object centers or
//! 1-pixel box outlines, rasterized into a dedicated channel that rides
//! through the generative model like any other pixel data. Dots are
//! recoverable: threshold, label 4-connected components, and take image-
//! moment centroids. Outlines are encode-only — overlapping rectangles
//! cannot be disambiguated, which is exactly why the dot form exists.
//!
//! Dots must be large enough to survive the latent codec: a 1x1 mark
//! averages down to 0.25 of its intensity under factor-2 pooling and falls
//! below the extraction threshold.

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Dot/outline rasterization and extraction settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DotConfig {
    /// Side of the square dot in pixels; odd so it centers on a pixel.
    pub dot_side: usize,
    /// Raster value for marks, in channel space [0, 1].
    pub intensity: f64,
    /// Pixels strictly above this value count as annotation after decoding.
    pub extraction_threshold: f64,
    /// Which channel of a merged image carries annotations.
    pub annotation_channel: usize,
}

impl Default for DotConfig {
    fn default() -> Self {
        Self {
            dot_side: 5,
            intensity: 1.0,
            extraction_threshold: 0.5,
            annotation_channel: 2,
        }
    }
}

impl DotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dot_side == 0 || self.dot_side % 2 == 0 {
            return Err(Error::invalid("dot_side must be odd and positive"));
        }
        if !(self.intensity > 0.0 && self.intensity <= 1.0) {
            return Err(Error::invalid("intensity must lie in (0, 1]"));
        }
        if !(self.extraction_threshold > 0.0 && self.extraction_threshold < self.intensity) {
            return Err(Error::invalid(
                "extraction threshold must lie strictly between 0 and the intensity",
            ));
        }
        Ok(())
    }
}

/// A box's dot center: the rounded midpoint (half away from zero).
pub fn dot_center(bbox: &BoundingBox) -> (i64, i64) {
    let (cx, cy) = bbox.center();
    (cx.round() as i64, cy.round() as i64)
}

/// Rasterize one `dot_side x dot_side` square of `intensity` per box center
/// into a zero channel. Overlaps combine by maximum.
pub fn encode_dots(
    boxes: &[BoundingBox],
    height: usize,
    width: usize,
    config: &DotConfig,
) -> Result<ImageTensor> {
    config.validate()?;
    let half = (config.dot_side / 2) as i64;
    let mut channel = ImageTensor::zeros(1, height, width);
    for bbox in boxes {
        let (cx, cy) = dot_center(bbox);
        if cx - half < 0
            || cy - half < 0
            || cx + half >= width as i64
            || cy + half >= height as i64
        {
            return Err(Error::invalid(format!(
                "dot at ({cx}, {cy}) with side {} leaves the {width}x{height} canvas",
                config.dot_side
            )));
        }
        for y in (cy - half)..=(cy + half) {
            for x in (cx - half)..=(cx + half) {
                let (y, x) = (y as usize, x as usize);
                let v = channel.at(0, y, x);
                channel.set(0, y, x, v.max(config.intensity));
            }
        }
    }
    Ok(channel)
}

/// Rasterize 1-pixel-wide box perimeters. Each box covers the integer
/// rectangle `[floor(x_min), ceil(x_max)) x [floor(y_min), ceil(y_max))`.
pub fn encode_outlines(
    boxes: &[BoundingBox],
    height: usize,
    width: usize,
    config: &DotConfig,
) -> Result<ImageTensor> {
    config.validate()?;
    let mut channel = ImageTensor::zeros(1, height, width);
    for bbox in boxes {
        if !bbox.within_bounds(width, height) {
            return Err(Error::invalid(format!(
                "box ({}, {}, {}, {}) leaves the {width}x{height} canvas",
                bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max
            )));
        }
        let x_lo = bbox.x_min.floor() as usize;
        let y_lo = bbox.y_min.floor() as usize;
        let x_hi = (bbox.x_max.ceil() as usize).min(width);
        let y_hi = (bbox.y_max.ceil() as usize).min(height);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let on_edge = y == y_lo || y == y_hi - 1 || x == x_lo || x == x_hi - 1;
                if on_edge {
                    channel.set(0, y, x, config.intensity);
                }
            }
        }
    }
    Ok(channel)
}

/// Extracted dot centroids, sorted by `(cy, cx)`.
pub type Centroids = Vec<(f64, f64)>;

/// Recover dot centers from a decoded annotation channel: strict threshold,
/// 4-connected component labeling, intensity-weighted image moments per
/// component. Components under 4 pixels are noise and dropped.
pub fn extract_dots(channel: &ImageTensor, config: &DotConfig) -> Result<Centroids> {
    config.validate()?;
    if channel.channels() != 1 {
        return Err(Error::ShapeMismatch {
            expected: "1 channel".into(),
            actual: format!("{} channels", channel.channels()),
        });
    }
    let (_, h, w) = channel.shape();
    let mask: Vec<bool> = channel
        .data()
        .iter()
        .map(|&v| v > config.extraction_threshold)
        .collect();
    let mut labels = vec![0u32; h * w];
    let mut next_label = 0u32;
    let mut stack = Vec::new();
    let mut centroids = Vec::new();
    for start in 0..h * w {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next_label += 1;
        labels[start] = next_label;
        stack.push(start);
        let mut m00 = 0.0;
        let mut m10 = 0.0;
        let mut m01 = 0.0;
        let mut area = 0usize;
        while let Some(idx) = stack.pop() {
            let (y, x) = (idx / w, idx % w);
            let v = channel.at(0, y, x);
            m00 += v;
            m10 += v * x as f64;
            m01 += v * y as f64;
            area += 1;
            let mut visit = |ny: usize, nx: usize| {
                let nidx = ny * w + nx;
                if mask[nidx] && labels[nidx] == 0 {
                    labels[nidx] = next_label;
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
        if area >= 4 {
            centroids.push((m10 / m00, m01 / m00));
        }
    }
    centroids.sort_by(|a, b| (a.1, a.0).partial_cmp(&(b.1, b.0)).unwrap());
    Ok(centroids)
}

/// Stack `[red, green, annotation]` into a 3-channel image.
pub fn merge_annotation_channel(
    color: &ImageTensor,
    annot: &ImageTensor,
) -> Result<ImageTensor> {
    if color.channels() != 2 || annot.channels() != 1 {
        return Err(Error::ShapeMismatch {
            expected: "2-channel color plus 1-channel annotation".into(),
            actual: format!("{} and {} channels", color.channels(), annot.channels()),
        });
    }
    if color.height() != annot.height() || color.width() != annot.width() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", color.height(), color.width()),
            actual: format!("{}x{}", annot.height(), annot.width()),
        });
    }
    let (h, w) = (color.height(), color.width());
    let mut out = ImageTensor::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            out.set(0, y, x, color.at(0, y, x));
            out.set(1, y, x, color.at(1, y, x));
            out.set(2, y, x, annot.at(0, y, x));
        }
    }
    Ok(out)
}

/// Inverse of [`merge_annotation_channel`].
pub fn split_annotation_channel(image: &ImageTensor) -> Result<(ImageTensor, ImageTensor)> {
    if image.channels() != 3 {
        return Err(Error::ShapeMismatch {
            expected: "3 channels".into(),
            actual: format!("{} channels", image.channels()),
        });
    }
    let (h, w) = (image.height(), image.width());
    let mut color = ImageTensor::zeros(2, h, w);
    let mut annot = ImageTensor::zeros(1, h, w);
    for y in 0..h {
        for x in 0..w {
            color.set(0, y, x, image.at(0, y, x));
            color.set(1, y, x, image.at(1, y, x));
            annot.set(0, y, x, image.at(2, y, x));
        }
    }
    Ok((color, annot))
}

/// One channel of a multi-channel image as a standalone raster.
pub fn channel_of(image: &ImageTensor, index: usize) -> Result<ImageTensor> {
    if index >= image.channels() {
        return Err(Error::invalid(format!(
            "channel {index} of a {}-channel image",
            image.channels()
        )));
    }
    ImageTensor::from_vec(
        1,
        image.height(),
        image.width(),
        image.channel(index).to_vec(),
    )
}

/// How much annotation structure bleeds into the color channels: the mean
/// red+green intensity inside the dot footprints minus the mean outside.
pub fn leakage_score(image: &ImageTensor, dot_mask: &ImageTensor) -> Result<f64> {
    if image.channels() != 3 || dot_mask.channels() != 1 {
        return Err(Error::ShapeMismatch {
            expected: "3-channel image with 1-channel mask".into(),
            actual: format!(
                "{} and {} channels",
                image.channels(),
                dot_mask.channels()
            ),
        });
    }
    if image.height() != dot_mask.height() || image.width() != dot_mask.width() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", image.height(), image.width()),
            actual: format!("{}x{}", dot_mask.height(), dot_mask.width()),
        });
    }
    let (h, w) = (image.height(), image.width());
    let mut inside_sum = 0.0;
    let mut inside_n = 0usize;
    let mut outside_sum = 0.0;
    let mut outside_n = 0usize;
    for y in 0..h {
        for x in 0..w {
            let rg = image.at(0, y, x) + image.at(1, y, x);
            if dot_mask.at(0, y, x) > 0.0 {
                inside_sum += rg;
                inside_n += 2;
            } else {
                outside_sum += rg;
                outside_n += 2;
            }
        }
    }
    if inside_n == 0 {
        return Err(Error::invalid("dot mask is empty"));
    }
    if outside_n == 0 {
        return Err(Error::invalid("dot mask covers the whole image"));
    }
    Ok(inside_sum / inside_n as f64 - outside_sum / outside_n as f64)
}
