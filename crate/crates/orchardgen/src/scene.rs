//! Procedural toy-orchard scenes with ground truth for free.
//!
//! Each scene is a textured two-color background plus anti-aliased discs
//! ("apples") of a single class color, drawn in model space `[-1, 1]` with
//! channel layout `[red, green, annotation]`. The annotation plane is empty
//! (`-1`) here; fine-tuning data fills it later. Every disc comes back with
//! its analytically tight bounding box, so detection metrics can be closed
//! end to end without hand labeling.

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::ImageTensor;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

/// Class label attached to every disc's box.
pub const APPLE_CLASS: &str = "apple";

/// Model-space value of an empty annotation plane.
pub const EMPTY_ANNOTATION: f64 = -1.0;

/// Which apple color a scene uses. One class per scene: the generation
/// pipeline trains one subject per color, so scenes never mix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorClass {
    Green,
    Red,
}

impl ColorClass {
    /// Disc color as `(red, green)` in model space.
    pub fn apple_color(self) -> (f64, f64) {
        match self {
            ColorClass::Red => (0.85, -0.65),
            ColorClass::Green => (-0.45, 0.80),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ColorClass::Green => "green",
            ColorClass::Red => "red",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "green" => Ok(ColorClass::Green),
            "red" => Ok(ColorClass::Red),
            other => Err(Error::invalid(format!("unknown color class '{other}'"))),
        }
    }
}

/// Background texture: a flat `(red, green)` tone plus uniform noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub red: f64,
    pub green: f64,
    /// Half-width of the uniform per-pixel perturbation.
    pub noise_amplitude: f64,
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        Self {
            red: -0.55,
            green: -0.15,
            noise_amplitude: 0.10,
        }
    }
}

/// Everything that shapes one scene draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive range for the number of discs.
    pub apple_count_range: (usize, usize),
    /// Inclusive range for disc radii in pixels.
    pub radius_range: (f64, f64),
    pub color_class: ColorClass,
    pub background: BackgroundSpec,
    /// Chance that a disc may overlap already-placed discs. At 0 discs are
    /// rejection-sampled to stay disjoint (and are dropped if no free spot
    /// is found), so held-out evaluation scenes are unoccluded.
    pub occlusion_prob: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            apple_count_range: (1, 3),
            radius_range: (2.0, 3.5),
            color_class: ColorClass::Red,
            background: BackgroundSpec::default(),
            occlusion_prob: 0.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("scene dimensions must be positive"));
        }
        if self.apple_count_range.0 > self.apple_count_range.1 {
            return Err(Error::invalid("apple count range is inverted"));
        }
        if !(self.radius_range.0 >= 2.0 && self.radius_range.1 >= self.radius_range.0) {
            return Err(Error::invalid("radii must be >= 2 px and ordered"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::invalid("occlusion probability must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.background.noise_amplitude) {
            return Err(Error::invalid("noise amplitude must lie in [0, 1]"));
        }
        let max_radius = self.radius_range.1;
        let fits = 2.0 * max_radius + 1.0 <= self.height.min(self.width) as f64;
        if !fits {
            return Err(Error::invalid("largest disc does not fit in the canvas"));
        }
        Ok(())
    }

    /// Same scene geometry with the other color.
    pub fn with_color(&self, color_class: ColorClass) -> Self {
        Self {
            color_class,
            ..self.clone()
        }
    }
}

/// Analytic tight box of a disc: `(cx - r, cy - r, cx + r, cy + r)`.
pub fn disc_box(cx: f64, cy: f64, radius: f64) -> BoundingBox {
    BoundingBox::new(cx - radius, cy - radius, cx + radius, cy + radius, APPLE_CLASS)
        .expect("disc box has positive extent")
}

/// Paint one anti-aliased disc over the color channels. Pixel coverage is
/// `clamp(r + 0.5 - dist, 0, 1)` of the center distance; the disc color is
/// alpha-blended over whatever is already there.
pub fn draw_disc(image: &mut ImageTensor, cx: f64, cy: f64, radius: f64, color: (f64, f64)) {
    let (_, h, w) = image.shape();
    let y_lo = ((cy - radius - 1.0).floor().max(0.0)) as usize;
    let y_hi = ((cy + radius + 1.0).ceil() as usize).min(h.saturating_sub(1));
    let x_lo = ((cx - radius - 1.0).floor().max(0.0)) as usize;
    let x_hi = ((cx + radius + 1.0).ceil() as usize).min(w.saturating_sub(1));
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dist = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let coverage = (radius + 0.5 - dist).clamp(0.0, 1.0);
            if coverage > 0.0 {
                let r0 = image.at(0, y, x);
                let g0 = image.at(1, y, x);
                image.set(0, y, x, r0 + coverage * (color.0 - r0));
                image.set(1, y, x, g0 + coverage * (color.1 - g0));
            }
        }
    }
}

/// Generate one scene. Deterministic given the RNG state; draw order is
/// background noise, disc count, then per disc (overlap coin, radius,
/// placement attempts).
pub fn gen_scene(spec: &SceneSpec, rng: &mut Rng) -> Result<(ImageTensor, Vec<BoundingBox>)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut image = ImageTensor::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            let amp = spec.background.noise_amplitude;
            let nr: f64 = rng.gen_range(-amp..=amp);
            let ng: f64 = rng.gen_range(-amp..=amp);
            image.set(0, y, x, (spec.background.red + nr).clamp(-1.0, 1.0));
            image.set(1, y, x, (spec.background.green + ng).clamp(-1.0, 1.0));
            image.set(2, y, x, EMPTY_ANNOTATION);
        }
    }

    let (lo, hi) = spec.apple_count_range;
    let count = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let color = spec.color_class.apple_color();
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    let mut boxes = Vec::new();
    for _ in 0..count {
        let allow_overlap = rng.gen::<f64>() < spec.occlusion_prob;
        let (r_lo, r_hi) = spec.radius_range;
        let radius = if r_lo == r_hi {
            r_lo
        } else {
            rng.gen_range(r_lo..=r_hi)
        };
        let mut found = None;
        for _attempt in 0..64 {
            let cx = rng.gen_range(radius..=(w as f64 - 1.0 - radius));
            let cy = rng.gen_range(radius..=(h as f64 - 1.0 - radius));
            let clear = placed.iter().all(|&(px, py, pr)| {
                let dist = ((cx - px).powi(2) + (cy - py).powi(2)).sqrt();
                dist > radius + pr + 2.0
            });
            if allow_overlap || clear {
                found = Some((cx, cy));
                break;
            }
        }
        if let Some((cx, cy)) = found {
            draw_disc(&mut image, cx, cy, radius, color);
            placed.push((cx, cy, radius));
            boxes.push(disc_box(cx, cy, radius));
        }
    }
    Ok((image, boxes))
}
