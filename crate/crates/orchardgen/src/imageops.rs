//! Raster utilities: cropping, resizing, range mapping, and PNG I/O.
//!
//! Model space is `[-1, 1]` per channel. Files are 8-bit PNGs; the mapping
//! is `v = pixel / 127.5 - 1` on load and `pixel = round((v + 1) * 127.5)`
//! (half away from zero, clamped) on save, so a load→save→load cycle is
//! byte-stable and a save→load roundtrip moves any value by at most half a
//! quantization step.

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;
use image::{DynamicImage, GrayImage, ImageReader, RgbImage};
use std::path::Path;

/// Center crop to a `side x side` square. Offsets are
/// `floor((W - side) / 2)` and `floor((H - side) / 2)`, so an odd remainder
/// loses the extra pixel on the leading edge.
pub fn center_crop(image: &ImageTensor, side: usize) -> Result<ImageTensor> {
    let (c, h, w) = image.shape();
    if side == 0 || side > h.min(w) {
        return Err(Error::invalid(format!(
            "crop side {side} does not fit a {w}x{h} image"
        )));
    }
    let x_off = (w - side) / 2;
    let y_off = (h - side) / 2;
    let mut out = ImageTensor::zeros(c, side, side);
    for ch in 0..c {
        for y in 0..side {
            for x in 0..side {
                out.set(ch, y, x, image.at(ch, y + y_off, x + x_off));
            }
        }
    }
    Ok(out)
}

/// Bilinear resize with the align-corners=false convention: output pixel
/// `x` samples source coordinate `(x + 0.5) * w_in / w_out - 0.5`, clamped
/// to the source grid (edge pixels repeat). Identity sizes return a clone,
/// bit for bit.
pub fn resize_bilinear(image: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    let (c, h, w) = image.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be positive"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(image.clone());
    }
    let mut out = ImageTensor::zeros(c, out_h, out_w);
    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;
    for y in 0..out_h {
        let sy = ((y as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for x in 0..out_w {
            let sx = ((x as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let v00 = image.at(ch, y0, x0);
                let v01 = image.at(ch, y0, x1);
                let v10 = image.at(ch, y1, x0);
                let v11 = image.at(ch, y1, x1);
                let v = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
                out.set(ch, y, x, v);
            }
        }
    }
    Ok(out)
}

/// `[-1, 1]` model values to `[0, 1]` channel values.
pub fn to_unit_range(image: &ImageTensor) -> ImageTensor {
    image.map(|v| (v + 1.0) / 2.0)
}

/// `[0, 1]` channel values to `[-1, 1]` model values.
pub fn to_model_range(image: &ImageTensor) -> ImageTensor {
    image.map(|v| 2.0 * v - 1.0)
}

/// Model-space value to an 8-bit pixel.
pub fn quantize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// 8-bit pixel to its model-space value.
pub fn dequantize(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

/// Write a 1-channel (grayscale) or 3-channel (RGB) model-space image as an
/// 8-bit PNG.
pub fn save_png(image: &ImageTensor, path: &Path) -> Result<()> {
    let (c, h, w) = image.shape();
    match c {
        1 => {
            let mut buf = GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    buf.put_pixel(x as u32, y as u32, image::Luma([quantize(image.at(0, y, x))]));
                }
            }
            buf.save_with_format(path, image::ImageFormat::Png)?;
        }
        3 => {
            let mut buf = RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let px = image::Rgb([
                        quantize(image.at(0, y, x)),
                        quantize(image.at(1, y, x)),
                        quantize(image.at(2, y, x)),
                    ]);
                    buf.put_pixel(x as u32, y as u32, px);
                }
            }
            buf.save_with_format(path, image::ImageFormat::Png)?;
        }
        other => {
            return Err(Error::invalid(format!(
                "PNG export supports 1 or 3 channels, not {other}"
            )));
        }
    }
    Ok(())
}

/// Read an 8-bit grayscale or RGB PNG into model space.
pub fn load_png(path: &Path) -> Result<ImageTensor> {
    let decoded = crate::error::at_path(ImageReader::open(path), path)?.decode()?;
    match decoded {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let mut out = ImageTensor::zeros(1, h, w);
            for y in 0..h {
                for x in 0..w {
                    out.set(0, y, x, dequantize(buf.get_pixel(x as u32, y as u32).0[0]));
                }
            }
            Ok(out)
        }
        DynamicImage::ImageRgb8(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let mut out = ImageTensor::zeros(3, h, w);
            for y in 0..h {
                for x in 0..w {
                    let px = buf.get_pixel(x as u32, y as u32).0;
                    for c in 0..3 {
                        out.set(c, y, x, dequantize(px[c]));
                    }
                }
            }
            Ok(out)
        }
        other => Err(Error::invalid(format!(
            "unsupported PNG pixel layout {:?}; expected 8-bit grayscale or RGB",
            other.color()
        ))),
    }
}
