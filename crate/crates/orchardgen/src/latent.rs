//! Fixed, parameter-free latent codec: block-average downsampling paired with
//! nearest-neighbor upsampling.
//!
//! Diffusion runs in the latent space; the codec moves pixel images in and
//! out. Encoding then decoding an image is lossy (blocks collapse to their
//! mean), but decoding then encoding a latent is the identity.

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Average-pool encoder / nearest-neighbor decoder with a fixed integer
/// downsampling factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentCodec {
    factor: usize,
}

impl LatentCodec {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("codec factor must be at least 1"));
        }
        Ok(Self { factor })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// Latent `(channels, height, width)` for a given image shape.
    pub fn latent_shape(&self, shape: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (c, h, w) = shape;
        if h % self.factor != 0 || w % self.factor != 0 {
            return Err(Error::invalid(format!(
                "image {h}x{w} not divisible by codec factor {}",
                self.factor
            )));
        }
        Ok((c, h / self.factor, w / self.factor))
    }

    /// Mean over each `f x f` block, per channel.
    pub fn encode(&self, image: &ImageTensor) -> Result<ImageTensor> {
        let f = self.factor;
        let (c, lh, lw) = self.latent_shape(image.shape())?;
        let mut out = ImageTensor::zeros(c, lh, lw);
        let inv = 1.0 / (f * f) as f64;
        for ch in 0..c {
            for ly in 0..lh {
                for lx in 0..lw {
                    // Row sums first, then the sum of row sums: for the
                    // factor-2 case every partial sum is a doubling, which
                    // keeps decode-then-encode bit-exact.
                    let mut total = 0.0;
                    for dy in 0..f {
                        let mut row = 0.0;
                        for dx in 0..f {
                            row += image.at(ch, ly * f + dy, lx * f + dx);
                        }
                        total += row;
                    }
                    out.set(ch, ly, lx, total * inv);
                }
            }
        }
        Ok(out)
    }

    /// Replicate each latent value over an `f x f` block.
    pub fn decode(&self, latent: &ImageTensor) -> ImageTensor {
        let f = self.factor;
        let (c, lh, lw) = latent.shape();
        let mut out = ImageTensor::zeros(c, lh * f, lw * f);
        for ch in 0..c {
            for y in 0..lh * f {
                for x in 0..lw * f {
                    out.set(ch, y, x, latent.at(ch, y / f, x / f));
                }
            }
        }
        out
    }
}
