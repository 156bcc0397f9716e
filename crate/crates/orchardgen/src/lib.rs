//! Desk-scale synthetic-dataset generation for orchard object detection.
//!
//! The crate covers the whole loop on a laptop CPU:
//!
//! * Gaussian diffusion mathematics ([`diffusion`]) with a small
//!   time- and prompt-conditioned noise predictor ([`denoiser`]) trained by
//!   exact reverse-mode gradients and Adam ([`adam`]).
//! * A fixed average-pool latent codec ([`latent`]) so the diffusion runs in
//!   a compressed space.
//! * Subject fine-tuning with class prior preservation ([`dreambooth`]).
//! * Bounding-box annotations carried inside an image channel
//!   ([`annotation`]): dot/outline encoding, centroid extraction via
//!   connected components and image moments, and a leakage diagnostic.
//! * Procedural orchard scenes, manifests, and file formats
//!   ([`scene`], [`manifest`], [`annotation_io`], [`imageops`]).
//! * A PCA -> t-SNE -> k-means curation filter ([`curate`]).
//! * Detection scoring: IoU, NMS, PR curves, interpolated and COCO-style
//!   average precision ([`metrics`]), plus a color-blob stand-in detector
//!   ([`detect`]).
//! * A reproducible pipeline driver ([`pipeline`], [`config`]) behind the
//!   `orchardgen` binary.
//!
//! Every operation is a pure function of its inputs and an explicit seed;
//! re-running any stage with the same seed reproduces its artifacts byte for
//! byte. Start with the runnable programs under `examples/`.

pub mod adam;
pub mod annotation;
pub mod annotation_io;
pub mod bbox;
pub mod checkpoint;
pub mod config;
pub mod curate;
pub mod denoiser;
pub mod detect;
pub mod diffusion;
pub mod dreambooth;
pub mod error;
pub mod gradcheck;
pub mod imageops;
pub mod latent;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod vocab;

pub use bbox::BoundingBox;
pub use error::{Error, Result};
pub use tensor::ImageTensor;
