//! Model checkpoint container.
//!
//! A checkpoint freezes everything a later stage needs to rebuild the model
//! bit-for-bit: denoiser dimensions and named parameter tensors, the noise
//! schedule, the latent codec factor, and the prompt vocabulary (tokens,
//! reserved flags, embedding table). The binary layout is little-endian
//! throughout:
//!
//! ```text
//! magic "ORCHDIFF" | version u32 | seed u64 | steps u64
//! latent_channels, features, time_dim, cond_dim u32 | residual u8
//! codec_factor u32
//! schedule_len u32 | betas f64[schedule_len]
//! vocab_len u32 | vocab_dim u32 | (token_len u32, utf8 bytes, reserved u8)*
//! table f64[vocab_len * vocab_dim]
//! tensor_count u32 | (name_len u32, utf8 bytes, data_len u64, f64[data_len])*
//! ```
//!
//! Loading validates magic, version, every embedded config, and that the
//! tensor list matches the dimensions exactly; trailing bytes are an error.
//! `save` also writes a human-readable `<file>.meta` sidecar.

use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::latent::LatentCodec;
use crate::vocab::PromptVocabulary;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"ORCHDIFF";
pub const FORMAT_VERSION: u32 = 1;

/// Everything later pipeline stages need, plus provenance (seed, step count).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub schedule: DiffusionSchedule,
    pub codec_factor: usize,
    pub vocab: PromptVocabulary,
    /// Seed of the run that produced this checkpoint.
    pub seed: u64,
    /// Optimizer steps taken to reach these parameters.
    pub steps: u64,
}

impl Checkpoint {
    /// Write the binary container plus a `<path>.meta` text sidecar carrying
    /// the creation seed, step count, and the caller's config echo.
    pub fn save(&self, path: &Path, config_echo: &str) -> Result<()> {
        let file = crate::error::at_path(std::fs::File::create(path), path)?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC)?;
        write_u32(&mut w, FORMAT_VERSION)?;
        write_u64(&mut w, self.seed)?;
        write_u64(&mut w, self.steps)?;

        let cfg = self.params.config();
        write_u32(&mut w, cfg.latent_channels as u32)?;
        write_u32(&mut w, cfg.features as u32)?;
        write_u32(&mut w, cfg.time_dim as u32)?;
        write_u32(&mut w, cfg.cond_dim as u32)?;
        w.write_all(&[cfg.residual as u8])?;
        write_u32(&mut w, self.codec_factor as u32)?;

        write_u32(&mut w, self.schedule.steps() as u32)?;
        for &b in self.schedule.betas() {
            write_f64(&mut w, b)?;
        }

        write_u32(&mut w, self.vocab.len() as u32)?;
        write_u32(&mut w, self.vocab.dim() as u32)?;
        for (token, &reserved) in self.vocab.tokens().iter().zip(self.vocab.reserved_flags()) {
            write_u32(&mut w, token.len() as u32)?;
            w.write_all(token.as_bytes())?;
            w.write_all(&[reserved as u8])?;
        }
        for &v in self.vocab.table() {
            write_f64(&mut w, v)?;
        }

        let tensors = self.params.named_tensors();
        write_u32(&mut w, tensors.len() as u32)?;
        for (name, data) in tensors {
            write_u32(&mut w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            write_u64(&mut w, data.len() as u64)?;
            for &v in data {
                write_f64(&mut w, v)?;
            }
        }
        w.flush()?;
        self.write_meta(path, config_echo)
    }

    fn write_meta(&self, path: &Path, config_echo: &str) -> Result<()> {
        let mut name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        name.push_str(".meta");
        let meta_path = path.with_file_name(name);
        let cfg = self.params.config();
        let mut text = String::new();
        text.push_str(&format!("format_version = {FORMAT_VERSION}\n"));
        text.push_str(&format!("seed = {}\n", self.seed));
        text.push_str(&format!("steps = {}\n", self.steps));
        text.push_str(&format!(
            "denoiser = latent_channels {} / features {} / time_dim {} / cond_dim {} / residual {}\n",
            cfg.latent_channels, cfg.features, cfg.time_dim, cfg.cond_dim, cfg.residual
        ));
        text.push_str(&format!("schedule_steps = {}\n", self.schedule.steps()));
        text.push_str(&format!("codec_factor = {}\n", self.codec_factor));
        text.push_str(&format!("vocab = {}\n", self.vocab.tokens().join(" ")));
        text.push_str(&format!(
            "parameter_count = {}\n",
            self.params.parameter_count()
        ));
        if !config_echo.is_empty() {
            text.push_str("\n# run configuration\n");
            text.push_str(config_echo);
            if !config_echo.ends_with('\n') {
                text.push('\n');
            }
        }
        crate::error::at_path(std::fs::write(&meta_path, text), &meta_path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = crate::error::at_path(std::fs::File::open(path), path)?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?} (not a checkpoint file?)",
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let seed = read_u64(&mut r)?;
        let steps = read_u64(&mut r)?;

        let config = DenoiserConfig {
            latent_channels: read_u32(&mut r)? as usize,
            features: read_u32(&mut r)? as usize,
            time_dim: read_u32(&mut r)? as usize,
            cond_dim: read_u32(&mut r)? as usize,
            residual: read_bool(&mut r)?,
        };
        config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("embedded denoiser config: {e}")))?;
        let codec_factor = read_u32(&mut r)? as usize;
        LatentCodec::new(codec_factor)
            .map_err(|e| Error::Checkpoint(format!("embedded codec factor: {e}")))?;

        let schedule_len = read_u32(&mut r)? as usize;
        if schedule_len > 1_000_000 {
            return Err(Error::Checkpoint(format!(
                "implausible schedule length {schedule_len}"
            )));
        }
        let betas = read_f64s(&mut r, schedule_len)?;
        let schedule = DiffusionSchedule::from_betas(betas)
            .map_err(|e| Error::Checkpoint(format!("embedded schedule: {e}")))?;

        let vocab_len = read_u32(&mut r)? as usize;
        let vocab_dim = read_u32(&mut r)? as usize;
        if vocab_len > 1_000_000 || vocab_dim > 1_000_000 {
            return Err(Error::Checkpoint("implausible vocabulary size".into()));
        }
        let mut tokens = Vec::with_capacity(vocab_len);
        let mut reserved = Vec::with_capacity(vocab_len);
        for _ in 0..vocab_len {
            tokens.push(read_string(&mut r)?);
            reserved.push(read_bool(&mut r)?);
        }
        let table = read_f64s(&mut r, vocab_len * vocab_dim)?;
        let vocab = PromptVocabulary::from_parts(tokens, reserved, vocab_dim, table)
            .map_err(|e| Error::Checkpoint(format!("embedded vocabulary: {e}")))?;

        let mut params = DenoiserParams::zeros(config)?;
        let tensor_count = read_u32(&mut r)? as usize;
        let expected: Vec<&'static str> =
            params.named_tensors().iter().map(|(n, _)| *n).collect();
        if tensor_count != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {tensor_count}",
                expected.len()
            )));
        }
        for (slot, (name, data)) in params.named_tensors_mut().into_iter().enumerate() {
            let found = read_string(&mut r)?;
            if found != name {
                return Err(Error::Checkpoint(format!(
                    "tensor {slot}: expected '{name}', found '{found}'"
                )));
            }
            let len = read_u64(&mut r)? as usize;
            if len != data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}': expected {} values, found {len}",
                    data.len()
                )));
            }
            *data = read_f64s(&mut r, len)?;
        }

        let mut probe = [0u8; 1];
        match r.read(&mut probe)? {
            0 => {}
            _ => {
                return Err(Error::Checkpoint(
                    "trailing bytes after the last tensor".into(),
                ))
            }
        }
        if !params.is_finite() {
            return Err(Error::Checkpoint("non-finite parameter values".into()));
        }

        Ok(Self {
            params,
            schedule,
            codec_factor,
            vocab,
            seed,
            steps,
        })
    }

    /// Verify another checkpoint was produced under the same model geometry:
    /// denoiser dims, schedule, codec factor, and vocabulary table must all
    /// match. Downstream stages call this before mixing artifacts.
    pub fn ensure_compatible(&self, other: &Checkpoint) -> Result<()> {
        if self.params.config() != other.params.config() {
            return Err(Error::Config(format!(
                "denoiser config mismatch between checkpoints: {:?} vs {:?}",
                self.params.config(),
                other.params.config()
            )));
        }
        if self.schedule.betas() != other.schedule.betas() {
            return Err(Error::Config(
                "noise schedule mismatch between checkpoints".into(),
            ));
        }
        if self.codec_factor != other.codec_factor {
            return Err(Error::Config(format!(
                "latent codec factor mismatch: {} vs {}",
                self.codec_factor, other.codec_factor
            )));
        }
        if self.vocab != other.vocab {
            return Err(Error::Config(
                "prompt vocabulary mismatch between checkpoints".into(),
            ));
        }
        Ok(())
    }

    /// Verify the checkpoint can process `height x width` images: the codec
    /// factor must divide both dims and the latent channel count must match.
    pub fn ensure_image_compatible(
        &self,
        channels: usize,
        height: usize,
        width: usize,
    ) -> Result<()> {
        if channels != self.params.config().latent_channels {
            return Err(Error::Config(format!(
                "checkpoint expects {} channels, images have {channels}",
                self.params.config().latent_channels
            )));
        }
        if height % self.codec_factor != 0 || width % self.codec_factor != 0 {
            return Err(Error::Config(format!(
                "codec factor {} does not divide image dims {height}x{width}",
                self.codec_factor
            )));
        }
        Ok(())
    }
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Checkpoint("file truncated".into())
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bool<R: Read>(r: &mut R) -> Result<bool> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    match b[0] {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(Error::Checkpoint(format!("bad boolean byte {other}"))),
    }
}

fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    read_exact(r, &mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 4096 {
        return Err(Error::Checkpoint(format!("implausible string length {len}")));
    }
    let mut bytes = vec![0u8; len];
    read_exact(r, &mut bytes)?;
    String::from_utf8(bytes).map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;

    fn sample_checkpoint(seed: u64) -> Checkpoint {
        let config = DenoiserConfig {
            latent_channels: 3,
            features: 4,
            time_dim: 6,
            cond_dim: 5,
            residual: false,
        };
        Checkpoint {
            params: DenoiserParams::init(config, &mut from_seed(seed)).unwrap(),
            schedule: DiffusionSchedule::linear(12, 1e-3, 0.1).unwrap(),
            codec_factor: 2,
            vocab: PromptVocabulary::standard(5, seed),
            seed,
            steps: 321,
        }
    }

    #[test]
    fn roundtrip_is_bitwise_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = sample_checkpoint(7);
        ck.save(&path, "demo = 1\n").unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ck, back);
    }

    #[test]
    fn identical_saves_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let ck = sample_checkpoint(3);
        ck.save(&a, "").unwrap();
        ck.save(&b, "").unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn meta_sidecar_records_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        sample_checkpoint(9).save(&path, "alpha = 2\n").unwrap();
        let meta = std::fs::read_to_string(dir.path().join("model.ckpt.meta")).unwrap();
        assert!(meta.contains("seed = 9"), "{meta}");
        assert!(meta.contains("steps = 321"), "{meta}");
        assert!(meta.contains("alpha = 2"), "{meta}");
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        sample_checkpoint(1).save(&path, "").unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn rejects_unsupported_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        sample_checkpoint(1).save(&path, "").unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99;
        std::fs::write(&path, bytes).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        sample_checkpoint(1).save(&path, "").unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let mut padded = bytes.clone();
        padded.push(0);
        std::fs::write(&path, padded).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn rejects_renamed_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        sample_checkpoint(1).save(&path, "").unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let needle = b"conv_mid.weight";
        let pos = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        bytes[pos] = b'x';
        std::fs::write(&path, bytes).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("conv_mid.weight"), "{err}");
    }

    #[test]
    fn compatibility_checks_each_axis() {
        let a = sample_checkpoint(1);

        let mut b = a.clone();
        b.codec_factor = 4;
        assert!(a.ensure_compatible(&b).is_err());

        let mut c = a.clone();
        c.schedule = DiffusionSchedule::linear(12, 1e-3, 0.2).unwrap();
        assert!(a.ensure_compatible(&c).is_err());

        let mut d = a.clone();
        d.vocab = PromptVocabulary::standard(5, 999);
        assert!(a.ensure_compatible(&d).is_err());

        let e = a.clone();
        assert!(a.ensure_compatible(&e).is_ok());
    }

    #[test]
    fn image_compatibility_requires_divisible_dims() {
        let ck = sample_checkpoint(1);
        assert!(ck.ensure_image_compatible(3, 32, 32).is_ok());
        assert!(ck.ensure_image_compatible(3, 31, 32).is_err());
        assert!(ck.ensure_image_compatible(2, 32, 32).is_err());
    }
}
