//! Parameter checkpoints: a little-endian binary with a shape manifest.
//!
//! Layout:
//!
//! ```text
//! magic   8 bytes  "RDNOISE1"
//! dtype   u8       element size in bytes (4 = f32, 8 = f64)
//! wmult   u32      width multiplier
//! embed   u32      embedding dimension
//! steps   u32      diffusion steps T the model was trained with
//! bstart  f64      beta range start
//! bend    f64      beta range end
//! count   u32      number of tensors
//! tensor* each:    u16 name length, name bytes,
//!                  u8 rank, u64 dims..., then elements little-endian
//! ```
//!
//! Tensors appear in [`DenoiserParams::flat`] order and the manifest is
//! verified against the architecture on load.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{DenoiserConfig, DenoiserParams};
use crate::diffusion::Scalar;

const MAGIC: &[u8; 8] = b"RDNOISE1";

/// Schedule parameters remembered alongside the weights so `sample` can
/// rebuild the training-time schedule without extra flags.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint stores {found}-byte elements, expected {expected}")]
    DtypeMismatch { found: u8, expected: u8 },
    #[error("checkpoint manifest mismatch at tensor {index}: {detail}")]
    ManifestMismatch { index: usize, detail: String },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("bad architecture in checkpoint: {0}")]
    BadArchitecture(String),
}

fn tensor_shapes<F: Scalar>(params: &DenoiserParams<F>) -> Vec<(&'static str, Vec<usize>)> {
    let conv = |names: [&'static str; 2], c: &super::Conv2d<F>| {
        vec![
            (names[0], c.weight.shape().to_vec()),
            (names[1], c.bias.shape().to_vec()),
        ]
    };
    let mut out = Vec::new();
    out.extend(conv(["down1.weight", "down1.bias"], &params.down1));
    out.extend(conv(["down2.weight", "down2.bias"], &params.down2));
    for (res, names) in [(&params.res1, super::RES1_NAMES), (&params.res2, super::RES2_NAMES)] {
        out.extend(conv([names[0], names[1]], &res.conv1));
        out.push((names[2], res.emb.weight.shape().to_vec()));
        out.push((names[3], res.emb.bias.shape().to_vec()));
        out.extend(conv([names[4], names[5]], &res.conv2));
    }
    out.extend(conv(["up1.weight", "up1.bias"], &params.up1));
    out.extend(conv(["up2.weight", "up2.bias"], &params.up2));
    out
}

pub fn save_checkpoint<F: Scalar>(
    params: &DenoiserParams<F>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(std::mem::size_of::<F>() as u8);
    out.extend_from_slice(&(params.config.width_mult as u32).to_le_bytes());
    out.extend_from_slice(&(params.config.embed_dim as u32).to_le_bytes());
    out.extend_from_slice(&(meta.steps as u32).to_le_bytes());
    out.extend_from_slice(&meta.beta_start.to_le_bytes());
    out.extend_from_slice(&meta.beta_end.to_le_bytes());

    let shapes = tensor_shapes(params);
    let flat = params.flat();
    out.extend_from_slice(&(flat.len() as u32).to_le_bytes());
    for ((name, shape), (_, values)) in shapes.iter().zip(&flat) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in values.iter() {
            let x = v.to_f64().expect("finite parameter");
            if std::mem::size_of::<F>() == 4 {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            } else {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }

    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

struct Cursor {
    bytes: Vec<u8>,
    pos: usize,
}

impl Cursor {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint<F: Scalar>(
    path: &Path,
) -> Result<(DenoiserParams<F>, CheckpointMeta), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes, pos: 0 };

    if cur.take(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let dtype = cur.u8()?;
    let expected = std::mem::size_of::<F>() as u8;
    if dtype != expected {
        return Err(CheckpointError::DtypeMismatch {
            found: dtype,
            expected,
        });
    }
    let width_mult = cur.u32()? as usize;
    let embed_dim = cur.u32()? as usize;
    let meta = CheckpointMeta {
        steps: cur.u32()? as usize,
        beta_start: cur.f64()?,
        beta_end: cur.f64()?,
    };

    let config = DenoiserConfig {
        width_mult,
        embed_dim,
    };
    let mut params = DenoiserParams::<F>::zeros(config)
        .map_err(|e| CheckpointError::BadArchitecture(e.to_string()))?;
    let expected_shapes = tensor_shapes(&params);

    let count = cur.u32()? as usize;
    if count != expected_shapes.len() {
        return Err(CheckpointError::ManifestMismatch {
            index: 0,
            detail: format!("{count} tensors, expected {}", expected_shapes.len()),
        });
    }

    for (index, (expected_name, expected_shape)) in expected_shapes.iter().enumerate() {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8_lossy(cur.take(name_len)?).into_owned();
        if name != *expected_name {
            return Err(CheckpointError::ManifestMismatch {
                index,
                detail: format!("tensor {name:?}, expected {expected_name:?}"),
            });
        }
        let rank = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u64()? as usize);
        }
        if dims != *expected_shape {
            return Err(CheckpointError::ManifestMismatch {
                index,
                detail: format!("shape {dims:?}, expected {expected_shape:?}"),
            });
        }
        let len: usize = dims.iter().product();
        let mut flat = params.flat_mut();
        let (_, slot) = &mut flat[index];
        debug_assert_eq!(slot.len(), len);
        for value in slot.iter_mut() {
            *value = if expected == 4 {
                F::cast(f64::from(f32::from_le_bytes(cur.take(4)?.try_into().unwrap())))
            } else {
                F::cast(cur.f64()?)
            };
        }
    }

    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }

    #[test]
    fn roundtrip_preserves_every_byte() {
        let dir = std::env::temp_dir().join("rolldiff-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ckpt");

        let config = DenoiserConfig {
            width_mult: 2,
            embed_dim: 16,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let params = DenoiserParams::<f32>::init(config, &mut rng).unwrap();
        save_checkpoint(&params, &meta(), &path).unwrap();
        let (loaded, loaded_meta) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(loaded_meta, meta());
    }

    #[test]
    fn dtype_mismatch_is_detected() {
        let dir = std::env::temp_dir().join("rolldiff-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dtype.ckpt");

        let params = DenoiserParams::<f64>::zeros(DenoiserConfig::default()).unwrap();
        save_checkpoint(&params, &meta(), &path).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(CheckpointError::DtypeMismatch {
                found: 8,
                expected: 4
            })
        ));
    }

    #[test]
    fn corruption_is_detected() {
        let dir = std::env::temp_dir().join("rolldiff-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("corrupt.ckpt");

        let params = DenoiserParams::<f32>::zeros(DenoiserConfig::default()).unwrap();
        save_checkpoint(&params, &meta(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() / 2);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(CheckpointError::Truncated)
        ));

        std::fs::write(&path, b"garbage!").unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(CheckpointError::BadMagic)
        ));
    }
}
