//! Volume checkpoint: a fixed little-endian header followed by raw `f32`
//! arrays `F.re`, `W.re` and, when flagged, `F.im`, `W.im`.
//!
//! Header layout: magic (8 bytes), version `u32`, dims `3×u32`, voxel size
//! `f32`, origin `3×f32`, mu `f32`, weight cap `f32`, flags `u32`
//! (bit 0: imaginary channels present).

use std::io::{Read, Write};

use nalgebra::Vector3;

use super::{TsdfError, TsdfVolume, VolumeConfig};
use crate::csfd::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CSTEPVOL";
pub const CHECKPOINT_VERSION: u32 = 1;
const FLAG_IMAGINARY: u32 = 1;

/// Loaded checkpoint; `im` holds `(F.im, W.im)` when they were saved.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub volume: TsdfVolume<f64>,
    pub im: Option<(Vec<f64>, Vec<f64>)>,
}

/// Imaginary channels are written only when some voxel is perturbed.
pub fn write_checkpoint<S: Scalar, W: Write>(vol: &TsdfVolume<S>, mut out: W) -> Result<(), TsdfError> {
    let cfg = &vol.config;
    let with_im = vol.f.iter().chain(vol.w.iter()).any(|v| v.is_perturbed());
    let mut buf = Vec::with_capacity(64 + vol.f.len() * 16);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for d in cfg.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for x in [cfg.voxel_size, cfg.origin.x, cfg.origin.y, cfg.origin.z, cfg.mu, cfg.weight_cap] {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    buf.extend_from_slice(&(if with_im { FLAG_IMAGINARY } else { 0 }).to_le_bytes());
    let mut put = |vals: &mut dyn Iterator<Item = f64>| {
        for v in vals {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    };
    put(&mut vol.f.iter().map(|v| v.re()));
    put(&mut vol.w.iter().map(|v| v.re()));
    if with_im {
        put(&mut vol.f.iter().map(|v| v.im()));
        put(&mut vol.w.iter().map(|v| v.im()));
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TsdfError> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| TsdfError::Format("truncated file".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TsdfError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, TsdfError> {
        Ok(self.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint, TsdfError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(TsdfError::Format("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TsdfError::Format(format!("unsupported version {version}")));
    }
    let dims = [cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize];
    let reals = cur.f32s(6)?;
    let flags = cur.u32()?;
    let config = VolumeConfig {
        dims,
        voxel_size: reals[0],
        origin: Vector3::new(reals[1], reals[2], reals[3]),
        mu: reals[4],
        weight_cap: reals[5],
    };
    config.validate()?;
    let n = config.voxel_count();
    let f = cur.f32s(n)?;
    let w = cur.f32s(n)?;
    let im = if flags & FLAG_IMAGINARY != 0 { Some((cur.f32s(n)?, cur.f32s(n)?)) } else { None };
    Ok(Checkpoint { volume: TsdfVolume { config, f, w }, im })
}
