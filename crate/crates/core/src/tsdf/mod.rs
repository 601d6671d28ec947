//! Dense truncated signed distance volume: fusion of depth frames, trilinear
//! sampling, ray casting and iso-surface extraction.
//!
//! Signed distances are positive in front of the observed surface (free space)
//! and negative behind it, normalized by the truncation band `mu` and clamped
//! to `[-1, 1]`. Untouched voxels hold `F = 1`, `W = 0`.

mod io;
mod mesh;
mod raycast;

pub use io::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use mesh::{extract_mesh, Mesh};
pub use raycast::{raycast, refine_crossing, RaycastParams, SurfacePrediction};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::csfd::Scalar;
use crate::frames::{DepthFrame, Intrinsics};
use crate::se3::PoseSE3;

#[derive(Debug, Error)]
pub enum TsdfError {
    #[error("invalid volume configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeConfig {
    /// Voxels along x, y, z.
    pub dims: [usize; 3],
    pub voxel_size: f64,
    /// Corner of the volume; voxel `(i, j, k)` is centered at
    /// `origin + (i + ½, j + ½, k + ½)·voxel_size`.
    pub origin: Vector3<f64>,
    /// Truncation distance in meters.
    pub mu: f64,
    /// Upper bound of the fusion weight.
    pub weight_cap: f64,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        Self::cube(128, 0.02, Vector3::new(0.0, 0.0, 1.28))
    }
}

impl VolumeConfig {
    /// `n³` voxels of size `voxel_size` centered on `center`, with
    /// `mu = 5·voxel_size`.
    pub fn cube(n: usize, voxel_size: f64, center: Vector3<f64>) -> Self {
        let half = 0.5 * n as f64 * voxel_size;
        Self {
            dims: [n; 3],
            voxel_size,
            origin: center - Vector3::repeat(half),
            mu: 5.0 * voxel_size,
            weight_cap: 128.0,
        }
    }

    pub fn validate(&self) -> Result<(), TsdfError> {
        if self.dims.iter().any(|&d| d < 2) {
            return Err(TsdfError::InvalidConfig(format!("dims {:?} must be at least 2", self.dims)));
        }
        if !(self.voxel_size > 0.0 && self.mu > 0.0 && self.weight_cap > 0.0) {
            return Err(TsdfError::InvalidConfig(format!(
                "voxel_size={} mu={} weight_cap={}",
                self.voxel_size, self.mu, self.weight_cap
            )));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    #[inline]
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.voxel_size
    }

    /// Axis-aligned bounds of the voxel centers.
    pub fn center_bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let lo = self.voxel_center(0, 0, 0);
        let hi = self.voxel_center(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1);
        (lo, hi)
    }
}

/// `Ψ`: signed distance `eta` normalized by `mu` and clamped to `[-1, 1]`;
/// `None` (skip the voxel) when `eta < -mu`. `Ψ(0) = 0`.
#[inline]
pub fn truncate<S: Scalar>(eta: S, mu: f64) -> Option<S> {
    let e = eta.re();
    if e < -mu {
        None
    } else if e >= mu {
        Some(S::one())
    } else {
        Some(eta / mu)
    }
}

/// Camera pose prepared for projecting global points.
#[derive(Debug, Clone, Copy)]
pub struct CameraView<S: Scalar> {
    rot_inv: Matrix3<S>,
    trans_inv: Vector3<S>,
    center: Vector3<S>,
}

impl<S: Scalar> CameraView<S> {
    pub fn new(pose: &PoseSE3<S>) -> Self {
        let inv = pose.inverse();
        Self { rot_inv: inv.rot, trans_inv: inv.trans, center: pose.trans }
    }

    #[inline]
    pub fn to_camera(&self, p: &Vector3<S>) -> Vector3<S> {
        self.rot_inv * p + self.trans_inv
    }
}

/// Truncated signed distance that the frame observes at global point `p`, or
/// `None` when the point is outside the frustum, the depth lookup fails, the
/// lookup straddles a depth discontinuity wider than `mu`, or the point lies
/// more than `mu` behind the surface.
#[inline]
pub fn measure_point<S: Scalar>(
    p: &Vector3<f64>,
    cam: &CameraView<S>,
    frame: &DepthFrame,
    k: &Intrinsics,
    mu: f64,
) -> Option<S> {
    let pg: Vector3<S> = p.map(S::from);
    let pc = cam.to_camera(&pg);
    let (u, v) = k.project(&pc)?;
    if !k.contains(u.re(), v.re()) {
        return None;
    }
    let (depth, spread) = frame.sample_with_spread(u, v)?;
    if spread > mu {
        return None;
    }
    let rx = (u - k.cx) / k.fx;
    let ry = (v - k.cy) / k.fy;
    let lambda = (rx * rx + ry * ry + 1.0).sqrt();
    let diff = cam.center - pg;
    let dist = diff.dot(&diff).sqrt();
    truncate(depth - dist / lambda, mu)
}

/// Voxel grid of signed distances `f` and weights `w`, x-fastest order.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume<S: Scalar = f64> {
    pub config: VolumeConfig,
    pub f: Vec<S>,
    pub w: Vec<S>,
}

impl<S: Scalar> TsdfVolume<S> {
    pub fn new(config: VolumeConfig) -> Result<Self, TsdfError> {
        config.validate()?;
        let n = config.voxel_count();
        Ok(Self { config, f: vec![S::one(); n], w: vec![S::zero(); n] })
    }

    pub fn real(&self) -> TsdfVolume<f64> {
        TsdfVolume {
            config: self.config,
            f: self.f.iter().map(|v| v.re()).collect(),
            w: self.w.iter().map(|v| v.re()).collect(),
        }
    }

    pub fn observed_count(&self) -> usize {
        self.w.iter().filter(|w| w.re() > 0.0).count()
    }

    /// Fuse one depth frame taken from `pose` (camera → global) into the
    /// running weighted average. Pose and depth perturbations propagate into
    /// `f` and `w`. Returns the number of updated voxels.
    pub fn integrate(&mut self, frame: &DepthFrame, k: &Intrinsics, pose: &PoseSE3<S>) -> usize {
        let cfg = self.config;
        let cam = CameraView::new(pose);
        let slice = cfg.dims[0] * cfg.dims[1];
        self.f
            .par_chunks_mut(slice)
            .zip(self.w.par_chunks_mut(slice))
            .enumerate()
            .map(|(kz, (fs, ws))| {
                let mut updated = 0;
                for j in 0..cfg.dims[1] {
                    for i in 0..cfg.dims[0] {
                        let p = cfg.voxel_center(i, j, kz);
                        let Some(fd) = measure_point(&p, &cam, frame, k, cfg.mu) else {
                            continue;
                        };
                        let idx = i + cfg.dims[0] * j;
                        let w = ws[idx];
                        let wn = w + 1.0;
                        fs[idx] = (fs[idx] * w + fd) / wn;
                        ws[idx] = if wn.re() > cfg.weight_cap { S::from(cfg.weight_cap) } else { wn };
                        updated += 1;
                    }
                }
                updated
            })
            .sum()
    }
}

impl TsdfVolume<f64> {
    pub fn lift<T: Scalar>(&self) -> TsdfVolume<T> {
        TsdfVolume {
            config: self.config,
            f: self.f.iter().map(|&v| T::from(v)).collect(),
            w: self.w.iter().map(|&v| T::from(v)).collect(),
        }
    }

    /// Trilinear interpolation of `f` at a global point. Coordinates are
    /// clamped to the voxel-center grid. The flag reports whether all eight
    /// corners have been observed.
    pub fn sample<P: Scalar>(&self, p: &Vector3<P>) -> (P, bool) {
        let cfg = &self.config;
        let mut base = [0usize; 3];
        let mut frac = [P::zero(); 3];
        for a in 0..3 {
            let g = (p[a] - cfg.origin[a]) / cfg.voxel_size - 0.5;
            let top = (cfg.dims[a] - 1) as f64;
            let g = if g.re() < 0.0 {
                P::zero()
            } else if g.re() > top {
                P::from(top)
            } else {
                g
            };
            let i0 = (g.re().floor() as usize).min(cfg.dims[a] - 2);
            base[a] = i0;
            frac[a] = g - i0 as f64;
        }
        let mut acc = P::zero();
        let mut observed = true;
        for c in 0..8 {
            let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            let idx = cfg.index(base[0] + dx, base[1] + dy, base[2] + dz);
            observed &= self.w[idx] > 0.0;
            let wx = if dx == 1 { frac[0] } else { P::one() - frac[0] };
            let wy = if dy == 1 { frac[1] } else { P::one() - frac[1] };
            let wz = if dz == 1 { frac[2] } else { P::one() - frac[2] };
            acc += wx * wy * wz * self.f[idx];
        }
        (acc, observed)
    }

    /// Gradient of the interpolated field by central differences one voxel
    /// apart.
    pub fn gradient<P: Scalar>(&self, p: &Vector3<P>) -> Vector3<P> {
        let h = self.config.voxel_size;
        let mut g = Vector3::zeros();
        for a in 0..3 {
            let mut fwd = *p;
            let mut bwd = *p;
            fwd[a] += P::from(h);
            bwd[a] -= P::from(h);
            g[a] = (self.sample(&fwd).0 - self.sample(&bwd).0) / (2.0 * h);
        }
        g
    }
}

/// Fuse `frame` into `vol` at `pose`; see [`TsdfVolume::integrate`].
pub fn surface_update<S: Scalar>(vol: &mut TsdfVolume<S>, pose: &PoseSE3<S>, frame: &DepthFrame, k: &Intrinsics) -> usize {
    vol.integrate(frame, k, pose)
}
