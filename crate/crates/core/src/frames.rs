//! Depth frames and per-pixel geometry: bilateral filtering, vertex and normal
//! maps, depth perturbation, the coarse-to-fine pyramid and bilinear sampling.
//!
//! Invalid depth is stored as exactly `0.0`. The perturbation channel of a
//! frame (`im`) is filtered and blurred with weights computed from the real
//! depth, so seeded derivatives follow the same linear maps as the depth.

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::csfd::{Scalar, StepSize};
use crate::util::normalize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrameError {
    #[error("pixel ({0}, {1}) has no valid depth")]
    InvalidPixel(usize, usize),
    #[error("pixel ({0}, {1}) is outside the {2}x{3} image")]
    OutOfBounds(usize, usize, usize, usize),
    #[error("pyramid needs at least one level")]
    NoLevels,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("buffer of {got} values does not match {width}x{height}")]
    SizeMismatch { got: usize, width: usize, height: usize },
}

/// Pinhole camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, FrameError> {
        if !(fx > 0.0 && fy > 0.0) || width == 0 || height == 0 || !cx.is_finite() || !cy.is_finite() {
            return Err(FrameError::InvalidIntrinsics(format!(
                "fx={fx} fy={fy} cx={cx} cy={cy} {width}x{height}"
            )));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// `K⁻¹ u̇` for a (possibly fractional) pixel.
    #[inline]
    pub fn ray<S: Scalar>(&self, u: S, v: S) -> Vector3<S> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, S::one())
    }

    /// Perspective projection `π(K p)`; `None` behind the camera.
    #[inline]
    pub fn project<S: Scalar>(&self, p: &Vector3<S>) -> Option<(S, S)> {
        if p.z.re() <= 1e-9 {
            return None;
        }
        Some((p.x / p.z * self.fx + self.cx, p.y / p.z * self.fy + self.cy))
    }

    #[inline]
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }

    /// Intrinsics of pyramid level `level` (each level halves the resolution,
    /// sizes rounded down).
    pub fn level(&self, level: usize) -> Self {
        let s = 0.5f64.powi(level as i32);
        Self {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
            width: (self.width >> level).max(1),
            height: (self.height >> level).max(1),
        }
    }
}

/// Depth image in meters. `filtered` is the depth the pipeline consumes;
/// `im` is its perturbation channel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub width: usize,
    pub height: usize,
    pub raw: Vec<f64>,
    pub filtered: Vec<f64>,
    pub im: Vec<f64>,
    pub timestamp: f64,
}

impl DepthFrame {
    /// Frame whose filtered depth equals the raw depth.
    pub fn new(width: usize, height: usize, raw: Vec<f64>, timestamp: f64) -> Result<Self, FrameError> {
        if raw.len() != width * height {
            return Err(FrameError::SizeMismatch { got: raw.len(), width, height });
        }
        let raw: Vec<f64> = raw.into_iter().map(|d| if d.is_finite() && d > 0.0 { d } else { 0.0 }).collect();
        Ok(Self { width, height, filtered: raw.clone(), im: vec![0.0; raw.len()], raw, timestamp })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn depth(&self, x: usize, y: usize) -> f64 {
        self.filtered[self.index(x, y)]
    }

    #[inline]
    pub fn depth_as<S: Scalar>(&self, i: usize) -> S {
        S::from_re_im(self.filtered[i], self.im[i])
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.depth(x, y) > 0.0
    }

    pub fn is_perturbed(&self) -> bool {
        self.im.iter().any(|&v| v != 0.0)
    }

    /// Bilinear depth at fractional pixel coordinates. Invalid neighbors are
    /// dropped and the remaining weights renormalized; `None` when no neighbor
    /// is valid or the point lies outside the image.
    pub fn sample<S: Scalar>(&self, u: S, v: S) -> Option<S> {
        self.sample_with_spread(u, v).map(|(d, _)| d)
    }

    /// Like [`DepthFrame::sample`], also returning the max − min spread of the
    /// valid neighbor depths.
    pub fn sample_with_spread<S: Scalar>(&self, u: S, v: S) -> Option<(S, f64)> {
        let (ur, vr) = (u.re(), v.re());
        if !(ur >= 0.0 && vr >= 0.0 && ur <= (self.width - 1) as f64 && vr <= (self.height - 1) as f64) {
            return None;
        }
        let x0 = ur.floor() as usize;
        let y0 = vr.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = u - x0 as f64;
        let ay = v - y0 as f64;
        let one = S::one();
        let corners = [
            (x0, y0, (one - ax) * (one - ay)),
            (x1, y0, ax * (one - ay)),
            (x0, y1, (one - ax) * ay),
            (x1, y1, ax * ay),
        ];
        let mut acc = S::zero();
        let mut wsum = S::zero();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut any = false;
        for (x, y, w) in corners {
            let i = self.index(x, y);
            if self.filtered[i] > 0.0 {
                let d: S = self.depth_as(i);
                acc += d * w;
                wsum += w;
                if w.re() > 0.0 {
                    lo = lo.min(self.filtered[i]);
                    hi = hi.max(self.filtered[i]);
                    any = true;
                }
            }
        }
        if !any || wsum.re() <= 1e-12 {
            return None;
        }
        Some((acc / wsum, hi - lo))
    }
}

/// Vertex and normal maps in camera coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryMaps<S: Scalar = f64> {
    pub width: usize,
    pub height: usize,
    pub vertices: Vec<Vector3<S>>,
    pub normals: Vec<Vector3<S>>,
    pub valid: Vec<bool>,
}

impl<S: Scalar> GeometryMaps<S> {
    pub fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        Self { width, height, vertices: vec![Vector3::zeros(); n], normals: vec![Vector3::zeros(); n], valid: vec![false; n] }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn real(&self) -> GeometryMaps<f64> {
        GeometryMaps {
            width: self.width,
            height: self.height,
            vertices: self.vertices.iter().map(|v| v.map(|x| x.re())).collect(),
            normals: self.normals.iter().map(|v| v.map(|x| x.re())).collect(),
            valid: self.valid.clone(),
        }
    }

    /// Promote real maps to another scalar type with zero perturbation.
    pub fn lift<T: Scalar>(&self) -> GeometryMaps<T> {
        GeometryMaps {
            width: self.width,
            height: self.height,
            vertices: self.vertices.iter().map(|v| v.map(|x| T::from(x.re()))).collect(),
            normals: self.normals.iter().map(|v| v.map(|x| T::from(x.re()))).collect(),
            valid: self.valid.clone(),
        }
    }

    /// Bilinear sample of vertex and normal at real pixel coordinates with
    /// renormalization over valid neighbors. The blended normal is re-normalized.
    pub fn sample(&self, u: f64, v: f64) -> Option<(Vector3<S>, Vector3<S>)> {
        // tolerate rounding just outside the image so integer pixels reproject
        const SLACK: f64 = 1e-9;
        let (wmax, hmax) = ((self.width - 1) as f64, (self.height - 1) as f64);
        if !(u >= -SLACK && v >= -SLACK && u <= wmax + SLACK && v <= hmax + SLACK) {
            return None;
        }
        let (u, v) = (u.clamp(0.0, wmax), v.clamp(0.0, hmax));
        let x0 = u.floor() as usize;
        let y0 = v.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (ax, ay) = (u - x0 as f64, v - y0 as f64);
        let corners = [
            (x0, y0, (1.0 - ax) * (1.0 - ay)),
            (x1, y0, ax * (1.0 - ay)),
            (x0, y1, (1.0 - ax) * ay),
            (x1, y1, ax * ay),
        ];
        let mut vacc = Vector3::<S>::zeros();
        let mut nacc = Vector3::<S>::zeros();
        let mut wsum = 0.0;
        for (x, y, w) in corners {
            let i = self.index(x, y);
            if self.valid[i] && w > 0.0 {
                vacc += self.vertices[i] * S::from(w);
                nacc += self.normals[i] * S::from(w);
                wsum += w;
            }
        }
        if wsum <= 1e-12 {
            return None;
        }
        let vtx = vacc / S::from(wsum);
        let n = normalize(&nacc, 1e-12)?;
        Some((vtx, n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilateralParams {
    pub sigma_s: f64,
    pub sigma_r: f64,
    pub radius: usize,
}

impl Default for BilateralParams {
    fn default() -> Self {
        Self { sigma_s: 4.5, sigma_r: 0.03, radius: 3 }
    }
}

/// Edge-preserving smoothing of the raw depth into `filtered`, and of `im`
/// with the same (real-valued) weights. Invalid pixels stay invalid and never
/// contribute.
pub fn bilateral_filter(frame: &DepthFrame, params: &BilateralParams) -> DepthFrame {
    let (w, h) = (frame.width, frame.height);
    let r = params.radius as isize;
    let inv_s = 1.0 / (2.0 * params.sigma_s * params.sigma_s);
    let inv_r = 1.0 / (2.0 * params.sigma_r * params.sigma_r);
    let out: Vec<(f64, f64)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let d0 = frame.raw[i];
            if d0 <= 0.0 {
                return (0.0, 0.0);
            }
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            let mut sum = 0.0;
            let mut sum_im = 0.0;
            let mut wsum = 0.0;
            for dy in -r..=r {
                let yy = y + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x + dx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let j = yy as usize * w + xx as usize;
                    let d = frame.raw[j];
                    if d <= 0.0 {
                        continue;
                    }
                    let ds = (dx * dx + dy * dy) as f64;
                    let wt = (-ds * inv_s - (d - d0) * (d - d0) * inv_r).exp();
                    sum += wt * d;
                    sum_im += wt * frame.im[j];
                    wsum += wt;
                }
            }
            (sum / wsum, sum_im / wsum)
        })
        .collect();
    let (filtered, im) = out.into_iter().unzip();
    DepthFrame { filtered, im, ..frame.clone() }
}

/// Vertex map `V(u) = D(u) K⁻¹ u̇` and normal map from the normalized cross
/// product of forward differences along x then y.
pub fn surface_measure<S: Scalar>(frame: &DepthFrame, k: &Intrinsics) -> GeometryMaps<S> {
    let (w, h) = (frame.width, frame.height);
    let vertices: Vec<Option<Vector3<S>>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            if frame.filtered[i] <= 0.0 {
                return None;
            }
            let d: S = frame.depth_as(i);
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            Some(k.ray(S::from(x), S::from(y)) * d)
        })
        .collect();
    let normals: Vec<Option<Vector3<S>>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            if x + 1 >= w || y + 1 >= h {
                return None;
            }
            let v = vertices[i]?;
            let vx = vertices[i + 1]?;
            let vy = vertices[i + w]?;
            normalize(&(vx - v).cross(&(vy - v)), 1e-12)
        })
        .collect();
    let mut maps = GeometryMaps::empty(w, h);
    for i in 0..w * h {
        if let (Some(v), Some(n)) = (vertices[i], normals[i]) {
            maps.vertices[i] = v;
            maps.normals[i] = n;
            maps.valid[i] = true;
        }
    }
    maps
}

/// Outcome of [`perturb_depth`].
#[derive(Debug, Clone, PartialEq, Eq, Copy)]
pub enum SeedOutcome {
    Seeded,
    /// The pixel sits on a depth discontinuity; the frame is returned unchanged.
    RefusedEdge,
}

/// Seed `im(u) = h` on the filtered depth of pixel `(x, y)` unless the summed
/// absolute depth difference to its 4-neighborhood reaches `delta_edge`.
/// Neighbors outside the image are ignored; invalid neighbors count with depth 0.
pub fn perturb_depth(
    frame: &DepthFrame,
    x: usize,
    y: usize,
    h: StepSize,
    delta_edge: f64,
) -> Result<(DepthFrame, SeedOutcome), FrameError> {
    if x >= frame.width || y >= frame.height {
        return Err(FrameError::OutOfBounds(x, y, frame.width, frame.height));
    }
    let i = frame.index(x, y);
    if frame.raw[i] <= 0.0 || frame.filtered[i] <= 0.0 {
        return Err(FrameError::InvalidPixel(x, y));
    }
    let d = frame.filtered[i];
    let mut sum = 0.0;
    let neighbors = [(x as isize - 1, y as isize), (x as isize + 1, y as isize), (x as isize, y as isize - 1), (x as isize, y as isize + 1)];
    for (nx, ny) in neighbors {
        if nx < 0 || ny < 0 || nx >= frame.width as isize || ny >= frame.height as isize {
            continue;
        }
        sum += (d - frame.depth(nx as usize, ny as usize)).abs();
    }
    if sum >= delta_edge {
        return Ok((frame.clone(), SeedOutcome::RefusedEdge));
    }
    let mut out = frame.clone();
    out.im[i] = h.get();
    Ok((out, SeedOutcome::Seeded))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PyramidParams {
    pub levels: usize,
    /// Neighbors differing from the center by more than `3·sigma_r` are dropped.
    pub sigma_r: f64,
}

impl Default for PyramidParams {
    fn default() -> Self {
        Self { levels: 3, sigma_r: 0.03 }
    }
}

#[derive(Debug, Clone)]
pub struct PyramidLevel<S: Scalar = f64> {
    pub depth: DepthFrame,
    pub maps: GeometryMaps<S>,
    pub intrinsics: Intrinsics,
}

/// Finest level first.
#[derive(Debug, Clone)]
pub struct Pyramid<S: Scalar = f64> {
    pub levels: Vec<PyramidLevel<S>>,
}

/// 5-tap Gaussian with σ = 1, normalized.
pub fn gaussian_taps() -> [f64; 5] {
    let raw = [(-2.0f64).exp(), (-0.5f64).exp(), 1.0, (-0.5f64).exp(), (-2.0f64).exp()];
    let s: f64 = raw.iter().sum();
    raw.map(|v| v / s)
}

/// Blur with the 5×5 Gaussian and keep every second pixel. Output size is
/// `floor(w/2) × floor(h/2)`; output pixel `(x, y)` is centered on input
/// `(2x, 2y)`.
pub fn downsample(frame: &DepthFrame, sigma_r: f64) -> DepthFrame {
    let taps = gaussian_taps();
    let (w, h) = (frame.width, frame.height);
    let (w2, h2) = ((w / 2).max(1), (h / 2).max(1));
    let out: Vec<(f64, f64)> = (0..w2 * h2)
        .into_par_iter()
        .map(|i| {
            let (cx, cy) = ((i % w2) * 2, (i / w2) * 2);
            let c = frame.filtered[cy * w + cx];
            if c <= 0.0 {
                return (0.0, 0.0);
            }
            let mut sum = 0.0;
            let mut sum_im = 0.0;
            let mut wsum = 0.0;
            for (ty, wy) in taps.iter().enumerate() {
                let yy = cy as isize + ty as isize - 2;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for (tx, wx) in taps.iter().enumerate() {
                    let xx = cx as isize + tx as isize - 2;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let j = yy as usize * w + xx as usize;
                    let d = frame.filtered[j];
                    if d <= 0.0 || (d - c).abs() > 3.0 * sigma_r {
                        continue;
                    }
                    let wt = wx * wy;
                    sum += wt * d;
                    sum_im += wt * frame.im[j];
                    wsum += wt;
                }
            }
            (sum / wsum, sum_im / wsum)
        })
        .collect();
    let (filtered, im): (Vec<f64>, Vec<f64>) = out.into_iter().unzip();
    DepthFrame { width: w2, height: h2, raw: filtered.clone(), filtered, im, timestamp: frame.timestamp }
}

pub fn build_pyramid<S: Scalar>(frame: &DepthFrame, k: &Intrinsics, params: &PyramidParams) -> Result<Pyramid<S>, FrameError> {
    if params.levels == 0 {
        return Err(FrameError::NoLevels);
    }
    let mut levels = Vec::with_capacity(params.levels);
    let mut depth = frame.clone();
    for l in 0..params.levels {
        if l > 0 {
            depth = downsample(&depth, params.sigma_r);
        }
        let intrinsics = k.level(l);
        let maps = surface_measure(&depth, &intrinsics);
        levels.push(PyramidLevel { depth: depth.clone(), maps, intrinsics });
    }
    Ok(Pyramid { levels })
}
