//! Surfel map front end: supersampled index map, one-to-many data
//! association, confidence-weighted fusion and splat prediction.
//!
//! Surfel fields are generic so that a promoted pose carries derivatives into
//! fused positions, normals and confidences.

use std::io::Write;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::csfd::Scalar;
use crate::frames::{GeometryMaps, Intrinsics};
use crate::se3::PoseSE3;
use crate::tsdf::SurfacePrediction;
use crate::util::normalize;

/// Index-map cells per pixel along each axis.
pub const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surfel<S: Scalar = f64> {
    /// Global position, meters.
    pub v: Vector3<S>,
    /// Unit normal.
    pub n: Vector3<S>,
    /// Radius, meters.
    pub r: f64,
    /// Confidence counter.
    pub c: S,
    /// Frame index of the last update.
    pub t: usize,
}

impl<S: Scalar> Surfel<S> {
    pub fn real(&self) -> Surfel<f64> {
        Surfel { v: self.v.map(|x| x.re()), n: self.n.map(|x| x.re()), r: self.r, c: self.c.re(), t: self.t }
    }
}

/// Unordered surfel storage with stable indices. Removed slots are reused.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurfelMap<S: Scalar = f64> {
    pub surfels: Vec<Surfel<S>>,
    pub live: Vec<bool>,
    pub free: Vec<usize>,
}

impl<S: Scalar> SurfelMap<S> {
    pub fn new() -> Self {
        Self { surfels: Vec::new(), live: Vec::new(), free: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.live.iter().filter(|l| **l).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&mut self, s: Surfel<S>) -> usize {
        if let Some(i) = self.free.pop() {
            self.surfels[i] = s;
            self.live[i] = true;
            i
        } else {
            self.surfels.push(s);
            self.live.push(true);
            self.surfels.len() - 1
        }
    }

    pub fn remove(&mut self, i: usize) {
        if self.live.get(i).copied().unwrap_or(false) {
            self.live[i] = false;
            self.free.push(i);
        }
    }

    pub fn iter_live(&self) -> impl Iterator<Item = (usize, &Surfel<S>)> {
        self.surfels.iter().enumerate().filter(move |(i, _)| self.live[*i])
    }

    pub fn real(&self) -> SurfelMap<f64> {
        SurfelMap { surfels: self.surfels.iter().map(|s| s.real()).collect(), live: self.live.clone(), free: self.free.clone() }
    }
}

impl SurfelMap<f64> {
    pub fn lift<T: Scalar>(&self) -> SurfelMap<T> {
        SurfelMap {
            surfels: self
                .surfels
                .iter()
                .map(|s| Surfel { v: s.v.map(T::from), n: s.n.map(T::from), r: s.r, c: T::from(s.c), t: s.t })
                .collect(),
            live: self.live.clone(),
            free: self.free.clone(),
        }
    }
}

/// Supersampled grid of surfel-index lists, nearest first per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexMap {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<Vec<usize>>,
}

impl IndexMap {
    pub fn cell(&self, x: usize, y: usize) -> &[usize] {
        &self.cells[y * self.width + x]
    }

    /// Candidates of the cell block under image pixel `(x, y)`, in cell order.
    pub fn block(&self, x: usize, y: usize) -> impl Iterator<Item = usize> + '_ {
        (0..SUPERSAMPLE).flat_map(move |dy| {
            (0..SUPERSAMPLE).flat_map(move |dx| self.cell(x * SUPERSAMPLE + dx, y * SUPERSAMPLE + dy).iter().copied())
        })
    }
}

/// Supersample cell of a continuous pixel coordinate. Pixel `x` covers
/// `[x − ½, x + ½)` and owns cells `4x .. 4x + 3`.
fn cell_of(u: f64, size: usize) -> Option<usize> {
    let c = ((u + 0.5) * SUPERSAMPLE as f64).floor();
    (c >= 0.0 && c < (size * SUPERSAMPLE) as f64).then_some(c as usize)
}

/// Register every live surfel in front of the camera at the supersample cell
/// it projects to. `pose` maps camera to global coordinates.
pub fn render_index_map<S: Scalar>(map: &SurfelMap<S>, pose: &PoseSE3<f64>, k: &Intrinsics) -> IndexMap {
    let (w, h) = (k.width * SUPERSAMPLE, k.height * SUPERSAMPLE);
    let inv = pose.inverse();
    let mut entries: Vec<(usize, f64, usize)> = map
        .iter_live()
        .filter_map(|(i, s)| {
            let pc = inv.transform(&s.v.map(|x| x.re()));
            let (u, v) = k.project(&pc)?;
            Some((cell_of(v, k.height)? * w + cell_of(u, k.width)?, pc.z, i))
        })
        .collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut cells = vec![Vec::new(); w * h];
    for (c, _, i) in entries {
        cells[c].push(i);
    }
    IndexMap { width: w, height: h, cells }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssociationMode {
    /// Every candidate passing the rejection rules.
    OneToMany,
    /// Only the candidate with the largest weight.
    OneToOne,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfelParams {
    /// Largest difference in camera depth, meters.
    pub delta_depth: f64,
    /// Largest normal angle, degrees.
    pub delta_normal: f64,
    /// Largest point distance, meters.
    pub delta_distance: f64,
    /// Gaussian kernel bandwidth of the association weight, meters.
    pub sigma: f64,
    pub mode: AssociationMode,
}

impl Default for SurfelParams {
    fn default() -> Self {
        Self { delta_depth: 0.05, delta_normal: 30.0, delta_distance: 0.05, sigma: 0.025, mode: AssociationMode::OneToMany }
    }
}

/// Surfels associated with one measured pixel and their kernel weights.
pub type PixelAssociation = Vec<(usize, f64)>;

/// Candidates of pixel `(x, y)` that pass the depth, normal-angle and distance
/// rules, weighted by `exp(−d²/(2σ²))`. An empty list means the pixel starts a
/// new surfel.
pub fn associate_one_to_many<S: Scalar>(
    x: usize,
    y: usize,
    frame: &GeometryMaps<f64>,
    idx: &IndexMap,
    map: &SurfelMap<S>,
    pose: &PoseSE3<f64>,
    params: &SurfelParams,
) -> PixelAssociation {
    let i = frame.index(x, y);
    if !frame.valid[i] {
        return Vec::new();
    }
    let vc = frame.vertices[i];
    let vg = pose.transform(&vc);
    let ng = pose.rotate(&frame.normals[i]);
    let inv = pose.inverse();
    let cos_max = params.delta_normal.to_radians().cos();
    let mut out: PixelAssociation = idx
        .block(x, y)
        .filter_map(|si| {
            let s = &map.surfels[si];
            let sv = s.v.map(|q| q.re());
            let sn = s.n.map(|q| q.re());
            if (inv.transform(&sv).z - vc.z).abs() > params.delta_depth {
                return None;
            }
            if sn.dot(&ng) < cos_max {
                return None;
            }
            let d = (sv - vg).norm();
            if d > params.delta_distance {
                return None;
            }
            Some((si, (-d * d / (2.0 * params.sigma * params.sigma)).exp()))
        })
        .collect();
    if params.mode == AssociationMode::OneToOne && out.len() > 1 {
        let best = out.iter().copied().max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0))).unwrap();
        out = vec![best];
    }
    out
}

/// Associations for every pixel, row-major.
pub fn associate_frame<S: Scalar>(
    frame: &GeometryMaps<f64>,
    idx: &IndexMap,
    map: &SurfelMap<S>,
    pose: &PoseSE3<f64>,
    params: &SurfelParams,
) -> Vec<PixelAssociation> {
    (0..frame.width * frame.height)
        .into_par_iter()
        .map(|i| associate_one_to_many(i % frame.width, i / frame.width, frame, idx, map, pose, params))
        .collect()
}

/// Measurement confidence `exp(−γ²/0.72)`, with `γ` the pixel's distance
/// from the principal point over the image half-diagonal, clamped to 1.
pub fn pixel_confidence(x: f64, y: f64, k: &Intrinsics) -> f64 {
    let half_diag = 0.5 * ((k.width * k.width + k.height * k.height) as f64).sqrt();
    let gamma = (((x - k.cx).powi(2) + (y - k.cy).powi(2)).sqrt() / half_diag).min(1.0);
    (-gamma * gamma / 0.72).exp()
}

/// Radius of a new surfel at camera depth `z`.
pub fn initial_radius(z: f64, k: &Intrinsics) -> f64 {
    std::f64::consts::SQRT_2 * z / k.fx
}

/// Fuse a frame into the map. The association fixes which surfels each pixel
/// updates; kernel weights are re-evaluated in the scalar type so pose
/// perturbations reach them. Every surfel's contributions are accumulated in
/// pixel order and committed once, so the result does not depend on the
/// order pixels were associated in. Unassociated valid pixels become new
/// surfels. Returns the number of surfels created.
pub fn update_surfels<S: Scalar>(
    map: &mut SurfelMap<S>,
    assoc: &[PixelAssociation],
    frame: &GeometryMaps<S>,
    pose: &PoseSE3<S>,
    k: &Intrinsics,
    frame_index: usize,
    sigma: f64,
) -> usize {
    struct Acc<S: Scalar> {
        wv: Vector3<S>,
        wn: Vector3<S>,
        wsum: S,
        r: f64,
    }
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
    let mut acc: Vec<Option<Acc<S>>> = (0..map.surfels.len()).map(|_| None).collect();
    let mut fresh = Vec::new();
    for (i, list) in assoc.iter().enumerate() {
        if !frame.valid[i] {
            continue;
        }
        let (x, y) = (i % frame.width, i / frame.width);
        let conf = pixel_confidence(x as f64, y as f64, k);
        let vg = pose.transform(&frame.vertices[i]);
        let ng = pose.rotate(&frame.normals[i]);
        let r = initial_radius(frame.vertices[i].z.re(), k);
        if list.is_empty() {
            fresh.push(Surfel { v: vg, n: ng, r, c: S::from(conf), t: frame_index });
            continue;
        }
        for &(si, _) in list {
            let d = map.surfels[si].v - vg;
            let wc = (-(d.dot(&d)) * inv_two_sigma_sq).exp() * conf;
            let a = acc[si].get_or_insert_with(|| Acc { wv: Vector3::zeros(), wn: Vector3::zeros(), wsum: S::zero(), r: f64::INFINITY });
            a.wv += vg * wc;
            a.wn += ng * wc;
            a.wsum += wc;
            a.r = a.r.min(r);
        }
    }
    for (si, a) in acc.into_iter().enumerate() {
        let Some(a) = a else { continue };
        if a.wsum.re() <= 0.0 {
            continue;
        }
        let s = &mut map.surfels[si];
        let total = s.c + a.wsum;
        s.v = (s.v * s.c + a.wv) / total;
        if let Some(n) = normalize(&(s.n * s.c + a.wn), 1e-12) {
            s.n = n;
        }
        s.c = total;
        s.r = s.r.min(a.r);
        s.t = frame_index;
    }
    let created = fresh.len();
    for s in fresh {
        map.insert(s);
    }
    created
}

/// Associate and fuse one frame; the association is computed on real parts.
pub fn fuse_frame<S: Scalar>(
    map: &mut SurfelMap<S>,
    frame: &GeometryMaps<S>,
    pose: &PoseSE3<S>,
    k: &Intrinsics,
    frame_index: usize,
    params: &SurfelParams,
) -> Vec<PixelAssociation> {
    let real_pose = pose.real();
    let real_frame = frame.real();
    let idx = render_index_map(map, &real_pose, k);
    let assoc = associate_frame(&real_frame, &idx, map, &real_pose, params);
    update_surfels(map, &assoc, frame, pose, k, frame_index, params.sigma);
    assoc
}

/// Splat every surfel as a disk: pixels within its projected radius take the
/// intersection of their ray with the disk plane, nearest depth wins. Vertices
/// and normals are global.
pub fn predict_maps<S: Scalar>(map: &SurfelMap<S>, pose: &PoseSE3<f64>, k: &Intrinsics) -> SurfacePrediction<f64> {
    let (w, h) = (k.width, k.height);
    let inv = pose.inverse();
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut out = GeometryMaps::<f64>::empty(w, h);
    for (_, s) in map.iter_live() {
        let sv = s.v.map(|x| x.re());
        let sn = s.n.map(|x| x.re());
        let pc = inv.transform(&sv);
        let nc = inv.rotate(&sn);
        let Some((u, v)) = k.project(&pc) else { continue };
        let rad = (s.r * k.fx / pc.z).max(0.5);
        let (x0, x1) = ((u - rad).ceil().max(0.0), (u + rad).floor().min((w - 1) as f64));
        let (y0, y1) = ((v - rad).ceil().max(0.0), (v + rad).floor().min((h - 1) as f64));
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                let ray: Vector3<f64> = k.ray(x as f64, y as f64);
                let denom = ray.dot(&nc);
                if denom.abs() < 1e-9 {
                    continue;
                }
                let z = pc.dot(&nc) / denom;
                let hit = ray * z;
                if z <= 0.0 || (hit - pc).norm() > s.r.max(0.5 * pc.z / k.fx) {
                    continue;
                }
                let i = y * w + x;
                if z < zbuf[i] {
                    zbuf[i] = z;
                    out.vertices[i] = pose.transform(&hit);
                    out.normals[i] = sn;
                    out.valid[i] = true;
                }
            }
        }
    }
    out
}

/// ASCII PLY with per-vertex position, normal, radius, confidence and
/// timestamp.
pub fn write_ply<S: Scalar, W: Write>(map: &SurfelMap<S>, mut out: W) -> std::io::Result<()> {
    writeln!(out, "ply\nformat ascii 1.0\nelement vertex {}", map.len())?;
    for p in ["x", "y", "z", "nx", "ny", "nz", "radius", "confidence"] {
        writeln!(out, "property float {p}")?;
    }
    writeln!(out, "property uint timestamp\nend_header")?;
    for (_, s) in map.iter_live() {
        let s = s.real();
        writeln!(out, "{} {} {} {} {} {} {} {} {}", s.v.x, s.v.y, s.v.z, s.n.x, s.n.y, s.n.z, s.r, s.c, s.t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csfd::{ComplexScalar, StepSize};
    use crate::frames::{surface_measure, DepthFrame};
    use crate::se3::{exp_map, Twist};
    use crate::synth::{look_at, render_depth, Scene, TraceParams};
    use rand::rngs::StdRng;
    use rand::{RngExt, SeedableRng};

    fn k() -> Intrinsics {
        Intrinsics::new(130.0, 130.0, 79.5, 59.5, 160, 120).unwrap()
    }

    fn surfel(v: Vector3<f64>, n: Vector3<f64>) -> Surfel {
        Surfel { v, n, r: 0.01, c: 1.0, t: 0 }
    }

    #[test]
    fn index_map_examples() {
        let k = k();
        let empty: SurfelMap = SurfelMap::new();
        let idx = render_index_map(&empty, &PoseSE3::identity(), &k);
        assert!(idx.cells.iter().all(|c| c.is_empty()));
        assert_eq!((idx.width, idx.height), (640, 480));

        let mut one = SurfelMap::new();
        one.insert(surfel(Vector3::new(0.0, 0.0, 1.0), -Vector3::z()));
        let idx = render_index_map(&one, &PoseSE3::identity(), &k);
        let nonempty: Vec<usize> = (0..idx.cells.len()).filter(|&i| !idx.cells[i].is_empty()).collect();
        assert_eq!(nonempty.len(), 1);
        let (cx, cy) = (nonempty[0] % idx.width, nonempty[0] / idx.width);
        assert_eq!((cx, cy), (((79.5 + 0.5) * 4.0) as usize, ((59.5 + 0.5) * 4.0) as usize));
    }

    #[test]
    fn index_map_matches_brute_force() {
        let k = k();
        let mut rng = StdRng::seed_from_u64(4);
        let mut map = SurfelMap::new();
        for _ in 0..100 {
            let v = Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.2..1.2), rng.random_range(-0.5..3.0));
            map.insert(surfel(v, Vector3::z()));
        }
        map.remove(7);
        let pose = exp_map(&Twist::new(Vector3::new(0.05, -0.02, 0.1), Vector3::new(0.1, 0.0, -0.2)));
        let idx = render_index_map(&map, &pose, &k);
        let mut seen = vec![0usize; map.surfels.len()];
        for (ci, cell) in idx.cells.iter().enumerate() {
            for w in cell.windows(2) {
                let z = |i: usize| pose.inverse().transform(&map.surfels[i].v).z;
                assert!(z(w[0]) <= z(w[1]));
            }
            for &i in cell {
                seen[i] += 1;
                let pc = pose.inverse().transform(&map.surfels[i].v);
                let (u, v) = k.project(&pc).unwrap();
                assert_eq!(ci % idx.width, ((u + 0.5) * 4.0).floor() as usize);
                assert_eq!(ci / idx.width, ((v + 0.5) * 4.0).floor() as usize);
            }
        }
        for (i, s) in map.surfels.iter().enumerate() {
            let pc = pose.inverse().transform(&s.v);
            let inside = map.live[i]
                && k.project(&pc).is_some_and(|(u, v)| u >= -0.5 && v >= -0.5 && u < 159.5 && v < 119.5);
            assert_eq!(seen[i], inside as usize, "surfel {i}");
        }
    }

    fn plane_frame(z: f64) -> (GeometryMaps<f64>, Intrinsics) {
        let k = k();
        let f = DepthFrame::new(160, 120, vec![z; 160 * 120], 0.0).unwrap();
        (surface_measure(&f, &k), k)
    }

    #[test]
    fn association_examples() {
        let (frame, k) = plane_frame(1.0);
        let (x, y) = (80, 60);
        let i = frame.index(x, y);
        let v = frame.vertices[i];
        let n = frame.normals[i];
        let params = SurfelParams::default();
        let check = |surfels: Vec<Surfel>| {
            let mut map = SurfelMap::new();
            for s in surfels {
                map.insert(s);
            }
            let idx = render_index_map(&map, &PoseSE3::identity(), &k);
            associate_one_to_many(x, y, &frame, &idx, &map, &PoseSE3::identity(), &params)
        };
        assert_eq!(check(vec![surfel(v, n)]), vec![(0, 1.0)]);
        assert!(check(vec![surfel(v, -n)]).is_empty());
        let s = params.sigma;
        // offsets along the viewing direction stay inside the pixel's cells
        let dir = v.normalize();
        let got = check(vec![surfel(v, n), surfel(v + dir * s, n), surfel(v + dir * 2.0 * s, n)]);
        let expect = [1.0, (-0.5f64).exp(), (-2.0f64).exp()];
        assert_eq!(got.len(), 3);
        for ((_, w), e) in got.iter().zip(expect) {
            assert!((w - e).abs() < 1e-12, "{got:?}");
        }
        let far = check(vec![surfel(v + dir * 0.06, n)]);
        assert!(far.is_empty());
    }

    #[test]
    fn update_examples() {
        let k = k();
        assert_eq!(pixel_confidence(k.cx, k.cy, &k), 1.0);
        assert!((pixel_confidence(0.0, 0.0, &k) - (-(79.5f64.hypot(59.5) / 100.0).powi(2) / 0.72).exp()).abs() < 1e-12);
        let (frame, k) = plane_frame(1.5);
        let mut map: SurfelMap = SurfelMap::new();
        let assoc = fuse_frame(&mut map, &frame, &PoseSE3::identity(), &k, 0, &SurfelParams::default());
        assert!(assoc.iter().all(|a| a.is_empty()));
        assert_eq!(map.len(), frame.valid_count());
        let first = map.iter_live().next().unwrap().1;
        assert_eq!(first.v, frame.vertices[0]);
        assert!(first.r > 0.0 && first.r.is_finite());
        assert!((first.r - std::f64::consts::SQRT_2 * 1.5 / 130.0).abs() < 1e-15);

        // identical measurement on the principal point: w·C = 1, so a unit
        // confidence doubles
        let k = Intrinsics::new(130.0, 130.0, 80.0, 60.0, 160, 120).unwrap();
        let mut map = SurfelMap::new();
        let i = frame.index(80, 60);
        map.insert(Surfel { v: frame.vertices[i], n: frame.normals[i], r: 0.01, c: 1.0, t: 0 });
        let mut assoc = vec![Vec::new(); frame.width * frame.height];
        assoc[i] = vec![(0, 1.0)];
        let mut only = GeometryMaps::<f64>::empty(frame.width, frame.height);
        only.vertices[i] = frame.vertices[i];
        only.normals[i] = frame.normals[i];
        only.valid[i] = true;
        update_surfels(&mut map, &assoc, &only, &PoseSE3::identity(), &k, 3, 0.025);
        let s = map.surfels[0];
        assert!((s.v - frame.vertices[i]).norm() < 1e-9 && (s.n - frame.normals[i]).norm() < 1e-9);
        assert!((s.c - 2.0).abs() < 1e-12);
        assert_eq!(s.t, 3);
        assert_eq!(map.len(), 1);
    }

    fn desk(pose: &PoseSE3<f64>) -> GeometryMaps<f64> {
        let k = k();
        let d = render_depth(&Scene::desk(), pose, &k, &TraceParams::default());
        surface_measure(&DepthFrame::new(160, 120, d, 0.0).unwrap(), &k)
    }

    #[test]
    fn confidence_never_decreases_and_fused_plane_predicts_depth() {
        let (frame, k) = plane_frame(1.2);
        let mut map: SurfelMap = SurfelMap::new();
        fuse_frame(&mut map, &frame, &PoseSE3::identity(), &k, 0, &SurfelParams::default());
        let before: Vec<f64> = map.surfels.iter().map(|s| s.c).collect();
        let nudge = exp_map(&Twist::new(Vector3::new(0.0, 0.002, 0.0), Vector3::new(0.003, 0.0, 0.0)));
        fuse_frame(&mut map, &frame, &nudge, &k, 1, &SurfelParams::default());
        for (b, s) in before.iter().zip(&map.surfels) {
            assert!(s.c >= *b);
        }
        let pred = predict_maps(&map, &PoseSE3::identity(), &k);
        let errs: Vec<f64> = (0..pred.vertices.len())
            .filter(|&i| pred.valid[i] && frame.valid[i])
            .map(|i| (pred.vertices[i].z - frame.vertices[i].z).abs())
            .collect();
        assert!(errs.len() > frame.valid_count() * 9 / 10);
        assert!(crate::util::median(&errs).unwrap() <= 0.005);

        let empty: SurfelMap = SurfelMap::new();
        assert_eq!(predict_maps(&empty, &PoseSE3::identity(), &k).valid_count(), 0);
        let mut patch = SurfelMap::new();
        patch.insert(Surfel { v: Vector3::new(0.0, 0.0, 2.0), n: -Vector3::z(), r: 0.05, c: 1.0, t: 0 });
        let pred = predict_maps(&patch, &PoseSE3::identity(), &k);
        assert!(pred.valid_count() > 5);
        for i in 0..pred.vertices.len() {
            if pred.valid[i] {
                assert!((pred.vertices[i].z - 2.0).abs() < 1e-12);
            }
        }
    }

    /// Map built from the desk at `p0`, and a second frame at `p1` with its
    /// associations frozen at the real pose.
    fn two_frames() -> (SurfelMap, GeometryMaps<f64>, PoseSE3<f64>, Vec<PixelAssociation>) {
        let p0 = look_at(&Vector3::new(0.0, -0.4, 0.0), &Vector3::new(0.0, 0.15, 1.3));
        let p1 = exp_map(&Twist::new(Vector3::new(0.004, -0.006, 0.002), Vector3::new(0.01, -0.005, 0.008))).compose(&p0);
        let mut map = SurfelMap::new();
        fuse_frame(&mut map, &desk(&p0), &p0, &k(), 0, &SurfelParams::default());
        let f1 = desk(&p1);
        let idx = render_index_map(&map, &p1, &k());
        let assoc = associate_frame(&f1, &idx, &map, &p1, &SurfelParams::default());
        (map, f1, p1, assoc)
    }

    #[test]
    fn fused_position_derivative_matches_fd() {
        let (map, f1, p1, assoc) = two_frames();
        let k = k();
        let h = StepSize::default();
        let mut touched: Vec<usize> = assoc.iter().flatten().map(|a| a.0).collect();
        touched.sort_unstable();
        touched.dedup();
        let mut rng = StdRng::seed_from_u64(9);
        let probes: Vec<usize> = (0..50).map(|_| touched[rng.random_range(0..touched.len())]).collect();
        let frame_c: GeometryMaps<ComplexScalar> = GeometryMaps {
            vertices: f1.vertices.iter().map(|v| v.map(ComplexScalar::from)).collect(),
            normals: f1.normals.iter().map(|v| v.map(ComplexScalar::from)).collect(),
            width: f1.width,
            height: f1.height,
            valid: f1.valid.clone(),
        };
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..6 {
            let mut mc: SurfelMap<ComplexScalar> = map.lift();
            update_surfels(&mut mc, &assoc, &frame_c, &p1.perturbed(&Twist::zero().seed(i, h)), &k, 1, 0.025);
            let fd_at = |s: f64| {
                let mut m = map.clone();
                let mut xi = Twist::zero();
                xi.set(i, s);
                update_surfels(&mut m, &assoc, &f1, &p1.perturbed(&xi), &k, 1, 0.025);
                m
            };
            let (plus, minus) = (fd_at(eps), fd_at(-eps));
            for &si in &probes {
                let cs = mc.surfels[si].v.map(|x| x.im / h.get());
                let fd = (plus.surfels[si].v - minus.surfels[si].v) / (2.0 * eps);
                worst = worst.max((cs - fd).abs().max());
            }
        }
        assert!(worst <= 1e-4, "{worst}");
    }

    #[test]
    fn one_to_many_keeps_more_gradients() {
        let (map, f1, p1, _) = two_frames();
        let k = k();
        let h = StepSize::default();
        let count = |mode| {
            let params = SurfelParams { mode, ..SurfelParams::default() };
            let idx = render_index_map(&map, &p1, &k);
            let assoc = associate_frame(&f1, &idx, &map, &p1, &params);
            let frame_c: GeometryMaps<ComplexScalar> = GeometryMaps {
                vertices: f1.vertices.iter().map(|v| v.map(ComplexScalar::from)).collect(),
                normals: f1.normals.iter().map(|v| v.map(ComplexScalar::from)).collect(),
                width: f1.width,
                height: f1.height,
                valid: f1.valid.clone(),
            };
            let mut mc: SurfelMap<ComplexScalar> = map.lift();
            update_surfels(&mut mc, &assoc, &frame_c, &p1.perturbed(&Twist::zero().seed(3, h)), &k, 1, params.sigma);
            mc.surfels[..map.surfels.len()].iter().filter(|s| s.v.iter().any(|x| x.im != 0.0)).count()
        };
        let (many, one) = (count(AssociationMode::OneToMany), count(AssociationMode::OneToOne));
        assert!(many >= one && many > 0, "{many} {one}");
    }

    #[test]
    fn ply_export() {
        let (frame, k) = plane_frame(1.0);
        let mut map: SurfelMap = SurfelMap::new();
        fuse_frame(&mut map, &frame, &PoseSE3::identity(), &k, 0, &SurfelParams::default());
        let mut buf = Vec::new();
        write_ply(&map, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains(&format!("element vertex {}", map.len())));
        assert_eq!(text.lines().count(), 13 + map.len());
    }
}
