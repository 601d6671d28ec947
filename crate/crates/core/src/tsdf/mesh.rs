use std::collections::HashMap;
use std::io::{self, Write};

use nalgebra::Vector3;

use super::TsdfVolume;

/// Indexed triangle mesh. Triangles wind counter-clockwise seen from the
/// positive (free-space) side.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
}

// Cube corner offsets, bit 0 = x, bit 1 = y, bit 2 = z.
const CORNER: [[usize; 3]; 8] = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]];

// Six tetrahedra sharing the 0–7 diagonal, one per axis ordering. Every cube
// uses the same split, so shared faces are cut along the same diagonal.
const TETS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

/// Triangulate the `f = 0` level set of the observed part of the volume by
/// marching tetrahedra. Cells with any unobserved corner are skipped.
/// Vertices on shared edges are welded, so connected surfaces share vertices.
pub fn extract_mesh(vol: &TsdfVolume<f64>) -> Mesh {
    let cfg = &vol.config;
    let mut mesh = Mesh::default();
    let mut welded: HashMap<(usize, usize), u32> = HashMap::new();
    for kz in 0..cfg.dims[2] - 1 {
        for j in 0..cfg.dims[1] - 1 {
            for i in 0..cfg.dims[0] - 1 {
                let ids: [usize; 8] = CORNER.map(|c| cfg.index(i + c[0], j + c[1], kz + c[2]));
                if ids.iter().any(|&g| vol.w[g] <= 0.0) {
                    continue;
                }
                let vals = ids.map(|g| vol.f[g]);
                if vals.iter().all(|&v| v >= 0.0) || vals.iter().all(|&v| v < 0.0) {
                    continue;
                }
                for tet in TETS {
                    let corners = tet.map(|c| ids[c]);
                    polygonize(vol, &corners, &mut mesh, &mut welded);
                }
            }
        }
    }
    mesh
}

fn polygonize(vol: &TsdfVolume<f64>, corners: &[usize; 4], mesh: &mut Mesh, welded: &mut HashMap<(usize, usize), u32>) {
    let inside: Vec<usize> = (0..4).filter(|&c| vol.f[corners[c]] < 0.0).collect();
    let outside: Vec<usize> = (0..4).filter(|&c| vol.f[corners[c]] >= 0.0).collect();
    let mut vertex = |a: usize, b: usize| -> u32 {
        let (ga, gb) = (corners[a], corners[b]);
        let key = (ga.min(gb), ga.max(gb));
        *welded.entry(key).or_insert_with(|| {
            let cfg = &vol.config;
            let [ia, ja, ka] = cfg.coords(ga);
            let [ib, jb, kb] = cfg.coords(gb);
            let (pa, pb) = (cfg.voxel_center(ia, ja, ka), cfg.voxel_center(ib, jb, kb));
            let (fa, fb) = (vol.f[ga], vol.f[gb]);
            let t = fa / (fa - fb);
            mesh.vertices.push(pa + (pb - pa) * t);
            (mesh.vertices.len() - 1) as u32
        })
    };
    let tris: Vec<[u32; 3]> = match (inside.len(), outside.len()) {
        (1, 3) => {
            let a = inside[0];
            vec![[vertex(a, outside[0]), vertex(a, outside[1]), vertex(a, outside[2])]]
        }
        (3, 1) => {
            let a = outside[0];
            vec![[vertex(a, inside[0]), vertex(a, inside[1]), vertex(a, inside[2])]]
        }
        (2, 2) => {
            let (a, b) = (inside[0], inside[1]);
            let (c, d) = (outside[0], outside[1]);
            let (ac, ad, bc, bd) = (vertex(a, c), vertex(a, d), vertex(b, c), vertex(b, d));
            vec![[ac, ad, bd], [ac, bd, bc]]
        }
        _ => Vec::new(),
    };
    // orient each triangle so its normal points from inside to outside
    let cfg = &vol.config;
    let center = |g: usize| {
        let [i, j, k] = cfg.coords(g);
        cfg.voxel_center(i, j, k)
    };
    let inside_c = inside.iter().map(|&c| center(corners[c])).sum::<Vector3<f64>>() / inside.len().max(1) as f64;
    let outside_c = outside.iter().map(|&c| center(corners[c])).sum::<Vector3<f64>>() / outside.len().max(1) as f64;
    let out_dir = outside_c - inside_c;
    for mut t in tris {
        let [a, b, c] = t.map(|v| mesh.vertices[v as usize]);
        if (b - a).cross(&(c - a)).dot(&out_dir) < 0.0 {
            t.swap(1, 2);
        }
        mesh.triangles.push(t);
    }
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Number of vertex-connected triangle groups.
    pub fn connected_components(&self) -> usize {
        let n = self.vertices.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for t in &self.triangles {
            let r0 = find(&mut parent, t[0] as usize);
            for &v in &t[1..] {
                let r = find(&mut parent, v as usize);
                if r != r0 {
                    parent[r] = r0;
                }
            }
        }
        let mut roots: Vec<usize> = self.triangles.iter().map(|t| find(&mut parent, t[0] as usize)).collect();
        roots.sort_unstable();
        roots.dedup();
        roots.len()
    }

    /// Binary STL.
    pub fn write_stl<W: Write>(&self, mut out: W) -> io::Result<()> {
        let mut header = [0u8; 80];
        let tag = b"cstep mesh";
        header[..tag.len()].copy_from_slice(tag);
        out.write_all(&header)?;
        out.write_all(&(self.triangles.len() as u32).to_le_bytes())?;
        for t in &self.triangles {
            let [a, b, c] = t.map(|v| self.vertices[v as usize]);
            let n = (b - a).cross(&(c - a));
            let n = if n.norm() > 0.0 { n.normalize() } else { n };
            for v in [n, a, b, c] {
                for x in v.iter() {
                    out.write_all(&(*x as f32).to_le_bytes())?;
                }
            }
            out.write_all(&[0u8; 2])?;
        }
        Ok(())
    }

    /// ASCII PLY.
    pub fn write_ply<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "ply")?;
        writeln!(out, "format ascii 1.0")?;
        writeln!(out, "element vertex {}", self.vertices.len())?;
        writeln!(out, "property float x")?;
        writeln!(out, "property float y")?;
        writeln!(out, "property float z")?;
        writeln!(out, "element face {}", self.triangles.len())?;
        writeln!(out, "property list uchar int vertex_indices")?;
        writeln!(out, "end_header")?;
        for v in &self.vertices {
            writeln!(out, "{} {} {}", v.x, v.y, v.z)?;
        }
        for t in &self.triangles {
            writeln!(out, "3 {} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }
}
