//! Triangle meshes: export, simple builders, and conversion of watertight
//! meshes to signed distance grids.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use super::{SdfGrid, Vec3, SDF_CLAMP};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len() as u32;
        if triangles.iter().flatten().any(|i| *i >= n) {
            return Err(Error::InvalidArgument("triangle index out of range".into()));
        }
        Ok(Self {
            vertices,
            triangles,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn corners(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Area-weighted normal (twice the area in magnitude).
    pub fn face_cross(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.corners(t);
        (b - a).cross(&(c - a))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| 0.5 * self.face_cross(t).norm())
            .sum()
    }

    /// Enclosed volume by the divergence theorem; positive for outward
    /// orientation.
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.corners(t);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    /// Every undirected edge is shared by exactly two triangles, once in
    /// each direction.
    pub fn is_closed(&self) -> bool {
        let mut edges: HashMap<(u32, u32), i32> = HashMap::new();
        for tri in &self.triangles {
            for e in 0..3 {
                let (a, b) = (tri[e], tri[(e + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_default() += if a < b { 1 } else { -1 };
            }
        }
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for tri in &self.triangles {
            for e in 0..3 {
                let (a, b) = (tri[e], tri[(e + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        edges.values().all(|v| *v == 0) && counts.values().all(|c| *c == 2)
    }

    /// Subdivided icosahedron projected onto a sphere.
    pub fn icosphere(center: Vec3, radius: f64, subdivisions: usize) -> Self {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut verts: Vec<Vec3> = [
            (-1.0, t, 0.0),
            (1.0, t, 0.0),
            (-1.0, -t, 0.0),
            (1.0, -t, 0.0),
            (0.0, -1.0, t),
            (0.0, 1.0, t),
            (0.0, -1.0, -t),
            (0.0, 1.0, -t),
            (t, 0.0, -1.0),
            (t, 0.0, 1.0),
            (-t, 0.0, -1.0),
            (-t, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
        .collect();
        let mut tris: Vec<[u32; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
            let mut next = Vec::with_capacity(tris.len() * 4);
            let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
                *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    verts.push((verts[a as usize] + verts[b as usize]).normalize());
                    verts.len() as u32 - 1
                })
            };
            for [a, b, c] in tris {
                let ab = midpoint(a, b, &mut verts);
                let bc = midpoint(b, c, &mut verts);
                let ca = midpoint(c, a, &mut verts);
                next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            tris = next;
        }
        Self {
            vertices: verts.into_iter().map(|v| center + v * radius).collect(),
            triangles: tris,
        }
    }

    /// Axis-aligned box with outward-facing triangles.
    pub fn cuboid(center: Vec3, half: Vec3) -> Self {
        let vertices = (0..8)
            .map(|i| {
                let s = Vec3::new(
                    if i & 1 == 0 { -1.0 } else { 1.0 },
                    if i & 2 == 0 { -1.0 } else { 1.0 },
                    if i & 4 == 0 { -1.0 } else { 1.0 },
                );
                center + s.component_mul(&half)
            })
            .collect();
        let triangles = vec![
            [0, 2, 1],
            [1, 2, 3], // -z
            [4, 5, 6],
            [5, 7, 6], // +z
            [0, 1, 4],
            [1, 5, 4], // -y
            [2, 6, 3],
            [3, 6, 7], // +y
            [0, 4, 2],
            [2, 4, 6], // -x
            [1, 3, 5],
            [3, 7, 5], // +x
        ];
        Self {
            vertices,
            triangles,
        }
    }

    pub fn write_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let run = || -> std::io::Result<()> {
            let mut w = BufWriter::new(File::create(path)?);
            for v in &self.vertices {
                writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
            }
            for [a, b, c] in &self.triangles {
                writeln!(w, "f {} {} {}", a + 1, b + 1, c + 1)?;
            }
            w.flush()
        };
        run().map_err(|e| Error::io(path, e))
    }

    /// Binary little-endian PLY with `float` vertices and `uchar`/`int`
    /// face lists.
    pub fn write_ply(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let run = || -> std::io::Result<()> {
            let mut w = BufWriter::new(File::create(path)?);
            write!(
                w,
                "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
                self.vertices.len(),
                self.triangles.len()
            )?;
            for v in &self.vertices {
                for c in v.iter() {
                    w.write_all(&(*c as f32).to_le_bytes())?;
                }
            }
            for tri in &self.triangles {
                w.write_all(&[3u8])?;
                for i in tri {
                    w.write_all(&(*i as i32).to_le_bytes())?;
                }
            }
            w.flush()
        };
        run().map_err(|e| Error::io(path, e))
    }
}

/// Closest point on triangle `abc` to `p` (Ericson, Real-Time Collision
/// Detection, 5.1.5).
pub fn closest_point_on_triangle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

/// Parameter `s` where the line `origin + s * axis_dir` crosses triangle
/// `abc`, if it does (Möller-Trumbore without culling).
fn line_triangle(origin: Vec3, dir: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let pv = dir.cross(&e2);
    let det = e1.dot(&pv);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let tv = origin - a;
    let u = tv.dot(&pv) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qv = tv.cross(&e1);
    let v = dir.dot(&qv) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(e2.dot(&qv) * inv)
}

/// Minimum triangle area treated as non-degenerate.
pub const DEGENERATE_AREA: f64 = 1e-14;

/// Signed distance of a watertight mesh: exact unsigned distance to the
/// triangles, sign from ray parity along the three axes. Voxels whose three
/// parities disagree mark the mesh as not watertight.
pub fn mesh_to_sdf(mesh: &TriMesh, resolution: usize) -> Result<SdfGrid> {
    if mesh.is_empty() {
        return Err(Error::Empty("mesh has no triangles".into()));
    }
    if mesh.vertices.iter().any(|v| v.iter().any(|c| c.abs() > 1.0)) {
        return Err(Error::DomainViolation("mesh vertex outside [-1,1]^3".into()));
    }
    let tris: Vec<[Vec3; 3]> = (0..mesh.triangles.len())
        .filter(|t| 0.5 * mesh.face_cross(*t).norm() > DEGENERATE_AREA)
        .map(|t| mesh.corners(t))
        .collect();
    let r = resolution;
    let h = 2.0 / r as f64;
    let coord = |i: usize| -1.0 + (i as f64 + 0.5) * h;

    // Inside parity per axis. Lines are offset by tiny irrational amounts
    // so they never pass exactly through mesh edges or vertices.
    let jitter = [1.234_567_1e-7 * 2f64.sqrt(), 0.987_654_3e-7 * 3f64.sqrt()];
    let parity_axis = |axis: usize| -> Vec<bool> {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        let mut out = vec![false; r * r * r];
        let lines: Vec<(usize, usize, Vec<f64>)> = (0..r * r)
            .into_par_iter()
            .map(|line| {
                let (a, b) = (line % r, line / r);
                let mut origin = Vec3::zeros();
                origin[u] = coord(a) + jitter[0];
                origin[v] = coord(b) + jitter[1];
                origin[axis] = -2.0;
                let mut dir = Vec3::zeros();
                dir[axis] = 1.0;
                let mut hits: Vec<f64> = tris
                    .iter()
                    .filter_map(|[p, q, s]| line_triangle(origin, dir, *p, *q, *s))
                    .map(|s| s - 2.0)
                    .collect();
                hits.sort_by(|x, y| x.total_cmp(y));
                (a, b, hits)
            })
            .collect();
        for (a, b, hits) in lines {
            for i in 0..r {
                let x = coord(i);
                let beyond = hits.len() - hits.partition_point(|s| *s <= x);
                let mut idx3 = [0usize; 3];
                idx3[axis] = i;
                idx3[u] = a;
                idx3[v] = b;
                out[(idx3[2] * r + idx3[1]) * r + idx3[0]] = beyond % 2 == 1;
            }
        }
        out
    };
    let px = parity_axis(0);
    let py = parity_axis(1);
    let pz = parity_axis(2);
    if let Some(bad) = (0..r * r * r).find(|&i| px[i] != py[i] || py[i] != pz[i]) {
        return Err(Error::NotWatertight(format!(
            "ray parity disagrees at voxel {bad}"
        )));
    }

    let values: Vec<f64> = (0..r * r * r)
        .into_par_iter()
        .map(|idx| {
            let p = Vec3::new(coord(idx % r), coord((idx / r) % r), coord(idx / (r * r)));
            let d = tris
                .iter()
                .map(|[a, b, c]| (closest_point_on_triangle(p, *a, *b, *c) - p).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt();
            let signed = if px[idx] { -d } else { d };
            signed.clamp(-SDF_CLAMP, SDF_CLAMP)
        })
        .collect();
    SdfGrid::from_values(r, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{analytic_sdf, Posed, Solid};

    #[test]
    fn icosphere_matches_analytic_sphere() {
        let mesh = TriMesh::icosphere(Vec3::zeros(), 0.5, 3);
        assert!(mesh.is_closed());
        let g = mesh_to_sdf(&mesh, 32).unwrap();
        let exact = analytic_sdf(&Solid::single(Posed::sphere(Vec3::zeros(), 0.5)), 32).unwrap();
        let err = g.max_abs_diff(&exact).unwrap();
        assert!(err <= 1.5 * g.voxel_size(), "{err}");
    }

    #[test]
    fn cube_center_is_inside() {
        let mesh = TriMesh::cuboid(Vec3::zeros(), Vec3::repeat(0.5));
        assert!(mesh.is_closed());
        assert!((mesh.signed_volume() - 1.0).abs() < 1e-12);
        let g = mesh_to_sdf(&mesh, 16).unwrap();
        assert!(g.get(8, 8, 8) < 0.0);
        assert!(g.get(0, 0, 0) > 0.0);
        let exact = analytic_sdf(&Solid::single(Posed::aabb(Vec3::zeros(), Vec3::repeat(0.5))), 16).unwrap();
        assert!(g.max_abs_diff(&exact).unwrap() < 1e-9);
    }

    #[test]
    fn open_cube_is_rejected() {
        let mut mesh = TriMesh::cuboid(Vec3::zeros(), Vec3::repeat(0.5));
        mesh.triangles.truncate(10);
        assert!(!mesh.is_closed());
        assert!(matches!(mesh_to_sdf(&mesh, 16), Err(Error::NotWatertight(_))));
    }

    #[test]
    fn closest_point_regions() {
        let (a, b, c) = (Vec3::zeros(), Vec3::x(), Vec3::y());
        assert!((closest_point_on_triangle(Vec3::new(0.2, 0.2, 1.0), a, b, c) - Vec3::new(0.2, 0.2, 0.0)).norm() < 1e-15);
        assert_eq!(closest_point_on_triangle(Vec3::new(-1.0, -1.0, 0.0), a, b, c), a);
        let e = closest_point_on_triangle(Vec3::new(1.0, 1.0, 0.0), a, b, c);
        assert!((e - Vec3::new(0.5, 0.5, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn exports_write_files() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = TriMesh::cuboid(Vec3::zeros(), Vec3::repeat(0.5));
        mesh.write_obj(dir.path().join("m.obj")).unwrap();
        mesh.write_ply(dir.path().join("m.ply")).unwrap();
        let ply = std::fs::read(dir.path().join("m.ply")).unwrap();
        let header_end = ply.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        assert_eq!(ply.len() - header_end, 8 * 12 + 12 * 13);
        let obj = std::fs::read_to_string(dir.path().join("m.obj")).unwrap();
        assert_eq!(obj.lines().filter(|l| l.starts_with("f ")).count(), 12);
        assert!(TriMesh::new(vec![Vec3::zeros()], vec![[0, 0, 1]]).is_err());
    }
}
