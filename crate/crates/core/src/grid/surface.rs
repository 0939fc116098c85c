//! Zero-level-set extraction by marching tetrahedra over the lattice of
//! voxel centers.

use std::collections::HashMap;

use super::{SdfGrid, TriMesh, Vec3};
use crate::error::{Error, Result};

/// Six tetrahedra sharing the cube diagonal 0-7. Corner bit 1 is +x,
/// bit 2 is +y, bit 4 is +z.
const KUHN: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

struct Builder<'a> {
    grid: &'a SdfGrid,
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
    edge_vertex: HashMap<(usize, usize), u32>,
}

impl Builder<'_> {
    fn vertex_on_edge(&mut self, a: usize, b: usize) -> u32 {
        let key = (a.min(b), a.max(b));
        if let Some(v) = self.edge_vertex.get(&key) {
            return *v;
        }
        let (sa, sb) = (self.grid.values()[key.0], self.grid.values()[key.1]);
        let t = sa / (sa - sb);
        let p = self.grid.center_of(key.0) * (1.0 - t) + self.grid.center_of(key.1) * t;
        self.vertices.push(p);
        let id = self.vertices.len() as u32 - 1;
        self.edge_vertex.insert(key, id);
        id
    }

    fn emit(&mut self, tri: [u32; 3], outward: Vec3) {
        let [a, b, c] = tri.map(|i| self.vertices[i as usize]);
        let n = (b - a).cross(&(c - a));
        let min_area = 1e-12 * self.grid.voxel_size().powi(2);
        if 0.5 * n.norm() < min_area {
            return;
        }
        if n.dot(&outward) < 0.0 {
            self.triangles.push([tri[0], tri[2], tri[1]]);
        } else {
            self.triangles.push(tri);
        }
    }

    fn tet(&mut self, corners: [usize; 4]) {
        let vals = corners.map(|c| self.grid.values()[c]);
        let (inside, outside): (Vec<usize>, Vec<usize>) =
            (0..4).partition(|&i| vals[i] < 0.0);
        if inside.is_empty() || outside.is_empty() {
            return;
        }
        let centroid = |set: &[usize]| {
            set.iter().map(|&i| self.grid.center_of(corners[i])).sum::<Vec3>() / set.len() as f64
        };
        let outward = centroid(&outside) - centroid(&inside);
        match inside.len() {
            1 | 3 => {
                let (lone, rest) = if inside.len() == 1 {
                    (inside[0], outside)
                } else {
                    (outside[0], inside)
                };
                let tri = [
                    self.vertex_on_edge(corners[lone], corners[rest[0]]),
                    self.vertex_on_edge(corners[lone], corners[rest[1]]),
                    self.vertex_on_edge(corners[lone], corners[rest[2]]),
                ];
                self.emit(tri, outward);
            }
            _ => {
                let (a, b) = (corners[inside[0]], corners[inside[1]]);
                let (c, d) = (corners[outside[0]], corners[outside[1]]);
                let ac = self.vertex_on_edge(a, c);
                let ad = self.vertex_on_edge(a, d);
                let bd = self.vertex_on_edge(b, d);
                let bc = self.vertex_on_edge(b, c);
                self.emit([ac, ad, bd], outward);
                self.emit([ac, bd, bc], outward);
            }
        }
    }
}

/// Triangulates `{S = 0}` with outward-facing triangles. Fails with
/// [`Error::EmptySurface`] when the field has no sign change.
pub fn extract_surface(grid: &SdfGrid) -> Result<TriMesh> {
    let r = grid.resolution();
    let mut b = Builder {
        grid,
        vertices: Vec::new(),
        triangles: Vec::new(),
        edge_vertex: HashMap::new(),
    };
    for k in 0..r - 1 {
        for j in 0..r - 1 {
            for i in 0..r - 1 {
                let cube: [usize; 8] = std::array::from_fn(|c| {
                    grid.index(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1))
                });
                let first = grid.values()[cube[0]] < 0.0;
                if cube.iter().all(|&c| (grid.values()[c] < 0.0) == first) {
                    continue;
                }
                for tet in KUHN {
                    b.tet(tet.map(|c| cube[c]));
                }
            }
        }
    }
    if b.triangles.is_empty() {
        let min = grid.values().iter().copied().fold(f64::INFINITY, f64::min);
        return Err(Error::EmptySurface(min));
    }
    Ok(TriMesh {
        vertices: b.vertices,
        triangles: b.triangles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{analytic_sdf, mesh_to_sdf, Posed, Solid};

    #[test]
    fn sphere_vertices_lie_near_radius() {
        let g = analytic_sdf(&Solid::single(Posed::sphere(Vec3::zeros(), 0.5)), 64).unwrap();
        let m = extract_surface(&g).unwrap();
        let h = g.voxel_size();
        assert!(m.vertices.iter().all(|v| (v.norm() - 0.5).abs() <= 1.5 * h));
        assert!(m.is_closed());
        assert!(m.signed_volume() > 0.0);
    }

    #[test]
    fn positive_field_has_no_surface() {
        let g = SdfGrid::constant(8, 0.3).unwrap();
        assert!(matches!(extract_surface(&g), Err(Error::EmptySurface(_))));
    }

    #[test]
    fn box_volume_is_close() {
        let half = Vec3::new(0.4, 0.3, 0.5);
        let g = analytic_sdf(&Solid::single(Posed::aabb(Vec3::zeros(), half)), 64).unwrap();
        let vol = extract_surface(&g).unwrap().signed_volume();
        let exact = 8.0 * half.x * half.y * half.z;
        assert!((vol - exact).abs() / exact < 0.05, "{vol} vs {exact}");
    }

    #[test]
    fn surface_round_trips_through_mesh_to_sdf() {
        let g = analytic_sdf(&Solid::single(Posed::sphere(Vec3::new(0.1, 0.0, -0.1), 0.45)), 32).unwrap();
        let m = extract_surface(&g).unwrap();
        let back = mesh_to_sdf(&m, 32).unwrap();
        let h = g.voxel_size();
        // Compare only the near-surface band where the mesh is a faithful
        // approximation of the level set.
        let worst = g
            .values()
            .iter()
            .zip(back.values())
            .filter(|(a, _)| a.abs() < 3.0 * h)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= h, "{worst}");
    }
}
