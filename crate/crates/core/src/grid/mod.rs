//! Voxel signed-distance grids over the fixed cube `[-1,1]^3`.
//!
//! Values live at voxel centers `-1 + (i + 0.5) h` with `h = 2 / R`, stored
//! z-major: the flat index of voxel `(i, j, k)` (x, y, z) is
//! `(k * R + j) * R + i`. Distances are negative inside, positive outside.

mod io;
pub mod mesh;
pub mod primitive;
pub mod surface;

pub use io::{read_sdfg, read_sdfg_channel, write_sdfg, write_sdfg_channel, ChannelData};
pub use mesh::{mesh_to_sdf, TriMesh};
pub use primitive::{analytic_sdf, Posed, Primitive, Solid};
pub use surface::extract_surface;

use nalgebra::Vector3;

use crate::error::{check_same_resolution, Error, Result};

pub type Vec3 = Vector3<f64>;

/// Magnitude at which constructed distance values are clamped: the domain
/// diagonal, so exact distances of in-domain surfaces are never altered.
pub const SDF_CLAMP: f64 = 2.0 * 1.732_050_807_568_877_2;

/// Scalar field sampled at the voxel centers of `[-1,1]^3`.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrid {
    resolution: usize,
    values: Vec<f64>,
}

impl SdfGrid {
    pub fn from_values(resolution: usize, values: Vec<f64>) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::InvalidArgument(format!(
                "resolution must be >= 2, got {resolution}"
            )));
        }
        let expected = resolution.pow(3);
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: values.len(),
            });
        }
        Ok(Self { resolution, values })
    }

    pub fn constant(resolution: usize, value: f64) -> Result<Self> {
        Self::from_values(resolution, vec![value; resolution.pow(3)])
    }

    /// Evaluates `f` at every voxel center. Values are clamped to
    /// `±SDF_CLAMP`.
    pub fn from_fn(resolution: usize, f: impl Fn(Vec3) -> f64 + Sync) -> Result<Self> {
        use rayon::prelude::*;
        let r = resolution;
        let h = 2.0 / r as f64;
        let values = (0..r * r * r)
            .into_par_iter()
            .map(|idx| {
                let i = idx % r;
                let j = (idx / r) % r;
                let k = idx / (r * r);
                let p = Vec3::new(
                    -1.0 + (i as f64 + 0.5) * h,
                    -1.0 + (j as f64 + 0.5) * h,
                    -1.0 + (k as f64 + 0.5) * h,
                );
                f(p).clamp(-SDF_CLAMP, SDF_CLAMP)
            })
            .collect();
        Self::from_values(resolution, values)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn voxel_size(&self) -> f64 {
        2.0 / self.resolution as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.resolution + j) * self.resolution + i
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let r = self.resolution;
        (idx % r, (idx / r) % r, idx / (r * r))
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    /// Domain coordinates of the center of voxel `(i, j, k)`.
    #[inline]
    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let h = self.voxel_size();
        Vec3::new(
            -1.0 + (i as f64 + 0.5) * h,
            -1.0 + (j as f64 + 0.5) * h,
            -1.0 + (k as f64 + 0.5) * h,
        )
    }

    #[inline]
    pub fn center_of(&self, idx: usize) -> Vec3 {
        let (i, j, k) = self.coords(idx);
        self.center(i, j, k)
    }

    /// Index of the voxel containing `p`, clamped to the grid.
    pub fn voxel_of(&self, p: Vec3) -> (usize, usize, usize) {
        let r = self.resolution as f64;
        let h = self.voxel_size();
        let f = |x: f64| (((x + 1.0) / h).floor()).clamp(0.0, r - 1.0) as usize;
        (f(p.x), f(p.y), f(p.z))
    }

    /// Trilinear interpolation of the voxel-center samples.
    ///
    /// Inside the half-voxel rim beyond the outermost centers the stencil is
    /// extrapolated linearly, so affine fields are reproduced exactly over the
    /// whole domain. Points outside the domain are rejected.
    pub fn sample_trilinear(&self, p: Vec3) -> Result<f64> {
        if !in_domain(p) {
            return Err(Error::DomainViolation(format!(
                "sample point ({}, {}, {})",
                p.x, p.y, p.z
            )));
        }
        Ok(self.interpolate(p))
    }

    /// Samples at `p` after clamping it into the domain; the flag reports
    /// whether clamping happened.
    pub fn sample_clamped(&self, p: Vec3) -> (f64, bool) {
        let q = clamp_to_domain(p);
        (self.interpolate(q), q != p)
    }

    fn interpolate(&self, p: Vec3) -> f64 {
        let r = self.resolution;
        let h = self.voxel_size();
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let u = (p[a] + 1.0) / h - 0.5;
            let i0 = (u.floor() as isize).clamp(0, r as isize - 2) as usize;
            base[a] = i0;
            frac[a] = u - i0 as f64;
        }
        let mut acc = 0.0;
        for dk in 0..2 {
            let wz = if dk == 0 { 1.0 - frac[2] } else { frac[2] };
            for dj in 0..2 {
                let wy = if dj == 0 { 1.0 - frac[1] } else { frac[1] };
                for di in 0..2 {
                    let wx = if di == 0 { 1.0 - frac[0] } else { frac[0] };
                    acc += wx * wy * wz * self.get(base[0] + di, base[1] + dj, base[2] + dk);
                }
            }
        }
        acc
    }

    /// Whether voxel `(i, j, k)` lies off the outermost one-voxel shell.
    #[inline]
    pub fn is_interior(&self, i: usize, j: usize, k: usize) -> bool {
        let r = self.resolution;
        i > 0 && j > 0 && k > 0 && i + 1 < r && j + 1 < r && k + 1 < r
    }

    /// Number of voxels with a strictly negative value.
    pub fn count_inside(&self) -> usize {
        self.values.iter().filter(|v| **v < 0.0).count()
    }

    /// Rounds every value through `f32`, the on-disk precision.
    pub fn quantized(&self) -> Self {
        Self {
            resolution: self.resolution,
            values: self.values.iter().map(|v| *v as f32 as f64).collect(),
        }
    }

    /// Largest absolute voxelwise difference.
    pub fn max_abs_diff(&self, other: &SdfGrid) -> Result<f64> {
        check_same_resolution(self.resolution, other.resolution)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

pub fn in_domain(p: Vec3) -> bool {
    p.iter().all(|c| (-1.0..=1.0).contains(c))
}

pub fn clamp_to_domain(p: Vec3) -> Vec3 {
    p.map(|c| c.clamp(-1.0, 1.0))
}

/// Voxelwise minimum: the union of the two solids.
pub fn sdf_min(a: &SdfGrid, b: &SdfGrid) -> Result<SdfGrid> {
    check_same_resolution(a.resolution, b.resolution)?;
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| x.min(*y))
        .collect();
    SdfGrid::from_values(a.resolution, values)
}

/// Central-difference gradients with an interior mask.
#[derive(Debug, Clone)]
pub struct GradientField {
    resolution: usize,
    vectors: Vec<Vec3>,
    interior: Vec<bool>,
}

impl GradientField {
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn vectors(&self) -> &[Vec3] {
        &self.vectors
    }

    pub fn interior_mask(&self) -> &[bool] {
        &self.interior
    }

    pub fn get(&self, idx: usize) -> Option<Vec3> {
        self.interior[idx].then(|| self.vectors[idx])
    }
}

/// Per-axis central differences divided by `2h`. Boundary-shell voxels get a
/// zero vector and are masked out.
pub fn gradient_stencil(grid: &SdfGrid) -> Result<GradientField> {
    let r = grid.resolution;
    if r < 3 {
        return Err(Error::InvalidArgument(format!(
            "gradient stencil needs R >= 3, got {r}"
        )));
    }
    let n = r * r * r;
    let mut vectors = vec![Vec3::zeros(); n];
    let mut interior = vec![false; n];
    for idx in 0..n {
        let (i, j, k) = grid.coords(idx);
        if grid.is_interior(i, j, k) {
            vectors[idx] = central_difference(grid, i, j, k);
            interior[idx] = true;
        }
    }
    Ok(GradientField {
        resolution: r,
        vectors,
        interior,
    })
}

/// Central difference at an interior voxel.
#[inline]
pub(crate) fn central_difference(grid: &SdfGrid, i: usize, j: usize, k: usize) -> Vec3 {
    let inv = 1.0 / (2.0 * grid.voxel_size());
    Vec3::new(
        (grid.get(i + 1, j, k) - grid.get(i - 1, j, k)) * inv,
        (grid.get(i, j + 1, k) - grid.get(i, j - 1, k)) * inv,
        (grid.get(i, j, k + 1) - grid.get(i, j, k - 1)) * inv,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(r: usize, radius: f64) -> SdfGrid {
        SdfGrid::from_fn(r, |p| p.norm() - radius).unwrap()
    }

    #[test]
    fn sample_at_voxel_center_returns_stored_value() {
        let g = sphere(16, 0.5);
        for &(i, j, k) in &[(0, 0, 0), (3, 7, 11), (15, 15, 15), (8, 0, 15)] {
            let v = g.sample_trilinear(g.center(i, j, k)).unwrap();
            assert!((v - g.get(i, j, k)).abs() < 1e-14);
        }
    }

    #[test]
    fn trilinear_reproduces_affine_fields() {
        let f = |p: Vec3| 0.3 * p.x - 1.2 * p.y + 0.7 * p.z + 0.1;
        let g = SdfGrid::from_fn(9, f).unwrap();
        for p in [
            Vec3::new(0.13, -0.77, 0.99),
            Vec3::new(-1.0, 1.0, -1.0),
            Vec3::new(0.999, 0.0, -0.95),
        ] {
            assert!((g.sample_trilinear(p).unwrap() - f(p)).abs() < 1e-13);
        }
        let gx = SdfGrid::from_fn(12, |p| p.x).unwrap();
        assert!((gx.sample_trilinear(Vec3::new(0.37, 0.2, -0.4)).unwrap() - 0.37).abs() < 1e-14);
    }

    #[test]
    fn sphere_sample_is_second_order_accurate() {
        let g = sphere(32, 0.5);
        let h = g.voxel_size();
        let v = g.sample_trilinear(Vec3::new(0.25, 0.0, 0.0)).unwrap();
        // Trilinear error bound: h^2/8 times the summed curvature 2/r.
        assert!((v + 0.25).abs() <= 1.01 * h * h / 8.0 * (2.0 / 0.25), "{v}");
    }

    #[test]
    fn outside_domain_errors_or_flags() {
        let g = sphere(8, 0.5);
        assert!(g.sample_trilinear(Vec3::new(1.2, 0.0, 0.0)).is_err());
        let (v, clamped) = g.sample_clamped(Vec3::new(1.2, 0.0, 0.0));
        assert!(clamped);
        assert_eq!(v, g.sample_clamped(Vec3::new(1.0, 0.0, 0.0)).0);
    }

    #[test]
    fn gradient_of_constant_and_linear_fields() {
        let c = SdfGrid::constant(8, 0.3).unwrap();
        let gc = gradient_stencil(&c).unwrap();
        assert!(gc.vectors().iter().all(|v| v.norm() == 0.0));

        let lin = SdfGrid::from_fn(10, |p| p.x).unwrap();
        let gl = gradient_stencil(&lin).unwrap();
        for idx in 0..lin.len() {
            match gl.get(idx) {
                Some(v) => assert!((v - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12),
                None => {
                    let (i, j, k) = lin.coords(idx);
                    assert!(!lin.is_interior(i, j, k));
                }
            }
        }
    }

    #[test]
    fn interior_mask_is_false_exactly_on_the_shell() {
        let g = SdfGrid::constant(6, 1.0).unwrap();
        let gf = gradient_stencil(&g).unwrap();
        let interior = gf.interior_mask().iter().filter(|b| **b).count();
        assert_eq!(interior, 4 * 4 * 4);
    }

    #[test]
    fn sphere_gradient_norms_are_unit() {
        let g = sphere(64, 0.5);
        let h = g.voxel_size();
        let gf = gradient_stencil(&g).unwrap();
        let mut worst = 0.0f64;
        let mut sum = 0.0;
        let mut n = 0;
        for idx in 0..g.len() {
            if let Some(v) = gf.get(idx) {
                if g.center_of(idx).norm() > 2.0 * h {
                    let e = (v.norm() - 1.0).abs();
                    worst = worst.max(e);
                    sum += e;
                    n += 1;
                }
            }
        }
        // second-order stencil error grows like h^2 / r^2 close to the center
        assert!(sum / n as f64 <= 1e-3, "mean {}", sum / n as f64);
        let far = (0..g.len())
            .filter_map(|idx| gf.get(idx).map(|v| (idx, v)))
            .filter(|(idx, _)| g.center_of(*idx).norm() > 0.25)
            .map(|(_, v)| (v.norm() - 1.0).abs())
            .fold(0.0, f64::max);
        assert!(far <= 1e-2, "far {far} worst {worst}");
    }

    #[test]
    fn sdf_min_properties() {
        let a = SdfGrid::from_fn(16, |p| (p - Vec3::new(0.4, 0.0, 0.0)).norm() - 0.3).unwrap();
        let b = SdfGrid::from_fn(16, |p| (p + Vec3::new(0.4, 0.0, 0.0)).norm() - 0.3).unwrap();
        assert_eq!(sdf_min(&a, &a).unwrap(), a);
        assert_eq!(sdf_min(&a, &b).unwrap(), sdf_min(&b, &a).unwrap());
        let u = sdf_min(&a, &b).unwrap();
        for idx in 0..u.len() {
            let inside = u.values()[idx] < 0.0;
            assert_eq!(inside, a.values()[idx] < 0.0 || b.values()[idx] < 0.0);
        }
        let c = SdfGrid::constant(8, 0.0).unwrap();
        assert!(matches!(sdf_min(&a, &c), Err(Error::ResolutionMismatch(16, 8))));
    }
}
