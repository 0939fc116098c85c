//! Analytic solids: the ground-truth distance sources for objects, hands and
//! property tests.
//!
//! Sphere, box, capsule and cylinder distances are exact. The
//! superellipsoid uses the scaled implicit-function approximation
//! `(F^(1/p) - 1) * min(radii)`, which is exact only for spheres.

use nalgebra::{Matrix3, Rotation3, Unit};
use serde::{Deserialize, Serialize};

use super::{SdfGrid, Vec3};
use crate::error::{Error, Result};
use crate::transform::SimilarityTransform;

/// A primitive in its local frame, centered at the origin. Elongated shapes
/// run along local `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
    Capsule { half_length: f64, radius: f64 },
    Cylinder { half_height: f64, radius: f64 },
    Superellipsoid { radii: [f64; 3], exponent: f64 },
}

impl Primitive {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Primitive::Sphere { radius } => radius > 0.0,
            Primitive::Box { half_extents } => half_extents.iter().all(|h| *h > 0.0),
            Primitive::Capsule {
                half_length,
                radius,
            } => half_length >= 0.0 && radius > 0.0,
            Primitive::Cylinder {
                half_height,
                radius,
            } => half_height > 0.0 && radius > 0.0,
            Primitive::Superellipsoid { radii, exponent } => {
                radii.iter().all(|r| *r > 0.0) && exponent >= 1.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("bad primitive parameters {self:?}")))
        }
    }

    pub fn local_sdf(&self, p: Vec3) -> f64 {
        match *self {
            Primitive::Sphere { radius } => p.norm() - radius,
            Primitive::Box { half_extents } => {
                let q = p.abs() - Vec3::from(half_extents);
                q.map(|c| c.max(0.0)).norm() + q.max().min(0.0)
            }
            Primitive::Capsule {
                half_length,
                radius,
            } => {
                let z = p.z.clamp(-half_length, half_length);
                (p - Vec3::new(0.0, 0.0, z)).norm() - radius
            }
            Primitive::Cylinder {
                half_height,
                radius,
            } => {
                let dx = (p.x * p.x + p.y * p.y).sqrt() - radius;
                let dz = p.z.abs() - half_height;
                (dx.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt() + dx.max(dz).min(0.0)
            }
            Primitive::Superellipsoid { radii, exponent } => {
                let f: f64 = (0..3).map(|a| (p[a] / radii[a]).abs().powf(exponent)).sum();
                let rmin = radii.iter().cloned().fold(f64::INFINITY, f64::min);
                (f.powf(1.0 / exponent) - 1.0) * rmin
            }
        }
    }

    /// Half extents of the local axis-aligned bounding box.
    pub fn local_half_extents(&self) -> Vec3 {
        match *self {
            Primitive::Sphere { radius } => Vec3::repeat(radius),
            Primitive::Box { half_extents } => Vec3::from(half_extents),
            Primitive::Capsule {
                half_length,
                radius,
            } => Vec3::new(radius, radius, half_length + radius),
            Primitive::Cylinder {
                half_height,
                radius,
            } => Vec3::new(radius, radius, half_height),
            Primitive::Superellipsoid { radii, .. } => Vec3::from(radii),
        }
    }
}

/// A primitive placed by a similarity transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Posed {
    pub primitive: Primitive,
    pub pose: SimilarityTransform,
}

impl Posed {
    pub fn new(primitive: Primitive, pose: SimilarityTransform) -> Self {
        Self { primitive, pose }
    }

    pub fn sphere(center: Vec3, radius: f64) -> Self {
        Self::new(
            Primitive::Sphere { radius },
            SimilarityTransform::translation(center),
        )
    }

    pub fn aabb(center: Vec3, half_extents: Vec3) -> Self {
        Self::new(
            Primitive::Box {
                half_extents: half_extents.into(),
            },
            SimilarityTransform::translation(center),
        )
    }

    /// Capsule around the segment `a`-`b`.
    pub fn capsule(a: Vec3, b: Vec3, radius: f64) -> Self {
        let d = b - a;
        let len = d.norm();
        let rotation = if len > 0.0 {
            rotation_from_z(d / len)
        } else {
            Matrix3::identity()
        };
        Self::new(
            Primitive::Capsule {
                half_length: 0.5 * len,
                radius,
            },
            SimilarityTransform::new(1.0, rotation, 0.5 * (a + b)).expect("valid rotation"),
        )
    }

    pub fn sdf(&self, x: Vec3) -> f64 {
        let s = self.pose.scale();
        s * self.primitive.local_sdf(self.pose.inverse_apply(x))
    }

    /// World-space bounding box `(min, max)`; exact for spheres, boxes,
    /// capsules and cylinders.
    pub fn bbox(&self) -> (Vec3, Vec3) {
        let s = self.pose.scale();
        let r = self.pose.rotation();
        let c = self.pose.translation_vector();
        let ext = match self.primitive {
            Primitive::Sphere { radius } => Vec3::repeat(s * radius),
            Primitive::Capsule {
                half_length,
                radius,
            } => {
                let axis = r.column(2).into_owned();
                (axis * (s * half_length)).abs() + Vec3::repeat(s * radius)
            }
            Primitive::Cylinder {
                half_height,
                radius,
            } => {
                let axis = r.column(2).into_owned();
                axis.map(|a| s * (half_height * a.abs() + radius * (1.0 - a * a).max(0.0).sqrt()))
            }
            Primitive::Box { .. } | Primitive::Superellipsoid { .. } => {
                let he = self.primitive.local_half_extents();
                r.abs() * he * s
            }
        };
        (c - ext, c + ext)
    }

    pub fn transformed(&self, xf: &SimilarityTransform) -> Self {
        Self::new(self.primitive, xf.compose(&self.pose))
    }
}

/// Rotation taking local `+z` onto the unit vector `dir`.
pub fn rotation_from_z(dir: Vec3) -> Matrix3<f64> {
    let z = Vec3::z();
    match Rotation3::rotation_between(&z, &dir) {
        Some(r) => r.into_inner(),
        // antiparallel: half turn about x
        None => Rotation3::from_axis_angle(&Unit::new_normalize(Vec3::x()), std::f64::consts::PI)
            .into_inner(),
    }
}

/// A union of posed primitives.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Solid {
    pub parts: Vec<Posed>,
}

impl Solid {
    pub fn new(parts: Vec<Posed>) -> Self {
        Self { parts }
    }

    pub fn single(part: Posed) -> Self {
        Self { parts: vec![part] }
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    /// Union distance: exact outside, a bound inside overlapping parts.
    pub fn sdf(&self, x: Vec3) -> f64 {
        self.parts
            .iter()
            .map(|p| p.sdf(x))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn bbox(&self) -> Option<(Vec3, Vec3)> {
        self.parts.iter().map(Posed::bbox).reduce(|(a0, a1), (b0, b1)| {
            (a0.zip_map(&b0, f64::min), a1.zip_map(&b1, f64::max))
        })
    }

    pub fn transformed(&self, xf: &SimilarityTransform) -> Self {
        Self {
            parts: self.parts.iter().map(|p| p.transformed(xf)).collect(),
        }
    }

    pub fn union(&self, other: &Solid) -> Solid {
        let mut parts = self.parts.clone();
        parts.extend_from_slice(&other.parts);
        Solid { parts }
    }
}

/// Samples the exact (or documented approximate) distance of `solid` at the
/// voxel centers of an `R^3` grid. The solid must fit inside the domain.
pub fn analytic_sdf(solid: &Solid, resolution: usize) -> Result<SdfGrid> {
    if resolution < 8 {
        return Err(Error::InvalidArgument(format!(
            "analytic grids need R >= 8, got {resolution}"
        )));
    }
    for part in &solid.parts {
        part.primitive.validate()?;
    }
    let (lo, hi) = solid
        .bbox()
        .ok_or_else(|| Error::Empty("solid has no parts".into()))?;
    if lo.min() < -1.0 || hi.max() > 1.0 {
        return Err(Error::DomainViolation(format!(
            "bounding box [{:?}, {:?}]",
            lo.as_slice(),
            hi.as_slice()
        )));
    }
    SdfGrid::from_fn(resolution, |p| solid.sdf(p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_value_at(g: &SdfGrid, p: Vec3) -> f64 {
        g.sample_trilinear(p).unwrap()
    }

    #[test]
    fn sphere_values() {
        let s = Solid::single(Posed::sphere(Vec3::zeros(), 0.5));
        assert_eq!(s.sdf(Vec3::zeros()), -0.5);
        assert_eq!(s.sdf(Vec3::new(0.5, 0.0, 0.0)), 0.0);
        let g = analytic_sdf(&s, 16).unwrap();
        let c = g.center(8, 8, 8);
        assert!((g.get(8, 8, 8) - (c.norm() - 0.5)).abs() < 1e-15);
        assert!((grid_value_at(&g, Vec3::new(0.3, 0.1, 0.0)) - (0.1f64.hypot(0.3) - 0.5)).abs() < 0.02);
    }

    #[test]
    fn box_value_outside_face() {
        let b = Posed::aabb(Vec3::zeros(), Vec3::repeat(0.3));
        assert!((b.sdf(Vec3::new(0.5, 0.0, 0.0)) - 0.2).abs() < 1e-15);
        // outside a corner the distance is Euclidean
        let d = b.sdf(Vec3::new(0.4, 0.4, 0.0));
        assert!((d - (0.1f64 * 2f64.sqrt())).abs() < 1e-15);
        assert!((b.sdf(Vec3::zeros()) + 0.3).abs() < 1e-15);
    }

    #[test]
    fn capsule_and_cylinder_values() {
        let c = Posed::capsule(Vec3::new(-0.2, 0.0, 0.0), Vec3::new(0.2, 0.0, 0.0), 0.1);
        assert!((c.sdf(Vec3::new(0.0, 0.3, 0.0)) - 0.2).abs() < 1e-12);
        assert!((c.sdf(Vec3::new(0.5, 0.0, 0.0)) - 0.2).abs() < 1e-12);
        let cyl = Posed::new(
            Primitive::Cylinder {
                half_height: 0.3,
                radius: 0.2,
            },
            SimilarityTransform::identity(),
        );
        assert!((cyl.sdf(Vec3::new(0.0, 0.0, 0.5)) - 0.2).abs() < 1e-15);
        assert!((cyl.sdf(Vec3::new(0.5, 0.0, 0.0)) - 0.3).abs() < 1e-15);
        assert!((cyl.sdf(Vec3::zeros()) + 0.2).abs() < 1e-15);
    }

    #[test]
    fn superellipsoid_matches_sphere_at_p2() {
        let se = Primitive::Superellipsoid {
            radii: [0.4; 3],
            exponent: 2.0,
        };
        let sp = Primitive::Sphere { radius: 0.4 };
        for p in [Vec3::new(0.1, 0.2, -0.3), Vec3::new(0.7, 0.0, 0.1)] {
            assert!((se.local_sdf(p) - sp.local_sdf(p)).abs() < 1e-12);
        }
    }

    #[test]
    fn bbox_of_rotated_cylinder_is_tight() {
        let rot = rotation_from_z(Vec3::new(1.0, 1.0, 0.0).normalize());
        let cyl = Posed::new(
            Primitive::Cylinder {
                half_height: 0.4,
                radius: 0.1,
            },
            SimilarityTransform::new(1.0, rot, Vec3::zeros()).unwrap(),
        );
        let (lo, hi) = cyl.bbox();
        let expect = 0.4 * 0.5f64.sqrt() + 0.1 * 0.5f64.sqrt();
        assert!((hi.x - expect).abs() < 1e-12 && (lo.y + expect).abs() < 1e-12);
        assert!((hi.z - 0.1).abs() < 1e-12);
    }

    #[test]
    fn primitive_outside_domain_is_rejected() {
        let s = Solid::single(Posed::sphere(Vec3::new(0.8, 0.0, 0.0), 0.3));
        assert!(matches!(analytic_sdf(&s, 16), Err(Error::DomainViolation(_))));
        assert!(analytic_sdf(&Solid::single(Posed::sphere(Vec3::zeros(), 0.3)), 4).is_err());
    }

    #[test]
    fn posed_distance_scales_with_pose() {
        let p = Posed::new(
            Primitive::Sphere { radius: 1.0 },
            SimilarityTransform::new(0.25, Matrix3::identity(), Vec3::new(0.1, 0.0, 0.0)).unwrap(),
        );
        assert!((p.sdf(Vec3::new(0.6, 0.0, 0.0)) - 0.25).abs() < 1e-15);
    }
}
