//! Similarity transforms in grid coordinates, camera-aligned frame metadata,
//! in-grid SDF augmentation and hand-object scene canonicalization.

use nalgebra::Matrix3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{gradient_stencil, in_domain, SdfGrid, Solid, Vec3};
use crate::metrics::NearestIndex;

const ORTHO_TOL: f64 = 1e-9;

/// `x -> s * R * x + t` with `s > 0` and `R` a proper rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransformRepr", into = "TransformRepr")]
pub struct SimilarityTransform {
    scale: f64,
    rotation: Matrix3<f64>,
    translation: Vec3,
}

/// On-disk form: `{s, R_g (row-major), t}`.
#[derive(Serialize, Deserialize)]
struct TransformRepr {
    s: f64,
    #[serde(rename = "R_g")]
    r_g: [f64; 9],
    t: [f64; 3],
}

impl From<SimilarityTransform> for TransformRepr {
    fn from(x: SimilarityTransform) -> Self {
        let r = x.rotation;
        TransformRepr {
            s: x.scale,
            r_g: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            t: x.translation.into(),
        }
    }
}

impl TryFrom<TransformRepr> for SimilarityTransform {
    type Error = Error;

    fn try_from(r: TransformRepr) -> Result<Self> {
        SimilarityTransform::new(
            r.s,
            Matrix3::from_row_slice(&r.r_g),
            Vec3::from(r.t),
        )
    }
}

pub fn is_rotation(r: &Matrix3<f64>) -> bool {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    ortho <= ORTHO_TOL && (r.determinant() - 1.0).abs() <= ORTHO_TOL
}

impl SimilarityTransform {
    pub fn new(scale: f64, rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale must be > 0, got {scale}")));
        }
        if !is_rotation(&rotation) {
            return Err(Error::InvalidArgument("R_g is not a proper rotation".into()));
        }
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite translation".into()));
        }
        Ok(Self {
            scale,
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn translation(t: Vec3) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation_vector(&self) -> Vec3 {
        self.translation
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }

    /// `R^T (x - t) / s`
    pub fn inverse_apply(&self, x: Vec3) -> Vec3 {
        self.rotation.transpose() * (x - self.translation) / self.scale
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation * self.scale + self.translation,
        }
    }

    pub fn invert(&self) -> SimilarityTransform {
        let rt = self.rotation.transpose();
        SimilarityTransform {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

/// Camera-aligned grid metadata. After alignment the camera looks along
/// grid `+z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridFrame {
    pub camera_axis: [f64; 3],
    /// Row-major rotation from the grid frame back to the world frame.
    pub rotation_to_world: [f64; 9],
    /// Meters per domain unit.
    pub metric_scale: f64,
}

impl GridFrame {
    pub fn new(rotation_to_world: Matrix3<f64>, metric_scale: f64) -> Result<Self> {
        if !(metric_scale > 0.0) {
            return Err(Error::InvalidArgument("metric_scale must be > 0".into()));
        }
        if !is_rotation(&rotation_to_world) {
            return Err(Error::InvalidArgument("rotation_to_world is not a rotation".into()));
        }
        let r = rotation_to_world;
        Ok(Self {
            camera_axis: [0.0, 0.0, 1.0],
            rotation_to_world: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            metric_scale,
        })
    }

    /// Frame with identity world rotation.
    pub fn with_scale(metric_scale: f64) -> Result<Self> {
        Self::new(Matrix3::identity(), metric_scale)
    }

    pub fn mm_to_domain(&self, mm: f64) -> f64 {
        mm * 1e-3 / self.metric_scale
    }
}

/// Points on the zero level set, estimated from voxels with `|S| < h` by a
/// single Newton projection along the stencil gradient.
pub fn surface_points(grid: &SdfGrid) -> Result<Vec<Vec3>> {
    let h = grid.voxel_size();
    let grads = gradient_stencil(grid)?;
    let pts: Vec<Vec3> = grid
        .values()
        .iter()
        .enumerate()
        .filter(|(_, v)| v.abs() < h)
        .map(|(idx, v)| {
            let c = grid.center_of(idx);
            match grads.get(idx) {
                Some(g) if g.norm() > 1e-12 => c - g * (*v / g.norm_squared()),
                _ => c,
            }
        })
        .collect();
    if pts.is_empty() {
        return Err(Error::EmptySurface(0.0));
    }
    Ok(pts)
}

fn bounds(points: impl Iterator<Item = Vec3>) -> (Vec3, Vec3) {
    points.fold(
        (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.zip_map(&p, f64::min), hi.zip_map(&p, f64::max)),
    )
}

/// Largest scale at which the rotated surface bounding box fits the domain
/// shrunk by `padding_voxels` on every face (any translation allowed).
pub fn max_feasible_scale(grid: &SdfGrid, rotation: &Matrix3<f64>, padding_voxels: usize) -> Result<f64> {
    if grid.count_inside() == 0 {
        return Err(Error::Empty("grid has no interior voxels".into()));
    }
    let pts = surface_points(grid)?;
    let (lo, hi) = bounds(pts.iter().map(|p| rotation * p));
    let room = 2.0 * (1.0 - padding_voxels as f64 * grid.voxel_size());
    let ext = hi - lo;
    Ok((0..3)
        .map(|a| if ext[a] > 0.0 { room / ext[a] } else { f64::INFINITY })
        .fold(f64::INFINITY, f64::min))
}

/// Evaluates the canonical field at an arbitrary point. Outside the domain
/// the object lies entirely inside, so the field is the distance to the
/// nearest zero-level point.
fn extended_read(grid: &SdfGrid, surface: &NearestIndex, p: Vec3) -> f64 {
    if in_domain(p) {
        grid.sample_trilinear(p).expect("in domain")
    } else {
        surface.nearest(&p).1.sqrt()
    }
}

/// `S_aug(x) = s * S(R^T (x - t) / s)` with trilinear resampling.
pub fn augment_sdf(grid: &SdfGrid, xf: &SimilarityTransform) -> Result<SdfGrid> {
    let pts = surface_points(grid)?;
    let tol = 0.5 * grid.voxel_size();
    if let Some(p) = pts
        .iter()
        .map(|p| xf.apply(*p))
        .find(|q| q.iter().any(|c| c.abs() > 1.0 + tol))
    {
        return Err(Error::Infeasible(format!(
            "surface point maps to ({:.3}, {:.3}, {:.3})",
            p.x, p.y, p.z
        )));
    }
    let surface = NearestIndex::new(&pts)?;
    let s = xf.scale();
    SdfGrid::from_fn(grid.resolution(), |x| {
        s * extended_read(grid, &surface, xf.inverse_apply(x))
    })
}

/// Draws an in-grid augmentation for a caller-provided rotation: scale
/// `U(0.5, 1)` clipped to the feasible maximum, uniform in-plane translation
/// over the feasible range, and `z` translation centering the surface.
pub fn sample_augmentation<R: Rng + ?Sized>(
    rng: &mut R,
    grid: &SdfGrid,
    rotation: &Matrix3<f64>,
    padding_voxels: usize,
) -> Result<SimilarityTransform> {
    let s_max = max_feasible_scale(grid, rotation, padding_voxels)?;
    let s = rng.random_range(0.5..1.0f64).min(s_max);
    let pts = surface_points(grid)?;
    let (lo, hi) = bounds(pts.iter().map(|p| rotation * p * s));
    let limit = 1.0 - padding_voxels as f64 * grid.voxel_size();
    let mut t = Vec3::zeros();
    for a in 0..2 {
        let (tmin, tmax) = (-limit - lo[a], limit - hi[a]);
        t[a] = if tmax > tmin {
            rng.random_range(tmin..tmax)
        } else {
            0.5 * (tmin + tmax)
        };
    }
    t.z = -0.5 * (lo.z + hi.z);
    SimilarityTransform::new(s, *rotation, t)
}

/// A hand-object scene mapped into the canonical grid.
#[derive(Debug, Clone)]
pub struct CanonicalScene {
    pub transform: SimilarityTransform,
    pub hand: Solid,
    pub object: Solid,
    pub fingertips: Vec<Vec3>,
}

/// One shared scale-and-translate fitting the union bounding box with
/// `padding_voxels` of margin: centered in `(x, y)`, with the fingertip
/// centroid on the `z = 0` plane.
pub fn canonicalize_scene(
    hand: &Solid,
    object: &Solid,
    fingertips: &[Vec3],
    padding_voxels: usize,
    resolution: usize,
) -> Result<CanonicalScene> {
    if fingertips.is_empty() {
        return Err(Error::Empty("no fingertips".into()));
    }
    let (lo, hi) = hand
        .union(object)
        .bbox()
        .ok_or_else(|| Error::Empty("empty scene".into()))?;
    let limit = 1.0 - padding_voxels as f64 * 2.0 / resolution as f64;
    if limit <= 0.0 {
        return Err(Error::InvalidArgument("padding exceeds the grid".into()));
    }
    let cz = fingertips.iter().map(|p| p.z).sum::<f64>() / fingertips.len() as f64;
    let half_z = (hi.z - cz).max(cz - lo.z);
    let mut s = f64::INFINITY;
    for a in 0..2 {
        let ext = hi[a] - lo[a];
        if ext > 0.0 {
            s = s.min(2.0 * limit / ext);
        }
    }
    if half_z > 0.0 {
        s = s.min(limit / half_z);
    }
    if !s.is_finite() {
        return Err(Error::Empty("degenerate scene extent".into()));
    }
    let center = Vec3::new(0.5 * (lo.x + hi.x), 0.5 * (lo.y + hi.y), cz);
    let transform = SimilarityTransform::new(s, Matrix3::identity(), -center * s)?;
    Ok(CanonicalScene {
        transform,
        hand: hand.transformed(&transform),
        object: object.transformed(&transform),
        fingertips: fingertips.iter().map(|p| transform.apply(*p)).collect(),
    })
}

/// Uniformly distributed rotation (unit quaternion method).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let tau = std::f64::consts::TAU;
    let q = nalgebra::Quaternion::new(
        (1.0 - u1).sqrt() * (tau * u2).sin(),
        (1.0 - u1).sqrt() * (tau * u2).cos(),
        u1.sqrt() * (tau * u3).sin(),
        u1.sqrt() * (tau * u3).cos(),
    );
    nalgebra::UnitQuaternion::from_quaternion(q)
        .to_rotation_matrix()
        .into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{analytic_sdf, Posed, Primitive};
    use nalgebra::{Rotation3, Unit};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rz(deg: f64) -> Matrix3<f64> {
        Rotation3::from_axis_angle(&Unit::new_normalize(Vec3::z()), deg.to_radians()).into_inner()
    }

    fn sphere_grid(r: usize, c: Vec3, radius: f64) -> SdfGrid {
        analytic_sdf(&Solid::single(Posed::sphere(c, radius)), r).unwrap()
    }

    #[test]
    fn compose_and_invert() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = SimilarityTransform::new(0.7, random_rotation(&mut rng), Vec3::new(0.1, -0.2, 0.3)).unwrap();
        let b = SimilarityTransform::new(1.3, random_rotation(&mut rng), Vec3::new(-0.4, 0.0, 0.2)).unwrap();
        let id = a.compose(&a.invert());
        assert!((id.scale() - 1.0).abs() < 1e-12);
        assert!((id.rotation() - Matrix3::identity()).abs().max() < 1e-12);
        assert!(id.translation_vector().norm() < 1e-12);
        assert_eq!(SimilarityTransform::identity().invert(), SimilarityTransform::identity());
        assert!((a.compose(&b).scale() - 0.7 * 1.3).abs() < 1e-15);
        let back = a.invert().compose(&a);
        for _ in 0..100 {
            let p = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            assert!((back.apply(p) - p).norm() < 1e-10);
            assert!((a.compose(&b).apply(p) - a.apply(b.apply(p))).norm() < 1e-12);
        }
    }

    #[test]
    fn transform_json_layout() {
        let x = SimilarityTransform::new(0.5, rz(90.0), Vec3::new(1.0, 2.0, 3.0)).unwrap();
        let v: serde_json::Value = serde_json::to_value(x).unwrap();
        assert_eq!(v["s"], 0.5);
        assert_eq!(v["R_g"].as_array().unwrap().len(), 9);
        assert!((v["R_g"][1].as_f64().unwrap() + 1.0).abs() < 1e-15);
        let back: SimilarityTransform = serde_json::from_value(v).unwrap();
        assert_eq!(back, x);
        let bad = serde_json::json!({"s": -1.0, "R_g": [1,0,0,0,1,0,0,0,1], "t": [0,0,0]});
        assert!(serde_json::from_value::<SimilarityTransform>(bad).is_err());
    }

    #[test]
    fn identity_augmentation_is_a_no_op() {
        let g = sphere_grid(24, Vec3::new(0.1, 0.0, -0.1), 0.4);
        let out = augment_sdf(&g, &SimilarityTransform::identity()).unwrap();
        assert!(out.max_abs_diff(&g).unwrap() < 1e-12);
    }

    #[test]
    fn scaled_and_translated_spheres_match_analytic() {
        let r = 32;
        let g = sphere_grid(r, Vec3::zeros(), 0.5);
        let h = g.voxel_size();
        let check = |xf: SimilarityTransform, expect: SdfGrid| {
            let out = augment_sdf(&g, &xf).unwrap();
            let worst = out.max_abs_diff(&expect).unwrap();
            assert!(worst <= 1.5 * h, "{worst}");
        };
        check(
            SimilarityTransform::new(0.5, Matrix3::identity(), Vec3::zeros()).unwrap(),
            sphere_grid(r, Vec3::zeros(), 0.25),
        );
        check(
            SimilarityTransform::translation(Vec3::new(0.3, 0.0, 0.0)),
            sphere_grid(r, Vec3::new(0.3, 0.0, 0.0), 0.5),
        );
    }

    #[test]
    fn escaping_surface_is_infeasible() {
        let g = sphere_grid(16, Vec3::zeros(), 0.5);
        let xf = SimilarityTransform::translation(Vec3::new(0.8, 0.0, 0.0));
        assert!(matches!(augment_sdf(&g, &xf), Err(Error::Infeasible(_))));
    }

    #[test]
    fn feasible_scale_examples() {
        let g = sphere_grid(64, Vec3::zeros(), 0.5);
        let s = max_feasible_scale(&g, &Matrix3::identity(), 0).unwrap();
        assert!((s - 2.0).abs() < 0.01, "{s}");

        let h = 2.0 / 64.0;
        let touching = analytic_sdf(
            &Solid::single(Posed::aabb(Vec3::zeros(), Vec3::repeat(1.0 - 2.0 * h))),
            64,
        )
        .unwrap();
        let s = max_feasible_scale(&touching, &Matrix3::identity(), 2).unwrap();
        assert!((s - 1.0).abs() < 2e-3, "{s}");

        let long = analytic_sdf(
            &Solid::single(Posed::aabb(Vec3::zeros(), Vec3::new(0.6, 0.1, 0.1))),
            32,
        )
        .unwrap();
        let axis = max_feasible_scale(&long, &Matrix3::identity(), 0).unwrap();
        let diag = max_feasible_scale(&long, &rz(45.0), 0).unwrap();
        assert!((axis - 2.0 / 1.2).abs() < 0.03 * axis, "{axis}");
        let diag_exact = 2.0 / (0.7 * 2f64.sqrt());
        assert!((diag - diag_exact).abs() < 0.03 * diag_exact, "{diag}");

        let empty = SdfGrid::constant(16, 1.0).unwrap();
        assert!(max_feasible_scale(&empty, &Matrix3::identity(), 0).is_err());
    }

    #[test]
    fn augmentation_sampling_is_deterministic_and_feasible() {
        let g = sphere_grid(24, Vec3::zeros(), 0.3);
        let a = sample_augmentation(&mut ChaCha8Rng::seed_from_u64(9), &g, &Matrix3::identity(), 2).unwrap();
        let b = sample_augmentation(&mut ChaCha8Rng::seed_from_u64(9), &g, &Matrix3::identity(), 2).unwrap();
        assert_eq!(a, b);

        let h = 2.0 / 32.0;
        let full = analytic_sdf(
            &Solid::single(Posed::aabb(Vec3::zeros(), Vec3::repeat(1.0 - 2.0 * h))),
            32,
        )
        .unwrap();
        for seed in 0..20 {
            let x = sample_augmentation(&mut ChaCha8Rng::seed_from_u64(seed), &full, &Matrix3::identity(), 2).unwrap();
            assert!(x.scale() <= 1.0 + 1e-3);
            assert!(augment_sdf(&full, &x).is_ok());
        }
    }

    #[test]
    fn canonicalization_pads_centers_and_is_idempotent() {
        let hand = Solid::new(vec![
            Posed::capsule(Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.05, 0.02, 0.08), 0.01),
            Posed::aabb(Vec3::new(-0.02, 0.0, -0.03), Vec3::new(0.04, 0.04, 0.01)),
        ]);
        let object = Solid::single(Posed::sphere(Vec3::new(0.06, 0.03, 0.1), 0.03));
        let tips = vec![Vec3::new(0.05, 0.02, 0.08), Vec3::new(0.06, 0.0, 0.06)];
        let r = 64;
        let c = canonicalize_scene(&hand, &object, &tips, 2, r).unwrap();
        let (lo, hi) = c.hand.union(&c.object).bbox().unwrap();
        let limit = 1.0 - 2.0 * 2.0 / r as f64;
        assert!(lo.min() >= -limit - 1e-12 && hi.max() <= limit + 1e-12);
        assert!((lo.x + hi.x).abs() < 1e-12 && (lo.y + hi.y).abs() < 1e-12);
        let cz: f64 = c.fingertips.iter().map(|p| p.z).sum::<f64>() / 2.0;
        assert!(cz.abs() < 1e-12);

        let again = canonicalize_scene(&c.hand, &c.object, &c.fingertips, 2, r).unwrap();
        assert!((again.transform.scale() - 1.0).abs() < 1e-9);
        assert!(again.transform.translation_vector().norm() < 1e-9);

        // the shared transform preserves the hand-object relative pose
        let before = hand.parts[0].pose.invert().compose(&object.parts[0].pose);
        let after = c.hand.parts[0].pose.invert().compose(&c.object.parts[0].pose);
        assert!((before.translation_vector() - after.translation_vector()).norm() < 1e-12);
        assert!((before.rotation() - after.rotation()).abs().max() < 1e-12);

        let one = canonicalize_scene(&hand, &object, &tips[..1], 2, r).unwrap();
        assert!(one.fingertips[0].z.abs() < 1e-12);
        assert!(canonicalize_scene(&hand, &object, &[], 2, r).is_err());
        let _ = Primitive::Sphere { radius: 1.0 };
    }

    #[test]
    fn frame_converts_millimeters() {
        let f = GridFrame::with_scale(0.15).unwrap();
        assert!((f.mm_to_domain(3.0) - 0.02).abs() < 1e-15);
        assert!(GridFrame::with_scale(0.0).is_err());
    }
}
