//! Box overlap and rotation error between predicted and true geometry.

use nalgebra::{Matrix3, Rotation3};

use super::points::NearestIndex;
use crate::error::{Error, Result};
use crate::grid::Vec3;

pub const ICP_MAX_ITERS: usize = 50;
pub const ICP_REL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn of(points: &[Vec3]) -> Result<Self> {
        let first = points.first().ok_or_else(|| Error::Empty("point set".into()))?;
        let (mut min, mut max) = (*first, *first);
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        Ok(Self { min, max })
    }

    pub fn volume(&self) -> f64 {
        let d = (self.max - self.min).map(|v| v.max(0.0));
        d.x * d.y * d.z
    }
}

/// IoU of two axis-aligned boxes; two degenerate boxes that coincide
/// score 1.
pub fn iou3d(a: &Aabb, b: &Aabb) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = Aabb {
        min: a.min.sup(&b.min),
        max: a.max.inf(&b.max),
    }
    .volume();
    let uni = a.volume() + b.volume() - inter;
    if uni > 0.0 {
        inter / uni
    } else {
        0.0
    }
}

/// Least-squares rigid motion taking `src[i]` to `dst[i]`.
fn kabsch(src: &[Vec3], dst: &[Vec3]) -> (Rotation3<f64>, Vec3) {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut fix = Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = Rotation3::from_matrix_unchecked(vt.transpose() * fix * u.transpose());
    (r, cd - r * cs)
}

/// Point-to-point ICP of `pred` onto `gt` from the identity. Returns the
/// geodesic angle of the recovered rotation in degrees.
pub fn icp_rot(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Empty("point set".into()));
    }
    let index = NearestIndex::new(gt)?;
    let (mut r, mut t) = (Rotation3::identity(), Vec3::zeros());
    let mut prev = f64::INFINITY;
    for _ in 0..ICP_MAX_ITERS {
        let mut matched = Vec::with_capacity(pred.len());
        let mut mse = 0.0;
        for p in pred {
            let (j, d2) = index.nearest(&(r * p + t));
            matched.push(gt[j]);
            mse += d2;
        }
        mse /= pred.len() as f64;
        (r, t) = kabsch(pred, &matched);
        if prev.is_finite() && (prev - mse).abs() <= ICP_REL_TOL * prev {
            break;
        }
        prev = mse;
    }
    Ok(geodesic_angle(&r).to_degrees())
}

/// Rotation angle in radians, accurate near zero.
pub fn geodesic_angle(r: &Rotation3<f64>) -> f64 {
    let m = r.matrix();
    let sin = 0.5 * Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm();
    let cos = 0.5 * (m.trace() - 1.0);
    sin.atan2(cos)
}
