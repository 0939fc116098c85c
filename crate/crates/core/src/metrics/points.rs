//! Seeded surface sampling and nearest-neighbour point metrics.

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::mesh::TriMesh;
use crate::grid::Vec3;

/// Points on a surface with their unit normals.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSample {
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
}

impl SurfaceSample {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `n` area-weighted uniform samples of `mesh`. Degenerate triangles are
/// never drawn; the same seed gives the same points bit for bit.
pub fn sample_surface(mesh: &TriMesh, n: usize, seed: u64) -> Result<SurfaceSample> {
    let crosses: Vec<Vec3> = (0..mesh.triangles.len()).map(|t| mesh.face_cross(t)).collect();
    let mut cdf = Vec::with_capacity(crosses.len());
    let mut total = 0.0;
    for c in &crosses {
        total += c.norm();
        cdf.push(total);
    }
    if n == 0 || !(total > 0.0) {
        return Err(Error::Empty("mesh has no area to sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.random::<f64>() * total;
        let t = cdf.partition_point(|c| *c <= u).min(cdf.len() - 1);
        let (mut a, mut b) = (rng.random::<f64>(), rng.random::<f64>());
        if a + b > 1.0 {
            (a, b) = (1.0 - a, 1.0 - b);
        }
        let [p0, p1, p2] = mesh.corners(t);
        points.push(p0 + (p1 - p0) * a + (p2 - p0) * b);
        normals.push(crosses[t].normalize());
    }
    Ok(SurfaceSample { points, normals })
}

/// Exact nearest-neighbour queries over a fixed point set.
pub struct NearestIndex {
    tree: ImmutableKdTree<f64, 3>,
}

impl NearestIndex {
    pub fn new(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("point set".into()));
        }
        let raw: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        Ok(Self {
            tree: ImmutableKdTree::new_from_slice(&raw),
        })
    }

    /// Index and squared distance of the nearest stored point.
    pub fn nearest(&self, p: &Vec3) -> (usize, f64) {
        let nn = self.tree.nearest_one::<SquaredEuclidean>(&[p.x, p.y, p.z]);
        (nn.item as usize, nn.distance)
    }
}

fn nearest_sq(from: &[Vec3], to: &NearestIndex) -> Vec<f64> {
    from.par_iter().map(|p| to.nearest(p).1).collect()
}

fn nonempty(p: &[Vec3], q: &[Vec3]) -> Result<()> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::Empty("point set".into()));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Symmetric chamfer distance: the average of the two one-way mean squared
/// nearest distances.
pub fn chamfer(p: &[Vec3], q: &[Vec3]) -> Result<f64> {
    nonempty(p, q)?;
    let (ip, iq) = (NearestIndex::new(p)?, NearestIndex::new(q)?);
    Ok(0.5 * (mean(&nearest_sq(p, &iq)) + mean(&nearest_sq(q, &ip))))
}

/// F-score at distance `thresh`: precision is the share of `p` within
/// `thresh` of `q`, recall the share of `q` within `thresh` of `p`.
pub fn fscore(p: &[Vec3], q: &[Vec3], thresh: f64) -> Result<f64> {
    nonempty(p, q)?;
    if !(thresh >= 0.0) {
        return Err(Error::InvalidArgument("threshold must be >= 0".into()));
    }
    let (ip, iq) = (NearestIndex::new(p)?, NearestIndex::new(q)?);
    let t2 = thresh * thresh;
    let share = |d: Vec<f64>| d.iter().filter(|d| **d <= t2).count() as f64 / d.len() as f64;
    let precision = share(nearest_sq(p, &iq));
    let recall = share(nearest_sq(q, &ip));
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Symmetric mean of `|cos|` between each sample normal and the normal of
/// its nearest sample on the other surface.
pub fn normal_consistency(a: &SurfaceSample, b: &SurfaceSample) -> Result<f64> {
    nonempty(&a.points, &b.points)?;
    let one_way = |from: &SurfaceSample, to: &SurfaceSample| -> Result<f64> {
        let idx = NearestIndex::new(&to.points)?;
        let cos: Vec<f64> = from
            .points
            .par_iter()
            .zip(&from.normals)
            .map(|(p, n)| n.dot(&to.normals[idx.nearest(p).0]).abs())
            .collect();
        Ok(mean(&cos))
    };
    Ok(0.5 * (one_way(a, b)? + one_way(b, a)?))
}

/// ADD-S: mean distance from each ground-truth point to its nearest
/// predicted point. Not symmetric.
pub fn adds(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    nonempty(pred, gt)?;
    let ip = NearestIndex::new(pred)?;
    let d: Vec<f64> = nearest_sq(gt, &ip).into_iter().map(f64::sqrt).collect();
    Ok(mean(&d))
}

/// ADD-S below `fraction` of the object diameter.
pub fn adds_at(adds: f64, diameter: f64, fraction: f64) -> bool {
    adds < fraction * diameter
}

/// Largest pairwise distance.
pub fn diameter(points: &[Vec3]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Empty("point set".into()));
    }
    Ok(points
        .par_iter()
        .enumerate()
        .map(|(i, p)| points[i + 1..].iter().map(|q| (p - q).norm_squared()).fold(0.0, f64::max))
        .reduce(|| 0.0, f64::max)
        .sqrt())
}
