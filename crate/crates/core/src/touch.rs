//! Contact observations and the two-channel touch tensor: a binary contact
//! occupancy grid `C` and the Euclidean distance `D` (in voxel units) from
//! every voxel to the nearest contact voxel.

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_same_resolution, Error, Result};
use crate::grid::{
    clamp_to_domain, in_domain, read_sdfg_channel, write_sdfg_channel, ChannelData, SdfGrid, Vec3,
};
use crate::transform::GridFrame;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContactSet {
    pub points: Vec<[f64; 3]>,
    pub source_finger: Vec<u32>,
}

impl ContactSet {
    pub fn new(points: Vec<Vec3>, source_finger: Vec<u32>) -> Result<Self> {
        if points.len() != source_finger.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                got: source_finger.len(),
            });
        }
        if let Some(p) = points.iter().find(|p| !in_domain(**p)) {
            return Err(Error::DomainViolation(format!("contact at {p:?}")));
        }
        Ok(Self {
            points: points.iter().map(|p| [p.x, p.y, p.z]).collect(),
            source_finger,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> Vec3 {
        Vec3::from(self.points[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.points.iter().map(|p| Vec3::from(*p))
    }
}

/// Voxels where both surfaces are within `band`, one representative per
/// 26-connected component: the member voxel center nearest the component
/// centroid. Components are labeled in scan order.
pub fn extract_contacts(hand: &SdfGrid, object: &SdfGrid, band: f64) -> Result<ContactSet> {
    check_same_resolution(hand.resolution(), object.resolution())?;
    let r = hand.resolution();
    let near: Vec<bool> = hand
        .values()
        .iter()
        .zip(object.values())
        .map(|(a, b)| a.abs() < band && b.abs() < band)
        .collect();
    let mut seen = vec![false; near.len()];
    let mut points = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..near.len() {
        if !near[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut members = Vec::new();
        while let Some(idx) = queue.pop_front() {
            members.push(idx);
            let (i, j, k) = hand.coords(idx);
            for dk in -1isize..=1 {
                for dj in -1isize..=1 {
                    for di in -1isize..=1 {
                        let (ni, nj, nk) = (i as isize + di, j as isize + dj, k as isize + dk);
                        if [ni, nj, nk].iter().any(|c| *c < 0 || *c >= r as isize) {
                            continue;
                        }
                        let n = hand.index(ni as usize, nj as usize, nk as usize);
                        if near[n] && !seen[n] {
                            seen[n] = true;
                            queue.push_back(n);
                        }
                    }
                }
            }
        }
        let centroid =
            members.iter().map(|m| hand.center_of(*m)).sum::<Vec3>() / members.len() as f64;
        let rep = members
            .iter()
            .map(|m| hand.center_of(*m))
            .min_by(|a, b| (a - centroid).norm().total_cmp(&(b - centroid).norm()))
            .expect("component is non-empty");
        points.push(rep);
    }
    let fingers = (0..points.len() as u32).collect();
    ContactSet::new(points, fingers)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TouchTensor {
    resolution: usize,
    occupancy: Vec<u8>,
    distance: Vec<f32>,
}

/// `D` value used everywhere when there are no contacts: the full grid
/// diagonal in voxel units.
pub fn empty_distance_sentinel(resolution: usize) -> f64 {
    3f64.sqrt() * resolution as f64
}

impl TouchTensor {
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Contact occupancy `C` (0 or 1 per voxel).
    pub fn occupancy(&self) -> &[u8] {
        &self.occupancy
    }

    /// Distance channel `D` in voxel units.
    pub fn distance(&self) -> &[f32] {
        &self.distance
    }

    pub fn contact_count(&self) -> usize {
        self.occupancy.iter().filter(|c| **c != 0).count()
    }

    /// Indices of contact voxels.
    pub fn contact_indices(&self) -> Vec<usize> {
        (0..self.occupancy.len())
            .filter(|i| self.occupancy[*i] != 0)
            .collect()
    }

    pub fn save(&self, c_path: impl AsRef<Path>, d_path: impl AsRef<Path>) -> Result<()> {
        write_sdfg_channel(c_path, self.resolution, b'C', &ChannelData::U8(self.occupancy.clone()))?;
        write_sdfg_channel(d_path, self.resolution, b'D', &ChannelData::F32(self.distance.clone()))
    }

    pub fn load(c_path: impl AsRef<Path>, d_path: impl AsRef<Path>) -> Result<Self> {
        let (rc, tc, c) = read_sdfg_channel(c_path.as_ref())?;
        let (rd, td, d) = read_sdfg_channel(d_path.as_ref())?;
        check_same_resolution(rc, rd)?;
        match (tc, c, td, d) {
            (b'C', ChannelData::U8(occupancy), b'D', ChannelData::F32(distance)) => Ok(Self {
                resolution: rc,
                occupancy,
                distance,
            }),
            _ => Err(Error::format(c_path.as_ref(), "expected a u8 'C' and an f32 'D' channel")),
        }
    }
}

/// One-dimensional squared distance transform of a sampled function
/// (lower envelope of parabolas, Felzenszwalb and Huttenlocher).
fn dt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(p) => p,
        None => {
            out.fill(f64::INFINITY);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance transform (voxel units) of a binary
/// mask, separable over the three axes.
pub fn squared_distance_transform(mask: &[bool], r: usize) -> Vec<f64> {
    let mut d: Vec<f64> = mask
        .iter()
        .map(|m| if *m { 0.0 } else { f64::INFINITY })
        .collect();
    let mut line = vec![0.0; r];
    let mut out = vec![0.0; r];
    let mut v = vec![0usize; r];
    let mut z = vec![0.0; r + 1];
    let strides = [1, r, r * r];
    for (axis, &stride) in strides.iter().enumerate() {
        let others: Vec<usize> = (0..3).filter(|a| *a != axis).map(|a| strides[a]).collect();
        for a in 0..r {
            for b in 0..r {
                let base = a * others[0] + b * others[1];
                for q in 0..r {
                    line[q] = d[base + q * stride];
                }
                dt_1d(&line, &mut out, &mut v, &mut z);
                for q in 0..r {
                    d[base + q * stride] = out[q];
                }
            }
        }
    }
    d
}

/// Marks the voxel containing each contact point and computes the exact
/// distance transform of the marks.
pub fn build_touch_tensor(contacts: &ContactSet, resolution: usize) -> Result<TouchTensor> {
    if resolution < 8 {
        return Err(Error::InvalidArgument(format!(
            "touch tensor needs R >= 8, got {resolution}"
        )));
    }
    let r = resolution;
    let probe = SdfGrid::constant(r, 0.0)?;
    let mut mask = vec![false; r * r * r];
    for p in contacts.iter() {
        let (i, j, k) = probe.voxel_of(p);
        mask[probe.index(i, j, k)] = true;
    }
    let distance = if contacts.is_empty() {
        vec![empty_distance_sentinel(r) as f32; r * r * r]
    } else {
        squared_distance_transform(&mask, r)
            .into_iter()
            .map(|d| d.sqrt() as f32)
            .collect()
    };
    Ok(TouchTensor {
        resolution: r,
        occupancy: mask.into_iter().map(u8::from).collect(),
        distance,
    })
}

/// Offsets each point by a vector drawn uniformly from the ball of radius
/// `sigma_mm` (converted to domain units), then clamps into the domain.
pub fn perturb_contacts<R: Rng + ?Sized>(
    contacts: &ContactSet,
    sigma_mm: f64,
    frame: &GridFrame,
    rng: &mut R,
) -> Result<ContactSet> {
    if !(sigma_mm >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_mm must be >= 0, got {sigma_mm}")));
    }
    if sigma_mm == 0.0 {
        return Ok(contacts.clone());
    }
    let radius = frame.mm_to_domain(sigma_mm);
    let points = contacts
        .iter()
        .map(|p| {
            let offset = loop {
                let v = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                if v.norm_squared() <= 1.0 {
                    break v * radius;
                }
            };
            clamp_to_domain(p + offset)
        })
        .collect();
    ContactSet::new(points, contacts.source_finger.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{analytic_sdf, Posed, Solid};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(mask: &[bool], r: usize) -> Vec<f64> {
        let pts: Vec<(f64, f64, f64)> = (0..mask.len())
            .filter(|i| mask[*i])
            .map(|i| ((i % r) as f64, ((i / r) % r) as f64, (i / (r * r)) as f64))
            .collect();
        (0..mask.len())
            .map(|i| {
                let (x, y, z) = ((i % r) as f64, ((i / r) % r) as f64, (i / (r * r)) as f64);
                pts.iter()
                    .map(|(a, b, c)| ((x - a).powi(2) + (y - b).powi(2) + (z - c).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn far_apart_or_zero_band_gives_no_contacts() {
        let hand = analytic_sdf(&Solid::single(Posed::sphere(Vec3::new(-0.6, 0.0, 0.0), 0.2)), 16).unwrap();
        let obj = analytic_sdf(&Solid::single(Posed::sphere(Vec3::new(0.6, 0.0, 0.0), 0.2)), 16).unwrap();
        assert!(extract_contacts(&hand, &obj, 0.125).unwrap().is_empty());
        assert!(extract_contacts(&hand, &hand, 0.0).unwrap().is_empty());
    }

    #[test]
    fn tangent_sphere_on_plane_touches_once() {
        let r = 32;
        let hand = SdfGrid::from_fn(r, |p| p.z + 0.3).unwrap();
        let obj = analytic_sdf(&Solid::single(Posed::sphere(Vec3::new(0.05, -0.02, 0.1), 0.4)), r).unwrap();
        let h = hand.voxel_size();
        let c = extract_contacts(&hand, &obj, h).unwrap();
        assert_eq!(c.len(), 1);
        let tangency = Vec3::new(0.05, -0.02, -0.3);
        assert!((c.point(0) - tangency).norm() <= h, "{:?}", c.point(0));
    }

    #[test]
    fn empty_contacts_give_sentinel() {
        let t = build_touch_tensor(&ContactSet::default(), 8).unwrap();
        assert_eq!(t.contact_count(), 0);
        assert!(t.distance().iter().all(|d| (*d as f64 - (3f64.sqrt() * 8.0) as f32 as f64).abs() < 1e-12));
        assert!(build_touch_tensor(&ContactSet::default(), 4).is_err());
    }

    #[test]
    fn center_contact_corner_distance() {
        // Odd resolution so a voxel sits exactly at the grid center.
        let r = 17;
        let c = ContactSet::new(vec![Vec3::zeros()], vec![0]).unwrap();
        let t = build_touch_tensor(&c, r).unwrap();
        let expect = 3f64.sqrt() * (r as f64 / 2.0 - 0.5);
        for corner in [0, r - 1, r * r * r - 1] {
            assert!((t.distance()[corner] as f64 - expect).abs() < 1e-6);
        }
        let mask: Vec<bool> = t.occupancy().iter().map(|c| *c != 0).collect();
        let exact = squared_distance_transform(&mask, r)[0].sqrt();
        assert!((exact - expect).abs() < 1e-9);
    }

    #[test]
    fn two_contacts_match_brute_force() {
        let r = 16;
        let c = ContactSet::new(vec![Vec3::new(-0.5, 0.2, 0.1), Vec3::new(0.7, -0.6, -0.9)], vec![0, 1]).unwrap();
        let t = build_touch_tensor(&c, r).unwrap();
        let mask: Vec<bool> = t.occupancy().iter().map(|c| *c != 0).collect();
        let bf = brute_force(&mask, r);
        for (a, b) in t.distance().iter().zip(&bf) {
            assert!((*a as f64 - b).abs() <= 1e-9_f64.max(b * 1e-7));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn distance_transform_is_exact(seed in 0u64..10_000, n in 1usize..6, r in 8usize..=20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mask = vec![false; r * r * r];
            for _ in 0..n {
                mask[rng.random_range(0..r * r * r)] = true;
            }
            let dt = squared_distance_transform(&mask, r);
            let bf = brute_force(&mask, r);
            for (i, (a, b)) in dt.iter().zip(&bf).enumerate() {
                prop_assert!((a.sqrt() - b).abs() < 1e-9);
                prop_assert_eq!(mask[i], *a == 0.0);
            }
        }

        #[test]
        fn distance_is_lipschitz_in_voxel_steps(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = 12;
            let pts: Vec<Vec3> = (0..3).map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
            let t = build_touch_tensor(&ContactSet::new(pts, vec![0, 1, 2]).unwrap(), r).unwrap();
            let d = t.distance();
            for k in 0..r { for j in 0..r { for i in 0..r - 1 {
                let a = (k * r + j) * r + i;
                prop_assert!((d[a] - d[a + 1]).abs() <= 1.0 + 1e-6);
            }}}
        }

        #[test]
        fn three_mm_noise_moves_contact_voxels_at_most_one_step(seed in 0u64..10_000, scale in 0.1f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = 64;
            let probe = SdfGrid::constant(r, 0.0).unwrap();
            let pts: Vec<Vec3> = (0..5).map(|_| Vec3::new(rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9))).collect();
            let c = ContactSet::new(pts, vec![0; 5]).unwrap();
            let frame = GridFrame::with_scale(scale).unwrap();
            let moved = perturb_contacts(&c, 3.0, &frame, &mut rng).unwrap();
            for (a, b) in c.iter().zip(moved.iter()) {
                let (va, vb) = (probe.voxel_of(a), probe.voxel_of(b));
                prop_assert!(va.0.abs_diff(vb.0) <= 1 && va.1.abs_diff(vb.1) <= 1 && va.2.abs_diff(vb.2) <= 1);
            }
        }
    }

    #[test]
    fn perturbation_bounds_and_determinism() {
        let c = ContactSet::new(vec![Vec3::zeros(), Vec3::new(0.99, 0.99, -0.99)], vec![0, 1]).unwrap();
        let frame = GridFrame::with_scale(0.15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(perturb_contacts(&c, 0.0, &frame, &mut rng).unwrap(), c);
        for seed in 0..50 {
            let m = perturb_contacts(&c, 3.0, &frame, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for (a, b) in c.iter().zip(m.iter()) {
                assert!((a - b).norm() <= 0.003 / 0.15 + 1e-12);
                assert!(in_domain(b));
            }
        }
        let a = perturb_contacts(&c, 5.0, &frame, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = perturb_contacts(&c, 5.0, &frame, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tensor_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let c = ContactSet::new(vec![Vec3::new(0.1, 0.2, 0.3)], vec![2]).unwrap();
        let t = build_touch_tensor(&c, 8).unwrap();
        t.save(dir.path().join("c.sdfg"), dir.path().join("d.sdfg")).unwrap();
        let back = TouchTensor::load(dir.path().join("c.sdfg"), dir.path().join("d.sdfg")).unwrap();
        assert_eq!(back, t);
        assert!(TouchTensor::load(dir.path().join("d.sdfg"), dir.path().join("c.sdfg")).is_err());
    }
}
