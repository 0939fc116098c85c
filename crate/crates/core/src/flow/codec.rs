//! Linear latent codec: mean grid plus an orthonormal basis of the leading
//! principal directions of a set of grids.
//!
//! File layout (little-endian): magic `b"CODC"`, `u32` K, `u32` N (= R^3),
//! N `f32` mean values, then the N x K basis as `f32` in column-major order.
//! Loading re-orthonormalizes the basis in `f64`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::LatentCode;
use crate::error::{Error, Result};
use crate::grid::SdfGrid;

const MAGIC: &[u8; 4] = b"CODC";

#[derive(Debug, Clone, PartialEq)]
pub struct LinearCodec {
    resolution: usize,
    k: usize,
    mean: Vec<f64>,
    /// Column-major N x K.
    basis: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Modified Gram-Schmidt of `v` against `basis`, applied twice.
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) -> f64 {
    for _ in 0..2 {
        for b in basis {
            let c = dot(v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
    }
    dot(v, v).sqrt()
}

impl LinearCodec {
    /// Fits the mean and the top-`k` left singular vectors of the centered
    /// data. Directions beyond the data rank are completed with orthonormal
    /// vectors drawn from a fixed seed.
    pub fn fit(grids: &[SdfGrid], k: usize) -> Result<Self> {
        let first = grids
            .first()
            .ok_or_else(|| Error::Empty("codec needs at least one grid".into()))?;
        let r = first.resolution();
        if let Some(g) = grids.iter().find(|g| g.resolution() != r) {
            return Err(Error::ResolutionMismatch(r, g.resolution()));
        }
        let n = r * r * r;
        let count = grids.len();
        if k == 0 || k > count.min(n) {
            return Err(Error::InvalidArgument(format!(
                "latent dimension {k} must be in 1..={}",
                count.min(n)
            )));
        }
        let mut mean = vec![0.0; n];
        for g in grids {
            mean.iter_mut().zip(g.values()).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);

        let centered = DMatrix::from_fn(n, count, |i, j| grids[j].values()[i] - mean[i]);
        let gram = centered.transpose() * &centered;
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..count).collect();
        order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
        let top = eig.eigenvalues[order[0]].max(0.0);

        let mut columns: Vec<Vec<f64>> = Vec::with_capacity(k);
        for &o in order.iter().take(k) {
            let lambda = eig.eigenvalues[o];
            if lambda <= 1e-10 * top.max(1e-300) || lambda <= 0.0 {
                break;
            }
            let u = eig.eigenvectors.column(o);
            let mut col: Vec<f64> = (&centered * u).iter().map(|x| x / lambda.sqrt()).collect();
            let nrm = orthogonalize(&mut col, &columns);
            if nrm < 1e-8 {
                break;
            }
            col.iter_mut().for_each(|x| *x /= nrm);
            columns.push(col);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x00c0_dec0);
        while columns.len() < k {
            let mut col: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let nrm = orthogonalize(&mut col, &columns);
            if nrm < 1e-8 {
                continue;
            }
            col.iter_mut().for_each(|x| *x /= nrm);
            columns.push(col);
        }
        let basis: Vec<f64> = columns.into_iter().flatten().collect();
        Ok(Self {
            resolution: r,
            k,
            mean,
            basis,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn latent_dim(&self) -> usize {
        self.k
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Column `j` of the basis.
    pub fn basis_column(&self, j: usize) -> &[f64] {
        let n = self.mean.len();
        &self.basis[j * n..(j + 1) * n]
    }

    fn check_grid(&self, grid: &SdfGrid) -> Result<()> {
        if grid.resolution() != self.resolution {
            return Err(Error::ResolutionMismatch(self.resolution, grid.resolution()));
        }
        Ok(())
    }

    /// `z = B^T (g - mean)`.
    pub fn encode(&self, grid: &SdfGrid) -> Result<LatentCode> {
        self.check_grid(grid)?;
        let centered: Vec<f64> = grid.values().iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        LatentCode::new(
            (0..self.k)
                .into_par_iter()
                .map(|j| dot(self.basis_column(j), &centered))
                .collect(),
        )
    }

    /// `g = mean + B z`.
    pub fn decode(&self, z: &[f64]) -> Result<SdfGrid> {
        if z.len() != self.k {
            return Err(Error::DimensionMismatch {
                expected: self.k,
                got: z.len(),
            });
        }
        let n = self.mean.len();
        let mut values = self.mean.clone();
        values.par_chunks_mut(4096).enumerate().for_each(|(c, chunk)| {
            let start = c * 4096;
            for (j, zj) in z.iter().enumerate() {
                let col = &self.basis[j * n + start..j * n + start + chunk.len()];
                chunk.iter_mut().zip(col).for_each(|(v, b)| *v += b * zj);
            }
        });
        SdfGrid::from_values(self.resolution, values)
    }

    /// Chain rule through the decoder: `B^T dE/dg`.
    pub fn pullback(&self, grid_grad: &[f64]) -> Result<Vec<f64>> {
        if grid_grad.len() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                got: grid_grad.len(),
            });
        }
        Ok((0..self.k)
            .into_par_iter()
            .map(|j| dot(self.basis_column(j), grid_grad))
            .collect())
    }

    /// Decoded values at the flat indices `idx` only.
    pub fn decode_at(&self, z: &[f64], idx: &[usize]) -> Result<Vec<f64>> {
        if z.len() != self.k {
            return Err(Error::DimensionMismatch {
                expected: self.k,
                got: z.len(),
            });
        }
        let n = self.mean.len();
        if let Some(bad) = idx.iter().find(|i| **i >= n) {
            return Err(Error::InvalidArgument(format!("voxel index {bad} out of range")));
        }
        let mut out: Vec<f64> = idx.iter().map(|i| self.mean[*i]).collect();
        for (j, zj) in z.iter().enumerate() {
            let col = self.basis_column(j);
            out.iter_mut().zip(idx).for_each(|(v, i)| *v += col[*i] * zj);
        }
        Ok(out)
    }

    /// [`pullback`](Self::pullback) of a gradient supported on `idx`.
    pub fn pullback_at(&self, idx: &[usize], grad: &[f64]) -> Result<Vec<f64>> {
        if idx.len() != grad.len() {
            return Err(Error::DimensionMismatch {
                expected: idx.len(),
                got: grad.len(),
            });
        }
        let n = self.mean.len();
        if let Some(bad) = idx.iter().find(|i| **i >= n) {
            return Err(Error::InvalidArgument(format!("voxel index {bad} out of range")));
        }
        Ok((0..self.k)
            .map(|j| {
                let col = self.basis_column(j);
                idx.iter().zip(grad).map(|(i, g)| col[*i] * g).sum()
            })
            .collect())
    }

    /// Largest deviation of `B^T B` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for a in 0..self.k {
            for b in a..self.k {
                let d = dot(self.basis_column(a), self.basis_column(b));
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((d - target).abs());
            }
        }
        worst
    }

    /// Largest absolute difference between the mean and basis entries.
    pub fn max_abs_diff_to(&self, other: &LinearCodec) -> f64 {
        if self.mean.len() != other.mean.len() || self.k != other.k {
            return f64::INFINITY;
        }
        self.mean
            .iter()
            .chain(&self.basis)
            .zip(other.mean.iter().chain(&other.basis))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.mean.len();
        let mut out = Vec::with_capacity(12 + 4 * n * (self.k + 1));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for v in self.mean.iter().chain(&self.basis) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::format(path, "missing CODC magic"));
        }
        let k = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let r = (n as f64).cbrt().round() as usize;
        if r < 2 || r * r * r != n || k == 0 || k > n {
            return Err(Error::format(path, format!("bad codec shape K={k}, N={n}")));
        }
        if bytes.len() != 12 + 4 * n * (k + 1) {
            return Err(Error::format(path, "truncated codec payload"));
        }
        let vals: Vec<f64> = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(path, "non-finite codec value"));
        }
        let (mean, basis) = vals.split_at(n);
        let mut columns: Vec<Vec<f64>> = Vec::with_capacity(k);
        for col in basis.chunks_exact(n) {
            let mut col = col.to_vec();
            let nrm = orthogonalize(&mut col, &columns);
            if !(nrm > 0.5) {
                return Err(Error::format(path, "codec basis is not orthonormal"));
            }
            col.iter_mut().for_each(|x| *x /= nrm);
            columns.push(col);
        }
        Ok(Self {
            resolution: r,
            k,
            mean: mean.to_vec(),
            basis: columns.into_iter().flatten().collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{analytic_sdf, Posed, Solid, Vec3};
    use crate::objectives::ni_loss;
    use rand::Rng;

    fn spheres(r: usize) -> Vec<SdfGrid> {
        [(0.0, 0.4), (0.1, 0.3), (-0.2, 0.5), (0.05, 0.25)]
            .iter()
            .map(|(x, rad)| analytic_sdf(&Solid::single(Posed::sphere(Vec3::new(*x, 0.0, 0.0), *rad)), r).unwrap())
            .collect()
    }

    #[test]
    fn full_rank_codec_reconstructs_training_grids() {
        let gs = spheres(8);
        let c = LinearCodec::fit(&gs, 4).unwrap();
        assert!(c.orthonormality_error() <= 1e-8, "{}", c.orthonormality_error());
        for g in &gs {
            let back = c.decode(&c.encode(g).unwrap()).unwrap();
            assert!(back.max_abs_diff(g).unwrap() <= 1e-6);
        }
        let mean = c.decode(&[0.0; 4]).unwrap();
        assert_eq!(mean.values(), c.mean());
        assert!(LinearCodec::fit(&gs, 5).is_err());
        assert!(c.decode(&[0.0; 3]).is_err());
    }

    #[test]
    fn rank_one_pair_captures_difference() {
        let g = spheres(8).remove(1);
        let m = spheres(8).remove(0);
        let mirror = SdfGrid::from_values(8, g.values().iter().zip(m.values()).map(|(a, b)| -a + 2.0 * b).collect()).unwrap();
        // The mean of {g, 2m - g} is m, and the difference direction is g - m.
        let c = LinearCodec::fit(&[g.clone(), mirror], 1).unwrap();
        let diff: Vec<f64> = g.values().iter().zip(m.values()).map(|(a, b)| a - b).collect();
        let nd = dot(&diff, &diff).sqrt();
        let cos = dot(c.basis_column(0), &diff) / nd;
        assert!((cos.abs() - 1.0).abs() < 1e-6, "{cos}");
    }

    #[test]
    fn completion_keeps_basis_orthonormal() {
        let g = spheres(8).remove(0);
        let c = LinearCodec::fit(&[g.clone(), g.clone(), g], 3).unwrap();
        assert!(c.orthonormality_error() <= 1e-8);
    }

    #[test]
    fn decoder_chain_rule_matches_finite_differences() {
        let gs = spheres(8);
        let c = LinearCodec::fit(&gs, 4).unwrap();
        let hand = SdfGrid::from_fn(8, |p| p.x + 0.1).unwrap();
        let energy = |z: &[f64]| ni_loss(&c.decode(z).unwrap(), &hand, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let z: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
            let e = energy(&z);
            let g = c.pullback(&e.grad).unwrap();
            for j in 0..4 {
                let h = 1e-5;
                let mut up = z.clone();
                up[j] += h;
                let mut dn = z.clone();
                dn[j] -= h;
                let fd = (energy(&up).value - energy(&dn).value) / (2.0 * h);
                let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-12);
                assert!(rel < 1e-4 || (fd - g[j]).abs() < 1e-12, "{fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn codec_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = LinearCodec::fit(&spheres(8), 3).unwrap();
        let p = dir.path().join("codec.bin");
        c.save(&p).unwrap();
        let back = LinearCodec::load(&p).unwrap();
        assert_eq!(back.latent_dim(), 3);
        assert!(back.orthonormality_error() <= 1e-8);
        let (a, b) = (c.decode(&[0.3, -0.2, 0.1]).unwrap(), back.decode(&[0.3, -0.2, 0.1]).unwrap());
        assert!(a.max_abs_diff(&b).unwrap() < 1e-5);
        back.save(&p).unwrap();
        let again = LinearCodec::load(&p).unwrap();
        assert!(again.max_abs_diff_to(&back) < 1e-6);
        std::fs::write(&p, b"CODCgarbage").unwrap();
        assert!(LinearCodec::load(&p).is_err());
    }
}
