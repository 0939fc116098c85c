//! Earth mover's distance between equal-size point sets.

use crate::error::{Error, Result};
use crate::grid::Vec3;

/// Largest size solved exactly; bigger inputs use entropic transport.
pub const EMD_EXACT_MAX: usize = 256;

/// Entropic transport settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    /// Final regularization as a fraction of the largest pairwise distance.
    pub reg: f64,
    /// L1 marginal violation at which a regularization level is converged.
    pub tol: f64,
    /// Iteration cap per regularization level.
    pub max_iters: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            reg: 1e-3,
            tol: 1e-6,
            max_iters: 2000,
        }
    }
}

fn cost_matrix(p: &[Vec3], q: &[Vec3]) -> Result<Vec<f64>> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    if p.is_empty() {
        return Err(Error::Empty("point set".into()));
    }
    Ok(p.iter().flat_map(|a| q.iter().map(move |b| (a - b).norm())).collect())
}

/// Minimum-cost perfect matching of a square `n x n` cost matrix
/// (row-major). Returns `col[i]`, the column matched to row `i`.
pub fn assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // shortest augmenting paths with row and column potentials; index 0 is
    // a sentinel and rows/columns are 1-based
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        while j0 != 0 {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
        }
    }
    let mut col = vec![0; n];
    for j in 1..=n {
        col[row_of[j] - 1] = j - 1;
    }
    col
}

/// Exact EMD: mean Euclidean distance under the optimal one-to-one matching.
pub fn emd_exact(p: &[Vec3], q: &[Vec3]) -> Result<f64> {
    let c = cost_matrix(p, q)?;
    let n = p.len();
    let col = assignment(&c, n);
    Ok(col.iter().enumerate().map(|(i, j)| c[i * n + j]).sum::<f64>() / n as f64)
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Entropic EMD by log-domain Sinkhorn iterations, annealing the
/// regularization from the largest distance down to `cfg.reg` of it. Returns
/// the transport cost of the final plan.
pub fn emd_sinkhorn(p: &[Vec3], q: &[Vec3], cfg: &SinkhornConfig) -> Result<f64> {
    if !(cfg.reg > 0.0 && cfg.tol > 0.0 && cfg.max_iters > 0) {
        return Err(Error::InvalidArgument("sinkhorn settings must be positive".into()));
    }
    let c = cost_matrix(p, q)?;
    let n = p.len();
    let cmax = c.iter().cloned().fold(0.0, f64::max);
    if cmax == 0.0 {
        return Ok(0.0);
    }
    let log_a = -(n as f64).ln();
    let (mut f, mut g) = (vec![0.0; n], vec![0.0; n]);
    let target = cfg.reg * cmax;
    let mut eps = cmax;
    loop {
        eps = eps.max(target);
        for _ in 0..cfg.max_iters {
            for i in 0..n {
                let row = &c[i * n..(i + 1) * n];
                f[i] = eps * log_a - eps * log_sum_exp(row.iter().zip(&g).map(|(cij, gj)| (gj - cij) / eps));
            }
            for j in 0..n {
                g[j] = eps * log_a - eps * log_sum_exp((0..n).map(|i| (f[i] - c[i * n + j]) / eps));
            }
            // columns are exact after the g update; check the rows
            let err: f64 = (0..n)
                .map(|i| {
                    let s: f64 = (0..n).map(|j| ((f[i] + g[j] - c[i * n + j]) / eps).exp()).sum();
                    (s - 1.0 / n as f64).abs()
                })
                .sum();
            if err < cfg.tol {
                break;
            }
        }
        if eps <= target {
            break;
        }
        eps *= 0.5;
    }
    let mut cost = 0.0;
    let mut mass = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = ((f[i] + g[j] - c[i * n + j]) / eps).exp();
            cost += pij * c[i * n + j];
            mass += pij;
        }
    }
    Ok(cost / mass)
}

/// EMD between equal-size sets: exact up to [`EMD_EXACT_MAX`] points,
/// entropic with default settings beyond.
pub fn emd(p: &[Vec3], q: &[Vec3]) -> Result<f64> {
    if p.len() <= EMD_EXACT_MAX {
        emd_exact(p, q)
    } else {
        emd_sinkhorn(p, q, &SinkhornConfig::default())
    }
}
