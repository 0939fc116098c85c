//! Closed-form marginal velocity of the interpolation path for a finite,
//! weighted set of clean latents.

use serde::{Deserialize, Serialize};

use super::{check_dims, check_sigma, check_time, noise_scale, LatentCode, VelocityField};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeLibrary {
    entries: Vec<LatentCode>,
    weights: Vec<f64>,
    sigma_min: f64,
}

impl ShapeLibrary {
    /// Builds a library, normalizing non-negative weights to sum to one.
    pub fn new(entries: Vec<LatentCode>, weights: Vec<f64>, sigma_min: f64) -> Result<Self> {
        check_sigma(sigma_min)?;
        if entries.is_empty() {
            return Err(Error::Empty("library needs at least one entry".into()));
        }
        if weights.len() != entries.len() {
            return Err(Error::DimensionMismatch {
                expected: entries.len(),
                got: weights.len(),
            });
        }
        let k = entries[0].dim();
        if let Some(e) = entries.iter().find(|e| e.dim() != k) {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: e.dim(),
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument("library weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidArgument("library weights sum to zero".into()));
        }
        Ok(Self {
            entries,
            weights: weights.iter().map(|w| w / total).collect(),
            sigma_min,
        })
    }

    pub fn uniform(entries: Vec<LatentCode>, sigma_min: f64) -> Result<Self> {
        let n = entries.len();
        Self::new(entries, vec![1.0; n], sigma_min)
    }

    pub fn entries(&self) -> &[LatentCode] {
        &self.entries
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn dim(&self) -> usize {
        self.entries[0].dim()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index of the entry closest to `x`.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let d = e.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                (i, d)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("library is non-empty")
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_query(x: &[f64], t: f64, lib: &ShapeLibrary) -> Result<f64> {
    check_time(t)?;
    check_dims(lib.entries[0].as_slice(), x)?;
    let s = noise_scale(t, lib.sigma_min);
    if !(s > 0.0) {
        return Err(Error::SingularTime(t));
    }
    Ok(s)
}

/// Posterior probability of each entry given `x` at time `t`.
pub fn posterior(x: &[f64], t: f64, lib: &ShapeLibrary) -> Result<Vec<f64>> {
    let s = check_query(x, t, lib)?;
    let logits: Vec<f64> = lib
        .entries
        .iter()
        .zip(&lib.weights)
        .map(|(e, w)| {
            let d2: f64 = e.iter().zip(x).map(|(a, b)| (b - (1.0 - t) * a).powi(2)).sum();
            w.ln() - d2 / (2.0 * s * s)
        })
        .collect();
    let lse = log_sum_exp(&logits);
    Ok(logits.iter().map(|l| (l - lse).exp()).collect())
}

/// Posterior-weighted conditional velocity
/// `sum_i p_i [(1 - sigma_min)(x - (1 - t) x0_i) / s(t) - x0_i]`.
pub fn oracle_velocity(x: &[f64], t: f64, lib: &ShapeLibrary) -> Result<LatentCode> {
    let s = check_query(x, t, lib)?;
    let p = posterior(x, t, lib)?;
    let sig = lib.sigma_min;
    let mut v = vec![0.0; x.len()];
    for (e, pi) in lib.entries.iter().zip(&p) {
        if *pi == 0.0 {
            continue;
        }
        for (vj, (xj, aj)) in v.iter_mut().zip(x.iter().zip(e.iter())) {
            *vj += pi * ((1.0 - sig) * (xj - (1.0 - t) * aj) / s - aj);
        }
    }
    LatentCode::new(v)
}

/// Reweights a library by visual evidence: `w_i' ∝ w_i exp(-lambda mismatch_i)`.
/// An infinite `lambda` keeps only the best-matching entries.
pub fn condition_library(
    lib: &ShapeLibrary,
    mut mismatch: impl FnMut(usize, &LatentCode) -> Result<f64>,
    lambda_ev: f64,
) -> Result<ShapeLibrary> {
    if !(lambda_ev >= 0.0) {
        return Err(Error::InvalidArgument("evidence weight must be >= 0".into()));
    }
    let m: Vec<f64> = lib
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| mismatch(i, e))
        .collect::<Result<_>>()?;
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite evidence mismatch".into()));
    }
    let weights: Vec<f64> = if lambda_ev.is_infinite() {
        let best = m
            .iter()
            .zip(&lib.weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|(x, _)| *x)
            .fold(f64::INFINITY, f64::min);
        m.iter()
            .zip(&lib.weights)
            .map(|(x, w)| if *x == best { *w } else { 0.0 })
            .collect()
    } else {
        let logits: Vec<f64> = m
            .iter()
            .zip(&lib.weights)
            .map(|(x, w)| w.ln() - lambda_ev * x)
            .collect();
        let lse = log_sum_exp(&logits);
        if !lse.is_finite() {
            return Err(Error::InvalidArgument("conditioned weights are all zero".into()));
        }
        logits.iter().map(|l| (l - lse).exp()).collect()
    };
    ShapeLibrary::new(lib.entries.clone(), weights, lib.sigma_min)
}

/// [`oracle_velocity`] as a velocity field; the condition vector is unused.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleField {
    pub library: ShapeLibrary,
}

impl OracleField {
    pub fn new(library: ShapeLibrary) -> Self {
        Self { library }
    }
}

impl VelocityField for OracleField {
    fn dim(&self) -> usize {
        self.library.dim()
    }

    fn velocity(&self, x: &[f64], t: f64, _cond: &[f64]) -> Result<Vec<f64>> {
        Ok(oracle_velocity(x, t, &self.library)?.into_vec())
    }
}
