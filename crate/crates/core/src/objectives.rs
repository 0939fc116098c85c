//! Geometric, distributional and physical losses on SDF grids, each with its
//! analytic gradient with respect to the predicted grid values.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{check_same_resolution, Error, Result};
use crate::grid::{central_difference, SdfGrid, Vec3};
use crate::touch::TouchTensor;

/// Guard in the eikonal derivative denominator.
pub const EIKONAL_EPS: f64 = 1e-12;
/// Guard on the total weight of a time-weighted batch mean.
pub const WEIGHT_EPS: f64 = 1e-12;

/// A scalar loss together with its gradient over the grid values.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_eik: f64,
    pub lambda_n: f64,
    pub lambda_kl: f64,
    pub lambda_ni: f64,
    pub lambda_c: f64,
    pub tau: f64,
    /// Steps of the linear warmup of `lambda_ni`.
    pub ni_warmup_steps: u64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_l1: 1.0,
            lambda_eik: 0.1,
            lambda_n: 0.1,
            lambda_kl: 1e-4,
            lambda_ni: 1.0,
            lambda_c: 1.0,
            tau: 0.1,
            ni_warmup_steps: 1000,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_l1", self.lambda_l1),
            ("lambda_eik", self.lambda_eik),
            ("lambda_n", self.lambda_n),
            ("lambda_kl", self.lambda_kl),
            ("lambda_ni", self.lambda_ni),
            ("lambda_c", self.lambda_c),
        ];
        if let Some((name, v)) = lambdas.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {v}")));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }

    /// `lambda_ni` after `step` warmup steps.
    pub fn ni_weight_at(&self, step: u64) -> f64 {
        warmup(self.lambda_ni, self.ni_warmup_steps, step)
    }
}

/// Per-term values, their weights and the weighted total.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
    pub total: f64,
    /// Gradient of `total` with respect to the predicted grid values.
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl LossReport {
    fn push(&mut self, name: &str, weight: f64, value: f64) {
        self.terms.insert(name.to_string(), value);
        self.weights.insert(name.to_string(), weight);
        self.total += weight * value;
    }
}

pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn l1_loss(pred: &SdfGrid, target: &SdfGrid) -> Result<LossValue> {
    check_same_resolution(pred.resolution(), target.resolution())?;
    let n = pred.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .values()
        .iter()
        .zip(target.values())
        .map(|(a, b)| {
            value += (a - b).abs();
            sign(a - b) / n
        })
        .collect();
    Ok(LossValue {
        value: value / n,
        grad,
    })
}

/// Scatters `d loss / d gradient-vector` at interior voxel `(i,j,k)` back
/// onto the six stencil neighbors.
fn scatter_stencil(grid: &SdfGrid, grad: &mut [f64], (i, j, k): (usize, usize, usize), dg: Vec3) {
    let inv = 1.0 / (2.0 * grid.voxel_size());
    grad[grid.index(i + 1, j, k)] += dg.x * inv;
    grad[grid.index(i - 1, j, k)] -= dg.x * inv;
    grad[grid.index(i, j + 1, k)] += dg.y * inv;
    grad[grid.index(i, j - 1, k)] -= dg.y * inv;
    grad[grid.index(i, j, k + 1)] += dg.z * inv;
    grad[grid.index(i, j, k - 1)] -= dg.z * inv;
}

fn interior_voxels(r: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    (1..r - 1).flat_map(move |k| (1..r - 1).flat_map(move |j| (1..r - 1).map(move |i| (i, j, k))))
}

/// Mean over interior voxels of `(|grad S| - 1)^2`.
pub fn eikonal_loss(pred: &SdfGrid) -> Result<LossValue> {
    let r = pred.resolution();
    if r < 3 {
        return Err(Error::InvalidArgument(format!("eikonal loss needs R >= 3, got {r}")));
    }
    let count = ((r - 2) * (r - 2) * (r - 2)) as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for ijk in interior_voxels(r) {
        let g = central_difference(pred, ijk.0, ijk.1, ijk.2);
        let norm = g.norm();
        value += (norm - 1.0).powi(2);
        let dg = g * (2.0 * (norm - 1.0) / (norm + EIKONAL_EPS) / count);
        scatter_stencil(pred, &mut grad, ijk, dg);
    }
    Ok(LossValue {
        value: value / count,
        grad,
    })
}

/// Mean over interior voxels with `|S| < 2h` of `1 - cos(grad S_hat, grad S)`.
/// Voxels where either gradient vanishes contribute 1 with zero gradient.
pub fn normal_loss(pred: &SdfGrid, target: &SdfGrid) -> Result<LossValue> {
    check_same_resolution(pred.resolution(), target.resolution())?;
    let r = pred.resolution();
    if r < 3 {
        return Err(Error::InvalidArgument(format!("normal loss needs R >= 3, got {r}")));
    }
    let band = 2.0 * pred.voxel_size();
    let voxels: Vec<_> = interior_voxels(r)
        .filter(|&(i, j, k)| target.get(i, j, k).abs() < band)
        .collect();
    if voxels.is_empty() {
        return Err(Error::Empty("normal loss band |S| < 2h is empty".into()));
    }
    let count = voxels.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for ijk in voxels {
        let a = central_difference(pred, ijk.0, ijk.1, ijk.2);
        let b = central_difference(target, ijk.0, ijk.1, ijk.2);
        let (na, nb) = (a.norm(), b.norm());
        if na < EIKONAL_EPS || nb < EIKONAL_EPS {
            value += 1.0;
            continue;
        }
        let cos = a.dot(&b) / (na * nb);
        value += 1.0 - cos;
        let dcos = b / (na * nb) - a * (cos / (na * na));
        scatter_stencil(pred, &mut grad, ijk, -dcos / count);
    }
    Ok(LossValue {
        value: value / count,
        grad,
    })
}

/// KL divergence of `N(mu, exp(logvar))` from the standard normal, with its
/// gradients `(d/dmu, d/dlogvar)`.
pub fn kl_loss(mu: &[f64], logvar: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if mu.len() != logvar.len() {
        return Err(Error::DimensionMismatch {
            expected: mu.len(),
            got: logvar.len(),
        });
    }
    let value = 0.5
        * mu.iter()
            .zip(logvar)
            .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
            .sum::<f64>();
    let dlogvar = logvar.iter().map(|lv| 0.5 * (lv.exp() - 1.0)).collect();
    Ok((value, mu.to_vec(), dlogvar))
}

/// Weighted autoencoder objective. The report's gradient covers the grid
/// terms only; KL gradients come from [`kl_loss`].
pub fn vae_objective(
    pred: &SdfGrid,
    target: &SdfGrid,
    mu: &[f64],
    logvar: &[f64],
    w: &LossWeights,
) -> Result<LossReport> {
    w.validate()?;
    let l1 = l1_loss(pred, target)?;
    let eik = eikonal_loss(pred)?;
    let nrm = normal_loss(pred, target)?;
    let (kl, _, _) = kl_loss(mu, logvar)?;
    let mut report = LossReport::default();
    report.push("l1", w.lambda_l1, l1.value);
    report.push("eikonal", w.lambda_eik, eik.value);
    report.push("normal", w.lambda_n, nrm.value);
    report.push("kl", w.lambda_kl, kl);
    let grad = (0..pred.len())
        .map(|i| w.lambda_l1 * l1.grad[i] + w.lambda_eik * eik.grad[i] + w.lambda_n * nrm.grad[i])
        .collect();
    report.grad = Some(grad);
    Ok(report)
}

/// Smooth interior saturation `tau * tanh(relu(s) / tau)`.
pub fn saturate(s: f64, tau: f64) -> f64 {
    if s > 0.0 {
        tau * (s / tau).tanh()
    } else {
        0.0
    }
}

/// Derivative of [`saturate`]; zero at and below the kink.
pub fn saturate_derivative(s: f64, tau: f64) -> f64 {
    if s > 0.0 {
        1.0 - (s / tau).tanh().powi(2)
    } else {
        0.0
    }
}

/// Hand-interior indicator used by the penetration loss.
pub fn hand_mask(hand: &SdfGrid) -> Vec<bool> {
    hand.values().iter().map(|v| *v < 0.0).collect()
}

/// Saturated object interior mass inside the hand, normalized by the hand
/// volume (at least one voxel).
pub fn ni_loss(object: &SdfGrid, hand: &SdfGrid, tau: f64) -> Result<LossValue> {
    check_same_resolution(object.resolution(), hand.resolution())?;
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    Ok(ni_loss_masked(object.values(), &hand_mask(hand), tau))
}

pub(crate) fn ni_loss_masked(object: &[f64], mask: &[bool], tau: f64) -> LossValue {
    let denom = (mask.iter().filter(|m| **m).count() as f64).max(1.0);
    let mut value = 0.0;
    let grad = object
        .iter()
        .zip(mask)
        .map(|(s, m)| {
            if *m {
                value += saturate(-s, tau);
                -saturate_derivative(-s, tau) / denom
            } else {
                0.0
            }
        })
        .collect();
    LossValue {
        value: value / denom,
        grad,
    }
}

/// Mean `|S_hat|` over contact voxels (at least one in the normalizer).
pub fn contact_loss(object: &SdfGrid, contacts: &[u8]) -> Result<LossValue> {
    if contacts.len() != object.len() {
        return Err(Error::DimensionMismatch {
            expected: object.len(),
            got: contacts.len(),
        });
    }
    let denom = (contacts.iter().filter(|c| **c != 0).count() as f64).max(1.0);
    let mut value = 0.0;
    let grad = object
        .values()
        .iter()
        .zip(contacts)
        .map(|(s, c)| {
            if *c != 0 {
                value += s.abs();
                sign(*s) / denom
            } else {
                0.0
            }
        })
        .collect();
    Ok(LossValue {
        value: value / denom,
        grad,
    })
}

/// `(1 - t)^2`, emphasizing physics terms near the data end.
pub fn time_weight(t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
    }
    Ok((1.0 - t).powi(2))
}

/// `sum w(t_b) l_b / max(eps, sum w(t_b))`.
pub fn weighted_batch_mean(losses: &[f64], times: &[f64]) -> Result<f64> {
    if losses.len() != times.len() {
        return Err(Error::DimensionMismatch {
            expected: losses.len(),
            got: times.len(),
        });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (l, t) in losses.iter().zip(times) {
        let w = time_weight(*t)?;
        num += w * l;
        den += w;
    }
    Ok(num / den.max(WEIGHT_EPS))
}

/// Physics energy `lambda_ni * L_NI + lambda_c * L_C` and its gradient.
pub fn physics_energy(
    object: &SdfGrid,
    hand: &SdfGrid,
    touch: &TouchTensor,
    lambda_ni: f64,
    lambda_c: f64,
    tau: f64,
) -> Result<LossValue> {
    check_same_resolution(object.resolution(), touch.resolution())?;
    let ni = ni_loss(object, hand, tau)?;
    let c = contact_loss(object, touch.occupancy())?;
    Ok(LossValue {
        value: lambda_ni * ni.value + lambda_c * c.value,
        grad: ni
            .grad
            .iter()
            .zip(&c.grad)
            .map(|(a, b)| lambda_ni * a + lambda_c * b)
            .collect(),
    })
}

/// Linear ramp from 0 to `target` over `steps`, then constant.
pub fn warmup(target: f64, steps: u64, step: u64) -> f64 {
    if steps == 0 || step >= steps {
        target
    } else {
        target * step as f64 / steps as f64
    }
}
