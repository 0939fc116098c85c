//! Latent flow matching: the interpolation path between clean latents and
//! noise, its target velocity, clean-latent recovery, and velocity fields
//! that drive the sampler.

pub mod codec;
mod decoder;
pub mod denoiser;
pub mod fuse;
pub mod oracle;

pub use codec::LinearCodec;
pub use decoder::{LatentDecoder, ScaledDecoder};
pub use denoiser::{train_denoiser, PhysicsTarget, TinyDenoiser, TrainExample, TrainLogEntry};
pub use fuse::{touch_features, TouchFuser, TOUCH_FEATURES};
pub use oracle::{condition_library, oracle_velocity, posterior, OracleField, ShapeLibrary};

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in latent space (clean latent, noisy latent or noise draw).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentCode(Vec<f64>);

impl LatentCode {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("latent entry {i} is not finite")));
        }
        Ok(Self(z))
    }

    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn distance(&self, other: &LatentCode) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl Deref for LatentCode {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

fn check_sigma(sigma_min: f64) -> Result<()> {
    if !(0.0..1.0).contains(&sigma_min) {
        return Err(Error::InvalidArgument(format!("sigma_min {sigma_min} outside [0, 1)")));
    }
    Ok(())
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Noise scale of the path at time `t`: `sigma_min + (1 - sigma_min) t`.
pub fn noise_scale(t: f64, sigma_min: f64) -> f64 {
    sigma_min + (1.0 - sigma_min) * t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub sigma_min: f64,
    /// Time rescale applied before the denoiser's time embedding.
    pub alpha: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub hidden: usize,
    pub layers: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            sigma_min: 1e-3,
            alpha: 1000.0,
            batch_size: 32,
            learning_rate: 0.01,
            pretrain_steps: 2000,
            finetune_steps: 200,
            hidden: 64,
            layers: 2,
            grad_clip: 10.0,
            seed: 0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        check_sigma(self.sigma_min)?;
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidArgument("alpha must be > 0".into()));
        }
        if self.batch_size == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, hidden and layers must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::InvalidArgument(
                "learning_rate and grad_clip must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// `x_t = (1 - t) x0 + s(t) eps`.
pub fn interpolate(x0: &[f64], eps: &[f64], t: f64, sigma_min: f64) -> Result<LatentCode> {
    check_dims(x0, eps)?;
    check_time(t)?;
    check_sigma(sigma_min)?;
    let s = noise_scale(t, sigma_min);
    LatentCode::new(x0.iter().zip(eps).map(|(a, e)| (1.0 - t) * a + s * e).collect())
}

/// `(1 - sigma_min) eps - x0`, the time derivative of [`interpolate`].
pub fn target_velocity(x0: &[f64], eps: &[f64], sigma_min: f64) -> Result<LatentCode> {
    check_dims(x0, eps)?;
    check_sigma(sigma_min)?;
    LatentCode::new(
        x0.iter()
            .zip(eps)
            .map(|(a, e)| (1.0 - sigma_min) * e - a)
            .collect(),
    )
}

/// Squared error between a predicted velocity and the path target.
pub fn fm_loss(output: &[f64], x0: &[f64], eps: &[f64], sigma_min: f64) -> Result<f64> {
    check_dims(output, x0)?;
    let target = target_velocity(x0, eps, sigma_min)?;
    Ok(output
        .iter()
        .zip(target.iter())
        .map(|(o, g)| (o - g) * (o - g))
        .sum())
}

/// Denominator of the clean-latent estimate, `s(t) + (1 - sigma_min)(1 - t)`.
pub fn clean_estimate_denominator(t: f64, sigma_min: f64) -> f64 {
    noise_scale(t, sigma_min) + (1.0 - sigma_min) * (1.0 - t)
}

/// Clean latent implied by a noisy latent and its velocity:
/// `[(1 - sigma_min) x_t - s(t) v] / [s(t) + (1 - sigma_min)(1 - t)]`.
pub fn clean_estimate(xt: &[f64], v: &[f64], t: f64, sigma_min: f64) -> Result<LatentCode> {
    check_dims(xt, v)?;
    check_time(t)?;
    check_sigma(sigma_min)?;
    let den = clean_estimate_denominator(t, sigma_min);
    if den.abs() < 1e-12 {
        return Err(Error::SingularTime(t));
    }
    let s = noise_scale(t, sigma_min);
    LatentCode::new(
        xt.iter()
            .zip(v)
            .map(|(x, u)| ((1.0 - sigma_min) * x - s * u) / den)
            .collect(),
    )
}

/// A time-dependent velocity over latent space, optionally conditioned.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;
    fn velocity(&self, x: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>>;
}

/// Velocity that ignores its inputs; handy for solver checks.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantField(pub Vec<f64>);

impl VelocityField for ConstantField {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn velocity(&self, x: &[f64], _t: f64, _cond: &[f64]) -> Result<Vec<f64>> {
        check_dims(&self.0, x)?;
        Ok(self.0.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn interpolation_derivative_is_target_velocity(
            x0 in proptest::collection::vec(-3.0f64..3.0, 4),
            eps in proptest::collection::vec(-3.0f64..3.0, 4),
            t in 0.01f64..0.99,
            sigma in 0.0f64..0.1,
        ) {
            let h = 1e-6;
            let up = interpolate(&x0, &eps, t + h, sigma).unwrap();
            let dn = interpolate(&x0, &eps, t - h, sigma).unwrap();
            let v = target_velocity(&x0, &eps, sigma).unwrap();
            for i in 0..4 {
                prop_assert!(((up[i] - dn[i]) / (2.0 * h) - v[i]).abs() < 1e-8);
            }
        }

        #[test]
        fn clean_estimate_inverts_the_path(
            x0 in proptest::collection::vec(-10.0f64..10.0, 6),
            eps in proptest::collection::vec(-3.0f64..3.0, 6),
            t in 0.0f64..=1.0,
            sigma in 0.0f64..0.5,
        ) {
            let xt = interpolate(&x0, &eps, t, sigma).unwrap();
            let v = target_velocity(&x0, &eps, sigma).unwrap();
            let back = clean_estimate(&xt, &v, t, sigma).unwrap();
            for i in 0..6 {
                prop_assert!((back[i] - x0[i]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn path_endpoints() {
        let x0 = [1.0, -2.0];
        let eps = [0.5, 0.25];
        assert_eq!(interpolate(&x0, &eps, 1.0, 0.1).unwrap().as_slice(), &eps);
        assert_eq!(interpolate(&x0, &eps, 0.0, 0.0).unwrap().as_slice(), &x0);
        let end = interpolate(&x0, &eps, 0.0, 0.1).unwrap();
        assert!((end[0] - (1.0 + 0.1 * 0.5)).abs() < 1e-15);
        assert!(interpolate(&x0, &eps, 1.2, 0.0).is_err());
        assert!(interpolate(&x0, &eps, 0.5, 1.0).is_err());
    }

    #[test]
    fn target_and_loss_examples() {
        assert_eq!(target_velocity(&[0.0, 0.0], &[0.3, -0.1], 0.0).unwrap().as_slice(), &[0.3, -0.1]);
        assert_eq!(target_velocity(&[0.4, 1.0], &[0.0, 0.0], 0.2).unwrap().as_slice(), &[-0.4, -1.0]);
        let x0 = [1.0, 2.0];
        let eps = [0.5, -0.5];
        let target = target_velocity(&x0, &eps, 0.01).unwrap();
        assert_eq!(fm_loss(&target, &x0, &eps, 0.01).unwrap(), 0.0);
        let off = [target[0] + 1.0, target[1]];
        assert!((fm_loss(&off, &x0, &eps, 0.01).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clean_estimate_simplifies_without_minimum_noise() {
        let xt = [0.3, -0.7, 2.0];
        let v = [1.0, 0.5, -0.25];
        let t = 0.37;
        let est = clean_estimate(&xt, &v, t, 0.0).unwrap();
        for i in 0..3 {
            assert!((est[i] - (xt[i] - t * v[i])).abs() < 1e-15);
        }
        let near = clean_estimate(&xt, &v, 1e-9, 0.0).unwrap();
        assert!(near.distance(&LatentCode::new(xt.to_vec()).unwrap()) < 1e-8);
    }

    #[test]
    fn latent_rejects_non_finite() {
        assert!(LatentCode::new(vec![0.0, f64::NAN]).is_err());
        assert!(FlowConfig::default().validate().is_ok());
        assert!(FlowConfig { sigma_min: 1.0, ..FlowConfig::default() }.validate().is_err());
    }
}
