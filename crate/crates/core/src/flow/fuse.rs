//! Fusion of the hand latent with pooled touch features through a linear
//! projection. With zero touch weights the hand latent passes through
//! unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::SdfGrid;
use crate::touch::{empty_distance_sentinel, TouchTensor};

use super::LatentCode;

/// Length of the pooled touch feature vector.
pub const TOUCH_FEATURES: usize = 8;

/// Pools a touch tensor into a fixed-length feature vector:
/// `[n / 8, mean x, mean y, mean z, std x, std y, std z, mean D / sentinel]`
/// over contact voxel centers. An empty tensor pools to
/// `[0, 0, 0, 0, 0, 0, 0, 1]`.
pub fn touch_features(touch: &TouchTensor) -> Result<[f64; TOUCH_FEATURES]> {
    let r = touch.resolution();
    let probe = SdfGrid::constant(r, 0.0)?;
    let idx = touch.contact_indices();
    let mut f = [0.0; TOUCH_FEATURES];
    let sentinel = empty_distance_sentinel(r);
    let mean_d = touch.distance().iter().map(|d| *d as f64).sum::<f64>() / touch.distance().len() as f64;
    f[7] = mean_d / sentinel;
    if idx.is_empty() {
        f[7] = 1.0;
        return Ok(f);
    }
    let n = idx.len() as f64;
    f[0] = n / 8.0;
    let pts: Vec<_> = idx.iter().map(|i| probe.center_of(*i)).collect();
    for a in 0..3 {
        let mean = pts.iter().map(|p| p[a]).sum::<f64>() / n;
        let var = pts.iter().map(|p| (p[a] - mean).powi(2)).sum::<f64>() / n;
        f[1 + a] = mean;
        f[4 + a] = var.sqrt();
    }
    Ok(f)
}

/// Linear projection of `[hand latent, touch features]` back to the latent
/// dimension, with the hand block fixed to the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TouchFuser {
    k: usize,
    /// Row-major K x TOUCH_FEATURES.
    touch_weights: Vec<f64>,
}

impl TouchFuser {
    /// Fuser with all touch weights zero (touch disabled).
    pub fn disabled(k: usize) -> Self {
        Self {
            k,
            touch_weights: vec![0.0; k * TOUCH_FEATURES],
        }
    }

    pub fn new(k: usize, touch_weights: Vec<f64>) -> Result<Self> {
        if touch_weights.len() != k * TOUCH_FEATURES {
            return Err(Error::DimensionMismatch {
                expected: k * TOUCH_FEATURES,
                got: touch_weights.len(),
            });
        }
        Ok(Self { k, touch_weights })
    }

    pub fn latent_dim(&self) -> usize {
        self.k
    }

    pub fn touch_weights(&self) -> &[f64] {
        &self.touch_weights
    }

    /// Fuses an explicit feature vector; exactly linear in `features`.
    /// Entries whose touch contribution is zero keep the hand value
    /// bit-for-bit.
    pub fn fuse_features(&self, hand: &LatentCode, features: &[f64]) -> Result<LatentCode> {
        if hand.dim() != self.k {
            return Err(Error::DimensionMismatch {
                expected: self.k,
                got: hand.dim(),
            });
        }
        if features.len() != TOUCH_FEATURES {
            return Err(Error::DimensionMismatch {
                expected: TOUCH_FEATURES,
                got: features.len(),
            });
        }
        let out = hand
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let row = &self.touch_weights[i * TOUCH_FEATURES..(i + 1) * TOUCH_FEATURES];
                let c: f64 = row.iter().zip(features).map(|(w, f)| w * f).sum();
                if c == 0.0 {
                    *h
                } else {
                    h + c
                }
            })
            .collect();
        LatentCode::new(out)
    }

    pub fn fuse(&self, hand: &LatentCode, touch: &TouchTensor) -> Result<LatentCode> {
        self.fuse_features(hand, &touch_features(touch)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Vec3;
    use crate::touch::{build_touch_tensor, ContactSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn touch() -> TouchTensor {
        let c = ContactSet::new(vec![Vec3::new(0.1, -0.2, 0.3), Vec3::new(-0.4, 0.0, 0.1)], vec![0, 1]).unwrap();
        build_touch_tensor(&c, 16).unwrap()
    }

    #[test]
    fn disabled_fuser_is_identity_bitwise() {
        let hand = LatentCode::new(vec![-0.0, 1.25, -3.5, 1e-300]).unwrap();
        let out = TouchFuser::disabled(4).fuse(&hand, &touch()).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out), bits(&hand));
    }

    #[test]
    fn empty_touch_pools_to_constant() {
        let t = build_touch_tensor(&ContactSet::default(), 16).unwrap();
        assert_eq!(touch_features(&t).unwrap(), [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn pooled_features_of_two_contacts() {
        let f = touch_features(&touch()).unwrap();
        assert_eq!(f[0], 0.25);
        assert!(f[7] > 0.0 && f[7] < 1.0);
        assert!(f[4] > 0.0);
    }

    #[test]
    fn projection_is_linear_in_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fuser = TouchFuser::new(3, (0..3 * TOUCH_FEATURES).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let hand = LatentCode::new(vec![0.5, -1.0, 2.0]).unwrap();
        let a: Vec<f64> = (0..TOUCH_FEATURES).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..TOUCH_FEATURES).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let fa = fuser.fuse_features(&hand, &a).unwrap();
        let fb = fuser.fuse_features(&hand, &b).unwrap();
        let f0 = fuser.fuse_features(&hand, &[0.0; TOUCH_FEATURES]).unwrap();
        let fab = fuser.fuse_features(&hand, &ab).unwrap();
        for i in 0..3 {
            assert!((fa[i] + fb[i] - f0[i] - fab[i]).abs() < 1e-12);
        }
        assert!(fuser.fuse_features(&LatentCode::zeros(2), &a).is_err());
    }
}
