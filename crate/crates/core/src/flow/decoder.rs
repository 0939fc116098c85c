//! Decoders from flow latents to grids.

use super::{LatentCode, LinearCodec};
use crate::error::Result;
use crate::grid::SdfGrid;

/// Map from flow latents to grids, linear so the energy gradient pulls
/// back exactly.
pub trait LatentDecoder: Sync {
    fn latent_dim(&self) -> usize;
    fn decode(&self, z: &[f64]) -> Result<SdfGrid>;
    /// Transpose of the decoder Jacobian applied to a grid-space gradient.
    fn pullback(&self, g: &[f64]) -> Result<Vec<f64>>;
    /// Decoded values at the flat voxel indices `idx`.
    fn decode_at(&self, z: &[f64], idx: &[usize]) -> Result<Vec<f64>>;
    /// Pullback of a gradient supported on `idx`.
    fn pullback_at(&self, idx: &[usize], g: &[f64]) -> Result<Vec<f64>>;
}

impl LatentDecoder for LinearCodec {
    fn latent_dim(&self) -> usize {
        LinearCodec::latent_dim(self)
    }

    fn decode(&self, z: &[f64]) -> Result<SdfGrid> {
        LinearCodec::decode(self, z)
    }

    fn pullback(&self, g: &[f64]) -> Result<Vec<f64>> {
        LinearCodec::pullback(self, g)
    }

    fn decode_at(&self, z: &[f64], idx: &[usize]) -> Result<Vec<f64>> {
        LinearCodec::decode_at(self, z, idx)
    }

    fn pullback_at(&self, idx: &[usize], g: &[f64]) -> Result<Vec<f64>> {
        LinearCodec::pullback_at(self, idx, g)
    }
}

/// Codec latents divided by a constant: flow latent `z` decodes as
/// `codec.decode(scale * z)`.
#[derive(Debug, Clone, Copy)]
pub struct ScaledDecoder<'a> {
    pub codec: &'a LinearCodec,
    pub scale: f64,
}

impl ScaledDecoder<'_> {
    /// Flow latent of a grid.
    pub fn encode(&self, grid: &SdfGrid) -> Result<LatentCode> {
        let z = self.codec.encode(grid)?;
        LatentCode::new(z.iter().map(|v| v / self.scale).collect())
    }
}

impl LatentDecoder for ScaledDecoder<'_> {
    fn latent_dim(&self) -> usize {
        self.codec.latent_dim()
    }

    fn decode(&self, z: &[f64]) -> Result<SdfGrid> {
        let scaled: Vec<f64> = z.iter().map(|v| v * self.scale).collect();
        self.codec.decode(&scaled)
    }

    fn pullback(&self, g: &[f64]) -> Result<Vec<f64>> {
        Ok(self.codec.pullback(g)?.into_iter().map(|v| v * self.scale).collect())
    }

    fn decode_at(&self, z: &[f64], idx: &[usize]) -> Result<Vec<f64>> {
        let scaled: Vec<f64> = z.iter().map(|v| v * self.scale).collect();
        self.codec.decode_at(&scaled, idx)
    }

    fn pullback_at(&self, idx: &[usize], g: &[f64]) -> Result<Vec<f64>> {
        Ok(self.codec.pullback_at(idx, g)?.into_iter().map(|v| v * self.scale).collect())
    }
}
