pub mod error;
pub mod flow;
pub mod grid;
pub mod metrics;
pub mod objectives;
pub mod pipeline;
pub mod sampler;
pub mod scene;
pub mod selftest;
pub mod touch;
pub mod transform;

pub use error::{Error, Result};
pub use grid::{SdfGrid, Vec3};
pub use transform::SimilarityTransform;
