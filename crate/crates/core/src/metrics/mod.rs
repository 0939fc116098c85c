//! Reconstruction and pose metrics with occlusion-stratified reports.

mod emd;
mod points;
mod pose;
mod report;

pub use emd::{assignment, emd, emd_exact, emd_sinkhorn, SinkhornConfig, EMD_EXACT_MAX};
pub use points::{adds, adds_at, chamfer, diameter, fscore, normal_consistency, sample_surface, NearestIndex, SurfaceSample};

pub use pose::{geodesic_angle, icp_rot, iou3d, Aabb, ICP_MAX_ITERS, ICP_REL_TOL};
pub use report::{evaluate_pair, stratified_report, EvalConfig, EvalSample, ReportRow, SampleMetrics, StratifiedReport, METRIC_NAMES};

use crate::error::{check_same_resolution, Result};
use crate::grid::SdfGrid;

/// Intersection over union of the interiors `{S < 0}`; two empty interiors
/// score 1.
pub fn voxel_iou(a: &SdfGrid, b: &SdfGrid) -> Result<f64> {
    check_same_resolution(a.resolution(), b.resolution())?;
    let (mut inter, mut uni) = (0usize, 0usize);
    for (x, y) in a.values().iter().zip(b.values()) {
        let (ia, ib) = (*x < 0.0, *y < 0.0);
        inter += (ia && ib) as usize;
        uni += (ia || ib) as usize;
    }
    Ok(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 })
}
