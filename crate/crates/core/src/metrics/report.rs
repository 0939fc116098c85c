//! Per-sample evaluation and occlusion-stratified aggregation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::emd::emd;
use super::points::{adds, adds_at, chamfer, diameter, fscore, normal_consistency, sample_surface};
use super::pose::{icp_rot, iou3d, Aabb};
use super::voxel_iou;
use crate::error::{Error, Result};
use crate::grid::surface::extract_surface;
use crate::grid::SdfGrid;

pub const METRIC_NAMES: [&str; 9] = ["cd", "nc", "fscore", "voxel_iou", "emd", "iou3d", "icp_rot", "adds", "adds_at"];

/// Metric values of one reconstruction, distances in domain units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub cd: f64,
    pub nc: f64,
    pub fscore: f64,
    pub voxel_iou: f64,
    pub emd: f64,
    pub iou3d: f64,
    pub icp_rot: f64,
    pub adds: f64,
    /// 1 when ADD-S is under the diameter fraction, else 0.
    pub adds_at: f64,
}

impl SampleMetrics {
    /// Values in [`METRIC_NAMES`] order.
    pub fn values(&self) -> [f64; 9] {
        [
            self.cd,
            self.nc,
            self.fscore,
            self.voxel_iou,
            self.emd,
            self.iou3d,
            self.icp_rot,
            self.adds,
            self.adds_at,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub surface_points: usize,
    /// EMD runs on the first this-many surface points of each side.
    pub emd_points: usize,
    /// Points used for ICP and the diameter.
    pub pose_points: usize,
    pub fscore_threshold: f64,
    pub adds_fraction: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            surface_points: 10_000,
            emd_points: 256,
            pose_points: 2000,
            fscore_threshold: 0.02,
            adds_fraction: 0.1,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.surface_points == 0 || self.emd_points == 0 || self.pose_points == 0 {
            return Err(Error::InvalidArgument("point counts must be > 0".into()));
        }
        if self.emd_points > self.surface_points || self.pose_points > self.surface_points {
            return Err(Error::InvalidArgument("emd_points and pose_points must not exceed surface_points".into()));
        }
        if !(self.fscore_threshold >= 0.0 && self.adds_fraction > 0.0) {
            return Err(Error::InvalidArgument("thresholds must be positive".into()));
        }
        Ok(())
    }
}

/// Scores `pred` against `gt`. `None` when the prediction has no surface,
/// which makes the sample invalid.
pub fn evaluate_pair(pred: &SdfGrid, gt: &SdfGrid, cfg: &EvalConfig) -> Result<Option<SampleMetrics>> {
    cfg.validate()?;
    let gt_mesh = extract_surface(gt)?;
    let pred_mesh = match extract_surface(pred) {
        Ok(m) => m,
        Err(Error::EmptySurface(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let n = cfg.surface_points;
    let p = sample_surface(&pred_mesh, n, cfg.seed)?;
    let g = sample_surface(&gt_mesh, n, cfg.seed)?;
    let (pp, gp) = (&p.points[..cfg.pose_points], &g.points[..cfg.pose_points]);
    let add = adds(&p.points, &g.points)?;
    Ok(Some(SampleMetrics {
        cd: chamfer(&p.points, &g.points)?,
        nc: normal_consistency(&p, &g)?,
        fscore: fscore(&p.points, &g.points, cfg.fscore_threshold)?,
        voxel_iou: voxel_iou(pred, gt)?,
        emd: emd(&p.points[..cfg.emd_points], &g.points[..cfg.emd_points])?,
        iou3d: iou3d(&Aabb::of(&p.points)?, &Aabb::of(&g.points)?),
        icp_rot: icp_rot(pp, gp)?,
        adds: add,
        adds_at: adds_at(add, diameter(gp)?, cfg.adds_fraction) as u8 as f64,
    }))
}

/// A scored sample in occlusion bin `bin` (0-based); `metrics` is `None`
/// for invalid outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub bin: usize,
    pub metrics: Option<SampleMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    /// Mean per bin; `None` for bins without valid samples.
    pub bins: Vec<Option<f64>>,
    pub all: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedReport {
    /// Valid samples per bin.
    pub counts: Vec<usize>,
    pub total: usize,
    pub invalid: usize,
    pub rows: Vec<ReportRow>,
}

/// Per-bin and overall means over the valid samples.
pub fn stratified_report(samples: &[EvalSample], k: usize) -> Result<StratifiedReport> {
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.bin >= k) {
        return Err(Error::InvalidArgument(format!("bin {} outside 0..{k}", s.bin)));
    }
    let valid: Vec<(usize, [f64; 9])> = samples
        .iter()
        .filter_map(|s| s.metrics.map(|m| (s.bin, m.values())))
        .collect();
    if valid.is_empty() {
        return Err(Error::Empty("no valid samples".into()));
    }
    let mut counts = vec![0usize; k];
    let mut sums = vec![[0.0; 9]; k];
    for (b, v) in &valid {
        counts[*b] += 1;
        sums[*b].iter_mut().zip(v).for_each(|(s, x)| *s += x);
    }
    let total = valid.len();
    let rows = METRIC_NAMES
        .iter()
        .enumerate()
        .map(|(m, name)| ReportRow {
            metric: name.to_string(),
            bins: (0..k)
                .map(|b| (counts[b] > 0).then(|| sums[b][m] / counts[b] as f64))
                .collect(),
            all: valid.iter().map(|(_, v)| v[m]).sum::<f64>() / total as f64,
        })
        .collect();
    Ok(StratifiedReport {
        counts,
        total,
        invalid: samples.len() - total,
        rows,
    })
}

impl StratifiedReport {
    pub fn row(&self, metric: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    /// Columns `metric, B1..BK, All, counts`; a final `n` row holds the
    /// per-bin sample counts.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric");
        for b in 1..=self.counts.len() {
            write!(s, ",B{b}").unwrap();
        }
        s.push_str(",All,counts\n");
        for r in &self.rows {
            s.push_str(&r.metric);
            for v in &r.bins {
                match v {
                    Some(v) => write!(s, ",{v}").unwrap(),
                    None => s.push(','),
                }
            }
            writeln!(s, ",{},{}", r.all, self.total).unwrap();
        }
        s.push('n');
        for c in &self.counts {
            write!(s, ",{c}").unwrap();
        }
        writeln!(s, ",{},{}", self.total, self.total).unwrap();
        s
    }

    pub fn write(&self, csv: impl AsRef<Path>, json: impl AsRef<Path>) -> Result<()> {
        let (csv, json) = (csv.as_ref(), json.as_ref());
        fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        fs::write(json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(json, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(v: f64) -> SampleMetrics {
        SampleMetrics {
            cd: v,
            nc: v,
            fscore: v,
            voxel_iou: v,
            emd: v,
            iou3d: v,
            icp_rot: v,
            adds: v,
            adds_at: v,
        }
    }

    #[test]
    fn hand_computed_fixture() {
        let samples = vec![
            EvalSample { bin: 0, metrics: Some(m(1.0)) },
            EvalSample { bin: 0, metrics: Some(m(3.0)) },
            EvalSample { bin: 2, metrics: Some(m(8.0)) },
            EvalSample { bin: 2, metrics: None },
        ];
        let r = stratified_report(&samples, 5).unwrap();
        assert_eq!(r.counts, vec![2, 0, 1, 0, 0]);
        assert_eq!((r.total, r.invalid), (3, 1));
        let row = r.row("cd").unwrap();
        assert_eq!(row.bins, vec![Some(2.0), None, Some(8.0), None, None]);
        assert_eq!(row.all, 4.0);
        let csv = r.to_csv();
        assert!(csv.starts_with("metric,B1,B2,B3,B4,B5,All,counts\ncd,2,,8,,,4,3\n"));
        assert!(csv.ends_with("n,2,0,1,0,0,3,3\n"));
    }

    #[test]
    fn single_bin_overall_equals_that_bin() {
        let samples: Vec<EvalSample> = (0..4).map(|i| EvalSample { bin: 3, metrics: Some(m(i as f64 * 0.3)) }).collect();
        let r = stratified_report(&samples, 5).unwrap();
        for row in &r.rows {
            assert_eq!(row.bins[3], Some(row.all));
        }
    }

    #[test]
    fn no_valid_samples_is_an_error() {
        assert!(stratified_report(&[EvalSample { bin: 0, metrics: None }], 5).is_err());
        assert!(stratified_report(&[EvalSample { bin: 5, metrics: Some(m(0.0)) }], 5).is_err());
    }

    proptest! {
        #[test]
        fn overall_is_the_weighted_bin_aggregate(
            raw in proptest::collection::vec((0usize..5, proptest::option::weighted(0.8, -10.0f64..10.0)), 1..60)
        ) {
            let samples: Vec<EvalSample> = raw.iter().map(|(b, v)| EvalSample { bin: *b, metrics: v.map(m) }).collect();
            prop_assume!(samples.iter().any(|s| s.metrics.is_some()));
            let r = stratified_report(&samples, 5).unwrap();
            prop_assert_eq!(r.counts.iter().sum::<usize>(), r.total);
            for row in &r.rows {
                let agg: f64 = row.bins.iter().zip(&r.counts).filter_map(|(v, c)| v.map(|v| v * *c as f64)).sum::<f64>() / r.total as f64;
                prop_assert!((agg - row.all).abs() <= 1e-9);
            }
        }
    }
}
