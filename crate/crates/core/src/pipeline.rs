//! Scene-level reconstruction: per-scene shape libraries, silhouette
//! conditioning, ablation modes and guided sampling.
//!
//! Each scene's library holds the true object and a depth twin: the same
//! object slid along the viewing axis. Both project to the same silhouette,
//! so the masks alone cannot tell them apart and only the hand and touch
//! observations can.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{condition_library, LatentCode, LinearCodec, OracleField, PhysicsTarget, ShapeLibrary, TouchFuser, TrainExample, VelocityField};
use crate::grid::{analytic_sdf, SdfGrid, Solid, Vec3};
use crate::metrics::voxel_iou;
use crate::objectives::{contact_loss, ni_loss};
use crate::sampler::{sample, LatentDecoder, PhysicsContext, SampleOutput, SamplerConfig, ScaledDecoder};
use crate::scene::{build_scene, render_masks, scene_rng, GraspScene, Mask2D, SceneConfig};
use crate::touch::{build_touch_tensor, perturb_contacts, TouchTensor};
use crate::transform::SimilarityTransform;

const TWIN_STREAM: u64 = 0x7781_0000_0000_0001;
const SAMPLE_STREAM: u64 = 0x5a3b_0000_0000_0002;
const NOISE_STREAM: u64 = 0x6e01_0000_0000_0003;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Masks, hand and touch.
    Full,
    /// Masks and hand; touch weights zeroed and no contact term.
    NoTouch,
    /// Masks only.
    VisionOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::NoTouch, Ablation::VisionOnly];

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoTouch => "no-touch",
            Ablation::VisionOnly => "vision-only",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no-touch" => Ok(Ablation::NoTouch),
            "vision-only" => Ok(Ablation::VisionOnly),
            _ => Err(Error::InvalidArgument(format!("unknown ablation '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    /// Keys given here override the reconstruction preset, not the plain
    /// sampler defaults.
    #[serde(deserialize_with = "preset_sampler")]
    pub sampler: SamplerConfig,
    /// Codec latents are divided by this before sampling.
    pub latent_scale: f64,
    /// Sharpness of the silhouette evidence.
    pub evidence_lambda: f64,
    /// Range of the depth-twin offset, in voxels.
    pub twin_shift_voxels: [f64; 2],
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig {
                steps: 80,
                time_power: 3.0,
                t_end: 1e-5,
                sigma_min: 1e-5,
                eta: 1.0,
                ..SamplerConfig::default()
            },
            latent_scale: 10.0,
            evidence_lambda: 20.0,
            twin_shift_voxels: [1.5, 4.0],
        }
    }
}

fn preset_sampler<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<SamplerConfig, D::Error> {
    use serde::de::Error as _;
    let patch = serde_json::Value::deserialize(d)?;
    let mut base = serde_json::to_value(ReconConfig::default().sampler).map_err(D::Error::custom)?;
    match (&mut base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => b.extend(p),
        _ => return Err(D::Error::custom("sampler settings must be a table")),
    }
    serde_json::from_value(base).map_err(D::Error::custom)
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        if !(self.latent_scale > 0.0) {
            return Err(Error::InvalidArgument("latent_scale must be > 0".into()));
        }
        if !(self.evidence_lambda >= 0.0) {
            return Err(Error::InvalidArgument("evidence_lambda must be >= 0".into()));
        }
        let [a, b] = self.twin_shift_voxels;
        if !(a > 0.0 && a <= b) {
            return Err(Error::InvalidArgument("twin_shift_voxels must be an increasing positive range".into()));
        }
        Ok(())
    }
}

/// A scene with its depth twin.
#[derive(Debug, Clone)]
pub struct SceneCase {
    pub scene: GraspScene,
    pub twin: SdfGrid,
    /// Signed twin offset along `z`, in voxels.
    pub twin_shift_voxels: f64,
}

impl SceneCase {
    pub fn library_grids(&self) -> [&SdfGrid; 2] {
        [&self.scene.object_sdf, &self.twin]
    }
}

fn shifted(solid: &Solid, dz: f64) -> Solid {
    solid.transformed(&SimilarityTransform::translation(Vec3::new(0.0, 0.0, dz)))
}

/// Twin of the scene object slid along `z` by a random offset, flipping
/// direction or shrinking the offset until the twin keeps the padding.
pub fn make_twin(scene: &GraspScene, cfg: &ReconConfig, scene_cfg: &SceneConfig) -> Result<(SdfGrid, f64)> {
    let r = scene.meta.resolution;
    let h = 2.0 / r as f64;
    let mut rng = scene_rng(scene.meta.master_seed ^ TWIN_STREAM, scene.meta.index);
    let [a, b] = cfg.twin_shift_voxels;
    let mut mag = rng.random_range(a..=b);
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let (lo, hi) = scene
        .meta
        .object
        .bbox()
        .ok_or_else(|| Error::Empty("scene object has no parts".into()))?;
    let limit = 1.0 - scene_cfg.padding_voxels as f64 * h;
    while mag >= 0.5 {
        for s in [sign, -sign] {
            let dz = s * mag * h;
            if lo.z + dz >= -limit && hi.z + dz <= limit {
                let grid = analytic_sdf(&shifted(&scene.meta.object, dz), r)?.quantized();
                return Ok((grid, s * mag));
            }
        }
        mag *= 0.75;
    }
    Err(Error::Infeasible(format!("scene {} has no room for a depth twin", scene.meta.index)))
}

pub fn build_case(master_seed: u64, index: u64, scene_cfg: &SceneConfig, cfg: &ReconConfig) -> Result<SceneCase> {
    case_from_scene(build_scene(master_seed, index, scene_cfg)?, scene_cfg, cfg)
}

/// Case of an existing scene, e.g. one loaded from a bundle. The twin only
/// depends on the scene record and the configs.
pub fn case_from_scene(scene: GraspScene, scene_cfg: &SceneConfig, cfg: &ReconConfig) -> Result<SceneCase> {
    let (twin, twin_shift_voxels) = make_twin(&scene, cfg, scene_cfg)?;
    Ok(SceneCase {
        scene,
        twin,
        twin_shift_voxels,
    })
}

/// Seeded suite of `n` cases, built in parallel.
pub fn build_suite(master_seed: u64, n: usize, scene_cfg: &SceneConfig, cfg: &ReconConfig) -> Result<Vec<SceneCase>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| build_case(master_seed, i, scene_cfg, cfg))
        .collect()
}

/// Codec spanning every library grid of the suite.
pub fn fit_suite_codec(cases: &[SceneCase]) -> Result<LinearCodec> {
    let grids: Vec<SdfGrid> = cases
        .iter()
        .flat_map(|c| c.library_grids().into_iter().cloned())
        .collect();
    let k = grids.len().min(grids.first().map_or(0, |g| g.len()));
    LinearCodec::fit(&grids, k)
}

/// `1 - IoU` of `full` against the observed visible mask, counting only
/// pixels the hand does not cover.
pub fn silhouette_mismatch(full: &Mask2D, visible: &Mask2D, hand: &Mask2D) -> f64 {
    let (mut inter, mut uni) = (0usize, 0usize);
    for ((f, v), h) in full.data().iter().zip(visible.data()).zip(hand.data()) {
        if *h != 0 {
            continue;
        }
        let (a, b) = (*f != 0, *v != 0);
        inter += (a && b) as usize;
        uni += (a || b) as usize;
    }
    if uni == 0 {
        0.0
    } else {
        1.0 - inter as f64 / uni as f64
    }
}

/// Library of the case's grids reweighted by silhouette evidence.
pub fn conditioned_library(case: &SceneCase, decoder: &ScaledDecoder<'_>, cfg: &ReconConfig) -> Result<ShapeLibrary> {
    let entries = case
        .library_grids()
        .iter()
        .map(|g| decoder.encode(g))
        .collect::<Result<Vec<LatentCode>>>()?;
    let lib = ShapeLibrary::uniform(entries, cfg.sampler.sigma_min)?;
    let masks = &case.scene.masks;
    let canvas = case.scene.meta.canvas;
    condition_library(
        &lib,
        |_, z| {
            let grid = decoder.decode(z)?;
            let m = render_masks(&grid, None, canvas)?;
            Ok(silhouette_mismatch(&m.object_full, &masks.object_visible, &masks.hand))
        },
        cfg.evidence_lambda,
    )
}

/// Touch tensor of the scene, with contacts perturbed by up to
/// `noise_mm` when positive.
pub fn observed_touch(scene: &GraspScene, noise_mm: f64) -> Result<TouchTensor> {
    if noise_mm == 0.0 {
        return Ok(scene.touch.clone());
    }
    let mut rng = scene_rng(scene.meta.master_seed ^ NOISE_STREAM, scene.meta.index);
    let noisy = perturb_contacts(&scene.meta.contacts, noise_mm, &scene.meta.frame, &mut rng)?;
    build_touch_tensor(&noisy, scene.meta.resolution)
}

/// Sampling seed of a scene, shared by every ablation and noise level.
pub fn sample_seed(scene: &GraspScene) -> u64 {
    scene_rng(scene.meta.master_seed ^ SAMPLE_STREAM, scene.meta.index).random()
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub output: SampleOutput,
    /// Index of the library entry nearest the final latent (0 is the true
    /// object).
    pub nearest: usize,
    pub iou: f64,
    pub ni: f64,
    pub c: f64,
}

/// Reconstructs one case under an ablation mode. The energy terms of the
/// result are measured against the true hand and touch tensor.
pub fn reconstruct(
    case: &SceneCase,
    codec: &LinearCodec,
    ablation: Ablation,
    noise_mm: f64,
    cfg: &ReconConfig,
) -> Result<Reconstruction> {
    reconstruct_with(case, codec, None, ablation, noise_mm, cfg)
}

/// As [`reconstruct`], sampling from `field` (e.g. a trained denoiser in the
/// scaled latent space) instead of the conditioned library's oracle when
/// given.
pub fn reconstruct_with(
    case: &SceneCase,
    codec: &LinearCodec,
    field: Option<&dyn VelocityField>,
    ablation: Ablation,
    noise_mm: f64,
    cfg: &ReconConfig,
) -> Result<Reconstruction> {
    cfg.validate()?;
    let decoder = ScaledDecoder {
        codec,
        scale: cfg.latent_scale,
    };
    let scene = &case.scene;
    let lib = conditioned_library(case, &decoder, cfg)?;
    let oracle = OracleField::new(lib.clone());
    let field = field.unwrap_or(&oracle);
    let touch = observed_touch(scene, noise_mm)?;
    let empty_touch;
    let mut sampler = cfg.sampler.clone();
    sampler.seed = sample_seed(scene);
    let physics = match ablation {
        Ablation::VisionOnly => {
            sampler.guidance_enabled = false;
            None
        }
        Ablation::NoTouch => {
            sampler.lambda_c = 0.0;
            empty_touch = build_touch_tensor(&Default::default(), scene.meta.resolution)?;
            Some(PhysicsContext {
                hand: &scene.hand_sdf,
                touch: &empty_touch,
            })
        }
        Ablation::Full => Some(PhysicsContext {
            hand: &scene.hand_sdf,
            touch: &touch,
        }),
    };
    let cond = condition_vector(scene, &decoder, ablation, &touch)?;
    let output = sample(field, &cond, &decoder, physics, &sampler)?;
    let (nearest, _) = lib.nearest(&output.latent);
    let iou = voxel_iou(&output.grid, &scene.object_sdf)?;
    let ni = ni_loss(&output.grid, &scene.hand_sdf, cfg.sampler.tau)?.value;
    let c = contact_loss(&output.grid, scene.touch.occupancy())?.value;
    Ok(Reconstruction {
        output,
        nearest,
        iou,
        ni,
        c,
    })
}

/// Denoiser training context of a case: its conditioned library, the
/// full-sensing condition vector and the physics targets.
pub fn training_example(case: &SceneCase, decoder: &ScaledDecoder<'_>, cfg: &ReconConfig) -> Result<TrainExample> {
    let scene = &case.scene;
    Ok(TrainExample {
        library: conditioned_library(case, decoder, cfg)?,
        cond: condition_vector(scene, decoder, Ablation::Full, &scene.touch)?,
        physics: Some(PhysicsTarget {
            hand: scene.hand_sdf.clone(),
            contacts: scene.touch.occupancy().to_vec(),
        }),
    })
}

/// Hand latent fused with pooled touch features. Vision-only runs get a zero
/// vector; no-touch runs pass the hand latent through a disabled fuser.
pub fn condition_vector(scene: &GraspScene, decoder: &ScaledDecoder<'_>, ablation: Ablation, touch: &TouchTensor) -> Result<Vec<f64>> {
    let k = decoder.latent_dim();
    if ablation == Ablation::VisionOnly {
        return Ok(vec![0.0; k]);
    }
    let hand = decoder.encode(&scene.hand_sdf)?;
    let fuser = TouchFuser::disabled(k);
    Ok(fuser.fuse(&hand, touch)?.into_vec())
}
