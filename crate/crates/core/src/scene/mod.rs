//! Procedural grasp scenes: primitive objects, capsule-chain hands with a
//! palm slab, contact-validated grasps, canonicalization into the camera
//! grid, masks and occlusion bins.
//!
//! Objects and hands are built in "object units" where one unit is
//! `SceneConfig::object_metric_scale` meters; canonicalization then rescales
//! the whole scene into the grid and the frame records the final scale.

mod bundle;
mod mask;

pub use bundle::{load_bundle, save_bundle, write_manifest, read_manifest, Manifest, ManifestEntry};
pub use mask::{bin_of, occlusion_bin, place_voxel_mask, render_masks, sprite_place, Mask2D, SceneMasks};

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{analytic_sdf, Posed, Primitive, SdfGrid, Solid, Vec3};
use crate::objectives::ni_loss;
use crate::touch::{build_touch_tensor, extract_contacts, ContactSet, TouchTensor};
use crate::transform::{canonicalize_scene, random_rotation, GridFrame, SimilarityTransform};

/// Tolerance on the penetration loss of accepted grasps.
pub const NI_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub resolution: usize,
    /// Mask canvas width; a multiple of `resolution`.
    pub canvas: usize,
    pub padding_voxels: usize,
    pub bins: usize,
    /// Allowed finger counts.
    pub fingers: Vec<usize>,
    /// Meters per object unit before canonicalization.
    pub object_metric_scale: f64,
    /// Range of the object's largest half extent, object units.
    pub object_size: [f64; 2],
    /// Range of finger capsule radii, object units.
    pub finger_radius: [f64; 2],
    /// Gap between fingertip capsules and the object surface.
    pub tip_clearance_mm: f64,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            canvas: 64,
            padding_voxels: 2,
            bins: 5,
            fingers: vec![3, 4, 5],
            object_metric_scale: 0.1,
            object_size: [0.3, 0.55],
            finger_radius: [0.07, 0.1],
            tip_clearance_mm: 0.5,
            max_attempts: 200,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.resolution < 16 {
            return bad(format!("resolution {} < 16", self.resolution));
        }
        if self.canvas == 0 || self.canvas % self.resolution != 0 {
            return bad(format!("canvas {} is not a multiple of R", self.canvas));
        }
        if 2 * self.padding_voxels + 4 > self.resolution {
            return bad("padding leaves no room for the scene".into());
        }
        if self.bins == 0 {
            return bad("bins must be > 0".into());
        }
        if self.fingers.is_empty() || self.fingers.iter().any(|f| !(3..=5).contains(f)) {
            return bad("finger counts must be 3, 4 or 5".into());
        }
        if !(self.object_metric_scale > 0.0) {
            return bad("object_metric_scale must be > 0".into());
        }
        let [a, b] = self.object_size;
        if !(a > 0.05 && a <= b && b <= 0.8) {
            return bad(format!("object_size range {:?} outside (0.05, 0.8]", self.object_size));
        }
        let [a, b] = self.finger_radius;
        if !(a > 0.01 && a <= b && b <= 0.2) {
            return bad(format!("finger_radius range {:?} outside (0.01, 0.2]", self.finger_radius));
        }
        if !(self.tip_clearance_mm >= 0.0) {
            return bad("tip_clearance_mm must be >= 0".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be > 0".into());
        }
        Ok(())
    }
}

/// A primitive object centered at the origin of object units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcObject {
    pub primitive: Primitive,
    pub pose: SimilarityTransform,
    pub metric_scale: f64,
}

impl ProcObject {
    pub fn solid(&self) -> Solid {
        Solid::single(Posed::new(self.primitive, self.pose))
    }

    /// Radius of a sphere around the origin enclosing the object.
    pub fn bounding_radius(&self) -> f64 {
        self.primitive.local_half_extents().norm() * self.pose.scale()
    }
}

/// Draws an object: type uniform over the five primitives, largest half
/// extent uniform in `cfg.object_size`, random orientation.
pub fn sample_object<R: Rng + ?Sized>(rng: &mut R, cfg: &SceneConfig) -> ProcObject {
    let size = rng.random_range(cfg.object_size[0]..=cfg.object_size[1]);
    let kind = rng.random_range(0..5);
    let mut frac = |lo: f64| size * rng.random_range(lo..=1.0);
    let primitive = match kind {
        0 => Primitive::Sphere { radius: size },
        1 => Primitive::Box {
            half_extents: [size, frac(0.5), frac(0.5)],
        },
        2 => {
            let radius = size * 0.35 + frac(0.0) * 0.25;
            Primitive::Capsule {
                half_length: size - radius,
                radius,
            }
        }
        3 => Primitive::Cylinder {
            half_height: size,
            radius: frac(0.45),
        },
        _ => Primitive::Superellipsoid {
            radii: [size, frac(0.55), frac(0.55)],
            exponent: rng.random_range(2.0..=4.0),
        },
    };
    let pose = SimilarityTransform::new(1.0, random_rotation(rng), Vec3::zeros()).expect("rotation is proper");
    ProcObject {
        primitive,
        pose,
        metric_scale: cfg.object_metric_scale,
    }
}

/// One finger: a distal capsule from the fingertip outward along the surface
/// normal and a proximal capsule to the palm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finger {
    pub tip: [f64; 3],
    pub knuckle: [f64; 3],
    pub base: [f64; 3],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcHand {
    pub fingers: Vec<Finger>,
    pub palm: Posed,
}

impl ProcHand {
    pub fn n_fingers(&self) -> usize {
        self.fingers.len()
    }

    pub fn fingertips(&self) -> Vec<Vec3> {
        self.fingers.iter().map(|f| Vec3::from(f.tip)).collect()
    }

    pub fn solid(&self) -> Solid {
        let mut parts = vec![self.palm];
        for f in &self.fingers {
            let (t, k, b) = (Vec3::from(f.tip), Vec3::from(f.knuckle), Vec3::from(f.base));
            parts.push(Posed::capsule(t, k, f.radius));
            parts.push(Posed::capsule(k, b, f.radius));
        }
        Solid::new(parts)
    }
}

/// First surface crossing of `solid` along the segment `from -> to`:
/// marching to bracket the sign change, then bisection.
fn ray_root(solid: &Solid, from: Vec3, to: Vec3) -> Option<Vec3> {
    let len = (to - from).norm();
    let dir = (to - from) / len;
    let step = len / 400.0;
    let mut a = 0.0;
    let mut fa = solid.sdf(from);
    if fa <= 0.0 {
        return None;
    }
    while a < len {
        let b = (a + step.max(0.5 * fa)).min(len);
        let fb = solid.sdf(from + dir * b);
        if fb <= 0.0 {
            let (mut lo, mut hi) = (a, b);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if solid.sdf(from + dir * mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(from + dir * lo);
        }
        a = b;
        fa = fb;
    }
    None
}

fn sdf_normal(solid: &Solid, p: Vec3) -> Vec3 {
    let e = 1e-6;
    let g = Vec3::new(
        solid.sdf(p + Vec3::x() * e) - solid.sdf(p - Vec3::x() * e),
        solid.sdf(p + Vec3::y() * e) - solid.sdf(p - Vec3::y() * e),
        solid.sdf(p + Vec3::z() * e) - solid.sdf(p - Vec3::z() * e),
    );
    g.normalize()
}

/// Proposes a grasp: palm slab on a random side, fingertips found by
/// casting rays at the object from around the palm axis and retracted along
/// the surface normal by their radius plus the clearance. The proposal is
/// not validated; see [`build_scene`].
pub fn propose_grasp<R: Rng + ?Sized>(object: &ProcObject, n_fingers: usize, rng: &mut R, cfg: &SceneConfig) -> Result<ProcHand> {
    if !(3..=5).contains(&n_fingers) {
        return Err(Error::InvalidArgument(format!("{n_fingers} fingers")));
    }
    let solid = object.solid();
    let frame = random_rotation(rng);
    let axis = frame.column(2).into_owned();
    let (e1, e2) = (frame.column(0).into_owned(), frame.column(1).into_owned());
    let radius = rng.random_range(cfg.finger_radius[0]..=cfg.finger_radius[1]);
    let clearance = cfg.tip_clearance_mm * 1e-3 / object.metric_scale;
    let bound = object.bounding_radius();
    let palm_half = Vec3::new(0.8 * bound + 2.0 * radius, 0.8 * bound + 2.0 * radius, 0.6 * radius);
    let palm_center = axis * (bound + 1.5 * radius + palm_half.z);
    let palm_rot: Matrix3<f64> = frame;
    let palm = Posed::new(
        Primitive::Box {
            half_extents: palm_half.into(),
        },
        SimilarityTransform::new(1.0, palm_rot, palm_center)?,
    );
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut fingers = Vec::with_capacity(n_fingers);
    for f in 0..n_fingers {
        let psi = phase + std::f64::consts::TAU * (f as f64 + rng.random_range(-0.2..0.2)) / n_fingers as f64;
        let polar = rng.random_range(55f64..100.0).to_radians();
        let side = e1 * psi.cos() + e2 * psi.sin();
        let dir = axis * polar.cos() + side * polar.sin();
        let far = dir * (bound * 2.0 + 1.0);
        let hit = ray_root(&solid, far, Vec3::zeros()).ok_or_else(|| Error::Generation {
            attempts: 1,
            reason: "approach ray missed the object".into(),
        })?;
        let n = sdf_normal(&solid, hit);
        let tip = hit + n * (radius + clearance);
        let out = (n + axis).normalize();
        let knuckle = tip + out * (2.5 * radius);
        let lateral = knuckle - palm_center - axis * axis.dot(&(knuckle - palm_center));
        let base = palm_center + lateral.normalize() * (0.7 * palm_half.x).min(lateral.norm());
        fingers.push(Finger {
            tip: tip.into(),
            knuckle: knuckle.into(),
            base: base.into(),
            radius,
        });
    }
    Ok(ProcHand { fingers, palm })
}

/// A generated scene in canonical grid coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub index: u64,
    pub master_seed: u64,
    pub resolution: usize,
    pub canvas: usize,
    pub n_fingers: usize,
    pub frame: GridFrame,
    /// Object units to grid coordinates.
    pub canonical: SimilarityTransform,
    pub object_primitive: Primitive,
    /// Canonical object and hand geometry.
    pub object: Solid,
    pub hand: Solid,
    pub fingertips: Vec<[f64; 3]>,
    pub contacts: ContactSet,
    pub occlusion_x: f64,
    pub bin: usize,
    pub attempts: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraspScene {
    pub meta: SceneMeta,
    pub object_sdf: SdfGrid,
    pub hand_sdf: SdfGrid,
    pub touch: TouchTensor,
    pub masks: SceneMasks,
}

/// Result of [`check_scene`]: each listed invariant, true when it holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneChecks {
    pub has_contact: bool,
    pub no_penetration: bool,
    pub masks_consistent: bool,
    pub margins: bool,
}

impl SceneChecks {
    pub fn all(&self) -> bool {
        self.has_contact && self.no_penetration && self.masks_consistent && self.margins
    }
}

/// Per-scene RNG stream derived from the master seed and the scene index.
pub fn scene_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

fn margin_ok(grid: &SdfGrid, p: usize) -> bool {
    let r = grid.resolution();
    grid.values().iter().enumerate().all(|(idx, v)| {
        if *v >= 0.0 {
            return true;
        }
        let (i, j, k) = grid.coords(idx);
        [i, j, k].iter().all(|c| *c >= p && *c + p < r)
    })
}

pub fn check_scene(scene: &GraspScene, padding_voxels: usize) -> Result<SceneChecks> {
    let ni = ni_loss(&scene.object_sdf, &scene.hand_sdf, 0.1)?.value;
    let m = &scene.masks;
    Ok(SceneChecks {
        has_contact: !scene.meta.contacts.is_empty() && scene.touch.contact_count() > 0,
        no_penetration: ni <= NI_TOLERANCE,
        masks_consistent: m.object_visible.is_subset_of(&m.object_full)
            && m.object_visible.intersection_count(&m.hand) == 0,
        margins: margin_ok(&scene.object_sdf, padding_voxels) && margin_ok(&scene.hand_sdf, padding_voxels),
    })
}

/// Canonical grids of a proposed grasp, or the reason it is rejected.
fn voxelize_grasp(object: &ProcObject, hand: &ProcHand, cfg: &SceneConfig) -> Result<std::result::Result<Voxelized, String>> {
    let r = cfg.resolution;
    let canon = canonicalize_scene(&hand.solid(), &object.solid(), &hand.fingertips(), cfg.padding_voxels, r)?;
    let object_sdf = analytic_sdf(&canon.object, r)?.quantized();
    let hand_sdf = analytic_sdf(&canon.hand, r)?.quantized();
    let ni = ni_loss(&object_sdf, &hand_sdf, 0.1)?.value;
    if ni > NI_TOLERANCE {
        return Ok(Err(format!("penetration {ni:.3e}")));
    }
    let contacts = extract_contacts(&hand_sdf, &object_sdf, 2.0 / r as f64)?;
    if contacts.is_empty() {
        return Ok(Err("no contact".into()));
    }
    Ok(Ok(Voxelized {
        canon,
        object_sdf,
        hand_sdf,
        contacts,
    }))
}

struct Voxelized {
    canon: crate::transform::CanonicalScene,
    object_sdf: SdfGrid,
    hand_sdf: SdfGrid,
    contacts: ContactSet,
}

/// Proposes grasps for `object` until one has at least one contact and no
/// interpenetration once canonicalized into the grid.
pub fn sample_grasp<R: Rng + ?Sized>(object: &ProcObject, n_fingers: usize, rng: &mut R, cfg: &SceneConfig) -> Result<ProcHand> {
    cfg.validate()?;
    let mut last = String::from("no attempt");
    for _ in 0..cfg.max_attempts {
        let hand = match propose_grasp(object, n_fingers, rng, cfg) {
            Ok(h) => h,
            Err(e) => {
                last = e.to_string();
                continue;
            }
        };
        match voxelize_grasp(object, &hand, cfg)? {
            Ok(_) => return Ok(hand),
            Err(why) => last = why,
        }
    }
    Err(Error::Generation {
        attempts: cfg.max_attempts,
        reason: last,
    })
}

/// Builds scene `index` of the stream `master_seed`: draws an object and a
/// finger count, then proposes grasps until one canonicalizes into the grid
/// with at least one contact and no penetration.
pub fn build_scene(master_seed: u64, index: u64, cfg: &SceneConfig) -> Result<GraspScene> {
    cfg.validate()?;
    let mut rng = scene_rng(master_seed, index);
    let r = cfg.resolution;
    let mut last = String::from("no attempt");
    for attempt in 1..=cfg.max_attempts {
        let object = sample_object(&mut rng, cfg);
        let n_fingers = cfg.fingers[rng.random_range(0..cfg.fingers.len())];
        let hand = match propose_grasp(&object, n_fingers, &mut rng, cfg) {
            Ok(h) => h,
            Err(e) => {
                last = e.to_string();
                continue;
            }
        };
        let Voxelized {
            canon,
            object_sdf,
            hand_sdf,
            contacts,
        } = match voxelize_grasp(&object, &hand, cfg)? {
            Ok(v) => v,
            Err(why) => {
                last = why;
                continue;
            }
        };
        let touch = build_touch_tensor(&contacts, r)?;
        let voxel_masks = render_masks(&object_sdf, Some(&hand_sdf), r)?;
        if voxel_masks.object_full.is_empty() {
            last = "empty object silhouette".into();
            continue;
        }
        let masks = SceneMasks {
            object_full: place_voxel_mask(&voxel_masks.object_full, cfg.canvas)?,
            object_visible: place_voxel_mask(&voxel_masks.object_visible, cfg.canvas)?,
            hand: place_voxel_mask(&voxel_masks.hand, cfg.canvas)?,
        };
        let (occlusion_x, bin) = occlusion_bin(&masks.object_visible, &masks.object_full, cfg.bins)?;
        let frame = GridFrame::with_scale(object.metric_scale / canon.transform.scale())?;
        let meta = SceneMeta {
            index,
            master_seed,
            resolution: r,
            canvas: cfg.canvas,
            n_fingers,
            frame,
            canonical: canon.transform,
            object_primitive: object.primitive,
            object: canon.object,
            hand: canon.hand,
            fingertips: canon.fingertips.iter().map(|p| (*p).into()).collect(),
            contacts,
            occlusion_x,
            bin,
            attempts: attempt,
        };
        return Ok(GraspScene {
            meta,
            object_sdf,
            hand_sdf,
            touch,
            masks,
        });
    }
    Err(Error::Generation {
        attempts: cfg.max_attempts,
        reason: format!("scene {index}: {last}"),
    })
}
