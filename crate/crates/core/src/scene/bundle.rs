//! On-disk scene bundles and dataset manifests.
//!
//! A bundle directory holds `scene.json`, `object.sdfg`, `hand.sdfg`,
//! `touch_C.sdfg`, `touch_D.sdfg` and the masks `mask_full.pgm`,
//! `mask_visible.pgm` and `mask_hand.pgm`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GraspScene, Mask2D, SceneMasks, SceneMeta};
use crate::error::{Error, Result};
use crate::grid::{read_sdfg, write_sdfg};
use crate::touch::TouchTensor;

pub fn save_bundle(scene: &GraspScene, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(&scene.meta)?;
    let p = dir.join("scene.json");
    fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    write_sdfg(dir.join("object.sdfg"), &scene.object_sdf)?;
    write_sdfg(dir.join("hand.sdfg"), &scene.hand_sdf)?;
    scene.touch.save(dir.join("touch_C.sdfg"), dir.join("touch_D.sdfg"))?;
    scene.masks.object_full.write_pgm(dir.join("mask_full.pgm"))?;
    scene.masks.object_visible.write_pgm(dir.join("mask_visible.pgm"))?;
    scene.masks.hand.write_pgm(dir.join("mask_hand.pgm"))
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<GraspScene> {
    let dir = dir.as_ref();
    let p = dir.join("scene.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let meta: SceneMeta = serde_json::from_str(&text)?;
    let object_sdf = read_sdfg(dir.join("object.sdfg"))?;
    let hand_sdf = read_sdfg(dir.join("hand.sdfg"))?;
    let touch = TouchTensor::load(dir.join("touch_C.sdfg"), dir.join("touch_D.sdfg"))?;
    for (what, r) in [("object", object_sdf.resolution()), ("hand", hand_sdf.resolution()), ("touch", touch.resolution())] {
        if r != meta.resolution {
            return Err(Error::format(dir, format!("{what} grid has R = {r}, scene.json says {}", meta.resolution)));
        }
    }
    let masks = SceneMasks {
        object_full: Mask2D::read_pgm(dir.join("mask_full.pgm"))?,
        object_visible: Mask2D::read_pgm(dir.join("mask_visible.pgm"))?,
        hand: Mask2D::read_pgm(dir.join("mask_hand.pgm"))?,
    };
    Ok(GraspScene {
        meta,
        object_sdf,
        hand_sdf,
        touch,
        masks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: u64,
    /// Bundle directory relative to the manifest.
    pub dir: String,
    pub bin: usize,
    pub occlusion_x: f64,
    pub n_fingers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub master_seed: u64,
    pub resolution: usize,
    pub canvas: usize,
    pub count: usize,
    pub scenes: Vec<ManifestEntry>,
}

pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.count != m.scenes.len() {
        return Err(Error::format(path, format!("count {} but {} entries", m.count, m.scenes.len())));
    }
    Ok(m)
}
