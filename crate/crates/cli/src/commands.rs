//! Pipeline commands over a data root:
//!
//! ```text
//! scenes/manifest.json, scenes/scene_NNNNN/   gen-data
//! codec.bin                                   fit-codec
//! denoiser.bin, train_log.jsonl               train
//! runs/<run>/scene_NNNNN/, runs/<run>/report.* reconstruct, evaluate
//! ablation/ablation.{json,csv}                ablate
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use touchsdf::flow::{train_denoiser, LinearCodec, TinyDenoiser, VelocityField};
use touchsdf::grid::{extract_surface, read_sdfg, write_sdfg};
use touchsdf::metrics::{evaluate_pair, stratified_report, EvalSample, StratifiedReport, METRIC_NAMES};
use touchsdf::pipeline::{case_from_scene, fit_suite_codec, reconstruct_with, training_example, Ablation, SceneCase};
use touchsdf::sampler::{write_trajectory, ScaledDecoder};
use touchsdf::scene::{build_scene, check_scene, load_bundle, read_manifest, save_bundle, write_manifest, Manifest, ManifestEntry};
use touchsdf::selftest::Selftest;

use crate::config::{FieldKind, RunConfig};

/// Settings of one reconstruction run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSpec {
    pub ablation: Ablation,
    pub noise_mm: f64,
    pub guidance: bool,
}

impl RunSpec {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            ablation: cfg.ablation,
            noise_mm: cfg.touch_noise_mm,
            guidance: cfg.recon.sampler.guidance_enabled,
        }
    }

    pub fn name(&self, field: FieldKind) -> String {
        format!(
            "{}-{}-{}mm{}",
            field.name(),
            self.ablation.name(),
            self.noise_mm,
            if self.guidance { "" } else { "-unguided" }
        )
    }
}

pub fn scenes_dir(root: &Path) -> PathBuf {
    root.join("scenes")
}

pub fn manifest_path(root: &Path) -> PathBuf {
    scenes_dir(root).join("manifest.json")
}

pub fn codec_path(root: &Path) -> PathBuf {
    root.join("codec.bin")
}

pub fn denoiser_path(root: &Path) -> PathBuf {
    root.join("denoiser.bin")
}

pub fn run_dir(root: &Path, cfg: &RunConfig, spec: &RunSpec) -> PathBuf {
    root.join("runs").join(spec.name(cfg.field))
}

fn scene_name(index: u64) -> String {
    format!("scene_{index:05}")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

pub fn gen_data(cfg: &RunConfig, root: &Path) -> Result<Manifest> {
    let dir = scenes_dir(root);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let scenes: Vec<ManifestEntry> = (0..cfg.scenes as u64)
        .into_par_iter()
        .map(|i| {
            let scene = build_scene(cfg.seed, i, &cfg.scene).with_context(|| format!("scene {i}"))?;
            let name = scene_name(i);
            save_bundle(&scene, dir.join(&name)).with_context(|| format!("scene {i}"))?;
            Ok(ManifestEntry {
                index: i,
                dir: name,
                bin: scene.meta.bin,
                occlusion_x: scene.meta.occlusion_x,
                n_fingers: scene.meta.n_fingers,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        master_seed: cfg.seed,
        resolution: cfg.scene.resolution,
        canvas: cfg.scene.canvas,
        count: scenes.len(),
        scenes,
    };
    write_manifest(&manifest, manifest_path(root))?;
    // revalidate what was written
    manifest.scenes.par_iter().try_for_each(|e| {
        let scene = load_bundle(dir.join(&e.dir))?;
        let checks = check_scene(&scene, cfg.scene.padding_voxels)?;
        if !checks.all() {
            bail!("scene {} fails its invariants on reload: {checks:?}", e.index);
        }
        Ok(())
    })?;
    Ok(manifest)
}

fn load_manifest(root: &Path) -> Result<Manifest> {
    read_manifest(manifest_path(root)).context("no dataset; run gen-data first")
}

fn load_case(root: &Path, entry: &ManifestEntry, cfg: &RunConfig) -> Result<SceneCase> {
    let scene = load_bundle(scenes_dir(root).join(&entry.dir))?;
    Ok(case_from_scene(scene, &cfg.scene, &cfg.recon)?)
}

fn load_cases(root: &Path, cfg: &RunConfig) -> Result<Vec<SceneCase>> {
    load_manifest(root)?
        .scenes
        .par_iter()
        .map(|e| load_case(root, e, cfg).with_context(|| format!("scene {}", e.index)))
        .collect()
}

fn load_codec(root: &Path) -> Result<LinearCodec> {
    let path = codec_path(root);
    LinearCodec::load(&path).with_context(|| format!("loading codec {}; run fit-codec first", path.display()))
}

/// Fits the codec over every true object and depth twin of the dataset.
pub fn fit_codec(cfg: &RunConfig, root: &Path) -> Result<LinearCodec> {
    let codec = fit_suite_codec(&load_cases(root, cfg)?)?;
    codec.save(codec_path(root))?;
    Ok(codec)
}

pub fn train(cfg: &RunConfig, root: &Path) -> Result<TinyDenoiser> {
    let codec = load_codec(root)?;
    let decoder = ScaledDecoder {
        codec: &codec,
        scale: cfg.recon.latent_scale,
    };
    let examples = load_cases(root, cfg)?
        .iter()
        .map(|c| training_example(c, &decoder, &cfg.recon))
        .collect::<touchsdf::Result<Vec<_>>>()?;
    let (net, log) = train_denoiser(&examples, Some(&decoder), &cfg.flow, &cfg.loss)?;
    net.save(denoiser_path(root))?;
    let path = root.join("train_log.jsonl");
    let mut f = std::io::BufWriter::new(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    for entry in &log {
        serde_json::to_writer(&mut f, entry)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(net)
}

#[derive(Debug, Clone, Serialize)]
pub struct SceneSummary {
    pub index: u64,
    pub ablation: Ablation,
    pub noise_mm: f64,
    pub guidance: bool,
    pub field: FieldKind,
    /// Library entry nearest the final latent; 0 is the true object.
    pub nearest: usize,
    pub voxel_iou: f64,
    pub ni: f64,
    pub c: f64,
    /// False when the prediction has no zero level set (no mesh written).
    pub has_surface: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub run: String,
    pub completed: usize,
    /// Scene index and error message of each failed scene.
    pub failed: Vec<(u64, String)>,
}

/// Reconstructs every scene of the dataset. Scene failures are recorded and
/// the run continues.
pub fn reconstruct(cfg: &RunConfig, root: &Path, spec: &RunSpec) -> Result<RunOutcome> {
    let manifest = load_manifest(root)?;
    let codec = load_codec(root)?;
    let mut recon = cfg.recon.clone();
    recon.sampler.guidance_enabled = spec.guidance;
    let net = match cfg.field {
        FieldKind::Oracle => None,
        FieldKind::Denoiser => {
            let path = denoiser_path(root);
            let net = TinyDenoiser::load(&path).with_context(|| format!("loading denoiser {}; run train first", path.display()))?;
            if net.latent_dim() != codec.latent_dim() {
                bail!("denoiser latent size {} does not match the codec's {}", net.latent_dim(), codec.latent_dim());
            }
            // the sampler's clean estimate must use the path the net was trained on
            recon.sampler.sigma_min = cfg.flow.sigma_min;
            Some(net)
        }
    };
    let field = net.as_ref().map(|n| n as &dyn VelocityField);
    let run = spec.name(cfg.field);
    let dir = run_dir(root, cfg, spec);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let results: Vec<(u64, Result<()>)> = manifest
        .scenes
        .par_iter()
        .map(|e| {
            let r = (|| {
                let case = load_case(root, e, cfg)?;
                let out = reconstruct_with(&case, &codec, field, spec.ablation, spec.noise_mm, &recon)?;
                let sdir = dir.join(&e.dir);
                fs::create_dir_all(&sdir).with_context(|| format!("creating {}", sdir.display()))?;
                write_sdfg(sdir.join("pred.sdfg"), &out.output.grid)?;
                write_trajectory(sdir.join("trajectory.jsonl"), &out.output.trajectory)?;
                let mesh = match extract_surface(&out.output.grid) {
                    Ok(m) => Some(m),
                    Err(touchsdf::Error::EmptySurface(_)) => None,
                    Err(err) => return Err(err.into()),
                };
                let ply = sdir.join("pred.ply");
                match &mesh {
                    Some(m) => m.write_ply(&ply)?,
                    None if ply.exists() => fs::remove_file(&ply)?,
                    None => {}
                }
                write_json(
                    &sdir.join("summary.json"),
                    &SceneSummary {
                        index: e.index,
                        ablation: spec.ablation,
                        noise_mm: spec.noise_mm,
                        guidance: spec.guidance,
                        field: cfg.field,
                        nearest: out.nearest,
                        voxel_iou: out.iou,
                        ni: out.ni,
                        c: out.c,
                        has_surface: mesh.is_some(),
                    },
                )
            })();
            (e.index, r)
        })
        .collect();
    let mut outcome = RunOutcome {
        run,
        completed: 0,
        failed: Vec::new(),
    };
    for (i, r) in results {
        match r {
            Ok(()) => outcome.completed += 1,
            Err(err) => {
                eprintln!("scene {i} failed: {err:#}");
                outcome.failed.push((i, format!("{err:#}")));
            }
        }
    }
    write_json(&dir.join("run.json"), &outcome)?;
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutcome {
    pub report: StratifiedReport,
    /// Scenes without a prediction.
    pub missing: Vec<u64>,
}

/// Scores a run's predictions against the true objects and writes
/// `report.csv` and `report.json` into the run directory.
pub fn evaluate(cfg: &RunConfig, root: &Path, spec: &RunSpec) -> Result<EvalOutcome> {
    let manifest = load_manifest(root)?;
    let dir = run_dir(root, cfg, spec);
    let scored: Vec<(u64, Option<EvalSample>)> = manifest
        .scenes
        .par_iter()
        .map(|e| {
            let pred_path = dir.join(&e.dir).join("pred.sdfg");
            if !pred_path.exists() {
                return Ok((e.index, None));
            }
            let pred = read_sdfg(&pred_path)?;
            let gt = read_sdfg(scenes_dir(root).join(&e.dir).join("object.sdfg"))?;
            let metrics = evaluate_pair(&pred, &gt, &cfg.eval).with_context(|| format!("scene {}", e.index))?;
            // manifest bins are 1-based
            let bin = e.bin.checked_sub(1).ok_or_else(|| anyhow!("scene {} has bin 0", e.index))?;
            Ok((e.index, Some(EvalSample { bin, metrics })))
        })
        .collect::<Result<_>>()?;
    let mut missing = Vec::new();
    let mut samples = Vec::new();
    for (i, s) in scored {
        match s {
            Some(s) => samples.push(s),
            None => missing.push(i),
        }
    }
    if !missing.is_empty() {
        eprintln!("warning: {} scenes have no prediction and are excluded: {missing:?}", missing.len());
    }
    let report = stratified_report(&samples, cfg.scene.bins).map_err(|e| anyhow!("{e} in {}", dir.display()))?;
    report.write(dir.join("report.csv"), dir.join("report.json"))?;
    Ok(EvalOutcome { report, missing })
}

/// Runs compared by `ablate`; the first is the reference.
pub const ABLATION_RUNS: [(Ablation, f64); 5] = [
    (Ablation::Full, 0.0),
    (Ablation::NoTouch, 0.0),
    (Ablation::VisionOnly, 0.0),
    (Ablation::Full, 3.0),
    (Ablation::Full, 5.0),
];

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub run: String,
    pub ablation: Ablation,
    pub noise_mm: f64,
    pub failed: usize,
    /// Overall metric means in `METRIC_NAMES` order.
    pub all: Vec<f64>,
    /// Differences to the reference run.
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub metrics: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("run,ablation,noise_mm,failed");
        for m in &self.metrics {
            s.push_str(&format!(",{m}"));
        }
        for m in &self.metrics {
            s.push_str(&format!(",delta_{m}"));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}", r.run, r.ablation.name(), r.noise_mm, r.failed));
            for v in r.all.iter().chain(&r.delta) {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Reconstructs and evaluates every sensing mode and noise level, then
/// tabulates overall means and deltas against full sensing without noise.
pub fn ablate(cfg: &RunConfig, root: &Path) -> Result<(AblationTable, usize)> {
    let mut rows: Vec<AblationRow> = Vec::new();
    let mut failures = 0;
    for (ablation, noise_mm) in ABLATION_RUNS {
        let spec = RunSpec {
            ablation,
            noise_mm,
            guidance: cfg.recon.sampler.guidance_enabled,
        };
        let outcome = reconstruct(cfg, root, &spec)?;
        failures += outcome.failed.len();
        let eval = evaluate(cfg, root, &spec)?;
        let all: Vec<f64> = METRIC_NAMES
            .iter()
            .map(|m| eval.report.row(m).map_or(f64::NAN, |r| r.all))
            .collect();
        let delta = match rows.first() {
            Some(reference) => all.iter().zip(&reference.all).map(|(a, b)| a - b).collect(),
            None => vec![0.0; all.len()],
        };
        rows.push(AblationRow {
            run: outcome.run,
            ablation,
            noise_mm,
            failed: outcome.failed.len(),
            all,
            delta,
        });
    }
    let table = AblationTable {
        metrics: METRIC_NAMES.iter().map(|m| m.to_string()).collect(),
        rows,
    };
    let dir = root.join("ablation");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("ablation.json"), &table)?;
    fs::write(dir.join("ablation.csv"), table.to_csv())?;
    Ok((table, failures))
}

/// Runs every release check, printing one line each. True when all pass.
pub fn selftest() -> bool {
    let suite = Selftest::new();
    let mut ok = true;
    let mut total = 0.0;
    for id in 1..=touchsdf::selftest::CHECK_NAMES.len() {
        let r = suite.run(id);
        println!("{}", r.line());
        ok &= r.passed;
        total += r.seconds;
    }
    println!("{} in {total:.1}s", if ok { "all checks passed" } else { "FAILED" });
    ok
}
