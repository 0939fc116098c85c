//! Release checks: gradient and oracle properties of every module plus the
//! directional reconstruction results on seeded suites. Shared by the
//! `acceptance` test target and the `selftest` command.

use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::flow::{clean_estimate, clean_estimate_denominator, interpolate, target_velocity, LatentCode, LinearCodec, OracleField, ShapeLibrary};
use crate::grid::{analytic_sdf, extract_surface, Posed, Primitive, SdfGrid, Solid, Vec3};
use crate::metrics::{chamfer, emd_exact, evaluate_pair, sample_surface, voxel_iou, EvalConfig};
use crate::objectives::{contact_loss, eikonal_loss, kl_loss, l1_loss, ni_loss, normal_loss, physics_energy, LossValue};
use crate::pipeline::{build_suite, fit_suite_codec, reconstruct, Ablation, ReconConfig, Reconstruction};
use crate::sampler::{guidance_gradient, latent_energy, sample, LatentDecoder, PhysicsContext, SamplerConfig, ScaledDecoder};
use crate::scene::{build_scene, check_scene, SceneConfig};
use crate::touch::{build_touch_tensor, ContactSet};
use crate::transform::{augment_sdf, random_rotation, sample_augmentation};

/// Master seed of the reconstruction suites.
pub const SUITE_SEED: u64 = 1;
pub const SUITE_SIZE: usize = 50;
pub const REGRESSION_SIZE: usize = 10;
pub const VALIDITY_SCENES: usize = 100;

/// Unguided final `L_NI` above which a scene counts as penetrating.
const PENETRATING: f64 = 1e-9;
const GRID_FD_STEP: f64 = 1e-4;
const LATENT_FD_STEP: f64 = 1e-5;
const PROBES: usize = 50;

pub const CHECK_NAMES: [&str; 10] = [
    "gradient suite",
    "eikonal fidelity",
    "augmentation oracle",
    "flow consistency",
    "mixture-oracle sampling",
    "physics guidance efficacy",
    "ablation ordering",
    "tactile-noise robustness",
    "metric oracles",
    "scene validity",
];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    /// 1-based check number.
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "{} {:>2} {:<26} {:>7.1}s  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.seconds,
            self.detail
        )
    }
}

/// Per-scene reconstructions of the seeded suite, shared by the
/// reconstruction checks.
struct SuiteRuns {
    vision: Vec<Reconstruction>,
    no_touch: Vec<Reconstruction>,
    full: Vec<Reconstruction>,
    full3: Vec<Reconstruction>,
    full5: Vec<Reconstruction>,
    unguided: Vec<Reconstruction>,
}

/// Runs checks by number; the reconstruction suite is built once on first
/// use.
#[derive(Default)]
pub struct Selftest {
    suite: OnceLock<std::result::Result<SuiteRuns, String>>,
}

impl Selftest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn run(&self, id: usize) -> CheckResult {
        let start = Instant::now();
        let outcome = match id {
            1 => gradient_suite(),
            2 => eikonal_fidelity(),
            3 => augmentation_oracle(),
            4 => flow_consistency(),
            5 => mixture_sampling(),
            6 => self.guidance_efficacy(),
            7 => self.ablation_ordering(),
            8 => self.noise_robustness(),
            9 => metric_oracles(),
            10 => scene_validity(),
            _ => Err(Error::InvalidArgument(format!("no check {id}"))),
        };
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        CheckResult {
            id,
            name: CHECK_NAMES.get(id.wrapping_sub(1)).copied().unwrap_or("unknown"),
            passed,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        }
    }

    pub fn run_all(&self) -> Vec<CheckResult> {
        (1..=CHECK_NAMES.len()).map(|id| self.run(id)).collect()
    }

    fn suite(&self) -> Result<&SuiteRuns> {
        self.suite
            .get_or_init(|| build_runs().map_err(|e| e.to_string()))
            .as_ref()
            .map_err(|e| Error::InvalidArgument(format!("suite failed: {e}")))
    }

    fn guidance_efficacy(&self) -> Result<(bool, String)> {
        let s = self.suite()?;
        let picked: Vec<usize> = (0..s.unguided.len())
            .filter(|i| s.unguided[*i].ni > PENETRATING)
            .take(REGRESSION_SIZE)
            .collect();
        if picked.len() < REGRESSION_SIZE {
            return Ok((false, format!("only {} penetrating scenes", picked.len())));
        }
        let mean = |runs: &[Reconstruction], f: fn(&Reconstruction) -> f64| picked.iter().map(|i| f(&runs[*i])).sum::<f64>() / picked.len() as f64;
        let (ni_off, ni_on) = (mean(&s.unguided, |r| r.ni), mean(&s.full, |r| r.ni));
        let (c_off, c_on) = (mean(&s.unguided, |r| r.c), mean(&s.full, |r| r.c));
        let monotone = picked
            .iter()
            .filter(|i| {
                let tr = &s.full[**i].output.trajectory;
                let tail = &tr[tr.len() - tr.len() / 4..];
                tail.windows(2).all(|w| match (w[0].energy, w[1].energy) {
                    (Some(a), Some(b)) => b <= a + 1e-9,
                    _ => false,
                })
            })
            .count();
        let ni_cut = 1.0 - ni_on / ni_off;
        let c_cut = 1.0 - c_on / c_off;
        let pass = ni_cut >= 0.5 && c_cut >= 0.3 && monotone >= 9;
        Ok((
            pass,
            format!(
                "NI {ni_off:.2e} -> {ni_on:.2e} (-{:.0}%), C {c_off:.4} -> {c_on:.4} (-{:.0}%), monotone tail {monotone}/{}",
                100.0 * ni_cut,
                100.0 * c_cut,
                picked.len()
            ),
        ))
    }

    fn ablation_ordering(&self) -> Result<(bool, String)> {
        let s = self.suite()?;
        let (f, n, v) = (mean_iou(&s.full), mean_iou(&s.no_touch), mean_iou(&s.vision));
        let pass = f >= n && n >= v && f - v >= 0.05;
        Ok((pass, format!("IoU full {f:.4}, no-touch {n:.4}, vision-only {v:.4}")))
    }

    fn noise_robustness(&self) -> Result<(bool, String)> {
        let s = self.suite()?;
        let (a, b, c) = (mean_iou(&s.full), mean_iou(&s.full3), mean_iou(&s.full5));
        let pass = (b - a).abs() <= 0.02 && a - c > a - b;
        Ok((pass, format!("IoU 0 mm {a:.4}, 3 mm {b:.4}, 5 mm {c:.4}")))
    }
}

fn mean_iou(runs: &[Reconstruction]) -> f64 {
    runs.iter().map(|r| r.iou).sum::<f64>() / runs.len() as f64
}

fn build_runs() -> Result<SuiteRuns> {
    let cfg = ReconConfig::default();
    let cases = build_suite(SUITE_SEED, SUITE_SIZE, &SceneConfig::default(), &cfg)?;
    let codec = fit_suite_codec(&cases)?;
    let mut off = cfg.clone();
    off.sampler.guidance_enabled = false;
    let runs: Vec<[Reconstruction; 6]> = cases
        .par_iter()
        .map(|c| {
            Ok([
                reconstruct(c, &codec, Ablation::VisionOnly, 0.0, &cfg)?,
                reconstruct(c, &codec, Ablation::NoTouch, 0.0, &cfg)?,
                reconstruct(c, &codec, Ablation::Full, 0.0, &cfg)?,
                reconstruct(c, &codec, Ablation::Full, 3.0, &cfg)?,
                reconstruct(c, &codec, Ablation::Full, 5.0, &cfg)?,
                reconstruct(c, &codec, Ablation::Full, 0.0, &off)?,
            ])
        })
        .collect::<Result<_>>()?;
    let col = |j: usize| runs.iter().map(|r| r[j].clone()).collect::<Vec<_>>();
    Ok(SuiteRuns {
        vision: col(0),
        no_touch: col(1),
        full: col(2),
        full3: col(3),
        full5: col(4),
        unguided: col(5),
    })
}

/// Relative error of a derivative pair; two values below 1e-12 agree.
fn rel_err(fd: f64, an: f64) -> f64 {
    let m = fd.abs().max(an.abs());
    if m < 1e-12 {
        0.0
    } else {
        (fd - an).abs() / m
    }
}

/// Worst central-difference error of `f` over `count` random voxels that
/// pass `ok`.
fn grid_fd(f: impl Fn(&SdfGrid) -> f64, g: &SdfGrid, lv: &LossValue, count: usize, ok: impl Fn(usize) -> bool, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let (mut used, mut tries) = (0, 0);
    while used < count {
        tries += 1;
        if tries > 100 * g.len() {
            return Err(Error::InvalidArgument("too few admissible probe voxels".into()));
        }
        let i = rng.random_range(0..g.len());
        if !ok(i) {
            continue;
        }
        let mut up = g.clone();
        up.values_mut()[i] += GRID_FD_STEP;
        let mut dn = g.clone();
        dn.values_mut()[i] -= GRID_FD_STEP;
        let fd = (f(&up) - f(&dn)) / (2.0 * GRID_FD_STEP);
        worst = worst.max(rel_err(fd, lv.grad[i]));
        used += 1;
    }
    Ok(worst)
}

fn noisy(g: &SdfGrid, amp: f64, seed: u64) -> Result<SdfGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SdfGrid::from_values(g.resolution(), g.values().iter().map(|x| x + rng.random_range(-amp..amp)).collect())
}

fn gaussian(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..k).map(|_| StandardNormal.sample(&mut *rng)).collect()
}

fn sphere(r: usize, c: Vec3, radius: f64) -> Result<SdfGrid> {
    analytic_sdf(&Solid::single(Posed::sphere(c, radius)), r)
}

fn gradient_suite() -> Result<(bool, String)> {
    let r = 16;
    let target = sphere(r, Vec3::zeros(), 0.5)?;
    let pred = noisy(&target, 0.03, 1)?;
    let away = |v: f64| v.abs() > 2.0 * GRID_FD_STEP + 1e-6;
    let mut errs: Vec<(&str, f64, f64)> = Vec::new();

    let lv = l1_loss(&pred, &target)?;
    let diff: Vec<f64> = pred.values().iter().zip(target.values()).map(|(a, b)| a - b).collect();
    errs.push(("L1", grid_fd(|g| l1_loss(g, &target).map_or(f64::NAN, |l| l.value), &pred, &lv, PROBES, |i| away(diff[i]), 2)?, 1e-4));

    let lv = eikonal_loss(&pred)?;
    errs.push(("eikonal", grid_fd(|g| eikonal_loss(g).map_or(f64::NAN, |l| l.value), &pred, &lv, PROBES, |i| lv.grad[i] != 0.0, 3)?, 1e-4));

    let lv = normal_loss(&pred, &target)?;
    errs.push(("normal", grid_fd(|g| normal_loss(g, &target).map_or(f64::NAN, |l| l.value), &pred, &lv, PROBES, |i| lv.grad[i] != 0.0, 4)?, 1e-4));

    let hand = SdfGrid::from_fn(r, |p| p.x + 0.1)?;
    let lv = ni_loss(&pred, &hand, 0.1)?;
    errs.push((
        "NI",
        grid_fd(|g| ni_loss(g, &hand, 0.1).map_or(f64::NAN, |l| l.value), &pred, &lv, PROBES, |i| hand.values()[i] < 0.0 && pred.values()[i] < -(2.0 * GRID_FD_STEP + 1e-6), 5)?,
        1e-4,
    ));

    // a golden-angle spiral over the target sphere
    let n = 200;
    let contacts = ContactSet::new(
        (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let a = i as f64 * 2.399_963;
                let rho = (1.0 - z * z).sqrt();
                Vec3::new(rho * a.cos(), rho * a.sin(), z) * 0.5
            })
            .collect(),
        vec![0; n],
    )?;
    let touch = build_touch_tensor(&contacts, r)?;
    let occ = touch.occupancy();
    let lv = contact_loss(&pred, occ)?;
    let ok_c = |i: usize| occ[i] != 0 && away(pred.values()[i]);
    errs.push(("C", grid_fd(|g| contact_loss(g, occ).map_or(f64::NAN, |l| l.value), &pred, &lv, PROBES, ok_c, 6)?, 1e-4));

    let lv = physics_energy(&pred, &hand, &touch, 0.7, 1.3, 0.1)?;
    let ok_e = |i: usize| (hand.values()[i] < 0.0 || occ[i] != 0) && away(pred.values()[i]);
    errs.push(("energy", grid_fd(|g| physics_energy(g, &hand, &touch, 0.7, 1.3, 0.1).map_or(f64::NAN, |l| l.value), &pred, &lv, PROBES, ok_e, 7)?, 1e-4));

    // KL in closed form against its analytic mean and log-variance gradients
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mu = gaussian(PROBES, &mut rng);
    let logvar: Vec<f64> = gaussian(PROBES, &mut rng).iter().map(|x| 0.5 * x).collect();
    let (_, gmu, glv) = kl_loss(&mu, &logvar)?;
    let kl = |m: &[f64], l: &[f64]| kl_loss(m, l).map_or(f64::NAN, |v| v.0);
    let mut kl_worst: f64 = 0.0;
    for i in 0..PROBES {
        let (mut up, mut dn) = (mu.clone(), mu.clone());
        up[i] += GRID_FD_STEP;
        dn[i] -= GRID_FD_STEP;
        kl_worst = kl_worst.max(rel_err((kl(&up, &logvar) - kl(&dn, &logvar)) / (2.0 * GRID_FD_STEP), gmu[i]));
        let (mut up, mut dn) = (logvar.clone(), logvar.clone());
        up[i] += GRID_FD_STEP;
        dn[i] -= GRID_FD_STEP;
        kl_worst = kl_worst.max(rel_err((kl(&mu, &up) - kl(&mu, &dn)) / (2.0 * GRID_FD_STEP), glv[i]));
    }
    errs.push(("KL", kl_worst, 1e-4));

    let (chain, guide) = latent_gradients(r, &hand, &touch)?;
    errs.push(("decoder chain", chain, 1e-4));
    errs.push(("guidance", guide, 1e-3));

    let pass = errs.iter().all(|(_, e, tol)| e <= tol);
    let detail = errs
        .iter()
        .map(|(n, e, _)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((pass, format!("max rel err: {detail}")))
}

/// Directional central differences of the latent energy and of the guidance
/// energy, at random latents and directions. Probes whose step could carry a
/// support voxel across a kink are redrawn.
fn latent_gradients(r: usize, hand: &SdfGrid, touch: &crate::touch::TouchTensor) -> Result<(f64, f64)> {
    let grids = (0..6)
        .map(|i| {
            let c = Vec3::new(0.1 * i as f64 - 0.25, 0.05 * i as f64, -0.1);
            sphere(r, c, 0.35 + 0.03 * i as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    let codec = LinearCodec::fit(&grids, 6)?;
    let dec = ScaledDecoder { codec: &codec, scale: 4.0 };
    let physics = PhysicsContext { hand, touch };
    let cfg = SamplerConfig {
        lambda_ni: 0.8,
        lambda_c: 1.2,
        ..SamplerConfig::default()
    };
    let base = dec.encode(&grids[2])?;
    let k = dec.latent_dim();
    let support: Vec<usize> = (0..hand.len())
        .filter(|i| hand.values()[*i] < 0.0 || touch.occupancy()[*i] != 0)
        .collect();
    let kink_safe = |z: &[f64], d: &[f64], step: f64| -> Result<bool> {
        let s0 = dec.decode_at(z, &support)?;
        let zd: Vec<f64> = z.iter().zip(d).map(|(a, b)| a + b).collect();
        let s1 = dec.decode_at(&zd, &support)?;
        Ok(s0.iter().zip(&s1).all(|(a, b)| a.abs() > (b - a).abs() * step * 2.0 + 1e-6))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut chain, mut guide) = (0.0f64, 0.0f64);
    let (mut done, mut tries) = (0, 0);
    while done < PROBES {
        tries += 1;
        if tries > 100 * PROBES {
            return Err(Error::InvalidArgument("too few kink-free latent probes".into()));
        }
        let z: Vec<f64> = base.iter().zip(gaussian(k, &mut rng)).map(|(a, n)| a + 0.05 * n).collect();
        let d = gaussian(k, &mut rng);
        if !kink_safe(&z, &d, LATENT_FD_STEP)? {
            continue;
        }
        let at = |s: f64| -> Vec<f64> { z.iter().zip(&d).map(|(a, b)| a + s * b).collect() };
        let e = latent_energy(&z, &dec, physics, &cfg)?;
        let fd = (latent_energy(&at(LATENT_FD_STEP), &dec, physics, &cfg)?.energy - latent_energy(&at(-LATENT_FD_STEP), &dec, physics, &cfg)?.energy)
            / (2.0 * LATENT_FD_STEP);
        let an: f64 = e.grad.iter().zip(&d).map(|(g, v)| g * v).sum();
        chain = chain.max(rel_err(fd, an));

        // the clean estimate of (x, v, t) is z for x = (1 - t) z + s(t) eps
        let t = rng.random_range(0.05..0.95);
        let eps = gaussian(k, &mut rng);
        let x = interpolate(&z, &eps, t, cfg.sigma_min)?;
        let v = target_velocity(&z, &eps, cfg.sigma_min)?;
        let est = clean_estimate(&x, &v, t, cfg.sigma_min)?;
        let gd = (1.0 - cfg.sigma_min) / clean_estimate_denominator(t, cfg.sigma_min);
        if !kink_safe(&est, &d.iter().map(|x| x * gd).collect::<Vec<_>>(), LATENT_FD_STEP)? {
            continue;
        }
        let xat = |s: f64| -> Vec<f64> { x.iter().zip(&d).map(|(a, b)| a + s * b).collect() };
        let g = guidance_gradient(&x, &v, t, &dec, physics, &cfg)?;
        let fd = (guidance_gradient(&xat(LATENT_FD_STEP), &v, t, &dec, physics, &cfg)?.energy
            - guidance_gradient(&xat(-LATENT_FD_STEP), &v, t, &dec, physics, &cfg)?.energy)
            / (2.0 * LATENT_FD_STEP);
        let an: f64 = g.grad.iter().zip(&d).map(|(g, v)| g * v).sum();
        guide = guide.max(rel_err(fd, an));
        done += 1;
    }
    Ok((chain, guide))
}

fn eikonal_fidelity() -> Result<(bool, String)> {
    let sphere_loss = eikonal_loss(&sphere(64, Vec3::zeros(), 0.5)?)?.value;
    let constant = eikonal_loss(&SdfGrid::constant(64, 0.3)?)?.value;
    Ok((
        sphere_loss <= 1e-3 && constant == 1.0,
        format!("sphere R64 {sphere_loss:.2e}, constant {constant}"),
    ))
}

fn random_primitive(rng: &mut ChaCha8Rng) -> Posed {
    let c = Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    match rng.random_range(0..3) {
        0 => Posed::sphere(c, rng.random_range(0.25..0.5)),
        1 => Posed::aabb(c, Vec3::new(rng.random_range(0.15..0.45), rng.random_range(0.15..0.45), rng.random_range(0.15..0.45))),
        _ => {
            let d = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
            Posed::capsule(c - d, c + d, rng.random_range(0.1..0.25))
        }
    }
}

fn augmentation_oracle() -> Result<(bool, String)> {
    let r = 32;
    let h = 2.0 / r as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    let mut kinds = [0usize; 3];
    for _ in 0..20 {
        let part = random_primitive(&mut rng);
        kinds[match part.primitive {
            Primitive::Sphere { .. } => 0,
            Primitive::Box { .. } => 1,
            _ => 2,
        }] += 1;
        let solid = Solid::single(part);
        let grid = analytic_sdf(&solid, r)?;
        let rot: Matrix3<f64> = random_rotation(&mut rng);
        let xf = sample_augmentation(&mut rng, &grid, &rot, 2)?;
        let out = augment_sdf(&grid, &xf)?;
        let expect = analytic_sdf(&solid.transformed(&xf), r)?;
        worst = worst.max(out.max_abs_diff(&expect)?);
    }
    Ok((
        worst <= 1.5 * h,
        format!("20 transforms ({} spheres, {} boxes, {} capsules), max err {:.3}h", kinds[0], kinds[1], kinds[2], worst / h),
    ))
}

fn flow_consistency() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut deriv, mut round): (f64, f64) = (0.0, 0.0);
    for _ in 0..200 {
        let k = 8;
        let x0: Vec<f64> = gaussian(k, &mut rng).iter().map(|x| 3.0 * x).collect();
        let eps = gaussian(k, &mut rng);
        let sigma = rng.random_range(0.0..0.1);
        let t = rng.random_range(0.01..0.99);
        let dt = 1e-6;
        let up = interpolate(&x0, &eps, t + dt, sigma)?;
        let dn = interpolate(&x0, &eps, t - dt, sigma)?;
        let v = target_velocity(&x0, &eps, sigma)?;
        for i in 0..k {
            deriv = deriv.max(((up[i] - dn[i]) / (2.0 * dt) - v[i]).abs());
        }
        let t = rng.random_range(0.0..=1.0);
        let xt = interpolate(&x0, &eps, t, sigma)?;
        let back = clean_estimate(&xt, &v, t, sigma)?;
        round = round.max(back.distance(&LatentCode::new(x0)?));
    }
    Ok((
        deriv <= 1e-8 && round <= 1e-10,
        format!("derivative identity {deriv:.1e}, clean-estimate round trip {round:.1e} over 200 draws"),
    ))
}

fn mixture_sampling() -> Result<(bool, String)> {
    let grids = (0..4)
        .map(|i| sphere(8, Vec3::new(0.1 * i as f64, 0.0, 0.0), 0.3 + 0.1 * i as f64))
        .collect::<Result<Vec<_>>>()?;
    let codec = LinearCodec::fit(&grids, 3)?;
    let cfg = |seed| SamplerConfig {
        steps: 100,
        t_end: 0.0,
        sigma_min: 0.0,
        guidance_enabled: false,
        seed,
        ..SamplerConfig::default()
    };
    let entry = LatentCode::new(vec![0.8, -1.1, 0.4])?;
    let single = OracleField::new(ShapeLibrary::uniform(vec![entry.clone()], 0.0)?);
    let worst = (0..100u64)
        .into_par_iter()
        .map(|seed| Ok(sample(&single, &[], &codec, None, &cfg(seed))?.latent.distance(&entry)))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);

    let entries = vec![
        LatentCode::new(vec![2.0, 0.0, 0.0])?,
        LatentCode::new(vec![-1.0, 1.7, 0.0])?,
        LatentCode::new(vec![-1.0, -1.7, 0.0])?,
    ];
    let lib = ShapeLibrary::uniform(entries, 0.0)?;
    let field = OracleField::new(lib.clone());
    let draws = 300u64;
    let landed = (1000..1000 + draws)
        .into_par_iter()
        .map(|seed| Ok(lib.nearest(&sample(&field, &[], &codec, None, &cfg(seed))?.latent).0))
        .collect::<Result<Vec<usize>>>()?;
    let mut counts = [0usize; 3];
    landed.iter().for_each(|i| counts[*i] += 1);
    let expect = draws as f64 / 3.0;
    let stat: f64 = counts.iter().map(|c| (*c as f64 - expect).powi(2) / expect).sum();
    let p = 1.0 - ChiSquared::new(2.0).map_err(|e| Error::InvalidArgument(e.to_string()))?.cdf(stat);
    Ok((
        worst <= 1e-3 && p > 0.01,
        format!("single entry max distance {worst:.1e} over 100; three entries {counts:?}, chi2 {stat:.2}, p {p:.3}"),
    ))
}

fn lumpy(offset: Vec3, r: usize) -> Result<SdfGrid> {
    analytic_sdf(
        &Solid::new(vec![
            Posed::aabb(offset, Vec3::new(0.45, 0.3, 0.2)),
            Posed::sphere(offset + Vec3::new(0.35, 0.25, 0.1), 0.2),
        ]),
        r,
    )
}

fn brute_chamfer(p: &[Vec3], q: &[Vec3]) -> f64 {
    let one = |a: &[Vec3], b: &[Vec3]| {
        a.iter()
            .map(|x| b.iter().map(|y| (x - y).norm_squared()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / a.len() as f64
    };
    0.5 * (one(p, q) + one(q, p))
}

fn brute_emd(p: &[Vec3], q: &[Vec3]) -> f64 {
    fn go(i: usize, used: &mut Vec<bool>, p: &[Vec3], q: &[Vec3]) -> f64 {
        if i == p.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..q.len() {
            if !used[j] {
                used[j] = true;
                best = best.min((p[i] - q[j]).norm() + go(i + 1, used, p, q));
                used[j] = false;
            }
        }
        best
    }
    go(0, &mut vec![false; q.len()], p, q) / p.len() as f64
}

fn metric_oracles() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut cloud = |n: usize| -> Vec<Vec3> { (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect() };
    let mut emd_err: f64 = 0.0;
    for n in 1..=8 {
        for _ in 0..3 {
            let (p, q) = (cloud(n), cloud(n));
            emd_err = emd_err.max((emd_exact(&p, &q)? - brute_emd(&p, &q)).abs());
        }
    }
    let mut cd_err: f64 = 0.0;
    for n in [1, 7, 100, 500] {
        let (p, q) = (cloud(n), cloud(n + 13));
        cd_err = cd_err.max((chamfer(&p, &q)? - brute_chamfer(&p, &q)).abs());
    }
    let g = lumpy(Vec3::zeros(), 32)?;
    let cfg = EvalConfig {
        surface_points: 4000,
        ..EvalConfig::default()
    };
    let m = evaluate_pair(&g, &g, &cfg)?.ok_or_else(|| Error::Empty("self prediction has no surface".into()))?;
    let ideal = [m.cd, 1.0 - m.nc, 1.0 - m.fscore, 1.0 - m.voxel_iou, m.emd, 1.0 - m.iou3d, m.icp_rot, m.adds, 1.0 - m.adds_at];
    let self_err = ideal.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let nested = voxel_iou(&sphere(64, Vec3::zeros(), 0.25)?, &sphere(64, Vec3::zeros(), 0.5)?)?;
    // surface sampling also feeds the evaluation; check it is reproducible
    let mesh = extract_surface(&g)?;
    let same = sample_surface(&mesh, 500, 3)?.points == sample_surface(&mesh, 500, 3)?.points;
    let pass = emd_err <= 1e-12 && cd_err <= 1e-12 && self_err <= 1e-6 && (nested - 0.125).abs() <= 0.02 && same;
    Ok((
        pass,
        format!("EMD vs brute {emd_err:.1e}, CD vs brute {cd_err:.1e}, self-value gap {self_err:.1e}, nested IoU {nested:.4}"),
    ))
}

fn scene_validity() -> Result<(bool, String)> {
    let cfg = SceneConfig::default();
    let failed: Vec<u64> = (0..VALIDITY_SCENES as u64)
        .into_par_iter()
        .map(|i| {
            let scene = build_scene(SUITE_SEED, i, &cfg)?;
            Ok((i, check_scene(&scene, 2)?.all()))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|(_, ok)| !ok)
        .map(|(i, _)| i)
        .collect();
    Ok((
        failed.is_empty(),
        format!("{}/{} scenes valid{}", VALIDITY_SCENES - failed.len(), VALIDITY_SCENES, if failed.is_empty() { String::new() } else { format!(", failing {failed:?}") }),
    ))
}
