use touchsdf::flow::{LinearCodec, OracleField, ShapeLibrary};
use touchsdf::grid::{analytic_sdf, extract_surface, Posed, Solid};
use touchsdf::metrics::{chamfer, sample_surface};
use touchsdf::objectives::ni_loss;
use touchsdf::pipeline::{build_case, fit_suite_codec, reconstruct, Ablation, ReconConfig};
use touchsdf::sampler::{sample, SamplerConfig};
use touchsdf::scene::SceneConfig;
use touchsdf::Vec3;

#[test]
fn single_entry_library_lands_on_its_surface() {
    let r = 16;
    let h = 2.0 / r as f64;
    let shape = analytic_sdf(
        &Solid::new(vec![
            Posed::sphere(Vec3::new(0.1, 0.0, 0.0), 0.35),
            Posed::aabb(Vec3::new(-0.2, 0.1, 0.0), Vec3::new(0.3, 0.2, 0.25)),
        ]),
        r,
    )
    .unwrap();
    let other = analytic_sdf(&Solid::single(Posed::sphere(Vec3::zeros(), 0.5)), r).unwrap();
    let codec = LinearCodec::fit(&[shape.clone(), other], 2).unwrap();
    let lib = ShapeLibrary::uniform(vec![codec.encode(&shape).unwrap()], 1e-3).unwrap();
    let field = OracleField::new(lib);
    let target = sample_surface(&extract_surface(&shape).unwrap(), 3000, 1).unwrap();
    for seed in 0..5 {
        let cfg = SamplerConfig {
            steps: 200,
            guidance_enabled: false,
            seed,
            ..SamplerConfig::default()
        };
        let out = sample(&field, &[], &codec, None, &cfg).unwrap();
        let got = sample_surface(&extract_surface(&out.grid).unwrap(), 3000, 1).unwrap();
        let cd = chamfer(&got.points, &target.points).unwrap();
        assert!(cd <= (2.0 * h).powi(2), "seed {seed}: {cd}");
    }
}

#[test]
fn guidance_lowers_penetration_on_a_penetrating_scene() {
    let cfg = ReconConfig::default();
    let scene_cfg = SceneConfig::default();
    let cases: Vec<_> = (0..12).map(|i| build_case(1, i, &scene_cfg, &cfg).unwrap()).collect();
    let codec = fit_suite_codec(&cases).unwrap();
    let mut unguided = cfg.clone();
    unguided.sampler.guidance_enabled = false;
    let case = cases
        .iter()
        .find(|c| reconstruct(c, &codec, Ablation::Full, 0.0, &unguided).unwrap().ni > 0.0)
        .expect("suite has a penetrating unguided sample");
    let off = reconstruct(case, &codec, Ablation::Full, 0.0, &unguided).unwrap();
    let on = reconstruct(case, &codec, Ablation::Full, 0.0, &cfg).unwrap();
    let ni = |g| ni_loss(g, &case.scene.hand_sdf, cfg.sampler.tau).unwrap().value;
    assert_eq!(ni(&off.output.grid), off.ni);
    assert!(on.ni < off.ni, "guided {} vs unguided {}", on.ni, off.ni);
}
