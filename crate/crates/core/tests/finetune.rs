use touchsdf::flow::{train_denoiser, FlowConfig, LatentCode, LatentDecoder, LinearCodec, PhysicsTarget, ScaledDecoder, ShapeLibrary, TrainExample, VelocityField};
use touchsdf::grid::{analytic_sdf, Posed, Solid};
use touchsdf::objectives::{ni_loss, LossWeights};
use touchsdf::sampler::{sample, SamplerConfig};
use touchsdf::{SdfGrid, Vec3};

const R: usize = 16;

fn sphere(z: f64, r: f64) -> SdfGrid {
    analytic_sdf(&Solid::single(Posed::sphere(Vec3::new(0.0, 0.0, z), r)), R).unwrap()
}

/// Mean final L_NI over seeded unguided samples of a trained field.
fn sampled_ni(field: &dyn VelocityField, codec: &dyn LatentDecoder, hand: &SdfGrid, seeds: u64) -> f64 {
    let mut total = 0.0;
    for seed in 0..seeds {
        let cfg = SamplerConfig {
            guidance_enabled: false,
            seed,
            ..SamplerConfig::default()
        };
        let out = sample(field, &[0.0], codec, None, &cfg).unwrap();
        total += ni_loss(&out.grid, hand, 0.1).unwrap().value;
    }
    total / seeds as f64
}

#[test]
fn finetuning_lowers_sampled_penetration() {
    // one library shape clear of the hand, one pushed into it
    let clear = sphere(-0.1, 0.4);
    let pushed = sphere(0.3, 0.4);
    let hand = sphere(0.7, 0.25);
    let codec = LinearCodec::fit(&[clear.clone(), pushed.clone(), sphere(-0.3, 0.3)], 2).unwrap();
    // unit-scale latents keep the flow loss from swamping the physics term
    let dec = ScaledDecoder {
        codec: &codec,
        scale: 16.0,
    };
    let entries: Vec<LatentCode> = [&clear, &pushed].iter().map(|g| dec.encode(g).unwrap()).collect();
    let example = TrainExample {
        library: ShapeLibrary::uniform(entries, 1e-3).unwrap(),
        cond: vec![0.0],
        physics: Some(PhysicsTarget {
            hand: hand.clone(),
            contacts: vec![0; R * R * R],
        }),
    };
    let weights = LossWeights {
        ni_warmup_steps: 0,
        lambda_c: 0.0,
        ..LossWeights::default()
    };
    let base = FlowConfig {
        hidden: 32,
        batch_size: 16,
        pretrain_steps: 1500,
        finetune_steps: 0,
        seed: 3,
        ..FlowConfig::default()
    };
    let (pre, _) = train_denoiser(std::slice::from_ref(&example), Some(&dec), &base, &weights).unwrap();
    let tuned_cfg = FlowConfig {
        finetune_steps: 400,
        ..base
    };
    let (tuned, log) = train_denoiser(std::slice::from_ref(&example), Some(&dec), &tuned_cfg, &weights).unwrap();
    assert_eq!(log.len(), 1900);
    assert!(log[1500..].iter().any(|e| e.ni > 0.0));
    let (a, b) = (sampled_ni(&pre, &dec, &hand, 40), sampled_ni(&tuned, &dec, &hand, 40));
    assert!(a > 0.0);
    assert!(b < a, "finetuned {b} vs pretrained {a}");
}
