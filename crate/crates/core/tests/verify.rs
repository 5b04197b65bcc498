use gmk_core::attacks::flip_signs;
use gmk_core::data_io::{generate_shapes, SyntheticShapesSpec};
use gmk_core::genmodels::*;
use gmk_core::img::Region;
use gmk_core::losses::{ObjectiveSpec, SignLossConfig};
use gmk_core::signature::{encode_text, BitSignature};
use gmk_core::triggers::{LatentTriggerSpec, TriggerSpec, WatermarkAsset};
use gmk_core::verify::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn random_checkpoints_give_chance_level_ber() {
    let model = GanModel::new(GeneratorConfig::default(), DiscriminatorConfig::scaled(16), 0).unwrap();
    let base = model.to_checkpoint("random");
    let placement = base.meta.placement.clone();
    assert_eq!(placement.total_capacity_bits(), 448);
    let mut rng = ChaCha8Rng::seed_from_u64(448);
    let mut bers = Vec::new();
    for _ in 0..100 {
        let mut ckpt = base.clone();
        for layer in &placement.layer_names {
            for g in ckpt.gammas_mut(layer).unwrap() {
                *g = rng.random_range(-1.0f32..1.0);
            }
        }
        let bits = BitSignature::from_bits((0..448).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect()).unwrap();
        let w = verify_whitebox(&ckpt, &SignLossConfig::new(bits, placement.clone()).unwrap());
        assert!(!w.verdict);
        bers.push(w.ber.unwrap());
    }
    assert!(bers.iter().all(|b| (0.4..=0.6).contains(b)), "{bers:?}");
    let mean = bers.iter().sum::<f64>() / bers.len() as f64;
    assert!((mean - 0.5).abs() < 0.02, "{mean}");
}

fn keys() -> OwnerKeys {
    OwnerKeys {
        trigger: TriggerSpec::Latent(LatentTriggerSpec::generate(128, 5, -10.0, 1).unwrap()),
        watermark: WatermarkAsset::builtin("ring", Region::top_left(24, 24)).unwrap(),
        signature: SignLossConfig::new(encode_text("EXAMPLE").unwrap(), GeneratorConfig::desk().placement()).unwrap(),
    }
}

fn train(objective: ObjectiveSpec, seed: u64) -> ModelCheckpoint {
    let k = keys();
    let data = generate_shapes(&SyntheticShapesSpec { n_samples: 256, seed, ..Default::default() }).unwrap();
    let mut cfg = TrainConfig::new(30, seed);
    cfg.batch_size = 16;
    cfg.objective = objective;
    if objective.use_sign_loss {
        cfg.signature = Some(k.signature.clone());
    }
    if objective.lambda > 0.0 {
        cfg.trigger = Some(k.trigger.clone());
        cfg.watermark = Some(k.watermark.clone());
    }
    let mut m = GanModel::new(GeneratorConfig::desk(), DiscriminatorConfig::desk(), seed).unwrap();
    train_gan(&mut m, &data, &cfg, &mut Vec::new()).unwrap();
    m.to_checkpoint("verify-test")
}

#[test]
fn stranger_model_is_negative_and_owner_signature_survives_in_own_model() {
    let k = keys();
    let cfg = BlackboxConfig { n_queries: 32, ..Default::default() };

    let stranger = train(ObjectiveSpec::baseline(), 11);
    let mut g = generator_from_checkpoint(&stranger).unwrap();
    let r = full_report(&mut g, Some(&stranger), &k, &cfg);
    let bb = r.blackbox.as_ref().unwrap();
    assert!(!bb.verdict, "{}", r.summary());
    assert!(bb.separation < SEPARATION_MARGIN);
    assert!(!r.whitebox.as_ref().unwrap().verdict);
    assert_eq!(r.exit_code(), 4);

    let own = train(ObjectiveSpec { lambda: 0.0, ..ObjectiveSpec::default() }, 12);
    let mut g = generator_from_checkpoint(&own).unwrap();
    let r = full_report(&mut g, Some(&own), &k, &cfg);
    let wb = r.whitebox.as_ref().unwrap();
    assert_eq!(wb.extracted_text.as_deref(), Some("EXAMPLE"));
    assert_eq!(r.exit_code(), 3);

    let (flipped, idx) = flip_signs(&own, 1.0, 56, 0).unwrap();
    assert_eq!(idx.len(), 56);
    assert_eq!(verify_whitebox(&flipped, &k.signature).ber, Some(1.0));
}
