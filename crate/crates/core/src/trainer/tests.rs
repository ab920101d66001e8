use rand::Rng;

use super::*;
use crate::losses::IdentityExtractor;
use crate::model::{ImageBatch, MaskBatch};

fn tiny_batch(seed: u64) -> UnpairedBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = Tensor::zeros(&[1, 1, 8, 8]);
    let (y0, x0) = (rng.random_range(0..3), rng.random_range(0..3));
    for y in y0..y0 + 5 {
        for x in x0..x0 + 4 {
            mask.set4(0, 0, y, x, 1.0);
        }
    }
    UnpairedBatch {
        x_a: ImageBatch::new(Tensor::uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng)).unwrap(),
        m_a: MaskBatch::new(mask).unwrap(),
        x_b: ImageBatch::new(Tensor::uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng)).unwrap(),
    }
}

fn tiny_state(seed: u64) -> TrainState {
    TrainState::new(UstModel::new(ModelConfig::reduced(), seed).unwrap(), seed)
}

fn tiny_config() -> TrainerConfig {
    TrainerConfig {
        learning_rate: 1e-3,
        ..TrainerConfig::default()
    }
}

#[test]
fn validation_rejects_bad_settings() {
    assert!(TrainerConfig::default().validate().is_ok());
    assert!(TrainerConfig::desk().validate().is_ok());
    for bad in [
        TrainerConfig {
            batch_size: 0,
            ..TrainerConfig::default()
        },
        TrainerConfig {
            adam_beta1: 1.0,
            ..TrainerConfig::default()
        },
        TrainerConfig {
            learning_rate: f64::NAN,
            ..TrainerConfig::default()
        },
        TrainerConfig {
            checkpoint_every: 0,
            ..TrainerConfig::default()
        },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn defaults_keep_the_reference_learning_rate() {
    assert_eq!(TrainerConfig::default().learning_rate, 2e-6);
    assert_eq!(TrainerConfig::desk().learning_rate, 3e-4);
    assert_eq!(TrainerConfig::default().adam_beta1, 0.5);
}

#[test]
fn variants_toggle_exactly_one_flag() {
    let base = TrainerConfig::default();
    let flags = |c: &TrainerConfig| {
        [
            c.use_perceptual_loss,
            c.use_shared_style_encoder,
            c.use_mask_attention,
            c.use_fit_in,
        ]
    };
    for (i, name) in VARIANTS.iter().enumerate() {
        let c = variant_config(&base, name).unwrap();
        let off = flags(&c).iter().filter(|f| !**f).count();
        if i < 4 {
            assert_eq!(off, 1, "{name}");
            assert!(!flags(&c)[i], "{name}");
        } else {
            assert_eq!(off, 0);
        }
    }
    assert!(variant_config(&base, "nope").is_err());
    let c = variant_config(&base, "W/O P. Loss").unwrap();
    assert_eq!(c.effective_weights().lambda_p, 0.0);
}

#[test]
fn checkpoint_count_and_names() {
    let c = TrainerConfig {
        total_steps: 2500,
        checkpoint_every: 1000,
        ..TrainerConfig::default()
    };
    assert_eq!(c.expected_checkpoints(), 3);
    assert_eq!(checkpoint_name(42), "ckpt_000042.ust");
}

#[test]
fn train_step_is_finite_and_deterministic() {
    let cfg = tiny_config();
    let phi = IdentityExtractor;
    let mut a = tiny_state(1);
    let mut b = tiny_state(1);
    for s in 0..3 {
        let batch = tiny_batch(s);
        let ra = train_step(&mut a, &batch, &cfg, &phi).unwrap();
        let rb = train_step(&mut b, &batch, &cfg, &phi).unwrap();
        assert_eq!(ra, rb);
        assert!(ra.first_non_finite().is_none());
        assert!((ra.total - ra.recompose(&cfg.effective_weights())).abs() <= 1e-9 * ra.total.abs());
    }
    assert_eq!(a, b);
    assert_eq!(a.step, 3);
}

#[test]
fn step_updates_generator_and_discriminator_parameters() {
    let cfg = tiny_config();
    let before = tiny_state(2);
    let mut after = before.clone();
    train_step(&mut after, &tiny_batch(0), &cfg, &IdentityExtractor).unwrap();
    for prefix in ["enc_content_a", "gen_b", "mlp", "dis_a", "dis_b"] {
        let changed = before
            .model
            .params()
            .names_with_prefix(prefix)
            .any(|n| before.model.params().get(n) != after.model.params().get(n));
        assert!(changed, "no `{prefix}` parameter moved");
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_fixed() {
    let cfg = TrainerConfig {
        learning_rate: 0.0,
        ..TrainerConfig::default()
    };
    let before = tiny_state(3);
    let mut after = before.clone();
    train_step(&mut after, &tiny_batch(1), &cfg, &IdentityExtractor).unwrap();
    assert_eq!(before.model.params(), after.model.params());
}

#[test]
fn state_roundtrip_preserves_optimizer_moments() {
    let cfg = tiny_config();
    let mut st = tiny_state(4);
    train_step(&mut st, &tiny_batch(2), &cfg, &IdentityExtractor).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.ust");
    st.save(&cfg, &p).unwrap();
    let (back, back_cfg) = TrainState::load(&p).unwrap();
    assert_eq!(back, st);
    assert_eq!(back_cfg, cfg);
}

#[test]
fn non_finite_input_is_reported_by_term() {
    let cfg = TrainerConfig {
        learning_rate: 1e300,
        ..TrainerConfig::default()
    };
    let mut st = tiny_state(5);
    let mut last = Ok(LossReport::default());
    for s in 0..4 {
        last = train_step(&mut st, &tiny_batch(s), &cfg, &IdentityExtractor);
        if last.is_err() {
            break;
        }
    }
    assert!(matches!(last, Err(UstError::NonFiniteLoss { .. }) | Err(UstError::NonFinite(_))));
}

#[test]
fn generator_objective_matches_the_training_report() {
    let cfg = TrainerConfig {
        learning_rate: 0.0,
        ..TrainerConfig::default()
    };
    let st = tiny_state(6);
    let batch = tiny_batch(3);
    let w = cfg.effective_weights();
    let phi = IdentityExtractor;
    let mut g = Graph::inference();
    let obj = generator_objective_g(&mut g, &st.model, &batch, &w, Some(&phi)).unwrap();
    let direct = obj.report(&g);
    let mut moved = st.clone();
    let r = train_step(&mut moved, &batch, &cfg, &phi).unwrap();
    assert_eq!(direct.total, r.total);
    assert_eq!(direct.sr_a, r.sr_a);
}
