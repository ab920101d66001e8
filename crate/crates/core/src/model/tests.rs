use proptest::prelude::*;
use rand::Rng;

use super::*;

fn rand_image(n: usize, size: usize, seed: u64) -> ImageBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageBatch::new(Tensor::uniform(&[n, 3, size, size], -1.0, 1.0, &mut rng)).unwrap()
}

fn box_mask(n: usize, size: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> MaskBatch {
    let mut t = Tensor::zeros(&[n, 1, size, size]);
    for s in 0..n {
        for y in y0..y1 {
            for x in x0..x1 {
                t.set4(s, 0, y, x, 1.0);
            }
        }
    }
    MaskBatch::new(t).unwrap()
}

fn reduced(flags: impl FnOnce(&mut ModelConfig)) -> UstModel {
    let mut c = ModelConfig::reduced();
    flags(&mut c);
    UstModel::new(c, 7).unwrap()
}

/// Population mean and std of each channel plane.
fn plane_stats(t: &Tensor) -> Vec<(f64, f64)> {
    let (n, c, h, w) = t.dims4();
    t.data()[..n * c * h * w]
        .chunks(h * w)
        .map(|p| {
            let m = p.iter().sum::<f64>() / p.len() as f64;
            let v = p.iter().map(|x| (x - m).powi(2)).sum::<f64>() / p.len() as f64;
            (m, v.sqrt())
        })
        .collect()
}

proptest! {
    #[test]
    fn adain_sets_channel_statistics(
        seed in any::<u64>(),
        gamma in prop::collection::vec(-3.0f64..3.0, 3),
        beta in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = rng.random_range(0.1..5.0);
        let z = Tensor::randn(&[2, 3, 6, 5], scale, &mut rng);
        let out = adain(&z, &gamma, &beta, 1e-12).unwrap();
        for (i, (m, s)) in plane_stats(&out).into_iter().enumerate() {
            prop_assert!((m - beta[i % 3]).abs() < 1e-4);
            prop_assert!((s - gamma[i % 3].abs()).abs() < 1e-3);
        }
    }
}

#[test]
fn adain_rejects_mismatched_parameters() {
    let z = Tensor::zeros(&[1, 3, 2, 2]);
    assert!(adain(&z, &[1.0; 2], &[0.0; 3], 1e-5).is_err());
    assert!(adain(&Tensor::zeros(&[3, 2]), &[1.0; 3], &[0.0; 3], 1e-5).is_err());
}

#[test]
fn code_shapes_follow_configuration() {
    let m = reduced(|_| {});
    let x = rand_image(2, 8, 1);
    let mask = box_mask(2, 8, 2, 6, 1, 7);
    let c = m.encode_content_a(&x, &mask).unwrap();
    assert_eq!(c.0.shape(), &[2, 8, 4, 4]);
    assert_eq!(m.encode_content_b(&x).unwrap().0.shape(), &[2, 8, 4, 4]);
    assert_eq!(m.encode_style(&x).unwrap().0.shape(), &[2, 8]);
    let out = m.take_off(&x, &mask).unwrap();
    assert_eq!(out.tensor().shape(), &[2, 3, 8, 8]);
    let ctx = masked_context(&x, &mask).unwrap();
    let t = m.try_on(&x, &mask, &ctx).unwrap();
    assert_eq!(t.tensor().shape(), &[2, 3, 8, 8]);
    assert!(t.tensor().data().iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn empty_mask_and_wrong_size_are_rejected() {
    let m = reduced(|_| {});
    let x = rand_image(1, 8, 1);
    let empty = MaskBatch::new_allow_empty(Tensor::zeros(&[1, 1, 8, 8])).unwrap();
    assert!(matches!(m.take_off(&x, &empty), Err(UstError::EmptyMask(_))));
    assert!(m.encode_content_b(&rand_image(1, 16, 1)).is_err());
}

#[test]
fn adain_params_carry_their_decoder() {
    let m = reduced(|_| {});
    let x = rand_image(1, 8, 2);
    let s = m.encode_style(&x).unwrap();
    let a = m.style_to_adain_params(&s, DecoderId::TryOn).unwrap();
    let c = m.encode_content_b(&x).unwrap();
    assert!(matches!(m.decode_take_off(&c, &a), Err(UstError::WrongDecoder { .. })));
    let b = m.style_to_adain_params(&s, DecoderId::TakeOff).unwrap();
    assert!(m.decode_take_off(&c, &b).is_ok());
    assert_eq!(a.total_len(), m.config().adain_budget());
}

#[test]
fn unshared_style_encoders_have_separate_weights() {
    let shared = reduced(|_| {});
    let split = reduced(|c| c.use_shared_style_encoder = false);
    assert!(shared.params().names().any(|n| n.starts_with("enc_style.")));
    assert!(split.params().names().any(|n| n.starts_with("enc_style_a.")));
    assert!(split.params().names().any(|n| n.starts_with("enc_style_b.")));
}

#[test]
fn fit_in_canvas_places_features_in_the_mask_box() {
    let m = reduced(|_| {});
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = Tensor::uniform(&[1, 2, 8, 8], 0.5, 1.0, &mut rng);
    let mask = box_mask(1, 8, 2, 6, 3, 7);
    let canvas = m.fit_in_canvas(&f, &mask).unwrap();
    for y in 0..8 {
        for x in 0..8 {
            let inside = (2..6).contains(&y) && (3..7).contains(&x);
            let v = canvas.at4(0, 0, y, x);
            assert_eq!(v != 0.0, inside, "pixel ({y}, {x}) = {v}");
        }
    }
}

#[test]
fn try_on_without_fit_in_ignores_context() {
    let m = reduced(|c| c.use_fit_in = false);
    let x = rand_image(1, 8, 4);
    let mask = box_mask(1, 8, 1, 7, 2, 6);
    let ctx1 = rand_image(1, 8, 5);
    let ctx2 = rand_image(1, 8, 6);
    let a = m.try_on(&x, &mask, &ctx1).unwrap();
    let b = m.try_on(&x, &mask, &ctx2).unwrap();
    assert!(a.tensor().max_abs_diff(b.tensor()) <= 1e-6);
    assert!(m.fit_in(&x.tensor().clone(), &mask, &ctx1).is_err());
}

#[test]
fn try_on_with_fit_in_reads_context() {
    let m = reduced(|_| {});
    let x = rand_image(1, 8, 4);
    let mask = box_mask(1, 8, 1, 7, 2, 6);
    let a = m.try_on(&x, &mask, &rand_image(1, 8, 5)).unwrap();
    let b = m.try_on(&x, &mask, &rand_image(1, 8, 6)).unwrap();
    assert!(a.tensor().max_abs_diff(b.tensor()) > 1e-6);
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let m = reduced(|_| {});
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ust");
    m.save(&p).unwrap();
    let back = UstModel::load(&p).unwrap();
    assert_eq!(back, m);
    let x = rand_image(1, 8, 9);
    let mask = box_mask(1, 8, 2, 6, 2, 6);
    assert_eq!(m.take_off(&x, &mask).unwrap(), back.take_off(&x, &mask).unwrap());
}

#[test]
fn initialisation_is_deterministic_per_seed() {
    let a = UstModel::new(ModelConfig::reduced(), 11).unwrap();
    let b = UstModel::new(ModelConfig::reduced(), 11).unwrap();
    let c = UstModel::new(ModelConfig::reduced(), 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
