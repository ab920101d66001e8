use std::collections::HashMap;

use super::*;

fn small_spec() -> SynthSpec {
    SynthSpec {
        image_size: 32,
        n_items: 10,
        views_per_item: 2,
        ..SynthSpec::default()
    }
}

#[test]
fn generate_writes_a_loadable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let m = generate(&spec, dir.path()).unwrap();
    assert_eq!(m.samples.len(), 10 * 3);
    let back = load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(back.samples, m.samples);
    assert_eq!(back.spec_digest, spec.digest());
    let (logged, items) = read_item_log(dir.path()).unwrap();
    assert_eq!(logged, spec);
    assert_eq!(items, item_params(&spec));
}

#[test]
fn split_is_by_item_with_the_requested_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate(&small_spec(), dir.path()).unwrap();
    let mut split_of: HashMap<&str, Split> = HashMap::new();
    for s in &m.samples {
        let prev = split_of.insert(&s.pair_id, s.split);
        assert!(prev.is_none() || prev == Some(s.split), "item {} spans both splits", s.pair_id);
    }
    assert_eq!(split_of.values().filter(|s| **s == Split::Test).count(), 2);
    assert_eq!(m.count(Domain::B, Split::Test), 2);
    assert_eq!(m.count(Domain::A, Split::Test), 4);
}

#[test]
fn generation_is_deterministic() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(&small_spec(), d1.path()).unwrap();
    generate(&small_spec(), d2.path()).unwrap();
    for rel in ["domainB/item0003.png", "domainA/item0007_v1.png", "domainA_masks/item0001_v0.png"] {
        assert_eq!(fs::read(d1.path().join(rel)).unwrap(), fs::read(d2.path().join(rel)).unwrap());
    }
}

#[test]
fn masks_are_binary_and_non_empty() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate(&small_spec(), dir.path()).unwrap();
    let split = LoadedSplit::load(&m, None).unwrap();
    for s in &split.a {
        let mask = s.mask.as_ref().unwrap();
        assert!(mask.data().iter().all(|v| *v == 0.0 || *v == 1.0));
        assert!(mask.sum() > 0.0);
        assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn load_rejects_missing_files_and_broken_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate(&small_spec(), dir.path()).unwrap();
    fs::remove_file(dir.path().join("domainA_masks/item0002_v0.png")).unwrap();
    assert!(load(&dir.path().join(MANIFEST_FILE)).is_err());

    let dir2 = tempfile::tempdir().unwrap();
    let mut m2 = generate(&small_spec(), dir2.path()).unwrap();
    m2.samples.retain(|s| !(s.domain == Domain::B && s.pair_id == "item0004"));
    m2.write().unwrap();
    assert!(load(&dir2.path().join(MANIFEST_FILE)).is_err());
    let _ = m;
}

#[test]
fn spec_validation() {
    let bad = SynthSpec {
        n_items: 0,
        ..SynthSpec::default()
    };
    assert!(bad.validate().is_err());
    let bad = SynthSpec {
        scale_range: (0.9, 0.5),
        ..SynthSpec::default()
    };
    assert!(bad.validate().is_err());
    assert!(SynthSpec::default().validate().is_ok());
}

#[test]
fn unpaired_draws_are_reproducible_and_in_range() {
    let mut r1 = ChaCha8Rng::seed_from_u64(5);
    let mut r2 = ChaCha8Rng::seed_from_u64(5);
    let a = draw_unpaired(30, 10, 16, &mut r1);
    assert_eq!(a, draw_unpaired(30, 10, 16, &mut r2));
    assert!(a.a.iter().all(|&i| i < 30) && a.b.iter().all(|&i| i < 10));
}

#[test]
fn unpaired_draws_are_independent_across_domains() {
    // Over many draws the A item and the B item coincide at the rate of
    // independent uniform choices, 1 / n_items.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n_items, views) = (10, 3);
    let trials = 20_000;
    let mut same = 0;
    for _ in 0..trials {
        let d = draw_unpaired(n_items * views, n_items, 1, &mut rng);
        if d.a[0] / views == d.b[0] {
            same += 1;
        }
    }
    let rate = same as f64 / trials as f64;
    assert!((rate - 0.1).abs() < 0.01, "coincidence rate {rate}");
}
