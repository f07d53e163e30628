use std::fs;

use proptest::prelude::*;

use super::*;
use crate::error::Error;

fn tiny(n: usize) -> ImageDataset {
    synthetic_dataset(
        &SyntheticSpec {
            samples: n,
            classes: 3,
            shape: [3, 4, 4],
            world_seed: 1,
            sample_seed: 2,
            noise: 0.05,
        },
        SplitTag::Train,
    )
    .unwrap()
}

fn cifar_record(label: u8, fill: u8) -> Vec<u8> {
    let mut r = vec![label];
    r.extend((0..3072).map(|i| fill.wrapping_add(i as u8)));
    r
}

#[test]
fn cifar_binary_parses_and_normalizes() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for i in 0..3u8 {
        bytes.extend(cifar_record(i * 3, i * 40));
    }
    let file = dir.path().join("data_batch_1.bin");
    fs::write(&file, &bytes).unwrap();
    let ds = load_dataset(&file, DatasetFormat::Cifar10Binary).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.shape(), [3, 32, 32]);
    assert_eq!(ds.classes(), 10);
    assert_eq!(ds.labels(), &[0, 3, 6]);
    assert_eq!(ds.image(1)[0], 40.0 / 255.0);
    assert_eq!(ds.image(1)[1], 41.0 / 255.0);

    // Directory form wants all five batches.
    assert!(matches!(load_dataset(dir.path(), DatasetFormat::Cifar10Binary), Err(Error::Io { .. })));
}

#[test]
fn cifar_binary_reports_offending_record() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("b.bin");
    let mut bytes = cifar_record(1, 0);
    bytes.extend(cifar_record(12, 0));
    fs::write(&file, &bytes).unwrap();
    match load_dataset(&file, DatasetFormat::Cifar10Binary) {
        Err(Error::Format { record, .. }) => assert_eq!(record, 1),
        other => panic!("expected format error, got {other:?}"),
    }
    let mut bytes = cifar_record(1, 0);
    bytes.extend(cifar_record(2, 0));
    bytes.truncate(bytes.len() - 7);
    fs::write(&file, &bytes).unwrap();
    match load_dataset(&file, DatasetFormat::Cifar10Binary) {
        Err(Error::Format { record, .. }) => assert_eq!(record, 1),
        other => panic!("expected format error, got {other:?}"),
    }
    fs::write(&file, b"").unwrap();
    assert!(matches!(load_dataset(&file, DatasetFormat::Cifar10Binary), Err(Error::EmptyDataset(_))));
}

#[test]
fn png_dir_round_trips_pixel_exact() {
    let ds = tiny(4);
    let dir = tempfile::tempdir().unwrap();
    save_png_dir(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path(), DatasetFormat::PngDir).unwrap();
    assert_eq!(back.len(), 4);
    assert_eq!(back.images(), ds.images());
    assert_eq!(back.labels(), ds.labels());
}

#[test]
fn png_dir_names_missing_file() {
    let ds = tiny(2);
    let dir = tempfile::tempdir().unwrap();
    save_png_dir(&ds, dir.path()).unwrap();
    let mut csv = fs::read_to_string(dir.path().join("labels.csv")).unwrap();
    csv.push_str("ghost.png,1\n");
    fs::write(dir.path().join("labels.csv"), csv).unwrap();
    let err = load_dataset(dir.path(), DatasetFormat::PngDir).unwrap_err();
    assert!(matches!(&err, Error::MissingFile { file, .. } if file == "ghost.png"));
    assert!(err.to_string().contains("ghost.png"));
}

#[test]
fn construction_enforces_invariants() {
    let ok = ImageDataset::new(vec![0.5; 4], vec![0, 1], vec!["a".into(), "b".into()], [1, 1, 2], 2, SplitTag::Val);
    assert!(ok.is_ok());
    let bad_pixel = ImageDataset::new(vec![1.5, 0.0], vec![0], vec!["a".into()], [1, 1, 2], 2, SplitTag::Train);
    assert!(bad_pixel.is_err());
    let bad_label = ImageDataset::new(vec![0.0, 0.0], vec![2], vec!["a".into()], [1, 1, 2], 2, SplitTag::Train);
    assert!(bad_label.is_err());
    let dup = ImageDataset::new(vec![0.0; 4], vec![0, 1], vec!["a".into(), "a".into()], [1, 1, 2], 2, SplitTag::Train);
    assert!(dup.is_err());
    let empty = ImageDataset::new(vec![], vec![], vec![], [1, 1, 2], 2, SplitTag::Train);
    assert!(matches!(empty, Err(Error::EmptyDataset(_))));
}

#[test]
fn ordering_is_canonical_and_fingerprint_order_independent() {
    let a = ImageDataset::new(
        vec![0.1, 0.2, 0.3, 0.4],
        vec![0, 1],
        vec!["x".into(), "y".into()],
        [1, 1, 2],
        2,
        SplitTag::Train,
    )
    .unwrap();
    let b = ImageDataset::new(
        vec![0.3, 0.4, 0.1, 0.2],
        vec![1, 0],
        vec!["y".into(), "x".into()],
        [1, 1, 2],
        2,
        SplitTag::Train,
    )
    .unwrap();
    assert_eq!(a, b);
    assert_eq!(a.fingerprint(), b.fingerprint());
    let c = a.with_images(vec![0.1, 0.2, 0.3, 0.5]).unwrap();
    assert_ne!(a.fingerprint(), c.fingerprint());
}

#[test]
fn subset_sizes_and_identity() {
    let ds = tiny(50);
    assert_eq!(subset_split(&ds, 0.1, 3).unwrap().len(), 5);
    assert_eq!(subset_split(&ds, 1.0, 3).unwrap(), ds);
    assert_eq!(subset_size(50_000, 0.1), 5000);
    assert!(subset_split(&ds, 0.01, 3).is_err());
    assert!(subset_split(&ds, 0.0, 3).is_err());
    assert!(subset_split(&ds, 1.5, 3).is_err());
    let a = subset_split(&ds, 0.3, 9).unwrap();
    let b = subset_split(&ds, 0.3, 9).unwrap();
    assert_eq!(a.ids(), b.ids());
    assert_ne!(a.ids(), subset_split(&ds, 0.3, 10).unwrap().ids());
}

#[test]
fn zero_perturbation_is_identity_and_clamps_at_one() {
    let ds = ImageDataset::new(vec![1.0, 0.5, 0.0, 0.2], vec![0], vec!["a".into()], [1, 2, 2], 2, SplitTag::Train).unwrap();
    let mut set = PerturbationSet::zeros(&ds, 8.0 / 255.0, "cfg".into(), 0);
    assert_eq!(apply_perturbations(&ds, &set).unwrap(), ds);
    set.deltas = vec![8.0 / 255.0, -8.0 / 255.0, -8.0 / 255.0, 8.0 / 255.0];
    let out = apply_perturbations(&ds, &set).unwrap();
    assert_eq!(out.images()[0], 1.0);
    assert_eq!(out.images()[2], 0.0);
    assert_eq!(out.labels(), ds.labels());
}

#[test]
fn fingerprint_mismatch_is_rejected() {
    let ds = tiny(3);
    let other = tiny(4);
    let set = PerturbationSet::zeros(&other, 0.1, "cfg".into(), 0);
    assert!(matches!(apply_perturbations(&ds, &set), Err(Error::FingerprintMismatch { .. })));
}

fn random_set(ds: &ImageDataset, eps: f32, seed: u64) -> PerturbationSet {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut set = PerturbationSet::zeros(ds, eps, "cfg".into(), seed);
    for d in &mut set.deltas {
        *d = rng.random_range(-eps..=eps);
    }
    set
}

#[test]
fn persistence_round_trip_and_corruption() {
    let ds = tiny(5);
    let set = random_set(&ds, 8.0 / 255.0, 4);
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("deltas");
    let (payload, json) = set.save(&base).unwrap();
    assert!(payload.ends_with("deltas.f32") && json.ends_with("deltas.json"));
    let back = PerturbationSet::load(&base).unwrap();
    assert_eq!(back, set);
    let bits = |s: &PerturbationSet| s.deltas.iter().map(|d| d.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&set));

    // Tampered epsilon, in either direction.
    let text = fs::read_to_string(&json).unwrap();
    let meta: serde_json::Value = serde_json::from_str(&text).unwrap();
    for eps in [0.01, 0.5] {
        let mut m = meta.clone();
        m["epsilon"] = serde_json::json!(eps);
        fs::write(&json, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(PerturbationSet::load(&base), Err(Error::Metadata { .. })), "eps {eps}");
    }
    fs::write(&json, &text).unwrap();

    let bytes = fs::read(&payload).unwrap();
    fs::write(&payload, &bytes[..bytes.len() - 6]).unwrap();
    let err = PerturbationSet::load(&base).unwrap_err();
    let expected = (bytes.len()) as u64;
    assert!(matches!(err, Error::PayloadLength { expected: e, actual: a, .. } if e == expected && a == expected - 6));
    assert!(err.to_string().contains(&expected.to_string()));
}

#[test]
fn synthetic_is_deterministic_and_balanced() {
    let a = tiny(30);
    assert_eq!(a, tiny(30));
    for k in 0..3 {
        assert_eq!(a.labels().iter().filter(|&&y| y == k).count(), 10);
    }
    assert!(a.images().iter().all(|v| (v * 255.0).round() / 255.0 == *v));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn applied_change_never_exceeds_epsilon(seed in 0u64..1000, k in 0u32..=32) {
        let ds = tiny(4);
        let eps = k as f32 / 255.0;
        let set = random_set(&ds, eps, seed);
        let out = apply_perturbations(&ds, &set).unwrap();
        for (o, x) in out.images().iter().zip(ds.images()) {
            prop_assert!((o - x).abs() <= eps);
            prop_assert!((0.0..=1.0).contains(o));
        }
    }

    #[test]
    fn perturb_pixel_respects_bound(x in 0.0f32..=1.0, d in -0.2f32..=0.2, eps in 0.0f32..0.2) {
        let d = d.clamp(-eps, eps);
        let y = perturbation::perturb_pixel(x, d, eps);
        prop_assert!((y - x).abs() <= eps);
        prop_assert!((0.0..=1.0).contains(&y));
    }

    #[test]
    fn subset_is_floor_fraction_and_seed_function(n in 5usize..60, pct in 1u32..=100, seed in 0u64..50) {
        let ds = tiny(n);
        let f = pct as f64 / 100.0;
        let k = subset_size(n, f);
        match subset_split(&ds, f, seed) {
            Ok(s) => {
                prop_assert_eq!(s.len(), k);
                let again = subset_split(&ds, f, seed).unwrap();
                prop_assert_eq!(s.ids(), again.ids());
                let mut sorted = s.ids().to_vec();
                sorted.sort();
                prop_assert_eq!(sorted, s.ids().to_vec());
            }
            Err(_) => prop_assert_eq!(k, 0),
        }
    }

    #[test]
    fn persistence_is_exact_inverse(seed in 0u64..200) {
        let ds = tiny(2);
        let set = random_set(&ds, 4.0 / 255.0, seed);
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("p");
        set.save(&base).unwrap();
        prop_assert_eq!(PerturbationSet::load(&base).unwrap(), set);
    }
}
