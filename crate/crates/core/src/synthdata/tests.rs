use proptest::prelude::*;

use super::*;
use crate::linalg;
use crate::rng;

fn small(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        n_subjects: 120,
        image_side: 8,
        seed,
        ..GeneratorConfig::default()
    }
}

#[test]
fn group_proportions_at_n_1000() {
    let cfg = GeneratorConfig {
        n_subjects: 1000,
        ..GeneratorConfig::default()
    };
    let ds = generate(&cfg).unwrap();
    for (g, want) in Group::ALL.iter().zip(cfg.group_ratios) {
        let frac = ds.groups.iter().filter(|x| *x == g).count() as f64 / 1000.0;
        assert!((frac - want).abs() <= 0.02, "{g:?}: {frac}");
    }
}

#[test]
fn fixed_seed_is_bit_identical() {
    let a = generate(&small(5)).unwrap();
    let b = generate(&small(5)).unwrap();
    assert_eq!(encode_tensors(&a.to_named()).unwrap(), encode_tensors(&b.to_named()).unwrap());
    let c = generate(&small(6)).unwrap();
    assert_ne!(a.images[0], c.images[0]);
}

#[test]
fn impossible_ratios_rejected() {
    let mut cfg = small(0);
    cfg.group_ratios = [0.5, 0.3, 0.3];
    assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    cfg.group_ratios = [1.0, 0.0, 0.0];
    assert!(generate(&cfg).is_err());
    cfg.group_ratios = [0.7, 0.15, 0.15];
    cfg.n_subjects = 3;
    assert!(generate(&cfg).is_err());
}

#[test]
fn noiseless_images_live_in_the_shared_span() {
    let cfg = GeneratorConfig {
        n_subjects: 80,
        image_side: 8,
        k_spec1: 0,
        k_spec2: 0,
        noise_sigma: 0.0,
        label_noise: 0.0,
        ..GeneratorConfig::default()
    };
    let ds = generate(&cfg).unwrap();
    for img in &ds.images {
        let p = 64;
        let mut centered = img.data().to_vec();
        linalg::center_columns(&mut centered, 80, p);
        let (_, s, _) = linalg::svd(&centered, 80, p);
        let tail = s[cfg.k_shared..].iter().cloned().fold(0.0, f64::max);
        assert!(tail < 1e-9 * s[0], "rank exceeds k_shared: {:?}", &s[..6]);
    }
}

#[test]
fn labels_ignore_specific_factors() {
    let base = small(11);
    let a = generate(&base).unwrap();
    let b = generate(&GeneratorConfig {
        k_spec1: 1,
        k_spec2: 12,
        spec_gain: [3.0, 0.1],
        noise_sigma: 2.0,
        ..base.clone()
    })
    .unwrap();
    assert_eq!(a.groups, b.groups);
    assert_eq!(a.shared, b.shared);
}

#[test]
fn label_noise_keeps_proportions() {
    let mut cfg = small(2);
    cfg.label_noise = 0.3;
    let noisy = generate(&cfg).unwrap();
    cfg.label_noise = 0.0;
    let clean = generate(&cfg).unwrap();
    let count = |d: &PairedDataset, g| d.groups.iter().filter(|x| **x == g).count();
    for g in Group::ALL {
        assert_eq!(count(&noisy, g), count(&clean, g));
    }
    assert_ne!(noisy.groups, clean.groups);
}

#[test]
fn split_ratios_are_stratified() {
    let ds = generate(&GeneratorConfig {
        n_subjects: 1000,
        image_side: 8,
        ..GeneratorConfig::default()
    })
    .unwrap();
    for g in Group::ALL {
        let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.groups[i] == g).collect();
        let train = rows.iter().filter(|&&i| ds.splits[i] == Split::Train).count();
        assert!((train as f64 - 0.7 * rows.len() as f64).abs() <= 1.0);
    }
}

#[test]
fn mask_covers_about_sixty_percent() {
    for side in [16, 32, 64] {
        let m = disk_mask(side);
        let frac = m.data().iter().sum::<f64>() / (side * side) as f64;
        assert!((frac - 0.6).abs() < 0.06, "{side}: {frac}");
    }
}

#[test]
fn images_vanish_outside_the_mask() {
    let ds = generate(&small(1)).unwrap();
    for img in &ds.images {
        for r in 0..ds.len() {
            for (v, m) in img.row(r).iter().zip(ds.mask.data()) {
                if *m == 0.0 {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }
}

#[test]
fn multiple_pairs_share_subject_metadata() {
    let mut cfg = small(4);
    cfg.pairs_per_subject = 3;
    let ds = generate(&cfg).unwrap();
    ds.validate().unwrap();
    assert_eq!(ds.len(), 360);
    assert_ne!(ds.images[0].row(0), ds.images[0].row(1));
    let firsts = ds.one_pair_per_subject(&(0..ds.len()).collect::<Vec<_>>());
    assert_eq!(firsts.len(), 120);
    assert!(firsts.iter().all(|r| r % 3 == 0));
}

#[test]
fn dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(&small(9)).unwrap();
    let manifest = ds.save(dir.path(), "data").unwrap();
    assert_eq!(manifest.rows, 120);
    let text = std::fs::read_to_string(dir.path().join("data.json")).unwrap();
    let parsed: Manifest = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed, manifest);
    assert_eq!(PairedDataset::load(dir.path().join("data.json")).unwrap(), ds);
    assert_eq!(PairedDataset::load(dir.path().join("data.mmdt")).unwrap(), ds);
}

#[test]
fn znormalize_constant_images_are_zero() {
    let t = Tensor::full(&[3, 4, 4], 2.5);
    let st = norm_stats(&t, &[0, 1, 2]).unwrap();
    assert_eq!(st.std, 0.0);
    assert!(znormalize(&t, st).data().iter().all(|&v| v == 0.0));
}

#[test]
fn znormalize_uses_training_statistics() {
    let ds = generate(&small(3)).unwrap();
    let train = ds.rows_in(Split::Train);
    let hold = ds.rows_in(Split::Holdout);
    for img in &ds.images {
        let st = norm_stats(img, &train).unwrap();
        let z = znormalize(img, st);
        let again = norm_stats(&z, &train).unwrap();
        assert!(again.mean.abs() < 1e-6 && (again.std - 1.0).abs() < 1e-6);
        let own = znormalize(img, norm_stats(img, &hold).unwrap());
        let hm = norm_stats(&z, &hold).unwrap().mean;
        let om = norm_stats(&own, &hold).unwrap().mean;
        assert!(om.abs() < 1e-9);
        assert!((hm - om).abs() > 1e-6, "holdout normalized with its own stats");
    }
}

fn ramp(side: usize, offset: f64) -> Vec<f64> {
    (0..side * side).map(|i| i as f64 + offset).collect()
}

#[test]
fn augment_off_is_identity() {
    let (a, b) = (ramp(6, 0.0), ramp(6, 100.0));
    let (x, y) = augment_pair(&a, &b, 6, &mut rng::stream(0, 0), &AugmentFlags::off()).unwrap();
    assert_eq!((x, y), (a, b));
}

#[test]
fn flips_are_involutions() {
    let a = ramp(5, 0.0);
    for (h, v) in [(true, false), (false, true), (true, true)] {
        assert_eq!(flip(&flip(&a, 5, h, v), 5, h, v), a);
    }
    assert_eq!(flip(&a, 5, true, false)[0], 4.0);
    assert_eq!(flip(&a, 5, false, true)[0], 20.0);
}

#[test]
fn augment_applies_one_transform_to_both() {
    let a = ramp(8, 0.0);
    let flags = AugmentFlags {
        crop: Some(6),
        ..AugmentFlags::default()
    };
    let mut r = rng::stream(1, 0);
    for _ in 0..20 {
        let (x, y) = augment_pair(&a, &a, 8, &mut r, &flags).unwrap();
        assert_eq!(x, y);
        // border of the centered paste stays zero
        assert!((0..8).all(|i| x[i] == 0.0 && x[56 + i] == 0.0));
    }
}

#[test]
fn augment_stream_is_reproducible() {
    let a = ramp(8, 0.0);
    let run = || {
        let mut r = rng::stream(42, 3);
        (0..10)
            .map(|_| augment_pair(&a, &a, 8, &mut r, &AugmentFlags { crop: Some(7), ..Default::default() }).unwrap().0)
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn oversized_crop_rejected() {
    let a = ramp(4, 0.0);
    let flags = AugmentFlags {
        crop: Some(5),
        ..AugmentFlags::off()
    };
    assert!(augment_pair(&a, &a, 4, &mut rng::stream(0, 0), &flags).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn subjects_never_span_splits(seed in any::<u64>(), n in 20usize..150, pairs in 1usize..3) {
        let cfg = GeneratorConfig { n_subjects: n, image_side: 6, pairs_per_subject: pairs, seed, ..GeneratorConfig::default() };
        let ds = generate(&cfg).unwrap();
        ds.validate().unwrap();
        let mut owner = std::collections::HashMap::new();
        for i in 0..ds.len() {
            let s = *owner.entry(ds.subject_ids[i]).or_insert(ds.splits[i]);
            prop_assert_eq!(s, ds.splits[i]);
        }
        prop_assert_eq!(owner.len(), n);
    }
}
