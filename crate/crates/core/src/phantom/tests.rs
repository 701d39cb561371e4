use super::*;
use crate::rng::derive_rng;

fn small_spec() -> PhantomSpec {
    PhantomSpec {
        dims: (64, 64, 64),
        spacing_mm: (1.0, 1.0, 1.0),
        lesion_radius_mm: (1.0, 3.0),
        ..PhantomSpec::default()
    }
}

#[test]
fn anatomy_is_deterministic_per_rng_stream() {
    let spec = small_spec();
    let (v1, m1) = build_anatomy(&spec, &mut derive_rng(5, "a")).unwrap();
    let (v2, m2) = build_anatomy(&spec, &mut derive_rng(5, "a")).unwrap();
    assert_eq!(v1, v2);
    assert_eq!(m1, m2);
    let (v3, _) = build_anatomy(&spec, &mut derive_rng(5, "b")).unwrap();
    assert_ne!(v1, v3);
}

#[test]
fn lung_mask_marks_exactly_lung_voxels() {
    let spec = small_spec();
    let (vol, lung) = build_anatomy(&spec, &mut derive_rng(1, "a")).unwrap();
    for (i, &b) in lung.bits().iter().enumerate() {
        let is_lung_hu = vol.voxels()[i] == spec.lung_hu;
        assert_eq!(b == 1, is_lung_hu, "voxel {i}");
    }
}

#[test]
fn lung_to_body_ratio_in_expected_range() {
    let spec = small_spec();
    for seed in 0..5 {
        let (vol, lung) = build_anatomy(&spec, &mut derive_rng(seed, "ratio")).unwrap();
        let body = vol
            .voxels()
            .iter()
            .filter(|&&v| v == spec.body_hu || v == spec.lung_hu)
            .count();
        let ratio = lung.count() as f64 / body as f64;
        assert!((0.10..=0.60).contains(&ratio), "ratio {ratio}");
    }
}

#[test]
fn anatomy_rejects_tiny_dims() {
    let spec = PhantomSpec {
        dims: (8, 64, 64),
        ..small_spec()
    };
    assert!(matches!(
        build_anatomy(&spec, &mut derive_rng(0, "t")),
        Err(PhantomError::DimsTooSmall(_))
    ));
}

#[test]
fn spec_validation_catches_bad_values() {
    let mut spec = small_spec();
    spec.lesion_hu = 100.0; // outside (lung, body)
    assert!(matches!(
        spec.validate(),
        Err(PhantomError::InvalidSpec(_))
    ));
    let mut spec = small_spec();
    spec.lesion_radius_mm = (3.0, 1.0);
    assert!(spec.validate().is_err());
    let mut spec = small_spec();
    spec.target_lesion_fraction = 1.0;
    assert!(spec.validate().is_err());
}

#[test]
fn zero_target_changes_nothing() {
    let spec = small_spec();
    let (vol, lung) = build_anatomy(&spec, &mut derive_rng(2, "a")).unwrap();
    let out = insert_lesions(&vol, &lung, 0.0, &spec, &mut derive_rng(2, "l")).unwrap();
    assert_eq!(out.volume, vol);
    assert_eq!(out.lesion_mask.count(), 0);
    assert_eq!(out.achieved_fraction, 0.0);
}

#[test]
fn lesions_stay_inside_lung_for_any_seed() {
    let spec = small_spec();
    for seed in 0..8 {
        let (vol, lung) = build_anatomy(&spec, &mut derive_rng(seed, "a")).unwrap();
        let out = insert_lesions(&vol, &lung, 0.08, &spec, &mut derive_rng(seed, "l")).unwrap();
        assert!(out.lesion_mask.is_subset_of(&lung));
    }
}

#[test]
fn achieved_fraction_tracks_target() {
    let spec = small_spec();
    let (vol, lung) = build_anatomy(&spec, &mut derive_rng(3, "a")).unwrap();
    let out = insert_lesions(&vol, &lung, 0.05, &spec, &mut derive_rng(3, "l")).unwrap();
    let measured = lesion_fraction(&out.lesion_mask, &lung).unwrap();
    assert!((0.04..=0.06).contains(&measured), "fraction {measured}");
    assert_eq!(measured, out.achieved_fraction);
}

#[test]
fn achieved_fraction_within_centipoint_over_targets_and_seeds() {
    let spec = small_spec();
    for &target in &[0.01, 0.0265, 0.05, 0.10] {
        for seed in 0..50u64 {
            let (vol, lung) = build_anatomy(&spec, &mut derive_rng(seed, "a")).unwrap();
            let out =
                insert_lesions(&vol, &lung, target, &spec, &mut derive_rng(seed, "l")).unwrap();
            assert!(
                (out.achieved_fraction - target).abs() <= 0.01,
                "target {target} seed {seed}: achieved {}",
                out.achieved_fraction
            );
        }
    }
}

#[test]
fn lesion_fraction_examples() {
    let lung_dims = (10, 10, 20);
    let mut lung = Mask3D::zeros(lung_dims).unwrap();
    for i in 0..2000 {
        lung.bits_mut()[i] = 1;
    }
    let mut lesion = Mask3D::zeros(lung_dims).unwrap();
    assert_eq!(lesion_fraction(&lesion, &lung).unwrap(), 0.0);
    for i in 0..53 {
        lesion.bits_mut()[i] = 1;
    }
    assert_eq!(lesion_fraction(&lesion, &lung).unwrap(), 0.0265);
    let full = lung.clone();
    assert_eq!(lesion_fraction(&full, &lung).unwrap(), 1.0);

    let empty = Mask3D::zeros(lung_dims).unwrap();
    assert!(matches!(
        lesion_fraction(&lesion, &empty),
        Err(PhantomError::EmptyLungMask)
    ));
}

#[test]
fn noise_model_std_formula() {
    let model = NoiseModel::default();
    assert_eq!(model.std_at(57.0).unwrap(), 25.0);
    let ratio = model.std_at(28.5).unwrap() / model.std_at(57.0).unwrap();
    assert!((ratio - std::f64::consts::SQRT_2).abs() < 1e-12);
    assert!(matches!(
        model.std_at(0.0),
        Err(PhantomError::InvalidDose(_))
    ));
    assert!(matches!(
        model.std_at(-3.0),
        Err(PhantomError::InvalidDose(_))
    ));
}

#[test]
fn noise_sample_std_near_sigma() {
    let vol = crate::volume::Volume3D::filled((64, 64, 64), (1.0, 1.0, 1.0), Domain::Hu, 0.0)
        .unwrap();
    let model = NoiseModel {
        sigma_ref: 20.0,
        dose_ref: 57.0,
    };
    let noisy = simulate_ct_noise(&vol, 57.0, &model, &mut derive_rng(9, "noise")).unwrap();
    let n = noisy.len() as f64;
    let mean: f64 = noisy.voxels().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var: f64 = noisy
        .voxels()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    let std = var.sqrt();
    assert!((19.6..=20.4).contains(&std), "sample std {std}");
}

#[test]
fn empirical_dose_ratio_is_sqrt2() {
    let spec = small_spec();
    let (clean, _) = build_anatomy(&spec, &mut derive_rng(4, "a")).unwrap();
    let model = NoiseModel::default();
    let low = simulate_ct_noise(&clean, 28.5, &model, &mut derive_rng(4, "n/28.5")).unwrap();
    let high = simulate_ct_noise(&clean, 57.0, &model, &mut derive_rng(4, "n/57")).unwrap();
    let std_of_diff = |a: &crate::volume::Volume3D| {
        let n = a.len() as f64;
        let deltas: Vec<f64> = a
            .voxels()
            .iter()
            .zip(clean.voxels())
            .map(|(&x, &c)| (x - c) as f64)
            .collect();
        let mean = deltas.iter().sum::<f64>() / n;
        (deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    let ratio = std_of_diff(&low) / std_of_diff(&high);
    assert!(
        (ratio - std::f64::consts::SQRT_2).abs() / std::f64::consts::SQRT_2 < 0.02,
        "ratio {ratio}"
    );
}

mod dataset_tests {
    use super::*;
    use std::fs;

    fn tiny_spec() -> PhantomSpec {
        PhantomSpec {
            dims: (16, 24, 24),
            spacing_mm: (5.0, 2.0, 2.0),
            lesion_radius_mm: (2.0, 6.0),
            ..PhantomSpec::default()
        }
    }

    fn smoke_counts() -> Vec<CountRow> {
        vec![
            CountRow {
                label: Label::Positive,
                dose_mas: 28.5,
                n: 3,
            },
            CountRow {
                label: Label::Negative,
                dose_mas: 28.5,
                n: 2,
            },
            CountRow {
                label: Label::Positive,
                dose_mas: 57.0,
                n: 3,
            },
            CountRow {
                label: Label::Negative,
                dose_mas: 57.0,
                n: 2,
            },
        ]
    }

    #[test]
    fn dataset_counts_and_negatives() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(
            &smoke_counts(),
            &tiny_spec(),
            &NoiseModel::default(),
            &LesionFractionDist::default(),
            &GenOptions::default(),
            11,
            dir.path(),
        )
        .unwrap();
        assert_eq!(manifest.cases.len(), 10);
        let positives = manifest
            .cases
            .iter()
            .filter(|c| c.label == Label::Positive)
            .count();
        assert_eq!(positives, 6);
        for case in &manifest.cases {
            if case.label == Label::Negative {
                assert_eq!(case.lesion_fraction, 0.0);
            } else {
                assert!(case.lesion_fraction > 0.0);
            }
            assert!(dir.path().join(&case.path).exists());
            assert!(dir
                .path()
                .join(format!("{}.lung.vvol", case.case_id))
                .exists());
            assert!(dir
                .path()
                .join(format!("{}.lesion.vvol", case.case_id))
                .exists());
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        for dir in [&dir_a, &dir_b] {
            generate_dataset(
                &smoke_counts(),
                &tiny_spec(),
                &NoiseModel::default(),
                &LesionFractionDist::default(),
                &GenOptions::default(),
                21,
                dir.path(),
            )
            .unwrap();
        }
        let csv_a = fs::read(dir_a.path().join("manifest.csv")).unwrap();
        let csv_b = fs::read(dir_b.path().join("manifest.csv")).unwrap();
        assert_eq!(csv_a, csv_b);
        let json_a = fs::read(dir_a.path().join("manifest.json")).unwrap();
        let json_b = fs::read(dir_b.path().join("manifest.json")).unwrap();
        assert_eq!(json_a, json_b);
        // spot-check one volume payload byte for byte
        let va = fs::read(dir_a.path().join("pos_000_28.5mas.vvol")).unwrap();
        let vb = fs::read(dir_b.path().join("pos_000_28.5mas.vvol")).unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn paired_doses_share_anatomy() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(
            &smoke_counts(),
            &tiny_spec(),
            &NoiseModel {
                sigma_ref: 0.0,
                dose_ref: 57.0,
            },
            &LesionFractionDist::default(),
            &GenOptions { paired_doses: true },
            33,
            dir.path(),
        )
        .unwrap();
        // with zero noise the paired renderings must be identical volumes
        let low = fs::read(dir.path().join("pos_001_28.5mas.vvol")).unwrap();
        let high = fs::read(dir.path().join("pos_001_57mas.vvol")).unwrap();
        // payloads match even though file names differ
        assert_eq!(low[12..], high[12..]);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(
            &smoke_counts(),
            &tiny_spec(),
            &NoiseModel::default(),
            &LesionFractionDist::default(),
            &GenOptions::default(),
            7,
            dir.path(),
        )
        .unwrap();
        let back = read_manifest(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(back, manifest);
    }

    #[test]
    fn manifest_rejects_duplicates_and_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let header = "case_id,label,dose_mas,lesion_fraction,path,split\n";
        fs::write(
            &path,
            format!("{header}a,pos,57,0.1,a.vvol,none\na,pos,57,0.1,a.vvol,none\n"),
        )
        .unwrap();
        assert!(matches!(
            read_manifest(&path),
            Err(PhantomError::Manifest(_))
        ));
        fs::write(
            &path,
            format!("{header}a,neg,57,0.2,a.vvol,none\n"),
        )
        .unwrap();
        assert!(read_manifest(&path).is_err(), "negative with lesions");
        fs::write(&path, format!("{header}a,pos,57,oops,a.vvol,none\n")).unwrap();
        assert!(read_manifest(&path).is_err(), "bad float");
    }

    #[test]
    fn lesion_distribution_respects_truncation() {
        let dist = LesionFractionDist::default();
        let mut rng = derive_rng(0, "dist");
        let mut below = 0usize;
        let n = 4000;
        for _ in 0..n {
            let x = dist.sample(&mut rng);
            assert!((dist.lo..=dist.hi).contains(&x));
            if x < 0.0265 {
                below += 1;
            }
        }
        // roughly half the mass on each side of the extent threshold
        let frac = below as f64 / n as f64;
        assert!((0.25..=0.65).contains(&frac), "below-threshold mass {frac}");
    }
}
