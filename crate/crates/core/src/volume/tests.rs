use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn hu(dims: (usize, usize, usize), vals: Vec<f32>) -> Volume3D {
    Volume3D::from_vec(dims, (1.0, 1.0, 1.0), Domain::Hu, vals).unwrap()
}

// ---- construction invariants ----

#[test]
fn voxel_count_must_match_dims() {
    let err = Volume3D::from_vec((2, 2, 2), (1.0, 1.0, 1.0), Domain::Hu, vec![0.0; 7]);
    assert!(matches!(err, Err(VolumeError::VoxelCountMismatch { .. })));
}

#[test]
fn spacing_must_be_positive_finite() {
    for bad in [(0.0, 1.0, 1.0), (1.0, -2.0, 1.0), (1.0, 1.0, f64::NAN)] {
        let err = Volume3D::filled((2, 2, 2), bad, Domain::Hu, 0.0);
        assert!(matches!(err, Err(VolumeError::InvalidSpacing(_))));
    }
}

#[test]
fn unit_domain_rejects_out_of_range() {
    let err = Volume3D::from_vec((1, 1, 2), (1.0, 1.0, 1.0), Domain::Unit, vec![0.5, 1.5]);
    assert!(matches!(err, Err(VolumeError::UnitOutOfRange { .. })));
}

#[test]
fn hu_domain_rejects_non_finite() {
    let err = Volume3D::from_vec((1, 1, 1), (1.0, 1.0, 1.0), Domain::Hu, vec![f32::NAN]);
    assert!(matches!(err, Err(VolumeError::NonFiniteVoxel(0))));
}

// ---- crop_to_body ----

#[test]
fn crop_all_air_is_empty_body() {
    let vol = Volume3D::filled((8, 8, 8), (1.0, 1.0, 1.0), Domain::Hu, -1000.0).unwrap();
    let err = crop_to_body(&vol, -500.0);
    assert!(matches!(err, Err(VolumeError::EmptyBodyRegion(_))));
}

#[test]
fn crop_all_body_is_identity() {
    let vol = Volume3D::filled((6, 7, 8), (1.0, 2.0, 3.0), Domain::Hu, 0.0).unwrap();
    let (out, bbox) = crop_to_body(&vol, -500.0).unwrap();
    assert_eq!(bbox.lo, (0, 0, 0));
    assert_eq!(bbox.hi, (6, 7, 8));
    assert_eq!(out, vol);
}

#[test]
fn crop_finds_block_bbox() {
    let mut vals = vec![-1000.0f32; 20 * 20 * 20];
    for z in 3..8 {
        for y in 4..9 {
            for x in 5..10 {
                vals[(z * 20 + y) * 20 + x] = 40.0;
            }
        }
    }
    let vol = hu((20, 20, 20), vals);
    let (out, bbox) = crop_to_body(&vol, -500.0).unwrap();
    assert_eq!(bbox.lo, (3, 4, 5));
    assert_eq!(bbox.hi, (8, 9, 10));
    assert_eq!(out.dims(), (5, 5, 5));
    assert!(out.voxels().iter().all(|&v| v == 40.0));
    assert_eq!(out.spacing(), vol.spacing());
}

#[test]
fn crop_picks_largest_component() {
    // an 8-voxel blob and a single stray voxel
    let mut vals = vec![-1000.0f32; 10 * 10 * 10];
    for z in 1..3 {
        for y in 1..3 {
            for x in 1..3 {
                vals[(z * 10 + y) * 10 + x] = 100.0;
            }
        }
    }
    vals[(8 * 10 + 8) * 10 + 8] = 100.0;
    let vol = hu((10, 10, 10), vals);
    let (_, bbox) = crop_to_body(&vol, -500.0).unwrap();
    assert_eq!(bbox.lo, (1, 1, 1));
    assert_eq!(bbox.hi, (3, 3, 3));
}

/// Independent component labelling: every above-threshold voxel starts with
/// its own label (its flat index) and repeatedly takes the minimum over its
/// 6-neighbourhood until a fixpoint. Largest component wins; ties go to the
/// component with the smallest root label, matching scan-order discovery.
fn brute_force_body_bbox(vol: &Volume3D, threshold: f32) -> Option<BoundingBox> {
    let (nz, ny, nx) = vol.dims();
    let n = vol.len();
    let mut label: Vec<Option<usize>> = (0..n)
        .map(|i| (vol.voxels()[i] > threshold).then_some(i))
        .collect();
    loop {
        let mut changed = false;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = (z * ny + y) * nx + x;
                    let Some(cur) = label[i] else { continue };
                    let mut best = cur;
                    let mut consider = |j: usize| {
                        if let Some(l) = label[j] {
                            best = best.min(l);
                        }
                    };
                    if z > 0 {
                        consider(i - ny * nx);
                    }
                    if z + 1 < nz {
                        consider(i + ny * nx);
                    }
                    if y > 0 {
                        consider(i - nx);
                    }
                    if y + 1 < ny {
                        consider(i + nx);
                    }
                    if x > 0 {
                        consider(i - 1);
                    }
                    if x + 1 < nx {
                        consider(i + 1);
                    }
                    if best < cur {
                        label[i] = Some(best);
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut sizes: std::collections::BTreeMap<usize, usize> = Default::default();
    for l in label.iter().flatten() {
        *sizes.entry(*l).or_insert(0) += 1;
    }
    let (&root, _) = sizes.iter().max_by(|a, b| {
        a.1.cmp(b.1)
            .then(b.0.cmp(a.0)) // smaller root wins ties
    })?;
    let mut lo = (usize::MAX, usize::MAX, usize::MAX);
    let mut hi = (0, 0, 0);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if label[(z * ny + y) * nx + x] == Some(root) {
                    lo = (lo.0.min(z), lo.1.min(y), lo.2.min(x));
                    hi = (hi.0.max(z + 1), hi.1.max(y + 1), hi.2.max(x + 1));
                }
            }
        }
    }
    Some(BoundingBox { lo, hi })
}

proptest! {
    #[test]
    fn crop_matches_brute_force(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = (
            rng.gen_range(1..=8usize),
            rng.gen_range(1..=8usize),
            rng.gen_range(1..=8usize),
        );
        let p_body = rng.gen_range(0.05..0.6);
        let vals: Vec<f32> = (0..dims.0 * dims.1 * dims.2)
            .map(|_| if rng.gen_bool(p_body) { 40.0 } else { -1000.0 })
            .collect();
        let vol = Volume3D::from_vec(dims, (1.0, 1.0, 1.0), Domain::Hu, vals).unwrap();
        let expected = brute_force_body_bbox(&vol, -500.0);
        match crop_to_body(&vol, -500.0) {
            Ok((_, bbox)) => prop_assert_eq!(Some(bbox), expected),
            Err(VolumeError::EmptyBodyRegion(_)) => prop_assert_eq!(expected, None),
            Err(e) => return Err(TestCaseError::fail(format!("unexpected error {e}"))),
        }
    }
}

// ---- clip / normalize ----

#[test]
fn clip_bounds_from_default_window() {
    let vol = hu((1, 1, 5), vec![-1500.0, -1000.0, 0.0, 800.0, 900.0]);
    let out = clip_hu(vol, CLIP_LO_HU, CLIP_HI_HU).unwrap();
    assert_eq!(out.voxels(), &[-1000.0, -1000.0, 0.0, 800.0, 800.0]);

    let vol = hu((1, 1, 2), vec![-2000.0, 3000.0]);
    let out = clip_hu(vol, CLIP_LO_HU, CLIP_HI_HU).unwrap();
    assert_eq!(out.voxels(), &[-1000.0, 800.0]);
}

#[test]
fn clip_rejects_inverted_range() {
    let vol = hu((1, 1, 1), vec![0.0]);
    assert!(matches!(
        clip_hu(vol, 800.0, -1000.0),
        Err(VolumeError::InvalidClipRange { .. })
    ));
}

#[test]
fn normalize_endpoints_and_midpoint() {
    let vol = hu((1, 1, 3), vec![-1000.0, -100.0, 800.0]);
    let out = normalize_unit(vol, -1000.0, 800.0).unwrap();
    assert_eq!(out.domain(), Domain::Unit);
    assert_eq!(out.voxels()[0], 0.0);
    assert!((out.voxels()[1] - 0.5).abs() < 1e-7);
    assert_eq!(out.voxels()[2], 1.0);
}

#[test]
fn normalize_constant_at_lo_is_zero() {
    let vol = Volume3D::filled((3, 3, 3), (1.0, 1.0, 1.0), Domain::Hu, -1000.0).unwrap();
    let out = normalize_unit(vol, -1000.0, 800.0).unwrap();
    assert!(out.voxels().iter().all(|&v| v == 0.0));
}

#[test]
fn normalize_rejects_out_of_window_voxels() {
    let vol = hu((1, 1, 1), vec![900.0]);
    assert!(matches!(
        normalize_unit(vol, -1000.0, 800.0),
        Err(VolumeError::OutsideClipRange { .. })
    ));
}

proptest! {
    #[test]
    fn clip_is_idempotent_and_normalize_lands_in_unit(
        vals in proptest::collection::vec(-3000.0f32..3000.0, 1..64)
    ) {
        let dims = (1, 1, vals.len());
        let vol = Volume3D::from_vec(dims, (1.0, 1.0, 1.0), Domain::Hu, vals).unwrap();
        let once = clip_hu(vol, CLIP_LO_HU, CLIP_HI_HU).unwrap();
        let twice = clip_hu(once.clone(), CLIP_LO_HU, CLIP_HI_HU).unwrap();
        prop_assert_eq!(once.voxels(), twice.voxels());
        let unit = normalize_unit(once, CLIP_LO_HU, CLIP_HI_HU).unwrap();
        prop_assert!(unit.voxels().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

// ---- resample_bspline ----

#[test]
fn resample_identity_spacing_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let vals: Vec<f32> = (0..6 * 7 * 8).map(|_| rng.gen_range(-1000.0..800.0)).collect();
    let vol = Volume3D::from_vec((6, 7, 8), (5.0, 2.0, 2.0), Domain::Hu, vals).unwrap();
    let out = resample_bspline(&vol, (5.0, 2.0, 2.0)).unwrap();
    assert_eq!(out.dims(), vol.dims());
    for (a, b) in out.voxels().iter().zip(vol.voxels()) {
        assert!((a - b).abs() < 1e-5, "identity resample drifted: {a} vs {b}");
    }
}

#[test]
fn resample_preserves_constants() {
    let vol = Volume3D::filled((5, 9, 12), (3.0, 1.5, 1.5), Domain::Hu, 123.25).unwrap();
    let out = resample_bspline(&vol, (5.0, 2.0, 2.0)).unwrap();
    assert!(!out.is_empty());
    for v in out.voxels() {
        assert!((v - 123.25).abs() < 1e-6);
    }
}

#[test]
fn resample_reproduces_linear_ramp_in_interior() {
    // f(z, y, x) = x * dx sampled on a 4 x 4 x 64 grid, downsampled 2x along x.
    let dx = 1.0f64;
    let dims = (4usize, 4usize, 64usize);
    let mut vals = Vec::with_capacity(dims.0 * dims.1 * dims.2);
    for _z in 0..dims.0 {
        for _y in 0..dims.1 {
            for x in 0..dims.2 {
                vals.push((x as f64 * dx) as f32);
            }
        }
    }
    let vol = Volume3D::from_vec(dims, (1.0, 1.0, dx), Domain::Hu, vals).unwrap();
    let out = resample_bspline(&vol, (1.0, 1.0, 2.0 * dx)).unwrap();
    assert_eq!(out.dims(), (4, 4, 32));
    // output center j sits at input coordinate 2j + 0.5, so the ramp value
    // there is (2j + 0.5) * dx
    for z in 0..4 {
        for y in 0..4 {
            for j in 2..30 {
                let expected = (2.0 * j as f64 + 0.5) * dx;
                let got = out.at(z, y, j) as f64;
                assert!(
                    (got - expected).abs() < 1e-3,
                    "ramp mismatch at x={j}: {got} vs {expected}"
                );
            }
        }
    }
}

#[test]
fn resample_rejects_bad_spacing() {
    let vol = Volume3D::filled((4, 4, 4), (1.0, 1.0, 1.0), Domain::Hu, 0.0).unwrap();
    assert!(resample_bspline(&vol, (0.0, 1.0, 1.0)).is_err());
    assert!(resample_bspline(&vol, (1.0, f64::INFINITY, 1.0)).is_err());
}

#[test]
fn resample_output_dims_round() {
    let vol = Volume3D::filled((10, 10, 10), (1.0, 1.0, 1.0), Domain::Hu, 0.0).unwrap();
    let out = resample_bspline(&vol, (3.0, 4.0, 0.5)).unwrap();
    // round(10/3) = 3, round(10/4) = 3 (round half to even not used: 2.5 -> 3), round(10/0.5) = 20
    assert_eq!(out.dims(), (3, 3, 20));
    assert_eq!(out.spacing(), (3.0, 4.0, 0.5));
}

proptest! {
    #[test]
    fn resample_constant_any_spacing(
        c in -500.0f32..500.0,
        sz in 0.5f64..4.0,
        sy in 0.5f64..4.0,
        sx in 0.5f64..4.0,
    ) {
        let vol = Volume3D::filled((4, 5, 6), (2.0, 2.0, 2.0), Domain::Hu, c).unwrap();
        let out = resample_bspline(&vol, (sz, sy, sx)).unwrap();
        for v in out.voxels() {
            prop_assert!((v - c).abs() < 1e-6);
        }
    }
}

// ---- extract_patch ----

#[test]
fn patch_identity_when_sizes_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vals: Vec<f32> = (0..4 * 5 * 6).map(|_| rng.gen_range(0.0..1.0)).collect();
    let vol = Volume3D::from_vec((4, 5, 6), (1.0, 1.0, 1.0), Domain::Unit, vals).unwrap();
    let out = extract_patch(&vol, (4, 5, 6), 0.0).unwrap();
    assert_eq!(out, vol);
}

#[test]
fn patch_pads_centered_border() {
    let vol = Volume3D::filled((10, 10, 10), (1.0, 1.0, 1.0), Domain::Unit, 0.75).unwrap();
    let out = extract_patch(&vol, (16, 16, 16), 0.0).unwrap();
    assert_eq!(out.dims(), (16, 16, 16));
    for z in 0..16 {
        for y in 0..16 {
            for x in 0..16 {
                let inside = (3..13).contains(&z) && (3..13).contains(&y) && (3..13).contains(&x);
                let expected = if inside { 0.75 } else { 0.0 };
                assert_eq!(out.at(z, y, x), expected, "at ({z},{y},{x})");
            }
        }
    }
}

#[test]
fn patch_crops_to_requested_dims() {
    let vol = Volume3D::filled((200, 300, 300), (1.0, 1.0, 1.0), Domain::Unit, 0.5).unwrap();
    let out = extract_patch(&vol, PATCH_SIZE, 0.0).unwrap();
    assert_eq!(out.dims(), (96, 160, 160));
    assert!(out.voxels().iter().all(|&v| v == 0.5));
}

proptest! {
    #[test]
    fn patch_dims_always_match_request(
        nz in 1usize..12, ny in 1usize..12, nx in 1usize..12,
        pz in 1usize..12, py in 1usize..12, px in 1usize..12,
    ) {
        let vol = Volume3D::filled((nz, ny, nx), (1.0, 1.0, 1.0), Domain::Hu, 7.0).unwrap();
        let out = extract_patch(&vol, (pz, py, px), -1000.0).unwrap();
        prop_assert_eq!(out.dims(), (pz, py, px));
    }
}

// ---- vvol container ----

fn random_volume(rng: &mut ChaCha8Rng) -> Volume3D {
    let dims = (
        rng.gen_range(1..=5usize),
        rng.gen_range(1..=5usize),
        rng.gen_range(1..=5usize),
    );
    let spacing = (
        rng.gen_range(0.1..10.0f64),
        rng.gen_range(0.1..10.0),
        rng.gen_range(0.1..10.0),
    );
    let n = dims.0 * dims.1 * dims.2;
    if rng.gen_bool(0.5) {
        let vals = (0..n)
            .map(|_| loop {
                // random bit patterns keep the round trip honest about exact
                // payload preservation; reject non-finite per the HU invariant
                let v = f32::from_bits(rng.gen::<u32>());
                if v.is_finite() {
                    break v;
                }
            })
            .collect();
        Volume3D::from_vec(dims, spacing, Domain::Hu, vals).unwrap()
    } else {
        let vals = (0..n).map(|_| rng.gen_range(0.0..=1.0f32)).collect();
        Volume3D::from_vec(dims, spacing, Domain::Unit, vals).unwrap()
    }
}

#[test]
fn round_trip_is_bit_exact_for_10k_random_volumes() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..10_000 {
        let vol = random_volume(&mut rng);
        let mut buf = Vec::new();
        write_volume_to(&vol, &mut buf).unwrap();
        let back = read_volume_from(&buf[..]).unwrap();
        assert_eq!(back.dims(), vol.dims());
        assert_eq!(back.spacing(), vol.spacing());
        assert_eq!(back.domain(), vol.domain());
        let a: Vec<u32> = vol.voxels().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.voxels().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }
}

#[test]
fn truncated_payload_is_length_mismatch() {
    let vol = Volume3D::filled((2, 2, 2), (1.0, 1.0, 1.0), Domain::Hu, 5.0).unwrap();
    let mut buf = Vec::new();
    write_volume_to(&vol, &mut buf).unwrap();
    buf.pop();
    assert!(matches!(
        read_volume_from(&buf[..]),
        Err(VolumeError::PayloadLengthMismatch { .. })
    ));
}

#[test]
fn zero_dim_header_is_invalid() {
    let header = br#"{"dims":[0,4,4],"spacing_mm":[1.0,1.0,1.0],"domain":"HU"}"#;
    let mut buf = Vec::new();
    buf.extend_from_slice(b"VITVOL01");
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header);
    assert!(matches!(
        read_volume_from(&buf[..]),
        Err(VolumeError::InvalidDims(_))
    ));
}

#[test]
fn wrong_magic_is_rejected() {
    let buf = b"NOTAVOL!restoffile".to_vec();
    assert!(matches!(
        read_volume_from(&buf[..]),
        Err(VolumeError::BadMagic)
    ));
}

#[test]
fn mask_round_trip_and_validation() {
    let mut mask = Mask3D::zeros((2, 3, 4)).unwrap();
    mask.set(1, 2, 3, true);
    mask.set(0, 0, 0, true);
    let mut buf = Vec::new();
    write_mask_to(&mask, (5.0, 2.0, 2.0), &mut buf).unwrap();
    let (back, spacing) = read_mask_from(&buf[..]).unwrap();
    assert_eq!(back, mask);
    assert_eq!(spacing, (5.0, 2.0, 2.0));

    // a payload value of 0.5 is not a mask bit
    let bad = buf.len() - 2;
    buf[bad] = 0x00;
    buf[bad - 1] = 0x3f; // last f32 becomes 0.49...
    assert!(matches!(
        read_mask_from(&buf[..]),
        Err(VolumeError::InvalidMaskValue { .. })
    ));
}

#[test]
fn file_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("case.vvol");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vol = random_volume(&mut rng);
    write_volume(&vol, &path).unwrap();
    let back = read_volume(&path).unwrap();
    assert_eq!(back, vol);

    let missing = dir.path().join("absent.vvol");
    assert!(matches!(
        read_volume(&missing),
        Err(VolumeError::Io { .. })
    ));
}
