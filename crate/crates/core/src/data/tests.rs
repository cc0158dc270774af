use proptest::prelude::*;

use super::lkds::{decode, encode, HEADER_LEN};
use super::*;
use crate::error::Error;
use crate::lakan::LandmarkSet;
use crate::ndiff::Tensor;

fn face(seed: u64) -> Sample {
    generate_face(seed, &FaceParams::default()).unwrap()
}

#[test]
fn faces_are_deterministic_and_in_range() {
    let (a, b) = (face(11), face(11));
    assert!(a.bitwise_eq(&b));
    assert!(!a.bitwise_eq(&face(12)));
    assert_eq!(a.image.shape(), &[3, 64, 64]);
    assert_eq!(a.landmarks.len(), 68);
    assert_eq!(a.label, Label::Real);
    assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn landmarks_stay_within_the_posed_face_box() {
    let params = FaceParams {
        landmark_sigma_px: 0.0,
        ..FaceParams::default()
    };
    // worst case over rotation ≤ 10°, scale ≤ 1.1, shift ≤ 4 px
    let (rx, ry) = (0.3, 0.38);
    let (s, c) = 10f64.to_radians().sin_cos();
    let half_x = 1.1 * (rx * c + ry * s) + 4.0 / 64.0;
    let half_y = 1.1 * (ry * c + rx * s) + 4.0 / 64.0;
    for seed in 0..50 {
        let f = generate_face(seed, &params).unwrap();
        for p in f.landmarks.coords() {
            assert!((p[0] as f64 - 0.5).abs() <= half_x + 1e-6);
            assert!((p[1] as f64 - 0.5).abs() <= half_y + 1e-6);
        }
    }
}

/// Mean pixel value over faces `0..1000`, measured once from a reference
/// run of the default generator.
const MEAN_PIXEL_REFERENCE: f64 = 0.38350;

#[test]
fn mean_pixel_value_matches_reference_band() {
    let mut total = 0.0;
    for seed in 0..1000 {
        let f = face(seed);
        total += f.image.data().iter().map(|&v| v as f64).sum::<f64>() / f.image.len() as f64;
    }
    let mean = total / 1000.0;
    assert!((mean - MEAN_PIXEL_REFERENCE).abs() < 2e-3, "mean pixel {mean}");
}

#[test]
fn encoder_input_statistics_match_the_generator() {
    let set = generate_dataset(300, 21, &FaceParams::default(), &ForgeParams::default()).unwrap();
    for c in 0..3 {
        let values: Vec<f64> = set
            .iter()
            .flat_map(|s| s.image.data()[c * 4096..(c + 1) * 4096].iter().map(|&v| v as f64))
            .collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
        assert!((mean - crate::encoder::PIXEL_MEAN[c]).abs() < 0.01, "channel {c} mean {mean}");
        assert!((var.sqrt() - crate::encoder::PIXEL_STD[c]).abs() < 0.01, "channel {c} std {}", var.sqrt());
    }
}

#[test]
fn identity_forgery_reproduces_the_real_image() {
    let real = face(3);
    let hull: Vec<usize> = template::blend_region().collect();
    let fake = apply_forgery(&real, &Forgery::identity(hull, 2.0)).unwrap();
    assert_eq!(fake.label, Label::Fake);
    assert!(fake.image.bitwise_eq(&real.image));
}

#[test]
fn zero_mask_keeps_the_real_image() {
    let real = face(4);
    let transformed = vec![0.25; real.image.len()];
    let out = composite(&real.image, &transformed, &vec![0.0; 64 * 64]).unwrap();
    assert!(out.bitwise_eq(&real.image));
    let out = composite(&real.image, &transformed, &vec![1.0; 64 * 64]).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.25));
}

/// Even-odd ray test, independent of the production convex-hull code.
fn in_polygon(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    let mut inside = false;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

#[test]
fn forgery_differences_stay_inside_the_dilated_hull() {
    let params = ForgeParams::default();
    for seed in 0..20u64 {
        let real = face(100 + seed);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let forgery = Forgery::draw(&mut rng, &params, &real.landmarks, 64).unwrap();
        let fake = apply_forgery(&real, &forgery).unwrap();
        let pts: Vec<[f64; 2]> = forgery
            .hull
            .iter()
            .map(|&i| {
                let c = real.landmarks.coords()[i];
                [c[0] as f64 * 64.0, c[1] as f64 * 64.0]
            })
            .collect();
        let hull = convex_hull(&pts);
        let radius = (3.0 * forgery.feather).ceil() as i64;
        let inside: Vec<bool> = (0..64 * 64)
            .map(|i| in_polygon(&hull, [(i % 64) as f64 + 0.5, (i / 64) as f64 + 0.5]))
            .collect();
        let mut changed = 0;
        for ch in 0..3 {
            for y in 0..64i64 {
                for x in 0..64i64 {
                    let i = (ch * 64 * 64 + y * 64 + x) as usize;
                    if fake.image.data()[i] == real.image.data()[i] {
                        continue;
                    }
                    changed += 1;
                    let near = (-radius..=radius).any(|dy| {
                        (-radius..=radius).any(|dx| {
                            let (sx, sy) = (x + dx, y + dy);
                            (0..64).contains(&sx) && (0..64).contains(&sy) && inside[(sy * 64 + sx) as usize]
                        })
                    });
                    assert!(near, "seed {seed}: change at ({x}, {y}) outside the dilated hull");
                }
            }
        }
        assert!(changed > 0, "seed {seed}: forgery changed nothing");
    }
}

#[test]
fn only_real_faces_can_be_forged() {
    let fake = forge_face(&face(5), 1, &ForgeParams::default()).unwrap();
    assert!(matches!(forge_face(&fake, 2, &ForgeParams::default()), Err(Error::Generation(_))));
}

#[test]
fn collapsed_landmarks_give_generation_error() {
    let mut real = face(6);
    real.landmarks = LandmarkSet::new(vec![[0.5, 0.5]; 68]).unwrap();
    let err = forge_face(&real, 1, &ForgeParams::default()).unwrap_err();
    assert!(matches!(err, Error::Generation(_)));
}

#[test]
fn hull_drops_interior_and_collinear_points() {
    let pts = [[0.0, 0.0], [2.0, 0.0], [1.0, 0.0], [2.0, 2.0], [0.0, 2.0], [1.0, 1.0]];
    let hull = convex_hull(&pts);
    assert_eq!(hull.len(), 4);
    assert!(!hull.contains(&[1.0, 1.0]) && !hull.contains(&[1.0, 0.0]));
    assert_eq!(convex_hull(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]).len(), 2);
}

#[test]
fn dataset_is_balanced_paired_and_deterministic() {
    let a = generate_dataset(6, 9, &FaceParams::default(), &ForgeParams::default()).unwrap();
    let b = generate_dataset(6, 9, &FaceParams::default(), &ForgeParams::default()).unwrap();
    assert_eq!(a.len(), 12);
    assert_eq!(a.iter().filter(|s| s.label.is_fake()).count(), 6);
    for (x, y) in a.iter().zip(&b) {
        assert!(x.bitwise_eq(y));
    }
    for pair in a.chunks(2) {
        assert_eq!((pair[0].label, pair[1].label), (Label::Real, Label::Fake));
        assert_eq!(pair[0].landmarks, pair[1].landmarks);
    }
    let reals: Vec<_> = a.iter().step_by(2).collect();
    assert!(reals.windows(2).all(|w| !w[0].bitwise_eq(w[1])));
}

fn auc_by_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &p) in scores.iter().enumerate().filter(|(i, _)| labels[*i]) {
        let _ = i;
        for (j, &n) in scores.iter().enumerate() {
            if !labels[j] {
                pairs += 1.0;
                wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

#[test]
fn raw_pixel_statistics_do_not_separate_the_classes() {
    let data = generate_dataset(150, 21, &FaceParams::default(), &ForgeParams::default()).unwrap();
    let labels: Vec<bool> = data.iter().map(|s| s.label.is_fake()).collect();
    let stat = |f: &dyn Fn(&[f32]) -> f64| -> f64 {
        let scores: Vec<f64> = data.iter().map(|s| f(s.image.data())).collect();
        let auc = auc_by_pairs(&scores, &labels);
        auc.max(1.0 - auc)
    };
    let mean = |d: &[f32]| d.iter().map(|&v| v as f64).sum::<f64>();
    let gradient = |d: &[f32]| d.windows(2).map(|w| (w[1] as f64 - w[0] as f64).abs()).sum::<f64>();
    let asymmetry = |d: &[f32]| {
        let mut acc = 0.0;
        for row in d.chunks(64) {
            for x in 0..32 {
                acc += (row[x] as f64 - row[63 - x] as f64).abs();
            }
        }
        acc
    };
    for (name, auc) in [("mean", stat(&mean)), ("gradient", stat(&gradient)), ("asymmetry", stat(&asymmetry))] {
        assert!(auc < 0.9, "{name} statistic reaches AUC {auc}");
    }
}

#[test]
fn empty_dataset_is_just_a_header() {
    let bytes = encode(&[]).unwrap();
    assert_eq!(bytes.len(), HEADER_LEN);
    assert_eq!(&bytes[..4], b"LKDS");
    assert!(decode(&bytes).unwrap().is_empty());
}

#[test]
fn hand_built_file_parses() {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(b"LKDS");
    bytes.extend_from_slice(&[1, 0, 0, 0]);
    bytes.extend_from_slice(&[1, 0, 0, 0]);
    bytes.extend_from_slice(&[1, 0]); // H
    bytes.extend_from_slice(&[2, 0]); // W
    bytes.push(1); // C
    bytes.push(1); // label
    bytes.extend_from_slice(&[1, 0]); // N_lm
    bytes.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f]); // 1.0
    bytes.extend_from_slice(&[0x00, 0x00, 0x00, 0x3f]); // 0.5
    bytes.extend_from_slice(&[0x00, 0x00, 0x80, 0x3e]); // 0.25
    bytes.extend_from_slice(&[0x00, 0x00, 0x40, 0x3f]); // 0.75
    let samples = decode(&bytes).unwrap();
    assert_eq!(samples.len(), 1);
    let s = &samples[0];
    assert_eq!(s.label, Label::Fake);
    assert_eq!(s.image.shape(), &[1, 1, 2]);
    assert_eq!(s.image.data(), &[1.0, 0.5]);
    assert_eq!(s.landmarks.coords(), &[[0.25, 0.75]]);
    assert_eq!(encode(&samples).unwrap(), bytes);
}

#[test]
fn ten_samples_round_trip_through_a_file() {
    let samples = generate_dataset(5, 2, &FaceParams::default(), &ForgeParams::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.lkds");
    write_dataset(&samples, &path).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back.len(), 10);
    for (a, b) in samples.iter().zip(&back) {
        assert!(a.bitwise_eq(b));
    }
}

#[test]
fn malformed_files_report_offsets() {
    let samples = generate_dataset(1, 2, &FaceParams::default(), &ForgeParams::default()).unwrap();
    let good = encode(&samples).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));

    let mut bad = good.clone();
    bad[4] = 2;
    assert!(matches!(decode(&bad), Err(Error::Format { offset: 4, .. })));

    let cut = good.len() - 3;
    match decode(&good[..cut]) {
        Err(Error::Format { offset, message }) => {
            assert!(offset > HEADER_LEN as u64 && offset < cut as u64);
            assert!(message.contains("truncated"));
        }
        other => panic!("expected truncation error, got {other:?}"),
    }

    let mut bad = good.clone();
    bad[8] = 3; // claims three samples
    assert!(matches!(decode(&bad), Err(Error::Format { .. })));

    let mut bad = good.clone();
    bad.push(0);
    assert!(matches!(decode(&bad), Err(Error::Format { .. })));
}

#[test]
fn writer_rejects_mixed_geometry() {
    let a = face(1);
    let mut b = face(2);
    b.image = Tensor::zeros([3, 32, 32]);
    assert!(matches!(encode(&[a, b]), Err(Error::Validation(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn arbitrary_samples_round_trip(
        h in 1usize..5,
        w in 1usize..5,
        c in 1usize..4,
        n_lm in 0usize..4,
        count in 0usize..4,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<Sample> = (0..count)
            .map(|_| Sample {
                image: Tensor::new([c, h, w], (0..c * h * w).map(|_| rng.random::<f32>()).collect()).unwrap(),
                landmarks: LandmarkSet::new((0..n_lm).map(|_| [rng.random::<f32>(), rng.random::<f32>()]).collect()).unwrap(),
                label: if rng.random::<bool>() { Label::Fake } else { Label::Real },
            })
            .collect();
        let bytes = encode(&samples).unwrap();
        prop_assert_eq!(bytes.len(), HEADER_LEN + count * (8 + 4 * (c * h * w + 2 * n_lm)));
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), count);
        for (a, b) in samples.iter().zip(&back) {
            prop_assert!(a.bitwise_eq(b));
        }
    }
}
