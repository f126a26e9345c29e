use glims::data::phantom::{default_means, PhantomSpec};
use glims::data::sample::{flip, reflect_pad, sample_patch, stack};
use glims::data::volume::{LabelVolume, Volume, HEADER_LEN};
use glims::data::{generate, train_count, Dataset};
use glims::error::FormatError;
use glims::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_spec(seed: u64) -> PhantomSpec {
    PhantomSpec {
        seed,
        dims: [20, 18, 16],
        ..PhantomSpec::default()
    }
}

#[test]
fn volume_bytes_match_a_hand_built_fixture() {
    let v = Volume::new(1, [1, 1, 2], [1.0, 2.0, 0.5], vec![1.5, -2.0]).unwrap();
    let mut want = b"GLVOL1".to_vec();
    for u in [1u32, 1, 1, 1, 2] {
        want.extend_from_slice(&u.to_le_bytes());
    }
    for f in [1.0f32, 2.0, 0.5] {
        want.extend_from_slice(&f.to_le_bytes());
    }
    want.push(0);
    assert_eq!(want.len(), HEADER_LEN);
    for f in [1.5f32, -2.0] {
        want.extend_from_slice(&f.to_le_bytes());
    }
    assert_eq!(v.to_bytes(), want);

    let l = LabelVolume::new([1, 1, 3], [1.0; 3], vec![0, 3, 1]).unwrap();
    let bytes = l.to_bytes();
    assert_eq!(bytes[HEADER_LEN - 1], 1);
    assert_eq!(&bytes[HEADER_LEN..], &[0, 3, 1]);
}

#[test]
fn volumes_roundtrip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = small_spec(3).generate().unwrap();
    let (ip, lp) = (dir.path().join("img.glvol"), dir.path().join("lab.glvol"));
    p.image.write(&ip).unwrap();
    p.labels.write(&lp).unwrap();
    assert_eq!(Volume::read(&ip).unwrap(), p.image);
    assert_eq!(LabelVolume::read(&lp).unwrap(), p.labels);
}

fn format_err(r: glims::Result<impl std::fmt::Debug>) -> FormatError {
    match r {
        Err(Error::Format(f)) => f,
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn every_corruption_has_its_own_error() {
    let good = Volume::new(2, [2, 2, 2], [1.0; 3], vec![0.25; 16]).unwrap().to_bytes();
    let patch = |at: usize, bytes: &[u8]| {
        let mut b = good.clone();
        b[at..at + bytes.len()].copy_from_slice(bytes);
        b
    };
    let cases: Vec<(Vec<u8>, &str)> = vec![
        (patch(0, b"GLVOL2"), "bad magic"),
        (good[..20].to_vec(), "header is truncated"),
        (patch(6, &2u32.to_le_bytes()), "unsupported format version 2"),
        (patch(38, &[7]), "unknown dtype tag 7"),
        (patch(38, &[1]), "expected dtype f32, found u8"),
        (good[..good.len() - 1].to_vec(), "payload shorter than header promise"),
        ([good.clone(), vec![0]].concat(), "payload longer than header promise"),
        (patch(14, &0u32.to_le_bytes()), "must be positive"),
    ];
    let mut messages = Vec::new();
    for (bytes, want) in cases {
        let err = format_err(Volume::from_bytes(&bytes));
        let msg = err.to_string();
        assert!(msg.contains(want), "{msg:?} lacks {want:?}");
        messages.push(std::mem::discriminant(&err));
    }
    // no two corruptions share a variant
    let unique: std::collections::HashSet<_> = messages.iter().collect();
    assert_eq!(unique.len(), messages.len());
}

#[test]
fn truncated_file_reports_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.glvol");
    let bytes = Volume::new(1, [2, 2, 2], [1.0; 3], vec![0.0; 8]).unwrap().to_bytes();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let err = Volume::read(&path).err().unwrap();
    assert_eq!(
        err.to_string(),
        "payload shorter than header promise: expected 32 bytes, got 29"
    );
    let missing = Volume::read(&dir.path().join("nope.glvol")).err().unwrap();
    assert!(matches!(missing, Error::Io { .. }));
}

#[test]
fn label_volumes_check_class_range() {
    let l = LabelVolume::new([1, 1, 3], [1.0; 3], vec![0, 3, 1]).unwrap();
    assert!(l.check_classes(4).is_ok());
    assert!(matches!(
        l.check_classes(3),
        Err(Error::LabelOutOfRange { label: 3, classes: 3 })
    ));
}

#[test]
fn phantoms_are_deterministic_per_seed() {
    let a = small_spec(7).generate().unwrap();
    assert_eq!(a, small_spec(7).generate().unwrap());
    assert_ne!(a.image, small_spec(8).generate().unwrap().image);
}

#[test]
fn noiseless_intensity_is_a_function_of_the_label() {
    let spec = PhantomSpec {
        noise_sigma: 0.0,
        ..small_spec(1)
    };
    let p = spec.generate().unwrap();
    let means = default_means(4, 4);
    let n = p.labels.data.len();
    for c in 0..4 {
        for (v, &l) in p.labels.data.iter().enumerate() {
            assert_eq!(p.image.data[c * n + v], means[l as usize][c]);
        }
    }
    for k in 0..4u8 {
        assert!(p.labels.data.contains(&k), "class {k} missing");
    }
}

#[test]
fn regions_are_nested() {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    for seed in 0..20 {
        let p = small_spec(seed).generate().unwrap();
        for pair in p.regions.windows(2) {
            let (parent, child) = (&pair[0], &pair[1]);
            for _ in 0..500 {
                // random point on the child's surface
                let dir: [f64; 3] = [0; 3].map(|_| r.random_range(-1.0..1.0));
                let len = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-9);
                let q = [0, 1, 2].map(|a| child.center[a] + child.axes[a] * dir[a] / len);
                assert!(parent.norm2(q) <= 1.0 + 1e-9, "seed {seed}");
            }
        }
    }
}

#[test]
fn region_volumes_match_the_ellipsoids() {
    let p = PhantomSpec {
        seed: 5,
        ..PhantomSpec::default()
    }
    .generate()
    .unwrap();
    for (k, e) in p.regions.iter().enumerate() {
        let count = p.labels.data.iter().filter(|&&l| l as usize > k).count() as f64;
        let rel = (count - e.volume()).abs() / e.volume();
        assert!(rel < 0.1, "region {k}: {count} voxels vs {}", e.volume());
    }
}

#[test]
fn infeasible_phantoms_are_rejected() {
    let spec = PhantomSpec {
        inner_scale: (0.9, 1.2),
        ..small_spec(0)
    };
    let err = spec.generate().err().unwrap();
    assert!(err.to_string().contains("inner scale"), "{err}");
    let tiny = PhantomSpec {
        dims: [8, 32, 32],
        ..small_spec(0)
    };
    assert!(matches!(tiny.validate(), Err(Error::InvalidConfig(_))));
}

#[test]
fn patch_of_full_extent_starts_at_the_origin() {
    let p = PhantomSpec {
        dims: [16; 3],
        ..small_spec(2)
    }
    .generate()
    .unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let patch = sample_patch(&p.image, &p.labels, 16, &mut r).unwrap();
    assert_eq!(patch.corner, [0; 3]);
    assert_eq!(patch.image, p.image);
    assert_eq!(patch.labels, p.labels);
}

#[test]
fn patch_corners_are_reproducible_and_contents_match() {
    let p = small_spec(4).generate().unwrap();
    let draw = |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..5)
            .map(|_| sample_patch(&p.image, &p.labels, 12, &mut r).unwrap())
            .collect::<Vec<_>>()
    };
    let (a, b) = (draw(9), draw(9));
    assert_eq!(a, b);
    let [_, h, w] = p.labels.dims;
    for patch in &a {
        let [z0, y0, x0] = patch.corner;
        for z in 0..12 {
            for y in 0..12 {
                for x in 0..12 {
                    let src = ((z0 + z) * h + y0 + y) * w + x0 + x;
                    assert_eq!(patch.labels.data[(z * 12 + y) * 12 + x], p.labels.data[src]);
                }
            }
        }
    }
}

#[test]
fn patch_corners_are_uniform() {
    // extent 100, patch 96: five possible corners per axis
    let img = Volume::new(1, [100; 3], [1.0; 3], vec![0.0; 1_000_000]).unwrap();
    let lab = LabelVolume::new([100; 3], [1.0; 3], vec![0; 1_000_000]).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let mut counts = [[0usize; 5]; 3];
    let draws = 1000;
    for _ in 0..draws {
        let c = sample_patch(&img, &lab, 96, &mut r).unwrap().corner;
        for a in 0..3 {
            counts[a][c[a]] += 1;
        }
    }
    // chi-square with 4 degrees of freedom, 1% critical value
    let critical = 13.277;
    let expected = draws as f64 / 5.0;
    for row in counts {
        let chi2: f64 = row.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < critical, "{row:?} chi2 {chi2}");
    }
}

#[test]
fn small_volumes_are_reflect_padded() {
    let img = Volume::new(1, [3, 1, 2], [1.0; 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    let (padded, _) = reflect_pad(&img, None, 5).unwrap();
    assert_eq!(padded.dims, [5, 5, 5]);
    // z axis: 0 1 2 1 0; y has one voxel; x: 0 1 0 1 0
    let at = |z: usize, y: usize, x: usize| padded.data[(z * 5 + y) * 5 + x];
    assert_eq!([0, 1, 2, 3, 4].map(|z| at(z, 0, 0)), [0.0, 2.0, 4.0, 2.0, 0.0]);
    assert_eq!([0, 1, 2, 3, 4].map(|x| at(1, 3, x)), [2.0, 3.0, 2.0, 3.0, 2.0]);
}

#[test]
fn flipping_twice_is_identity() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let orig: Vec<u32> = (0..2 * 3 * 4 * 5).collect();
    for _ in 0..8 {
        let axes = [r.random_bool(0.5), r.random_bool(0.5), r.random_bool(0.5)];
        let mut d = orig.clone();
        flip(&mut d, [3, 4, 5], 2, axes);
        if axes.contains(&true) {
            assert_ne!(d, orig);
        }
        flip(&mut d, [3, 4, 5], 2, axes);
        assert_eq!(d, orig);
    }
    let mut d: Vec<u32> = (0..4).collect();
    flip(&mut d, [1, 1, 4], 1, [false, false, true]);
    assert_eq!(d, [3, 2, 1, 0]);
}

#[test]
fn batches_stack_in_order() {
    let p = small_spec(6).generate().unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let patches: Vec<_> = (0..2)
        .map(|_| sample_patch(&p.image, &p.labels, 8, &mut r).unwrap())
        .collect();
    let (x, labels) = stack(&patches).unwrap();
    assert_eq!(x.shape(), &[2, 4, 8, 8, 8]);
    assert_eq!(&x.data()[2048..], &patches[1].image.data[..]);
    assert_eq!(&labels[512..], &patches[1].labels.data[..]);
}

#[test]
fn dataset_generation_is_reproducible_and_split() {
    assert_eq!([0, 1, 2, 4, 5, 10].map(train_count), [0, 1, 1, 3, 4, 8]);
    let spec = PhantomSpec {
        dims: [16; 3],
        ..PhantomSpec::default()
    };
    let a = generate(&spec, 100, 5).unwrap();
    assert_eq!(a, generate(&spec, 100, 5).unwrap());
    assert_eq!((a.train.len(), a.val.len()), (4, 1));
    // case i uses seed 100 + i
    let third = PhantomSpec {
        seed: 102,
        ..spec.clone()
    }
    .generate()
    .unwrap();
    assert_eq!(a.train[2].image, third.image);

    let dir = tempfile::tempdir().unwrap();
    a.write(dir.path(), &spec, 100).unwrap();
    assert_eq!(Dataset::read(dir.path()).unwrap(), a);
}
