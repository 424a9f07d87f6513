use std::fs;

use calibseg::synthdata::{dataset_sample, make_dataset, parse_manifest, Dataset, SceneSpec, SplitCounts};
use proptest::prelude::*;

fn small_spec() -> SceneSpec {
    SceneSpec { height: 32, width: 32, semi_axis: calibseg::transforms::Range::new(4.0, 8.0), ..SceneSpec::default() }
}

const COUNTS: SplitCounts = SplitCounts { train: 3, val: 2, test: 2 };

#[test]
fn regeneration_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    make_dataset(a.path(), 7, COUNTS, &small_spec(), false).unwrap();
    make_dataset(b.path(), 7, COUNTS, &small_spec(), false).unwrap();
    for rel in ["manifest.txt", "spec.toml", "train/0002_image.tnsr", "test/0001_soft.tnsr", "val/0000_label.tnsr"] {
        assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel}");
    }
    let c = tempfile::tempdir().unwrap();
    make_dataset(c.path(), 8, COUNTS, &small_spec(), false).unwrap();
    assert_ne!(fs::read(a.path().join("train/0000_image.tnsr")).unwrap(), fs::read(c.path().join("train/0000_image.tnsr")).unwrap());
}

#[test]
fn manifest_describes_the_directory() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path(), 3, COUNTS, &small_spec(), false).unwrap();
    let m = parse_manifest(&fs::read_to_string(dir.path().join("manifest.txt")).unwrap()).unwrap();
    assert_eq!(m["seed"], "3");
    assert_eq!(m["spec_hash"], small_spec().hash());
    assert_eq!(m.keys().filter(|k| k.starts_with("sample.")).count(), 7);
    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.counts, COUNTS);
    let loaded = ds.load_sample("train", 1).unwrap();
    let fresh = dataset_sample(3, 0, 1, &small_spec()).unwrap();
    assert_eq!(loaded.image.data(), fresh.image.data());
    assert_eq!(loaded.hard_label, fresh.hard_label);
    assert_eq!(loaded.soft_label, fresh.soft_label);
    assert!(ds.load_sample("train", 3).is_err());
    assert!(ds.load_sample("holdout", 0).is_err());
}

#[test]
fn existing_output_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path(), 1, COUNTS, &small_spec(), false).unwrap();
    assert!(make_dataset(dir.path(), 1, COUNTS, &small_spec(), false).is_err());
    make_dataset(dir.path(), 2, COUNTS, &small_spec(), true).unwrap();
    assert_eq!(Dataset::open(dir.path()).unwrap().seed, 2);
}

#[test]
fn tampered_spec_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path(), 1, COUNTS, &small_spec(), false).unwrap();
    let spec = SceneSpec { jitter: 0.5, ..small_spec() };
    fs::write(dir.path().join("spec.toml"), spec.to_toml()).unwrap();
    assert!(Dataset::open(dir.path()).is_err());
}

#[test]
fn ambiguity_concentrates_at_boundaries() {
    let spec = SceneSpec::default();
    let (mut edge, mut edge_n, mut inner, mut inner_n) = (0.0, 0, 0.0, 0);
    for i in 0..10 {
        let s = dataset_sample(11, 0, i, &spec).unwrap();
        let (h, w) = (spec.height, spec.width);
        let lab = &s.hard_label;
        for y in 3..h - 3 {
            for x in 3..w - 3 {
                let c = lab.get(y, x);
                let mut near = false;
                let mut far = true;
                for dy in -3i64..=3 {
                    for dx in -3i64..=3 {
                        let other = lab.get((y as i64 + dy) as usize, (x as i64 + dx) as usize) != c;
                        far &= !other;
                        near |= other && dy.abs() <= 1 && dx.abs() <= 1;
                    }
                }
                let j = y * w + x;
                let top = (0..3).map(|k| s.soft_label.prob(k, j)).fold(0.0f32, f32::max) as f64;
                if near {
                    edge += top;
                    edge_n += 1;
                } else if far {
                    inner += top;
                    inner_n += 1;
                }
            }
        }
    }
    let (edge, inner) = (edge / edge_n as f64, inner / inner_n as f64);
    assert!(edge < 0.85 && inner > 0.9, "boundary confidence {edge:.3}, interior {inner:.3}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn samples_are_well_formed(seed in any::<u64>(), index in 0usize..1000) {
        let spec = small_spec();
        let s = dataset_sample(seed, 0, index, &spec).unwrap();
        prop_assert_eq!(s.image.shape(), &[1, 32, 32]);
        prop_assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for j in 0..32 * 32 {
            let sum: f32 = (0..3).map(|k| s.soft_label.prob(k, j)).sum();
            prop_assert!((sum - 1.0).abs() < 1e-5);
        }
        prop_assert!(s.hard_label.data().iter().all(|&c| c < 3));
    }
}
