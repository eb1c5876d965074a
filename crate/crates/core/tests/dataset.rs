use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refnet::affine::AffineRanges;
use refnet::dataset::{
    augment, build_splits, read_mask, sample_supervised, sample_training_batch, write_mask, AugmentPolicy, DataConfig,
    Dataset, DatasetIndex, Split, TrainingData,
};
use refnet::image::{BinaryMask, Image};
use refnet::synth::Shape;

fn small_config() -> DataConfig {
    DataConfig {
        target_count: 40,
        open_source_count: 12,
        heldout_count: 6,
        references_per_category: 4,
        ..Default::default()
    }
}

fn build(cfg: &DataConfig, seed: u64, dir: &Path) -> DatasetIndex {
    build_splits(cfg, seed, dir).unwrap()
}

#[test]
fn reference_count_and_disjointness() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DataConfig {
        target_categories: vec![Shape::Circle, Shape::Square],
        target_count: 80,
        open_source_count: 4,
        heldout_count: 2,
        references_per_category: 10,
        ..Default::default()
    };
    let index = build(&cfg, 1, dir.path());
    assert_eq!(index.split(Split::Reference).count(), 20);
    let target = index.categories(Split::Target);
    let open = index.categories(Split::OpenSource);
    assert!(target.is_disjoint(&open));
    assert!(index.categories(Split::Reference).is_subset(&target));

    let overlapping = DataConfig {
        open_source_categories: vec![Shape::Circle, Shape::Star],
        ..DataConfig::default()
    };
    assert!(build_splits(&overlapping, 1, dir.path()).is_err());
    assert!(DataConfig::default().validate().is_ok());
}

#[test]
fn regeneration_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = small_config();
    let ia = build(&cfg, 9, a.path());
    let ib = build(&cfg, 9, b.path());
    assert_eq!(ia.checksum().unwrap(), ib.checksum().unwrap());
    let read = |d: &Path, rel: &str| std::fs::read(d.join(rel)).unwrap();
    assert_eq!(read(a.path(), "index.jsonl"), read(b.path(), "index.jsonl"));
    for r in ia.records.iter().take(10) {
        assert_eq!(read(a.path(), &r.path), read(b.path(), &r.path));
    }
    let c = tempfile::tempdir().unwrap();
    assert_ne!(build(&cfg, 10, c.path()).checksum().unwrap(), ia.checksum().unwrap());
}

#[test]
fn records_decode_consistently() {
    let dir = tempfile::tempdir().unwrap();
    build(&small_config(), 2, dir.path());
    let ds = Dataset::open(dir.path()).unwrap();
    for (i, r) in ds.index().records.iter().enumerate() {
        assert!(!r.categories.is_empty());
        for c in &r.categories {
            let m = ds.mask(i, c).unwrap();
            assert_eq!(m.hw(), ds.image(i).hw());
            assert!(m.count() > 0);
        }
    }
}

#[test]
fn non_binary_mask_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.png");
    image::GrayImage::from_fn(4, 4, |x, _| image::Luma([x as u8 * 60])).save(&path).unwrap();
    assert!(read_mask(&path).is_err());
    let m = BinaryMask::from_fn(4, 4, |y, x| y > x);
    write_mask(&m, &path).unwrap();
    assert_eq!(read_mask(&path).unwrap(), m);
}

#[test]
fn training_never_reads_target_or_heldout_masks() {
    let dir = tempfile::tempdir().unwrap();
    build(&small_config(), 3, dir.path());
    let ds = Dataset::open(dir.path()).unwrap();
    let data = TrainingData::load(&ds, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        sample_training_batch(&data, &mut rng, 4, 0.25).unwrap();
    }
    assert_eq!(ds.mask_reads(Split::Target), 0);
    assert_eq!(ds.mask_reads(Split::Heldout), 0);
    assert!(ds.mask_reads(Split::Reference) > 0);
    assert!(ds.mask_reads(Split::OpenSource) > 0);
}

#[test]
fn k_subsamples_references() {
    let dir = tempfile::tempdir().unwrap();
    build(&small_config(), 4, dir.path());
    let ds = Dataset::open(dir.path()).unwrap();
    let data = TrainingData::load(&ds, Some(1)).unwrap();
    assert_eq!(data.references.len(), 3);
    assert!(data.references.values().all(|v| v.len() == 1));
    assert_eq!(data.labeled.len(), 3);
    assert!(TrainingData::load(&ds, Some(5)).is_err());
    assert!(TrainingData::load(&ds, Some(0)).is_err());
}

#[test]
fn negative_pair_rules() {
    let dir = tempfile::tempdir().unwrap();
    build(&small_config(), 5, dir.path());
    let ds = Dataset::open(dir.path()).unwrap();
    let data = TrainingData::load(&ds, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    for p in sample_supervised(&data, &mut rng, 200, 0.0).unwrap() {
        assert!(!p.negative && p.gt.count() > 0);
    }
    for p in sample_supervised(&data, &mut rng, 200, 1.0).unwrap() {
        assert!(p.negative && p.gt.count() == 0);
        let owner = data.labeled.iter().find(|l| l.image == p.target).unwrap();
        assert!(!owner.masks.contains_key(&p.category));
    }
    let draws = sample_supervised(&data, &mut rng, 10_000, 0.25).unwrap();
    let frac = draws.iter().filter(|p| p.negative).count() as f64 / draws.len() as f64;
    assert!((frac - 0.25).abs() <= 0.02, "{frac}");
    assert!(sample_training_batch(&data, &mut rng, 2, 1.5).is_err());
    assert!(sample_training_batch(&data, &mut rng, 2, -0.1).is_err());
}

fn disk(h: usize, r: f64) -> BinaryMask {
    let c = (h as f64 - 1.0) / 2.0;
    BinaryMask::from_fn(h, h, |y, x| (y as f64 - c).powi(2) + (x as f64 - c).powi(2) <= r * r)
}

#[test]
fn disabled_policy_and_double_flip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Image::from_fn(16, 16, 3, |c, y, x| ((c + y * 3 + x * 7) % 11) as f32 / 10.0);
    let m = BinaryMask::from_fn(16, 16, |y, x| x > y + 2);
    let (a, b) = augment(&x, &m, &mut rng, &AugmentPolicy::disabled()).unwrap();
    assert_eq!((a, b), (x.clone(), m.clone()));

    let flip = AugmentPolicy {
        geometric: AffineRanges {
            flip_prob: 1.0,
            ..AffineRanges::none()
        },
        brightness: 0.0,
        contrast: 0.0,
        noise: 0.0,
        ..Default::default()
    };
    let (a, b) = augment(&x, &m, &mut rng, &flip).unwrap();
    assert_ne!(b, m);
    let (a, b) = augment(&a, &b, &mut rng, &flip).unwrap();
    assert_eq!((a, b), (x, m));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn augmented_mask_stays_binary_and_bounded(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Image::from_fn(64, 64, 3, |_, _, _| 0.5);
        let m = disk(64, 12.0);
        let (img, out) = augment(&x, &m, &mut rng, &AugmentPolicy::default()).unwrap();
        prop_assert!(out.data().iter().all(|&v| v <= 1));
        prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let ratio = out.count() as f64 / m.count() as f64;
        prop_assert!((0.5..=2.0).contains(&ratio), "{}", ratio);
    }
}
