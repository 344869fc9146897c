use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use dprune::data::{compression_ratio, epoch_order_n, load_idx, make_blobs, parse_idx, LabeledDataset, Role};
use dprune::mask::SparsityMask;
use dprune::model::{Arch, ModelState};
use dprune::train::{evaluate, train, EarlyStop, TrainRecipe};
use dprune::Error;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn idx_fixture_of_100_examples() {
    let ds = load_idx(&fixture("tiny-images.idx3-ubyte"), &fixture("tiny-labels.idx1-ubyte")).unwrap();
    assert_eq!(ds.len(), 100);
    assert_eq!(ds.features.shape(), &[100, 1, 2, 2]);
    assert_eq!(ds.role, Role::RealTrain);
    assert_eq!(ds.class_count, 10);
    assert_eq!(ds.ipc, 10);
    // Pixel p of image i was written as (7i + 61p) mod 256.
    for i in [0usize, 1, 37, 99] {
        for p in 0..4 {
            let want = ((i * 7 + p * 61) % 256) as f32 / 255.0;
            assert_eq!(ds.features.data()[i * 4 + p], want);
        }
        assert_eq!(ds.labels[i], i % 10);
    }
}

fn images(n: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [0x803u32, n, 2, 2] {
        b.extend(v.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

fn labels(ls: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [0x801u32, ls.len() as u32] {
        b.extend(v.to_be_bytes());
    }
    b.extend_from_slice(ls);
    b
}

#[test]
fn idx_scaling_endpoints() {
    let px: Vec<u8> = (0..16).map(|i| if i % 3 == 0 { 255 } else { 0 }).collect();
    let ds = parse_idx(&images(4, &px), &labels(&[0, 1, 0, 1])).unwrap();
    for (&f, &b) in ds.features.data().iter().zip(&px) {
        assert_eq!(f, if b == 255 { 1.0 } else { 0.0 });
    }
}

#[test]
fn idx_errors_name_the_field() {
    let px = vec![0u8; 20];
    let field = |r: dprune::Result<LabeledDataset>| match r {
        Err(Error::Format { field, .. }) => field,
        other => panic!("expected format error, got {other:?}"),
    };
    assert_eq!(field(parse_idx(&images(5, &px), &labels(&[0, 1, 0, 1]))), "labels.count");
    let mut bad = images(4, &px[..16]);
    bad[3] = 0x04;
    assert_eq!(field(parse_idx(&bad, &labels(&[0, 1, 0, 1]))), "images.magic");
    assert_eq!(field(parse_idx(&images(4, &px[..10]), &labels(&[0, 1, 0, 1]))), "images.payload");
}

#[test]
fn permutations_differ_across_seeds() {
    let a = epoch_order_n(1000, 1, 0).permutation;
    let b = epoch_order_n(1000, 2, 0).permutation;
    let differ = a.iter().zip(&b).filter(|(x, y)| x != y).count();
    assert!(differ >= 900, "only {differ} positions differ");
    assert_ne!(epoch_order_n(1000, 1, 1).permutation, a);
    assert_eq!(epoch_order_n(1, 9, 4).permutation, vec![0]);
}

proptest! {
    #[test]
    fn epoch_orders_are_bijections(n in 1usize..500, seed in any::<u64>(), epoch in 0u32..50) {
        let p = epoch_order_n(n, seed, epoch).permutation;
        let mut seen = vec![false; n];
        for &i in &p {
            prop_assert!(i < n && !seen[i]);
            seen[i] = true;
        }
        prop_assert_eq!(p, epoch_order_n(n, seed, epoch).permutation);
    }

    #[test]
    fn blobs_are_deterministic_and_normalized(classes in 1usize..5, per in 1usize..20, dim in 1usize..6, seed in any::<u64>()) {
        let a = make_blobs(classes, per, dim, 0.7, seed).unwrap();
        let b = make_blobs(classes, per, dim, 0.7, seed).unwrap();
        prop_assert_eq!(a.features.data(), b.features.data());
        prop_assert!(a.features.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(a.ipc, per);
    }
}

#[test]
fn zero_spread_collapses_classes() {
    let ds = make_blobs(3, 5, 4, 0.0, 2).unwrap();
    for (c, idx) in ds.class_indices().iter().enumerate() {
        let first = &ds.features.data()[idx[0] * 4..idx[0] * 4 + 4];
        for &i in idx {
            assert_eq!(&ds.features.data()[i * 4..i * 4 + 4], first, "class {c}");
        }
    }
}

#[test]
fn compression_ratios() {
    assert_eq!(compression_ratio(5000, 10).unwrap().ratio(), 500.0);
    assert_eq!(compression_ratio(500, 10).unwrap().ratio(), 50.0);
    assert_eq!(compression_ratio(37, 37).unwrap().ratio(), 1.0);
    assert!(compression_ratio(500, 0).is_err());
}

fn row_hashes(ds: &LabeledDataset) -> HashSet<String> {
    let w = ds.features.row_len();
    ds.features
        .data()
        .chunks(w)
        .map(|r| {
            let mut h = Sha256::new();
            for v in r {
                h.update(v.to_le_bytes());
            }
            hex::encode(h.finalize())
        })
        .collect()
}

#[test]
fn splits_share_no_example() {
    let all = make_blobs(3, 100, 5, 1.0, 4).unwrap();
    let (train_set, val) = all.holdout(0.2, Role::Validation).unwrap();
    assert_eq!(val.role, Role::Validation);
    assert_eq!(val.ipc, 20);
    assert_eq!(train_set.ipc, 80);
    assert!(row_hashes(&train_set).is_disjoint(&row_hashes(&val)));

    let a = all.take_per_class(0, 60, Role::RealTrain).unwrap();
    let b = all.take_per_class(60, 40, Role::Test).unwrap();
    assert!(row_hashes(&a).is_disjoint(&row_hashes(&b)));
    assert!(all.take_per_class(90, 20, Role::Test).is_err());
}

#[test]
fn container_round_trip() {
    let ds = make_blobs(2, 6, 3, 0.5, 8).unwrap().with_role(Role::Synthetic);
    let dir = tempfile::tempdir().unwrap();
    let mut prov = BTreeMap::new();
    prov.insert("bank".to_string(), "abc".to_string());
    ds.save(dir.path(), Some(8), prov.clone()).unwrap();
    let (back, manifest) = LabeledDataset::load(dir.path()).unwrap();
    assert_eq!(back.features.data(), ds.features.data());
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.role, Role::Synthetic);
    assert_eq!(manifest.ipc, 6);
    assert_eq!(manifest.provenance, prov);
    let labels_bytes = std::fs::read(dir.path().join("labels.i64")).unwrap();
    assert_eq!(labels_bytes.len(), 12 * 8);
    assert_eq!(i64::from_le_bytes(labels_bytes[88..96].try_into().unwrap()), 1);
}

#[test]
fn default_blobs_task_is_learnable() {
    let all = make_blobs(2, 700, 20, 1.0, 7).unwrap();
    let train_set = all.take_per_class(0, 500, Role::RealTrain).unwrap();
    let test = all.take_per_class(600, 100, Role::Test).unwrap();
    let arch = Arch::mlp(20, &[256], 2).unwrap();
    let recipe = TrainRecipe {
        lr: 0.1,
        momentum: 0.9,
        weight_decay: 0.0,
        epochs: 20,
        batch_size: 64,
        order_seed: 0,
        checkpoint_epochs: vec![],
        early_stop: Some(EarlyStop::default()),
    };
    let init = ModelState::init(&arch, 0);
    let out = train(&init, &SparsityMask::dense(&arch), &train_set, &recipe).unwrap();
    let acc = evaluate(&out.state, &test).unwrap().accuracy;
    assert!(out.epoch_losses.len() <= 20);
    assert!(acc >= 0.95, "test accuracy {acc}");
}
