mod common;

use std::collections::HashSet;
use std::fs;

use common::TABLES;
use ifmatch_core::datahub::{
    gen_synthetic, load_csv, load_idx, longtail_counts, source_from_samples, split_balanced, split_longtail,
    LongTailConfig, SyntheticConfig,
};
use proptest::prelude::*;

#[test]
fn longtail_tables() {
    for &(head, gamma, want) in TABLES {
        assert_eq!(longtail_counts(head, gamma, 10).unwrap(), want, "head {head} γ {gamma}");
    }
}

#[test]
fn longtail_split_realizes_the_counts() {
    let src = gen_synthetic(&SyntheticConfig {
        classes: 10,
        per_class: 450,
        test_per_class: 2,
        channels: 1,
        size: 2,
        difficulty: 0.0,
        seed: 3,
    })
    .unwrap();
    let cfg = LongTailConfig {
        n1: 150,
        m1: 300,
        gamma: 100.0,
        classes: 10,
    };
    let s = split_longtail(&src, &cfg, 5).unwrap();
    assert_eq!(s.labeled_counts(), TABLES[10].2.to_vec());
    let mut m = vec![0; 10];
    for x in &s.unlabeled {
        m[x.class] += 1;
    }
    assert_eq!(m, TABLES[11].2.to_vec());
    let lab: HashSet<u64> = s.labeled.iter().map(|x| x.id).collect();
    assert!(s.unlabeled.iter().all(|x| !lab.contains(&x.id)));
    assert_eq!(s, split_longtail(&src, &cfg, 5).unwrap());
    assert!(split_longtail(&src, &LongTailConfig { n1: 300, ..cfg }, 5).is_err());
}

#[test]
fn ids_unique_and_splits_deterministic() {
    let src = gen_synthetic(&SyntheticConfig {
        per_class: 30,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let ids: HashSet<u64> = src.train.iter().chain(&src.test).map(|s| s.id).collect();
    assert_eq!(ids.len(), src.train.len() + src.test.len());
    let a = split_balanced(&src, 8, 11, true).unwrap();
    assert_eq!(a, split_balanced(&src, 8, 11, true).unwrap());
    assert_ne!(a.labeled, split_balanced(&src, 8, 12, true).unwrap().labeled);
    assert_eq!(a.labeled.len() + a.unlabeled.len(), src.train.len());
    assert_eq!(a.test, src.test);
    let manifest = a.manifest_csv();
    assert_eq!(manifest.lines().next(), Some("id,role,class"));
    assert_eq!(manifest.lines().count(), 1 + src.train.len() + src.test.len());
}

fn idx_file(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
    let mut b = magic.to_be_bytes().to_vec();
    for d in dims {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(body);
    b
}

#[test]
fn idx_files_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.idx");
    let lab = dir.path().join("lab.idx");
    fs::write(&img, idx_file(0x803, &[2, 2, 2], &[0, 255, 51, 102, 1, 2, 3, 4])).unwrap();
    fs::write(&lab, idx_file(0x801, &[2], &[1, 0])).unwrap();
    let (x, y) = load_idx(&img, &lab).unwrap();
    assert_eq!(y, vec![1, 0]);
    assert_eq!(x[0].data(), &[0.0, 1.0, 0.2, 0.4]);
    fs::write(&lab, idx_file(0x801, &[3], &[1, 0, 1])).unwrap();
    let e = load_idx(&img, &lab).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    let missing = load_idx(&dir.path().join("nope"), &lab).unwrap_err();
    assert_eq!(missing.exit_code(), 3);
}

#[test]
fn csv_samples() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("train.csv");
    fs::write(&p, "id,class,p0,p1,p2,p3\n10,1,0.1,0.2,0.3,0.4\n11,0,1,1,0,0\n").unwrap();
    let s = load_csv(&p, [1, 2, 2]).unwrap();
    assert_eq!(s.len(), 2);
    assert_eq!(s[0].id, 10);
    assert_eq!(s[1].image.data(), &[1.0, 1.0, 0.0, 0.0]);
    assert!(load_csv(&p, [1, 3, 3]).is_err());
    let src = source_from_samples(s.clone(), vec![], 2).unwrap();
    assert_eq!(src.image_shape(), [1, 2, 2]);
    assert!(source_from_samples(s.clone(), s, 2).is_err());
}

proptest! {
    #[test]
    fn longtail_counts_are_monotone(head in 1usize..5000, gamma in 1.0f64..200.0, classes in 2usize..12) {
        match longtail_counts(head, gamma, classes) {
            Ok(n) => {
                prop_assert_eq!(n[0], head);
                prop_assert!(n.windows(2).all(|w| w[0] >= w[1]));
                for (k, &v) in n.iter().enumerate() {
                    let exact = head as f64 * gamma.powf(-(k as f64) / (classes - 1) as f64);
                    prop_assert!((v as f64 - exact).abs() < 1.0 + 1e-9);
                }
            }
            Err(_) => prop_assert!((head as f64 / gamma) < 1.0 + 1e-9),
        }
    }
}
