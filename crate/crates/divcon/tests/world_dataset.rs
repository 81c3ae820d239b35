use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use divcon::config::WorldConfig;
use divcon::world::{build_dataset, Dataset};
use sha2::{Digest, Sha256};

fn small() -> WorldConfig {
    WorldConfig {
        classes: 3,
        train_per_class: 2,
        test_per_class: 1,
        ..WorldConfig::default()
    }
}

/// Relative path → sha256 of every file under `dir`.
fn tree_hashes(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, hex::encode(Sha256::digest(fs::read(&p).unwrap())));
            }
        }
    }
    out
}

#[test]
fn rebuild_with_same_seed_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    build_dataset(&small(), 9, a.path()).unwrap();
    build_dataset(&small(), 9, b.path()).unwrap();
    let (ha, hb) = (tree_hashes(a.path()), tree_hashes(b.path()));
    // 3 classes × 3 samples × 3 files, 3 prompts, manifest
    assert_eq!(ha.len(), 27 + 3 + 1);
    assert_eq!(ha, hb);

    let c = tempfile::tempdir().unwrap();
    build_dataset(&small(), 10, c.path()).unwrap();
    assert_ne!(tree_hashes(c.path()), ha);
}

#[test]
fn counts_and_round_trip() {
    let cfg = WorldConfig {
        train_per_class: 1,
        test_per_class: 1,
        ..WorldConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&cfg, 1, dir.path()).unwrap();
    assert_eq!((m.train_total, m.test_total), (10, 10));
    let data = Dataset::load(dir.path()).unwrap();
    assert_eq!(data.manifest, m);
    assert_eq!((data.train.len(), data.test.len(), data.prompts.len()), (10, 10, 10));
    let world = data.world();
    for s in &data.train {
        let again = world.embed_latent(&s.latent).unwrap();
        assert_eq!(again, s.embedding);
    }
}

#[test]
fn missing_dataset_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = Dataset::load(&dir.path().join("absent")).unwrap_err();
    assert!(err.to_string().contains("absent"), "{err}");
}
