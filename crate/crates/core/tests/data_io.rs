use std::fs;

use pivotgsl::data::{generate_synthetic, load_dataset, save_dataset, SplitSpec, SynthSpec};
use pivotgsl::graph::homophily_ratio;
use pivotgsl::Error;

fn spec(seed: u64) -> SynthSpec {
    SynthSpec {
        n_nodes: 90,
        n_classes: 3,
        p_in: 0.1,
        p_out: 0.01,
        feature_dim: 4,
        snr: 1.5,
        seed,
    }
}

#[test]
fn save_then_load_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = generate_synthetic(&spec(1))
        .unwrap()
        .with_splits(SplitSpec::half_quarter_quarter(), 2)
        .unwrap();
    save_dataset(&bundle, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.graph.edges(), bundle.graph.edges());
    assert_eq!(back.graph.labels(), bundle.graph.labels());
    assert_eq!(back.graph.features(), bundle.graph.features());
    assert_eq!(back.graph.masks(), bundle.graph.masks());
    assert_eq!(back.content_hash(), bundle.content_hash());
    assert_eq!(back.dropped_self_loops, 0);
}

#[test]
fn equal_seeds_give_byte_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save_dataset(&generate_synthetic(&spec(5)).unwrap(), a.path()).unwrap();
    save_dataset(&generate_synthetic(&spec(5)).unwrap(), b.path()).unwrap();
    for f in ["edges.tsv", "features.tsv", "labels.tsv", "meta.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

fn write(dir: &std::path::Path, edges: &str, features: &str, labels: &str) {
    fs::write(dir.join("edges.tsv"), edges).unwrap();
    fs::write(dir.join("features.tsv"), features).unwrap();
    fs::write(dir.join("labels.tsv"), labels).unwrap();
}

#[test]
fn hand_written_files_are_canonicalised() {
    let dir = tempfile::tempdir().unwrap();
    // reversed duplicate, a self-loop and space separators
    write(dir.path(), "0 1\n1\t0\n2\t2\n1 2\n", "1\t0\n0\t1\n0.5\t0.5\n", "0\n1\n1\n");
    let b = load_dataset(dir.path()).unwrap();
    assert_eq!(b.graph.edges(), vec![(0, 1), (1, 2)]);
    assert_eq!(b.dropped_self_loops, 1);
    assert_eq!(b.graph.n_classes(), 2);
}

#[test]
fn loader_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(matches!(load_dataset(p), Err(Error::MissingFile(_))));

    write(p, "0\t1\n", "1\t2\n3\n", "0\n1\n");
    assert!(matches!(load_dataset(p), Err(Error::RaggedFeatures { line: 2, .. })));

    write(p, "0\t1\n", "1\t2\n3\tx\n", "0\n1\n");
    assert!(matches!(load_dataset(p), Err(Error::Parse { line: 2, .. })));

    write(p, "0\t1\n", "1\t2\n3\t4\n", "0\n-1\n");
    assert!(matches!(load_dataset(p), Err(Error::LabelOutOfRange { .. })));

    write(p, "0\t5\n", "1\t2\n3\t4\n", "0\n1\n");
    assert!(load_dataset(p).is_err());
}

#[test]
fn tampered_file_fails_hash_check() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&generate_synthetic(&spec(2)).unwrap(), dir.path()).unwrap();
    let path = dir.path().join("labels.tsv");
    let mut body = fs::read_to_string(&path).unwrap();
    body = body.replacen('0', "1", 1);
    fs::write(&path, body).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::HashMismatch { .. })));
}

#[test]
fn mean_degree_follows_block_model() {
    let (n, c, p_in, p_out) = (1000usize, 4usize, 0.02, 0.002);
    let b = generate_synthetic(&SynthSpec {
        n_nodes: n,
        n_classes: c,
        p_in,
        p_out,
        feature_dim: 4,
        snr: 1.0,
        seed: 11,
    })
    .unwrap();
    let mean = 2.0 * b.graph.n_edges() as f64 / n as f64;
    let expected = n as f64 * (p_in / c as f64 + p_out * (c - 1) as f64 / c as f64);
    assert!((mean - expected).abs() / expected < 0.1, "{mean} vs {expected}");
}

#[test]
fn equal_block_probabilities_give_near_zero_homophily() {
    let mut total = 0.0;
    for seed in 0..20 {
        let b = generate_synthetic(&SynthSpec {
            n_nodes: 200,
            n_classes: 2,
            p_in: 0.05,
            p_out: 0.05,
            feature_dim: 2,
            snr: 1.0,
            seed,
        })
        .unwrap();
        total += homophily_ratio(&b.graph, None).unwrap();
    }
    assert!((total / 20.0).abs() < 0.03, "{}", total / 20.0);
}

#[test]
fn homophily_rises_with_block_contrast() {
    let h = |p_out: f64| {
        let b = generate_synthetic(&SynthSpec {
            p_out,
            ..spec(3)
        })
        .unwrap();
        homophily_ratio(&b.graph, None).unwrap()
    };
    assert!(h(0.005) > h(0.05));
}
