use std::fs;

use dygis::dgmae::{parse_representation, train_dgmae, write_representation, DgmaeConfig};
use dygis::graph::{load_dynamic_graph, load_labels, parse_dynamic_graph, write_dynamic_graph, FeatureMode, SubgraphSplit};
use dygis::isg::{parse_splits, write_splits};
use dygis::synthgen::{generate_hub_dynamic_graph, SynthConfig};
use dygis::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const SPARSE_IDS: &str = "\
# snapshot src dst
0 10 20
0 20 30
1 10 30  # trailing comment
1 30 40
2 40 10
";

#[test]
fn dataset_round_trip_keeps_original_ids() {
    let g = parse_dynamic_graph(SPARSE_IDS, FeatureMode::OneHot, 1).unwrap();
    assert_eq!(g.node_ids(), &[10, 20, 30, 40]);
    let mut buf = Vec::new();
    write_dynamic_graph(&g, &mut buf).unwrap();
    let again = parse_dynamic_graph(std::str::from_utf8(&buf).unwrap(), FeatureMode::OneHot, 1).unwrap();
    assert_eq!(g, again);
}

#[test]
fn synthetic_graph_survives_the_file_format() {
    let (g, _) = generate_hub_dynamic_graph(&SynthConfig::default()).unwrap();
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("synth.txt");
    let mut buf = Vec::new();
    write_dynamic_graph(&g, &mut buf).unwrap();
    fs::write(&path, buf).unwrap();
    let loaded = load_dynamic_graph(&path, FeatureMode::OneHot, 2).unwrap();
    assert_eq!(loaded.len(), g.len());
    for (a, b) in loaded.snapshots().iter().zip(g.snapshots()) {
        assert_eq!(a.edges(), b.edges());
    }
}

#[test]
fn malformed_datasets_report_the_line() {
    for (text, line) in [("0 1 2\n0 1\n", 2), ("0 1 2\n2 1 3\n", 2), ("1 1 2\n0 1 3\n", 2), ("0 a 2\n", 1)] {
        match parse_dynamic_graph(text, FeatureMode::OneHot, 0) {
            Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
}

#[test]
fn feature_and_label_files() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("g.txt");
    fs::write(&data, SPARSE_IDS).unwrap();
    let feats = dir.path().join("x.txt");
    fs::write(&feats, "4 2\n1 0\n0 1\n1 1\n0.5 -0.5\n").unwrap();
    let g = load_dynamic_graph(&data, FeatureMode::File(feats.clone()), 1).unwrap();
    assert_eq!(g.features().dim(4), 2);

    fs::write(&feats, "3 2\n1 0\n0 1\n1 1\n").unwrap();
    assert!(matches!(
        load_dynamic_graph(&data, FeatureMode::File(feats), 1),
        Err(Error::Parse { .. })
    ));

    let labels = dir.path().join("y.txt");
    fs::write(&labels, "10 0\n20 1\n40 1\n").unwrap();
    let y = load_labels(&labels, &g).unwrap();
    assert_eq!(y.num_classes, 2);
    assert_eq!(y.labels.get(&3), Some(&1));

    fs::write(&labels, "99 0\n").unwrap();
    assert!(load_labels(&labels, &g).is_err());
}

#[test]
fn split_file_round_trip() {
    let g = parse_dynamic_graph(SPARSE_IDS, FeatureMode::OneHot, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let splits: Vec<_> = g
        .snapshots()
        .iter()
        .map(|s| SubgraphSplit::random(s, 0.5, &mut rng).unwrap())
        .collect();
    let mut buf = Vec::new();
    write_splits(&g, &splits, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.lines().skip(1).all(|l| l.split_whitespace().count() == 4));
    assert_eq!(parse_splits(&text, &g, 0.5).unwrap(), splits);
}

#[test]
fn representation_file_round_trip() {
    let g = parse_dynamic_graph(SPARSE_IDS, FeatureMode::OneHot, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let splits: Vec<_> = g
        .snapshots()
        .iter()
        .map(|s| SubgraphSplit::random(s, 0.5, &mut rng).unwrap())
        .collect();
    let cfg = DgmaeConfig {
        epochs: 2,
        embed_dim: 3,
        hidden: 4,
        ..DgmaeConfig::default()
    };
    let rep = train_dgmae(&g, &splits, &cfg).unwrap().representation;
    let mut buf = Vec::new();
    write_representation(&rep, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "0 4 3");
    let back = parse_representation(&text).unwrap();
    assert_eq!(back.z, rep.z);
}
