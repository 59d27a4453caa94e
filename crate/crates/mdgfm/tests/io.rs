use std::fs;
use std::path::Path;

use mdgfm::error::{Error, EXIT_DATA};
use mdgfm::io::{load_graph, parse_edges, parse_features, parse_labels, save_graph, DatasetFiles};
use mdgfm_core::{DenseMatrix, Graph};
use proptest::prelude::*;

fn write_dataset(dir: &Path, name: &str, edges: &str, features: &str, labels: Option<&str>) -> DatasetFiles {
    let prefix = dir.join(name);
    fs::write(format!("{}.edges.tsv", prefix.display()), edges).unwrap();
    fs::write(format!("{}.features.csv", prefix.display()), features).unwrap();
    if let Some(l) = labels {
        fs::write(format!("{}.labels.txt", prefix.display()), l).unwrap();
    }
    DatasetFiles::from_prefix(prefix)
}

#[test]
fn loads_and_canonicalizes() {
    let dir = tempfile::tempdir().unwrap();
    let files = write_dataset(
        dir.path(),
        "toy",
        "# comment\n0\t1\n1\t0\n\n2\t2\n1\t2\n",
        "1,0\n0,1\n0.5,0.5\n",
        Some("0\n1\n1\n"),
    );
    let g = load_graph(&files, "toy").unwrap();
    assert_eq!(g.n_nodes(), 3);
    // duplicate merged, self-loop dropped
    assert_eq!(g.undirected_edges(), vec![(0, 1), (1, 2)]);
    assert_eq!(g.labels, Some(vec![0, 1, 1]));
    assert_eq!(g.domain_id, "toy");
    let s = g.stats();
    assert_eq!((s.directed_entries, s.undirected_edges, s.n_classes), (4, 2, 2));
    assert_eq!(s.homophily_ratio, 0.5);
}

#[test]
fn labels_are_optional() {
    let dir = tempfile::tempdir().unwrap();
    let files = write_dataset(dir.path(), "nolabels", "0\t1\n", "1\n2\n", None);
    assert_eq!(files.labels, None);
    assert_eq!(load_graph(&files, "x").unwrap().labels, None);
}

#[test]
fn parse_errors_carry_file_and_line() {
    let p = Path::new("g.edges.tsv");
    match parse_edges("0\t1\n1 2\n", p) {
        Err(Error::Parse { line, path, .. }) => assert_eq!((line, path.as_path()), (2, p)),
        other => panic!("{:?}", other),
    }
    assert!(matches!(parse_edges("0\t-1\n", p), Err(Error::Parse { line: 1, .. })));
    assert!(matches!(parse_features("1,2\n3\n", p), Err(Error::Parse { line: 2, .. })));
    assert!(matches!(parse_features("1,x\n", p), Err(Error::Parse { line: 1, .. })));
    assert!(matches!(parse_features("1,inf\n", p), Err(Error::Parse { line: 1, .. })));
    assert!(matches!(parse_labels("0\n\nfoo\n", p), Err(Error::Parse { line: 3, .. })));
}

#[test]
fn inconsistent_files_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out_of_range = write_dataset(dir.path(), "a", "0\t5\n", "1\n2\n", None);
    let e = load_graph(&out_of_range, "a").unwrap_err();
    assert_eq!(e.exit_code(), EXIT_DATA, "{}", e);

    let short_labels = write_dataset(dir.path(), "b", "0\t1\n", "1\n2\n", Some("0\n"));
    assert_eq!(load_graph(&short_labels, "b").unwrap_err().exit_code(), EXIT_DATA);

    let missing = DatasetFiles::from_prefix(dir.path().join("absent"));
    let e = load_graph(&missing, "c").unwrap_err();
    assert!(matches!(e, Error::Io { .. }));
    assert!(e.to_string().contains("absent.features.csv"), "{}", e);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn save_load_round_trip(
        n in 1usize..15,
        d in 1usize..5,
        raw_edges in prop::collection::vec((0usize..15, 0usize..15), 0..40),
        values in prop::collection::vec(-1e6f64..1e6, 75),
        labelled in any::<bool>(),
    ) {
        let edges: Vec<(usize, usize)> = raw_edges.into_iter().filter(|&(u, v)| u < n && v < n).collect();
        let x = DenseMatrix::from_fn(n, d, |i, j| values[(i * d + j) % values.len()] / 7.0);
        let labels = labelled.then(|| (0..n).map(|i| i % 3).collect());
        let g = Graph::from_edges(&edges, x, labels, "rt", "rt").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = save_graph(&g, dir.path().join("rt")).unwrap();
        let back = load_graph(&files, "rt").unwrap();
        prop_assert_eq!(back, g);
    }
}
