//! Plain-text dataset files.
//!
//! A dataset `<dir>/<name>` is stored as three files:
//! `<name>.edges.tsv` (`u<TAB>v` per line, `#` comments),
//! `<name>.features.csv` (one row of reals per node, no header) and
//! `<name>.labels.txt` (one class id per line, optional).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mdgfm_core::{DenseMatrix, Graph};

use crate::error::{Error, Result};

/// File paths of one dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetFiles {
    pub edges: PathBuf,
    pub features: PathBuf,
    pub labels: Option<PathBuf>,
}

impl DatasetFiles {
    /// Paths under the naming convention for `<prefix>` = `<dir>/<name>`.
    /// The label file is used only if it exists.
    pub fn from_prefix(prefix: impl AsRef<Path>) -> Self {
        let prefix = prefix.as_ref();
        let labels = suffixed(prefix, LABELS_SUFFIX);
        Self {
            edges: suffixed(prefix, EDGES_SUFFIX),
            features: suffixed(prefix, FEATURES_SUFFIX),
            labels: labels.exists().then_some(labels),
        }
    }
}

const EDGES_SUFFIX: &str = ".edges.tsv";
const FEATURES_SUFFIX: &str = ".features.csv";
const LABELS_SUFFIX: &str = ".labels.txt";

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(suffix);
    PathBuf::from(p)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Edge list from `u<TAB>v` lines. Blank lines and `#` comments are skipped.
pub fn parse_edges(text: &str, path: &Path) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(u), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_error(path, i + 1, format!("expected `u<TAB>v`, got `{}`", line)));
        };
        let id = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| parse_error(path, i + 1, format!("invalid node id `{}`", s)))
        };
        edges.push((id(u)?, id(v)?));
    }
    Ok(edges)
}

/// Dense rows from headerless CSV. All rows must have the same width.
pub fn parse_features(text: &str, path: &Path) -> Result<DenseMatrix> {
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_error(path, i + 1, format!("invalid number `{}`", field.trim())))?;
            if !v.is_finite() {
                return Err(parse_error(path, i + 1, format!("non-finite feature `{}`", field.trim())));
            }
            data.push(v);
        }
        let w = data.len() - before;
        match width {
            None => width = Some(w),
            Some(expected) if expected != w => {
                return Err(parse_error(path, i + 1, format!("{} columns, expected {}", w, expected)));
            }
            _ => {}
        }
        rows += 1;
    }
    Ok(DenseMatrix::new(rows, width.unwrap_or(0), data)?)
}

/// One non-negative integer class id per non-blank line.
pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<usize>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| parse_error(path, i + 1, format!("invalid class id `{}`", l.trim())))
        })
        .collect()
}

/// Reads and canonicalizes a dataset. The graph name is the domain id.
pub fn load_graph(files: &DatasetFiles, domain_id: &str) -> Result<Graph> {
    let features = parse_features(&read(&files.features)?, &files.features)?;
    let edges = parse_edges(&read(&files.edges)?, &files.edges)?;
    let labels = match &files.labels {
        Some(p) => Some(parse_labels(&read(p)?, p)?),
        None => None,
    };
    Ok(Graph::from_edges(&edges, features, labels, domain_id, domain_id)?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `graph` under `prefix` using the naming convention. Features use
/// the shortest round-trip float formatting, so loading gives back the same
/// graph exactly.
pub fn save_graph(graph: &Graph, prefix: impl AsRef<Path>) -> Result<DatasetFiles> {
    let files = DatasetFiles::from_prefix(prefix.as_ref());
    let mut edges = String::new();
    for (u, v) in graph.undirected_edges() {
        writeln!(edges, "{}\t{}", u, v).unwrap();
    }
    write(&files.edges, &edges)?;

    let mut features = String::new();
    for i in 0..graph.features.rows() {
        let row: Vec<String> = graph.features.row(i).iter().map(|v| v.to_string()).collect();
        features.push_str(&row.join(","));
        features.push('\n');
    }
    write(&files.features, &features)?;

    let labels = match &graph.labels {
        Some(labels) => {
            let path = suffixed(prefix.as_ref(), LABELS_SUFFIX);
            let text: String = labels.iter().map(|l| format!("{}\n", l)).collect();
            write(&path, &text)?;
            Some(path)
        }
        None => None,
    };
    Ok(DatasetFiles { labels, ..files })
}
