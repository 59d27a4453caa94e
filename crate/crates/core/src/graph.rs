//! The graph data model and dataset statistics.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::csr::CsrMatrix;
use crate::dense::DenseMatrix;
use crate::error::{Error, Result};

/// An undirected graph with node features, optional labels and a domain id.
///
/// The adjacency is always symmetric, self-loop free and unit weighted when
/// built through [`Graph::from_edges`]; self-loops only appear later during
/// degree normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub adjacency: CsrMatrix,
    pub features: DenseMatrix,
    pub labels: Option<Vec<usize>>,
    pub domain_id: String,
    pub name: String,
}

/// One row of the dataset statistics table.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub name: String,
    pub n_nodes: usize,
    /// Stored adjacency entries, i.e. each undirected edge counted twice.
    pub directed_entries: usize,
    pub undirected_edges: usize,
    pub feature_dim: usize,
    pub n_classes: usize,
    pub homophily_ratio: f64,
}

impl DatasetStats {
    pub const CSV_HEADER: &'static str =
        "name,n_nodes,directed_entries,undirected_edges,feature_dim,n_classes,homophily_ratio";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.4}",
            self.name,
            self.n_nodes,
            self.directed_entries,
            self.undirected_edges,
            self.feature_dim,
            self.n_classes,
            self.homophily_ratio
        )
    }
}

impl Graph {
    /// Wraps pre-built parts after checking shapes and labels.
    pub fn new(
        adjacency: CsrMatrix,
        features: DenseMatrix,
        labels: Option<Vec<usize>>,
        domain_id: impl Into<String>,
        name: impl Into<String>,
    ) -> Result<Self> {
        let n = features.rows();
        if adjacency.n_rows() != n || adjacency.n_cols() != n {
            return Err(Error::shape(
                "Graph::new",
                format!(
                    "adjacency {}x{} vs {} feature rows",
                    adjacency.n_rows(),
                    adjacency.n_cols(),
                    n
                ),
            ));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::shape(
                    "Graph::new",
                    format!("{} labels for {} nodes", l.len(), n),
                ));
            }
        }
        Ok(Self {
            adjacency,
            features,
            labels,
            domain_id: domain_id.into(),
            name: name.into(),
        })
    }

    /// Canonical graph from an edge list: self-loops dropped, duplicates
    /// collapsed to weight 1, and `(u, v)` mirrored to `(v, u)`.
    pub fn from_edges(
        edges: &[(usize, usize)],
        features: DenseMatrix,
        labels: Option<Vec<usize>>,
        domain_id: impl Into<String>,
        name: impl Into<String>,
    ) -> Result<Self> {
        let n = features.rows();
        let mut rows: Vec<Vec<(usize, f64)>> = alloc::vec![Vec::new(); n];
        for &(u, v) in edges {
            for node in [u, v] {
                if node >= n {
                    return Err(Error::Bounds { node, n });
                }
            }
            if u == v {
                continue;
            }
            rows[u].push((v, 1.0));
            rows[v].push((u, 1.0));
        }
        for row in &mut rows {
            row.sort_by_key(|&(c, _)| c);
            row.dedup_by_key(|&mut (c, _)| c);
        }
        let adjacency = CsrMatrix::from_rows(n, rows)?;
        Self::new(adjacency, features, labels, domain_id, name)
    }

    pub fn n_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Undirected edges `(u, v)` with `u < v`, in ascending order.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .iter()
            .filter(|&(i, j, _)| i < j)
            .map(|(i, j, _)| (i, j))
            .collect()
    }

    /// `max(label) + 1`, or 0 without labels.
    pub fn n_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |&m| m + 1)
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            name: self.name.clone(),
            n_nodes: self.n_nodes(),
            directed_entries: self.adjacency.nnz(),
            undirected_edges: self.undirected_edges().len(),
            feature_dim: self.feature_dim(),
            n_classes: self.n_classes(),
            homophily_ratio: homophily_ratio(self).unwrap_or(f64::NAN),
        }
    }

    /// Relabels node `i` as `perm[i]` in adjacency, features and labels.
    pub fn permute(&self, perm: &[usize]) -> Self {
        let n = self.n_nodes();
        let mut inverse = alloc::vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Self {
            adjacency: self.adjacency.permute(perm),
            features: self.features.gather_rows(&inverse),
            labels: self
                .labels
                .as_ref()
                .map(|l| inverse.iter().map(|&i| l[i]).collect()),
            domain_id: self.domain_id.clone(),
            name: self.name.clone(),
        }
    }

    /// Same graph with a replaced adjacency.
    pub fn with_adjacency(&self, adjacency: CsrMatrix) -> Result<Self> {
        Self::new(
            adjacency,
            self.features.clone(),
            self.labels.clone(),
            self.domain_id.clone(),
            self.name.clone(),
        )
    }

    /// Same graph with the edge set replaced, canonicalized as in [`Graph::from_edges`].
    pub fn with_edges(&self, edges: &[(usize, usize)]) -> Result<Self> {
        Self::from_edges(
            edges,
            self.features.clone(),
            self.labels.clone(),
            self.domain_id.clone(),
            self.name.clone(),
        )
    }
}

/// Edge homophily: the fraction of undirected edges whose endpoints share a
/// label. An edgeless graph has ratio 1.0 by convention.
pub fn homophily_ratio(g: &Graph) -> Result<f64> {
    let labels = g
        .labels
        .as_ref()
        .ok_or_else(|| Error::Precondition("homophily ratio requires labels".into()))?;
    let mut total = 0usize;
    let mut same = 0usize;
    for (i, j, _) in g.adjacency.iter() {
        if i < j {
            total += 1;
            if labels[i] == labels[j] {
                same += 1;
            }
        }
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(same as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn feats(n: usize) -> DenseMatrix {
        DenseMatrix::zeros(n, 3)
    }

    #[test]
    fn single_edge_graph() {
        let g = Graph::from_edges(&[(0, 1)], feats(2), None, "d", "tiny").unwrap();
        assert_eq!(g.adjacency.nnz(), 2);
        assert_eq!(g.undirected_edges(), vec![(0, 1)]);
        assert!(g.adjacency.is_symmetric(0.0));
    }

    #[test]
    fn self_loops_and_duplicates_dropped() {
        let g = Graph::from_edges(&[(0, 0)], feats(1), None, "d", "loop").unwrap();
        assert_eq!(g.adjacency.nnz(), 0);
        let g = Graph::from_edges(&[(0, 1), (1, 0), (0, 1)], feats(2), None, "d", "dup").unwrap();
        assert_eq!(g.adjacency.nnz(), 2);
        assert_eq!(g.adjacency.get(0, 1), 1.0);
    }

    #[test]
    fn out_of_range_edge_is_bounds_error() {
        let err = Graph::from_edges(&[(0, 5)], feats(2), None, "d", "bad").unwrap_err();
        assert_eq!(err, Error::Bounds { node: 5, n: 2 });
    }

    #[test]
    fn label_count_mismatch_is_shape_error() {
        let err = Graph::from_edges(&[], feats(2), Some(vec![0]), "d", "bad").unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn homophily_triangle_and_path() {
        let tri = Graph::from_edges(&[(0, 1), (1, 2), (2, 0)], feats(3), Some(vec![0; 3]), "d", "t").unwrap();
        assert_eq!(homophily_ratio(&tri).unwrap(), 1.0);

        let edges = [(0, 1), (1, 2), (2, 3)];
        let labels = vec![0, 0, 1, 1];
        let path = Graph::from_edges(&edges, feats(4), Some(labels.clone()), "d", "p").unwrap();
        let brute = edges.iter().filter(|&&(u, v)| labels[u] == labels[v]).count() as f64 / edges.len() as f64;
        assert_eq!(homophily_ratio(&path).unwrap(), brute);
        assert!((brute - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn homophily_needs_labels_and_defaults_for_edgeless() {
        let g = Graph::from_edges(&[(0, 1)], feats(2), None, "d", "x").unwrap();
        assert!(matches!(homophily_ratio(&g), Err(Error::Precondition(_))));
        let g = Graph::from_edges(&[], feats(2), Some(vec![0, 1]), "d", "x").unwrap();
        assert_eq!(homophily_ratio(&g).unwrap(), 1.0);
    }

    fn random_graph() -> impl Strategy<Value = (Graph, Vec<usize>)> {
        (2usize..25).prop_flat_map(|n| {
            (
                proptest::collection::vec((0..n, 0..n), 0..60),
                proptest::collection::vec(0usize..3, n),
                Just(n).prop_perturb(|n, mut rng| {
                    let mut p: Vec<usize> = (0..n).collect();
                    for i in (1..n).rev() {
                        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
                        p.swap(i, j);
                    }
                    p
                }),
            )
                .prop_map(move |(edges, labels, perm)| {
                    let g = Graph::from_edges(&edges, DenseMatrix::zeros(n, 1), Some(labels), "d", "r").unwrap();
                    (g, perm)
                })
        })
    }

    proptest! {
        #[test]
        fn homophily_permutation_invariant((g, perm) in random_graph()) {
            let h = homophily_ratio(&g).unwrap();
            let hp = homophily_ratio(&g.permute(&perm)).unwrap();
            prop_assert_eq!(h, hp);
            prop_assert!((0.0..=1.0).contains(&h));
        }
    }
}
