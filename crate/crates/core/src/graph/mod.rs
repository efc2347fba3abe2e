//! Undirected attributed graphs, split masks and symmetric normalisation.

mod io;
mod synth;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{CsrMatrix, EdgePattern, Tensor};
use crate::error::{Error, Result};

pub use io::{load_graph, read_graph, save_graph, EdgeListing, GraphHeader};
pub use synth::{generate_sbm, SbmParams};

/// Immutable undirected graph with dense node features.
///
/// Each undirected edge is stored once as `(u, v)` with `u < v`. The CSR
/// arrays hold the directed expansion (both directions, no self-loops), and
/// `entry_edge[k]` names the undirected edge behind CSR entry `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    entry_edge: Vec<usize>,
    features: Tensor,
    labels: Option<Vec<usize>>,
    num_classes: usize,
}

impl Graph {
    /// Builds a graph from an edge list in any orientation.
    ///
    /// Duplicate edges (including `(u, v)` next to `(v, u)`) collapse to one.
    /// Self-loops and out-of-range endpoints are rejected.
    pub fn new(
        num_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: Tensor,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if features.rows() != num_nodes {
            return Err(Error::InvalidGraph(format!(
                "feature matrix has {} rows for {} nodes",
                features.rows(),
                num_nodes
            )));
        }
        if !features.is_finite() {
            return Err(Error::InvalidGraph(
                "features contain non-finite values".into(),
            ));
        }
        let mut canonical = Vec::new();
        for (u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::InvalidGraph(format!(
                    "edge ({u}, {v}) out of range for {num_nodes} nodes"
                )));
            }
            if u == v {
                return Err(Error::InvalidGraph(format!("self-loop on node {u}")));
            }
            canonical.push((u.min(v), u.max(v)));
        }
        canonical.sort_unstable();
        canonical.dedup();

        let num_classes = match &labels {
            Some(l) => {
                if l.len() != num_nodes {
                    return Err(Error::InvalidGraph(format!(
                        "{} labels for {} nodes",
                        l.len(),
                        num_nodes
                    )));
                }
                l.iter().max().map_or(0, |m| m + 1)
            }
            None => 0,
        };

        let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_nodes];
        for (e, &(u, v)) in canonical.iter().enumerate() {
            adjacency[u].push((v, e));
            adjacency[v].push((u, e));
        }
        let mut row_ptr = Vec::with_capacity(num_nodes + 1);
        let mut col_idx = Vec::with_capacity(2 * canonical.len());
        let mut entry_edge = Vec::with_capacity(2 * canonical.len());
        row_ptr.push(0);
        for row in &mut adjacency {
            row.sort_unstable();
            for &(c, e) in row.iter() {
                col_idx.push(c);
                entry_edge.push(e);
            }
            row_ptr.push(col_idx.len());
        }

        Ok(Self {
            num_nodes,
            edges: canonical,
            row_ptr,
            col_idx,
            entry_edge,
            features,
            labels,
            num_classes,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn feat_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[u]..self.row_ptr[u + 1]]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.row_ptr[u + 1] - self.row_ptr[u]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Declares more classes than the labels reveal (for containers whose
    /// header lists absent classes).
    pub(crate) fn set_num_classes(&mut self, n: usize) {
        self.num_classes = self.num_classes.max(n);
    }

    /// Same topology with replaced features.
    pub fn with_features(&self, features: Tensor) -> Result<Self> {
        if features.shape() != (self.num_nodes, features.cols()) || !features.is_finite() {
            return Err(Error::InvalidGraph("replacement features invalid".into()));
        }
        let mut g = self.clone();
        g.features = features;
        Ok(g)
    }

    /// Subgraph keeping the undirected edges where `keep[e]` is true.
    pub fn with_edges_kept(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.num_edges() {
            return Err(Error::InvalidGraph(format!(
                "edge mask has {} entries for {} edges",
                keep.len(),
                self.num_edges()
            )));
        }
        let kept = self
            .edges
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(&e, _)| e);
        Graph::new(
            self.num_nodes,
            kept,
            self.features.clone(),
            self.labels.clone(),
        )
    }

    /// Divides every feature row by its L1 norm (rows of zeros are left alone).
    pub fn row_normalized_features(&self) -> Tensor {
        let x = &self.features;
        let mut out = x.clone();
        for i in 0..x.rows() {
            let s: f64 = x.row(i).iter().map(|v| v.abs()).sum();
            if s > 0.0 {
                for v in out.row_mut(i) {
                    *v /= s;
                }
            }
        }
        out
    }

    /// Pattern of `A + I` with per-entry edge tags; diagonal sits in sorted position.
    pub fn edge_pattern(&self) -> EdgePattern {
        let n = self.num_nodes;
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::with_capacity(self.col_idx.len() + n);
        let mut entry_edge = Vec::with_capacity(self.col_idx.len() + n);
        row_ptr.push(0);
        for u in 0..n {
            let span = self.row_ptr[u]..self.row_ptr[u + 1];
            let mut diag_done = false;
            for k in span {
                let c = self.col_idx[k];
                if !diag_done && c > u {
                    col_idx.push(u);
                    entry_edge.push(None);
                    diag_done = true;
                }
                col_idx.push(c);
                entry_edge.push(Some(self.entry_edge[k]));
            }
            if !diag_done {
                col_idx.push(u);
                entry_edge.push(None);
            }
            row_ptr.push(col_idx.len());
        }
        EdgePattern {
            num_nodes: n,
            num_edges: self.num_edges(),
            row_ptr,
            col_idx,
            entry_edge,
        }
    }

    /// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree of `A + I`.
    pub fn normalize(&self) -> NormalizedAdjacency {
        let pattern = self.edge_pattern();
        let (values, _) = pattern.normalized_values(&vec![1.0; self.num_edges()]);
        NormalizedAdjacency {
            matrix: Arc::new(pattern.with_values(values)),
        }
    }
}

/// Symmetrically normalised adjacency with self-loops.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    matrix: Arc<CsrMatrix>,
}

impl NormalizedAdjacency {
    pub fn from_matrix(matrix: CsrMatrix) -> Self {
        Self {
            matrix: Arc::new(matrix),
        }
    }

    pub fn matrix(&self) -> &Arc<CsrMatrix> {
        &self.matrix
    }

    pub fn num_nodes(&self) -> usize {
        self.matrix.rows
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.matrix.get(r, c)
    }

    pub fn to_dense(&self) -> Tensor {
        self.matrix.to_dense()
    }
}

/// Disjoint train / validation / test node masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitMasks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

/// Fractions used by [`SplitMasks::random`].
pub const TRAIN_FRACTION: f64 = 0.1;
pub const VAL_FRACTION: f64 = 0.1;

impl SplitMasks {
    /// Uniform random 10 / 10 / 80 split.
    pub fn random(num_nodes: usize, seed: u64) -> Result<Self> {
        if num_nodes < 3 {
            return Err(Error::DegenerateSplit(format!(
                "{num_nodes} nodes cannot fill three splits"
            )));
        }
        let mut order: Vec<usize> = (0..num_nodes).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((num_nodes as f64 * TRAIN_FRACTION).floor() as usize).max(1);
        let n_val = ((num_nodes as f64 * VAL_FRACTION).floor() as usize).max(1);
        let (train, rest) = order.split_at(n_train);
        let (val, test) = rest.split_at(n_val);
        Self::from_indices(num_nodes, train, val, test)
    }

    pub fn from_indices(
        num_nodes: usize,
        train: &[usize],
        val: &[usize],
        test: &[usize],
    ) -> Result<Self> {
        let mut masks = Self {
            train: vec![false; num_nodes],
            val: vec![false; num_nodes],
            test: vec![false; num_nodes],
        };
        for (name, idx) in [("train", train), ("val", val), ("test", test)] {
            if idx.is_empty() {
                return Err(Error::DegenerateSplit(format!("{name} split is empty")));
            }
            for &i in idx {
                if i >= num_nodes {
                    return Err(Error::DegenerateSplit(format!(
                        "{name} index {i} out of range for {num_nodes} nodes"
                    )));
                }
                if masks.train[i] || masks.val[i] || masks.test[i] {
                    return Err(Error::DegenerateSplit(format!(
                        "node {i} appears in two splits"
                    )));
                }
                match name {
                    "train" => masks.train[i] = true,
                    "val" => masks.val[i] = true,
                    _ => masks.test[i] = true,
                }
            }
        }
        Ok(masks)
    }

    pub fn num_nodes(&self) -> usize {
        self.train.len()
    }

    fn indices(mask: &[bool]) -> Vec<usize> {
        mask.iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        Self::indices(&self.train)
    }

    pub fn val_indices(&self) -> Vec<usize> {
        Self::indices(&self.val)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        Self::indices(&self.test)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn featureless(n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph::new(n, edges.iter().copied(), Tensor::ones(n, 1), None).unwrap()
    }

    /// Dense oracle: build A + I and D explicitly, multiply out.
    fn dense_normalize(n: usize, edges: &[(usize, usize)]) -> Tensor {
        let mut a = Tensor::identity(n);
        for &(u, v) in edges {
            a.set(u, v, 1.0);
            a.set(v, u, 1.0);
        }
        let d: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
        let mut dinv = Tensor::zeros(n, n);
        for (i, di) in d.iter().enumerate() {
            dinv.set(i, i, 1.0 / di.sqrt());
        }
        dinv.matmul(&a).unwrap().matmul(&dinv).unwrap()
    }

    #[test]
    fn single_node_normalizes_to_one() {
        let g = featureless(1, &[]);
        assert_eq!(g.normalize().to_dense().data(), &[1.0]);
    }

    #[test]
    fn single_edge_is_all_halves() {
        let g = featureless(2, &[(0, 1)]);
        let a = g.normalize().to_dense();
        for v in a.data() {
            assert!((v - 0.5).abs() < 1e-15, "{v}");
        }
    }

    #[test]
    fn path_graph_matches_dense_oracle() {
        let edges = [(0, 1), (1, 2), (2, 3)];
        let g = featureless(4, &edges);
        let got = g.normalize().to_dense();
        let want = dense_normalize(4, &edges);
        assert!(got.max_abs_diff(&want) < 1e-15);
        // a couple of closed-form entries: degrees (with loop) are 2,3,3,2
        assert!((got.get(0, 1) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert!((got.get(1, 2) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn csr_rows_sorted_and_symmetric() {
        let g = featureless(5, &[(3, 1), (0, 4), (2, 1), (1, 0), (4, 3)]);
        for u in 0..5 {
            let nb = g.neighbors(u);
            assert!(nb.windows(2).all(|w| w[0] < w[1]), "row {u}: {nb:?}");
            for &v in nb {
                assert!(g.neighbors(v).contains(&u));
            }
        }
        assert_eq!(g.num_edges(), 5);
    }

    #[test]
    fn duplicate_orientations_collapse() {
        let g = featureless(3, &[(0, 1), (1, 0), (1, 2)]);
        assert_eq!(g.num_edges(), 2);
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn self_loops_and_bad_rows_rejected() {
        assert!(Graph::new(2, [(1, 1)], Tensor::ones(2, 1), None).is_err());
        assert!(Graph::new(2, [(0, 1)], Tensor::ones(3, 1), None).is_err());
        let mut x = Tensor::ones(2, 1);
        x.set(0, 0, f64::NAN);
        assert!(Graph::new(2, [(0, 1)], x, None).is_err());
    }

    #[test]
    fn isolated_node_keeps_unit_self_loop() {
        let g = featureless(3, &[(0, 1)]);
        let a = g.normalize();
        assert_eq!(a.get(2, 2), 1.0);
    }

    #[test]
    fn random_split_fractions() {
        let s = SplitMasks::random(100, 3).unwrap();
        assert_eq!(s.train_indices().len(), 10);
        assert_eq!(s.val_indices().len(), 10);
        assert_eq!(s.test_indices().len(), 80);
        for i in 0..100 {
            assert_eq!(s.train[i] as u8 + s.val[i] as u8 + s.test[i] as u8, 1);
        }
        assert_eq!(s, SplitMasks::random(100, 3).unwrap());
    }

    #[test]
    fn overlapping_split_rejected() {
        assert!(SplitMasks::from_indices(4, &[0], &[0], &[1]).is_err());
        assert!(SplitMasks::from_indices(4, &[0], &[], &[1]).is_err());
    }
}
