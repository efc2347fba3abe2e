//! Graph container directories.
//!
//! ```text
//! header.json    {"num_nodes", "feat_dim", "num_classes", "split_seed"?, "edge_listing"?}
//! edges.tsv      "u<TAB>v" per line, one undirected edge each
//! features.csv   num_nodes rows of feat_dim comma-separated decimals
//! labels.csv     optional, one integer per line
//! splits.json    optional, {"train": [..], "val": [..], "test": [..]}
//! ```
//!
//! All indices are 0-based. Lines that are blank or start with `#` are skipped
//! in the text files.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph::{Graph, SplitMasks};

pub const HEADER_FILE: &str = "header.json";
pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const SPLITS_FILE: &str = "splits.json";

/// How `edges.tsv` lists edges.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeListing {
    /// Each undirected edge once, in either orientation.
    #[default]
    Undirected,
    /// Every edge in both orientations; a missing reverse is an error.
    BothDirections,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphHeader {
    pub num_nodes: usize,
    pub feat_dim: usize,
    #[serde(default)]
    pub num_classes: usize,
    /// Seed for the 10 / 10 / 80 split generated when `splits.json` is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
    #[serde(default)]
    pub edge_listing: EdgeListing,
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_index(path: &Path, line: usize, field: &str, token: &str) -> Result<usize> {
    token.parse::<usize>().map_err(|_| {
        Error::parse(
            path,
            line,
            format!("{field}: expected a non-negative integer, got {token:?}"),
        )
    })
}

fn parse_edges(path: &Path, text: &str, header: &GraphHeader) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (line, l) in content_lines(text) {
        let mut tokens = l.split_whitespace();
        let (Some(a), Some(b), None) = (tokens.next(), tokens.next(), tokens.next()) else {
            return Err(Error::parse(path, line, "expected exactly two columns"));
        };
        let u = parse_index(path, line, "column 1", a)?;
        let v = parse_index(path, line, "column 2", b)?;
        for (field, x) in [("column 1", u), ("column 2", v)] {
            if x >= header.num_nodes {
                return Err(Error::parse(
                    path,
                    line,
                    format!(
                        "{field}: node {x} out of range (num_nodes = {})",
                        header.num_nodes
                    ),
                ));
            }
        }
        if u == v {
            return Err(Error::parse(path, line, format!("self-loop on node {u}")));
        }
        edges.push((u, v));
    }
    if header.edge_listing == EdgeListing::BothDirections {
        let directed: HashSet<(usize, usize)> = edges.iter().copied().collect();
        if let Some(&(u, v)) = edges.iter().find(|&&(u, v)| !directed.contains(&(v, u))) {
            return Err(Error::parse(
                path,
                0,
                format!("asymmetric edge list: ({u}, {v}) has no reverse ({v}, {u})"),
            ));
        }
    }
    Ok(edges)
}

fn parse_features(path: &Path, text: &str, header: &GraphHeader) -> Result<Tensor> {
    let mut data = Vec::with_capacity(header.num_nodes * header.feat_dim);
    let mut rows = 0;
    for (line, l) in content_lines(text) {
        let before = data.len();
        for (col, token) in l.split(',').enumerate() {
            let v: f64 = token.trim().parse().map_err(|_| {
                Error::parse(
                    path,
                    line,
                    format!("column {}: bad number {token:?}", col + 1),
                )
            })?;
            if !v.is_finite() {
                return Err(Error::parse(
                    path,
                    line,
                    format!("column {}: non-finite value", col + 1),
                ));
            }
            data.push(v);
        }
        let got = data.len() - before;
        if got != header.feat_dim {
            return Err(Error::parse(
                path,
                line,
                format!(
                    "expected {} columns (feat_dim), found {got}",
                    header.feat_dim
                ),
            ));
        }
        rows += 1;
    }
    if rows != header.num_nodes {
        return Err(Error::parse(
            path,
            0,
            format!(
                "feature-row-count mismatch: {rows} rows, header says num_nodes = {}",
                header.num_nodes
            ),
        ));
    }
    Tensor::new(rows, header.feat_dim, data)
}

fn parse_labels(path: &Path, text: &str, header: &GraphHeader) -> Result<Vec<usize>> {
    let mut labels = Vec::with_capacity(header.num_nodes);
    for (line, l) in content_lines(text) {
        let y = parse_index(path, line, "label", l)?;
        if header.num_classes > 0 && y >= header.num_classes {
            return Err(Error::parse(
                path,
                line,
                format!(
                    "label {y} out of range (num_classes = {})",
                    header.num_classes
                ),
            ));
        }
        labels.push(y);
    }
    if labels.len() != header.num_nodes {
        return Err(Error::parse(
            path,
            0,
            format!(
                "{} labels, header says num_nodes = {}",
                labels.len(),
                header.num_nodes
            ),
        ));
    }
    Ok(labels)
}

/// Reads and validates the graph part of a container directory, ignoring splits.
pub fn read_graph(dir: impl AsRef<Path>) -> Result<(Graph, GraphHeader)> {
    let dir = dir.as_ref();
    let header_path = dir.join(HEADER_FILE);
    let header: GraphHeader = serde_json::from_str(&read(&header_path)?)
        .map_err(|e| Error::parse(&header_path, e.line(), e.to_string()))?;

    let edges_path = dir.join(EDGES_FILE);
    let edges = parse_edges(&edges_path, &read(&edges_path)?, &header)?;
    let features_path = dir.join(FEATURES_FILE);
    let features = parse_features(&features_path, &read(&features_path)?, &header)?;

    let labels_path = dir.join(LABELS_FILE);
    let labels = if labels_path.exists() {
        Some(parse_labels(&labels_path, &read(&labels_path)?, &header)?)
    } else {
        None
    };

    let mut graph = Graph::new(header.num_nodes, edges, features, labels)?;
    graph.set_num_classes(header.num_classes);
    Ok((graph, header))
}

/// Reads a container directory with its splits.
///
/// Without `splits.json` a 10 / 10 / 80 split is drawn from the header's
/// `split_seed` (0 when absent).
pub fn load_graph(dir: impl AsRef<Path>) -> Result<(Graph, SplitMasks)> {
    let dir = dir.as_ref();
    let (graph, header) = read_graph(dir)?;
    let splits_path = dir.join(SPLITS_FILE);
    let splits = if splits_path.exists() {
        let s: SplitFile = serde_json::from_str(&read(&splits_path)?)
            .map_err(|e| Error::parse(&splits_path, e.line(), e.to_string()))?;
        SplitMasks::from_indices(header.num_nodes, &s.train, &s.val, &s.test)
            .map_err(|e| Error::parse(&splits_path, 0, e.to_string()))?
    } else {
        SplitMasks::random(header.num_nodes, header.split_seed.unwrap_or(0))?
    };
    Ok((graph, splits))
}

/// Writes a container directory, creating it if needed. Returns the files written.
pub fn save_graph(
    dir: impl AsRef<Path>,
    graph: &Graph,
    splits: Option<&SplitMasks>,
    split_seed: Option<u64>,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut write = |name: &str, body: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };

    let header = GraphHeader {
        num_nodes: graph.num_nodes(),
        feat_dim: graph.feat_dim(),
        num_classes: graph.num_classes(),
        split_seed,
        edge_listing: EdgeListing::Undirected,
    };
    write(
        HEADER_FILE,
        serde_json::to_string_pretty(&header).expect("header serialises") + "\n",
    )?;

    let mut edges = String::new();
    for &(u, v) in graph.edges() {
        edges.push_str(&format!("{u}\t{v}\n"));
    }
    write(EDGES_FILE, edges)?;

    // `{}` on f64 prints the shortest string that parses back to the same bits.
    let x = graph.features();
    let mut features = String::new();
    for i in 0..x.rows() {
        let row: Vec<String> = x.row(i).iter().map(|v| format!("{v}")).collect();
        features.push_str(&row.join(","));
        features.push('\n');
    }
    write(FEATURES_FILE, features)?;

    if let Some(labels) = graph.labels() {
        let body: String = labels.iter().map(|y| format!("{y}\n")).collect();
        write(LABELS_FILE, body)?;
    }
    if let Some(s) = splits {
        let file = SplitFile {
            train: s.train_indices(),
            val: s.val_indices(),
            test: s.test_indices(),
        };
        write(
            SPLITS_FILE,
            serde_json::to_string(&file).expect("splits serialise") + "\n",
        )?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture(dir: &Path, header: &str, edges: &str, features: &str) {
        fs::write(dir.join(HEADER_FILE), header).unwrap();
        fs::write(dir.join(EDGES_FILE), edges).unwrap();
        fs::write(dir.join(FEATURES_FILE), features).unwrap();
    }

    #[test]
    fn minimal_fixture() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            r#"{"num_nodes": 2, "feat_dim": 2, "num_classes": 2}"#,
            "0\t1\n",
            "1.0,0.0\n0.0,1.0\n",
        );
        let (g, header) = read_graph(dir.path()).unwrap();
        assert_eq!((g.num_nodes(), g.num_edges(), g.feat_dim()), (2, 1, 2));
        assert_eq!(header.num_classes, 2);
    }

    #[test]
    fn explicit_splits_are_used() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            r#"{"num_nodes": 3, "feat_dim": 2}"#,
            "0 1\n",
            "1,0\n0,1\n0.5,0.5\n",
        );
        fs::write(
            dir.path().join(SPLITS_FILE),
            r#"{"train":[0],"val":[1],"test":[2]}"#,
        )
        .unwrap();
        let (_, s) = load_graph(dir.path()).unwrap();
        assert_eq!(s.test_indices(), vec![2]);
        fs::write(
            dir.path().join(SPLITS_FILE),
            r#"{"train":[0],"val":[1],"test":[1]}"#,
        )
        .unwrap();
        let msg = load_graph(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("splits.json"), "{msg}");
    }

    #[test]
    fn two_node_graph_with_generated_split_is_rejected_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            r#"{"num_nodes": 2, "feat_dim": 1}"#,
            "0 1\n",
            "1\n2\n",
        );
        let err = load_graph(dir.path()).unwrap_err();
        assert!(matches!(err, Error::DegenerateSplit(_)), "{err}");
    }

    #[test]
    fn duplicate_orientation_deduplicated() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            r#"{"num_nodes": 3, "feat_dim": 1}"#,
            "0\t1\n1\t0\n",
            "1\n2\n3\n",
        );
        let (g, _) = load_graph(dir.path()).unwrap();
        assert_eq!(g.num_edges(), 1);
    }

    #[test]
    fn errors_name_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            r#"{"num_nodes": 3, "feat_dim": 2}"#,
            "0\t1\n1\tx\n",
            "1,2\n3,4\n5,6\n",
        );
        let msg = load_graph(dir.path()).unwrap_err().to_string();
        assert!(
            msg.contains("edges.tsv:2") && msg.contains("column 2"),
            "{msg}"
        );

        fs::write(dir.path().join(EDGES_FILE), "0\t1\n").unwrap();
        fs::write(dir.path().join(FEATURES_FILE), "1,2\n3\n5,6\n").unwrap();
        let msg = load_graph(dir.path()).unwrap_err().to_string();
        assert!(
            msg.contains("features.csv:2") && msg.contains("feat_dim"),
            "{msg}"
        );

        fs::write(dir.path().join(FEATURES_FILE), "1,2\n3,4\n").unwrap();
        let msg = load_graph(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("feature-row-count mismatch"), "{msg}");
    }

    #[test]
    fn asymmetric_listing_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            r#"{"num_nodes": 3, "feat_dim": 1, "edge_listing": "both_directions"}"#,
            "0\t1\n1\t0\n1\t2\n",
            "1\n2\n3\n",
        );
        let msg = load_graph(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("asymmetric"), "{msg}");
    }

    #[test]
    fn missing_header_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_graph(dir.path()), Err(Error::Io { .. })));
    }
}
