//! Graph-benchmark text format: `DS_A.txt` holds 1-indexed comma-separated
//! arcs, `DS_graph_indicator.txt` maps nodes to graphs, `DS_graph_labels.txt`
//! labels each graph, and optional `DS_node_labels.txt` labels each node.

use super::GraphDataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;
use std::fs;
use std::path::{Path, PathBuf};

pub fn load_tudataset(dir: &Path) -> Result<GraphDataset> {
    let prefix = find_prefix(dir)?;
    let path = |suffix: &str| dir.join(format!("{prefix}_{suffix}.txt"));

    let indicator = parse_ints(&path("graph_indicator"))?;
    let num_graphs = *indicator
        .iter()
        .max()
        .ok_or_else(|| Error::config("graph indicator is empty"))? as usize;
    let num_nodes = indicator.len();

    // global node id (0-based) -> (graph index, local node id)
    let mut graph_of = vec![0usize; num_nodes];
    let mut local_id = vec![0usize; num_nodes];
    let mut node_count = vec![0usize; num_graphs];
    for (node, &g) in indicator.iter().enumerate() {
        if g < 1 || g as usize > num_graphs {
            return Err(parse_err(&path("graph_indicator"), node + 1, format!("graph id {g}")));
        }
        let gi = g as usize - 1;
        graph_of[node] = gi;
        local_id[node] = node_count[gi];
        node_count[gi] += 1;
    }
    if node_count.iter().any(|&c| c == 0) {
        return Err(Error::config("a graph in the indicator file has no nodes"));
    }

    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_graphs];
    let a_path = path("A");
    let a_text = fs::read_to_string(&a_path)?;
    for (lineno, line) in a_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',').map(str::trim);
        let (u, v) = match (parts.next(), parts.next(), parts.next()) {
            (Some(u), Some(v), None) => (u, v),
            _ => return Err(parse_err(&a_path, lineno + 1, "expected `u, v`".to_string())),
        };
        let u: usize = u
            .parse()
            .map_err(|_| parse_err(&a_path, lineno + 1, format!("bad node id {u}")))?;
        let v: usize = v
            .parse()
            .map_err(|_| parse_err(&a_path, lineno + 1, format!("bad node id {v}")))?;
        if u < 1 || u > num_nodes || v < 1 || v > num_nodes {
            return Err(parse_err(&a_path, lineno + 1, format!("arc ({u}, {v}) out of range")));
        }
        let (u, v) = (u - 1, v - 1);
        if graph_of[u] != graph_of[v] {
            return Err(parse_err(
                &a_path,
                lineno + 1,
                format!(
                    "arc crosses graph boundary: node {} in graph {}, node {} in graph {}",
                    u + 1,
                    graph_of[u] + 1,
                    v + 1,
                    graph_of[v] + 1
                ),
            ));
        }
        edges[graph_of[u]].push((local_id[u], local_id[v]));
    }

    let raw_graph_labels = parse_ints(&path("graph_labels"))?;
    if raw_graph_labels.len() != num_graphs {
        return Err(Error::config(format!(
            "{} graph labels for {} graphs",
            raw_graph_labels.len(),
            num_graphs
        )));
    }
    let mut classes: Vec<i64> = raw_graph_labels.clone();
    classes.sort_unstable();
    classes.dedup();
    let labels: Vec<usize> = raw_graph_labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label from the same list"))
        .collect();

    // node labels become one-hot features; absent labels become a constant 1
    let node_label_path = path("node_labels");
    let features: Vec<Tensor> = if node_label_path.exists() {
        let raw = parse_ints(&node_label_path)?;
        if raw.len() != num_nodes {
            return Err(Error::config(format!(
                "{} node labels for {num_nodes} nodes",
                raw.len()
            )));
        }
        let mut values: Vec<i64> = raw.clone();
        values.sort_unstable();
        values.dedup();
        let dim = values.len();
        let mut feats: Vec<Tensor> = node_count
            .iter()
            .map(|&c| Tensor::zeros(&[c, dim]))
            .collect();
        for (node, l) in raw.iter().enumerate() {
            let col = values.binary_search(l).expect("value from the same list");
            let (gi, li) = (graph_of[node], local_id[node]);
            feats[gi].data_mut()[li * dim + col] = 1.0;
        }
        feats
    } else {
        node_count
            .iter()
            .map(|&c| Tensor::from_vec(&[c, 1], vec![1.0; c]).expect("sized"))
            .collect()
    };

    let graphs = edges
        .iter()
        .zip(&node_count)
        .map(|(e, &n)| Graph::build(e, n, true))
        .collect::<Result<Vec<_>>>()?;

    GraphDataset::new(graphs, features, labels, classes.len())
}

fn find_prefix(dir: &Path) -> Result<String> {
    let mut candidates = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix("_A.txt") {
            candidates.push(stem.to_string());
        }
    }
    candidates.sort();
    candidates
        .into_iter()
        .next()
        .ok_or_else(|| Error::config(format!("no *_A.txt file in {}", dir.display())))
}

fn parse_ints(path: &PathBuf) -> Result<Vec<i64>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(
            t.parse()
                .map_err(|_| parse_err(path, lineno + 1, format!("bad integer {t}")))?,
        );
    }
    Ok(out)
}

fn parse_err(path: &Path, line: usize, msg: String) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &Path, name: &str, body: &str) {
        let mut f = fs::File::create(dir.join(name)).unwrap();
        f.write_all(body.as_bytes()).unwrap();
    }

    /// Triangle (graph 1) plus a single edge (graph 2).
    fn write_fixture(dir: &Path) {
        write_file(
            dir,
            "TOY_A.txt",
            "1, 2\n2, 1\n2, 3\n3, 2\n1, 3\n3, 1\n4, 5\n5, 4\n",
        );
        write_file(dir, "TOY_graph_indicator.txt", "1\n1\n1\n2\n2\n");
        write_file(dir, "TOY_graph_labels.txt", "1\n-1\n");
        write_file(dir, "TOY_node_labels.txt", "0\n1\n0\n2\n0\n");
    }

    #[test]
    fn synthetic_two_graph_fixture() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        let ds = load_tudataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.graphs[0].num_nodes(), 3);
        assert_eq!(ds.graphs[1].num_nodes(), 2);
        assert_eq!(ds.labels, vec![1, 0]); // -1 maps to 0, 1 maps to 1
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.feature_dim(), 3); // node labels {0, 1, 2}
        assert_eq!(ds.features[1].row(0), &[0.0, 0.0, 1.0]);
        assert_eq!(ds.graphs[0].degrees(), vec![2, 2, 2]);
    }

    #[test]
    fn boundary_crossing_edge_is_a_hard_error() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        write_file(dir.path(), "TOY_A.txt", "1, 2\n2, 1\n3, 4\n");
        let err = load_tudataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("crosses graph boundary"), "{err}");
    }

    #[test]
    fn constant_feature_when_node_labels_missing() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        fs::remove_file(dir.path().join("TOY_node_labels.txt")).unwrap();
        let ds = load_tudataset(dir.path()).unwrap();
        assert_eq!(ds.feature_dim(), 1);
        assert_eq!(ds.features[0].data(), &[1.0, 1.0, 1.0]);
    }
}
