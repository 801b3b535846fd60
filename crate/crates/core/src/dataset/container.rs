//! Versioned JSON containers for converted datasets.
//!
//! Node container: `{"format": 1, "num_nodes", "edges": [[u, v], ...],
//! "features": [[...]], "labels": [...], "num_classes", "node_ids"?}`.
//! Graph container: `{"format": 1, "num_classes", "graphs": [{"num_nodes",
//! "edges", "features", "label"}, ...]}`.

use super::{GraphDataset, NodeDataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const CONTAINER_FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeContainer {
    format: u32,
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node_ids: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRecord {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    features: Vec<Vec<f64>>,
    label: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphContainer {
    format: u32,
    num_classes: usize,
    graphs: Vec<GraphRecord>,
}

pub fn save_node_json(ds: &NodeDataset, path: &Path) -> Result<()> {
    let container = NodeContainer {
        format: CONTAINER_FORMAT,
        num_nodes: ds.num_nodes(),
        edges: ds.graph.undirected_edges(),
        features: (0..ds.num_nodes()).map(|i| ds.features.row(i).to_vec()).collect(),
        labels: ds.labels.clone(),
        num_classes: ds.num_classes,
        node_ids: Some(ds.node_ids.clone()),
    };
    fs::write(path, serde_json::to_vec(&container)?)?;
    Ok(())
}

pub fn load_node_json(path: &Path) -> Result<NodeDataset> {
    let container: NodeContainer = serde_json::from_slice(&fs::read(path)?)?;
    if container.format != CONTAINER_FORMAT {
        return Err(Error::config(format!(
            "unsupported container format {}",
            container.format
        )));
    }
    let n = container.num_nodes;
    let dim = container.features.first().map_or(0, Vec::len);
    if container.features.len() != n {
        return Err(Error::config(format!(
            "{} feature rows for {n} nodes",
            container.features.len()
        )));
    }
    if let Some(bad) = container.features.iter().position(|r| r.len() != dim) {
        return Err(Error::config(format!("feature row {bad} has wrong length")));
    }
    let graph = Graph::build(&container.edges, n, true)?;
    let features = Tensor::from_vec(&[n, dim], container.features.into_iter().flatten().collect())?;
    let node_ids = container
        .node_ids
        .unwrap_or_else(|| (0..n).map(|i| i.to_string()).collect());
    NodeDataset::new(graph, features, container.labels, container.num_classes, node_ids, 0)
}

pub fn save_graph_json(ds: &GraphDataset, path: &Path) -> Result<()> {
    let graphs = ds
        .graphs
        .iter()
        .zip(&ds.features)
        .zip(&ds.labels)
        .map(|((g, f), &label)| GraphRecord {
            num_nodes: g.num_nodes(),
            edges: g.undirected_edges(),
            features: (0..g.num_nodes()).map(|i| f.row(i).to_vec()).collect(),
            label,
        })
        .collect();
    let container = GraphContainer {
        format: CONTAINER_FORMAT,
        num_classes: ds.num_classes,
        graphs,
    };
    fs::write(path, serde_json::to_vec(&container)?)?;
    Ok(())
}

pub fn load_graph_json(path: &Path) -> Result<GraphDataset> {
    let container: GraphContainer = serde_json::from_slice(&fs::read(path)?)?;
    if container.format != CONTAINER_FORMAT {
        return Err(Error::config(format!(
            "unsupported container format {}",
            container.format
        )));
    }
    let mut graphs = Vec::with_capacity(container.graphs.len());
    let mut features = Vec::with_capacity(container.graphs.len());
    let mut labels = Vec::with_capacity(container.graphs.len());
    for rec in container.graphs {
        let dim = rec.features.first().map_or(0, Vec::len);
        if rec.features.len() != rec.num_nodes {
            return Err(Error::config("feature rows disagree with num_nodes"));
        }
        graphs.push(Graph::build(&rec.edges, rec.num_nodes, true)?);
        features.push(Tensor::from_vec(
            &[rec.num_nodes, dim],
            rec.features.into_iter().flatten().collect(),
        )?);
        labels.push(rec.label);
    }
    GraphDataset::new(graphs, features, labels, container.num_classes)
}
