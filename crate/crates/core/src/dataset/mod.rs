//! Dataset loading, containers, and train/val/test splitting.

mod container;
mod linqs;
mod split;
mod tudataset;

pub use container::{
    load_graph_json, load_node_json, save_graph_json, save_node_json, CONTAINER_FORMAT,
};
pub use linqs::load_linqs;
pub use split::{make_edge_split, planetoid_split, random_split, stratified_split};
pub use tudataset::load_tudataset;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// One graph with node features and per-node class labels.
#[derive(Debug, Clone)]
pub struct NodeDataset {
    pub graph: Graph,
    /// `[num_nodes, feature_dim]`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Original node identifiers, in file order.
    pub node_ids: Vec<String>,
    /// Citation edges dropped because an endpoint was unknown.
    pub dropped_edges: usize,
}

impl NodeDataset {
    pub fn new(
        graph: Graph,
        features: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        node_ids: Vec<String>,
        dropped_edges: usize,
    ) -> Result<NodeDataset> {
        let n = graph.num_nodes();
        if features.rows() != n || labels.len() != n || node_ids.len() != n {
            return Err(Error::config(format!(
                "dataset arrays disagree: {n} nodes, {} feature rows, {} labels, {} ids",
                features.rows(),
                labels.len(),
                node_ids.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::config(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if !features.is_finite() {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        Ok(NodeDataset {
            graph,
            features,
            labels,
            num_classes,
            node_ids,
            dropped_edges,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }
}

/// A collection of labeled graphs for graph classification.
#[derive(Debug, Clone)]
pub struct GraphDataset {
    pub graphs: Vec<Graph>,
    /// Per-graph node feature matrices.
    pub features: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl GraphDataset {
    pub fn new(
        graphs: Vec<Graph>,
        features: Vec<Tensor>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<GraphDataset> {
        if graphs.is_empty() {
            return Err(Error::config("graph dataset is empty"));
        }
        if graphs.len() != features.len() || graphs.len() != labels.len() {
            return Err(Error::config("graphs, features, and labels disagree in length"));
        }
        for (i, (g, f)) in graphs.iter().zip(&features).enumerate() {
            if g.num_nodes() == 0 {
                return Err(Error::config(format!("graph {i} is empty")));
            }
            if f.rows() != g.num_nodes() {
                return Err(Error::config(format!(
                    "graph {i}: {} nodes but {} feature rows",
                    g.num_nodes(),
                    f.rows()
                )));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::config(format!(
                "graph label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(GraphDataset {
            graphs,
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].cols()
    }

    pub fn max_degree(&self) -> usize {
        self.graphs.iter().map(|g| g.max_degree()).max().unwrap_or(0)
    }
}

/// Disjoint train/val/test boolean masks over nodes or graphs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train_mask: Vec<bool>,
    pub val_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
}

impl Split {
    pub fn new(train_mask: Vec<bool>, val_mask: Vec<bool>, test_mask: Vec<bool>) -> Result<Split> {
        let n = train_mask.len();
        if val_mask.len() != n || test_mask.len() != n {
            return Err(Error::config("split masks disagree in length"));
        }
        for i in 0..n {
            let overlapping = (train_mask[i] && val_mask[i])
                || (train_mask[i] && test_mask[i])
                || (val_mask[i] && test_mask[i]);
            if overlapping {
                return Err(Error::config(format!("split masks overlap at index {i}")));
            }
        }
        if !train_mask.iter().any(|&b| b) {
            return Err(Error::config("train split is empty"));
        }
        if !val_mask.iter().any(|&b| b) {
            return Err(Error::config("validation split is empty"));
        }
        Ok(Split {
            train_mask,
            val_mask,
            test_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.train_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_mask.is_empty()
    }

    fn indices(mask: &[bool]) -> Vec<usize> {
        mask.iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        Split::indices(&self.train_mask)
    }

    pub fn val_indices(&self) -> Vec<usize> {
        Split::indices(&self.val_mask)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        Split::indices(&self.test_mask)
    }
}

/// Edge-prediction split: message edges for propagation plus balanced
/// positive/negative pairs per partition. Negatives are verified non-edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSplit {
    pub message_edges: Vec<(usize, usize)>,
    pub train_pos: Vec<(usize, usize)>,
    pub val_pos: Vec<(usize, usize)>,
    pub test_pos: Vec<(usize, usize)>,
    pub train_neg: Vec<(usize, usize)>,
    pub val_neg: Vec<(usize, usize)>,
    pub test_neg: Vec<(usize, usize)>,
}
