//! Citation-network text format: one content line per node (id, binary
//! features, label string), one cites line per edge.

use super::NodeDataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

pub fn load_linqs(content_path: &Path, cites_path: &Path) -> Result<NodeDataset> {
    let content = read_nonempty(content_path)?;
    let cites = read_nonempty(cites_path)?;

    let mut node_ids: Vec<String> = Vec::new();
    let mut id_index: HashMap<String, usize> = HashMap::new();
    let mut label_strings: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut feature_dim = None;

    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let dim = *feature_dim.get_or_insert(fields.len().saturating_sub(2));
        if fields.len() != dim + 2 {
            return Err(parse_err(
                content_path,
                lineno + 1,
                format!("expected {} columns, found {}", dim + 2, fields.len()),
            ));
        }
        if fields.len() < 3 {
            return Err(parse_err(
                content_path,
                lineno + 1,
                "need id, at least one feature, and a label".to_string(),
            ));
        }
        let id = fields[0].to_string();
        if id_index.insert(id.clone(), node_ids.len()).is_some() {
            return Err(parse_err(
                content_path,
                lineno + 1,
                format!("duplicate node id {id}"),
            ));
        }
        let mut feat = Vec::with_capacity(dim);
        for (col, f) in fields[1..=dim].iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| {
                parse_err(
                    content_path,
                    lineno + 1,
                    format!("feature column {} is not a number: {f}", col + 1),
                )
            })?;
            feat.push(v);
        }
        rows.push(feat);
        node_ids.push(id);
        label_strings.push(fields[dim + 1].to_string());
    }
    if node_ids.is_empty() {
        return Err(parse_err(content_path, 0, "no nodes".to_string()));
    }

    // dense labels in lexicographic order of the label strings
    let mut classes: Vec<String> = label_strings.clone();
    classes.sort();
    classes.dedup();
    let class_index: HashMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let labels: Vec<usize> = label_strings.iter().map(|s| class_index[s.as_str()]).collect();

    let mut edges = Vec::new();
    let mut dropped = 0usize;
    for (lineno, line) in cites.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(parse_err(
                cites_path,
                lineno + 1,
                format!("expected 2 columns, found {}", fields.len()),
            ));
        }
        match (id_index.get(fields[0]), id_index.get(fields[1])) {
            (Some(&a), Some(&b)) => edges.push((a, b)),
            _ => dropped += 1,
        }
    }

    let n = node_ids.len();
    let dim = feature_dim.unwrap_or(0);
    let graph = Graph::build(&edges, n, true)?;
    let features = Tensor::from_vec(&[n, dim], rows.into_iter().flatten().collect())?;
    NodeDataset::new(graph, features, labels, classes.len(), node_ids, dropped)
}

fn read_nonempty(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Err(parse_err(path, 0, "file is empty".to_string()));
    }
    Ok(text)
}

fn parse_err(path: &Path, line: usize, msg: String) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    }
}
