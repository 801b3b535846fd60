//! Deterministic split construction for the three tasks.

use super::{EdgeSplit, NodeDataset, Split};
use crate::error::{Error, Result};
use crate::graph::Graph;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::collections::HashSet;

const TRAIN_PER_CLASS: usize = 20;
const PLANETOID_VAL: usize = 500;
const PLANETOID_TEST: usize = 1000;

/// Fixed citation-benchmark split: the first 20 nodes of each class in file
/// order train, the next 500 non-train nodes validate, the next 1000 test.
pub fn planetoid_split(ds: &NodeDataset) -> Result<Split> {
    let n = ds.num_nodes();
    let c = ds.num_classes;
    let mut per_class = vec![0usize; c];
    for &l in &ds.labels {
        per_class[l] += 1;
    }
    if let Some(small) = per_class.iter().position(|&k| k < TRAIN_PER_CLASS) {
        return Err(Error::config(format!(
            "class {small} has {} nodes, needs at least {TRAIN_PER_CLASS}",
            per_class[small]
        )));
    }
    if n < TRAIN_PER_CLASS * c + PLANETOID_VAL + PLANETOID_TEST {
        return Err(Error::config(format!(
            "{n} nodes cannot hold {TRAIN_PER_CLASS}/class + {PLANETOID_VAL} val + {PLANETOID_TEST} test"
        )));
    }

    let mut train = vec![false; n];
    let mut taken = vec![0usize; c];
    for (i, &l) in ds.labels.iter().enumerate() {
        if taken[l] < TRAIN_PER_CLASS {
            taken[l] += 1;
            train[i] = true;
        }
    }
    let mut val = vec![false; n];
    let mut test = vec![false; n];
    let mut val_left = PLANETOID_VAL;
    let mut test_left = PLANETOID_TEST;
    for i in 0..n {
        if train[i] {
            continue;
        }
        if val_left > 0 {
            val[i] = true;
            val_left -= 1;
        } else if test_left > 0 {
            test[i] = true;
            test_left -= 1;
        } else {
            break;
        }
    }
    Split::new(train, val, test)
}

/// Stratified random split of `labels` into the given fractions,
/// deterministic per seed.
pub fn stratified_split(
    labels: &[usize],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Split> {
    let (ft, fv, fe) = fractions;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 {
        return Err(Error::config("split fractions must be non-negative"));
    }
    if ft + fv + fe > 1.0 + 1e-9 {
        return Err(Error::config(format!(
            "split fractions sum to {} > 1",
            ft + fv + fe
        )));
    }
    let n = labels.len();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut train = vec![false; n];
    let mut val = vec![false; n];
    let mut test = vec![false; n];
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let nc = members.len();
        let n_tr = ((ft * nc as f64).round() as usize).min(nc);
        let n_va = ((fv * nc as f64).round() as usize).min(nc - n_tr);
        let n_te = ((fe * nc as f64).round() as usize).min(nc - n_tr - n_va);
        for (k, &i) in members.iter().enumerate() {
            if k < n_tr {
                train[i] = true;
            } else if k < n_tr + n_va {
                val[i] = true;
            } else if k < n_tr + n_va + n_te {
                test[i] = true;
            }
        }
    }
    Split::new(train, val, test)
}

/// Stratified random node split.
pub fn random_split(ds: &NodeDataset, fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    stratified_split(&ds.labels, fractions, seed)
}

/// Partition undirected edges into train/val/test positives, keep only train
/// positives as message edges, and sample an equal number of verified
/// non-edges per partition. Deterministic per seed.
pub fn make_edge_split(g: &Graph, val_frac: f64, test_frac: f64, seed: u64) -> Result<EdgeSplit> {
    if !(0.0..1.0).contains(&val_frac) || !(0.0..1.0).contains(&test_frac) {
        return Err(Error::config("edge split fractions must be in [0, 1)"));
    }
    if val_frac + test_frac >= 1.0 {
        return Err(Error::config(format!(
            "val + test fractions {} leave no training edges",
            val_frac + test_frac
        )));
    }
    let n = g.num_nodes();
    let mut edges = g.undirected_edges();
    let num_edges = edges.len();
    if num_edges == 0 {
        return Err(Error::config("graph has no edges to split"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    edges.shuffle(&mut rng);
    let n_test = (test_frac * num_edges as f64).round() as usize;
    let n_val = (val_frac * num_edges as f64).round() as usize;
    let test_pos: Vec<_> = edges[..n_test].to_vec();
    let val_pos: Vec<_> = edges[n_test..n_test + n_val].to_vec();
    let train_pos: Vec<_> = edges[n_test + n_val..].to_vec();

    // negatives: uniform over non-edges, deduplicated within each partition
    let possible = n * (n - 1) / 2 - num_edges;
    let mut sample_negatives = |count: usize| -> Result<Vec<(usize, usize)>> {
        if count > possible {
            return Err(Error::config(format!(
                "cannot sample {count} negative pairs: only {possible} non-edges exist"
            )));
        }
        let mut seen: HashSet<(usize, usize)> = HashSet::with_capacity(count);
        let mut negatives = Vec::with_capacity(count);
        let max_attempts = 100 * count + 10_000;
        let mut attempts = 0usize;
        while negatives.len() < count {
            attempts += 1;
            if attempts > max_attempts {
                return Err(Error::config(format!(
                    "negative sampling gave up after {max_attempts} attempts"
                )));
            }
            let u = rng.gen_range(0..n);
            let v = rng.gen_range(0..n);
            if u == v {
                continue;
            }
            let pair = (u.min(v), u.max(v));
            if g.has_edge(pair.0, pair.1) || !seen.insert(pair) {
                continue;
            }
            negatives.push(pair);
        }
        Ok(negatives)
    };
    let test_neg = sample_negatives(n_test)?;
    let val_neg = sample_negatives(n_val)?;
    let train_neg = sample_negatives(train_pos.len())?;

    Ok(EdgeSplit {
        message_edges: train_pos.clone(),
        train_pos,
        val_pos,
        test_pos,
        train_neg,
        val_neg,
        test_neg,
    })
}
