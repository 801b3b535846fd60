//! Task losses and the structure-regression losses layered on top of them.
//!
//! The first-order loss regresses each node's log-degree from its embedding
//! through a linear head; the node-level second-order loss does the same for
//! the log histogram of neighbor degrees. The graph-level second-order loss
//! adds a whole-graph histogram term predicted from the pooled embedding.
//! With zero-initialized heads each structure loss reduces to the mean of
//! its squared targets, which the tests pin in closed form.

use crate::error::Result;
use crate::graph::StructureTargets;
use crate::optim::StagedParams;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Weights of the combined objective; the default `(1, 1, 1)` is the plain
/// unweighted sum of task and structure losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub task: f64,
    pub first: f64,
    pub second: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            task: 1.0,
            first: 1.0,
            second: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.task < 0.0 || self.first < 0.0 || self.second < 0.0 {
            return Err(crate::error::Error::config("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Mean cross-entropy of node logits over the masked rows.
pub fn task_ce_node(
    tape: &mut Tape,
    logits: ValueId,
    labels: &Arc<Vec<usize>>,
    mask: &Arc<Vec<usize>>,
) -> Result<ValueId> {
    tape.softmax_cross_entropy(logits, labels, mask)
}

/// First-order structure loss: MSE between the scalar head output and the
/// log-degree, over the masked nodes (all nodes when `mask` is `None`).
pub fn loss_first_order(
    tape: &mut Tape,
    emb: ValueId,
    staged: &StagedParams,
    targets: &StructureTargets,
    mask: Option<&Arc<Vec<usize>>>,
) -> Result<ValueId> {
    let w1 = staged.get("head.first_order")?;
    let (pred, target) = match mask {
        None => (tape.matmul(emb, w1)?, targets.log_degree.clone()),
        Some(rows) => {
            let sub = tape.row_gather(emb, rows)?;
            (tape.matmul(sub, w1)?, gather_rows(&targets.log_degree, rows))
        }
    };
    tape.mse(pred, &target)
}

/// Node-level second-order loss: MSE between the linear head output and the
/// log neighbor-degree histogram, normalized by `masked rows × K`.
pub fn loss_second_order_node(
    tape: &mut Tape,
    emb: ValueId,
    staged: &StagedParams,
    targets: &StructureTargets,
    mask: Option<&Arc<Vec<usize>>>,
) -> Result<ValueId> {
    let w2 = staged.get("head.second_order")?;
    let (pred, target) = match mask {
        None => (tape.matmul(emb, w2)?, targets.log_neighbor_hist.clone()),
        Some(rows) => {
            let sub = tape.row_gather(emb, rows)?;
            (tape.matmul(sub, w2)?, gather_rows(&targets.log_neighbor_hist, rows))
        }
    };
    tape.mse(pred, &target)
}

/// Graph-level second-order loss: the node histogram term plus a whole-graph
/// histogram term on the pooled embedding, each a mean over its own entries
/// (for a single graph this is exactly `1/K` times the two summed squares).
pub fn loss_second_order_graph(
    tape: &mut Tape,
    node_emb: ValueId,
    graph_emb: ValueId,
    staged: &StagedParams,
    node_target: &Tensor,
    graph_target: &Tensor,
) -> Result<ValueId> {
    let w2 = staged.get("head.second_order")?;
    let w2g = staged.get("head.second_order_graph")?;
    let node_pred = tape.matmul(node_emb, w2)?;
    let node_term = tape.mse(node_pred, node_target)?;
    let graph_pred = tape.matmul(graph_emb, w2g)?;
    let graph_term = tape.mse(graph_pred, graph_target)?;
    tape.add(node_term, graph_term)
}

/// Sigmoid binary cross-entropy over edge scores: positives then negatives.
pub fn edge_bce(
    tape: &mut Tape,
    pos_scores: ValueId,
    neg_scores: ValueId,
) -> Result<ValueId> {
    let n_pos = tape.value(pos_scores).rows();
    let n_neg = tape.value(neg_scores).rows();
    let all = tape.append_rows(pos_scores, neg_scores)?;
    let mut targets = vec![1.0; n_pos];
    targets.extend(std::iter::repeat(0.0).take(n_neg));
    tape.sigmoid_bce(all, &Arc::new(targets))
}

/// Weighted sum of available loss components. Zero-weight or absent parts
/// contribute nothing, so `(1, 0, 0)` is exactly the task loss.
pub fn combined_loss(
    tape: &mut Tape,
    task: ValueId,
    first: Option<ValueId>,
    second: Option<ValueId>,
    weights: &LossWeights,
) -> Result<ValueId> {
    let mut total = tape.scale(task, weights.task);
    if let Some(l1) = first {
        if weights.first != 0.0 {
            let part = tape.scale(l1, weights.first);
            total = tape.add(total, part)?;
        }
    }
    if let Some(l2) = second {
        if weights.second != 0.0 {
            let part = tape.scale(l2, weights.second);
            total = tape.add(total, part)?;
        }
    }
    Ok(total)
}

fn gather_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::from_vec(&[rows.len(), c], data).expect("sized upfront")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_structure_targets, Graph};
    use crate::optim::ParamStore;
    use crate::tensor::Tensor;

    fn staged_heads(
        store: &mut ParamStore,
        emb_dim: usize,
        k: usize,
        graph_level: bool,
    ) {
        store
            .register("head.first_order", Tensor::zeros(&[emb_dim, 1]), false)
            .unwrap();
        store
            .register("head.second_order", Tensor::zeros(&[emb_dim, k]), false)
            .unwrap();
        if graph_level {
            store
                .register("head.second_order_graph", Tensor::zeros(&[emb_dim, k]), false)
                .unwrap();
        }
    }

    #[test]
    fn first_order_zero_when_head_matches_target() {
        // W1 v_i = 1.0 for every node of degree 1 with eps 1: loss 0
        let g = Graph::build(&[(0, 1)], 2, true).unwrap();
        let targets = build_structure_targets(&g, 1, 1.0, false).unwrap();
        let mut store = ParamStore::new();
        staged_heads(&mut store, 1, 1, false);
        store.set("head.first_order", Tensor::from_vec(&[1, 1], vec![1.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let emb = tape.leaf(Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap());
        let loss = loss_first_order(&mut tape, emb, &staged, &targets, None).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-30);
    }

    #[test]
    fn first_order_zero_head_closed_form() {
        // all degrees 3, eps 1: targets are log2(4) = 2, zero head -> loss 4
        let g = Graph::build(&[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)], 4, true).unwrap();
        assert_eq!(g.degrees(), vec![3, 3, 3, 3]);
        let targets = build_structure_targets(&g, 3, 1.0, false).unwrap();
        let mut store = ParamStore::new();
        staged_heads(&mut store, 2, 3, false);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let emb = tape.leaf(Tensor::from_vec(&[4, 2], vec![0.5; 8]).unwrap());
        let loss = loss_first_order(&mut tape, emb, &staged, &targets, None).unwrap();
        assert!((tape.value(loss).item() - 4.0).abs() < 1e-12);
    }

    /// Loop oracle for the node second-order loss with a zero head.
    fn second_order_oracle(targets: &StructureTargets) -> f64 {
        let t = &targets.log_neighbor_hist;
        t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64
    }

    #[test]
    fn second_order_node_path_graph_value() {
        // path 0-1-2, K=2, eps=1, zero head: entries are log2(hist+1) with a
        // squared mean of (1 + (log2 3)^2 + 1) / 6
        let g = Graph::build(&[(0, 1), (1, 2)], 3, true).unwrap();
        let targets = build_structure_targets(&g, 2, 1.0, false).unwrap();
        let mut store = ParamStore::new();
        staged_heads(&mut store, 2, 2, false);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let emb = tape.leaf(Tensor::from_vec(&[3, 2], vec![0.3; 6]).unwrap());
        let loss = loss_second_order_node(&mut tape, emb, &staged, &targets, None).unwrap();
        let got = tape.value(loss).item();
        let l3 = 3.0f64.log2();
        let want = (1.0 + l3 * l3 + 1.0) / 6.0;
        assert!((got - want).abs() < 1e-12);
        assert!((got - second_order_oracle(&targets)).abs() < 1e-12);
        assert!((got - 0.752).abs() < 5e-4);
    }

    #[test]
    fn second_order_node_zero_when_histograms_empty() {
        let g = Graph::build(&[], 3, true).unwrap(); // no edges: all-zero hist
        let targets = build_structure_targets(&g, 2, 1.0, false).unwrap();
        let mut store = ParamStore::new();
        staged_heads(&mut store, 2, 2, false);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let emb = tape.leaf(Tensor::from_vec(&[3, 2], vec![0.9; 6]).unwrap());
        let loss = loss_second_order_node(&mut tape, emb, &staged, &targets, None).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn second_order_node_matches_loop_oracle_on_random_graph() {
        let g = Graph::random(20, 0.2, 17).unwrap();
        let k = crate::graph::histogram_len(g.max_degree(), 32);
        let targets = build_structure_targets(&g, k, 1.0, false).unwrap();
        let mut store = ParamStore::new();
        staged_heads(&mut store, 3, k, false);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let emb = tape.leaf(Tensor::zeros(&[20, 3]));
        let loss = loss_second_order_node(&mut tape, emb, &staged, &targets, None).unwrap();
        assert!((tape.value(loss).item() - second_order_oracle(&targets)).abs() < 1e-12);
    }

    #[test]
    fn second_order_graph_triangle_value() {
        // triangle, K=2, eps=1, zero heads. Node rows: [0, log2 3] each.
        // Graph histogram [0, 3] -> log targets [0, 2]. Loop oracle:
        // (1/2)[(1/3)·3·(log2 3)^2 + (0 + 4)] = ((log2 3)^2 + 4) / 2.
        let g = Graph::build(&[(0, 1), (1, 2), (0, 2)], 3, true).unwrap();
        let targets = build_structure_targets(&g, 2, 1.0, true).unwrap();
        let mut store = ParamStore::new();
        staged_heads(&mut store, 2, 2, true);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let node_emb = tape.leaf(Tensor::from_vec(&[3, 2], vec![0.1; 6]).unwrap());
        let graph_emb = tape.leaf(Tensor::from_vec(&[1, 2], vec![0.2, 0.3]).unwrap());
        let loss = loss_second_order_graph(
            &mut tape,
            node_emb,
            graph_emb,
            &staged,
            &targets.log_neighbor_hist,
            targets.log_graph_hist.as_ref().unwrap(),
        )
        .unwrap();
        let l3 = 3.0f64.log2();
        let want = (l3 * l3 + 4.0) / 2.0;
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
        assert!((tape.value(loss).item() - 3.2560531).abs() < 5e-6);
    }

    #[test]
    fn second_order_graph_zero_for_single_node() {
        let g = Graph::build(&[], 1, true).unwrap();
        let targets = build_structure_targets(&g, 1, 1.0, true).unwrap();
        let mut store = ParamStore::new();
        staged_heads(&mut store, 2, 1, true);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let node_emb = tape.leaf(Tensor::from_vec(&[1, 2], vec![0.4, -0.4]).unwrap());
        let graph_emb = tape.leaf(Tensor::from_vec(&[1, 2], vec![0.4, -0.4]).unwrap());
        let loss = loss_second_order_graph(
            &mut tape,
            node_emb,
            graph_emb,
            &staged,
            &targets.log_neighbor_hist,
            targets.log_graph_hist.as_ref().unwrap(),
        )
        .unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn combined_reduces_to_task_when_structure_weights_zero() {
        let mut tape = Tape::new();
        let task = tape.leaf(Tensor::scalar(0.7));
        let l1 = tape.leaf(Tensor::scalar(0.3));
        let w = LossWeights {
            task: 1.0,
            first: 0.0,
            second: 0.0,
        };
        let total = combined_loss(&mut tape, task, Some(l1), None, &w).unwrap();
        assert_eq!(tape.value(total).item(), 0.7);
    }

    #[test]
    fn combined_is_plain_sum_at_unit_weights() {
        let mut tape = Tape::new();
        let task = tape.leaf(Tensor::scalar(0.5));
        let l1 = tape.leaf(Tensor::scalar(0.25));
        let l2 = tape.leaf(Tensor::scalar(0.125));
        let total =
            combined_loss(&mut tape, task, Some(l1), Some(l2), &LossWeights::default()).unwrap();
        assert_eq!(tape.value(total).item(), 0.875);
    }

    #[test]
    fn combined_is_linear_in_weights() {
        let build = |w_first: f64| {
            let mut tape = Tape::new();
            let p = tape.leaf(Tensor::from_vec(&[2, 1], vec![0.4, -0.9]).unwrap());
            let task = tape.mse(p, &Tensor::zeros(&[2, 1])).unwrap();
            let l1 = tape.mse(p, &Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap()).unwrap();
            let w = LossWeights {
                task: 1.0,
                first: w_first,
                second: 0.0,
            };
            let total = combined_loss(&mut tape, task, Some(l1), None, &w).unwrap();
            let task_v = tape.value(task).item();
            let l1_v = tape.value(l1).item();
            let total_v = tape.value(total).item();
            let mut grads = tape.backward(total).unwrap();
            (total_v - task_v, l1_v, grads.take(p).unwrap())
        };
        let (contrib1, l1_v, g1) = build(1.0);
        let (contrib2, _, g2) = build(2.0);
        assert!((contrib1 - l1_v).abs() < 1e-12);
        assert!((contrib2 - 2.0 * contrib1).abs() < 1e-12);
        // doubling the weight doubles the first-order gradient block:
        // g(w) = g_task + w * g_first, so g(2) - g(1) == g(1) - g_task
        let g_task = {
            let mut tape = Tape::new();
            let p = tape.leaf(Tensor::from_vec(&[2, 1], vec![0.4, -0.9]).unwrap());
            let task = tape.mse(p, &Tensor::zeros(&[2, 1])).unwrap();
            let total = combined_loss(&mut tape, task, None, None, &LossWeights::default()).unwrap();
            let mut grads = tape.backward(total).unwrap();
            grads.take(p).unwrap()
        };
        for ((x2, x1), t) in g2.data().iter().zip(g1.data()).zip(g_task.data()) {
            assert!(((x2 - x1) - (x1 - t)).abs() < 1e-12);
        }
    }

    #[test]
    fn edge_bce_values() {
        let mut tape = Tape::new();
        let pos = tape.leaf(Tensor::from_vec(&[2, 1], vec![50.0, 60.0]).unwrap());
        let neg = tape.leaf(Tensor::from_vec(&[2, 1], vec![-50.0, -60.0]).unwrap());
        let loss = edge_bce(&mut tape, pos, neg).unwrap();
        assert!(tape.value(loss).item() < 1e-12);

        let mut tape = Tape::new();
        let pos = tape.leaf(Tensor::from_vec(&[2, 1], vec![0.0, 0.0]).unwrap());
        let neg = tape.leaf(Tensor::from_vec(&[2, 1], vec![0.0, 0.0]).unwrap());
        let loss = edge_bce(&mut tape, pos, neg).unwrap();
        assert!((tape.value(loss).item() - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn edge_bce_matches_naive_oracle() {
        let p = vec![0.7, -0.3, 1.9];
        let n = vec![0.2, -2.5];
        let mut tape = Tape::new();
        let pos = tape.leaf(Tensor::from_vec(&[3, 1], p.clone()).unwrap());
        let neg = tape.leaf(Tensor::from_vec(&[2, 1], n.clone()).unwrap());
        let loss = edge_bce(&mut tape, pos, neg).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let want: f64 = (p.iter().map(|&x| -(sig(x).ln())).sum::<f64>()
            + n.iter().map(|&x| -((1.0 - sig(x)).ln())).sum::<f64>())
            / 5.0;
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
    }
}
