//! Linear probes over frozen embeddings.
//!
//! A probe fits closed-form ridge regression from embeddings to a structural
//! target (node degree or the sum of neighbor degrees) on a random train
//! subset and reports held-out MSE and MAPE. Comparing a baseline run
//! against a structure-loss run quantifies how much degree information each
//! embedding retains.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::optim::seeded_rng;
use crate::tensor::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub const RIDGE_LAMBDA: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    Degree,
    NeighborDegreeSum,
}

impl std::fmt::Display for ProbeTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProbeTarget::Degree => write!(f, "degree"),
            ProbeTarget::NeighborDegreeSum => write!(f, "neighbor_degree_sum"),
        }
    }
}

/// `s_i = Σ_{u ∈ N(i)} degree(u)`.
pub fn neighbor_degree_sum(g: &Graph) -> Vec<f64> {
    (0..g.num_nodes())
        .map(|i| g.neighbors(i).iter().map(|&u| g.degree(u) as f64).sum())
        .collect()
}

pub fn probe_target_values(g: &Graph, target: ProbeTarget) -> Vec<f64> {
    match target {
        ProbeTarget::Degree => g.degrees().iter().map(|&d| d as f64).collect(),
        ProbeTarget::NeighborDegreeSum => neighbor_degree_sum(g),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub target: ProbeTarget,
    pub mse: f64,
    /// Absolute percentage error with denominator `max(target, 1)`; absent
    /// when every target is zero.
    pub mape: Option<f64>,
    pub train_frac: f64,
    pub seed: u64,
    pub num_train: usize,
    pub num_heldout: usize,
    /// Ridge weights, intercept last.
    pub weights: Vec<f64>,
    /// Held-out `(node, target, prediction)` rows for CSV export.
    pub predictions: Vec<(usize, f64, f64)>,
}

/// Closed-form ridge regression `(XᵀX + λI)w = Xᵀy` with an intercept
/// column, fit on a seeded random subset and scored on the rest.
pub fn fit_probe(
    embeddings: &Tensor,
    targets: &[f64],
    target_kind: ProbeTarget,
    train_frac: f64,
    seed: u64,
) -> Result<ProbeReport> {
    let n = embeddings.rows();
    if targets.len() != n {
        return Err(Error::shape(format!(
            "{} targets for {n} embedding rows",
            targets.len()
        )));
    }
    if !(0.0..1.0).contains(&train_frac) || train_frac == 0.0 {
        return Err(Error::config("probe train fraction must be in (0, 1)"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed));
    let n_train = ((train_frac * n as f64).round() as usize).clamp(1, n - 1);
    let (train_idx, test_idx) = order.split_at(n_train);

    let d = embeddings.cols() + 1; // intercept column appended
    let design = |rows: &[usize]| {
        DMatrix::from_fn(rows.len(), d, |i, j| {
            if j + 1 == d {
                1.0
            } else {
                embeddings.row(rows[i])[j]
            }
        })
    };
    let x_train = design(train_idx);
    let y_train = DVector::from_fn(train_idx.len(), |i, _| targets[train_idx[i]]);

    let xtx = x_train.transpose() * &x_train + DMatrix::identity(d, d) * RIDGE_LAMBDA;
    let xty = x_train.transpose() * y_train;
    let w = match xtx.clone().cholesky() {
        Some(ch) => ch.solve(&xty),
        None => xtx
            .lu()
            .solve(&xty)
            .ok_or_else(|| Error::Numeric("ridge normal equations are singular".into()))?,
    };

    let x_test = design(test_idx);
    let preds = x_test * &w;
    let mut mse = 0.0;
    let mut mape = 0.0;
    let mut predictions = Vec::with_capacity(test_idx.len());
    for (i, &node) in test_idx.iter().enumerate() {
        let (t, p) = (targets[node], preds[i]);
        mse += (t - p) * (t - p);
        mape += (t - p).abs() / t.max(1.0);
        predictions.push((node, t, p));
    }
    let m = test_idx.len().max(1) as f64;
    mse /= m;
    mape /= m;
    let all_zero = targets.iter().all(|&t| t == 0.0);
    Ok(ProbeReport {
        target: target_kind,
        mse,
        mape: (!all_zero).then_some(mape),
        train_frac,
        seed,
        num_train: train_idx.len(),
        num_heldout: test_idx.len(),
        weights: w.iter().copied().collect(),
        predictions,
    })
}

/// Relative change of one probe metric between two models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeComparisonRow {
    pub target: ProbeTarget,
    pub metric: String,
    pub baseline: f64,
    pub candidate: f64,
    /// Percent reduction relative to the baseline; positive means the
    /// candidate retains more structure.
    pub reduction_pct: f64,
}

/// Probe two embedding sets on both structural targets and tabulate the
/// relative reductions.
pub fn probe_compare(
    baseline_emb: &Tensor,
    candidate_emb: &Tensor,
    g: &Graph,
    train_frac: f64,
    seed: u64,
) -> Result<Vec<ProbeComparisonRow>> {
    let mut rows = Vec::with_capacity(4);
    for target in [ProbeTarget::Degree, ProbeTarget::NeighborDegreeSum] {
        let values = probe_target_values(g, target);
        let base = fit_probe(baseline_emb, &values, target, train_frac, seed)?;
        let cand = fit_probe(candidate_emb, &values, target, train_frac, seed)?;
        let pct = |b: f64, c: f64| if b != 0.0 { (b - c) / b * 100.0 } else { 0.0 };
        rows.push(ProbeComparisonRow {
            target,
            metric: "mse".to_string(),
            baseline: base.mse,
            candidate: cand.mse,
            reduction_pct: pct(base.mse, cand.mse),
        });
        if let (Some(bm), Some(cm)) = (base.mape, cand.mape) {
            rows.push(ProbeComparisonRow {
                target,
                metric: "mape".to_string(),
                baseline: bm,
                candidate: cm,
                reduction_pct: pct(bm, cm),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn neighbor_degree_sum_small_graphs() {
        let path = Graph::build(&[(0, 1), (1, 2)], 3, true).unwrap();
        assert_eq!(neighbor_degree_sum(&path), vec![2.0, 2.0, 2.0]);
        let star = Graph::build(&[(0, 1), (0, 2), (0, 3), (0, 4), (0, 5)], 6, true).unwrap();
        let s = neighbor_degree_sum(&star);
        assert_eq!(s[0], 5.0);
        assert!(s[1..].iter().all(|&v| v == 5.0));
    }

    #[test]
    fn neighbor_degree_sum_matches_matrix_oracle() {
        let g = Graph::random(30, 0.2, 9).unwrap();
        let n = g.num_nodes();
        let mut dense = vec![vec![0.0f64; n]; n];
        for (u, v) in g.arcs() {
            dense[u][v] = 1.0;
        }
        let deg: Vec<f64> = g.degrees().iter().map(|&d| d as f64).collect();
        let want: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| dense[i][j] * deg[j]).sum())
            .collect();
        assert_eq!(neighbor_degree_sum(&g), want);
    }

    #[test]
    fn linearly_realizable_targets_fit_exactly() {
        let mut rng = seeded_rng(1);
        let n = 50;
        let emb = Tensor::from_vec(&[n, 4], (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let true_w = [0.5, -1.5, 2.0, 0.25];
        let targets: Vec<f64> = (0..n)
            .map(|i| emb.row(i).iter().zip(&true_w).map(|(x, w)| x * w).sum::<f64>() + 3.0)
            .collect();
        let report = fit_probe(&emb, &targets, ProbeTarget::Degree, 0.8, 0).unwrap();
        assert!(report.mse < 1e-6, "mse {}", report.mse);
    }

    #[test]
    fn zero_embeddings_predict_the_train_mean() {
        let n = 40;
        let emb = Tensor::zeros(&[n, 3]);
        let targets: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let report = fit_probe(&emb, &targets, ProbeTarget::Degree, 0.5, 7).unwrap();
        // with only the intercept active every prediction is the train mean
        let first_pred = report.predictions[0].2;
        assert!(report.predictions.iter().all(|&(_, _, p)| (p - first_pred).abs() < 1e-9));
        let heldout: Vec<f64> = report.predictions.iter().map(|&(_, t, _)| t).collect();
        let var_around: f64 = heldout
            .iter()
            .map(|t| (t - first_pred) * (t - first_pred))
            .sum::<f64>()
            / heldout.len() as f64;
        assert!((report.mse - var_around).abs() < 1e-9);
    }

    #[test]
    fn all_zero_targets_leave_mape_undefined() {
        let emb = Tensor::zeros(&[10, 2]);
        let targets = vec![0.0; 10];
        let report = fit_probe(&emb, &targets, ProbeTarget::Degree, 0.8, 0).unwrap();
        assert!(report.mape.is_none());
        assert_eq!(report.mse, 0.0);
    }

    #[test]
    fn ridge_solution_satisfies_normal_equations() {
        let mut rng = seeded_rng(5);
        let n = 60;
        let emb = Tensor::from_vec(&[n, 5], (0..n * 5).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap();
        let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
        let report = fit_probe(&emb, &targets, ProbeTarget::Degree, 0.8, 3).unwrap();

        // rebuild the train design and check ‖(XᵀX+λI)w − Xᵀy‖∞ scaled
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeded_rng(3));
        let n_train = (0.8 * n as f64).round() as usize;
        let train = &order[..n_train];
        let d = 6;
        let x = DMatrix::from_fn(train.len(), d, |i, j| {
            if j + 1 == d {
                1.0
            } else {
                emb.row(train[i])[j]
            }
        });
        let y = DVector::from_fn(train.len(), |i, _| targets[train[i]]);
        let w = DVector::from_vec(report.weights.clone());
        let lhs = (x.transpose() * &x + DMatrix::identity(d, d) * RIDGE_LAMBDA) * w;
        let rhs = x.transpose() * y;
        let scale = rhs.amax().max(1.0);
        let resid = (lhs - rhs).amax() / scale;
        assert!(resid < 1e-8, "residual {resid}");
    }

    #[test]
    fn probe_is_deterministic_and_column_permutation_invariant() {
        let mut rng = seeded_rng(8);
        let n = 40;
        let emb = Tensor::from_vec(&[n, 3], (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
        let a = fit_probe(&emb, &targets, ProbeTarget::Degree, 0.7, 11).unwrap();
        let b = fit_probe(&emb, &targets, ProbeTarget::Degree, 0.7, 11).unwrap();
        assert_eq!(a.mse.to_bits(), b.mse.to_bits());

        // permute embedding columns: MSE must not move
        let perm = [2usize, 0, 1];
        let mut data = Vec::with_capacity(n * 3);
        for i in 0..n {
            for &j in &perm {
                data.push(emb.row(i)[j]);
            }
        }
        let emb_p = Tensor::from_vec(&[n, 3], data).unwrap();
        let c = fit_probe(&emb_p, &targets, ProbeTarget::Degree, 0.7, 11).unwrap();
        assert!((a.mse - c.mse).abs() < 1e-9);
    }

    #[test]
    fn identical_embeddings_compare_at_zero_reduction() {
        let mut rng = seeded_rng(2);
        let g = Graph::random(25, 0.3, 2).unwrap();
        let emb = Tensor::from_vec(
            &[25, 4],
            (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let rows = probe_compare(&emb, &emb, &g, 0.8, 1).unwrap();
        assert_eq!(rows.len(), 4); // 2 targets × 2 metrics
        for row in rows {
            assert_eq!(row.reduction_pct, 0.0);
        }
    }
}
