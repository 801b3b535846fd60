//! Aggregation of run reports into summary tables, plus CSV/markdown export.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::{mean_std, RunReport};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub dataset: String,
    pub gpl: bool,
    pub metric_name: String,
    pub mean: f64,
    pub std: f64,
    pub n_runs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImprovementRow {
    pub model: String,
    pub dataset: String,
    /// Structure-loss mean minus baseline mean.
    pub delta: f64,
}

/// Per-dataset aggregate over the improvement rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetImprovement {
    pub dataset: String,
    pub avg_improvement: f64,
    pub max_improvement: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
    pub improvements: Vec<ImprovementRow>,
    pub dataset_improvements: Vec<DatasetImprovement>,
}

/// Collapse reports into per-(model, dataset, gpl) means and the
/// baseline-vs-structure-loss improvement rows.
pub fn summarize(reports: &[RunReport]) -> SummaryTable {
    // group by (model label, dataset, gpl); order-independent by sorting keys
    let mut keys: Vec<(String, String, bool)> = reports
        .iter()
        .map(|r| (r.model.clone(), r.dataset.clone(), r.gpl))
        .collect();
    keys.sort();
    keys.dedup();

    let mut rows = Vec::with_capacity(keys.len());
    for (model, dataset, gpl) in &keys {
        let metrics: Vec<f64> = reports
            .iter()
            .filter(|r| &r.model == model && &r.dataset == dataset && r.gpl == *gpl)
            .flat_map(|r| r.seed_results.iter().filter_map(|s| s.test_metric))
            .collect();
        let (mean, std) = mean_std(&metrics);
        let metric_name = reports
            .iter()
            .find(|r| &r.model == model && &r.dataset == dataset)
            .map(|r| r.metric_name.clone())
            .unwrap_or_default();
        rows.push(SummaryRow {
            model: model.clone(),
            dataset: dataset.clone(),
            gpl: *gpl,
            metric_name,
            mean,
            std,
            n_runs: metrics.len(),
        });
    }

    // improvement: the gpl variant of a base model minus its baseline,
    // matched per dataset on the encoder part of the label
    let mut improvements = Vec::new();
    for row in rows.iter().filter(|r| r.gpl) {
        let base_model = row.model.split('+').next().unwrap_or(&row.model).to_string();
        if let Some(base) = rows
            .iter()
            .find(|r| !r.gpl && r.dataset == row.dataset && r.model == base_model)
        {
            improvements.push(ImprovementRow {
                model: base_model,
                dataset: row.dataset.clone(),
                delta: row.mean - base.mean,
            });
        }
    }
    improvements.sort_by(|a, b| (&a.dataset, &a.model).cmp(&(&b.dataset, &b.model)));

    let mut datasets: Vec<String> = improvements.iter().map(|i| i.dataset.clone()).collect();
    datasets.sort();
    datasets.dedup();
    let dataset_improvements = datasets
        .into_iter()
        .map(|dataset| {
            let deltas: Vec<f64> = improvements
                .iter()
                .filter(|i| i.dataset == dataset)
                .map(|i| i.delta)
                .collect();
            let avg = deltas.iter().sum::<f64>() / deltas.len() as f64;
            let max = deltas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            DatasetImprovement {
                dataset,
                avg_improvement: avg,
                max_improvement: max,
            }
        })
        .collect();

    SummaryTable {
        rows,
        improvements,
        dataset_improvements,
    }
}

pub fn summary_markdown(table: &SummaryTable) -> String {
    let mut out = String::new();
    out.push_str("| model | dataset | gpl | metric | mean | std | runs |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for r in &table.rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {:.4} | {:.4} | {} |\n",
            r.model,
            r.dataset,
            if r.gpl { "on" } else { "off" },
            r.metric_name,
            r.mean,
            r.std,
            r.n_runs
        ));
    }
    if !table.improvements.is_empty() {
        out.push('\n');
        out.push_str("| improvement | dataset | delta |\n|---|---|---|\n");
        for i in &table.improvements {
            out.push_str(&format!("| {} | {} | {:+.4} |\n", i.model, i.dataset, i.delta));
        }
        for d in &table.dataset_improvements {
            out.push_str(&format!(
                "| avg. improvement | {} | {:+.4} |\n| max. improvement | {} | {:+.4} |\n",
                d.dataset, d.avg_improvement, d.dataset, d.max_improvement
            ));
        }
    }
    out
}

pub fn summary_csv(table: &SummaryTable) -> String {
    let mut out = String::from("model,dataset,gpl,metric,mean,std,n_runs\n");
    for r in &table.rows {
        out.push_str(&format!(
            "{},{},{},{},{:.12e},{:.12e},{}\n",
            r.model, r.dataset, r.gpl, r.metric_name, r.mean, r.std, r.n_runs
        ));
    }
    for i in &table.improvements {
        out.push_str(&format!("improvement:{},{},,,{:.12e},,\n", i.model, i.dataset, i.delta));
    }
    for d in &table.dataset_improvements {
        out.push_str(&format!(
            "avg_improvement,{},,,{:.12e},,\nmax_improvement,{},,,{:.12e},,\n",
            d.dataset, d.avg_improvement, d.dataset, d.max_improvement
        ));
    }
    out
}

/// Node embeddings as CSV: `node_id,label,e0..e{M-1}` with `%.12e` values.
pub fn export_embeddings(
    emb: &Tensor,
    node_ids: &[String],
    labels: &[usize],
) -> Result<String> {
    let n = emb.rows();
    if node_ids.len() != n || labels.len() != n {
        return Err(Error::shape(format!(
            "{n} embedding rows vs {} ids and {} labels",
            node_ids.len(),
            labels.len()
        )));
    }
    let m = emb.cols();
    let mut out = String::from("node_id,label");
    for j in 0..m {
        out.push_str(&format!(",e{j}"));
    }
    out.push('\n');
    for i in 0..n {
        out.push_str(&node_ids[i]);
        out.push_str(&format!(",{}", labels[i]));
        for v in emb.row(i) {
            out.push_str(&format!(",{v:.12e}"));
        }
        out.push('\n');
    }
    Ok(out)
}
