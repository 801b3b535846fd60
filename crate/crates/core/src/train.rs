//! Experiment driver: warm-up, early stopping, seed control, aggregation.
//!
//! Every task follows the same protocol. An optional warm phase optimizes
//! the task loss alone at a small learning rate for a fixed number of
//! epochs; the main phase then optimizes the combined objective and stops
//! once the validation criterion has not strictly improved for `patience`
//! epochs. The reported test metric always belongs to the epoch with the
//! best validation criterion, whose parameters are also what the checkpoint
//! stores. Identical config and seed reproduce metrics bit for bit.

use crate::dataset::{
    make_edge_split, stratified_split, EdgeSplit, GraphDataset, NodeDataset, Split,
};
use crate::error::{Error, Result};
use crate::graph::{build_structure_targets, histogram_len, Graph, StructureTargets};
use crate::losses::{
    combined_loss, edge_bce, loss_first_order, loss_second_order_graph, loss_second_order_node,
    task_ce_node, LossWeights,
};
use crate::models::{
    build_batch, classifier_logits, degree_concat, dropout_features, readout_mean, Checkpoint,
    DropoutMasks,
    Encoder, EncoderConfig, Features, GraphOps,
};
use crate::optim::{seeded_rng, AdamConfig, ParamStore};
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Node,
    Graph,
    Edge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    pub no_residual: bool,
    pub no_first: bool,
    pub no_second: bool,
    pub degree_concat: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    /// Dataset label used in reports.
    pub dataset: String,
    pub encoder: EncoderConfig,
    pub lr: f64,
    pub warm_lr: f64,
    pub warm_epochs: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub weights: LossWeights,
    pub gpl_enabled: bool,
    pub ablations: Ablations,
    pub k_cap: usize,
    pub epsilon: f64,
    /// Restrict the structure losses to training nodes (ablation; they are
    /// label-free, so the default covers every node).
    pub gpl_on_train_mask_only: bool,
    /// Warm phase optimizes the task loss alone (default); clearing this
    /// trains the full combined objective at the warm rate instead.
    pub warm_task_only: bool,
    pub weight_decay: f64,
    /// Seeds trained in parallel.
    pub jobs: usize,
}

impl TrainConfig {
    pub fn node(dataset: &str) -> TrainConfig {
        TrainConfig {
            task: Task::Node,
            dataset: dataset.to_string(),
            encoder: EncoderConfig::gcn(),
            lr: 0.003,
            warm_lr: 0.00025,
            warm_epochs: 200,
            patience: 50,
            max_epochs: 2000,
            batch_size: 32,
            seeds: vec![0, 1, 2, 3, 4],
            weights: LossWeights::default(),
            gpl_enabled: true,
            ablations: Ablations::default(),
            k_cap: 32,
            epsilon: 1.0,
            gpl_on_train_mask_only: false,
            warm_task_only: true,
            weight_decay: 5e-4,
            jobs: 1,
        }
    }

    pub fn graph(dataset: &str) -> TrainConfig {
        TrainConfig {
            task: Task::Graph,
            encoder: EncoderConfig::gin(),
            warm_epochs: 0,
            ..TrainConfig::node(dataset)
        }
    }

    pub fn edge(dataset: &str) -> TrainConfig {
        let mut cfg = TrainConfig {
            task: Task::Edge,
            warm_epochs: 0,
            ..TrainConfig::node(dataset)
        };
        cfg.encoder.dropout = 0.0;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.weights.validate()?;
        if self.lr <= 0.0 || self.warm_lr <= 0.0 {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::config("epsilon must be positive"));
        }
        if self.k_cap == 0 {
            return Err(Error::config("k_cap must be at least 1"));
        }
        if self.jobs == 0 {
            return Err(Error::config("jobs must be at least 1"));
        }
        Ok(())
    }

    /// Residual flag after ablations.
    fn residual(&self) -> bool {
        self.encoder.use_residual && !self.ablations.no_residual
    }

    /// Loss weights after ablations; structure parts vanish when GPL is off.
    fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.gpl_enabled || self.ablations.no_first {
            w.first = 0.0;
        }
        if !self.gpl_enabled || self.ablations.no_second {
            w.second = 0.0;
        }
        w
    }

    /// Human-readable model label for report tables.
    pub fn model_label(&self) -> String {
        let mut label = self.encoder.architecture.to_string();
        if self.ablations.degree_concat {
            label.push_str("+degree");
        }
        if self.gpl_enabled {
            label.push_str("+gpl");
            if self.ablations.no_residual {
                label.push_str("-res");
            }
            if self.ablations.no_first {
                label.push_str("-l1");
            }
            if self.ablations.no_second {
                label.push_str("-l2");
            }
        }
        label
    }
}

/// How per-seed node splits are produced.
#[derive(Debug, Clone)]
pub enum NodeSplitSpec {
    /// One split shared by every seed.
    Fixed(Split),
    /// The 20-per-class / 500 / 1000 fixed benchmark split.
    Planetoid,
    /// Stratified random split, resampled per seed.
    RandomPerSeed { fractions: (f64, f64, f64) },
}

#[derive(Debug, Clone)]
pub enum GraphSplitSpec {
    Fixed(Split),
    RandomPerSeed { fractions: (f64, f64, f64) },
}

#[derive(Debug, Clone)]
pub enum EdgeSplitSpec {
    Fixed(EdgeSplit),
    RandomPerSeed { val_frac: f64, test_frac: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warm,
    Main,
}

/// One row of the per-epoch trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub loss_task: f64,
    pub loss_first: Option<f64>,
    pub loss_second: Option<f64>,
    pub val_loss: f64,
    pub val_metric: f64,
    pub test_metric: f64,
}

impl EpochRecord {
    pub fn csv_header() -> &'static str {
        "epoch,phase,loss_task,loss_first,loss_second,val_loss,val_metric,test_metric"
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.12e}"));
        format!(
            "{},{},{:.12e},{},{},{:.12e},{:.12e},{:.12e}",
            self.epoch,
            match self.phase {
                Phase::Warm => "warm",
                Phase::Main => "main",
            },
            self.loss_task,
            opt(self.loss_first),
            opt(self.loss_second),
            self.val_loss,
            self.val_metric,
            self.test_metric
        )
    }
}

/// Per-seed outcome. Failed runs (non-finite loss) keep their place in the
/// report instead of being dropped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub failed: bool,
    pub test_metric: Option<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// First epoch of the main phase minus one; equals the warm epoch count.
    pub transition_epoch: usize,
    pub wall_secs: f64,
    pub final_loss_task: f64,
    pub final_loss_first: Option<f64>,
    pub final_loss_second: Option<f64>,
    /// Largest absolute gradient seen on any structure head during training;
    /// exactly zero when GPL is disabled.
    pub max_structure_head_grad: f64,
    #[serde(skip)]
    pub trajectory: Vec<EpochRecord>,
    #[serde(skip)]
    pub checkpoint: Option<Checkpoint>,
}

/// Aggregated multi-seed result; the JSON artifact of one experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub task: Task,
    pub dataset: String,
    pub model: String,
    pub gpl: bool,
    pub metric_name: String,
    pub mean: f64,
    pub std: f64,
    pub seed_results: Vec<SeedResult>,
    pub config: TrainConfig,
}

impl RunReport {
    fn from_seeds(cfg: &TrainConfig, metric_name: &str, seeds: Vec<SeedResult>) -> RunReport {
        let metrics: Vec<f64> = seeds.iter().filter_map(|s| s.test_metric).collect();
        let (mean, std) = mean_std(&metrics);
        RunReport {
            task: cfg.task,
            dataset: cfg.dataset.clone(),
            model: cfg.model_label(),
            gpl: cfg.gpl_enabled,
            metric_name: metric_name.to_string(),
            mean,
            std,
            seed_results: seeds,
            config: cfg.clone(),
        }
    }
}

/// Sample mean and n-1 standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Fraction of masked rows whose argmax logit equals the label.
pub fn evaluate_accuracy(logits: &Tensor, labels: &[usize], mask: &[usize]) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    for &r in mask {
        let row = logits.row(r);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == labels[r] {
            correct += 1;
        }
    }
    correct as f64 / mask.len() as f64
}

/// Rank-based AUC with half credit for ties.
pub fn evaluate_auc(pos: &[f64], neg: &[f64]) -> f64 {
    if pos.is_empty() || neg.is_empty() {
        return 0.5;
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).collect();
    all.extend(neg.iter().map(|&s| (s, false)));
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // average ranks over tied groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for item in &all[i..=j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = pos.len() as f64;
    let n = neg.len() as f64;
    (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n)
}

fn pair_rows(pairs: &[(usize, usize)]) -> (Arc<Vec<usize>>, Arc<Vec<usize>>) {
    let u: Vec<usize> = pairs.iter().map(|&(a, _)| a).collect();
    let v: Vec<usize> = pairs.iter().map(|&(_, b)| b).collect();
    (Arc::new(u), Arc::new(v))
}

/// Dot-product scores straight from an embedding matrix.
pub fn pair_scores(emb: &Tensor, pairs: &[(usize, usize)]) -> Vec<f64> {
    pairs
        .iter()
        .map(|&(u, v)| emb.row(u).iter().zip(emb.row(v)).map(|(a, b)| a * b).sum())
        .collect()
}

/// Strict-improvement early stopping over a validation criterion.
struct EarlyStopper {
    best: f64,
    higher_is_better: bool,
    patience: usize,
    stale: usize,
}

impl EarlyStopper {
    fn new(higher_is_better: bool, patience: usize) -> Self {
        EarlyStopper {
            best: if higher_is_better {
                f64::NEG_INFINITY
            } else {
                f64::INFINITY
            },
            higher_is_better,
            patience,
            stale: 0,
        }
    }

    /// Returns true when `value` strictly improves on the best so far.
    fn observe(&mut self, value: f64, counts_against_patience: bool) -> bool {
        let improved = if self.higher_is_better {
            value > self.best
        } else {
            value < self.best
        };
        if improved {
            self.best = value;
            self.stale = 0;
        } else if counts_against_patience {
            self.stale += 1;
        }
        improved
    }

    fn exhausted(&self) -> bool {
        self.stale >= self.patience
    }
}

fn run_seeds<F>(cfg: &TrainConfig, run_one: F) -> Result<Vec<SeedResult>>
where
    F: Fn(u64) -> Result<SeedResult> + Sync,
{
    if cfg.jobs <= 1 || cfg.seeds.len() <= 1 {
        return cfg.seeds.iter().map(|&s| run_one(s)).collect();
    }
    let mut slots: Vec<Option<Result<SeedResult>>> = Vec::new();
    slots.resize_with(cfg.seeds.len(), || None);
    let slots = std::sync::Mutex::new(slots);
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..cfg.jobs.min(cfg.seeds.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= cfg.seeds.len() {
                    break;
                }
                let out = run_one(cfg.seeds[i]);
                slots.lock().unwrap()[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|s| s.expect("every slot filled"))
        .collect()
}

fn structure_head_grad_max(store: &ParamStore) -> f64 {
    ["head.first_order", "head.second_order", "head.second_order_graph"]
        .iter()
        .filter_map(|n| store.grad(n))
        .flat_map(|t| t.data().iter().copied())
        .fold(0.0f64, |acc, g| acc.max(g.abs()))
}

/// Node classification with the combined objective of task CE plus the two
/// structure losses.
pub fn train_node(
    cfg: &TrainConfig,
    ds: &NodeDataset,
    split_spec: &NodeSplitSpec,
) -> Result<RunReport> {
    cfg.validate()?;
    let raw_features = if cfg.ablations.degree_concat {
        degree_concat(&ds.features, &ds.graph)?
    } else {
        ds.features.clone()
    };
    let mut enc_cfg = cfg.encoder;
    enc_cfg.use_residual = cfg.residual();
    enc_cfg.concat_degree_feature = cfg.ablations.degree_concat;
    let encoder = Encoder::new(enc_cfg, raw_features.cols())?;
    let features = Features::from_tensor(raw_features);
    let ops = GraphOps::for_arch(enc_cfg.architecture, &ds.graph);
    let k = histogram_len(ds.graph.max_degree(), cfg.k_cap);
    let targets = build_structure_targets(&ds.graph, k, cfg.epsilon, false)?;
    let labels = Arc::new(ds.labels.clone());
    let weights = cfg.effective_weights();

    let seeds = run_seeds(cfg, |seed| {
        let split = match split_spec {
            NodeSplitSpec::Fixed(s) => s.clone(),
            NodeSplitSpec::Planetoid => crate::dataset::planetoid_split(ds)?,
            NodeSplitSpec::RandomPerSeed { fractions } => {
                stratified_split(&ds.labels, *fractions, seed)?
            }
        };
        run_single_node(
            cfg, &encoder, &ops, &features, &targets, &labels, ds.num_classes, k, &split, seed,
            &weights,
        )
    })?;
    Ok(RunReport::from_seeds(cfg, "accuracy", seeds))
}

#[allow(clippy::too_many_arguments)]
fn run_single_node(
    cfg: &TrainConfig,
    encoder: &Encoder,
    ops: &GraphOps,
    features: &Features,
    targets: &StructureTargets,
    labels: &Arc<Vec<usize>>,
    num_classes: usize,
    k: usize,
    split: &Split,
    seed: u64,
    weights: &LossWeights,
) -> Result<SeedResult> {
    let start = Instant::now();
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    encoder.register_params(&mut store, &mut rng)?;
    crate::models::register_heads(
        &mut store,
        &mut rng,
        encoder.cfg.embedding_dim(),
        num_classes,
        k,
        false,
    )?;

    let train_rows = Arc::new(split.train_indices());
    let val_rows = Arc::new(split.val_indices());
    let test_rows = split.test_indices();
    let gpl_mask = cfg.gpl_on_train_mask_only.then(|| Arc::clone(&train_rows));
    let use_first = weights.first > 0.0;
    let use_second = weights.second > 0.0;
    let mut dropout_rng = seeded_rng(seed ^ 0xd50f_0000_0000_0001);
    let num_rows = features.rows();

    let mut stopper = EarlyStopper::new(false, cfg.patience);
    let mut best_snapshot: Option<Vec<Tensor>> = None;
    let mut best_epoch = 0usize;
    let mut best_test = f64::NAN;
    let mut trajectory = Vec::new();
    let mut max_head_grad = 0.0f64;
    let mut failed = false;
    let mut last_losses = (f64::NAN, None, None);
    let mut epochs_run = 0usize;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let phase = if epoch <= cfg.warm_epochs {
            Phase::Warm
        } else {
            Phase::Main
        };
        let lr = match phase {
            Phase::Warm => cfg.warm_lr,
            Phase::Main => cfg.lr,
        };

        // training forward, with input and hidden dropout when configured
        let masks = DropoutMasks::draw(&mut dropout_rng, &encoder.cfg, num_rows);
        let x_train = if masks.is_some() {
            dropout_features(features, &mut dropout_rng, encoder.cfg.dropout)
        } else {
            features.clone()
        };
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let emb = encoder.forward(&mut tape, &staged, ops, &x_train, masks.as_ref())?;
        let logits_id = classifier_logits(&mut tape, &staged, emb)?;
        let task = task_ce_node(&mut tape, logits_id, labels, &train_rows)?;
        let first = if use_first {
            Some(loss_first_order(&mut tape, emb, &staged, targets, gpl_mask.as_ref())?)
        } else {
            None
        };
        let second = if use_second {
            Some(loss_second_order_node(&mut tape, emb, &staged, targets, gpl_mask.as_ref())?)
        } else {
            None
        };
        let loss = if phase == Phase::Warm && cfg.warm_task_only {
            task
        } else {
            combined_loss(&mut tape, task, first, second, weights)?
        };
        let loss_task_v = tape.value(task).item();
        let loss_first_v = first.map(|id| tape.value(id).item());
        let loss_second_v = second.map(|id| tape.value(id).item());
        last_losses = (loss_task_v, loss_first_v, loss_second_v);

        // metrics for this epoch's parameters need a dropout-free forward;
        // without dropout the training logits already are that forward
        let (val_loss, val_acc, test_acc) = if masks.is_some() {
            let mut eval = Tape::new();
            let staged_eval = store.stage(&mut eval);
            let emb_e = encoder.forward(&mut eval, &staged_eval, ops, features, None)?;
            let logits_e = classifier_logits(&mut eval, &staged_eval, emb_e)?;
            let l = task_ce_node(&mut eval, logits_e, labels, &val_rows)?;
            let logits = eval.value(logits_e);
            (
                eval.value(l).item(),
                evaluate_accuracy(logits, labels, &val_rows),
                evaluate_accuracy(logits, labels, &test_rows),
            )
        } else {
            let l = task_ce_node(&mut tape, logits_id, labels, &val_rows)?;
            let val_loss = tape.value(l).item();
            let logits = tape.value(logits_id);
            (
                val_loss,
                evaluate_accuracy(logits, labels, &val_rows),
                evaluate_accuracy(logits, labels, &test_rows),
            )
        };
        trajectory.push(EpochRecord {
            epoch,
            phase,
            loss_task: loss_task_v,
            loss_first: loss_first_v,
            loss_second: loss_second_v,
            val_loss,
            val_metric: val_acc,
            test_metric: test_acc,
        });
        if !tape.value(loss).item().is_finite() || !val_loss.is_finite() {
            failed = true;
            break;
        }

        // snapshot the evaluated parameters, then step
        if stopper.observe(val_loss, phase == Phase::Main) {
            best_snapshot = Some(store.snapshot());
            best_epoch = epoch;
            best_test = test_acc;
        }
        if phase == Phase::Main && stopper.exhausted() {
            break;
        }
        let mut grads = tape.backward(loss)?;
        store.accumulate(&staged, &mut grads);
        max_head_grad = max_head_grad.max(structure_head_grad_max(&store));
        store.adam_step(&AdamConfig::with_lr(lr, cfg.weight_decay));
    }

    if let Some(snap) = &best_snapshot {
        store.restore(snap);
    }
    let checkpoint = Checkpoint {
        encoder: encoder.cfg,
        in_dim: encoder.in_dim,
        num_classes,
        k,
        epsilon: cfg.epsilon,
        params: store.named_values(),
    };
    Ok(SeedResult {
        seed,
        failed,
        test_metric: (!failed && best_snapshot.is_some()).then_some(best_test),
        best_epoch,
        epochs_run,
        transition_epoch: cfg.warm_epochs,
        wall_secs: start.elapsed().as_secs_f64(),
        final_loss_task: last_losses.0,
        final_loss_first: last_losses.1,
        final_loss_second: last_losses.2,
        max_structure_head_grad: max_head_grad,
        trajectory,
        checkpoint: Some(checkpoint),
    })
}

/// Graph classification over block-diagonal mini-batches.
pub fn train_graph(
    cfg: &TrainConfig,
    ds: &GraphDataset,
    split_spec: &GraphSplitSpec,
) -> Result<RunReport> {
    cfg.validate()?;
    if cfg.ablations.degree_concat {
        return Err(Error::config("degree concat is a node-task ablation"));
    }
    let mut enc_cfg = cfg.encoder;
    enc_cfg.use_residual = cfg.residual();
    let encoder = Encoder::new(enc_cfg, ds.feature_dim())?;
    let k = histogram_len(ds.max_degree(), cfg.k_cap);
    let targets: Vec<StructureTargets> = ds
        .graphs
        .iter()
        .map(|g| build_structure_targets(g, k, cfg.epsilon, true))
        .collect::<Result<_>>()?;
    let weights = cfg.effective_weights();

    let seeds = run_seeds(cfg, |seed| {
        let split = match split_spec {
            GraphSplitSpec::Fixed(s) => s.clone(),
            GraphSplitSpec::RandomPerSeed { fractions } => {
                stratified_split(&ds.labels, *fractions, seed)?
            }
        };
        run_single_graph(cfg, &encoder, ds, &targets, k, &split, seed, &weights)
    })?;
    Ok(RunReport::from_seeds(cfg, "accuracy", seeds))
}

/// Stack per-graph structure targets for the graphs of one batch.
fn batch_structure_targets(
    targets: &[StructureTargets],
    members: &[usize],
    k: usize,
) -> (Tensor, Tensor, Tensor) {
    let mut deg = Vec::new();
    let mut hist = Vec::new();
    let mut graph_hist = Vec::with_capacity(members.len() * k);
    for &gi in members {
        let t = &targets[gi];
        deg.extend_from_slice(t.log_degree.data());
        hist.extend_from_slice(t.log_neighbor_hist.data());
        graph_hist.extend_from_slice(t.log_graph_hist.as_ref().expect("graph-level targets").data());
    }
    let n = deg.len();
    (
        Tensor::from_vec(&[n, 1], deg).expect("sized"),
        Tensor::from_vec(&[n, k], hist).expect("sized"),
        Tensor::from_vec(&[members.len(), k], graph_hist).expect("sized"),
    )
}

#[allow(clippy::too_many_arguments)]
fn run_single_graph(
    cfg: &TrainConfig,
    encoder: &Encoder,
    ds: &GraphDataset,
    targets: &[StructureTargets],
    k: usize,
    split: &Split,
    seed: u64,
    weights: &LossWeights,
) -> Result<SeedResult> {
    let start = Instant::now();
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    encoder.register_params(&mut store, &mut rng)?;
    crate::models::register_heads(
        &mut store,
        &mut rng,
        encoder.cfg.embedding_dim(),
        ds.num_classes,
        k,
        true,
    )?;

    let train_idx = split.train_indices();
    let val_idx = split.val_indices();
    let test_idx = split.test_indices();
    let use_first = weights.first > 0.0;
    let use_second = weights.second > 0.0;

    // forward pass over a fixed index set, returning accuracy
    let eval_accuracy = |store: &ParamStore, idx: &[usize]| -> Result<(f64, f64)> {
        let mut correct = 0usize;
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in idx.chunks(cfg.batch_size.max(1)) {
            let batch = build_batch(ds, chunk)?;
            let ops = GraphOps::for_arch(encoder.cfg.architecture, &batch.graph);
            let x = Features::from_tensor(batch.features.clone());
            let mut tape = Tape::new();
            let staged = store.stage(&mut tape);
            let emb = encoder.forward(&mut tape, &staged, &ops, &x, None)?;
            let hg = readout_mean(&mut tape, emb, &batch.segments, chunk.len())?;
            let logits_id = classifier_logits(&mut tape, &staged, hg)?;
            let rows: Vec<usize> = (0..chunk.len()).collect();
            let labels = Arc::new(batch.labels.clone());
            let l = task_ce_node(&mut tape, logits_id, &labels, &Arc::new(rows.clone()))?;
            loss_sum += tape.value(l).item();
            batches += 1;
            let logits = tape.value(logits_id);
            correct += (evaluate_accuracy(logits, &batch.labels, &rows) * chunk.len() as f64)
                .round() as usize;
        }
        Ok((
            correct as f64 / idx.len().max(1) as f64,
            loss_sum / batches.max(1) as f64,
        ))
    };

    let mut shuffle_rng = seeded_rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut dropout_rng = seeded_rng(seed ^ 0xd50f_0000_0000_0001);
    let mut stopper = EarlyStopper::new(true, cfg.patience);
    let mut best_snapshot: Option<Vec<Tensor>> = None;
    let mut best_epoch = 0usize;
    let mut best_test = f64::NAN;
    let mut trajectory = Vec::new();
    let mut max_head_grad = 0.0f64;
    let mut failed = false;
    let mut last_losses = (f64::NAN, None, None);
    let mut epochs_run = 0usize;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let phase = if epoch <= cfg.warm_epochs {
            Phase::Warm
        } else {
            Phase::Main
        };
        let lr = match phase {
            Phase::Warm => cfg.warm_lr,
            Phase::Main => cfg.lr,
        };
        let mut order = train_idx.clone();
        order.shuffle(&mut shuffle_rng);

        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = build_batch(ds, chunk)?;
            let ops = GraphOps::for_arch(encoder.cfg.architecture, &batch.graph);
            let x = Features::from_tensor(batch.features.clone());
            let (deg_t, hist_t, graph_hist_t) = batch_structure_targets(targets, chunk, k);
            let masks = DropoutMasks::draw(&mut dropout_rng, &encoder.cfg, batch.graph.num_nodes());
            let mut tape = Tape::new();
            let staged = store.stage(&mut tape);
            let emb = encoder.forward(&mut tape, &staged, &ops, &x, masks.as_ref())?;
            let hg = readout_mean(&mut tape, emb, &batch.segments, chunk.len())?;
            let logits = classifier_logits(&mut tape, &staged, hg)?;
            let rows: Vec<usize> = (0..chunk.len()).collect();
            let labels = Arc::new(batch.labels.clone());
            let task = task_ce_node(&mut tape, logits, &labels, &Arc::new(rows))?;
            let first = if use_first {
                let w1 = staged.get("head.first_order")?;
                let pred = tape.matmul(emb, w1)?;
                Some(tape.mse(pred, &deg_t)?)
            } else {
                None
            };
            let second = if use_second {
                Some(loss_second_order_graph(
                    &mut tape,
                    emb,
                    hg,
                    &staged,
                    &hist_t,
                    &graph_hist_t,
                )?)
            } else {
                None
            };
            let loss = if phase == Phase::Warm && cfg.warm_task_only {
                task
            } else {
                combined_loss(&mut tape, task, first, second, weights)?
            };
            if !tape.value(loss).item().is_finite() {
                failed = true;
                break;
            }
            sums.0 += tape.value(task).item();
            sums.1 += first.map_or(0.0, |id| tape.value(id).item());
            sums.2 += second.map_or(0.0, |id| tape.value(id).item());
            batches += 1;
            let mut grads = tape.backward(loss)?;
            store.accumulate(&staged, &mut grads);
            max_head_grad = max_head_grad.max(structure_head_grad_max(&store));
            store.adam_step(&AdamConfig::with_lr(lr, cfg.weight_decay));
        }
        if failed {
            break;
        }
        let b = batches.max(1) as f64;
        last_losses = (
            sums.0 / b,
            use_first.then_some(sums.1 / b),
            use_second.then_some(sums.2 / b),
        );

        let (val_acc, val_loss) = eval_accuracy(&store, &val_idx)?;
        let (test_acc, _) = eval_accuracy(&store, &test_idx)?;
        trajectory.push(EpochRecord {
            epoch,
            phase,
            loss_task: last_losses.0,
            loss_first: last_losses.1,
            loss_second: last_losses.2,
            val_loss,
            val_metric: val_acc,
            test_metric: test_acc,
        });

        if stopper.observe(val_acc, phase == Phase::Main) {
            best_snapshot = Some(store.snapshot());
            best_epoch = epoch;
            best_test = test_acc;
        }
        if phase == Phase::Main && stopper.exhausted() {
            break;
        }
    }

    if let Some(snap) = &best_snapshot {
        store.restore(snap);
    }
    let checkpoint = Checkpoint {
        encoder: encoder.cfg,
        in_dim: encoder.in_dim,
        num_classes: ds.num_classes,
        k,
        epsilon: cfg.epsilon,
        params: store.named_values(),
    };
    Ok(SeedResult {
        seed,
        failed,
        test_metric: (!failed && best_snapshot.is_some()).then_some(best_test),
        best_epoch,
        epochs_run,
        transition_epoch: cfg.warm_epochs,
        wall_secs: start.elapsed().as_secs_f64(),
        final_loss_task: last_losses.0,
        final_loss_first: last_losses.1,
        final_loss_second: last_losses.2,
        max_structure_head_grad: max_head_grad,
        trajectory,
        checkpoint: Some(checkpoint),
    })
}

/// Edge prediction: dot-product decoding of encoder embeddings, trained with
/// binary cross-entropy (plus the node-level structure losses when enabled).
/// The encoder propagates over training positives only; structure targets
/// come from that message graph.
pub fn train_edge(
    cfg: &TrainConfig,
    ds: &NodeDataset,
    split_spec: &EdgeSplitSpec,
) -> Result<RunReport> {
    cfg.validate()?;
    let weights = cfg.effective_weights();

    let seeds = run_seeds(cfg, |seed| {
        let esplit = match split_spec {
            EdgeSplitSpec::Fixed(s) => s.clone(),
            EdgeSplitSpec::RandomPerSeed { val_frac, test_frac } => {
                make_edge_split(&ds.graph, *val_frac, *test_frac, seed)?
            }
        };
        run_single_edge(cfg, ds, &esplit, seed, &weights)
    })?;
    Ok(RunReport::from_seeds(cfg, "auc", seeds))
}

fn run_single_edge(
    cfg: &TrainConfig,
    ds: &NodeDataset,
    esplit: &EdgeSplit,
    seed: u64,
    weights: &LossWeights,
) -> Result<SeedResult> {
    let start = Instant::now();
    let message_graph = Graph::build(&esplit.message_edges, ds.num_nodes(), true)?;
    let raw_features = if cfg.ablations.degree_concat {
        degree_concat(&ds.features, &message_graph)?
    } else {
        ds.features.clone()
    };
    let mut enc_cfg = cfg.encoder;
    enc_cfg.use_residual = cfg.residual();
    enc_cfg.concat_degree_feature = cfg.ablations.degree_concat;
    let encoder = Encoder::new(enc_cfg, raw_features.cols())?;
    let features = Features::from_tensor(raw_features);
    let ops = GraphOps::for_arch(enc_cfg.architecture, &message_graph);
    let k = histogram_len(message_graph.max_degree(), cfg.k_cap);
    let targets = build_structure_targets(&message_graph, k, cfg.epsilon, false)?;

    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    encoder.register_params(&mut store, &mut rng)?;
    // classifier head is unused by the edge objective but keeps the
    // parameter layout identical across tasks
    crate::models::register_heads(
        &mut store,
        &mut rng,
        encoder.cfg.embedding_dim(),
        2,
        k,
        false,
    )?;

    let (train_pos_u, train_pos_v) = pair_rows(&esplit.train_pos);
    let (train_neg_u, train_neg_v) = pair_rows(&esplit.train_neg);
    let use_first = weights.first > 0.0;
    let use_second = weights.second > 0.0;
    let mut dropout_rng = seeded_rng(seed ^ 0xd50f_0000_0000_0001);
    let num_rows = features.rows();

    let mut stopper = EarlyStopper::new(true, cfg.patience);
    let mut best_snapshot: Option<Vec<Tensor>> = None;
    let mut best_epoch = 0usize;
    let mut best_test = f64::NAN;
    let mut trajectory = Vec::new();
    let mut max_head_grad = 0.0f64;
    let mut failed = false;
    let mut last_losses = (f64::NAN, None, None);
    let mut epochs_run = 0usize;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let phase = if epoch <= cfg.warm_epochs {
            Phase::Warm
        } else {
            Phase::Main
        };
        let lr = match phase {
            Phase::Warm => cfg.warm_lr,
            Phase::Main => cfg.lr,
        };

        let masks = DropoutMasks::draw(&mut dropout_rng, &encoder.cfg, num_rows);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let emb = encoder.forward(&mut tape, &staged, &ops, &features, masks.as_ref())?;
        let pos_u = tape.row_gather(emb, &train_pos_u)?;
        let pos_v = tape.row_gather(emb, &train_pos_v)?;
        let pos_scores = tape.pairwise_dot(pos_u, pos_v)?;
        let neg_u = tape.row_gather(emb, &train_neg_u)?;
        let neg_v = tape.row_gather(emb, &train_neg_v)?;
        let neg_scores = tape.pairwise_dot(neg_u, neg_v)?;
        let task = edge_bce(&mut tape, pos_scores, neg_scores)?;
        let first = if use_first {
            Some(loss_first_order(&mut tape, emb, &staged, &targets, None)?)
        } else {
            None
        };
        let second = if use_second {
            Some(loss_second_order_node(&mut tape, emb, &staged, &targets, None)?)
        } else {
            None
        };
        let loss = if phase == Phase::Warm && cfg.warm_task_only {
            task
        } else {
            combined_loss(&mut tape, task, first, second, weights)?
        };
        let loss_task_v = tape.value(task).item();
        let loss_first_v = first.map(|id| tape.value(id).item());
        let loss_second_v = second.map(|id| tape.value(id).item());
        last_losses = (loss_task_v, loss_first_v, loss_second_v);
        if !tape.value(loss).item().is_finite() {
            failed = true;
            break;
        }

        // this epoch's metrics come from the same pre-step parameters, via a
        // dropout-free forward when dropout is active
        let eval_pair = if masks.is_some() {
            let mut eval = Tape::new();
            let staged_eval = store.stage(&mut eval);
            let emb_e = encoder.forward(&mut eval, &staged_eval, &ops, &features, None)?;
            Some((eval, emb_e))
        } else {
            None
        };
        let emb_t = match &eval_pair {
            Some((t, id)) => t.value(*id),
            None => tape.value(emb),
        };
        let val_pos_s = pair_scores(emb_t, &esplit.val_pos);
        let val_neg_s = pair_scores(emb_t, &esplit.val_neg);
        let test_pos_s = pair_scores(emb_t, &esplit.test_pos);
        let test_neg_s = pair_scores(emb_t, &esplit.test_neg);
        let val_auc = evaluate_auc(&val_pos_s, &val_neg_s);
        let test_auc = evaluate_auc(&test_pos_s, &test_neg_s);
        let val_loss = bce_value(&val_pos_s, &val_neg_s);
        trajectory.push(EpochRecord {
            epoch,
            phase,
            loss_task: loss_task_v,
            loss_first: loss_first_v,
            loss_second: loss_second_v,
            val_loss,
            val_metric: val_auc,
            test_metric: test_auc,
        });

        if stopper.observe(val_auc, phase == Phase::Main) {
            best_snapshot = Some(store.snapshot());
            best_epoch = epoch;
            best_test = test_auc;
        }
        if phase == Phase::Main && stopper.exhausted() {
            break;
        }
        let mut grads = tape.backward(loss)?;
        store.accumulate(&staged, &mut grads);
        max_head_grad = max_head_grad.max(structure_head_grad_max(&store));
        store.adam_step(&AdamConfig::with_lr(lr, cfg.weight_decay));
    }

    if let Some(snap) = &best_snapshot {
        store.restore(snap);
    }
    let checkpoint = Checkpoint {
        encoder: encoder.cfg,
        in_dim: encoder.in_dim,
        num_classes: 2,
        k,
        epsilon: cfg.epsilon,
        params: store.named_values(),
    };
    Ok(SeedResult {
        seed,
        failed,
        test_metric: (!failed && best_snapshot.is_some()).then_some(best_test),
        best_epoch,
        epochs_run,
        transition_epoch: cfg.warm_epochs,
        wall_secs: start.elapsed().as_secs_f64(),
        final_loss_task: last_losses.0,
        final_loss_first: last_losses.1,
        final_loss_second: last_losses.2,
        max_structure_head_grad: max_head_grad,
        trajectory,
        checkpoint: Some(checkpoint),
    })
}

fn bce_value(pos: &[f64], neg: &[f64]) -> f64 {
    let term = |x: f64, t: f64| x.max(0.0) - x * t + (1.0 + (-x.abs()).exp()).ln();
    let total: f64 = pos.iter().map(|&x| term(x, 1.0)).sum::<f64>()
        + neg.iter().map(|&x| term(x, 0.0)).sum::<f64>();
    let n = pos.len() + neg.len();
    if n == 0 {
        f64::NAN
    } else {
        total / n as f64
    }
}

/// One row of the deep-layer study.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub layers: usize,
    pub gpl: bool,
    pub report: RunReport,
}

/// Rerun node training at several depths, with and without GPL. Baseline
/// rows drop the residual projection along with the structure losses.
pub fn deep_layer_sweep(
    cfg: &TrainConfig,
    ds: &NodeDataset,
    split_spec: &NodeSplitSpec,
    layer_list: &[usize],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(layer_list.len() * 2);
    for &layers in layer_list {
        for gpl in [false, true] {
            let mut c = cfg.clone();
            c.encoder.num_layers = layers;
            c.gpl_enabled = gpl;
            c.encoder.use_residual = gpl && cfg.encoder.use_residual;
            let report = train_node(&c, ds, split_spec)?;
            rows.push(SweepRow {
                layers,
                gpl,
                report,
            });
        }
    }
    Ok(rows)
}
