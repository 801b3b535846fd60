//! Encoder architectures and heads.
//!
//! Three encoders share one calling convention: register parameters into a
//! [`ParamStore`], then build the forward graph on a [`Tape`] from staged
//! parameters. The GCN propagates with the symmetric normalized adjacency
//! and can add a linear skip projection of the raw features to its last
//! layer; GraphSage-mean combines a self path with the neighbor mean; GIN
//! sums each node with its neighbors, applies a two-layer MLP per layer, and
//! uses the sum of all layer outputs as the node vector.

use crate::dataset::GraphDataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::optim::{glorot_uniform, ParamStore, StagedParams};
use crate::sparse::{mean_adjacency, normalized_adjacency, sum_adjacency_with_self, CsrMatrix};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

/// Feature matrices denser than this stay dense; sparser ones are stored as
/// CSR so the first-layer transforms scale with the nonzero count.
const SPARSE_DENSITY_CUTOFF: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Gcn,
    Sage,
    Gin,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Arch::Gcn => write!(f, "gcn"),
            Arch::Sage => write!(f, "sage"),
            Arch::Gin => write!(f, "gin"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub architecture: Arch,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub use_residual: bool,
    /// Append a log-degree column to the input features ("+Degree" ablation).
    pub concat_degree_feature: bool,
    /// Drop probability applied between layers during training.
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::gcn()
    }
}

impl EncoderConfig {
    pub fn gcn() -> Self {
        EncoderConfig {
            architecture: Arch::Gcn,
            num_layers: 2,
            hidden_dim: 64,
            output_dim: 64,
            use_residual: true,
            concat_degree_feature: false,
            dropout: 0.5,
        }
    }

    pub fn sage() -> Self {
        EncoderConfig {
            architecture: Arch::Sage,
            ..EncoderConfig::gcn()
        }
    }

    pub fn gin() -> Self {
        EncoderConfig {
            architecture: Arch::Gin,
            num_layers: 3,
            use_residual: false,
            dropout: 0.0,
            ..EncoderConfig::gcn()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::config("encoder needs at least one layer"));
        }
        if self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must be in [0, 1)"));
        }
        Ok(())
    }

    /// Width of the node embeddings the encoder produces.
    pub fn embedding_dim(&self) -> usize {
        match self.architecture {
            Arch::Gcn | Arch::Sage => self.output_dim,
            Arch::Gin => self.hidden_dim,
        }
    }
}

/// Node features, kept sparse when mostly zero.
#[derive(Debug, Clone)]
pub enum Features {
    Dense(Arc<Tensor>),
    Sparse(Arc<CsrMatrix>),
}

impl Features {
    pub fn from_tensor(t: Tensor) -> Features {
        let total = t.len().max(1);
        let nnz = t.data().iter().filter(|&&v| v != 0.0).count();
        if (nnz as f64) / (total as f64) < SPARSE_DENSITY_CUTOFF && t.cols() > 4 {
            Features::Sparse(Arc::new(CsrMatrix::from_dense(&t)))
        } else {
            Features::Dense(Arc::new(t))
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            Features::Dense(t) => t.rows(),
            Features::Sparse(m) => m.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            Features::Dense(t) => t.cols(),
            Features::Sparse(m) => m.cols(),
        }
    }

    /// `X @ W` on the tape.
    fn matmul(&self, tape: &mut Tape, w: ValueId) -> Result<ValueId> {
        match self {
            Features::Dense(t) => {
                let x = tape.leaf_arc(Arc::clone(t));
                tape.matmul(x, w)
            }
            Features::Sparse(m) => tape.spmm(m, w),
        }
    }

    /// Dense copy on the tape, for operators that need the raw rows.
    fn dense_leaf(&self, tape: &mut Tape) -> ValueId {
        match self {
            Features::Dense(t) => tape.leaf_arc(Arc::clone(t)),
            Features::Sparse(m) => tape.leaf(m.to_dense()),
        }
    }
}

/// Propagation operators an encoder needs, built once per graph.
#[derive(Debug, Clone)]
pub struct GraphOps {
    pub norm_adj: Option<Arc<CsrMatrix>>,
    pub mean_adj: Option<Arc<CsrMatrix>>,
    pub sum_adj: Option<Arc<CsrMatrix>>,
}

impl GraphOps {
    pub fn for_arch(arch: Arch, g: &Graph) -> GraphOps {
        GraphOps {
            norm_adj: (arch == Arch::Gcn).then(|| Arc::new(normalized_adjacency(g))),
            mean_adj: (arch == Arch::Sage).then(|| Arc::new(mean_adjacency(g))),
            sum_adj: (arch == Arch::Gin).then(|| Arc::new(sum_adjacency_with_self(g))),
        }
    }
}

/// Inverted-dropout copy of a feature matrix for one training epoch: same
/// layout, entries dropped with probability `p` and survivors scaled by
/// `1/(1-p)`.
pub fn dropout_features(x: &Features, rng: &mut ChaCha20Rng, p: f64) -> Features {
    use rand::Rng;
    if p <= 0.0 {
        return x.clone();
    }
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    let mut mask = |v: f64| if rng.gen::<f64>() < keep { v * scale } else { 0.0 };
    match x {
        Features::Dense(t) => {
            let data = t.data().iter().map(|&v| mask(v)).collect();
            Features::Dense(Arc::new(
                Tensor::from_vec(t.shape(), data).expect("same shape"),
            ))
        }
        Features::Sparse(m) => Features::Sparse(Arc::new(m.map_values(&mut mask))),
    }
}

/// Inverted-dropout masks for one training forward pass, one per non-final
/// layer: entries are `0` or `1/keep`.
#[derive(Debug, Clone)]
pub struct DropoutMasks(Vec<Arc<Vec<f64>>>);

impl DropoutMasks {
    /// Draw masks for an encoder over `rows` nodes; `None` when the encoder
    /// has no dropout or only one layer.
    pub fn draw(rng: &mut ChaCha20Rng, cfg: &EncoderConfig, rows: usize) -> Option<DropoutMasks> {
        use rand::Rng;
        if cfg.dropout <= 0.0 || cfg.num_layers < 2 {
            return None;
        }
        let keep = 1.0 - cfg.dropout;
        let scale = 1.0 / keep;
        let masks = (0..cfg.num_layers - 1)
            .map(|_| {
                Arc::new(
                    (0..rows * cfg.hidden_dim)
                        .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
                        .collect::<Vec<f64>>(),
                )
            })
            .collect();
        Some(DropoutMasks(masks))
    }

    fn layer(&self, l: usize) -> &Arc<Vec<f64>> {
        &self.0[l]
    }
}

/// One encoder bound to its input width.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub in_dim: usize,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, in_dim: usize) -> Result<Encoder> {
        cfg.validate()?;
        if in_dim == 0 {
            return Err(Error::config("encoder input dimension must be positive"));
        }
        Ok(Encoder { cfg, in_dim })
    }

    fn layer_dims(&self, layer: usize) -> (usize, usize) {
        let l = self.cfg.num_layers;
        let d_in = if layer == 0 { self.in_dim } else { self.cfg.hidden_dim };
        let d_out = match self.cfg.architecture {
            Arch::Gin => self.cfg.hidden_dim,
            _ if layer + 1 == l => self.cfg.output_dim,
            _ => self.cfg.hidden_dim,
        };
        (d_in, d_out)
    }

    /// Register encoder parameters: Glorot weights, zero biases. The residual
    /// projection is always a parameter; it only joins the forward pass when
    /// `use_residual` is set.
    pub fn register_params(&self, store: &mut ParamStore, rng: &mut ChaCha20Rng) -> Result<()> {
        for l in 0..self.cfg.num_layers {
            let (d_in, d_out) = self.layer_dims(l);
            match self.cfg.architecture {
                Arch::Gcn => {
                    store.register(&format!("enc.layer{l}.weight"), glorot_uniform(rng, d_in, d_out), true)?;
                    store.register(&format!("enc.layer{l}.bias"), Tensor::zeros(&[1, d_out]), false)?;
                }
                Arch::Sage => {
                    store.register(
                        &format!("enc.layer{l}.self_weight"),
                        glorot_uniform(rng, d_in, d_out),
                        true,
                    )?;
                    store.register(
                        &format!("enc.layer{l}.neigh_weight"),
                        glorot_uniform(rng, d_in, d_out),
                        true,
                    )?;
                    store.register(&format!("enc.layer{l}.bias"), Tensor::zeros(&[1, d_out]), false)?;
                }
                Arch::Gin => {
                    let h = self.cfg.hidden_dim;
                    store.register(
                        &format!("enc.layer{l}.mlp0.weight"),
                        glorot_uniform(rng, d_in, h),
                        true,
                    )?;
                    store.register(&format!("enc.layer{l}.mlp0.bias"), Tensor::zeros(&[1, h]), false)?;
                    store.register(
                        &format!("enc.layer{l}.mlp1.weight"),
                        glorot_uniform(rng, h, d_out),
                        true,
                    )?;
                    store.register(&format!("enc.layer{l}.mlp1.bias"), Tensor::zeros(&[1, d_out]), false)?;
                }
            }
        }
        if self.cfg.architecture != Arch::Gin {
            store.register(
                "enc.residual.weight",
                glorot_uniform(rng, self.in_dim, self.cfg.output_dim),
                true,
            )?;
        }
        Ok(())
    }

    /// Node embeddings on the tape. `masks` inject training-time dropout
    /// between layers; evaluation passes `None`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        staged: &StagedParams,
        ops: &GraphOps,
        x: &Features,
        masks: Option<&DropoutMasks>,
    ) -> Result<ValueId> {
        if x.cols() != self.in_dim {
            return Err(Error::shape(format!(
                "encoder expects {} input columns, got {}",
                self.in_dim,
                x.cols()
            )));
        }
        match self.cfg.architecture {
            Arch::Gcn => self.forward_gcn(tape, staged, ops, x, masks),
            Arch::Sage => self.forward_sage(tape, staged, ops, x, masks),
            Arch::Gin => self.forward_gin(tape, staged, ops, x, masks),
        }
    }

    fn forward_gcn(
        &self,
        tape: &mut Tape,
        staged: &StagedParams,
        ops: &GraphOps,
        x: &Features,
        masks: Option<&DropoutMasks>,
    ) -> Result<ValueId> {
        let op = ops
            .norm_adj
            .as_ref()
            .ok_or_else(|| Error::config("gcn needs the normalized adjacency operator"))?;
        let l_count = self.cfg.num_layers;
        let mut h: Option<ValueId> = None;
        for l in 0..l_count {
            let w = staged.get(&format!("enc.layer{l}.weight"))?;
            let b = staged.get(&format!("enc.layer{l}.bias"))?;
            let xw = match h {
                None => x.matmul(tape, w)?,
                Some(prev) => tape.matmul(prev, w)?,
            };
            let prop = tape.spmm(op, xw)?;
            let mut out = tape.add_bias(prop, b)?;
            if l + 1 < l_count {
                out = tape.relu(out);
                if let Some(m) = masks {
                    out = tape.mul_elem(out, m.layer(l))?;
                }
            }
            h = Some(out);
        }
        let mut out = h.expect("at least one layer");
        if self.cfg.use_residual {
            let wr = staged.get("enc.residual.weight")?;
            let skip = x.matmul(tape, wr)?;
            out = tape.add(out, skip)?;
        }
        Ok(out)
    }

    fn forward_sage(
        &self,
        tape: &mut Tape,
        staged: &StagedParams,
        ops: &GraphOps,
        x: &Features,
        masks: Option<&DropoutMasks>,
    ) -> Result<ValueId> {
        let op = ops
            .mean_adj
            .as_ref()
            .ok_or_else(|| Error::config("sage needs the neighbor-mean operator"))?;
        let l_count = self.cfg.num_layers;
        let mut h: Option<ValueId> = None;
        for l in 0..l_count {
            let w_self = staged.get(&format!("enc.layer{l}.self_weight"))?;
            let w_neigh = staged.get(&format!("enc.layer{l}.neigh_weight"))?;
            let b = staged.get(&format!("enc.layer{l}.bias"))?;
            // mean over neighbors commutes with the linear transform
            let (self_part, neigh_tr) = match h {
                None => (x.matmul(tape, w_self)?, x.matmul(tape, w_neigh)?),
                Some(prev) => (tape.matmul(prev, w_self)?, tape.matmul(prev, w_neigh)?),
            };
            let neigh_part = tape.spmm(op, neigh_tr)?;
            let sum = tape.add(self_part, neigh_part)?;
            let mut out = tape.add_bias(sum, b)?;
            if l + 1 < l_count {
                out = tape.relu(out);
                if let Some(m) = masks {
                    out = tape.mul_elem(out, m.layer(l))?;
                }
            }
            h = Some(out);
        }
        let mut out = h.expect("at least one layer");
        if self.cfg.use_residual {
            let wr = staged.get("enc.residual.weight")?;
            let skip = x.matmul(tape, wr)?;
            out = tape.add(out, skip)?;
        }
        Ok(out)
    }

    fn forward_gin(
        &self,
        tape: &mut Tape,
        staged: &StagedParams,
        ops: &GraphOps,
        x: &Features,
        masks: Option<&DropoutMasks>,
    ) -> Result<ValueId> {
        let op = ops
            .sum_adj
            .as_ref()
            .ok_or_else(|| Error::config("gin needs the neighbor-sum operator"))?;
        let mut h = x.dense_leaf(tape);
        let mut layer_sum: Option<ValueId> = None;
        for l in 0..self.cfg.num_layers {
            let agg = tape.spmm(op, h)?;
            let w0 = staged.get(&format!("enc.layer{l}.mlp0.weight"))?;
            let b0 = staged.get(&format!("enc.layer{l}.mlp0.bias"))?;
            let w1 = staged.get(&format!("enc.layer{l}.mlp1.weight"))?;
            let b1 = staged.get(&format!("enc.layer{l}.mlp1.bias"))?;
            let z = tape.matmul(agg, w0)?;
            let z = tape.add_bias(z, b0)?;
            let z = tape.relu(z);
            let z = tape.matmul(z, w1)?;
            h = tape.add_bias(z, b1)?;
            if l + 1 < self.cfg.num_layers {
                if let Some(m) = masks {
                    h = tape.mul_elem(h, m.layer(l))?;
                }
            }
            layer_sum = Some(match layer_sum {
                None => h,
                Some(acc) => tape.add(acc, h)?,
            });
        }
        Ok(layer_sum.expect("at least one layer"))
    }
}

/// Mean readout over segment ids: one row per graph.
pub fn readout_mean(
    tape: &mut Tape,
    node_emb: ValueId,
    segments: &Arc<Vec<usize>>,
    num_graphs: usize,
) -> Result<ValueId> {
    tape.segment_mean(node_emb, segments, num_graphs)
}

/// Append a `log2(degree + 1)` column to the feature matrix.
pub fn degree_concat(x: &Tensor, g: &Graph) -> Result<Tensor> {
    if x.rows() != g.num_nodes() {
        return Err(Error::shape(format!(
            "{} feature rows for {} nodes",
            x.rows(),
            g.num_nodes()
        )));
    }
    let (n, f) = (x.rows(), x.cols());
    let mut data = Vec::with_capacity(n * (f + 1));
    for i in 0..n {
        data.extend_from_slice(x.row(i));
        data.push((g.degree(i) as f64 + 1.0).log2());
    }
    Tensor::from_vec(&[n, f + 1], data)
}

/// Classification and structure heads over an embedding of width `emb_dim`.
/// Structure heads start at zero so their initial losses depend only on the
/// targets.
pub fn register_heads(
    store: &mut ParamStore,
    rng: &mut ChaCha20Rng,
    emb_dim: usize,
    num_classes: usize,
    k: usize,
    graph_level: bool,
) -> Result<()> {
    store.register("head.classifier.weight", glorot_uniform(rng, emb_dim, num_classes), false)?;
    store.register("head.classifier.bias", Tensor::zeros(&[1, num_classes]), false)?;
    store.register("head.first_order", Tensor::zeros(&[emb_dim, 1]), false)?;
    store.register("head.second_order", Tensor::zeros(&[emb_dim, k]), false)?;
    if graph_level {
        store.register("head.second_order_graph", Tensor::zeros(&[emb_dim, k]), false)?;
    }
    Ok(())
}

pub fn classifier_logits(tape: &mut Tape, staged: &StagedParams, emb: ValueId) -> Result<ValueId> {
    let w = staged.get("head.classifier.weight")?;
    let b = staged.get("head.classifier.bias")?;
    let logits = tape.matmul(emb, w)?;
    tape.add_bias(logits, b)
}

/// Block-diagonal batch over a subset of a graph dataset.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub graph: Graph,
    pub features: Tensor,
    pub segments: Arc<Vec<usize>>,
    pub labels: Vec<usize>,
    /// Dataset index of each batched graph.
    pub members: Vec<usize>,
}

pub fn build_batch(ds: &GraphDataset, indices: &[usize]) -> Result<GraphBatch> {
    if indices.is_empty() {
        return Err(Error::config("empty graph batch"));
    }
    let dim = ds.feature_dim();
    let mut edges = Vec::new();
    let mut segments = Vec::new();
    let mut labels = Vec::with_capacity(indices.len());
    let mut feat_data = Vec::new();
    let mut offset = 0usize;
    for (slot, &gi) in indices.iter().enumerate() {
        let g = &ds.graphs[gi];
        for (u, v) in g.undirected_edges() {
            edges.push((u + offset, v + offset));
        }
        segments.extend(std::iter::repeat(slot).take(g.num_nodes()));
        feat_data.extend_from_slice(ds.features[gi].data());
        labels.push(ds.labels[gi]);
        offset += g.num_nodes();
    }
    let graph = Graph::build(&edges, offset, true)?;
    let features = Tensor::from_vec(&[offset, dim], feat_data)?;
    Ok(GraphBatch {
        graph,
        features,
        segments: Arc::new(segments),
        labels,
        members: indices.to_vec(),
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"GPLCKPT1";

/// Trained model: encoder layout plus named tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub in_dim: usize,
    pub num_classes: usize,
    pub k: usize,
    pub epsilon: f64,
    pub params: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointSidecar {
    format: u32,
    encoder: EncoderConfig,
    in_dim: usize,
    num_classes: usize,
    k: usize,
    epsilon: f64,
}

/// Write the binary tensor file plus a `<path>.json` sidecar describing the
/// encoder. Tensor payload: name, dims, then raw little-endian `f64`s.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&(ckpt.params.len() as u32).to_le_bytes())?;
    for (name, tensor) in &ckpt.params {
        let bytes = name.as_bytes();
        f.write_all(&(bytes.len() as u32).to_le_bytes())?;
        f.write_all(bytes)?;
        f.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            f.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    let sidecar = CheckpointSidecar {
        format: 1,
        encoder: ckpt.encoder,
        in_dim: ckpt.in_dim,
        num_classes: ckpt.num_classes,
        k: ckpt.k,
        epsilon: ckpt.epsilon,
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let sidecar: CheckpointSidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    if sidecar.format != 1 {
        return Err(Error::config(format!(
            "unsupported checkpoint format {}",
            sidecar.format
        )));
    }
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::config(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let count = read_u32(&mut f)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut f)? as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::config("checkpoint tensor name is not UTF-8"))?;
        let ndim = read_u32(&mut f)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            f.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut b = [0u8; 8];
        for _ in 0..len {
            f.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        params.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(Checkpoint {
        encoder: sidecar.encoder,
        in_dim: sidecar.in_dim,
        num_classes: sidecar.num_classes,
        k: sidecar.k,
        epsilon: sidecar.epsilon,
        params,
    })
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    std::path::PathBuf::from(os)
}

fn read_u32(f: &mut fs::File) -> Result<u32> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Rebuild a checkpointed encoder and run it over a graph's features.
pub fn compute_embeddings(ckpt: &Checkpoint, g: &Graph, raw_features: &Tensor) -> Result<Tensor> {
    let feats = if ckpt.encoder.concat_degree_feature {
        degree_concat(raw_features, g)?
    } else {
        raw_features.clone()
    };
    if feats.cols() != ckpt.in_dim {
        return Err(Error::shape(format!(
            "checkpoint expects {} input columns, dataset has {}",
            ckpt.in_dim,
            feats.cols()
        )));
    }
    let mut store = ParamStore::new();
    for (name, tensor) in &ckpt.params {
        store.register(name, tensor.clone(), false)?;
    }
    let encoder = Encoder::new(ckpt.encoder, ckpt.in_dim)?;
    let ops = GraphOps::for_arch(ckpt.encoder.architecture, g);
    let x = Features::from_tensor(feats);
    let mut tape = Tape::new();
    let staged = store.stage(&mut tape);
    let emb = encoder.forward(&mut tape, &staged, &ops, &x, None)?;
    Ok(tape.value(emb).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::seeded_rng;

    fn forward_once(encoder: &Encoder, store: &ParamStore, g: &Graph, x: Tensor) -> Tensor {
        let ops = GraphOps::for_arch(encoder.cfg.architecture, g);
        let feats = Features::from_tensor(x);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let emb = encoder.forward(&mut tape, &staged, &ops, &feats, None).unwrap();
        tape.value(emb).clone()
    }

    fn random_features(n: usize, f: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = seeded_rng(seed);
        Tensor::from_vec(&[n, f], (0..n * f).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn gcn_isolated_node_is_linear() {
        let g = Graph::build(&[], 1, true).unwrap();
        let cfg = EncoderConfig {
            num_layers: 1,
            hidden_dim: 3,
            output_dim: 3,
            use_residual: false,
            ..EncoderConfig::gcn()
        };
        let encoder = Encoder::new(cfg, 2).unwrap();
        let mut store = ParamStore::new();
        encoder.register_params(&mut store, &mut seeded_rng(0)).unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![1.5, -2.0]).unwrap();
        let out = forward_once(&encoder, &store, &g, x.clone());
        // operator is [[1.0]] and the final layer has no activation: out = x W
        let w = store.get("enc.layer0.weight").unwrap();
        let want = crate::tensor::matmul(&x, w);
        assert_eq!(out.data(), want.data());
    }

    #[test]
    fn gcn_zero_input_zero_output() {
        let g = Graph::random(6, 0.5, 1).unwrap();
        let encoder = Encoder::new(
            EncoderConfig {
                hidden_dim: 4,
                output_dim: 4,
                ..EncoderConfig::gcn()
            },
            3,
        )
        .unwrap();
        let mut store = ParamStore::new();
        encoder.register_params(&mut store, &mut seeded_rng(3)).unwrap();
        let out = forward_once(&encoder, &store, &g, Tensor::zeros(&[6, 3]));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gcn_first_layer_matches_dense_oracle() {
        let g = Graph::random(20, 0.25, 5).unwrap();
        let cfg = EncoderConfig {
            num_layers: 1,
            hidden_dim: 4,
            output_dim: 4,
            use_residual: false,
            ..EncoderConfig::gcn()
        };
        let encoder = Encoder::new(cfg, 6).unwrap();
        let mut store = ParamStore::new();
        encoder.register_params(&mut store, &mut seeded_rng(9)).unwrap();
        let x = random_features(20, 6, 2);
        let out = forward_once(&encoder, &store, &g, x.clone());

        let dense_op = normalized_adjacency(&g).to_dense();
        let xw = crate::tensor::matmul(&x, store.get("enc.layer0.weight").unwrap());
        let want = crate::tensor::matmul(&dense_op, &xw);
        for (a, b) in out.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn gcn_two_layer_closed_form() {
        let g = Graph::random(15, 0.3, 4).unwrap();
        let cfg = EncoderConfig {
            use_residual: false,
            hidden_dim: 5,
            output_dim: 3,
            ..EncoderConfig::gcn()
        };
        let encoder = Encoder::new(cfg, 4).unwrap();
        let mut store = ParamStore::new();
        encoder.register_params(&mut store, &mut seeded_rng(1)).unwrap();
        let x = random_features(15, 4, 8);
        let out = forward_once(&encoder, &store, &g, x.clone());

        // σ(Â σ(Â X W0) W1) with zero biases
        let a = normalized_adjacency(&g).to_dense();
        let h1 =
            crate::tensor::matmul(&a, &crate::tensor::matmul(&x, store.get("enc.layer0.weight").unwrap()));
        let h1 = Tensor::from_vec(h1.shape(), h1.data().iter().map(|&v| v.max(0.0)).collect()).unwrap();
        let want =
            crate::tensor::matmul(&a, &crate::tensor::matmul(&h1, store.get("enc.layer1.weight").unwrap()));
        for (got, w) in out.data().iter().zip(want.data()) {
            assert!((got - w).abs() < 1e-10);
        }
    }

    #[test]
    fn sage_single_edge_neighbor_mean() {
        let g = Graph::build(&[(0, 1)], 2, true).unwrap();
        let cfg = EncoderConfig {
            num_layers: 1,
            hidden_dim: 2,
            output_dim: 2,
            use_residual: false,
            ..EncoderConfig::sage()
        };
        let encoder = Encoder::new(cfg, 2).unwrap();
        let mut store = ParamStore::new();
        encoder.register_params(&mut store, &mut seeded_rng(2)).unwrap();
        // zero self path, identity neighbor path: out row = neighbor mean
        store.set("enc.layer0.self_weight", Tensor::zeros(&[2, 2])).unwrap();
        store
            .set(
                "enc.layer0.neigh_weight",
                Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            )
            .unwrap();
        let x = Tensor::from_vec(&[2, 2], vec![3.0, -1.0, 0.5, 2.0]).unwrap();
        let out = forward_once(&encoder, &store, &g, x);
        assert_eq!(out.row(0), &[0.5, 2.0]);
        assert_eq!(out.row(1), &[3.0, -1.0]);
    }

    #[test]
    fn sage_isolated_node_uses_self_path_only() {
        let g = Graph::build(&[(0, 1)], 3, true).unwrap(); // node 2 isolated
        let cfg = EncoderConfig {
            num_layers: 1,
            hidden_dim: 2,
            output_dim: 2,
            use_residual: false,
            ..EncoderConfig::sage()
        };
        let encoder = Encoder::new(cfg, 2).unwrap();
        let mut store = ParamStore::new();
        encoder.register_params(&mut store, &mut seeded_rng(4)).unwrap();
        let x = Tensor::from_vec(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, -3.0]).unwrap();
        let out = forward_once(&encoder, &store, &g, x.clone());
        let want = crate::tensor::matmul(&x, store.get("enc.layer0.self_weight").unwrap());
        assert_eq!(out.row(2), want.row(2));
    }

    #[test]
    fn sage_matches_dense_oracle() {
        let g = Graph::random(18, 0.3, 6).unwrap();
        let cfg = EncoderConfig {
            num_layers: 2,
            hidden_dim: 4,
            output_dim: 3,
            use_residual: false,
            ..EncoderConfig::sage()
        };
        let encoder = Encoder::new(cfg, 5).unwrap();
        let mut store = ParamStore::new();
        encoder.register_params(&mut store, &mut seeded_rng(7)).unwrap();
        let x = random_features(18, 5, 3);
        let out = forward_once(&encoder, &store, &g, x.clone());

        let mean_op = mean_adjacency(&g).to_dense();
        let layer = |h: &Tensor, l: usize, last: bool| {
            let ws = store.get(&format!("enc.layer{l}.self_weight")).unwrap();
            let wn = store.get(&format!("enc.layer{l}.neigh_weight")).unwrap();
            let own = crate::tensor::matmul(h, ws);
            let agg = crate::tensor::matmul(&crate::tensor::matmul(&mean_op, h), wn);
            let mut sum: Vec<f64> = own.data().iter().zip(agg.data()).map(|(a, b)| a + b).collect();
            if !last {
                for v in &mut sum {
                    *v = v.max(0.0);
                }
            }
            Tensor::from_vec(own.shape(), sum).unwrap()
        };
        let want = layer(&layer(&x, 0, false), 1, true);
        for (a, b) in out.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn gin_single_node_is_mlp_of_input() {
        let g = Graph::build(&[], 1, true).unwrap();
        let cfg = EncoderConfig {
            num_layers: 1,
            hidden_dim: 3,
            ..EncoderConfig::gin()
        };
        let encoder = Encoder::new(cfg, 2).unwrap();
        let mut store = ParamStore::new();
        encoder.register_params(&mut store, &mut seeded_rng(5)).unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![0.5, -1.5]).unwrap();
        let out = forward_once(&encoder, &store, &g, x.clone());
        let z = crate::tensor::matmul(&x, store.get("enc.layer0.mlp0.weight").unwrap());
        let z = Tensor::from_vec(z.shape(), z.data().iter().map(|&v| v.max(0.0)).collect()).unwrap();
        let want = crate::tensor::matmul(&z, store.get("enc.layer0.mlp1.weight").unwrap());
        assert_eq!(out.data(), want.data());
    }

    #[test]
    fn gin_identical_triangles_share_readout() {
        let tri = Graph::build(&[(0, 1), (1, 2), (0, 2)], 3, true).unwrap();
        let feats = Tensor::from_vec(&[3, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let ds = GraphDataset::new(vec![tri.clone(), tri], vec![feats.clone(), feats], vec![0, 1], 2)
            .unwrap();
        let batch = build_batch(&ds, &[0, 1]).unwrap();
        let encoder = Encoder::new(
            EncoderConfig {
                hidden_dim: 4,
                ..EncoderConfig::gin()
            },
            2,
        )
        .unwrap();
        let mut store = ParamStore::new();
        encoder.register_params(&mut store, &mut seeded_rng(6)).unwrap();
        let ops = GraphOps::for_arch(Arch::Gin, &batch.graph);
        let x = Features::from_tensor(batch.features.clone());
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let emb = encoder.forward(&mut tape, &staged, &ops, &x, None).unwrap();
        let hg = readout_mean(&mut tape, emb, &batch.segments, 2).unwrap();
        let hg = tape.value(hg);
        assert_eq!(hg.row(0), hg.row(1));
    }

    #[test]
    fn gin_batching_matches_per_graph_forward() {
        let graphs = vec![
            Graph::build(&[(0, 1), (1, 2), (0, 2)], 3, true).unwrap(),
            Graph::build(&[(0, 1)], 2, true).unwrap(),
            Graph::build(&[(0, 1), (1, 2), (2, 3)], 4, true).unwrap(),
        ];
        let features: Vec<Tensor> = graphs
            .iter()
            .enumerate()
            .map(|(i, g)| random_features(g.num_nodes(), 3, i as u64))
            .collect();
        let ds = GraphDataset::new(graphs, features, vec![0, 1, 0], 2).unwrap();
        let encoder = Encoder::new(
            EncoderConfig {
                hidden_dim: 4,
                num_layers: 2,
                ..EncoderConfig::gin()
            },
            3,
        )
        .unwrap();
        let mut store = ParamStore::new();
        encoder.register_params(&mut store, &mut seeded_rng(8)).unwrap();

        let batch = build_batch(&ds, &[0, 1, 2]).unwrap();
        let ops = GraphOps::for_arch(Arch::Gin, &batch.graph);
        let x = Features::from_tensor(batch.features.clone());
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let emb = encoder.forward(&mut tape, &staged, &ops, &x, None).unwrap();
        let hg = readout_mean(&mut tape, emb, &batch.segments, 3).unwrap();
        let batched = tape.value(hg).clone();

        for i in 0..3 {
            let single = build_batch(&ds, &[i]).unwrap();
            let ops = GraphOps::for_arch(Arch::Gin, &single.graph);
            let x = Features::from_tensor(single.features.clone());
            let mut tape = Tape::new();
            let staged = store.stage(&mut tape);
            let emb = encoder.forward(&mut tape, &staged, &ops, &x, None).unwrap();
            let hg = readout_mean(&mut tape, emb, &single.segments, 1).unwrap();
            for (a, b) in tape.value(hg).data().iter().zip(batched.row(i)) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn encoders_are_permutation_equivariant_bitwise() {
        let n = 17;
        let g = Graph::random(n, 0.3, 12).unwrap();
        let x = random_features(n, 5, 4);
        let perm: Vec<usize> = (0..n).map(|i| (i + 5) % n).collect();
        let edges_perm: Vec<(usize, usize)> =
            g.undirected_edges().iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        let g_perm = Graph::build(&edges_perm, n, true).unwrap();
        let mut x_perm = Tensor::zeros(&[n, 5]);
        for i in 0..n {
            x_perm.data_mut()[perm[i] * 5..(perm[i] + 1) * 5].copy_from_slice(x.row(i));
        }

        for cfg in [
            EncoderConfig {
                hidden_dim: 4,
                output_dim: 4,
                ..EncoderConfig::gcn()
            },
            EncoderConfig {
                hidden_dim: 4,
                output_dim: 4,
                ..EncoderConfig::sage()
            },
            EncoderConfig {
                hidden_dim: 4,
                ..EncoderConfig::gin()
            },
        ] {
            let encoder = Encoder::new(cfg, 5).unwrap();
            let mut store = ParamStore::new();
            encoder.register_params(&mut store, &mut seeded_rng(42)).unwrap();
            let out = forward_once(&encoder, &store, &g, x.clone());
            let out_perm = forward_once(&encoder, &store, &g_perm, x_perm.clone());
            for i in 0..n {
                for (x1, x2) in out.row(i).iter().zip(out_perm.row(perm[i])) {
                    assert_eq!(x1.to_bits(), x2.to_bits(), "{} not equivariant", cfg.architecture);
                }
            }
        }
    }

    #[test]
    fn degree_concat_appends_log_degree() {
        let g = Graph::build(&[(0, 1), (1, 2)], 3, true).unwrap();
        let x = Tensor::from_vec(&[3, 1], vec![7.0, 8.0, 9.0]).unwrap();
        let out = degree_concat(&x, &g).unwrap();
        assert_eq!(out.cols(), 2);
        assert_eq!(out.row(0), &[7.0, 1.0]); // degree 1 -> log2(2)
        assert!((out.row(1)[1] - 3.0f64.log2()).abs() < 1e-15);

        let gi = Graph::build(&[], 2, true).unwrap();
        let xi = Tensor::zeros(&[2, 1]);
        assert_eq!(degree_concat(&xi, &gi).unwrap().row(0)[1], 0.0);
    }

    #[test]
    fn checkpoint_roundtrip_bitwise() {
        let encoder = Encoder::new(EncoderConfig::gcn(), 7).unwrap();
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(13);
        encoder.register_params(&mut store, &mut rng).unwrap();
        register_heads(&mut store, &mut rng, 64, 3, 5, false).unwrap();
        let ckpt = Checkpoint {
            encoder: encoder.cfg,
            in_dim: 7,
            num_classes: 3,
            k: 5,
            epsilon: 1.0,
            params: store.named_values(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.in_dim, 7);
        assert_eq!(back.k, 5);
        assert_eq!(back.params.len(), ckpt.params.len());
        for ((n1, t1), (n2, t2)) in back.params.iter().zip(&ckpt.params) {
            assert_eq!(n1, n2);
            assert!(t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
