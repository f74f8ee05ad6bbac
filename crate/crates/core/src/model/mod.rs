//! Gated crystal-graph convolution encoder with mean-pool readout, a
//! two-layer projector for pre-training, and a two-layer regression head.
//!
//! Each convolution updates node states by
//! `h_i <- h_i + sum_j sigmoid(z_ij W_f + b_f) * softplus(z_ij W_s + b_s)`
//! with `z_ij = [h_i, h_j, e_ij]` over the directed edges `i -> j`.

mod checkpoint;

pub use checkpoint::{checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::featurize::CrystalGraph;

/// Rows of the element embedding table (Z = 1..=100).
pub const NUM_ELEMENTS: usize = 100;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("config mismatch for {field}: expected {expected}, found {found}")]
    ConfigMismatch {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("model has no {0}")]
    MissingComponent(&'static str),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub n_conv: usize,
    pub proj_dim: usize,
    pub head_hidden: usize,
    pub edge_feat_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            n_conv: 3,
            proj_dim: 128,
            head_hidden: 64,
            edge_feat_dim: 41,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("hidden_dim", self.hidden_dim),
            ("n_conv", self.n_conv),
            ("proj_dim", self.proj_dim),
            ("head_hidden", self.head_hidden),
            ("edge_feat_dim", self.edge_feat_dim),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(ModelError::InvalidConfig(format!("{name} must be positive"))),
            None => Ok(()),
        }
    }

    /// Width of the per-edge input `[h_i, h_j, e_ij]`.
    pub fn edge_input_dim(&self) -> usize {
        2 * self.hidden_dim + self.edge_feat_dim
    }

    /// Fields that must agree for encoder weights to be shared.
    pub fn check_encoder_compatible(&self, other: &ModelConfig) -> Result<(), ModelError> {
        for (field, expected, found) in [
            ("hidden_dim", self.hidden_dim, other.hidden_dim),
            ("n_conv", self.n_conv, other.n_conv),
            ("edge_feat_dim", self.edge_feat_dim, other.edge_feat_dim),
        ] {
            if expected != found {
                return Err(ModelError::ConfigMismatch {
                    field,
                    expected,
                    found,
                });
            }
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub w_filter: Tensor,
    pub w_core: Tensor,
    pub b_filter: Tensor,
    pub b_core: Tensor,
}

impl ConvParams {
    fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let fan_in = cfg.edge_input_dim();
        let h = cfg.hidden_dim;
        Self {
            w_filter: uniform(&[fan_in, h], fan_in, rng),
            w_core: uniform(&[fan_in, h], fan_in, rng),
            b_filter: uniform(&[h], fan_in, rng),
            b_core: uniform(&[h], fan_in, rng),
        }
    }
}

/// `softplus(x W1 + b1) W2 + b2`
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w1: uniform(&[input, hidden], input, rng),
            b1: uniform(&[hidden], input, rng),
            w2: uniform(&[hidden, output], hidden, rng),
            b2: uniform(&[output], hidden, rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[input, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, output]),
            b2: Tensor::zeros(&[output]),
        }
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Affine map from standardized head outputs back to label units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub std: f64,
}

impl TargetScaler {
    pub const IDENTITY: Self = Self {
        mean: 0.0,
        std: 1.0,
    };

    /// Population mean and standard deviation; a zero spread maps to 1.
    pub fn fit(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::IDENTITY;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        Self {
            mean,
            std: if std > 0.0 { std } else { 1.0 },
        }
    }

    pub fn standardize(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn destandardize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// All learnable weights. A pre-training model carries a projector, a
/// fine-tuning model carries a regression head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `NUM_ELEMENTS × hidden_dim`; row `Z - 1` is the layer-0 state of element `Z`.
    pub elem_embed: Tensor,
    pub convs: Vec<ConvParams>,
    pub projector: Option<Mlp>,
    pub head: Option<Mlp>,
    pub target_scaler: Option<TargetScaler>,
}

impl ModelParams {
    /// Embedding table and convolutions only.
    pub fn init_encoder<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        // the embedding acts like a linear layer on a one-hot element vector
        let elem_embed = uniform(&[NUM_ELEMENTS, cfg.hidden_dim], NUM_ELEMENTS, rng);
        let convs = (0..cfg.n_conv).map(|_| ConvParams::init(cfg, rng)).collect();
        Self {
            config: *cfg,
            elem_embed,
            convs,
            projector: None,
            head: None,
            target_scaler: None,
        }
    }

    pub fn with_projector<R: Rng + ?Sized>(mut self, rng: &mut R) -> Self {
        let c = self.config;
        self.projector = Some(Mlp::init(c.hidden_dim, c.proj_dim, c.proj_dim, rng));
        self
    }

    pub fn with_head<R: Rng + ?Sized>(mut self, rng: &mut R) -> Self {
        let c = self.config;
        self.head = Some(Mlp::init(c.hidden_dim, c.head_hidden, 1, rng));
        self
    }

    /// A fine-tuning model that reuses this model's encoder. The projector
    /// is dropped and the head is freshly initialized from `head_rng`.
    pub fn transfer_encoder<R: Rng + ?Sized>(
        &self,
        target: &ModelConfig,
        head_rng: &mut R,
    ) -> Result<Self, ModelError> {
        target.check_encoder_compatible(&self.config)?;
        let encoder = Self {
            config: *target,
            elem_embed: self.elem_embed.clone(),
            convs: self.convs.clone(),
            projector: None,
            head: None,
            target_scaler: None,
        };
        Ok(encoder.with_head(head_rng))
    }

    /// Named tensors in a fixed order shared with [`BoundParams::vars`].
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("elem_embed".to_string(), &self.elem_embed)];
        for (k, c) in self.convs.iter().enumerate() {
            out.push((format!("conv{k}.w_filter"), &c.w_filter));
            out.push((format!("conv{k}.w_core"), &c.w_core));
            out.push((format!("conv{k}.b_filter"), &c.b_filter));
            out.push((format!("conv{k}.b_core"), &c.b_core));
        }
        for (prefix, mlp) in [("projector", &self.projector), ("head", &self.head)] {
            if let Some(m) = mlp {
                for (name, t) in ["w1", "b1", "w2", "b2"].iter().zip(m.tensors()) {
                    out.push((format!("{prefix}.{name}"), t));
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.elem_embed];
        for c in &mut self.convs {
            out.extend([&mut c.w_filter, &mut c.w_core, &mut c.b_filter, &mut c.b_core]);
        }
        if let Some(m) = &mut self.projector {
            out.extend(m.tensors_mut());
        }
        if let Some(m) = &mut self.head {
            out.extend(m.tensors_mut());
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every tensor on `tape`, as a tracked parameter when
    /// `trainable`, otherwise as a constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let elem_embed = leaf(&self.elem_embed);
        let convs = self
            .convs
            .iter()
            .map(|c| BoundConv {
                w_filter: leaf(&c.w_filter),
                w_core: leaf(&c.w_core),
                b_filter: leaf(&c.b_filter),
                b_core: leaf(&c.b_core),
            })
            .collect();
        let mut bind_mlp = |m: &Mlp| BoundMlp {
            w1: leaf(&m.w1),
            b1: leaf(&m.b1),
            w2: leaf(&m.w2),
            b2: leaf(&m.b2),
        };
        let projector = self.projector.as_ref().map(&mut bind_mlp);
        let head = self.head.as_ref().map(&mut bind_mlp);
        BoundParams {
            elem_embed,
            convs,
            projector,
            head,
        }
    }

    /// Inputs to the head as a tape-free forward pass: one latent row per graph.
    pub fn embed(&self, graphs: &[&CrystalGraph]) -> Result<Tensor, ModelError> {
        let batch = GraphBatch::new(graphs, &self.config)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let latent = encode(&mut tape, &bound, &batch)?;
        Ok(tape.value(latent).clone())
    }

    /// Head outputs mapped back to label units.
    pub fn predict(&self, graphs: &[&CrystalGraph]) -> Result<Vec<f64>, ModelError> {
        let batch = GraphBatch::new(graphs, &self.config)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let latent = encode(&mut tape, &bound, &batch)?;
        let out = regress(&mut tape, &bound, latent)?;
        let scaler = self.target_scaler.unwrap_or(TargetScaler::IDENTITY);
        Ok(tape
            .value(out)
            .data()
            .iter()
            .map(|z| scaler.destandardize(*z))
            .collect())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundConv {
    pub w_filter: Var,
    pub w_core: Var,
    pub b_filter: Var,
    pub b_core: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundMlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Tape handles for a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub elem_embed: Var,
    pub convs: Vec<BoundConv>,
    pub projector: Option<BoundMlp>,
    pub head: Option<BoundMlp>,
}

impl BoundParams {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.elem_embed];
        for c in &self.convs {
            out.extend([c.w_filter, c.w_core, c.b_filter, c.b_core]);
        }
        for m in self.projector.iter().chain(self.head.iter()) {
            out.extend([m.w1, m.b1, m.w2, m.b2]);
        }
        out
    }
}

/// Several graphs merged into one disconnected graph, with a node-to-graph
/// index for pooling. Masked edge features are zeroed here.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub num_graphs: usize,
    pub elem_index: Vec<usize>,
    pub node_mask: Vec<bool>,
    pub node_graph: Vec<usize>,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub edge_feat: Tensor,
}

impl GraphBatch {
    pub fn new(graphs: &[&CrystalGraph], cfg: &ModelConfig) -> Result<Self, ModelError> {
        if graphs.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let k = cfg.edge_feat_dim;
        let mut batch = Self {
            num_graphs: graphs.len(),
            elem_index: Vec::new(),
            node_mask: Vec::new(),
            node_graph: Vec::new(),
            src: Vec::new(),
            dst: Vec::new(),
            edge_feat: Tensor::zeros(&[0, k]),
        };
        let mut feat = Vec::new();
        for (gi, g) in graphs.iter().enumerate() {
            if g.num_nodes() == 0 {
                return Err(ModelError::EmptyGraph);
            }
            g.validate(k).map_err(ModelError::InvalidGraph)?;
            if let Some(&z) = g
                .node_elem
                .iter()
                .find(|&&z| z == 0 || z as usize > NUM_ELEMENTS)
            {
                return Err(ModelError::InvalidGraph(format!("atomic number {z}")));
            }
            let offset = batch.elem_index.len();
            batch
                .elem_index
                .extend(g.node_elem.iter().map(|&z| z as usize - 1));
            batch.node_mask.extend_from_slice(&g.node_mask);
            batch.node_graph.extend(std::iter::repeat_n(gi, g.num_nodes()));
            for ((&(s, d), row), &on) in g.edges.iter().zip(&g.edge_feat).zip(&g.edge_mask) {
                batch.src.push(s + offset);
                batch.dst.push(d + offset);
                if on {
                    feat.extend_from_slice(row);
                } else {
                    feat.extend(std::iter::repeat_n(0.0, k));
                }
            }
        }
        batch.edge_feat = Tensor::matrix(batch.src.len(), k, feat)?;
        Ok(batch)
    }

    pub fn num_nodes(&self) -> usize {
        self.elem_index.len()
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }
}

/// Layer-0 node states: embedding rows with masked nodes zeroed.
pub fn initial_states(tape: &mut Tape, p: &BoundParams, batch: &GraphBatch) -> Result<Var, ModelError> {
    let emb = tape.gather_rows(p.elem_embed, &batch.elem_index)?;
    let hidden = tape.value(emb).cols();
    let mut mask = Vec::with_capacity(batch.num_nodes() * hidden);
    for &on in &batch.node_mask {
        mask.extend(std::iter::repeat_n(if on { 1.0 } else { 0.0 }, hidden));
    }
    let mask = tape.constant(Tensor::matrix(batch.num_nodes(), hidden, mask)?);
    Ok(tape.mul(emb, mask)?)
}

/// `[h_i, h_j, e_ij] W + b` for every edge. The node blocks of `W` are
/// applied once per node and then gathered per edge.
fn edge_affine(
    tape: &mut Tape,
    states: Var,
    w: Var,
    b: Var,
    batch: &GraphBatch,
    edge_feat: Var,
) -> Result<Var, ModelError> {
    let hidden = tape.value(states).cols();
    let rows = tape.value(w).rows();
    let w_center = tape.slice_rows(w, 0, hidden)?;
    let w_neighbor = tape.slice_rows(w, hidden, 2 * hidden)?;
    let w_edge = tape.slice_rows(w, 2 * hidden, rows)?;
    let center = tape.matmul(states, w_center)?;
    let center = tape.gather_rows(center, &batch.src)?;
    let neighbor = tape.matmul(states, w_neighbor)?;
    let neighbor = tape.gather_rows(neighbor, &batch.dst)?;
    let edge = tape.matmul(edge_feat, w_edge)?;
    let sum = tape.add(center, neighbor)?;
    let sum = tape.add(sum, edge)?;
    Ok(tape.add(sum, b)?)
}

/// One gated convolution. Nodes without outgoing edges keep their state.
pub fn conv_layer(
    tape: &mut Tape,
    layer: &BoundConv,
    states: Var,
    batch: &GraphBatch,
    edge_feat: Var,
) -> Result<Var, ModelError> {
    let (n, hidden) = (tape.value(states).rows(), tape.value(states).cols());
    let expected_rows = 2 * hidden + tape.value(edge_feat).cols();
    if n != batch.num_nodes() || tape.value(layer.w_filter).rows() != expected_rows {
        return Err(AutodiffError::ShapeMismatch(format!(
            "{n}x{hidden} node states for {} nodes and {} weight rows",
            batch.num_nodes(),
            tape.value(layer.w_filter).rows()
        ))
        .into());
    }
    let filter = edge_affine(tape, states, layer.w_filter, layer.b_filter, batch, edge_feat)?;
    let filter = tape.sigmoid(filter);
    let core = edge_affine(tape, states, layer.w_core, layer.b_core, batch, edge_feat)?;
    let core = tape.softplus(core);
    let messages = tape.mul(filter, core)?;
    let aggregate = tape.scatter_add_rows(messages, &batch.src, n)?;
    Ok(tape.add(states, aggregate)?)
}

/// Final node states averaged over each graph's active nodes
/// (over all nodes if every node is masked). Output `[graphs, hidden]`.
pub fn encode(tape: &mut Tape, p: &BoundParams, batch: &GraphBatch) -> Result<Var, ModelError> {
    let mut h = initial_states(tape, p, batch)?;
    let edge_feat = tape.constant(batch.edge_feat.clone());
    for layer in &p.convs {
        h = conv_layer(tape, layer, h, batch, edge_feat)?;
    }
    Ok(tape.mean_rows(h, &batch.node_graph, batch.num_graphs, Some(&batch.node_mask))?)
}

fn mlp_forward(tape: &mut Tape, m: &BoundMlp, x: Var) -> Result<Var, ModelError> {
    let hidden = tape.matmul(x, m.w1)?;
    let hidden = tape.add(hidden, m.b1)?;
    let hidden = tape.softplus(hidden);
    let out = tape.matmul(hidden, m.w2)?;
    Ok(tape.add(out, m.b2)?)
}

/// Projector embeddings `[graphs, proj_dim]`.
pub fn project(tape: &mut Tape, p: &BoundParams, latent: Var) -> Result<Var, ModelError> {
    let m = p.projector.ok_or(ModelError::MissingComponent("projector"))?;
    mlp_forward(tape, &m, latent)
}

/// Standardized predictions `[graphs, 1]`.
pub fn regress(tape: &mut Tape, p: &BoundParams, latent: Var) -> Result<Var, ModelError> {
    let m = p.head.ok_or(ModelError::MissingComponent("head"))?;
    mlp_forward(tape, &m, latent)
}
