use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layer::GtLayer;
use crate::autodiff::{Csr, Module, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graphdata::{Modality, ModalityGraph, Topology};
use crate::nn::prefixed_names;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Max,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub heads: usize,
    /// Width of the two hidden layers (`heads × hidden/heads`).
    pub hidden: usize,
    /// Width of the final layer and of the pooled embedding.
    pub embedding: usize,
    pub dropout: f64,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            heads: 4,
            hidden: 64,
            embedding: 32,
            dropout: 0.3,
            pooling: Pooling::Max,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden % self.heads != 0 || self.embedding % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden ({}) and embedding ({}) must be positive multiples of heads ({})",
                self.hidden, self.embedding, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Node features of several graphs sharing one topology, stacked as a
/// disjoint union.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub graphs: usize,
    pub nodes: usize,
    pub feature_dim: usize,
    pub features: Vec<f64>,
    pub csr: Arc<Csr>,
    pub segments: Vec<usize>,
}

impl GraphBatch {
    pub fn new(topology: &Topology, graphs: &[&ModalityGraph]) -> Result<Self> {
        let Some(first) = graphs.first() else {
            return Err(Error::contract("empty graph batch"));
        };
        let nodes = topology.node_count();
        let feature_dim = first.features.len() / nodes.max(1);
        let mut features = Vec::with_capacity(graphs.len() * nodes * feature_dim);
        for g in graphs {
            if g.features.len() != nodes * feature_dim || g.modality != first.modality {
                return Err(Error::contract("graphs in a batch must share modality and shape"));
            }
            features.extend_from_slice(&g.features);
        }
        Ok(Self::from_features(topology, feature_dim, features))
    }

    /// `features` holds `graphs × nodes × feature_dim` values.
    pub fn from_features(topology: &Topology, feature_dim: usize, features: Vec<f64>) -> Self {
        let nodes = topology.node_count();
        let graphs = features.len() / (nodes * feature_dim).max(1);
        GraphBatch {
            graphs,
            nodes,
            feature_dim,
            features,
            csr: Arc::new(topology.batched_csr(graphs)),
            segments: (0..graphs).flat_map(|g| std::iter::repeat_n(g, nodes)).collect(),
        }
    }
}

/// Three attention layers followed by graph pooling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderStack {
    pub modality: Modality,
    pub config: EncoderConfig,
    pub layers: Vec<GtLayer>,
}

impl EncoderStack {
    pub fn new<R: Rng + ?Sized>(modality: Modality, config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        Self::with_input_dim(modality, modality.feature_dim(), config, rng)
    }

    pub fn with_input_dim<R: Rng + ?Sized>(
        modality: Modality,
        input_dim: usize,
        config: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.heads;
        let layers = vec![
            GtLayer::new(input_dim, h, config.hidden / h, config.hidden, rng),
            GtLayer::new(config.hidden, h, config.hidden / h, config.hidden, rng),
            GtLayer::new(config.hidden, h, config.embedding / h, config.embedding, rng),
        ];
        Ok(EncoderStack {
            modality,
            config: config.clone(),
            layers,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().map_or(0, GtLayer::out_dim)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// Node features after every layer (ReLU between layers, dropout after
    /// each layer when `train`), before pooling.
    pub fn node_features<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        batch: &GraphBatch,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if batch.feature_dim != self.input_dim() {
            return Err(Error::contract(format!(
                "encoder expects {} features per node, batch has {}",
                self.input_dim(),
                batch.feature_dim
            )));
        }
        let rows = batch.graphs * batch.nodes;
        let mut h = tape.constant(&Tensor::new(vec![rows, batch.feature_dim], batch.features.clone())?);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, &bound[8 * i..8 * i + 8], h, Arc::clone(&batch.csr))?;
            if i < last {
                h = tape.relu(h);
            }
            h = tape.dropout(h, self.config.dropout, train, rng)?;
        }
        Ok(h)
    }

    /// Pooled `graphs × embedding_dim` output.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        batch: &GraphBatch,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let h = self.node_features(tape, bound, batch, train, rng)?;
        match self.config.pooling {
            Pooling::Max => tape.segment_max(h, &batch.segments, batch.graphs),
            Pooling::Mean => tape.segment_mean(h, batch.segments.clone().into(), batch.graphs),
        }
    }

    /// Eval-mode embeddings of many graphs, `graphs.len() × embedding_dim`.
    pub fn embed(&self, topology: &Topology, graphs: &[&ModalityGraph]) -> Result<Vec<f64>> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(graphs.len() * self.embedding_dim());
        let mut rng = crate::rng::stream(0, "eval", 0);
        for chunk in graphs.chunks(CHUNK) {
            let batch = GraphBatch::new(topology, chunk)?;
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let e = self.forward(&mut tape, &bound, &batch, false, &mut rng)?;
            out.extend_from_slice(tape.data(e));
        }
        Ok(out)
    }

    /// Eval-mode embedding of one graph.
    pub fn encode(&self, topology: &Topology, graph: &ModalityGraph) -> Result<Vec<f64>> {
        self.embed(topology, &[graph])
    }
}

impl Module for EncoderStack {
    fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.parameters()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.parameters_mut()).collect()
    }

    fn parameter_names(&self) -> Vec<String> {
        prefixed_names(self.layers.iter().map(|l| l as &dyn Module), "layer")
    }
}
