use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Csr, Module, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graphdata::Topology;
use crate::nn::glorot;

/// One multi-head attention layer over `Ñ(u)`.
///
/// Projections are stored `in × (heads·head_dim)`; head `h` owns column
/// block `h`. The output projection maps the concatenated heads to
/// `out_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtLayer {
    pub heads: usize,
    pub head_dim: usize,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl GtLayer {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, heads: usize, head_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let width = heads * head_dim;
        let zeros = |n: usize| Tensor::zeros(&[n]).with_requires_grad(true);
        GtLayer {
            heads,
            head_dim,
            wq: glorot(in_dim, width, rng),
            bq: zeros(width),
            wk: glorot(in_dim, width, rng),
            bk: zeros(width),
            wv: glorot(in_dim, width, rng),
            bv: zeros(width),
            wo: glorot(width, out_dim, rng),
            bo: zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.wo.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// `bound` holds the eight parameters in [`Module::parameters`] order;
    /// `x` is `rows × in_dim` where `rows = csr.rows()`.
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var, csr: Arc<Csr>) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_dim() || shape[0] != csr.rows() {
            return Err(Error::contract(format!(
                "layer expects {} × {} features, got {:?}",
                csr.rows(),
                self.in_dim(),
                shape
            )));
        }
        let q = tape.affine(x, bound[0], bound[1])?;
        let k = tape.affine(x, bound[2], bound[3])?;
        let v = tape.affine(x, bound[4], bound[5])?;
        let z = tape.neighbor_attention(q, k, v, csr, self.heads, self.head_dim)?;
        tape.affine(z, bound[6], bound[7])
    }

    /// Forward pass on one graph with plain buffers.
    pub fn layer_forward(&self, topology: &Topology, features: &[f64]) -> Result<Vec<f64>> {
        let n = topology.node_count();
        if features.len() != n * self.in_dim() {
            return Err(Error::contract(format!(
                "layer expects {} × {} features, got {} values",
                n,
                self.in_dim(),
                features.len()
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(&Tensor::matrix(n, self.in_dim(), features.to_vec()));
        let out = self.forward(&mut tape, &bound, x, Arc::new(topology.batched_csr(1)))?;
        Ok(tape.data(out).to_vec())
    }
}

impl Module for GtLayer {
    fn parameters(&self) -> Vec<&Tensor> {
        vec![&self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
        ]
    }

    fn parameter_names(&self) -> Vec<String> {
        ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }
}

/// Attention of node `u` over its neighbourhood, one row per head:
/// `result[h][i]` is the weight on `topology.neighbors(u)[i]`.
pub fn attention_weights(layer: &GtLayer, topology: &Topology, u: usize, features: &[f64]) -> Result<Vec<Vec<f64>>> {
    let n = topology.node_count();
    let d = layer.in_dim();
    if features.len() != n * d || u >= n {
        return Err(Error::contract(format!(
            "attention_weights expects {n} × {d} features and u < {n}"
        )));
    }
    let width = layer.width();
    let project = |w: &Tensor, b: &Tensor| {
        let mut out = Vec::with_capacity(n * width);
        for _ in 0..n {
            out.extend_from_slice(b.data());
        }
        kernels::gemm_nn(n, d, width, features, w.data(), 1.0, &mut out);
        out
    };
    let q = project(&layer.wq, &layer.bq);
    let k = project(&layer.wk, &layer.bk);
    let v = vec![0.0; n * width];
    let csr = topology.batched_csr(1);
    let (_, alpha) = kernels::neighbor_attention(&csr, layer.heads, layer.head_dim, &q, &k, &v);
    let (lo, hi) = (csr.offsets[u], csr.offsets[u + 1]);
    Ok((0..layer.heads)
        .map(|h| (lo..hi).map(|e| alpha[e * layer.heads + h]).collect())
        .collect())
}
