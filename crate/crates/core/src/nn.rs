//! Dense layers and losses shared by every network in the crate.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Module, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Glorot-uniform `rows × cols` matrix.
pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).with_requires_grad(true)
}

/// `y = x · W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Linear {
            weight: glorot(input, output, rng),
            bias: Tensor::zeros(&[output]).with_requires_grad(true),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[input, output]).with_requires_grad(true),
            bias: Tensor::zeros(&[output]).with_requires_grad(true),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `bound` holds `[weight, bias]` as produced by [`Module::bind`].
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        tape.affine(x, bound[0], bound[1])
    }
}

impl Module for Linear {
    fn parameters(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn parameter_names(&self) -> Vec<String> {
        vec!["weight".into(), "bias".into()]
    }
}

/// Stack of [`Linear`] layers with ReLU between consecutive layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes = [input, hidden..., output]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Mlp {
            layers: sizes.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].input_dim()];
        s.extend(self.layers.iter().map(Linear::output_dim));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::output_dim)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, &bound[2 * i..2 * i + 2], h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

impl Module for Mlp {
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

/// `"{prefix}{i}.{name}"` for every parameter of every part.
pub fn prefixed_names<'a>(parts: impl Iterator<Item = &'a dyn Module>, prefix: &str) -> Vec<String> {
    parts
        .enumerate()
        .flat_map(|(i, m)| {
            m.parameter_names()
                .into_iter()
                .map(move |n| format!("{prefix}{i}.{n}"))
        })
        .collect()
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`).
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let (rows, classes) = match shape[..] {
        [r, c] => (r, c),
        _ => return Err(Error::shape("cross_entropy", &shape, &[labels.len()])),
    };
    if rows != labels.len() || labels.iter().any(|&y| y >= classes) {
        return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
    }
    let mut onehot = vec![0.0; rows * classes];
    for (r, &y) in labels.iter().enumerate() {
        onehot[r * classes + y] = 1.0;
    }
    let onehot = tape.constant(&Tensor::matrix(rows, classes, onehot));
    let logp = tape.log_softmax(logits);
    let picked = tape.mul(logp, onehot)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / rows.max(1) as f64))
}

/// Mean squared difference over all entries.
pub fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Row-wise softmax of a plain `rows × cols` buffer.
pub fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    for row in out.chunks_mut(cols) {
        crate::autodiff::softmax_in_place(row);
    }
    out
}

/// Applies Adam to every parameter of `module`.
pub fn step<M: Module + ?Sized>(module: &mut M, state: &mut crate::autodiff::AdamState) -> Result<()> {
    let mut params = module.parameters_mut();
    crate::autodiff::adam_step(&mut params, state)
}

/// Clears all parameter gradients of `module`.
pub fn zero_grads<M: Module + ?Sized>(module: &mut M) {
    for p in module.parameters_mut() {
        p.zero_grad();
    }
}
