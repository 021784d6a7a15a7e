use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Module, Tape, Tensor, Var};
use crate::error::{Error, Result};
use super::schedule::NoiseSchedule;
use crate::nn::{prefixed_names, Mlp};

/// Architecture of the noise-prediction network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub label_dim: usize,
    /// Add `√(1 − ᾱ_t) · x_t` to the network output, the optimal noise
    /// estimate for unit-Gaussian data, so the MLP learns only the
    /// correction. A ReLU MLP narrower than twice the data dimension cannot
    /// represent that linear term itself.
    pub residual: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            hidden: vec![512, 512],
            time_dim: 64,
            label_dim: 16,
            residual: true,
        }
    }
}

/// Sinusoidal embedding of step `t`: sines then cosines over geometrically
/// spaced frequencies.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Anything that predicts the injected noise for a batch.
pub trait NoisePredictor: Sync {
    fn data_dim(&self) -> usize;

    /// `x` is `t.len() × data_dim`, row-major.
    fn predict(&self, x: &[f64], t: &[usize], y: &[usize]) -> Result<Vec<f64>>;
}

/// `ε_θ(x_t, t, y)`: an MLP over `[x_t ‖ time embedding ‖ label embedding]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Denoiser {
    pub data_dim: usize,
    pub config: DenoiserConfig,
    /// `2 × label_dim`, one row per class.
    pub label_embedding: Tensor,
    pub mlp: Mlp,
    /// Residual coefficient per step, indexed by `t - 1`; empty when the
    /// output is the bare MLP.
    #[serde(default)]
    pub skip: Vec<f64>,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(data_dim: usize, config: &DenoiserConfig, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let table = (0..2 * config.label_dim).map(|_| normal.sample(rng)).collect();
        let mut sizes = vec![data_dim + config.time_dim + config.label_dim];
        sizes.extend(&config.hidden);
        sizes.push(data_dim);
        Denoiser {
            data_dim,
            config: config.clone(),
            label_embedding: Tensor::matrix(2, config.label_dim, table).with_requires_grad(true),
            mlp: Mlp::new(&sizes, rng),
            skip: Vec::new(),
        }
    }

    /// Attaches the residual coefficients of `schedule` if the config asks
    /// for them.
    pub fn with_schedule(mut self, schedule: &NoiseSchedule) -> Self {
        self.skip = if self.config.residual {
            schedule.alpha_bars.iter().map(|ab| (1.0 - ab).sqrt()).collect()
        } else {
            Vec::new()
        };
        self
    }

    /// Differentiable forward pass. `bound` comes from [`Module::bind`].
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var, t: &[usize], y: &[usize]) -> Result<Var> {
        let n = t.len();
        if y.len() != n || tape.shape(x) != [n, self.data_dim] {
            return Err(Error::shape("denoiser", tape.shape(x), &[n, self.data_dim]));
        }
        if let Some(&bad) = y.iter().find(|&&c| c > 1) {
            return Err(Error::contract(format!("label {bad} is not 0 or 1")));
        }
        let td = self.config.time_dim;
        let mut temb = Vec::with_capacity(n * td);
        for &step in t {
            temb.extend(time_embedding(step, td));
        }
        let temb = tape.constant(&Tensor::matrix(n, td, temb));
        let labels: Arc<[usize]> = y.into();
        let lemb = tape.gather_rows(bound[0], labels)?;
        let input = tape.concat(&[x, temb, lemb])?;
        let out = self.mlp.forward(tape, &bound[1..], input)?;
        if self.skip.is_empty() {
            return Ok(out);
        }
        let mut coef = Vec::with_capacity(n * self.data_dim);
        for &step in t {
            let c = step
                .checked_sub(1)
                .and_then(|i| self.skip.get(i))
                .ok_or_else(|| Error::contract(format!("timestep {step} outside 1..={}", self.skip.len())))?;
            coef.extend(std::iter::repeat_n(*c, self.data_dim));
        }
        let coef = tape.constant(&Tensor::matrix(n, self.data_dim, coef));
        let linear = tape.mul(x, coef)?;
        tape.add(out, linear)
    }
}

impl Module for Denoiser {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut p = vec![&self.label_embedding];
        p.extend(self.mlp.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![&mut self.label_embedding];
        p.extend(self.mlp.parameters_mut());
        p
    }

    fn parameter_names(&self) -> Vec<String> {
        let mut names = vec!["label_embedding".to_string()];
        names.extend(prefixed_names(std::iter::once(&self.mlp as &dyn Module), "mlp"));
        names
    }
}

impl NoisePredictor for Denoiser {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn predict(&self, x: &[f64], t: &[usize], y: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(&Tensor::new(vec![t.len(), self.data_dim], x.to_vec())?);
        let out = self.forward(&mut tape, &bound, xv, t, y)?;
        Ok(tape.data(out).to_vec())
    }
}
