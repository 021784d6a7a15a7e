use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DownstreamConfig, InnerSplit};
use crate::autodiff::{adam_step, AdamState, Module, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graphdata::Modality;
use crate::gtx::FusionClassifier;
use crate::nn::{cross_entropy, prefixed_names, softmax_rows, Mlp};
use crate::rng;

/// A network mapping dense feature rows to two logits.
pub trait Classifier: Module + Clone {
    fn input_dim(&self) -> usize;

    fn logits(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var>;

    /// `P(AD)` for each row of `features`.
    fn predict_proba(&self, features: &[f64]) -> Result<Vec<f64>> {
        let d = self.input_dim();
        if features.len() % d != 0 {
            return Err(Error::shape("predict_proba", &[features.len()], &[d]));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(&Tensor::matrix(features.len() / d, d, features.to_vec()));
        let logits = self.logits(&mut tape, &bound, x)?;
        Ok(softmax_rows(tape.data(logits), 2).chunks(2).map(|p| p[1]).collect())
    }
}

impl Classifier for FusionClassifier {
    fn input_dim(&self) -> usize {
        FusionClassifier::input_dim(self)
    }

    fn logits(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        self.forward(tape, bound, x)
    }
}

/// One dense network per modality on the flattened features (MRI columns
/// first), their ReLU outputs concatenated into a shared head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LateFusion {
    pub mri: Mlp,
    pub uds: Mlp,
    pub head: Mlp,
}

impl LateFusion {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        LateFusion {
            mri: Mlp::new(&[Modality::Mri.flat_len(), 128, 32], rng),
            uds: Mlp::new(&[Modality::Uds.flat_len(), 128, 32], rng),
            head: Mlp::new(&[64, 512, 256, 2], rng),
        }
    }

    fn split_points(&self) -> (usize, usize) {
        (self.mri.input_dim(), self.mri.input_dim() + self.uds.input_dim())
    }
}

impl Module for LateFusion {
    fn parameters(&self) -> Vec<&Tensor> {
        [&self.mri, &self.uds, &self.head].into_iter().flat_map(|m| m.parameters()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.mri.parameters_mut();
        out.extend(self.uds.parameters_mut());
        out.extend(self.head.parameters_mut());
        out
    }

    fn parameter_names(&self) -> Vec<String> {
        let mut names = prefixed_names(std::iter::once(&self.mri as &dyn Module), "mri");
        names.extend(prefixed_names(std::iter::once(&self.uds as &dyn Module), "uds"));
        names.extend(prefixed_names(std::iter::once(&self.head as &dyn Module), "head"));
        names
    }
}

impl Classifier for LateFusion {
    fn input_dim(&self) -> usize {
        self.split_points().1
    }

    fn logits(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        let (a, b) = self.split_points();
        let (na, nb) = (self.mri.parameters().len(), self.uds.parameters().len());
        let xm = tape.slice_cols(x, 0, a)?;
        let xu = tape.slice_cols(x, a, b)?;
        let hm = self.mri.forward(tape, &bound[..na], xm)?;
        let hu = self.uds.forward(tape, &bound[na..na + nb], xu)?;
        let hm = tape.relu(hm);
        let hu = tape.relu(hu);
        let h = tape.concat(&[hm, hu])?;
        self.head.forward(tape, &bound[na + nb..], h)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitLog {
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    /// Zero-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
}

fn gather(x: &[f64], dim: usize, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        out.extend_from_slice(&x[i * dim..(i + 1) * dim]);
    }
    out
}

/// Mean cross-entropy of `model` on rows `idx`, without dropout.
pub fn classifier_loss<C: Classifier>(model: &C, x: &[f64], y: &[usize], idx: &[usize]) -> Result<f64> {
    let d = model.input_dim();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let xb = tape.constant(&Tensor::matrix(idx.len(), d, gather(x, d, idx)));
    let logits = model.logits(&mut tape, &bound, xb)?;
    let yb: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
    let loss = cross_entropy(&mut tape, logits, &yb)?;
    Ok(tape.data(loss)[0])
}

/// Trains with Adam on `split.train`, stops once the validation loss has
/// not improved for `patience` epochs, and restores the best weights.
pub fn fit_classifier<C: Classifier>(
    model: &mut C,
    x: &[f64],
    y: &[usize],
    split: &InnerSplit,
    config: &DownstreamConfig,
    seed: u64,
) -> Result<FitLog> {
    let d = model.input_dim();
    if x.len() != y.len() * d {
        return Err(Error::shape("fit_classifier", &[y.len(), d], &[x.len()]));
    }
    if split.validation.is_empty() {
        return Err(Error::contract("validation split is empty"));
    }
    let mut adam = AdamState::new(&model.parameters(), config.learning_rate);
    let mut log = FitLog {
        best_val_loss: f64::INFINITY,
        ..FitLog::default()
    };
    let mut best = model.clone();
    let mut since_best = 0;
    let mut order = split.train.clone();
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng::stream(seed, "downstream-epoch", epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let xb = tape.constant(&Tensor::matrix(chunk.len(), d, gather(x, d, chunk)));
            let logits = model.logits(&mut tape, &bound, xb)?;
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let loss = cross_entropy(&mut tape, logits, &yb)?;
            let value = tape.data(loss)[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: "downstream",
                    epoch,
                    learning_rate: config.learning_rate,
                });
            }
            total += value * chunk.len() as f64;
            tape.backward(loss)?;
            model.pull_grads(&tape, &bound);
            adam_step(&mut model.parameters_mut(), &mut adam)?;
        }
        let val = classifier_loss(model, x, y, &split.validation)?;
        log.train_losses.push(total / order.len() as f64);
        log.val_losses.push(val);
        log.epochs_run = epoch + 1;
        if val < log.best_val_loss {
            log.best_val_loss = val;
            log.best_epoch = epoch;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    *model = best;
    Ok(log)
}
