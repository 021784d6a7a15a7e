use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::denoiser::{Denoiser, DenoiserConfig, NoisePredictor};
use super::schedule::{NoiseSchedule, ReverseVariance};
use crate::autodiff::{adam_step, AdamState, Module, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graphdata::{flatten, Cohort, FLAT_DIM};
use crate::nn::mse;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdpmConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub denoiser: DenoiserConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub reverse_variance: ReverseVariance,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for DdpmConfig {
    fn default() -> Self {
        DdpmConfig {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            denoiser: DenoiserConfig::default(),
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            reverse_variance: ReverseVariance::Beta,
            checkpoint_every: 0,
        }
    }
}

impl DdpmConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        if self.batch_size == 0 {
            return Err(Error::Config("ddpm batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("ddpm learning_rate must be positive".into()));
        }
        if self.denoiser.time_dim % 2 != 0 {
            return Err(Error::Config("time embedding dimension must be even".into()));
        }
        Ok(())
    }
}

/// A corrupted batch: `x_t`, the steps and the noise that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedBatch {
    pub dim: usize,
    pub x_t: Vec<f64>,
    pub t: Vec<usize>,
    pub eps: Vec<f64>,
    pub y: Vec<usize>,
}

impl NoisedBatch {
    /// Corrupts `x0` (`y.len() × dim`) with the given steps and noise.
    pub fn with_noise(
        schedule: &NoiseSchedule,
        x0: &[f64],
        dim: usize,
        y: &[usize],
        t: Vec<usize>,
        eps: Vec<f64>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::contract("empty diffusion batch"));
        }
        if x0.len() != n * dim || eps.len() != n * dim || t.len() != n {
            return Err(Error::shape("ddpm_batch", &[n, dim], &[x0.len(), eps.len(), t.len()]));
        }
        let mut x_t = Vec::with_capacity(n * dim);
        for i in 0..n {
            let r = i * dim..(i + 1) * dim;
            x_t.extend(super::schedule::forward_diffuse(schedule, &x0[r.clone()], t[i], &eps[r])?);
        }
        Ok(NoisedBatch {
            dim,
            x_t,
            t,
            eps,
            y: y.to_vec(),
        })
    }

    /// Draws `t ~ U{1..T}` and `eps ~ N(0, I)` per item.
    pub fn draw<R: Rng + ?Sized>(
        schedule: &NoiseSchedule,
        x0: &[f64],
        dim: usize,
        y: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let n = y.len();
        let mut t = Vec::with_capacity(n);
        let mut eps = Vec::with_capacity(n * dim);
        for _ in 0..n {
            t.push(rng.random_range(1..=schedule.timesteps));
            eps.extend((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        }
        NoisedBatch::with_noise(schedule, x0, dim, y, t, eps)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Differentiable mean of `(eps − ε_θ(x_t, t, y))²` over items and dims.
pub fn denoiser_loss(tape: &mut Tape, bound: &[Var], denoiser: &Denoiser, batch: &NoisedBatch) -> Result<Var> {
    let n = batch.len();
    let x = tape.constant(&Tensor::new(vec![n, batch.dim], batch.x_t.clone())?);
    let target = tape.constant(&Tensor::new(vec![n, batch.dim], batch.eps.clone())?);
    let pred = denoiser.forward(tape, bound, x, &batch.t, &batch.y)?;
    mse(tape, pred, target)
}

/// Noise-prediction loss on freshly drawn steps and noise.
pub fn ddpm_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    bound: &[Var],
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    x0: &[f64],
    y: &[usize],
    rng: &mut R,
) -> Result<Var> {
    let batch = NoisedBatch::draw(schedule, x0, denoiser.data_dim, y, rng)?;
    denoiser_loss(tape, bound, denoiser, &batch)
}

/// The same loss evaluated for any predictor, without gradients.
pub fn loss_value(predictor: &dyn NoisePredictor, batch: &NoisedBatch) -> Result<f64> {
    let pred = predictor.predict(&batch.x_t, &batch.t, &batch.y)?;
    let total: f64 = pred.iter().zip(&batch.eps).map(|(p, e)| (p - e) * (p - e)).sum();
    Ok(total / batch.eps.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DdpmLog {
    pub epoch_losses: Vec<f64>,
    /// Running minimum of `epoch_losses`.
    pub best_so_far: Vec<f64>,
    /// Loss on a fixed evaluation draw before and after training.
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
}

/// Callback invoked with `(epoch, denoiser)` at checkpoint epochs.
pub type CheckpointHook<'a> = &'a mut dyn FnMut(usize, &Denoiser) -> Result<()>;

/// Trains a denoiser on rows of `data` (`labels.len() × dim`).
pub fn train_ddpm_vectors(
    data: &[f64],
    dim: usize,
    labels: &[usize],
    config: &DdpmConfig,
    seed: u64,
    mut hook: Option<CheckpointHook<'_>>,
) -> Result<(Denoiser, DdpmLog)> {
    config.validate()?;
    let n = labels.len();
    if n == 0 || data.len() != n * dim {
        return Err(Error::shape("train_ddpm", &[n, dim], &[data.len()]));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::contract("DDPM training data must be finite"));
    }
    let schedule = config.schedule()?;
    let mut denoiser =
        Denoiser::new(dim, &config.denoiser, &mut rng::stream(seed, "ddpm-init", 0)).with_schedule(&schedule);
    let mut adam = AdamState::new(&denoiser.parameters(), config.learning_rate);

    let eval_n = n.min(512);
    let eval_idx: Vec<usize> = (0..eval_n).map(|i| i * n / eval_n).collect();
    let (eval_x, eval_y) = gather(data, dim, labels, &eval_idx);
    let eval_batch = NoisedBatch::draw(&schedule, &eval_x, dim, &eval_y, &mut rng::stream(seed, "ddpm-eval", 0))?;
    let mut log = DdpmLog {
        initial_eval_loss: loss_value(&denoiser, &eval_batch)?,
        ..DdpmLog::default()
    };

    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        let mut rng = rng::stream(seed, "ddpm-epoch", epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (x0, y) = gather(data, dim, labels, chunk);
            let mut tape = Tape::new();
            let bound = denoiser.bind(&mut tape, true);
            let loss = ddpm_loss(&mut tape, &bound, &denoiser, &schedule, &x0, &y, &mut rng)?;
            let value = tape.data(loss)[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: "ddpm",
                    epoch,
                    learning_rate: config.learning_rate,
                });
            }
            total += value * chunk.len() as f64;
            tape.backward(loss)?;
            denoiser.pull_grads(&tape, &bound);
            adam_step(&mut denoiser.parameters_mut(), &mut adam)?;
        }
        let epoch_loss = total / n as f64;
        let best = log.best_so_far.last().map_or(epoch_loss, |b: &f64| b.min(epoch_loss));
        log.epoch_losses.push(epoch_loss);
        log.best_so_far.push(best);
        if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
            if let Some(h) = hook.as_mut() {
                h(epoch + 1, &denoiser)?;
            }
        }
    }
    log.final_eval_loss = loss_value(&denoiser, &eval_batch)?;
    Ok((denoiser, log))
}

/// Trains on the flattened, standardised subjects of `cohort`.
pub fn train_ddpm(
    cohort: &Cohort,
    config: &DdpmConfig,
    seed: u64,
    hook: Option<CheckpointHook<'_>>,
) -> Result<(Denoiser, DdpmLog)> {
    let mut data = Vec::with_capacity(cohort.len() * FLAT_DIM);
    for s in &cohort.subjects {
        data.extend(flatten(s));
    }
    train_ddpm_vectors(&data, FLAT_DIM, &cohort.label_indices(), config, seed, hook)
}

fn gather(data: &[f64], dim: usize, labels: &[usize], idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let mut x = Vec::with_capacity(idx.len() * dim);
    let mut y = Vec::with_capacity(idx.len());
    for &i in idx {
        x.extend_from_slice(&data[i * dim..(i + 1) * dim]);
        y.push(labels[i]);
    }
    (x, y)
}
