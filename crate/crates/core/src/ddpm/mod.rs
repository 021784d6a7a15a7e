//! Class-conditional denoising diffusion over flattened subject vectors.

mod denoiser;
mod sample;
mod schedule;
mod train;

pub use denoiser::{time_embedding, Denoiser, DenoiserConfig, NoisePredictor};
pub use sample::{balanced_counts, sample_cohort, sample_vectors, SAMPLE_CHUNK};
pub use schedule::{forward_diffuse, forward_step, NoiseSchedule, ReverseVariance};
pub use train::{
    ddpm_loss, denoiser_loss, loss_value, train_ddpm, train_ddpm_vectors, CheckpointHook, DdpmConfig,
    DdpmLog, NoisedBatch,
};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

pub const CHECKPOINT_KIND: &str = "ddpm";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DdpmMeta {
    data_dim: usize,
    epoch: usize,
    config: DdpmConfig,
}

/// Packs a denoiser and the config that defines its schedule.
pub fn to_checkpoint(denoiser: &Denoiser, config: &DdpmConfig, epoch: usize, config_hash: &str) -> Result<Checkpoint> {
    let meta = DdpmMeta {
        data_dim: denoiser.data_dim,
        epoch,
        config: config.clone(),
    };
    Ok(Checkpoint::from_module(
        CHECKPOINT_KIND,
        config_hash,
        serde_json::to_value(meta)?,
        denoiser,
    ))
}

/// Rebuilds the denoiser and its config from a checkpoint.
pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Denoiser, DdpmConfig)> {
    if ck.kind != CHECKPOINT_KIND {
        return Err(Error::contract(format!("expected a ddpm checkpoint, found {}", ck.kind)));
    }
    let meta: DdpmMeta = serde_json::from_value(ck.meta.clone())?;
    let mut rng = crate::rng::stream(0, "ddpm-load", 0);
    let mut denoiser =
        Denoiser::new(meta.data_dim, &meta.config.denoiser, &mut rng).with_schedule(&meta.config.schedule()?);
    ck.load_into(&mut denoiser)?;
    Ok((denoiser, meta.config))
}
