//! Synthetic pretraining, frozen-encoder downstream training, stratified
//! cross-validation and the comparison baselines.

mod classifier;
mod folds;
mod pipeline;
mod pretrain;

pub use classifier::{classifier_loss, fit_classifier, Classifier, FitLog, LateFusion};
pub use folds::{stratified_kfold, stratified_split, FoldAssignment, InnerSplit};
pub use pipeline::{
    baseline_fold, baselines, fold_seed, model_predictions, prepare_fold, run_fold, run_pipeline, train_downstream,
    BaselineRun, Downstream, FoldResult, FoldRun, LeakageAudit, ModelFolds, PipelineRun, PreparedFold, EARLY_FUSION,
    GT_PRETRAINED, GT_RANDOM, LATE_FUSION,
};
pub use pretrain::{pretrain_encoder, PretrainLog};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::ddpm::DdpmConfig;
use crate::error::{Error, Result};
use crate::graphdata::Modality;
use crate::gtx::{EncoderConfig, EncoderStack};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Applied after every attention layer while pretraining.
    pub dropout: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 100,
            learning_rate: 2e-3,
            batch_size: 32,
            dropout: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 200,
            patience: 10,
            val_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain: PretrainConfig,
    pub downstream: DownstreamConfig,
    pub folds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain: PretrainConfig::default(),
            downstream: DownstreamConfig::default(),
            folds: 5,
            seed: 0,
        }
    }
}

fn positive_rate(name: &str, lr: f64) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {lr}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (p, d) = (&self.pretrain, &self.downstream);
        positive_rate("pretrain.learning_rate", p.learning_rate)?;
        positive_rate("downstream.learning_rate", d.learning_rate)?;
        if p.epochs == 0 || p.batch_size == 0 || d.batch_size == 0 || d.max_epochs == 0 {
            return Err(Error::Config("epochs and batch sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&p.dropout) {
            return Err(Error::Config(format!("pretrain.dropout {} outside [0, 1)", p.dropout)));
        }
        if d.patience == 0 {
            return Err(Error::Config("downstream.patience must be at least 1".into()));
        }
        if !(d.val_fraction > 0.0 && d.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "downstream.val_fraction {} outside (0, 1)",
                d.val_fraction
            )));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        Ok(())
    }
}

/// Every setting of one end-to-end run on a real cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub ddpm: DdpmConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    /// Synthetic subjects drawn per fold, split evenly between classes.
    pub synthetic_count: usize,
    pub impute_k: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            ddpm: DdpmConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            synthetic_count: 4000,
            impute_k: 5,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.ddpm.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        if self.synthetic_count < 2 {
            return Err(Error::Config("synthetic_count must be at least 2".into()));
        }
        if self.impute_k == 0 {
            return Err(Error::Config("impute_k must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn encoder_kind(m: Modality) -> String {
    format!("encoder:{m}")
}

/// Packs an encoder with the config needed to rebuild it.
pub fn encoder_checkpoint(enc: &EncoderStack, config_hash: &str) -> Result<Checkpoint> {
    let meta = serde_json::json!({
        "modality": enc.modality,
        "input_dim": enc.input_dim(),
        "config": enc.config,
    });
    Ok(Checkpoint::from_module(&encoder_kind(enc.modality), config_hash, meta, enc))
}

pub fn encoder_from_checkpoint(ck: &Checkpoint) -> Result<EncoderStack> {
    #[derive(Deserialize)]
    struct Meta {
        modality: Modality,
        input_dim: usize,
        config: EncoderConfig,
    }
    let meta: Meta = serde_json::from_value(ck.meta.clone())?;
    if ck.kind != encoder_kind(meta.modality) {
        return Err(Error::contract(format!("expected an encoder checkpoint, found {}", ck.kind)));
    }
    let mut rng = crate::rng::stream(0, "encoder-load", 0);
    let mut enc = EncoderStack::with_input_dim(meta.modality, meta.input_dim, &meta.config, &mut rng)?;
    ck.load_into(&mut enc)?;
    Ok(enc)
}
