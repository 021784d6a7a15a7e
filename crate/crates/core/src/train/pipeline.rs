use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::classifier::{fit_classifier, Classifier, FitLog, LateFusion};
use super::folds::{stratified_kfold, stratified_split, FoldAssignment, InnerSplit};
use super::pretrain::{pretrain_encoder, PretrainLog};
use super::{DownstreamConfig, PipelineConfig};
use crate::checkpoint::weights_hash;
use crate::ddpm::{balanced_counts, sample_cohort, train_ddpm, DdpmLog, Denoiser};
use crate::error::{Error, Result};
use crate::evalsuite::{Prediction, PredictionSet, ModelPredictions};
use crate::graphdata::{flatten, Cohort, Modality, Standardization, FLAT_DIM};
use crate::gtx::{fused_embeddings, EncoderStack, FusionClassifier, FUSED_DIM};
use crate::rng;
use crate::simulate::{apply_standardization, fit_standardization, knn_impute, knn_impute_from};

pub const GT_PRETRAINED: &str = "gt_ddpm_pretrained";
pub const GT_RANDOM: &str = "gt_random_frozen";
pub const EARLY_FUSION: &str = "early_fusion_dnn";
pub const LATE_FUSION: &str = "late_fusion_dnn";

/// One model's outcome on one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub model: String,
    pub fold: usize,
    pub test: Vec<Prediction>,
    /// Predictions on the inner validation split used for early stopping.
    pub validation: Vec<Prediction>,
    /// Weight hashes of every trained or frozen component.
    pub checksums: BTreeMap<String, String>,
    pub epochs: BTreeMap<String, usize>,
    pub fit: FitLog,
}

/// Gathers per-fold results of one model into prediction sets.
pub fn model_predictions(model: &str, folds: &[FoldResult]) -> Result<ModelPredictions> {
    let pick = |f: fn(&FoldResult) -> &Vec<Prediction>| {
        PredictionSet::new(model, folds.iter().flat_map(|r| f(r).iter().cloned()).collect())
    };
    Ok(ModelPredictions {
        test: pick(|r| &r.test)?,
        validation: Some(pick(|r| &r.validation)?),
    })
}

/// A fold's real data after imputation and standardisation, both fitted on
/// the training part only.
#[derive(Clone, Debug)]
pub struct PreparedFold {
    pub fold: usize,
    pub seed: u64,
    pub train: Cohort,
    pub test: Cohort,
    pub split: InnerSplit,
    pub standardization: Standardization,
    /// Subjects that served as imputation donors.
    pub donor_ids: Vec<String>,
}

pub fn fold_seed(base: u64, fold: usize) -> u64 {
    rng::derive_seed(base, "fold", fold as u64)
}

pub fn prepare_fold(real: &Cohort, assignment: &FoldAssignment, fold: usize, config: &PipelineConfig) -> Result<PreparedFold> {
    let seed = fold_seed(config.train.seed, fold);
    let train = real.subset(&assignment.train_indices(fold));
    let test = real.subset(&assignment.test_indices(fold));
    let train = knn_impute(&train, config.impute_k)?;
    let test = knn_impute_from(&test, &train, config.impute_k)?;
    let standardization = fit_standardization(&train)?;
    let train = apply_standardization(&standardization, &train)?;
    let test = apply_standardization(&standardization, &test)?;
    let split = stratified_split(&train.labels(), config.train.downstream.val_fraction, rng::derive_seed(seed, "inner", 0))?;
    Ok(PreparedFold {
        fold,
        seed,
        donor_ids: train.ids().into_iter().map(String::from).collect(),
        train,
        test,
        split,
        standardization,
    })
}

/// Overlap counts between a fold's test subjects and every input that must
/// not see them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageAudit {
    pub fold: usize,
    pub test_subjects: usize,
    pub ddpm_overlap: usize,
    pub standardization_overlap: usize,
    pub validation_overlap: usize,
    pub imputation_overlap: usize,
}

impl LeakageAudit {
    pub fn passed(&self) -> bool {
        self.ddpm_overlap + self.standardization_overlap + self.validation_overlap + self.imputation_overlap == 0
    }

    fn check(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            Err(Error::contract(format!("test subjects leaked into training inputs: {self:?}")))
        }
    }
}

fn overlap<'a>(test: &HashSet<&str>, ids: impl IntoIterator<Item = &'a str>) -> usize {
    ids.into_iter().filter(|id| test.contains(id)).count()
}

fn audit(prep: &PreparedFold, ddpm_ids: &[&str]) -> Result<LeakageAudit> {
    let test = prep.test.id_set();
    LeakageAudit {
        fold: prep.fold,
        test_subjects: test.len(),
        ddpm_overlap: overlap(&test, ddpm_ids.iter().copied()),
        standardization_overlap: overlap(&test, prep.standardization.fitted_on.iter().map(String::as_str)),
        validation_overlap: overlap(&test, prep.split.validation.iter().map(|&i| prep.train.subjects[i].id.as_str())),
        imputation_overlap: overlap(&test, prep.donor_ids.iter().map(String::as_str)),
    }
    .check()
}

fn predictions(cohort: &Cohort, idx: &[usize], probs: &[f64], fold: usize) -> Vec<Prediction> {
    idx.iter()
        .zip(probs)
        .map(|(&i, &p)| {
            let s = &cohort.subjects[i];
            Prediction {
                id: s.id.clone(),
                label: s.label,
                prob_ad: p,
                fold,
                covariates: s.covariates,
            }
        })
        .collect()
}

fn rows(x: &[f64], dim: usize, idx: &[usize]) -> Vec<f64> {
    idx.iter().flat_map(|&i| x[i * dim..(i + 1) * dim].iter().copied()).collect()
}

/// Trains `model` on features of the fold's training cohort and predicts
/// the validation split and the test cohort.
fn fit_and_predict<C: Classifier>(
    model: &mut C,
    name: &str,
    prep: &PreparedFold,
    train_x: &[f64],
    test_x: &[f64],
    config: &DownstreamConfig,
) -> Result<FoldResult> {
    let d = model.input_dim();
    let y = prep.train.label_indices();
    let fit = fit_classifier(model, train_x, &y, &prep.split, config, rng::derive_seed(prep.seed, name, 1))?;
    let val_probs = model.predict_proba(&rows(train_x, d, &prep.split.validation))?;
    let test_probs = model.predict_proba(test_x)?;
    let all: Vec<usize> = (0..prep.test.len()).collect();
    let mut epochs = BTreeMap::new();
    epochs.insert("downstream_epochs".to_string(), fit.epochs_run);
    epochs.insert("downstream_best_epoch".to_string(), fit.best_epoch);
    let mut checksums = BTreeMap::new();
    checksums.insert("classifier".to_string(), weights_hash(model));
    Ok(FoldResult {
        model: name.to_string(),
        fold: prep.fold,
        test: predictions(&prep.test, &all, &test_probs, prep.fold),
        validation: predictions(&prep.train, &prep.split.validation, &val_probs, prep.fold),
        checksums,
        epochs,
        fit,
    })
}

/// The fusion head trained on frozen encoders, with the fold's
/// predictions.
#[derive(Clone, Debug)]
pub struct Downstream {
    pub classifier: FusionClassifier,
    pub result: FoldResult,
}

/// Trains a fresh fusion head on the frozen encoders' embeddings of the
/// fold's training cohort. The encoders are hashed before and after.
pub fn train_downstream(
    encoders: [&EncoderStack; 2],
    prep: &PreparedFold,
    config: &DownstreamConfig,
    name: &str,
) -> Result<Downstream> {
    let [mri, uds] = encoders;
    let before = [weights_hash(mri), weights_hash(uds)];
    let train_x = fused_embeddings(mri, uds, &prep.train)?;
    let test_x = fused_embeddings(mri, uds, &prep.test)?;
    let mut classifier = FusionClassifier::new(FUSED_DIM, &mut rng::stream(prep.seed, name, 0));
    let mut result = fit_and_predict(&mut classifier, name, prep, &train_x, &test_x, config)?;
    let after = [weights_hash(mri), weights_hash(uds)];
    if before != after {
        return Err(Error::contract("encoder weights changed during downstream training"));
    }
    let [hm, hu] = after;
    result.checksums.insert("encoder_mri".to_string(), hm);
    result.checksums.insert("encoder_uds".to_string(), hu);
    Ok(Downstream { classifier, result })
}

/// Everything one fold of the main pipeline produced.
#[derive(Clone, Debug)]
pub struct FoldRun {
    pub fold: usize,
    pub result: FoldResult,
    pub audit: LeakageAudit,
    pub ddpm_log: DdpmLog,
    pub pretrain_logs: [PretrainLog; 2],
    pub denoiser: Denoiser,
    /// MRI then UDS.
    pub encoders: [EncoderStack; 2],
    pub classifier: FusionClassifier,
    /// Standardised training cohort the DDPM was fitted to.
    pub real_train: Cohort,
    pub synthetic: Cohort,
}

#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub assignment: FoldAssignment,
    pub folds: Vec<FoldRun>,
}

impl PipelineRun {
    pub fn results(&self) -> Vec<FoldResult> {
        self.folds.iter().map(|f| f.result.clone()).collect()
    }
}

/// DDPM → synthetic cohort → encoder pretraining → frozen-encoder
/// downstream training, on one fold.
pub fn run_fold(real: &Cohort, assignment: &FoldAssignment, fold: usize, config: &PipelineConfig) -> Result<FoldRun> {
    let prep = prepare_fold(real, assignment, fold, config)?;
    let ddpm_ids = prep.train.ids();
    let audit = audit(&prep, &ddpm_ids)?;
    let (denoiser, ddpm_log) = train_ddpm(&prep.train, &config.ddpm, rng::derive_seed(prep.seed, "ddpm", 0), None)?;
    let synthetic = sample_cohort(
        &denoiser,
        &config.ddpm.schedule()?,
        balanced_counts(config.synthetic_count),
        rng::derive_seed(prep.seed, "ddpm-sample", 0),
        config.ddpm.reverse_variance,
        &prep.train,
    )?;
    let mut encoders = Vec::with_capacity(2);
    let mut logs = Vec::with_capacity(2);
    for m in Modality::ALL {
        let (enc, log) = pretrain_encoder(
            m,
            &synthetic,
            &config.encoder,
            &config.train.pretrain,
            rng::derive_seed(prep.seed, "pretrain", m.index() as u64),
        )?;
        encoders.push(enc);
        logs.push(log);
    }
    let encoders: [EncoderStack; 2] = encoders.try_into().expect("two modalities");
    let pretrain_logs: [PretrainLog; 2] = logs.try_into().expect("two modalities");
    let mut down = train_downstream([&encoders[0], &encoders[1]], &prep, &config.train.downstream, GT_PRETRAINED)?;
    down.result.checksums.insert("denoiser".to_string(), weights_hash(&denoiser));
    down.result
        .epochs
        .insert("ddpm_epochs".to_string(), ddpm_log.epoch_losses.len());
    down.result
        .epochs
        .insert("pretrain_epochs".to_string(), pretrain_logs[0].epoch_losses.len());
    Ok(FoldRun {
        fold,
        result: down.result,
        audit,
        ddpm_log,
        pretrain_logs,
        denoiser,
        encoders,
        classifier: down.classifier,
        real_train: prep.train,
        synthetic,
    })
}

fn folds_for(real: &Cohort, config: &PipelineConfig) -> Result<FoldAssignment> {
    config.validate()?;
    real.validate(false)?;
    let assignment = stratified_kfold(real, config.train.folds, config.train.seed)?;
    assignment.verify_partition(real)?;
    Ok(assignment)
}

/// The full protocol over stratified folds; folds run in parallel and are
/// returned in fold order.
pub fn run_pipeline(real: &Cohort, config: &PipelineConfig) -> Result<PipelineRun> {
    let assignment = folds_for(real, config)?;
    let folds = (0..assignment.k)
        .into_par_iter()
        .map(|f| run_fold(real, &assignment, f, config).map_err(|e| e.in_fold(f)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PipelineRun { assignment, folds })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFolds {
    pub model: String,
    pub folds: Vec<FoldResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRun {
    pub assignment: FoldAssignment,
    /// Random frozen encoders, Early Fusion, Late Fusion.
    pub models: Vec<ModelFolds>,
}

/// The three comparison models on one fold.
pub fn baseline_fold(real: &Cohort, assignment: &FoldAssignment, fold: usize, config: &PipelineConfig) -> Result<[FoldResult; 3]> {
    let prep = prepare_fold(real, assignment, fold, config)?;
    audit(&prep, &[])?;
    let dc = &config.train.downstream;

    let random: Vec<EncoderStack> = Modality::ALL
        .iter()
        .map(|&m| {
            let mut init = rng::stream(prep.seed, "random-encoder", m.index() as u64);
            EncoderStack::new(m, &config.encoder, &mut init)
        })
        .collect::<Result<_>>()?;
    let random = train_downstream([&random[0], &random[1]], &prep, dc, GT_RANDOM)?.result;

    let flat = |c: &Cohort| c.subjects.iter().flat_map(flatten).collect::<Vec<f64>>();
    let (train_x, test_x) = (flat(&prep.train), flat(&prep.test));
    let mut early = FusionClassifier::with_sizes(&[FLAT_DIM, 512, 256, 2], &mut rng::stream(prep.seed, EARLY_FUSION, 0));
    let early = fit_and_predict(&mut early, EARLY_FUSION, &prep, &train_x, &test_x, dc)?;
    let mut late = LateFusion::new(&mut rng::stream(prep.seed, LATE_FUSION, 0));
    let late = fit_and_predict(&mut late, LATE_FUSION, &prep, &train_x, &test_x, dc)?;
    Ok([random, early, late])
}

/// Comparison models on the same folds as [`run_pipeline`] with the same
/// config.
pub fn baselines(real: &Cohort, config: &PipelineConfig) -> Result<BaselineRun> {
    let assignment = folds_for(real, config)?;
    let per_fold = (0..assignment.k)
        .into_par_iter()
        .map(|f| baseline_fold(real, &assignment, f, config).map_err(|e| e.in_fold(f)))
        .collect::<Result<Vec<_>>>()?;
    let models = [GT_RANDOM, EARLY_FUSION, LATE_FUSION]
        .iter()
        .enumerate()
        .map(|(i, name)| ModelFolds {
            model: name.to_string(),
            folds: per_fold.iter().map(|r| r[i].clone()).collect(),
        })
        .collect();
    Ok(BaselineRun { assignment, models })
}
