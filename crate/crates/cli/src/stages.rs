//! The pipeline stages and the files they read and write.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use gtdiff::checkpoint::Checkpoint;
use gtdiff::ddpm;
use gtdiff::distshift::{shift_report, ShiftReport};
use gtdiff::evalsuite::{evaluate, MetricsReport, ModelPredictions, PredictionSet};
use gtdiff::graphdata::io::{read_cohort, write_cohort};
use gtdiff::graphdata::{Cohort, Modality};
use gtdiff::gtx::EncoderStack;
use gtdiff::rng::derive_seed;
use gtdiff::simulate::{knn_impute, missing_count, simulate_cohort, standardize};
use gtdiff::train::{
    baselines, encoder_checkpoint, fold_seed, model_predictions, pretrain_encoder, run_pipeline, BaselineRun,
    FoldAssignment, FoldResult, LeakageAudit, ModelFolds, PipelineRun, PretrainLog, EARLY_FUSION, GT_PRETRAINED,
    GT_RANDOM, LATE_FUSION,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// Every model a run can produce, in report order.
pub const MODELS: [&str; 4] = [GT_PRETRAINED, GT_RANDOM, EARLY_FUSION, LATE_FUSION];

pub const CONFIG_FILE: &str = "config.toml";
pub const COHORT_DIR: &str = "cohort";
pub const PREDICTIONS_DIR: &str = "predictions";
pub const FOLDS_FILE: &str = "folds.json";
pub const FOLD_RESULTS_FILE: &str = "fold_results.json";
pub const LOGS_FILE: &str = "training_logs.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const DISTSHIFT_FILE: &str = "distshift.json";
pub const DISTSHIFT_MD: &str = "distshift.md";
pub const REPORT_FILE: &str = "report.md";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn test_csv(model: &str) -> String {
    format!("{PREDICTIONS_DIR}/{model}.test.csv")
}

pub fn validation_csv(model: &str) -> String {
    format!("{PREDICTIONS_DIR}/{model}.validation.csv")
}

/// A config, its hash and the directory artifacts go to.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: RunConfig,
    pub hash: String,
    pub out: PathBuf,
}

impl Context {
    pub fn new(config: RunConfig, out: PathBuf) -> Result<Self> {
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let hash = config.hash();
        Ok(Context { config, hash, out })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub fn write_config(&self) -> Result<()> {
        let text = format!("# config_hash = \"{}\"\n{}", self.hash, self.config.to_toml());
        write_atomic(&self.path(CONFIG_FILE), text.as_bytes())
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let wrapped = Stamped {
            config_hash: self.hash.clone(),
            body: value,
        };
        let mut text = serde_json::to_string_pretty(&wrapped)?;
        text.push('\n');
        write_atomic(&self.path(rel), text.as_bytes())
    }
}

/// A JSON artifact with the config hash beside its body.
#[derive(Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    #[serde(flatten)]
    pub body: T,
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Stamped<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Creates the parent directory of `path` and returns `path`.
pub fn in_dir(path: PathBuf) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(path)
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn simulate(ctx: &Context) -> Result<Cohort> {
    let cohort = simulate_cohort(&ctx.config.sim)?;
    write_cohort(&ctx.path(COHORT_DIR), &cohort, Some(&ctx.hash))?;
    Ok(cohort)
}

pub fn load_cohort(dir: &Path) -> Result<Cohort> {
    read_cohort(dir).with_context(|| format!("reading cohort from {}", dir.display()))
}

/// Imputes and standardises a cohort on itself, unless it already is.
pub fn prepare_whole(cohort: &Cohort, k: usize) -> Result<Cohort> {
    if cohort.standardization.is_some() && missing_count(cohort) == 0 {
        return Ok(cohort.clone());
    }
    let imputed = knn_impute(cohort, k)?;
    Ok(standardize(&imputed, &imputed)?)
}

#[derive(Serialize, Deserialize)]
pub struct DdpmTrainSummary {
    pub seed: u64,
    pub subjects: usize,
    pub log: ddpm::DdpmLog,
    pub checkpoints: Vec<String>,
}

/// Fits the DDPM to a whole cohort; checkpoints every
/// `ddpm.checkpoint_every` epochs and at the end.
pub fn ddpm_train(ctx: &Context, cohort: &Cohort) -> Result<PathBuf> {
    let data = prepare_whole(cohort, ctx.config.train.impute_k)?;
    let seed = derive_seed(ctx.config.seed, "ddpm", 0);
    let cfg = &ctx.config.ddpm;
    fs::create_dir_all(ctx.path("ddpm"))?;
    let mut written = Vec::new();
    let mut hook = |epoch: usize, d: &ddpm::Denoiser| -> gtdiff::Result<()> {
        let rel = format!("ddpm/epoch-{epoch:05}.json");
        ddpm::to_checkpoint(d, cfg, epoch, &ctx.hash)?.save(&ctx.path(&rel))?;
        written.push(rel);
        Ok(())
    };
    let (denoiser, log) = ddpm::train_ddpm(&data, cfg, seed, Some(&mut hook))?;
    let final_rel = "ddpm/ddpm.json".to_string();
    ddpm::to_checkpoint(&denoiser, cfg, cfg.epochs, &ctx.hash)?.save(&in_dir(ctx.path(&final_rel))?)?;
    written.push(final_rel.clone());
    ctx.write_json(
        "ddpm/log.json",
        &DdpmTrainSummary {
            seed,
            subjects: data.len(),
            log,
            checkpoints: written,
        },
    )?;
    Ok(ctx.path(&final_rel))
}

/// Draws `count` class-balanced subjects from a denoiser checkpoint, with
/// covariates taken from `pool`.
pub fn ddpm_sample(ctx: &Context, checkpoint: &Path, pool: &Cohort, count: usize) -> Result<Cohort> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let (denoiser, cfg) = ddpm::from_checkpoint(&ck)?;
    let synthetic = ddpm::sample_cohort(
        &denoiser,
        &cfg.schedule()?,
        ddpm::balanced_counts(count),
        derive_seed(ctx.config.seed, "ddpm-sample", 0),
        cfg.reverse_variance,
        pool,
    )?;
    write_cohort(&ctx.path("synthetic"), &synthetic, Some(&ctx.hash))?;
    Ok(synthetic)
}

pub fn encoder_file(m: Modality) -> String {
    format!("encoder_{m}.json")
}

/// Pretrains both modality encoders on a synthetic cohort.
pub fn pretrain(ctx: &Context, synthetic: &Cohort) -> Result<[EncoderStack; 2]> {
    if missing_count(synthetic) > 0 {
        bail!("the synthetic cohort has missing values");
    }
    let mut encoders = Vec::new();
    let mut logs = BTreeMap::new();
    for m in Modality::ALL {
        let seed = derive_seed(ctx.config.seed, "pretrain", m.index() as u64);
        let (enc, log) = pretrain_encoder(m, synthetic, &ctx.config.model, &ctx.config.train.pretrain, seed)?;
        encoder_checkpoint(&enc, &ctx.hash)?.save(&in_dir(ctx.path(&format!("encoders/{}", encoder_file(m))))?)?;
        logs.insert(m.to_string(), log);
        encoders.push(enc);
    }
    ctx.write_json("encoders/pretrain_log.json", &logs)?;
    Ok(encoders.try_into().expect("two modalities"))
}

pub fn load_encoders(dir: &Path) -> Result<[EncoderStack; 2]> {
    let load = |m: Modality| -> Result<EncoderStack> {
        let path = dir.join(encoder_file(m));
        let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
        Ok(gtdiff::train::encoder_from_checkpoint(&ck)?)
    };
    Ok([load(Modality::Mri)?, load(Modality::Uds)?])
}

#[derive(Serialize, Deserialize)]
pub struct FoldsArtifact {
    pub assignment_hash: String,
    pub assignment: FoldAssignment,
    pub audits: Vec<LeakageAudit>,
}

#[derive(Serialize, Deserialize)]
pub struct FoldLogs {
    pub fold: usize,
    pub seed: u64,
    pub ddpm: ddpm::DdpmLog,
    /// MRI then UDS.
    pub pretrain: [PretrainLog; 2],
}

#[derive(Serialize, Deserialize)]
pub struct LogsArtifact {
    pub folds: Vec<FoldLogs>,
}

#[derive(Serialize, Deserialize)]
pub struct FoldResultsArtifact {
    pub models: Vec<ModelFolds>,
}

/// Outputs of the training stage held in memory for later stages.
pub struct Trained {
    pub pipeline: Option<PipelineRun>,
    pub baselines: BaselineRun,
}

impl Trained {
    pub fn model_folds(&self) -> Vec<ModelFolds> {
        let mut out = Vec::new();
        if let Some(p) = &self.pipeline {
            out.push(ModelFolds {
                model: GT_PRETRAINED.to_string(),
                folds: p.results(),
            });
        }
        out.extend(self.baselines.models.iter().cloned());
        out
    }

    pub fn predictions(&self) -> Result<Vec<ModelPredictions>> {
        self.model_folds()
            .iter()
            .map(|m| Ok(model_predictions(&m.model, &m.folds)?))
            .collect()
    }
}

/// Runs the pipeline (unless `baselines_only`) and the comparison models on
/// the same folds, and writes predictions, checkpoints and logs.
pub fn train(ctx: &Context, real: &Cohort, baselines_only: bool) -> Result<Trained> {
    let pc = ctx.config.pipeline();
    let pipeline = if baselines_only {
        None
    } else {
        Some(run_pipeline(real, &pc)?)
    };
    let base = baselines(real, &pc)?;
    if let Some(p) = &pipeline {
        if p.assignment != base.assignment {
            bail!("pipeline and baselines saw different fold assignments");
        }
    }
    let trained = Trained {
        pipeline,
        baselines: base,
    };
    write_training(ctx, &trained)?;
    Ok(trained)
}

fn write_training(ctx: &Context, t: &Trained) -> Result<()> {
    let audits = t.pipeline.as_ref().map(|p| p.folds.iter().map(|f| f.audit.clone()).collect()).unwrap_or_default();
    ctx.write_json(
        FOLDS_FILE,
        &FoldsArtifact {
            assignment_hash: t.baselines.assignment.hash(),
            assignment: t.baselines.assignment.clone(),
            audits,
        },
    )?;
    let models = t.model_folds();
    for m in &models {
        let preds = model_predictions(&m.model, &m.folds)?;
        preds.test.write_csv(&in_dir(ctx.path(&test_csv(&m.model)))?, Some(&ctx.hash))?;
        if let Some(v) = &preds.validation {
            v.write_csv(&in_dir(ctx.path(&validation_csv(&m.model)))?, Some(&ctx.hash))?;
        }
    }
    ctx.write_json(FOLD_RESULTS_FILE, &FoldResultsArtifact { models })?;
    if let Some(p) = &t.pipeline {
        let logs: Vec<FoldLogs> = p
            .folds
            .iter()
            .map(|f| FoldLogs {
                fold: f.fold,
                seed: fold_seed(ctx.config.seed, f.fold),
                ddpm: f.ddpm_log.clone(),
                pretrain: f.pretrain_logs.clone(),
            })
            .collect();
        ctx.write_json(LOGS_FILE, &LogsArtifact { folds: logs })?;
        for f in &p.folds {
            let dir = format!("checkpoints/fold{}", f.fold);
            for enc in &f.encoders {
                encoder_checkpoint(enc, &ctx.hash)?.save(&in_dir(ctx.path(&format!("{dir}/{}", encoder_file(enc.modality))))?)?;
            }
            Checkpoint::from_module("classifier", &ctx.hash, serde_json::json!({"fold": f.fold}), &f.classifier)
                .save(&in_dir(ctx.path(&format!("{dir}/classifier.json")))?)?;
            ddpm::to_checkpoint(&f.denoiser, &ctx.config.ddpm, ctx.config.ddpm.epochs, &ctx.hash)?
                .save(&in_dir(ctx.path(&format!("{dir}/ddpm.json")))?)?;
        }
    }
    Ok(())
}

/// Prediction sets of every model present in a run directory, in report
/// order. Validation files are optional.
pub fn read_predictions(run: &Path) -> Result<Vec<ModelPredictions>> {
    let mut out = Vec::new();
    for model in MODELS {
        let test = run.join(test_csv(model));
        if !test.exists() {
            continue;
        }
        let val = run.join(validation_csv(model));
        out.push(ModelPredictions {
            test: PredictionSet::read_csv(&test, model)?,
            validation: if val.exists() {
                Some(PredictionSet::read_csv(&val, model)?)
            } else {
                None
            },
        });
    }
    if out.is_empty() {
        bail!("no prediction files under {}", run.join(PREDICTIONS_DIR).display());
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
pub struct MetricsArtifact {
    pub metrics: MetricsReport,
}

pub fn evaluate_models(ctx: &Context, models: &[ModelPredictions]) -> Result<MetricsReport> {
    let report = evaluate(models, &ctx.config.eval)?;
    ctx.write_json(METRICS_FILE, &MetricsArtifact { metrics: report.clone() })?;
    Ok(report)
}

#[derive(Serialize, Deserialize)]
pub struct DistshiftArtifact {
    /// Fold whose training data and synthetic set were compared, when the
    /// comparison comes from a pipeline run.
    pub fold: Option<usize>,
    pub report: ShiftReport,
}

pub fn distshift(
    ctx: &Context,
    real: &Cohort,
    synthetic: &Cohort,
    encoders: Option<[&EncoderStack; 2]>,
    fold: Option<usize>,
) -> Result<ShiftReport> {
    let report = shift_report(real, synthetic, encoders)?;
    let artifact = DistshiftArtifact { fold, report };
    ctx.write_json(DISTSHIFT_FILE, &artifact)?;
    let md = format!(
        "<!-- config_hash: {} -->\n{}",
        ctx.hash,
        crate::report::distshift_table(&artifact)
    );
    write_atomic(&ctx.path(DISTSHIFT_MD), md.as_bytes())?;
    Ok(artifact.report)
}

/// Fold 0 of a pipeline run: its standardised training data against its
/// synthetic cohort, in raw space and through its pretrained encoders.
pub fn distshift_from_run(ctx: &Context, t: &Trained) -> Result<Option<ShiftReport>> {
    let Some(p) = &t.pipeline else { return Ok(None) };
    let f = &p.folds[0];
    let encoders = [&f.encoders[0], &f.encoders[1]];
    distshift(ctx, &f.real_train, &f.synthetic, Some(encoders), Some(f.fold)).map(Some)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub simulation: u64,
    pub folds: Vec<u64>,
}

/// Provenance of a run. The only artifact with wall-clock content.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub preset: String,
    pub seeds: Seeds,
    pub stage_timings: Vec<StageTiming>,
    pub finished_unix: u64,
    /// Relative paths, sorted.
    pub artifacts: Vec<String>,
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            list_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
            out.push(rel);
        }
    }
    Ok(())
}

pub fn write_manifest(ctx: &Context, timings: Vec<StageTiming>) -> Result<RunManifest> {
    let mut artifacts = Vec::new();
    list_files(&ctx.out, &ctx.out, &mut artifacts)?;
    artifacts.retain(|a| a != MANIFEST_FILE && !a.ends_with(".tmp"));
    artifacts.sort();
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: ctx.hash.clone(),
        preset: ctx.config.preset.to_string(),
        seeds: Seeds {
            master: ctx.config.seed,
            simulation: ctx.config.sim.seed,
            folds: (0..ctx.config.train.folds).map(|f| fold_seed(ctx.config.seed, f)).collect(),
        },
        stage_timings: timings,
        finished_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        artifacts,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&ctx.path(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

/// Fold results as written by [`train`].
pub fn read_fold_results(run: &Path) -> Result<Vec<ModelFolds>> {
    Ok(read_json::<FoldResultsArtifact>(&run.join(FOLD_RESULTS_FILE))?.body.models)
}

pub fn fold_result<'a>(models: &'a [ModelFolds], model: &str, fold: usize) -> Option<&'a FoldResult> {
    models.iter().find(|m| m.model == model)?.folds.iter().find(|f| f.fold == fold)
}
