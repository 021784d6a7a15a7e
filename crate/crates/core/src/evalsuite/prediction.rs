use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphdata::io::{csv_reader, csv_writer};
use crate::graphdata::{Covariates, Label};

/// One subject's predicted probability of AD.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub label: Label,
    pub prob_ad: f64,
    pub fold: usize,
    pub covariates: Covariates,
}

/// Predictions of one model over a set of subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub model: String,
    pub predictions: Vec<Prediction>,
}

impl PredictionSet {
    pub fn new(model: impl Into<String>, predictions: Vec<Prediction>) -> Result<Self> {
        let set = PredictionSet {
            model: model.into(),
            predictions,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self
            .predictions
            .iter()
            .find(|p| !(0.0..=1.0).contains(&p.prob_ad))
        {
            return Err(Error::Metric(format!(
                "{}: probability {} for {} is outside [0, 1]",
                self.model, p.prob_ad, p.id
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn positives(&self) -> Vec<bool> {
        self.predictions.iter().map(|p| p.label.is_positive()).collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.predictions.iter().map(|p| p.prob_ad).collect()
    }

    pub fn folds(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.predictions.iter().map(|p| p.fold).collect();
        set.into_iter().collect()
    }

    pub fn fold(&self, fold: usize) -> PredictionSet {
        self.filter(|p| p.fold == fold)
    }

    pub fn filter(&self, keep: impl Fn(&Prediction) -> bool) -> PredictionSet {
        PredictionSet {
            model: self.model.clone(),
            predictions: self.predictions.iter().filter(|p| keep(p)).cloned().collect(),
        }
    }

    /// Copy ordered by subject id, for pairing with another model.
    pub fn sorted_by_id(&self) -> PredictionSet {
        let mut predictions = self.predictions.clone();
        predictions.sort_by(|a, b| a.id.cmp(&b.id));
        PredictionSet {
            model: self.model.clone(),
            predictions,
        }
    }

    pub fn write_csv(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        let mut w = csv_writer(path, config_hash)?;
        w.write_record(["subject_id", "label", "prob_ad", "fold", "age", "sex", "apoe4"])?;
        for p in &self.predictions {
            w.write_record([
                p.id.clone(),
                p.label.index().to_string(),
                format!("{}", p.prob_ad),
                p.fold.to_string(),
                format!("{}", p.covariates.age),
                p.covariates.sex.to_string(),
                u8::from(p.covariates.apoe4).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, model: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            subject_id: String,
            label: u8,
            prob_ad: f64,
            fold: usize,
            age: f64,
            sex: u8,
            apoe4: u8,
        }
        let mut predictions = Vec::new();
        for row in csv_reader(path)?.deserialize() {
            let r: Row = row?;
            predictions.push(Prediction {
                id: r.subject_id,
                label: Label::try_from(r.label)?,
                prob_ad: r.prob_ad,
                fold: r.fold,
                covariates: Covariates {
                    age: r.age,
                    sex: r.sex,
                    apoe4: r.apoe4 != 0,
                },
            });
        }
        Self::new(model, predictions).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Checks that two sets cover the same subjects in the same order with the
/// same labels.
pub fn check_paired(a: &PredictionSet, b: &PredictionSet) -> Result<()> {
    let same = a.len() == b.len()
        && a
            .predictions
            .iter()
            .zip(&b.predictions)
            .all(|(x, y)| x.id == y.id && x.label == y.label);
    if same {
        Ok(())
    } else {
        Err(Error::Metric(format!(
            "{} and {} are not predictions for the same subjects",
            a.model, b.model
        )))
    }
}
