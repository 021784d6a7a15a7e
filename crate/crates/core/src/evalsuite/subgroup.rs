use serde::{Deserialize, Serialize};

use super::metrics::{confusion_metrics, roc_auc};
use super::prediction::{Prediction, PredictionSet};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub stratifier: String,
    pub group: String,
    pub n: usize,
    pub n_positive: usize,
    /// `None` when the group holds a single class.
    pub auc: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubgroupTable {
    pub rows: Vec<SubgroupRow>,
    /// Omitted empty groups and groups with undefined AUC.
    pub notices: Vec<String>,
}

pub const DEFAULT_AGE_CUTS: [f64; 2] = [70.0, 80.0];

/// Band labels for ascending `cuts`, e.g. `<70`, `70-80`, `>80`. A cut
/// value belongs to the band that starts at it, except the last cut, which
/// closes the band below it.
pub fn age_band(age: f64, cuts: &[f64]) -> String {
    match cuts {
        [] => "all".to_string(),
        _ if age < cuts[0] => format!("<{}", cuts[0]),
        _ if age > cuts[cuts.len() - 1] => format!(">{}", cuts[cuts.len() - 1]),
        _ => {
            let i = cuts.windows(2).position(|w| age < w[1]).unwrap_or(cuts.len() - 2);
            format!("{}-{}", cuts[i], cuts[i + 1])
        }
    }
}

fn age_groups(cuts: &[f64]) -> Vec<String> {
    let mut groups = Vec::new();
    if let (Some(first), Some(last)) = (cuts.first(), cuts.last()) {
        groups.push(format!("<{first}"));
        groups.extend(cuts.windows(2).map(|w| format!("{}-{}", w[0], w[1])));
        groups.push(format!(">{last}"));
    } else {
        groups.push("all".into());
    }
    groups
}

/// Discrimination metrics within age bands, sex and APOE4 carrier groups.
pub fn subgroup_eval(set: &PredictionSet, age_cuts: &[f64], threshold: f64) -> Result<SubgroupTable> {
    type Key = fn(&Prediction, &[f64]) -> String;
    let strata: [(&str, Vec<String>, Key); 3] = [
        ("age", age_groups(age_cuts), |p, cuts| age_band(p.covariates.age, cuts)),
        ("sex", vec!["0".into(), "1".into()], |p, _| p.covariates.sex.to_string()),
        ("apoe4", vec!["carrier".into(), "non-carrier".into()], |p, _| {
            if p.covariates.apoe4 { "carrier" } else { "non-carrier" }.to_string()
        }),
    ];
    let mut table = SubgroupTable::default();
    for (name, groups, key) in strata {
        for group in groups {
            let sub = set.filter(|p| key(p, age_cuts) == group);
            if sub.is_empty() {
                table.notices.push(format!("{name}={group}: empty group omitted"));
                continue;
            }
            let y = sub.positives();
            let s = sub.scores();
            let auc = roc_auc(&y, &s).ok();
            if auc.is_none() {
                table.notices.push(format!("{name}={group}: single class, AUC undefined"));
            }
            let c = confusion_metrics(&y, &s, threshold)?;
            table.rows.push(SubgroupRow {
                stratifier: name.to_string(),
                group,
                n: sub.len(),
                n_positive: y.iter().filter(|&&p| p).count(),
                auc,
                sensitivity: c.sensitivity,
                specificity: c.specificity,
            });
        }
    }
    Ok(table)
}
