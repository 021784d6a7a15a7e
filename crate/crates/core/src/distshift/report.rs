use serde::{Deserialize, Serialize};

use super::distances::{energy_distance, frechet_distance, ks_per_feature, mmd_rbf, KsFeature};
use super::SampleMatrix;
use crate::error::Result;
use crate::graphdata::{flatten, Cohort, Label};
use crate::gtx::{fused_embeddings, EncoderStack};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    /// The flattened standardised features.
    Raw,
    /// Fused embeddings of frozen encoders, MRI then UDS.
    Embedding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassTag {
    Ad,
    Hc,
    Pooled,
}

impl ClassTag {
    pub const ALL: [ClassTag; 3] = [ClassTag::Ad, ClassTag::Hc, ClassTag::Pooled];

    fn admits(self, label: Label) -> bool {
        match self {
            ClassTag::Ad => label == Label::Ad,
            ClassTag::Hc => label == Label::Hc,
            ClassTag::Pooled => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub space: Space,
    pub class: ClassTag,
    pub n_real: usize,
    pub n_synthetic: usize,
    pub mmd2_biased: f64,
    pub mmd2_unbiased: Option<f64>,
    pub bandwidth: f64,
    pub bandwidth_fallback: bool,
    /// `None` when either side has fewer than two rows.
    pub frechet: Option<f64>,
    pub energy: f64,
    pub energy_v: f64,
    pub ks_mean_statistic: f64,
    pub ks_max_statistic: f64,
    /// Share of features with KS p below 0.05.
    pub ks_rejected_share: f64,
    pub ks: Vec<KsFeature>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub rows: Vec<ShiftRow>,
    pub warnings: Vec<String>,
}

impl ShiftReport {
    pub fn row(&self, space: Space, class: ClassTag) -> Option<&ShiftRow> {
        self.rows.iter().find(|r| r.space == space && r.class == class)
    }
}

fn compare(space: Space, class: ClassTag, x: &SampleMatrix, y: &SampleMatrix, warnings: &mut Vec<String>) -> Result<ShiftRow> {
    let mmd = mmd_rbf(x, y, None)?;
    if mmd.bandwidth_fallback {
        warnings.push(format!(
            "{space:?}/{class:?}: all points coincide, RBF bandwidth set to 1.0"
        ));
    }
    let frechet = if x.n >= 2 && y.n >= 2 {
        Some(frechet_distance(x, y)?)
    } else {
        None
    };
    let energy = energy_distance(x, y)?;
    let ks = ks_per_feature(x, y)?;
    let d = ks.len().max(1) as f64;
    Ok(ShiftRow {
        space,
        class,
        n_real: x.n,
        n_synthetic: y.n,
        mmd2_biased: mmd.mmd2_biased,
        mmd2_unbiased: mmd.mmd2_unbiased,
        bandwidth: mmd.bandwidth_used,
        bandwidth_fallback: mmd.bandwidth_fallback,
        frechet,
        energy: energy.distinct,
        energy_v: energy.v_statistic,
        ks_mean_statistic: ks.iter().map(|k| k.statistic).sum::<f64>() / d,
        ks_max_statistic: ks.iter().map(|k| k.statistic).fold(0.0, f64::max),
        ks_rejected_share: ks.iter().filter(|k| k.p_value < 0.05).count() as f64 / d,
        ks,
    })
}

fn rows_of(cohort: &Cohort, class: ClassTag) -> Vec<usize> {
    (0..cohort.len()).filter(|&i| class.admits(cohort.subjects[i].label)).collect()
}

/// Every distance for each class and the pooled sample, in raw space and,
/// when `encoders` (MRI, UDS) are given, in their fused embedding space.
/// Classes missing from either cohort are skipped with a warning.
pub fn shift_report(real: &Cohort, synthetic: &Cohort, encoders: Option<[&EncoderStack; 2]>) -> Result<ShiftReport> {
    let raw = |c: &Cohort| {
        let data: Vec<f64> = c.subjects.iter().flat_map(flatten).collect();
        SampleMatrix::new(c.len(), crate::graphdata::FLAT_DIM, data)
    };
    let mut spaces = vec![(Space::Raw, raw(real)?, raw(synthetic)?)];
    if let Some([mri, uds]) = encoders {
        let d = mri.embedding_dim() + uds.embedding_dim();
        let embed = |c: &Cohort| fused_embeddings(mri, uds, c).and_then(|e| SampleMatrix::new(c.len(), d, e));
        spaces.push((Space::Embedding, embed(real)?, embed(synthetic)?));
    }
    let mut report = ShiftReport::default();
    for (space, x, y) in &spaces {
        for class in ClassTag::ALL {
            let (rx, ry) = (rows_of(real, class), rows_of(synthetic, class));
            if rx.is_empty() || ry.is_empty() {
                report
                    .warnings
                    .push(format!("{space:?}/{class:?}: one side has no subjects, row skipped"));
                continue;
            }
            let row = compare(*space, class, &x.select(&rx), &y.select(&ry), &mut report.warnings)?;
            report.rows.push(row);
        }
    }
    Ok(report)
}
