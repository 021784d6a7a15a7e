//! On-disk cohort format.
//!
//! A cohort directory holds `subjects.csv` (id, label, age, sex, apoe4,
//! site_id), `mri.csv` and `uds.csv` (id followed by the node features,
//! missing values as `NA`), and a `cohort.json` sidecar with the layout and
//! standardisation table. CSV files may start with `#` comment lines, which
//! carry the config hash.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    Cohort, Covariates, DomainAssignment, GraphLayout, Label, Modality, ModalityGraph, MriGridSpec,
    Provenance, Standardization, Subject,
};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const SUBJECTS_FILE: &str = "subjects.csv";
pub const SIDECAR_FILE: &str = "cohort.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub format_version: u32,
    pub provenance: Provenance,
    pub subject_count: usize,
    pub mri_grid: MriGridSpec,
    pub uds_domains: DomainAssignment,
    pub standardization: Option<Standardization>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

pub fn modality_file(m: Modality) -> String {
    format!("{}.csv", m.name())
}

/// Column names of a modality CSV after `id`.
pub fn feature_columns(m: Modality) -> Vec<String> {
    match m {
        Modality::Mri => (0..m.node_count())
            .flat_map(|u| [format!("r{u}_thickness"), format!("r{u}_volume")])
            .collect(),
        Modality::Uds => (0..m.node_count()).map(|u| format!("uds{u}")).collect(),
    }
}

pub fn format_value(x: f64) -> String {
    if x.is_nan() {
        "NA".to_string()
    } else {
        format!("{x}")
    }
}

fn parse_value(s: &str, path: &Path) -> Result<f64> {
    if s == "NA" {
        return Ok(f64::NAN);
    }
    s.parse::<f64>().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        message: format!("not a number: {s:?}"),
    })
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Opens `path` for CSV writing, emitting `# config_hash=…` first when given.
pub fn csv_writer(path: &Path, config_hash: Option<&str>) -> Result<csv::Writer<fs::File>> {
    let mut file = fs::File::create(path)?;
    if let Some(h) = config_hash {
        writeln!(file, "# config_hash={h}")?;
    }
    Ok(csv::Writer::from_writer(file))
}

pub fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?)
}

/// Writes `cohort` into `dir`, creating it if needed.
pub fn write_cohort(dir: &Path, cohort: &Cohort, config_hash: Option<&str>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv_writer(&dir.join(SUBJECTS_FILE), config_hash)?;
    w.write_record(["id", "label", "age", "sex", "apoe4", "site_id"])?;
    for s in &cohort.subjects {
        w.write_record([
            s.id.clone(),
            s.label.index().to_string(),
            format_value(s.covariates.age),
            s.covariates.sex.to_string(),
            u8::from(s.covariates.apoe4).to_string(),
            s.site_id.to_string(),
        ])?;
    }
    w.flush()?;

    for m in Modality::ALL {
        let mut w = csv_writer(&dir.join(modality_file(m)), config_hash)?;
        let mut header = vec!["id".to_string()];
        header.extend(feature_columns(m));
        w.write_record(&header)?;
        for s in &cohort.subjects {
            let mut row = Vec::with_capacity(header.len());
            row.push(s.id.clone());
            row.extend(s.graph(m).features.iter().map(|&x| format_value(x)));
            w.write_record(&row)?;
        }
        w.flush()?;
    }

    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        provenance: cohort.provenance,
        subject_count: cohort.len(),
        mri_grid: cohort.layout.mri_grid,
        uds_domains: cohort.layout.uds_domains.clone(),
        standardization: cohort.standardization.clone(),
        config_hash: config_hash.map(str::to_string),
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    fs::write(dir.join(SIDECAR_FILE), json + "\n")?;
    Ok(())
}

fn read_modality(dir: &Path, m: Modality, ids: &[String]) -> Result<Vec<ModalityGraph>> {
    let path: PathBuf = dir.join(modality_file(m));
    let mut r = csv_reader(&path)?;
    let expected = 1 + m.flat_len();
    let header = r.headers()?.clone();
    if header.len() != expected {
        return Err(format_err(
            &path,
            format!("expected {expected} columns, found {}", header.len()),
        ));
    }
    let mut out = Vec::with_capacity(ids.len());
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or_default();
        if ids.get(i).map(String::as_str) != Some(id) {
            return Err(format_err(&path, format!("row {i}: subject {id:?} out of order")));
        }
        let features = rec
            .iter()
            .skip(1)
            .map(|s| parse_value(s, &path))
            .collect::<Result<Vec<f64>>>()?;
        out.push(ModalityGraph::new(m, features)?);
    }
    if out.len() != ids.len() {
        return Err(format_err(
            &path,
            format!("{} rows for {} subjects", out.len(), ids.len()),
        ));
    }
    Ok(out)
}

pub fn read_sidecar(dir: &Path) -> Result<Sidecar> {
    let path = dir.join(SIDECAR_FILE);
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(&path)?)
        .map_err(|e| format_err(&path, e.to_string()))?;
    if sidecar.format_version != FORMAT_VERSION {
        return Err(format_err(
            &path,
            format!("unsupported format_version {}", sidecar.format_version),
        ));
    }
    Ok(sidecar)
}

/// Reads a cohort written by [`write_cohort`].
pub fn read_cohort(dir: &Path) -> Result<Cohort> {
    let sidecar = read_sidecar(dir)?;
    let layout = Arc::new(GraphLayout::new(sidecar.mri_grid, sidecar.uds_domains.clone())?);

    let path = dir.join(SUBJECTS_FILE);
    let mut r = csv_reader(&path)?;
    let mut meta = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 6 {
            return Err(format_err(&path, format!("expected 6 columns, found {}", rec.len())));
        }
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let int = |i: usize| -> Result<u64> {
            field(i)
                .parse::<u64>()
                .map_err(|_| format_err(&path, format!("bad integer {:?}", field(i))))
        };
        let label = Label::from_index(int(1)? as usize).map_err(|e| format_err(&path, e.to_string()))?;
        let sex = int(3)?;
        let apoe4 = int(4)?;
        if sex > 1 || apoe4 > 1 {
            return Err(format_err(&path, "sex and apoe4 must be 0 or 1"));
        }
        meta.push((
            field(0).to_string(),
            label,
            Covariates {
                age: parse_value(field(2), &path)?,
                sex: sex as u8,
                apoe4: apoe4 == 1,
            },
            int(5)? as u32,
        ));
    }
    if meta.len() != sidecar.subject_count {
        return Err(format_err(
            &path,
            format!("{} subjects, sidecar says {}", meta.len(), sidecar.subject_count),
        ));
    }
    let ids: Vec<String> = meta.iter().map(|m| m.0.clone()).collect();
    let mri = read_modality(dir, Modality::Mri, &ids)?;
    let uds = read_modality(dir, Modality::Uds, &ids)?;
    let subjects = meta
        .into_iter()
        .zip(mri.into_iter().zip(uds))
        .map(|((id, label, covariates, site_id), (mri, uds))| Subject {
            id,
            label,
            covariates,
            site_id,
            mri,
            uds,
        })
        .collect();
    let cohort = Cohort {
        subjects,
        provenance: sidecar.provenance,
        standardization: sidecar.standardization,
        layout,
    };
    cohort.validate(false)?;
    Ok(cohort)
}
