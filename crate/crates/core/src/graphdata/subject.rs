use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::topology::{
    build_mri_topology, build_uds_topology, DomainAssignment, MriGridSpec, Topology, MRI_NODES,
    UDS_NODES,
};
use crate::error::{Error, Result};

/// Length of a flattened subject: 62·2 MRI values followed by 170 UDS values.
pub const FLAT_DIM: usize = MRI_NODES * 2 + UDS_NODES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Mri,
    Uds,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Mri, Modality::Uds];

    /// Position in [`Modality::ALL`] and in flattened subject vectors.
    pub fn index(self) -> usize {
        match self {
            Modality::Mri => 0,
            Modality::Uds => 1,
        }
    }

    pub fn node_count(self) -> usize {
        match self {
            Modality::Mri => MRI_NODES,
            Modality::Uds => UDS_NODES,
        }
    }

    pub fn feature_dim(self) -> usize {
        match self {
            Modality::Mri => 2,
            Modality::Uds => 1,
        }
    }

    pub fn flat_len(self) -> usize {
        self.node_count() * self.feature_dim()
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Mri => "mri",
            Modality::Uds => "uds",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mri" => Ok(Modality::Mri),
            "uds" => Ok(Modality::Uds),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

/// Node feature matrix of one modality, `node_count × feature_dim`,
/// row-major. Missing values are `NaN` until imputed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityGraph {
    pub modality: Modality,
    pub features: Vec<f64>,
}

impl ModalityGraph {
    pub fn new(modality: Modality, features: Vec<f64>) -> Result<Self> {
        if features.len() != modality.flat_len() {
            return Err(Error::shape(
                "modality_graph",
                &[modality.node_count(), modality.feature_dim()],
                &[features.len()],
            ));
        }
        Ok(ModalityGraph { modality, features })
    }

    pub fn zeros(modality: Modality) -> Self {
        ModalityGraph {
            modality,
            features: vec![0.0; modality.flat_len()],
        }
    }

    pub fn node(&self, u: usize) -> &[f64] {
        let d = self.modality.feature_dim();
        &self.features[u * d..(u + 1) * d]
    }

    pub fn is_finite(&self) -> bool {
        self.features.iter().all(|x| x.is_finite())
    }
}

/// Diagnostic class: 0 = healthy control, 1 = Alzheimer's disease.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Hc,
    Ad,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Hc => 0,
            Label::Ad => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Hc),
            1 => Ok(Label::Ad),
            _ => Err(Error::contract(format!("label {i} is not 0 or 1"))),
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Ad
    }
}

impl TryFrom<u8> for Label {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Label::from_index(v as usize)
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.index() as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Covariates {
    pub age: f64,
    /// Binary sex code (0 or 1).
    pub sex: u8,
    pub apoe4: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub label: Label,
    pub covariates: Covariates,
    pub site_id: u32,
    pub mri: ModalityGraph,
    pub uds: ModalityGraph,
}

impl Subject {
    pub fn graph(&self, m: Modality) -> &ModalityGraph {
        match m {
            Modality::Mri => &self.mri,
            Modality::Uds => &self.uds,
        }
    }

    pub fn graph_mut(&mut self, m: Modality) -> &mut ModalityGraph {
        match m {
            Modality::Mri => &mut self.mri,
            Modality::Uds => &mut self.uds,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mri.is_finite() && self.uds.is_finite()
    }
}

/// MRI features row-major followed by UDS features.
pub fn flatten(subject: &Subject) -> Vec<f64> {
    let mut v = Vec::with_capacity(FLAT_DIM);
    v.extend_from_slice(&subject.mri.features);
    v.extend_from_slice(&subject.uds.features);
    v
}

/// Inverse of [`flatten`].
pub fn unflatten(v: &[f64]) -> Result<(ModalityGraph, ModalityGraph)> {
    if v.len() != FLAT_DIM {
        return Err(Error::shape("unflatten", &[FLAT_DIM], &[v.len()]));
    }
    let split = Modality::Mri.flat_len();
    Ok((
        ModalityGraph::new(Modality::Mri, v[..split].to_vec())?,
        ModalityGraph::new(Modality::Uds, v[split..].to_vec())?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    SimulatedReal,
    DdpmSynthetic,
}

/// Fixed graph structure shared by every subject of a cohort.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphLayout {
    pub mri_grid: MriGridSpec,
    pub uds_domains: DomainAssignment,
    pub mri: Topology,
    pub uds: Topology,
}

impl GraphLayout {
    pub fn new(mri_grid: MriGridSpec, uds_domains: DomainAssignment) -> Result<Self> {
        if uds_domains.len() != UDS_NODES {
            return Err(Error::Config(format!(
                "UDS domain assignment covers {} nodes, expected {UDS_NODES}",
                uds_domains.len()
            )));
        }
        Ok(GraphLayout {
            mri: build_mri_topology(&mri_grid)?,
            uds: build_uds_topology(&uds_domains)?,
            mri_grid,
            uds_domains,
        })
    }

    pub fn standard() -> Self {
        GraphLayout::new(MriGridSpec::default(), DomainAssignment::uds_default())
            .expect("default layout is valid")
    }

    pub fn topology(&self, m: Modality) -> &Topology {
        match m {
            Modality::Mri => &self.mri,
            Modality::Uds => &self.uds,
        }
    }
}

/// Statistics used to standardise a cohort, kept so the same transform can
/// be replayed on held-out subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub uds_mean: Vec<f64>,
    pub uds_std: Vec<f64>,
    /// MRI columns are z-scored within each subject.
    pub mri_per_subject: bool,
    /// Subjects the UDS statistics were computed from.
    pub fitted_on: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub subjects: Vec<Subject>,
    pub provenance: Provenance,
    pub standardization: Option<Standardization>,
    pub layout: Arc<GraphLayout>,
}

impl Cohort {
    pub fn new(subjects: Vec<Subject>, provenance: Provenance, layout: Arc<GraphLayout>) -> Self {
        Cohort {
            subjects,
            provenance,
            standardization: None,
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.subjects.iter().map(|s| s.label).collect()
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.subjects.iter().map(|s| s.label.index()).collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.subjects.iter().filter(|s| s.label == label).count()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.subjects.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn id_set(&self) -> HashSet<&str> {
        self.subjects.iter().map(|s| s.id.as_str()).collect()
    }

    /// Subjects at `indices`, in that order, sharing this cohort's layout.
    pub fn subset(&self, indices: &[usize]) -> Cohort {
        Cohort {
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
            provenance: self.provenance,
            standardization: self.standardization.clone(),
            layout: Arc::clone(&self.layout),
        }
    }

    pub fn flattened(&self) -> Vec<Vec<f64>> {
        self.subjects.iter().map(flatten).collect()
    }

    /// Checks shapes, unique ids and that no value is non-finite (when
    /// `require_finite`).
    pub fn validate(&self, require_finite: bool) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::contract(format!("duplicate subject id {}", s.id)));
            }
            for m in Modality::ALL {
                let g = s.graph(m);
                if g.modality != m || g.features.len() != m.flat_len() {
                    return Err(Error::contract(format!("subject {} has a malformed {m} graph", s.id)));
                }
            }
            if s.mri.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::contract(format!("subject {} has missing MRI values", s.id)));
            }
            if require_finite && !s.is_finite() {
                return Err(Error::contract(format!("subject {} has missing values", s.id)));
            }
        }
        Ok(())
    }
}
