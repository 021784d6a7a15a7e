use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EncoderStack;
use crate::autodiff::{Module, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graphdata::{Cohort, Modality, ModalityGraph};
use crate::nn::{softmax_rows, Mlp};

/// Width of the concatenated MRI and UDS embeddings.
pub const FUSED_DIM: usize = 64;

/// Dense head `input → 512 → 256 → 2` with ReLU between layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionClassifier {
    pub mlp: Mlp,
}

impl FusionClassifier {
    pub fn new<R: Rng + ?Sized>(input: usize, rng: &mut R) -> Self {
        FusionClassifier {
            mlp: Mlp::new(&[input, 512, 256, 2], rng),
        }
    }

    pub fn with_sizes<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        FusionClassifier {
            mlp: Mlp::new(sizes, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    /// Logits for a `rows × input` batch.
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        self.mlp.forward(tape, bound, x)
    }

    /// Class probabilities for `rows × input` features.
    pub fn predict_proba(&self, features: &[f64]) -> Result<Vec<f64>> {
        let d = self.input_dim();
        if features.len() % d != 0 {
            return Err(Error::shape("fusion", &[features.len()], &[d]));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(&Tensor::matrix(features.len() / d, d, features.to_vec()));
        let logits = self.forward(&mut tape, &bound, x)?;
        Ok(softmax_rows(tape.data(logits), 2))
    }
}

impl Module for FusionClassifier {
    fn parameters(&self) -> Vec<&Tensor> {
        self.mlp.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.parameters_mut()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.mlp.parameter_names()
    }
}

/// Concatenates one embedding per modality (MRI first, then UDS) and
/// returns `[P(HC), P(AD)]`.
pub fn fuse_and_classify(classifier: &FusionClassifier, embeddings: &[&[f64]]) -> Result<[f64; 2]> {
    if embeddings.len() != 2 {
        return Err(Error::contract(format!(
            "expected one embedding per modality (2), got {}",
            embeddings.len()
        )));
    }
    let fused = embeddings.concat();
    if fused.len() != classifier.input_dim() {
        return Err(Error::contract(format!(
            "fused embedding has {} values, classifier expects {}",
            fused.len(),
            classifier.input_dim()
        )));
    }
    let p = classifier.predict_proba(&fused)?;
    Ok([p[0], p[1]])
}

/// Eval-mode fused embeddings (`cohort.len() × (mri + uds)`), MRI columns
/// first.
pub fn fused_embeddings(mri: &EncoderStack, uds: &EncoderStack, cohort: &Cohort) -> Result<Vec<f64>> {
    if mri.modality != Modality::Mri || uds.modality != Modality::Uds {
        return Err(Error::contract("fused_embeddings expects the MRI encoder first, then UDS"));
    }
    let parts = [mri, uds].map(|enc| {
        let graphs: Vec<&ModalityGraph> = cohort.subjects.iter().map(|s| s.graph(enc.modality)).collect();
        enc.embed(cohort.layout.topology(enc.modality), &graphs)
    });
    let [a, b] = parts;
    let (a, b) = (a?, b?);
    let (da, db) = (mri.embedding_dim(), uds.embedding_dim());
    let mut out = Vec::with_capacity(cohort.len() * (da + db));
    for i in 0..cohort.len() {
        out.extend_from_slice(&a[i * da..(i + 1) * da]);
        out.extend_from_slice(&b[i * db..(i + 1) * db]);
    }
    Ok(out)
}
