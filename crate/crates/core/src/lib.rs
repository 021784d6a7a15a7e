//! Class-conditional diffusion pretraining for multimodal graph classification.
//!
//! The crate covers the full path from a simulated labelled cohort to
//! evaluated predictions:
//!
//! * [`autodiff`]: tape-based reverse-mode differentiation and Adam.
//! * [`graphdata`]: fixed-topology modality graphs, subjects and cohorts.
//! * [`simulate`]: latent-factor cohort simulator, KNN imputation and
//!   standardisation.
//! * [`ddpm`]: class-conditional denoising diffusion over flattened subjects.
//! * [`gtx`]: neighbourhood-attention graph transformer encoders and the
//!   fusion classifier.
//! * [`train`]: synthetic pretraining, frozen-encoder transfer, stratified
//!   cross-validation and baselines.
//! * [`evalsuite`]: discrimination, paired tests, calibration and clinical
//!   utility metrics.
//! * [`distshift`]: two-sample distances between real and synthetic data.

pub mod autodiff;
pub mod checkpoint;
pub mod ddpm;
pub mod distshift;
pub mod error;
pub mod evalsuite;
pub mod graphdata;
pub mod gtx;
pub mod nn;
pub mod rng;
pub mod simulate;
pub mod train;

pub use error::{Error, Result};
