//! Subjects, cohorts and the fixed per-modality graph topologies.

pub mod io;
mod subject;
mod topology;

pub use subject::*;
pub use topology::*;
