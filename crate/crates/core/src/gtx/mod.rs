//! Graph-transformer encoders with 1-hop attention, graph pooling and the
//! fusion classifier.

mod encoder;
mod fusion;
mod layer;

pub use encoder::{EncoderConfig, EncoderStack, GraphBatch, Pooling};
pub use fusion::{fuse_and_classify, fused_embeddings, FusionClassifier, FUSED_DIM};
pub use layer::{attention_weights, GtLayer};

#[cfg(test)]
mod tests;
