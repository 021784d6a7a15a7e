use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::PretrainConfig;
use crate::autodiff::{adam_step, AdamState, Module, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graphdata::{Cohort, Modality, ModalityGraph};
use crate::gtx::{EncoderConfig, EncoderStack, GraphBatch};
use crate::nn::{cross_entropy, Linear};
use crate::rng;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub epoch_losses: Vec<f64>,
    /// Eval-mode accuracy of encoder plus head on the synthetic set.
    pub train_accuracy: f64,
    /// Share of the larger class in the synthetic set.
    pub majority_rate: f64,
}

/// Trains one modality's encoder with a throwaway linear head to classify
/// `synth`; the head is dropped and the encoder returned.
pub fn pretrain_encoder(
    modality: Modality,
    synth: &Cohort,
    encoder: &EncoderConfig,
    config: &PretrainConfig,
    seed: u64,
) -> Result<(EncoderStack, PretrainLog)> {
    if synth.is_empty() {
        return Err(Error::contract("pretraining set is empty"));
    }
    let encoder_config = EncoderConfig {
        dropout: config.dropout,
        ..encoder.clone()
    };
    let tag = modality.index() as u64;
    let mut init = rng::stream(seed, "pretrain-init", tag);
    let mut enc = EncoderStack::new(modality, &encoder_config, &mut init)?;
    let mut head = Linear::new(enc.embedding_dim(), 2, &mut init);
    let n_enc = enc.parameters().len();
    let mut adam = {
        let mut params = enc.parameters();
        params.extend(head.parameters());
        AdamState::new(&params, config.learning_rate)
    };
    let topology = synth.layout.topology(modality);
    let labels = synth.label_indices();
    let mut log = PretrainLog::default();
    let mut order: Vec<usize> = (0..synth.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = rng::stream(seed, "pretrain-epoch", tag << 32 | epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let graphs: Vec<&ModalityGraph> = chunk.iter().map(|&i| synth.subjects[i].graph(modality)).collect();
            let batch = GraphBatch::new(topology, &graphs)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let bound_enc = enc.bind(&mut tape, true);
            let bound_head = head.bind(&mut tape, true);
            let e = enc.forward(&mut tape, &bound_enc, &batch, true, &mut rng)?;
            let logits = head.forward(&mut tape, &bound_head, e)?;
            let loss = cross_entropy(&mut tape, logits, &y)?;
            let value = tape.data(loss)[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: "pretrain",
                    epoch,
                    learning_rate: config.learning_rate,
                });
            }
            total += value * chunk.len() as f64;
            tape.backward(loss)?;
            enc.pull_grads(&tape, &bound_enc);
            head.pull_grads(&tape, &bound_head);
            let mut params = enc.parameters_mut();
            params.extend(head.parameters_mut());
            adam_step(&mut params, &mut adam)?;
        }
        log.epoch_losses.push(total / synth.len() as f64);
    }
    debug_assert_eq!(n_enc, enc.parameters().len());

    let graphs: Vec<&ModalityGraph> = synth.subjects.iter().map(|s| s.graph(modality)).collect();
    let emb = enc.embed(topology, &graphs)?;
    let mut tape = Tape::new();
    let bound = head.bind(&mut tape, false);
    let x = tape.constant(&Tensor::matrix(synth.len(), enc.embedding_dim(), emb));
    let logits = head.forward(&mut tape, &bound, x)?;
    let correct = tape
        .data(logits)
        .chunks(2)
        .zip(&labels)
        .filter(|(l, &y)| usize::from(l[1] > l[0]) == y)
        .count();
    log.train_accuracy = correct as f64 / synth.len() as f64;
    let positives = labels.iter().filter(|&&y| y == 1).count();
    log.majority_rate = positives.max(synth.len() - positives) as f64 / synth.len() as f64;
    Ok((enc, log))
}
