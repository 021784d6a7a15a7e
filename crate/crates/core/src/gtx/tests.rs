use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck::check_gradients;
use crate::autodiff::{Module, Tape, Tensor};
use crate::error::Error;
use crate::graphdata::{build_mri_topology, Modality, ModalityGraph, MriGridSpec, Topology};
use crate::nn::cross_entropy;

fn scalar_layer(wq: f64, bq: f64, wk: f64, bk: f64, wv: f64, bv: f64, wo: f64, bo: f64) -> GtLayer {
    let t = |x: f64| Tensor::vector(vec![x]).with_requires_grad(true);
    let m = |x: f64| Tensor::matrix(1, 1, vec![x]).with_requires_grad(true);
    GtLayer {
        heads: 1,
        head_dim: 1,
        wq: m(wq),
        bq: t(bq),
        wk: m(wk),
        bk: t(bk),
        wv: m(wv),
        bv: t(bv),
        wo: m(wo),
        bo: t(bo),
    }
}

fn path2() -> Topology {
    Topology::from_edges(2, &[(0, 1)]).unwrap()
}

fn small_config() -> EncoderConfig {
    EncoderConfig {
        heads: 2,
        hidden: 4,
        embedding: 4,
        dropout: 0.3,
        pooling: Pooling::Max,
    }
}

fn random_features(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand::Rng;
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn zero_query_key_gives_uniform_weights() {
    let layer = scalar_layer(0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0);
    let w = attention_weights(&layer, &path2(), 0, &[0.7, -1.3]).unwrap();
    assert_eq!(w, vec![vec![0.5, 0.5]]);
}

#[test]
fn isolated_node_attends_to_itself() {
    let t = Topology::from_edges(3, &[(0, 1)]).unwrap();
    let layer = scalar_layer(0.4, 0.1, -0.2, 0.3, 1.0, 0.0, 1.0, 0.0);
    let w = attention_weights(&layer, &t, 2, &[1.0, 2.0, 3.0]).unwrap();
    assert_eq!(w, vec![vec![1.0]]);
}

#[test]
fn hand_set_scores_give_quarter_and_three_quarters() {
    // q_0 = 1; k_0 = ln3·1 − ln3 = 0; k_1 = ln3·2 − ln3 = ln3.
    let ln3 = 3f64.ln();
    let layer = scalar_layer(1.0, 0.0, ln3, -ln3, 1.0, 0.0, 1.0, 0.0);
    let w = attention_weights(&layer, &path2(), 0, &[1.0, 2.0]).unwrap();
    assert!((w[0][0] - 0.25).abs() < 1e-12 && (w[0][1] - 0.75).abs() < 1e-12);
}

#[test]
fn single_node_identity_layer_passes_values_through() {
    let t = Topology::from_edges(1, &[]).unwrap();
    let eye = |n: usize| {
        let mut d = vec![0.0; n * n];
        (0..n).for_each(|i| d[i * n + i] = 1.0);
        Tensor::matrix(n, n, d)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut layer = GtLayer::new(2, 1, 2, 2, &mut rng);
    layer.wv = eye(2);
    layer.wo = eye(2);
    let out = layer.layer_forward(&t, &[0.3, -4.0]).unwrap();
    assert_eq!(out, vec![0.3, -4.0]);
}

#[test]
fn two_node_path_matches_hand_computation() {
    let (wq, bq, wk, bk, wv, bv, wo, bo) = (0.5, 0.1, -0.3, 0.2, 2.0, -1.0, 1.5, 0.25);
    let layer = scalar_layer(wq, bq, wk, bk, wv, bv, wo, bo);
    let x = [1.0f64, -2.0];
    let q: Vec<f64> = x.iter().map(|v| wq * v + bq).collect();
    let k: Vec<f64> = x.iter().map(|v| wk * v + bk).collect();
    let v: Vec<f64> = x.iter().map(|a| wv * a + bv).collect();
    let a0 = 1.0 / (1.0 + (q[0] * k[1] - q[0] * k[0]).exp());
    let a1 = 1.0 / (1.0 + (q[1] * k[0] - q[1] * k[1]).exp());
    let expected = [
        wo * (a0 * v[0] + (1.0 - a0) * v[1]) + bo,
        wo * (a1 * v[1] + (1.0 - a1) * v[0]) + bo,
    ];
    let out = layer.layer_forward(&path2(), &x).unwrap();
    for (o, e) in out.iter().zip(expected) {
        assert!((o - e).abs() < 1e-12, "{o} vs {e}");
    }
}

#[test]
fn wrong_feature_dim_is_contract_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let layer = GtLayer::new(2, 1, 2, 2, &mut rng);
    assert!(matches!(layer.layer_forward(&path2(), &[1.0, 2.0]), Err(Error::Contract(_))));
}

#[test]
fn layer_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = Topology::from_edges(4, &[(0, 1), (1, 2), (2, 3), (0, 2)]).unwrap();
    let layer = GtLayer::new(3, 2, 2, 3, &mut rng);
    let x = Tensor::matrix(4, 3, random_features(&mut rng, 12));
    let csr = Arc::new(t.batched_csr(1));
    let mut inputs: Vec<Tensor> = layer.parameters().into_iter().cloned().collect();
    inputs.push(x);
    let report = check_gradients(&inputs, 1e-5, |tape, v| {
        let out = layer.forward(tape, &v[..8], v[8], Arc::clone(&csr))?;
        Ok(tape.sum(out))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn stack_has_three_layers_and_32_dim_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let e = EncoderStack::new(Modality::Mri, &EncoderConfig::default(), &mut rng).unwrap();
    assert_eq!(e.layers.len(), 3);
    assert_eq!(e.embedding_dim(), 32);
    assert_eq!((e.layers[0].heads, e.layers[0].head_dim), (4, 16));
    assert_eq!((e.layers[2].heads, e.layers[2].head_dim), (4, 8));
    let topo = build_mri_topology(&MriGridSpec::default()).unwrap();
    let g = ModalityGraph::new(Modality::Mri, random_features(&mut rng, 124)).unwrap();
    assert_eq!(e.encode(&topo, &g).unwrap().len(), 32);
}

#[test]
fn single_node_embedding_equals_node_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = Topology::from_edges(1, &[]).unwrap();
    let e = EncoderStack::with_input_dim(Modality::Uds, 1, &small_config(), &mut rng).unwrap();
    let batch = GraphBatch::from_features(&t, 1, vec![0.8]);
    let mut tape = Tape::new();
    let bound = e.bind(&mut tape, false);
    let nodes = e.node_features(&mut tape, &bound, &batch, false, &mut rng).unwrap();
    let pooled = e.forward(&mut tape, &bound, &batch, false, &mut rng).unwrap();
    assert_eq!(tape.data(nodes), tape.data(pooled));
}

#[test]
fn pooled_embedding_is_brute_force_max_after_duplication() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let e = EncoderStack::with_input_dim(Modality::Uds, 1, &small_config(), &mut rng).unwrap();
    let base = Topology::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
    // Node 3 copies node 2: same feature, same neighbour (1).
    let dup = Topology::from_edges(4, &[(0, 1), (1, 2), (1, 3)]).unwrap();
    let xb = vec![0.3, -0.9, 1.4];
    let xd = vec![0.3, -0.9, 1.4, 1.4];
    let run = |t: &Topology, x: &[f64]| {
        let batch = GraphBatch::from_features(t, 1, x.to_vec());
        let mut tape = Tape::new();
        let bound = e.bind(&mut tape, false);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let nodes = e.node_features(&mut tape, &bound, &batch, false, &mut r).unwrap();
        let pooled = e.forward(&mut tape, &bound, &batch, false, &mut r).unwrap();
        (tape.data(nodes).to_vec(), tape.data(pooled).to_vec())
    };
    let (_, pb) = run(&base, &xb);
    let (nd, pd) = run(&dup, &xd);
    let dim = e.embedding_dim();
    for j in 0..dim {
        let col: Vec<f64> = (0..4).map(|u| nd[u * dim + j]).collect();
        let brute = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(pd[j], brute);
        let dominates = col.iter().any(|&c| c >= pb[j]);
        assert_eq!(pd[j] >= pb[j], dominates);
    }
    // The copy and its original see identical neighbourhoods.
    assert_eq!(&nd[2 * dim..3 * dim], &nd[3 * dim..4 * dim]);
}

#[test]
fn fusion_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = FusionClassifier::new(FUSED_DIM, &mut rng);
    let a = random_features(&mut rng, 32);
    let b = random_features(&mut rng, 32);
    let p = fuse_and_classify(&c, &[&a, &b]).unwrap();
    assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
    let q = fuse_and_classify(&c, &[&b, &a]).unwrap();
    assert_ne!(p, q);
    assert!(matches!(fuse_and_classify(&c, &[&a]), Err(Error::Contract(_))));

    let mut z = c.clone();
    for p in z.parameters_mut() {
        p.data_mut().fill(0.0);
    }
    assert_eq!(fuse_and_classify(&z, &[&a, &b]).unwrap(), [0.5, 0.5]);
}

#[test]
fn full_model_gradient_check_on_two_subjects() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = small_config();
    let t_mri = Topology::from_edges(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
    let t_uds = Topology::from_edges(3, &[(0, 1)]).unwrap();
    let mut enc_mri = EncoderStack::with_input_dim(Modality::Mri, 2, &cfg, &mut rng).unwrap();
    let mut enc_uds = EncoderStack::with_input_dim(Modality::Uds, 1, &cfg, &mut rng).unwrap();
    let mut head = FusionClassifier::with_sizes(&[8, 6, 2], &mut rng);
    // Zero biases put dead nodes exactly on the ReLU kink; move off it.
    for p in enc_mri
        .parameters_mut()
        .into_iter()
        .chain(enc_uds.parameters_mut())
        .chain(head.parameters_mut())
    {
        if p.shape().len() == 1 {
            let n = p.numel();
            p.data_mut().copy_from_slice(&random_features(&mut rng, n));
        }
    }
    let b_mri = GraphBatch::from_features(&t_mri, 2, random_features(&mut rng, 16));
    let b_uds = GraphBatch::from_features(&t_uds, 1, random_features(&mut rng, 6));
    let mut inputs: Vec<Tensor> = Vec::new();
    inputs.extend(enc_mri.parameters().into_iter().cloned());
    inputs.extend(enc_uds.parameters().into_iter().cloned());
    inputs.extend(head.parameters().into_iter().cloned());
    let (n1, n2) = (enc_mri.parameters().len(), enc_uds.parameters().len());
    let report = check_gradients(&inputs, 1e-5, |tape, v| {
        let mut r = ChaCha8Rng::seed_from_u64(42);
        let a = enc_mri.forward(tape, &v[..n1], &b_mri, true, &mut r)?;
        let b = enc_uds.forward(tape, &v[n1..n1 + n2], &b_uds, true, &mut r)?;
        let fused = tape.concat(&[a, b])?;
        let logits = head.forward(tape, &v[n1 + n2..], fused)?;
        cross_entropy(tape, logits, &[0, 1])
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn eval_dropout_matches_zero_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut e = EncoderStack::with_input_dim(Modality::Uds, 1, &small_config(), &mut rng).unwrap();
    let t = path2();
    let g = ModalityGraph {
        modality: Modality::Uds,
        features: vec![0.2, -0.4],
    };
    let with_rate = e.encode(&t, &g).unwrap();
    e.config.dropout = 0.0;
    assert_eq!(with_rate, e.encode(&t, &g).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn attention_weights_form_distributions(seed in 0u64..10_000, u in 0usize..62) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let topo = build_mri_topology(&MriGridSpec::default()).unwrap();
        let layer = GtLayer::new(2, 4, 16, 64, &mut rng);
        let x = random_features(&mut rng, 124);
        for head in attention_weights(&layer, &topo, u, &x).unwrap() {
            prop_assert_eq!(head.len(), topo.neighbors(u).len());
            prop_assert!(head.iter().all(|&a| a >= 0.0));
            prop_assert!((head.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn far_nodes_do_not_affect_features(seed in 0u64..10_000, u in 0usize..62, v in 0usize..62) {
        let topo = build_mri_topology(&MriGridSpec::default()).unwrap();
        prop_assume!(!topo.ball(u, 3).contains(&v));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = EncoderStack::new(Modality::Mri, &small_config(), &mut rng).unwrap();
        let x = random_features(&mut rng, 124);
        let mut y = x.clone();
        y[2 * v] += 5.0;
        y[2 * v + 1] -= 3.0;
        let rows = |f: Vec<f64>| {
            let batch = GraphBatch::from_features(&topo, 2, f);
            let mut tape = Tape::new();
            let bound = e.bind(&mut tape, false);
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let h = e.node_features(&mut tape, &bound, &batch, false, &mut r).unwrap();
            tape.data(h).to_vec()
        };
        let (a, b) = (rows(x), rows(y));
        let d = e.embedding_dim();
        prop_assert_eq!(&a[u * d..(u + 1) * d], &b[u * d..(u + 1) * d]);
    }

    #[test]
    fn embedding_is_permutation_invariant(seed in 0u64..10_000) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let topo = Topology::from_edges(7, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (0, 6), (1, 4)]).unwrap();
        let e = EncoderStack::with_input_dim(Modality::Mri, 2, &small_config(), &mut rng).unwrap();
        let x = random_features(&mut rng, 14);
        let mut perm: Vec<usize> = (0..7).collect();
        perm.shuffle(&mut rng);
        let mut px = vec![0.0; 14];
        for (old, &new) in perm.iter().enumerate() {
            px[2 * new..2 * new + 2].copy_from_slice(&x[2 * old..2 * old + 2]);
        }
        let pt = topo.permuted(&perm).unwrap();
        let a = e.embed(&topo, &[&ModalityGraph { modality: Modality::Mri, features: x }]).unwrap();
        let b = e.embed(&pt, &[&ModalityGraph { modality: Modality::Mri, features: px }]).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() < 1e-10);
        }
    }
}

