use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::graphdata::flatten;

fn small_spec(seed: u64) -> SimSpec {
    SimSpec {
        n_ad: 12,
        n_hc: 20,
        seed,
        ..SimSpec::default()
    }
}

/// Cohort whose UDS rows are the given short vectors; MRI is zero.
fn toy(rows: &[Vec<f64>]) -> Cohort {
    let layout = Arc::new(GraphLayout::standard());
    let subjects = rows
        .iter()
        .enumerate()
        .map(|(i, r)| Subject {
            id: format!("t{i}"),
            label: if i % 2 == 0 { Label::Hc } else { Label::Ad },
            covariates: Covariates {
                age: 70.0,
                sex: 0,
                apoe4: false,
            },
            site_id: 0,
            mri: ModalityGraph::zeros(Modality::Mri),
            uds: ModalityGraph {
                modality: Modality::Uds,
                features: r.clone(),
            },
        })
        .collect();
    Cohort::new(subjects, Provenance::SimulatedReal, layout)
}

#[test]
fn default_spec_counts() {
    let c = simulate_cohort(&SimSpec::default()).unwrap();
    assert_eq!(c.len(), 1237);
    assert_eq!(c.count(Label::Ad), 390);
    assert_eq!(c.count(Label::Hc), 847);
    c.validate(false).unwrap();
}

#[test]
fn same_seed_is_bit_identical() {
    let a = simulate_cohort(&small_spec(3)).unwrap();
    let b = simulate_cohort(&small_spec(3)).unwrap();
    for (x, y) in a.subjects.iter().zip(&b.subjects) {
        let fx: Vec<u64> = flatten(x).iter().map(|v| v.to_bits()).collect();
        let fy: Vec<u64> = flatten(y).iter().map(|v| v.to_bits()).collect();
        assert_eq!(fx, fy);
        assert_eq!(x.id, y.id);
        assert_eq!(x.covariates, y.covariates);
    }
    let c = simulate_cohort(&small_spec(4)).unwrap();
    assert_ne!(flatten(&a.subjects[0]), flatten(&c.subjects[0]));
}

#[test]
fn missingness_only_in_uds() {
    let spec = SimSpec {
        missing_rate: 0.3,
        ..small_spec(1)
    };
    let c = simulate_cohort(&spec).unwrap();
    assert!(c.subjects.iter().all(|s| s.mri.is_finite()));
    let total = c.len() * 170;
    let rate = missing_count(&c) as f64 / total as f64;
    assert!((rate - 0.3).abs() < 0.05, "{rate}");
}

#[test]
fn invalid_missing_rate_is_rejected() {
    let spec = SimSpec {
        missing_rate: 1.0,
        ..SimSpec::default()
    };
    assert!(matches!(simulate_cohort(&spec), Err(Error::Config(_))));
}

#[test]
fn class_means_separate_with_effect_size() {
    // Mean UDS vector difference grows with the latent separation.
    let gap = |delta: f64| {
        let c = simulate_cohort(&SimSpec {
            effect_size: delta,
            missing_rate: 0.0,
            n_ad: 200,
            n_hc: 200,
            seed: 11,
            ..SimSpec::default()
        })
        .unwrap();
        let mean = |label: Label| {
            let rows: Vec<&Subject> = c.subjects.iter().filter(|s| s.label == label).collect();
            (0..170)
                .map(|j| rows.iter().map(|s| s.uds.features[j]).sum::<f64>() / rows.len() as f64)
                .collect::<Vec<f64>>()
        };
        let (a, h) = (mean(Label::Ad), mean(Label::Hc));
        a.iter().zip(&h).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    };
    let (g0, g1, g2) = (gap(0.0), gap(1.0), gap(2.0));
    assert!(g0 < g1 && g1 < g2, "{g0} {g1} {g2}");
}

#[test]
fn all_equal_neighbours_give_their_value() {
    let mut rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 0.1, 4.0]).collect();
    rows[0][1] = f64::NAN;
    let out = knn_impute(&toy(&rows), 5).unwrap();
    assert_eq!(out.subjects[0].uds.features[1], 4.0);
}

#[test]
fn complete_cohort_is_unchanged() {
    let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, -(i as f64)]).collect();
    let c = toy(&rows);
    let out = knn_impute(&c, 5).unwrap();
    assert_eq!(out.subjects, c.subjects);
}

#[test]
fn toy_hole_matches_brute_force() {
    let rows = vec![
        vec![0.0, f64::NAN],
        vec![0.5, 1.0],
        vec![-0.2, 2.0],
        vec![3.0, 7.0],
        vec![1.1, 3.0],
        vec![-4.0, 5.0],
    ];
    // Oracle: only coordinate 0 is shared with the target, so the rescaled
    // distance is |x0 - y0| * sqrt(2). Sort all donors by it and average.
    let mut cand: Vec<(f64, f64)> = rows[1..]
        .iter()
        .map(|r| ((r[0] - rows[0][0]).abs() * 2f64.sqrt(), r[1]))
        .collect();
    cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let k = 3;
    let expected = cand[..k].iter().map(|c| c.1).sum::<f64>() / k as f64;
    let out = knn_impute(&toy(&rows), k).unwrap();
    assert!((out.subjects[0].uds.features[1] - expected).abs() < 1e-12);
    assert!((expected - 2.0).abs() < 1e-12);
    let five = knn_impute(&toy(&rows), 5).unwrap();
    assert!((five.subjects[0].uds.features[1] - 18.0 / 5.0).abs() < 1e-12);
}

#[test]
fn feature_missing_everywhere_names_feature() {
    let rows: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64, f64::NAN]).collect();
    match knn_impute(&toy(&rows), 2) {
        Err(Error::Imputation { feature }) => assert_eq!(feature, 1),
        other => panic!("{other:?}"),
    }
}

#[test]
fn donor_imputation_uses_only_donors() {
    let donors = toy(&[vec![0.0, 10.0], vec![0.1, 10.0], vec![5.0, 10.0]]);
    let target = toy(&[vec![0.0, f64::NAN], vec![0.05, -100.0]]);
    let out = knn_impute_from(&target, &donors, 2).unwrap();
    assert_eq!(out.subjects[0].uds.features[1], 10.0);
    assert_eq!(out.subjects[1].uds.features[1], -100.0);
}

fn complete(seed: u64) -> Cohort {
    knn_impute(&simulate_cohort(&small_spec(seed)).unwrap(), 5).unwrap()
}

#[test]
fn constant_feature_becomes_zero() {
    let mut c = complete(2);
    for s in &mut c.subjects {
        s.uds.features[7] = 3.5;
    }
    let out = standardize(&c, &c).unwrap();
    assert!(out.subjects.iter().all(|s| s.uds.features[7] == 0.0));
}

#[test]
fn self_standardisation_has_unit_moments() {
    let c = complete(5);
    let out = standardize(&c, &c).unwrap();
    let n = out.len() as f64;
    for j in 0..170 {
        let m = out.subjects.iter().map(|s| s.uds.features[j]).sum::<f64>() / n;
        let v = out.subjects.iter().map(|s| (s.uds.features[j] - m).powi(2)).sum::<f64>() / n;
        assert!(m.abs() < 1e-9 && (v.sqrt() - 1.0).abs() < 1e-9, "col {j}: {m} {v}");
    }
    for s in &out.subjects {
        for col in 0..2 {
            let xs: Vec<f64> = (0..62).map(|u| s.mri.features[u * 2 + col]).collect();
            let m = xs.iter().sum::<f64>() / 62.0;
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 62.0;
            assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-9);
        }
    }
    let stats = out.standardization.as_ref().unwrap();
    assert_eq!(stats.fitted_on.len(), c.len());
}

#[test]
fn holdout_uses_train_statistics() {
    let train = complete(6);
    let mut holdout = complete(7);
    for s in &mut holdout.subjects {
        for x in &mut s.uds.features {
            *x = *x * 2.0 + 1.0;
        }
    }
    let with_train = standardize(&train, &holdout).unwrap();
    let with_self = standardize(&holdout, &holdout).unwrap();
    assert_ne!(with_train.subjects[0].uds.features, with_self.subjects[0].uds.features);
    // Recompute the train statistics independently and check one value.
    let j = 3;
    let n = train.len() as f64;
    let m = train.subjects.iter().map(|s| s.uds.features[j]).sum::<f64>() / n;
    let sd = (train.subjects.iter().map(|s| (s.uds.features[j] - m).powi(2)).sum::<f64>() / n).sqrt();
    let expect = (holdout.subjects[0].uds.features[j] - m) / sd;
    assert!((with_train.subjects[0].uds.features[j] - expect).abs() < 1e-12);
}

#[test]
fn standardising_missing_values_is_an_error() {
    let c = simulate_cohort(&SimSpec {
        missing_rate: 0.2,
        ..small_spec(1)
    })
    .unwrap();
    assert!(matches!(standardize(&c, &c), Err(Error::Contract(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn imputation_is_idempotent_and_keeps_observed(
        seed in 0u64..1000,
        rate in 0.0f64..0.4,
        k in 1usize..7,
    ) {
        let c = simulate_cohort(&SimSpec { n_ad: 6, n_hc: 8, missing_rate: rate, seed, ..SimSpec::default() }).unwrap();
        let once = knn_impute(&c, k).unwrap();
        prop_assert_eq!(missing_count(&once), 0);
        for (a, b) in c.subjects.iter().zip(&once.subjects) {
            for (x, y) in a.uds.features.iter().zip(&b.uds.features) {
                if !x.is_nan() {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
        let twice = knn_impute(&once, k).unwrap();
        prop_assert_eq!(&twice.subjects, &once.subjects);
    }

    #[test]
    fn simulation_is_deterministic(seed in 0u64..u64::MAX) {
        let spec = SimSpec { n_ad: 2, n_hc: 3, seed, ..SimSpec::default() };
        let a = simulate_cohort(&spec).unwrap();
        let b = simulate_cohort(&spec).unwrap();
        for (x, y) in a.subjects.iter().zip(&b.subjects) {
            let fx: Vec<u64> = flatten(x).iter().map(|v| v.to_bits()).collect();
            let fy: Vec<u64> = flatten(y).iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(fx, fy);
        }
    }
}
