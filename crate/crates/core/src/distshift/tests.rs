use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::graphdata::Label;
use crate::simulate::{simulate_cohort, standardize, SimSpec};

fn m(rows: &[&[f64]]) -> SampleMatrix {
    SampleMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> SampleMatrix {
    let data = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal) + shift).collect();
    SampleMatrix::new(n, d, data).unwrap()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Kernel matrix written out in full.
fn brute_mmd(x: &SampleMatrix, y: &SampleMatrix, sigma: f64) -> (f64, f64) {
    let k = |a: &[f64], b: &[f64]| (-dist(a, b).powi(2) / (2.0 * sigma * sigma)).exp();
    let (nx, ny) = (x.n, y.n);
    let mut kxx = vec![vec![0.0; nx]; nx];
    let mut kyy = vec![vec![0.0; ny]; ny];
    for i in 0..nx {
        for j in 0..nx {
            kxx[i][j] = k(x.row(i), x.row(j));
        }
    }
    for i in 0..ny {
        for j in 0..ny {
            kyy[i][j] = k(y.row(i), y.row(j));
        }
    }
    let mut kxy = 0.0;
    for i in 0..nx {
        for j in 0..ny {
            kxy += k(x.row(i), y.row(j));
        }
    }
    let all = |km: &Vec<Vec<f64>>| km.iter().flatten().sum::<f64>();
    let off = |km: &Vec<Vec<f64>>| all(km) - (0..km.len()).map(|i| km[i][i]).sum::<f64>();
    let (fx, fy) = (nx as f64, ny as f64);
    let biased = all(&kxx) / (fx * fx) + all(&kyy) / (fy * fy) - 2.0 * kxy / (fx * fy);
    let unbiased = off(&kxx) / (fx * (fx - 1.0)) + off(&kyy) / (fy * (fy - 1.0)) - 2.0 * kxy / (fx * fy);
    (biased, unbiased)
}

#[test]
fn mmd_identical_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = gaussian(&mut rng, 30, 4, 0.0);
    assert!(mmd_rbf(&x, &x, None).unwrap().mmd2_biased.abs() < 1e-12);
}

#[test]
fn mmd_single_points_by_hand() {
    let r = mmd_rbf(&m(&[&[0.0]]), &m(&[&[1.0]]), Some(1.0)).unwrap();
    assert!((r.mmd2_biased - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-15);
    assert!((r.mmd2_biased - 0.7869).abs() < 1e-4);
    assert_eq!(r.mmd2_unbiased, None);
}

#[test]
fn mmd_matches_kernel_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = gaussian(&mut rng, 17, 3, 0.0);
    let y = gaussian(&mut rng, 11, 3, 0.5);
    for sigma in [0.3, 1.0, 4.0] {
        let r = mmd_rbf(&x, &y, Some(sigma)).unwrap();
        let (b, u) = brute_mmd(&x, &y, sigma);
        assert!((r.mmd2_biased - b).abs() < 1e-12);
        assert!((r.mmd2_unbiased.unwrap() - u).abs() < 1e-12);
    }
}

#[test]
fn median_heuristic_and_fallback() {
    // Pooled points 0, 1, 3: distances 1, 3, 2, median 2.
    let r = mmd_rbf(&m(&[&[0.0], &[1.0]]), &m(&[&[3.0]]), None).unwrap();
    assert_eq!(r.bandwidth_used, 2.0);
    // Four points: distances 1, 2, 4, 1, 3, 2, median (2 + 2) / 2.
    let r = mmd_rbf(&m(&[&[0.0], &[1.0]]), &m(&[&[2.0], &[4.0]]), None).unwrap();
    assert_eq!(r.bandwidth_used, 2.0);
    let r = mmd_rbf(&m(&[&[0.0], &[1.0]]), &m(&[&[3.0], &[10.0]]), None).unwrap();
    assert_eq!(r.bandwidth_used, 5.0);
    let same = m(&[&[2.0, 2.0], &[2.0, 2.0]]);
    let r = mmd_rbf(&same, &same, None).unwrap();
    assert!(r.bandwidth_fallback);
    assert_eq!(r.bandwidth_used, 1.0);
}

#[test]
fn mmd_same_distribution_within_permutation_null() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = gaussian(&mut rng, 500, 2, 0.0);
    let y = gaussian(&mut rng, 500, 2, 0.0);
    let observed = mmd_rbf(&x, &y, Some(1.0)).unwrap().mmd2_unbiased.unwrap();
    let pooled: Vec<usize> = (0..1000).collect();
    let all = SampleMatrix::new(1000, 2, [x.data.clone(), y.data.clone()].concat()).unwrap();
    let mut null = Vec::new();
    for p in 0..40 {
        let mut idx = pooled.clone();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(100 + p));
        let a = all.select(&idx[..500]);
        let b = all.select(&idx[500..]);
        null.push(mmd_rbf(&a, &b, Some(1.0)).unwrap().mmd2_unbiased.unwrap());
    }
    let mean = null.iter().sum::<f64>() / null.len() as f64;
    let sd = (null.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (null.len() - 1) as f64).sqrt();
    assert!(observed.abs() < 3.0 * sd, "{observed} vs null sd {sd}");
    // A real shift sits far outside the null.
    let z = gaussian(&mut rng, 500, 2, 0.5);
    assert!(mmd_rbf(&x, &z, Some(1.0)).unwrap().mmd2_unbiased.unwrap() > 10.0 * sd);
}

#[test]
fn frechet_identical_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = gaussian(&mut rng, 60, 5, 0.0);
    assert!(frechet_distance(&x, &x).unwrap() < 1e-8);
    // Rank-deficient covariance (n < d) still works.
    let thin = gaussian(&mut rng, 6, 20, 0.0);
    assert!(frechet_distance(&thin, &thin).unwrap() < 1e-8);
}

#[test]
fn frechet_one_dimensional_moments() {
    let c = |v: f64| DMatrix::from_element(1, 1, v);
    let d2 = frechet_from_moments(&[0.0], &c(1.0), &[1.0], &c(4.0)).unwrap();
    assert!((d2 - 2.0).abs() < 1e-12);
}

#[test]
fn frechet_diagonal_is_sum_of_coordinates() {
    let vx = [1.0, 0.25, 9.0];
    let vy = [4.0, 1.0, 1.0];
    let mx = [0.0, 1.0, -2.0];
    let my = [0.5, 1.0, 0.0];
    let d2 = frechet_from_moments(
        &mx,
        &DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&vx)),
        &my,
        &DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&vy)),
    )
    .unwrap();
    let oracle: f64 = (0..3)
        .map(|j| (mx[j] - my[j]).powi(2) + (vx[j].sqrt() - vy[j].sqrt()).powi(2))
        .sum();
    assert!((d2 - oracle).abs() < 1e-10, "{d2} vs {oracle}");
}

fn sample_cov_2d(x: &SampleMatrix) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = x.n as f64;
    let mean = [0, 1].map(|j| (0..x.n).map(|i| x.row(i)[j]).sum::<f64>() / n);
    let mut c = [[0.0; 2]; 2];
    for i in 0..x.n {
        let r = x.row(i);
        for a in 0..2 {
            for b in 0..2 {
                c[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]) / (n - 1.0);
            }
        }
    }
    (mean, c)
}

/// For 2 × 2 PSD `M`, `tr √M = √(tr M + 2√det M)`, and the matrix under the
/// root has trace `tr(Σ_X Σ_Y)` and determinant `det Σ_X · det Σ_Y`.
#[test]
fn frechet_matches_two_by_two_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..5 {
        let mut x = gaussian(&mut rng, 40, 2, 0.0);
        let y = gaussian(&mut rng, 25, 2, 0.3 * trial as f64);
        for i in 0..x.n {
            let r = x.row(i).to_vec();
            x.data[i * 2 + 1] = 0.7 * r[0] + 0.5 * r[1];
        }
        let (mx, a) = sample_cov_2d(&x);
        let (my, b) = sample_cov_2d(&y);
        let tr_ab = a[0][0] * b[0][0] + a[0][1] * b[1][0] + a[1][0] * b[0][1] + a[1][1] * b[1][1];
        let det = |c: [[f64; 2]; 2]| c[0][0] * c[1][1] - c[0][1] * c[1][0];
        let tr_root = (tr_ab + 2.0 * (det(a) * det(b)).sqrt()).sqrt();
        let oracle = (mx[0] - my[0]).powi(2) + (mx[1] - my[1]).powi(2) + a[0][0] + a[1][1] + b[0][0] + b[1][1]
            - 2.0 * tr_root;
        let d2 = frechet_distance(&x, &y).unwrap();
        assert!((d2 - oracle).abs() < 1e-10, "{d2} vs {oracle}");
    }
}

#[test]
fn frechet_rejects_indefinite_covariance() {
    let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
    let ok = DMatrix::identity(2, 2);
    assert!(matches!(
        frechet_from_moments(&[0.0, 0.0], &bad, &[0.0, 0.0], &ok),
        Err(crate::Error::Metric(_))
    ));
    let nan = DMatrix::from_element(2, 2, f64::NAN);
    assert!(frechet_from_moments(&[0.0, 0.0], &nan, &[0.0, 0.0], &ok).is_err());
}

#[test]
fn frechet_rotation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = gaussian(&mut rng, 50, 3, 0.0);
    let y = gaussian(&mut rng, 40, 3, 0.4);
    let q = DMatrix::from_fn(3, 3, |_, _| rng.sample::<f64, _>(StandardNormal)).qr().q();
    let rotate = |s: &SampleMatrix| {
        let r = DMatrix::from_row_slice(s.n, s.d, &s.data) * q.transpose();
        let rows: Vec<Vec<f64>> = (0..s.n).map(|i| r.row(i).iter().copied().collect()).collect();
        SampleMatrix::from_rows(&rows).unwrap()
    };
    let a = frechet_distance(&x, &y).unwrap();
    let b = frechet_distance(&rotate(&x), &rotate(&y)).unwrap();
    assert!((a - b).abs() < 1e-6, "{a} vs {b}");
}

#[test]
fn energy_hand_examples() {
    let e = energy_distance(&m(&[&[0.0]]), &m(&[&[1.0]])).unwrap();
    assert_eq!(e.distinct, 2.0);
    assert_eq!(e.v_statistic, 2.0);
    // Cross pairs (0,1), (2,1) both 1; the within-X distinct pairs average 2.
    let e = energy_distance(&m(&[&[0.0], &[2.0]]), &m(&[&[1.0]])).unwrap();
    assert_eq!(e.distinct, 0.0);
    assert_eq!(e.v_statistic, 1.0);
}

fn brute_energy(x: &SampleMatrix, y: &SampleMatrix) -> (f64, f64) {
    let mut cross = 0.0;
    for i in 0..x.n {
        for j in 0..y.n {
            cross += dist(x.row(i), y.row(j));
        }
    }
    cross /= (x.n * y.n) as f64;
    let within = |s: &SampleMatrix| {
        let mut total = 0.0;
        let mut pairs = 0;
        for i in 0..s.n {
            for j in 0..s.n {
                if i != j {
                    total += dist(s.row(i), s.row(j));
                    pairs += 1;
                }
            }
        }
        (
            if pairs == 0 { 0.0 } else { total / pairs as f64 },
            total / (s.n * s.n) as f64,
        )
    };
    let (ux, vx) = within(x);
    let (uy, vy) = within(y);
    (2.0 * cross - ux - uy, 2.0 * cross - vx - vy)
}

#[test]
fn energy_matches_pair_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = gaussian(&mut rng, 13, 3, 0.0);
    let y = gaussian(&mut rng, 9, 3, 1.0);
    let e = energy_distance(&x, &y).unwrap();
    let (u, v) = brute_energy(&x, &y);
    assert!((e.distinct - u).abs() < 1e-12);
    assert!((e.v_statistic - v).abs() < 1e-12);
    assert!(energy_distance(&x, &x).unwrap().v_statistic.abs() < 1e-12);
}

fn brute_ks(x: &[f64], y: &[f64]) -> f64 {
    let cdf = |s: &[f64], t: f64| s.iter().filter(|&&v| v <= t).count() as f64 / s.len() as f64;
    x.iter()
        .chain(y)
        .map(|&t| (cdf(x, t) - cdf(y, t)).abs())
        .fold(0.0, f64::max)
}

#[test]
fn ks_hand_examples() {
    assert_eq!(ks_two_sample(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap().statistic, 0.0);
    assert_eq!(ks_two_sample(&[0.0; 3], &[1.0; 3]).unwrap().statistic, 1.0);
    assert_eq!(ks_two_sample(&[1.0, 2.0], &[1.5]).unwrap().statistic, 0.5);
    let r = ks_per_feature(&m(&[&[1.0, 0.0], &[2.0, 0.0]]), &m(&[&[1.5, 0.0]])).unwrap();
    assert_eq!(r[0].statistic, 0.5);
    assert_eq!(r[1].statistic, 0.0);
    assert_eq!(r[1].p_value, 1.0);
}

#[test]
fn kolmogorov_series_agree_and_match_tables() {
    // Evaluate both branches on either side of the switch point.
    let large = |l: f64| {
        2.0 * (1..200)
            .map(|k| {
                let t = (-2.0 * (k * k) as f64 * l * l).exp();
                if k % 2 == 1 { t } else { -t }
            })
            .sum::<f64>()
    };
    for l in [0.9, 1.0, 1.1, 1.17, 1.19, 1.3, 1.5] {
        assert!((kolmogorov_sf(l) - large(l)).abs() < 1e-12, "lambda {l}");
    }
    // Standard critical values: 5% at 1.358, 1% at 1.628.
    assert!((kolmogorov_sf(1.358) - 0.05).abs() < 1e-3);
    assert!((kolmogorov_sf(1.628) - 0.01).abs() < 1e-3);
    assert_eq!(kolmogorov_sf(0.0), 1.0);
    assert!(kolmogorov_sf(0.2) > 0.999_99);
}

#[test]
fn ks_p_value_is_calibrated_under_null() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut rejections = 0;
    let trials = 400;
    for _ in 0..trials {
        let x: Vec<f64> = (0..200).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..150).map(|_| rng.sample(StandardNormal)).collect();
        if ks_two_sample(&x, &y).unwrap().p_value < 0.05 {
            rejections += 1;
        }
    }
    // The asymptotic test is slightly conservative at these sizes.
    let rate = rejections as f64 / trials as f64;
    assert!((0.015..0.08).contains(&rate), "{rate}");
}

fn small_cohort(seed: u64) -> crate::graphdata::Cohort {
    let c = simulate_cohort(&SimSpec {
        n_ad: 20,
        n_hc: 24,
        missing_rate: 0.0,
        seed,
        ..SimSpec::default()
    })
    .unwrap();
    standardize(&c, &c).unwrap()
}

#[test]
fn self_comparison_is_zero_in_both_spaces() {
    use crate::graphdata::Modality;
    use crate::gtx::{EncoderConfig, EncoderStack};
    let c = small_cohort(0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let enc = Modality::ALL.map(|m| EncoderStack::new(m, &EncoderConfig::default(), &mut rng).unwrap());
    let r = shift_report(&c, &c, Some([&enc[0], &enc[1]])).unwrap();
    assert_eq!(r.rows.len(), 6);
    for row in &r.rows {
        assert!(row.mmd2_biased.abs() < 1e-12);
        assert!(row.energy_v.abs() < 1e-12);
        assert!(row.frechet.unwrap() < 1e-6, "{:?} {:?}: {:?}", row.space, row.class, row.frechet);
        assert_eq!(row.ks_max_statistic, 0.0);
        assert_eq!(row.ks_rejected_share, 0.0);
    }
    let emb = r.row(Space::Embedding, ClassTag::Ad).unwrap();
    assert_eq!(emb.ks.len(), 64);
    assert_eq!(emb.n_real, 20);
    assert_eq!(r.row(Space::Raw, ClassTag::Pooled).unwrap().ks.len(), 294);
}

#[test]
fn label_swap_raises_class_conditional_mmd() {
    for seed in 0..5 {
        let c = simulate_cohort(&SimSpec {
            n_ad: 60,
            n_hc: 60,
            missing_rate: 0.0,
            seed,
            ..SimSpec::default()
        })
        .unwrap();
        let c = standardize(&c, &c).unwrap();
        let half: Vec<usize> = (0..c.len()).collect();
        let (a, b) = half.split_at(c.len() / 2);
        let real = c.subset(a);
        let synth = c.subset(b);
        let mut swapped = synth.clone();
        for s in &mut swapped.subjects {
            s.label = if s.label == Label::Ad { Label::Hc } else { Label::Ad };
        }
        let good = shift_report(&real, &synth, None).unwrap();
        let bad = shift_report(&real, &swapped, None).unwrap();
        for class in [ClassTag::Ad, ClassTag::Hc] {
            let g = good.row(Space::Raw, class).unwrap().mmd2_biased;
            let w = bad.row(Space::Raw, class).unwrap().mmd2_biased;
            assert!(w > g, "seed {seed} {class:?}: swapped {w} vs correct {g}");
        }
        let pooled_good = good.row(Space::Raw, ClassTag::Pooled).unwrap().mmd2_biased;
        let pooled_bad = bad.row(Space::Raw, ClassTag::Pooled).unwrap().mmd2_biased;
        assert!((pooled_good - pooled_bad).abs() < 1e-12);
    }
}

#[test]
fn missing_class_is_skipped_with_warning() {
    let c = small_cohort(1);
    let ad: Vec<usize> = (0..c.len()).filter(|&i| c.subjects[i].label == Label::Ad).collect();
    let only_ad = c.subset(&ad);
    let r = shift_report(&c, &only_ad, None).unwrap();
    assert_eq!(r.rows.len(), 2);
    assert!(r.row(Space::Raw, ClassTag::Hc).is_none());
    assert_eq!(r.warnings.len(), 1);
}

fn matrix_strategy() -> impl Strategy<Value = SampleMatrix> {
    (2usize..7, 1usize..4).prop_flat_map(|(n, d)| {
        prop::collection::vec(-5.0f64..5.0, n * d).prop_map(move |v| SampleMatrix::new(n, d, v).unwrap())
    })
}

fn pair_strategy() -> impl Strategy<Value = (SampleMatrix, SampleMatrix)> {
    (2usize..7, 2usize..7, 1usize..4).prop_flat_map(|(n, k, d)| {
        (
            prop::collection::vec(-5.0f64..5.0, n * d),
            prop::collection::vec(-5.0f64..5.0, k * d),
        )
            .prop_map(move |(a, b)| (SampleMatrix::new(n, d, a).unwrap(), SampleMatrix::new(k, d, b).unwrap()))
    })
}

proptest! {
    #[test]
    fn distances_are_symmetric((x, y) in pair_strategy()) {
        let a = mmd_rbf(&x, &y, None).unwrap();
        let b = mmd_rbf(&y, &x, None).unwrap();
        prop_assert!((a.mmd2_biased - b.mmd2_biased).abs() < 1e-12);
        let ea = energy_distance(&x, &y).unwrap();
        let eb = energy_distance(&y, &x).unwrap();
        prop_assert!((ea.distinct - eb.distinct).abs() < 1e-12);
        prop_assert!((ea.v_statistic - eb.v_statistic).abs() < 1e-12);
        let fa = frechet_distance(&x, &y).unwrap();
        let fb = frechet_distance(&y, &x).unwrap();
        prop_assert!((fa - fb).abs() < 1e-6 * (1.0 + fa));
        prop_assert!(fa >= 0.0);
        for j in 0..x.d {
            let ka = ks_two_sample(&x.column(j), &y.column(j)).unwrap();
            let kb = ks_two_sample(&y.column(j), &x.column(j)).unwrap();
            prop_assert_eq!(ka.statistic, kb.statistic);
        }
    }

    #[test]
    fn identical_inputs_give_zero(x in matrix_strategy()) {
        prop_assert!(mmd_rbf(&x, &x, None).unwrap().mmd2_biased.abs() < 1e-12);
        prop_assert!(energy_distance(&x, &x).unwrap().v_statistic.abs() < 1e-12);
        prop_assert!(frechet_distance(&x, &x).unwrap() < 1e-8);
    }

    #[test]
    fn translation_invariance((x, y) in pair_strategy(), shift in -10.0f64..10.0) {
        let move_all = |s: &SampleMatrix| SampleMatrix::new(s.n, s.d, s.data.iter().map(|v| v + shift).collect()).unwrap();
        let (x2, y2) = (move_all(&x), move_all(&y));
        let a = mmd_rbf(&x, &y, None).unwrap();
        let b = mmd_rbf(&x2, &y2, None).unwrap();
        prop_assert!((a.mmd2_biased - b.mmd2_biased).abs() < 1e-9);
        let ea = energy_distance(&x, &y).unwrap().distinct;
        let eb = energy_distance(&x2, &y2).unwrap().distinct;
        prop_assert!((ea - eb).abs() < 1e-9);
    }

    #[test]
    fn ks_matches_step_function_enumeration(
        x in prop::collection::vec(-3i32..3, 1..12),
        y in prop::collection::vec(-3i32..3, 1..12),
    ) {
        // Small integer support forces plenty of ties.
        let x: Vec<f64> = x.into_iter().map(f64::from).collect();
        let y: Vec<f64> = y.into_iter().map(f64::from).collect();
        let k = ks_two_sample(&x, &y).unwrap();
        prop_assert!((k.statistic - brute_ks(&x, &y)).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&k.p_value));
    }

    #[test]
    fn mmd_kernel_oracle_random((x, y) in pair_strategy(), sigma in 0.2f64..5.0) {
        let r = mmd_rbf(&x, &y, Some(sigma)).unwrap();
        let (b, u) = brute_mmd(&x, &y, sigma);
        prop_assert!((r.mmd2_biased - b).abs() < 1e-12);
        prop_assert!((r.mmd2_unbiased.unwrap() - u).abs() < 1e-12);
        prop_assert!(r.mmd2_biased >= -1e-12);
    }
}
