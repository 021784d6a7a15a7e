use gtdiff::ddpm::{sample_vectors, train_ddpm_vectors, DdpmConfig, DenoiserConfig};
use gtdiff::distshift::{mmd_rbf, SampleMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const MEANS: [[f64; 2]; 2] = [[-2.0, 0.0], [2.0, 0.0]];

fn toy(seed: u64, per_class: usize) -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..2 * per_class {
        let c = i % 2;
        for m in MEANS[c] {
            x.push(m + rng.sample::<f64, _>(StandardNormal));
        }
        y.push(c);
    }
    (x, y)
}

fn config() -> DdpmConfig {
    DdpmConfig {
        denoiser: DenoiserConfig {
            hidden: vec![64, 64],
            time_dim: 16,
            label_dim: 8,
            residual: true,
        },
        epochs: 600,
        batch_size: 64,
        learning_rate: 5e-4,
        ..DdpmConfig::default()
    }
}

fn class_rows(x: &[f64], y: &[usize], c: usize) -> SampleMatrix {
    let rows: Vec<Vec<f64>> = y.iter().enumerate().filter(|(_, &l)| l == c).map(|(i, _)| x[2 * i..2 * i + 2].to_vec()).collect();
    SampleMatrix::from_rows(&rows).unwrap()
}

#[test]
fn conditional_samples_recover_class_means() {
    let cfg = config();
    let schedule = cfg.schedule().unwrap();
    for seed in 0..3 {
        let (x, y) = toy(seed, 1000);
        let (denoiser, _) = train_ddpm_vectors(&x, 2, &y, &cfg, seed, None).unwrap();
        let real = [class_rows(&x, &y, 0), class_rows(&x, &y, 1)];
        let separation = mmd_rbf(&real[0], &real[1], None).unwrap().mmd2_biased;
        let mut pooled = Vec::new();
        for c in 0..2 {
            let s = sample_vectors(&denoiser, &schedule, c, 1000, seed + 100, cfg.reverse_variance).unwrap();
            for (k, m) in MEANS[c].iter().enumerate() {
                let mean = s.iter().skip(k).step_by(2).sum::<f64>() / 1000.0;
                assert!((mean - m).abs() < 0.3, "seed {seed} class {c} coordinate {k}: mean {mean}");
            }
            pooled.extend_from_slice(&s);
            let synth = SampleMatrix::new(1000, 2, s).unwrap();
            let within = mmd_rbf(&synth, &real[c], None).unwrap().mmd2_biased;
            assert!(within < separation, "seed {seed} class {c}: {within} vs {separation}");
        }
        let pooled = SampleMatrix::new(2000, 2, pooled).unwrap();
        let all = SampleMatrix::new(2000, 2, x.clone()).unwrap();
        let shift = mmd_rbf(&pooled, &all, None).unwrap().mmd2_biased;
        assert!(shift < separation, "seed {seed} pooled: {shift} vs {separation}");
    }
}
