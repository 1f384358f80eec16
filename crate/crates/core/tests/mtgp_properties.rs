mod common;

use std::time::Instant;

use common::*;
use dkmgp::dataset::{
    DatasetSource, NormalizationStats, ResidualDataset, ResidualSample, FEATURE_DIM, TARGET_DIM,
};
use dkmgp::deep_kernel::MlpConfig;
use dkmgp::mtgp::baseline::{per_task_baseline_predict, per_task_baseline_train, BaselineConfig};
use dkmgp::mtgp::checkpoint::{load_checkpoint, save_checkpoint};
use dkmgp::mtgp::{
    elbo, elbo_gradients, jittered_cholesky, kernel_matrix, kl_gaussians, lmc_cross_covariance,
    predictive_distribution, train, DkmgpModel, KernelHyper, LmcStructure, MtgpConfig,
    TrainOptions, DEFAULT_JITTER,
};
use dkmgp::Error;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn dataset_from(
    inputs: Vec<[f64; FEATURE_DIM]>,
    targets: Vec<[f64; TARGET_DIM]>,
    horizon: usize,
) -> ResidualDataset {
    let n = inputs.len();
    ResidualDataset::from_raw(
        horizon,
        DatasetSource {
            first_anchor: 0,
            log_len: n + horizon,
            dt: 0.04,
        },
        inputs,
        targets,
        NormalizationStats::identity(FEATURE_DIM),
        NormalizationStats::identity(TARGET_DIM),
    )
    .unwrap()
}

fn random_input(r: &mut impl Rng) -> [f64; FEATURE_DIM] {
    std::array::from_fn(|_| r.random_range(-1.5..1.5))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn elbo_gradients_match_central_differences(seed in 0u64..10_000, latents in 1usize..4) {
        let model = random_model(&[9, 4, 3], 3, latents, 4, seed);
        let batch = random_batch(6, seed);
        let (_, g) = elbo_gradients(&model, &batch, 40).unwrap();
        let base = model.flatten();
        let layout = model.layout();
        let h = 1e-6;
        for k in 0..base.len() {
            let mut probe = model.clone();
            let mut p = base.clone();
            p[k] += h;
            probe.unflatten(&p).unwrap();
            let up = elbo(&probe, &batch, 40).unwrap().total;
            p[k] -= 2.0 * h;
            probe.unflatten(&p).unwrap();
            let down = elbo(&probe, &batch, 40).unwrap().total;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - g[k]).abs();
            prop_assert!(
                err <= 1e-6 || err <= 1e-4 * fd.abs().max(g[k].abs()),
                "{} [{k}]: analytic {} vs fd {fd}", layout.locate(k).unwrap().name, g[k]
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn multitask_prior_covariance_is_psd(seed in 0u64..10_000, points in 1usize..=30) {
        let model = random_model(&[9, 6, 3], 3, 3, 4, seed);
        let mut r = rng(seed);
        let xs: Vec<[f64; FEATURE_DIM]> = (0..points).map(|_| random_input(&mut r)).collect();
        let t = model.num_tasks();
        let n = points * t;
        let cov = DMatrix::from_fn(n, n, |i, j| {
            lmc_cross_covariance(&model, i % t, j % t, &xs[i / t], &xs[j / t]).unwrap()
        });
        prop_assert!((&cov - cov.transpose()).amax() <= 1e-12);
        let min = SymmetricEigen::new(cov).eigenvalues.min();
        prop_assert!(min >= -1e-8, "min eigenvalue {min}");
    }

    #[test]
    fn kl_is_nonnegative_and_zero_at_the_prior(seed in 0u64..10_000, m in 1usize..8) {
        let mut r = rng(seed);
        let pts = DMatrix::from_fn(m, 3, |_, _| r.random_range(-2.0..2.0));
        let k = kernel_matrix(&KernelHyper::new(&[1.0, 0.7, 1.3], 1.2), &pts, &pts);
        let lk = jittered_cholesky(&k, DEFAULT_JITTER).unwrap().l();
        let mean = DVector::from_fn(m, |_, _| r.random_range(-1.0..1.0));
        let mut chol = DMatrix::zeros(m, m);
        for c in 0..m {
            chol[(c, c)] = r.random_range(0.1..1.5);
            for row in c + 1..m {
                chol[(row, c)] = r.random_range(-0.5..0.5);
            }
        }
        prop_assert!(kl_gaussians(&mean, &chol, &lk).unwrap() >= 0.0);
        let at_prior = kl_gaussians(&DVector::zeros(m), &lk, &lk).unwrap();
        prop_assert!(at_prior.abs() <= 1e-10, "{at_prior}");
    }

    #[test]
    fn predictive_variance_is_at_least_the_noise(seed in 0u64..10_000) {
        let model = random_model(&[9, 5, 3], 3, 2, 5, seed);
        let mut r = rng(seed ^ 1);
        let p = predictive_distribution(&model, &random_input(&mut r)).unwrap();
        for t in 0..TARGET_DIM {
            prop_assert!(p.var_normalized[t] >= model.noise.variance(t), "task {t}");
            prop_assert!(p.variance[t] >= model.noise.variance(t));
        }
    }
}

/// `log N(y | 0, K + noise I)` by dense Cholesky.
fn exact_log_marginal(k: &DMatrix<f64>, y: &DVector<f64>, noise: f64) -> f64 {
    let n = y.len();
    let mut c = k.clone();
    for i in 0..n {
        c[(i, i)] += noise;
    }
    let chol = c.cholesky().unwrap();
    let alpha = chol.solve(y);
    let logdet: f64 = 2.0 * (0..n).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
    -0.5 * y.dot(&alpha) - 0.5 * logdet - 0.5 * n as f64 * LN_2PI
}

fn single_task_model(xs: &[[f64; FEATURE_DIM]], seed: u64) -> DkmgpModel {
    let mlp = dkmgp::deep_kernel::mlp_init(&MlpConfig::new(&[9, 4, 2], seed)).unwrap();
    let inputs = DMatrix::from_fn(FEATURE_DIM, xs.len(), |d, i| xs[i][d]);
    let z = mlp.forward_batch(&inputs).unwrap().output().transpose();
    DkmgpModel::from_parts(
        mlp,
        z,
        LmcStructure {
            mixing: DMatrix::from_element(1, 1, 0.9),
        },
        DEFAULT_JITTER,
        NormalizationStats::identity(FEATURE_DIM),
        NormalizationStats::identity(1),
        1,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn elbo_never_exceeds_exact_marginal_likelihood(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let xs: Vec<[f64; FEATURE_DIM]> = (0..8).map(|_| random_input(&mut r)).collect();
        let mut model = single_task_model(&xs, seed);
        let m = xs.len();
        model.variational.means[0] = DVector::from_fn(m, |_, _| r.random_range(-1.0..1.0));
        for c in 0..m {
            model.variational.chols[0][(c, c)] = r.random_range(0.05..1.0);
            for row in c + 1..m {
                model.variational.chols[0][(row, c)] = r.random_range(-0.2..0.2);
            }
        }
        model.noise.log_variance[0] = r.random_range(-3.0..-0.5);
        let batch: Vec<ResidualSample> = xs
            .iter()
            .map(|&input| ResidualSample { input, target: [r.random_range(-1.0..1.0), 0.0, 0.0], horizon: 1 })
            .collect();
        let value = elbo(&model, &batch, m).unwrap().total;

        let z = &model.variational.inducing;
        let a2 = model.lmc.mixing[(0, 0)].powi(2);
        let k = kernel_matrix(&model.kernels[0], z, z) * a2;
        let y = DVector::from_iterator(m, batch.iter().map(|s| s.target[0]));
        let lml = exact_log_marginal(&k, &y, model.noise.variance(0));
        prop_assert!(value <= lml + 1e-6, "elbo {value} vs exact {lml}");
    }
}

#[test]
fn doubling_noise_on_zero_targets_follows_the_closed_form() {
    let mut model = random_model(&[9, 4, 3], 3, 2, 4, 21);
    model.variational.means.iter_mut().for_each(|m| m.fill(0.0));
    let mut r = rng(5);
    let batch: Vec<ResidualSample> = (0..10)
        .map(|_| ResidualSample {
            input: random_input(&mut r),
            target: [0.0; TARGET_DIM],
            horizon: 1,
        })
        .collect();
    let closed_form = |model: &DkmgpModel| -> f64 {
        let mut total = 0.0;
        for s in &batch {
            let p = predictive_distribution(model, &s.input).unwrap();
            for t in 0..TARGET_DIM {
                let noise = model.noise.variance(t);
                let latent_var = p.var_normalized[t] - noise;
                let quad = p.mean_normalized[t].powi(2) + latent_var;
                total += -0.5 * (LN_2PI + noise.ln()) - quad / (2.0 * noise);
            }
        }
        total
    };
    let before = elbo(&model, &batch, batch.len()).unwrap().expected_loglik;
    assert!((before - closed_form(&model)).abs() <= 1e-8 * before.abs());
    let mut doubled = model.clone();
    doubled
        .noise
        .log_variance
        .iter_mut()
        .for_each(|v| *v += 2f64.ln());
    let after = elbo(&doubled, &batch, batch.len()).unwrap().expected_loglik;
    assert!((after - closed_form(&doubled)).abs() <= 1e-8 * after.abs());
    assert!(
        (before - after - (closed_form(&model) - closed_form(&doubled))).abs()
            <= 1e-8 * before.abs()
    );
}

/// Three correlated tasks from two known latent functions plus Gaussian noise.
fn generative_task(n: usize, noise_std: f64, seed: u64) -> ResidualDataset {
    let mixing = [[1.0, 0.3], [0.8, -0.5], [-0.4, 1.0]];
    let mut r = rng(seed);
    let noise = Normal::new(0.0, noise_std).unwrap();
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let x = random_input(&mut r);
        let g = [
            (1.5 * x[0]).sin() + 0.5 * x[1],
            (x[2] + 0.5 * x[3]).cos() - 0.3 * x[0],
        ];
        targets.push(std::array::from_fn(|t| {
            mixing[t][0] * g[0] + mixing[t][1] * g[1] + noise.sample(&mut r)
        }));
        inputs.push(x);
    }
    dataset_from(inputs, targets, 1)
}

fn generative_options(epochs: usize, seed: u64) -> TrainOptions {
    TrainOptions {
        learning_rate: 0.01,
        batch_size: 64,
        epochs,
        final_lr_fraction: 0.1,
        seed,
        ..TrainOptions::default()
    }
}

fn generative_model(train_set: &ResidualDataset, seed: u64) -> DkmgpModel {
    let cfg = MtgpConfig {
        num_latents: 3,
        num_inducing: 20,
        ..MtgpConfig::default()
    };
    DkmgpModel::new(&MlpConfig::new(&[9, 16, 8, 3], seed), &cfg, train_set, seed).unwrap()
}

#[test]
fn recovers_correlated_generative_tasks() {
    let noise_std = 0.1;
    let train_set = generative_task(600, noise_std, 1);
    let held_out = generative_task(200, noise_std, 2);
    let (model, history) = train(
        generative_model(&train_set, 3),
        &train_set,
        &generative_options(600, 4),
    )
    .unwrap();

    let elbos: Vec<f64> = history.iter().map(|h| h.elbo).collect();
    assert!(elbos.last().unwrap() > elbos.first().unwrap());
    let ma: Vec<f64> = elbos
        .windows(50)
        .map(|w| w.iter().sum::<f64>() / 50.0)
        .collect();
    for (i, w) in ma.windows(2).enumerate() {
        assert!(
            w[1] >= w[0],
            "moving average drops after epoch {}: {} -> {}",
            i + 50,
            w[0],
            w[1]
        );
    }

    for t in 0..TARGET_DIM {
        let se: f64 = held_out
            .samples
            .iter()
            .map(|s| {
                let p = predictive_distribution(&model, &s.input).unwrap();
                (p.mean[t] - s.target[t]).powi(2)
            })
            .sum();
        let rmse = (se / held_out.len() as f64).sqrt();
        assert!(rmse < 1.5 * noise_std, "task {t}: held-out rmse {rmse}");
    }
}

#[test]
fn training_is_deterministic_and_moves_parameters() {
    let train_set = generative_task(120, 0.1, 7);
    let opts = generative_options(3, 9);
    let start = generative_model(&train_set, 8);
    let (a, ha) = train(start.clone(), &train_set, &opts).unwrap();
    let (b, hb) = train(start.clone(), &train_set, &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        ha.iter().map(|h| h.elbo.to_bits()).collect::<Vec<_>>(),
        hb.iter().map(|h| h.elbo.to_bits()).collect::<Vec<_>>()
    );

    let (one, h1) = train(
        start.clone(),
        &train_set,
        &TrainOptions {
            epochs: 1,
            ..opts.clone()
        },
    )
    .unwrap();
    assert_eq!(h1.len(), 1);
    let delta: f64 = one
        .flatten()
        .iter()
        .zip(start.flatten())
        .map(|(x, y)| (x - y).abs())
        .sum();
    assert!(delta > 0.0);

    let (other, _) = train(start, &train_set, &TrainOptions { seed: 10, ..opts }).unwrap();
    assert_ne!(other, a);
}

#[test]
fn frozen_blocks_stay_fixed() {
    let train_set = generative_task(80, 0.1, 11);
    let start = generative_model(&train_set, 12);
    let mut opts = generative_options(2, 13);
    opts.trainable.mlp = false;
    opts.trainable.inducing = false;
    let (model, _) = train(start.clone(), &train_set, &opts).unwrap();
    assert_eq!(model.mlp, start.mlp);
    assert_eq!(model.variational.inducing, start.variational.inducing);
    assert_ne!(model.variational.means, start.variational.means);
}

#[test]
fn invalid_training_options_are_rejected() {
    let train_set = generative_task(40, 0.1, 1);
    let start = generative_model(&train_set, 1);
    for opts in [
        TrainOptions {
            batch_size: 0,
            ..generative_options(1, 0)
        },
        TrainOptions {
            learning_rate: 0.0,
            ..generative_options(1, 0)
        },
        TrainOptions {
            final_lr_fraction: 0.0,
            ..generative_options(1, 0)
        },
        TrainOptions {
            final_lr_fraction: 1.5,
            ..generative_options(1, 0)
        },
    ] {
        assert!(matches!(
            train(start.clone(), &train_set, &opts),
            Err(Error::InvalidArgument(_))
        ));
    }
}

/// Textbook dense GP posterior for one task.
fn dense_posterior(
    xs: &[[f64; FEATURE_DIM]],
    y: &[f64],
    x: &[f64; FEATURE_DIM],
    cfg: &BaselineConfig,
) -> (f64, f64) {
    let k = |a: &[f64], b: &[f64]| {
        let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum();
        cfg.signal_variance * (-0.5 * d2 / cfg.lengthscale.powi(2)).exp()
    };
    let n = xs.len();
    let mut kxx = DMatrix::from_fn(n, n, |i, j| k(&xs[i], &xs[j]));
    for i in 0..n {
        kxx[(i, i)] += cfg.noise_variance;
    }
    let ks = DVector::from_fn(n, |i, _| k(&xs[i], x));
    let inv = kxx.try_inverse().unwrap();
    let mean = ks.dot(&(&inv * DVector::from_column_slice(y)));
    let var = cfg.signal_variance - ks.dot(&(&inv * &ks));
    (mean, var)
}

#[test]
fn baseline_matches_dense_textbook_posterior() {
    let ds = generative_task(40, 0.1, 17);
    let cfg = BaselineConfig::default();
    let base = per_task_baseline_train(&ds, &cfg).unwrap();
    let xs: Vec<_> = ds.samples.iter().map(|s| s.input).collect();
    let mut r = rng(3);
    for _ in 0..10 {
        let x = random_input(&mut r);
        let p = per_task_baseline_predict(&base, &x).unwrap();
        for t in 0..TARGET_DIM {
            let y: Vec<f64> = ds.samples.iter().map(|s| s.target[t]).collect();
            let (mean, var) = dense_posterior(&xs, &y, &x, &cfg);
            assert!(
                (p.mean[t] - mean).abs() <= 1e-8 * mean.abs().max(1.0),
                "task {t}"
            );
            let (gm, gv) = base.tasks()[t].predict(&x);
            assert!((gm - mean).abs() <= 1e-8 * mean.abs().max(1.0));
            assert!((gv - var).abs() <= 1e-8);
        }
        assert!(p.variance.iter().all(|v| v.is_nan()));
    }
}

#[test]
fn baseline_rejects_multistep_data() {
    let mut ds = generative_task(10, 0.1, 1);
    ds.horizon = 5;
    assert!(matches!(
        per_task_baseline_train(&ds, &BaselineConfig::default()),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn baseline_query_latency_grows_with_training_size() {
    let mut r = rng(99);
    let queries: Vec<[f64; FEATURE_DIM]> = (0..200).map(|_| random_input(&mut r)).collect();
    let mut latencies = Vec::new();
    for n in [100, 400, 1600] {
        let base = per_task_baseline_train(
            &generative_task(n, 0.1, n as u64),
            &BaselineConfig::default(),
        )
        .unwrap();
        let mut best = f64::INFINITY;
        for _ in 0..5 {
            let started = Instant::now();
            for q in &queries {
                std::hint::black_box(per_task_baseline_predict(&base, q).unwrap());
            }
            best = best.min(started.elapsed().as_secs_f64());
        }
        latencies.push(best);
    }
    assert!(
        latencies[0] < latencies[1] && latencies[1] < latencies[2],
        "{latencies:?}"
    );
}

#[test]
fn checkpoint_file_roundtrip_is_bit_exact() {
    let model = random_model(&[9, 6, 4], 3, 3, 7, 31);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, model);
    let bits = |m: &DkmgpModel| m.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&model));

    let text = std::fs::read_to_string(&path).unwrap();
    let mut json: serde_json::Value = serde_json::from_str(&text).unwrap();
    json["inducing"]["data"] = serde_json::Value::String("***".into());
    std::fs::write(&path, json.to_string()).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::SchemaError(_))));
}
