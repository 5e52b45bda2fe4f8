//! Monte Carlo and independent-computation oracles.

use fedddpm::data::{self, AuxiliaryDataset, ClientDataset, LabeledSample, MixtureSpec};
use fedddpm::diffusion::{
    ancestral_sample_seeded, ddpm_loss, optimal_denoiser_gaussian, q_sample, standard_normal,
    Denoiser, GaussianSpec, NoiseSchedule, Sample,
};
use fedddpm::fl::{self, Work};
use fedddpm::metrics;
use fedddpm::net::{self, DenoiserConfig, MlpDenoiser};
use fedddpm::rng::stream;
use fedddpm::train::LossTerm;
use rand::seq::SliceRandom;
use rand::Rng;

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

#[test]
fn oracle_loss_matches_residual_variance() {
    let schedule = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
    let mu = vec![0.5, -1.5];
    let sigma = 0.7;
    let spec = GaussianSpec::isotropic(mu.clone(), sigma).unwrap();
    let oracle = optimal_denoiser_gaussian(&spec, &schedule).unwrap();
    let sampler = spec.sampler().unwrap();
    let mut r = stream(11, &[]);
    for t in [1, 10, 50, 100] {
        let losses: Vec<f64> = (0..100_000)
            .map(|_| {
                let x0 = sampler.sample(&mut r);
                let eps = standard_normal(2, &mut r);
                ddpm_loss(&oracle, &schedule, &x0, t, &eps).unwrap()
            })
            .collect();
        let (m, se) = mean_and_se(&losses);
        let ab = schedule.alpha_bar(t);
        let s2 = sigma * sigma;
        let expected = 2.0 * ab * s2 / (ab * s2 + 1.0 - ab);
        assert!((m - expected).abs() <= 3.0 * se, "t={t}: {m} vs {expected} (se {se})");
    }
}

#[test]
fn oracle_is_the_posterior_mean() {
    // E[(ε − ε̂(x_t))·g(x_t)] = 0 for g ∈ {1, x_t} characterises the affine
    // posterior mean of jointly Gaussian (ε, x_t).
    let schedule = NoiseSchedule::linear(50, 1e-3, 0.2).unwrap();
    let spec = GaussianSpec::isotropic(vec![1.0], 0.6).unwrap();
    let oracle = optimal_denoiser_gaussian(&spec, &schedule).unwrap();
    let sampler = spec.sampler().unwrap();
    let mut r = stream(12, &[]);
    for t in [2, 25, 50] {
        let mut res_one = Vec::with_capacity(1_000_000);
        let mut res_x = Vec::with_capacity(1_000_000);
        for _ in 0..1_000_000 {
            let x0 = sampler.sample(&mut r);
            let eps = standard_normal(1, &mut r);
            let xt = q_sample(&schedule, &x0, t, &eps).unwrap();
            let res = eps[0] - oracle.predict(&xt, t)[0];
            res_one.push(res);
            res_x.push(res * xt[0]);
        }
        for v in [res_one, res_x] {
            let (m, se) = mean_and_se(&v);
            assert!(m.abs() <= 3.0 * se, "t={t}: {m} (se {se})");
        }
    }
}

#[test]
fn auxiliary_moments_match_mixture_with_oracle_models() {
    let schedule = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
    let means = [vec![2.0, 2.0], vec![-2.0, 2.0], vec![-2.0, -2.0], vec![2.0, -2.0]];
    let weights = [0.1, 0.2, 0.3, 0.4];
    let sigma = 0.5;
    let comps = means
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(i, (m, w))| data::MixtureComponent {
            weight: w,
            gaussian: GaussianSpec::isotropic(m.clone(), sigma).unwrap(),
            label: i as u32,
        })
        .collect();
    let spec = MixtureSpec::new(comps).unwrap();
    // client i holds component i only, with size proportional to its weight
    let models: Vec<_> = spec
        .components()
        .iter()
        .map(|c| {
            let oracle = optimal_denoiser_gaussian(&c.gaussian, &schedule).unwrap();
            (oracle, (c.weight * 50_000.0).round() as usize)
        })
        .collect();
    let aux = data::build_auxiliary_dataset_with(&models, 0.4, &schedule, 13).unwrap();
    assert_eq!(aux.per_client_counts, vec![2000, 4000, 6000, 8000]);

    let (mean, cov) = spec.moments();
    let n = aux.len() as f64;
    for i in 0..2 {
        let xs: Vec<f64> = aux.samples.iter().map(|s| s[i]).collect();
        let (m, _) = mean_and_se(&xs);
        let se = (cov.get(i, i) / n).sqrt();
        assert!((m - mean[i]).abs() <= 3.0 * se, "mean {i}: {m} vs {}", mean[i]);
        for j in 0..2 {
            let prods: Vec<f64> = aux
                .samples
                .iter()
                .map(|s| (s[i] - mean[i]) * (s[j] - mean[j]))
                .collect();
            let (c, se) = mean_and_se(&prods);
            assert!((c - cov.get(i, j)).abs() <= 3.0 * se, "cov {i}{j}: {c} vs {}", cov.get(i, j));
        }
    }
}

#[test]
fn warmup_recovers_a_single_gaussian_client() {
    let schedule = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
    let net = DenoiserConfig::default();
    let target = GaussianSpec::isotropic(vec![1.0, -1.0], 0.5).unwrap();
    let sampler = target.sampler().unwrap();
    let mut r = stream(14, &[]);
    let m = 500;
    let client = ClientDataset {
        client_id: 0,
        samples: (0..m)
            .map(|_| LabeledSample { point: sampler.sample(&mut r), label: 0 })
            .collect(),
    };
    let models = fl::warmup(&[client], 800, 5e-3, 64, &schedule, &net, 14).unwrap();
    let den = MlpDenoiser::new(&models[0], &net, schedule.steps()).unwrap();
    let n = 4000;
    let gen = ancestral_sample_seeded(&den, &schedule, n, 15);
    let var = 0.25;
    // the model can only learn its m training points, so both sample sizes count
    let se_mean = (var / m as f64 + var / n as f64).sqrt();
    let se_var = var * (2.0 / m as f64 + 2.0 / n as f64).sqrt();
    for i in 0..2 {
        let xs: Vec<f64> = gen.iter().map(|s| s[i]).collect();
        let (mean, _) = mean_and_se(&xs);
        let v = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - target.mean[i]).abs() <= 3.0 * se_mean, "mean {i}: {mean}");
        assert!((v - var).abs() <= 3.0 * se_var, "var {i}: {v}");
    }
}

#[test]
fn warmup_of_no_clients_is_empty() {
    let schedule = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
    let net = DenoiserConfig::default();
    assert!(fl::warmup(&[], 5, 1e-2, 8, &schedule, &net, 0).unwrap().is_empty());
}

#[test]
fn selection_is_uniform() {
    let mut counts = [0usize; 10];
    let draws = 100_000;
    let mut r = stream(16, &[]);
    for _ in 0..draws {
        for i in fl::select_clients(10, 0.3, &mut r) {
            counts[i] += 1;
        }
    }
    let sd = (0.3 * 0.7 / draws as f64).sqrt();
    for (i, &c) in counts.iter().enumerate() {
        let f = c as f64 / draws as f64;
        assert!((f - 0.3).abs() <= 3.0 * sd, "client {i}: {f}");
    }
}

fn tiny_setup() -> (DenoiserConfig, NoiseSchedule, fedddpm::net::ParamVector, Vec<Sample>) {
    let net = DenoiserConfig::new(2, vec![8, 8], 4).unwrap();
    let schedule = NoiseSchedule::linear(30, 1e-3, 0.2).unwrap();
    let params = net.init_params(&mut stream(17, &[]));
    let mut r = stream(18, &[]);
    let points = (0..12).map(|_| standard_normal(2, &mut r)).collect();
    (net, schedule, params, points)
}

/// `Σ_k backward(term_k) / |terms|`, accumulated term by term.
fn independent_mean_gradient(
    params: &fedddpm::net::ParamVector,
    net: &DenoiserConfig,
    schedule: &NoiseSchedule,
    terms: &[LossTerm],
) -> Vec<f64> {
    let mut g = vec![0.0; params.len()];
    for term in terms {
        let xt = q_sample(schedule, &term.x0, term.t, &term.eps).unwrap();
        let (_, gi) = net::backward(params, net, &xt, term.t, schedule.steps(), &term.eps).unwrap();
        for (a, b) in g.iter_mut().zip(gi.as_slice()) {
            *a += b;
        }
    }
    g.iter().map(|v| v / terms.len() as f64).collect()
}

#[test]
fn single_full_batch_correction_matches_independent_step() {
    let (net, schedule, params, points) = tiny_setup();
    let aux = AuxiliaryDataset { samples: points.clone(), per_client_counts: vec![points.len()] };
    let lr = 0.05;
    let out = fl::server_correct(&params, &aux, Work::Steps(1), lr, points.len(), &schedule, &net, &mut stream(19, &[]))
        .unwrap();

    // replay the documented stream usage: one shuffle, then (t, ε) per element
    let mut r = stream(19, &[]);
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(&mut r);
    let terms: Vec<LossTerm> = order
        .iter()
        .map(|&i| {
            let t = r.random_range(1..=schedule.steps());
            let eps = standard_normal(2, &mut r);
            LossTerm { x0: points[i].clone(), t, eps }
        })
        .collect();
    let g = independent_mean_gradient(&params, &net, &schedule, &terms);
    for ((o, p), gi) in out.as_slice().iter().zip(params.as_slice()).zip(&g) {
        assert!((o - (p - lr * gi)).abs() < 1e-12);
    }
}

#[test]
fn stationarity_matches_independent_accumulation() {
    let (net, schedule, params, points) = tiny_setup();
    let probe = metrics::draw_probe(&points, &schedule, 20);
    let est = metrics::stationarity_estimate(&params, &probe, &schedule, &net).unwrap();
    let g = independent_mean_gradient(&params, &net, &schedule, &probe);
    let expected: f64 = g.iter().map(|v| v * v).sum();
    assert!((est - expected).abs() <= 1e-12 * expected.max(1.0));
}
