//! Runtime self-checks behind the `gradcheck` and `oracle` subcommands.

use rand::Rng;

use crate::diffusion::{
    ancestral_sample_seeded, optimal_denoiser_gaussian, q_sample, standard_normal, GaussianSpec,
    NoiseSchedule,
};
use crate::linalg::{self, Matrix};
use crate::metrics::{fit_gaussian, frechet_distance, GaussianFit};
use crate::net::{self, DenoiserConfig};
use crate::rng::{self, Stream};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckResult {
            name: name.into(),
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        format!("{status} {}: {}", self.name, self.detail)
    }
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Coordinates whose gradients are both below this are not significant.
pub const FD_FLOOR: f64 = 1e-6;

fn random_config(r: &mut Stream) -> Result<DenoiserConfig> {
    let d = r.random_range(1..=3);
    let layers = r.random_range(1..=3);
    let hidden = (0..layers).map(|_| r.random_range(2..=8)).collect();
    let embed = 2 * r.random_range(1..=3);
    DenoiserConfig::new(d, hidden, embed)
}

/// Backward pass against central differences on `trials` random
/// architectures, inputs and parameters.
pub fn gradient_check(trials: usize, seed: u64) -> Result<CheckResult> {
    let mut r = rng::stream(seed, &[0x6c]);
    let mut worst = 0.0f64;
    let mut coords = 0usize;
    for _ in 0..trials {
        let cfg = random_config(&mut r)?;
        let steps = r.random_range(2..=50);
        let t = r.random_range(1..=steps);
        let params = cfg.init_params(&mut r);
        let x = standard_normal(cfg.input_dim, &mut r);
        let eps = standard_normal(cfg.input_dim, &mut r);
        let (_, grad) = net::backward(&params, &cfg, &x, t, steps, &eps)?;
        let loss = |p: &net::ParamVector| -> Result<f64> {
            let y = net::forward(p, &cfg, &x, t, steps)?;
            Ok(y.iter().zip(&eps).map(|(a, b)| (a - b).powi(2)).sum())
        };
        for k in 0..params.len() {
            let mut plus = params.clone();
            plus.as_mut_slice()[k] += FD_STEP;
            let mut minus = params.clone();
            minus.as_mut_slice()[k] -= FD_STEP;
            let fd = (loss(&plus)? - loss(&minus)?) / (2.0 * FD_STEP);
            let g = grad.as_slice()[k];
            let scale = g.abs().max(fd.abs());
            if scale < FD_FLOOR {
                continue;
            }
            worst = worst.max((g - fd).abs() / scale);
            coords += 1;
        }
    }
    Ok(CheckResult::new(
        "gradient",
        worst < FD_TOLERANCE,
        format!("{trials} configs, {coords} coordinates, max relative error {worst:.3e}"),
    ))
}

fn within(actual: f64, expected: f64, se: f64) -> bool {
    (actual - expected).abs() <= 3.0 * se
}

/// Empirical q_sample moments at t ∈ {1, steps/2, steps} against the
/// closed-form marginal.
pub fn forward_marginals(seed: u64) -> Result<CheckResult> {
    let schedule = NoiseSchedule::linear(100, 1e-3, 0.2)?;
    let x0 = [1.5, -1.0];
    let n = 10_000;
    let mut r = rng::stream(seed, &[0x6d]);
    let mut ok = true;
    let mut worst = 0.0f64;
    for t in [1, 50, 100] {
        let ab = schedule.alpha_bar(t);
        let var = 1.0 - ab;
        let draws: Vec<Vec<f64>> = (0..n)
            .map(|_| q_sample(&schedule, &x0, t, &standard_normal(2, &mut r)))
            .collect::<Result<_>>()?;
        let fit = fit_gaussian(&draws)?;
        for i in 0..2 {
            let se_mean = (var / n as f64).sqrt();
            let z = (fit.mean[i] - ab.sqrt() * x0[i]).abs() / se_mean;
            worst = worst.max(z);
            ok &= within(fit.mean[i], ab.sqrt() * x0[i], se_mean);
            for j in 0..2 {
                let expected = if i == j { var } else { 0.0 };
                // standard error of a sample (co)variance of Gaussian data
                let se = if i == j {
                    var * (2.0 / (n - 1) as f64).sqrt()
                } else {
                    var / (n as f64).sqrt()
                };
                let z = (fit.covariance.get(i, j) - expected).abs() / se;
                worst = worst.max(z);
                ok &= within(fit.covariance.get(i, j), expected, se);
            }
        }
    }
    Ok(CheckResult::new(
        "forward marginals",
        ok,
        format!("t in {{1, 50, 100}}, 1e4 draws, max |z| {worst:.2}"),
    ))
}

/// Ancestral sampling with the closed-form Gaussian denoiser recovers its
/// target.
pub fn sampling_oracle(seed: u64) -> Result<CheckResult> {
    let schedule = NoiseSchedule::linear(100, 1e-3, 0.2)?;
    let sigma = 0.8;
    let target = GaussianSpec::isotropic(vec![1.5, -1.0], sigma)?;
    let oracle = optimal_denoiser_gaussian(&target, &schedule)?;
    let n = 10_000;
    let samples = ancestral_sample_seeded(&oracle, &schedule, n, seed);
    let fit = fit_gaussian(&samples)?;
    let var = sigma * sigma;
    let se = (var / n as f64).sqrt();
    let mean_ok = fit
        .mean
        .iter()
        .zip(&target.mean)
        .all(|(a, b)| within(*a, *b, se));
    let expected = Matrix::scaled_identity(2, var);
    let rel = fit.covariance.sub(&expected).frobenius() / expected.frobenius();
    Ok(CheckResult::new(
        "sampling oracle",
        mean_ok && rel < 0.05,
        format!(
            "mean ({:.4}, {:.4}) vs (1.5, -1.0), covariance relative error {rel:.4}",
            fit.mean[0], fit.mean[1]
        ),
    ))
}

/// Closed-form Fréchet distance cases and the matrix square root.
pub fn frechet_units() -> Result<CheckResult> {
    let c = Matrix::from_rows(&[
        vec![2.0, 0.3, 0.1],
        vec![0.3, 1.0, -0.2],
        vec![0.1, -0.2, 0.5],
    ])?;
    let fit = |mean: Vec<f64>, cov: Matrix| GaussianFit {
        mean,
        covariance: cov,
        n_samples: 2,
    };
    let a = fit(vec![0.0, 1.0, 2.0], c.clone());
    let b = fit(vec![1.0, -1.0, 2.5], c.clone());
    let self_fd = frechet_distance(&a, &a)?;
    let shift_err = (frechet_distance(&a, &b)? - 5.25).abs();
    let one_d = frechet_distance(
        &fit(vec![0.3], Matrix::diagonal(&[2.25])),
        &fit(vec![-0.7], Matrix::diagonal(&[0.16])),
    )?;
    let one_d_err = (one_d - (1.0 + (1.5f64 - 0.4).powi(2))).abs();
    let root = linalg::sqrt_psd(&c)?;
    let sqrt_err = root.mul(&root)?.sub(&c).frobenius() / c.frobenius();
    let ok = self_fd < 1e-9 && shift_err < 1e-9 && one_d_err < 1e-9 && sqrt_err < 1e-8;
    Ok(CheckResult::new(
        "frechet units",
        ok,
        format!(
            "FD(a,a) {self_fd:.1e}, shift error {shift_err:.1e}, 1-D error {one_d_err:.1e}, sqrt error {sqrt_err:.1e}"
        ),
    ))
}

/// The analytic-denoiser suite: forward marginals, sampling oracle and the
/// Fréchet distance units.
pub fn oracle_suite(seed: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        forward_marginals(seed)?,
        sampling_oracle(seed)?,
        frechet_units()?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checks_pass_on_seed_one() {
        assert!(gradient_check(3, 1).unwrap().passed);
        for c in oracle_suite(1).unwrap() {
            assert!(c.passed, "{}", c.line());
        }
    }
}
