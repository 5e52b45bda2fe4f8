//! DDPM forward process, noise-prediction loss and ancestral sampler.
//!
//! Timesteps are 1-based throughout: `t ∈ 1..=steps`, matching the usual
//! statement of the forward chain. Index `t - 1` into the coefficient vectors.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::linalg::{self, Matrix};
use crate::rng;

/// One data point ξ (or a noise vector ε of the same shape).
pub type Sample = Vec<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced β from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("steps must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Schedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let beta: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps)
                .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Schedule("steps must be at least 1".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Schedule(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::TimestepOutOfRange {
                t,
                steps: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    /// Uniform draw from `1..=steps`.
    pub fn sample_timestep<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(1..=self.steps())
    }
}

/// Standard normal vector of length `dim`.
pub fn standard_normal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Sample {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Closed-form forward jump `ξ_t = √ᾱ_t·ξ_0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(schedule: &NoiseSchedule, x0: &[f64], t: usize, eps: &[f64]) -> Result<Sample> {
    schedule.check_timestep(t)?;
    check_len(x0.len(), eps.len())?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// A noise predictor ε̂(ξ_t, t).
pub trait Denoiser {
    fn dim(&self) -> usize;

    /// Callers guarantee `x_t.len() == self.dim()` and a valid timestep.
    fn predict(&self, x_t: &[f64], t: usize) -> Sample;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn predict(&self, x_t: &[f64], t: usize) -> Sample {
        (**self).predict(x_t, t)
    }
}

/// Per-sample term of the simplified objective: `‖ε − ε̂(q_sample(x0, t, ε), t)‖²`.
pub fn ddpm_loss<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    x0: &[f64],
    t: usize,
    eps: &[f64],
) -> Result<f64> {
    check_len(denoiser.dim(), x0.len())?;
    let x_t = q_sample(schedule, x0, t, eps)?;
    let pred = denoiser.predict(&x_t, t);
    Ok(eps.iter().zip(&pred).map(|(e, p)| (e - p).powi(2)).sum())
}

/// One reverse step from ξ_t to ξ_{t−1} given the noise `z` (ignored at t = 1).
fn reverse_step<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    x: &mut [f64],
    t: usize,
    z: &[f64],
) {
    let eps_hat = denoiser.predict(x, t);
    let beta = schedule.beta(t);
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let coef = beta / (1.0 - schedule.alpha_bar(t)).sqrt();
    let sigma = if t > 1 { beta.sqrt() } else { 0.0 };
    for i in 0..x.len() {
        x[i] = inv_sqrt_alpha * (x[i] - coef * eps_hat[i]) + sigma * z[i];
    }
}

/// Ancestral sampling with fixed reverse variance σ_t² = β_t.
///
/// Sample `i` runs on its own stream derived from `(seed, i)`, so the output is
/// a pure function of the denoiser, schedule, `n` and `seed`, and the samples
/// can be generated in parallel.
pub fn ancestral_sample_seeded<D: Denoiser + Sync + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Vec<Sample> {
    let dim = denoiser.dim();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, &[rng::tag::SAMPLE, i as u64]);
            let mut x = standard_normal(dim, &mut rng);
            for t in (1..=schedule.steps()).rev() {
                let z = if t > 1 {
                    standard_normal(dim, &mut rng)
                } else {
                    vec![0.0; dim]
                };
                reverse_step(denoiser, schedule, &mut x, t, &z);
            }
            x
        })
        .collect()
}

/// Draws `n` samples, taking one seed from `rng`.
pub fn ancestral_sample<D: Denoiser + Sync + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    n: usize,
    rng: &mut R,
) -> Vec<Sample> {
    let seed = rng.random::<u64>();
    ancestral_sample_seeded(denoiser, schedule, n, seed)
}

/// Mean and covariance of a Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    pub mean: Vec<f64>,
    pub covariance: Matrix,
}

impl GaussianSpec {
    pub fn new(mean: Vec<f64>, covariance: Matrix) -> Result<Self> {
        check_len(mean.len(), covariance.dim())?;
        if !covariance.is_symmetric(1e-12) {
            return Err(Error::NotSymmetric);
        }
        let eig = linalg::jacobi_eigen(&covariance)?;
        linalg::clamp_spectrum(&eig.values)?;
        Ok(GaussianSpec { mean, covariance })
    }

    pub fn isotropic(mean: Vec<f64>, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma {sigma} must be finite and >= 0")));
        }
        let d = mean.len();
        Self::new(mean, Matrix::scaled_identity(d, sigma * sigma))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `Some(σ²)` when the covariance is σ²·I.
    pub fn isotropic_variance(&self) -> Option<f64> {
        let d = self.dim();
        if d == 0 {
            return None;
        }
        let v = self.covariance.get(0, 0);
        let tol = 1e-12 * v.abs().max(1.0);
        for i in 0..d {
            for j in 0..d {
                let expected = if i == j { v } else { 0.0 };
                if (self.covariance.get(i, j) - expected).abs() > tol {
                    return None;
                }
            }
        }
        Some(v)
    }

    pub fn sampler(&self) -> Result<GaussianSampler> {
        Ok(GaussianSampler {
            mean: self.mean.clone(),
            factor: linalg::sqrt_psd(&self.covariance)?,
        })
    }
}

/// Draws `μ + Σ^{1/2}·z`.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mean: Vec<f64>,
    factor: Matrix,
}

impl GaussianSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Sample {
        let z = standard_normal(self.mean.len(), rng);
        let shifted = self.factor.mul_vec(&z);
        self.mean.iter().zip(shifted).map(|(m, s)| m + s).collect()
    }
}

/// Exact posterior-mean noise predictor for data distributed as N(μ, σ²I).
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    mean: Vec<f64>,
    variance: f64,
    alpha_bar: Vec<f64>,
}

impl GaussianOracle {
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }
}

impl Denoiser for GaussianOracle {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn predict(&self, x_t: &[f64], t: usize) -> Sample {
        let ab = self.alpha_bar[t - 1];
        let scale = (1.0 - ab).sqrt() / (ab * self.variance + 1.0 - ab);
        let sqrt_ab = ab.sqrt();
        x_t.iter()
            .zip(&self.mean)
            .map(|(x, m)| scale * (x - sqrt_ab * m))
            .collect()
    }
}

/// `ε̂(ξ_t, t) = √(1−ᾱ_t)·(ξ_t − √ᾱ_t·μ) / (ᾱ_t·σ² + 1 − ᾱ_t)`.
pub fn optimal_denoiser_gaussian(
    target: &GaussianSpec,
    schedule: &NoiseSchedule,
) -> Result<GaussianOracle> {
    let variance = target.isotropic_variance().ok_or_else(|| {
        Error::InvalidArgument("optimal denoiser requires an isotropic covariance".into())
    })?;
    Ok(GaussianOracle {
        mean: target.mean.clone(),
        variance,
        alpha_bar: schedule.alpha_bars().to_vec(),
    })
}
