//! Sample-quality and convergence measurements.
//!
//! The quality score is the Fréchet distance between Gaussian fits of real
//! and generated samples in raw coordinates, i.e. the FID closed form
//! without an embedding network.

use rand::Rng;

use crate::diffusion::{ancestral_sample_seeded, Denoiser, NoiseSchedule, Sample};
use crate::error::{check_len, Error, Result};
use crate::linalg::{self, Matrix};
use crate::net::{DenoiserConfig, MlpDenoiser, ParamVector};
use crate::rng;
use crate::train::{mean_gradient, LossTerm};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: Vec<f64>,
    pub covariance: Matrix,
    pub n_samples: usize,
}

impl GaussianFit {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased sample covariance.
pub fn fit_gaussian(samples: &[Sample]) -> Result<GaussianFit> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples to fit a Gaussian, got {}",
            samples.len()
        )));
    }
    let d = samples[0].len();
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        check_len(d, s.len())?;
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let mut cov = Matrix::zeros(d);
    for s in samples {
        for i in 0..d {
            let di = s[i] - mean[i];
            for j in i..d {
                let v = cov.get(i, j) + di * (s[j] - mean[j]);
                cov.set(i, j, v);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov.get(i, j) / (n - 1.0);
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    Ok(GaussianFit {
        mean,
        covariance: cov,
        n_samples: samples.len(),
    })
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})`.
///
/// The cross term uses `Tr((Σ_a Σ_b)^{1/2}) = Tr((√Σ_a Σ_b √Σ_a)^{1/2})`, which
/// only needs symmetric eigendecompositions.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    check_len(a.dim(), b.dim())?;
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    let sqrt_a = linalg::sqrt_psd(&a.covariance)?;
    // validates Σ_b
    linalg::clamp_spectrum(&linalg::jacobi_eigen(&b.covariance)?.values)?;
    let inner = sqrt_a.mul(&b.covariance)?.mul(&sqrt_a)?.symmetrized();
    let eig = linalg::jacobi_eigen(&inner)?;
    let cross: f64 = linalg::clamp_spectrum(&eig.values)?
        .iter()
        .map(|l| l.sqrt())
        .sum();
    let fd = mean_term + a.covariance.trace() + b.covariance.trace() - 2.0 * cross;
    Ok(fd.max(0.0))
}

/// Score of any denoiser: sample `test_size` points with the given seed and
/// compare their Gaussian fit with `real`.
pub fn evaluate_denoiser<D: Denoiser + Sync + ?Sized>(
    denoiser: &D,
    real: &GaussianFit,
    test_size: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    if test_size < 2 {
        return Err(Error::InvalidArgument("test_size must be >= 2".into()));
    }
    let generated = ancestral_sample_seeded(denoiser, schedule, test_size, seed);
    if generated.iter().flatten().any(|v| !v.is_finite()) {
        return Ok(f64::INFINITY);
    }
    frechet_distance(&fit_gaussian(&generated)?, real)
}

/// Fréchet distance between `test_size` generated samples and `real_pool`.
pub fn evaluate_model<R: Rng + ?Sized>(
    model: &ParamVector,
    real_pool: &[Sample],
    test_size: usize,
    schedule: &NoiseSchedule,
    config: &DenoiserConfig,
    rng: &mut R,
) -> Result<f64> {
    let real = fit_gaussian(real_pool)?;
    let den = MlpDenoiser::new(model, config, schedule.steps())?;
    evaluate_denoiser(&den, &real, test_size, schedule, rng.random())
}

/// State of the EMA plateau detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaState {
    pub avg_score: Option<f64>,
    pub gamma: f64,
    pub threshold: f64,
    pub test_size: usize,
}

impl EmaState {
    pub fn new(gamma: f64, threshold: f64, test_size: usize) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidArgument(format!("gamma {gamma} must be in (0, 1)")));
        }
        if !(threshold > 0.0) {
            return Err(Error::InvalidArgument(format!("threshold {threshold} must be > 0")));
        }
        if test_size == 0 {
            return Err(Error::InvalidArgument("test_size must be >= 1".into()));
        }
        Ok(EmaState {
            avg_score: None,
            gamma,
            threshold,
            test_size,
        })
    }
}

/// One QuickTest transition.
///
/// Triggers (state untouched) when an average exists and lies within
/// `threshold` of `score`; otherwise seeds or updates the average
/// `score·γ + avg·(1−γ)` and reports no trigger.
pub fn quick_test(state: &EmaState, score: f64) -> (bool, EmaState) {
    match state.avg_score {
        Some(avg) if (avg - score).abs() <= state.threshold => (true, *state),
        Some(avg) => (
            false,
            EmaState {
                avg_score: Some(score * state.gamma + avg * (1.0 - state.gamma)),
                ..*state
            },
        ),
        None => (
            false,
            EmaState {
                avg_score: Some(score),
                ..*state
            },
        ),
    }
}

/// Fixed loss terms on which the full-batch gradient norm is measured.
pub fn draw_probe(points: &[Sample], schedule: &NoiseSchedule, seed: u64) -> Vec<LossTerm> {
    let mut r = rng::stream(seed, &[rng::tag::PROBE]);
    points
        .iter()
        .map(|p| LossTerm::draw(p, schedule, &mut r))
        .collect()
}

/// `‖∇ (1/|P|) Σ_{j∈P} ℓ_j(w)‖²` over the probe terms.
pub fn stationarity_estimate(
    model: &ParamVector,
    probe: &[LossTerm],
    schedule: &NoiseSchedule,
    config: &DenoiserConfig,
) -> Result<f64> {
    if probe.is_empty() {
        return Err(Error::EmptyDataset("stationarity probe is empty".into()));
    }
    let (_, grad) = mean_gradient(model, config, schedule, probe)?;
    Ok(grad.norm_sq())
}

/// Everything the training loop needs to score models: the fitted real pool,
/// the QuickTest sample size, an evaluation seed and an optional probe.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub real: GaussianFit,
    pub test_size: usize,
    pub seed: u64,
    pub probe: Vec<LossTerm>,
}

impl Evaluator {
    pub fn new(real_pool: &[Sample], test_size: usize, seed: u64) -> Result<Self> {
        Ok(Evaluator {
            real: fit_gaussian(real_pool)?,
            test_size,
            seed,
            probe: Vec::new(),
        })
    }

    pub fn with_probe(mut self, probe: Vec<LossTerm>) -> Self {
        self.probe = probe;
        self
    }

    /// Score with `n` generated samples on the stream for `round`.
    pub fn score_with(
        &self,
        model: &ParamVector,
        config: &DenoiserConfig,
        schedule: &NoiseSchedule,
        round: u64,
        n: usize,
    ) -> Result<f64> {
        let den = MlpDenoiser::new(model, config, schedule.steps())?;
        let seed = rng::derive_seed(self.seed, &[rng::tag::EVAL, round]);
        evaluate_denoiser(&den, &self.real, n, schedule, seed)
    }

    pub fn score(
        &self,
        model: &ParamVector,
        config: &DenoiserConfig,
        schedule: &NoiseSchedule,
        round: u64,
    ) -> Result<f64> {
        self.score_with(model, config, schedule, round, self.test_size)
    }

    pub fn stationarity(
        &self,
        model: &ParamVector,
        config: &DenoiserConfig,
        schedule: &NoiseSchedule,
    ) -> Result<Option<f64>> {
        if self.probe.is_empty() {
            return Ok(None);
        }
        stationarity_estimate(model, &self.probe, schedule, config).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fit1(mean: f64, var: f64) -> GaussianFit {
        GaussianFit {
            mean: vec![mean],
            covariance: Matrix::diagonal(&[var]),
            n_samples: 10,
        }
    }

    #[test]
    fn fit_identical_samples_has_zero_covariance() {
        let f = fit_gaussian(&vec![vec![1.0, 2.0]; 5]).unwrap();
        assert_eq!(f.mean, vec![1.0, 2.0]);
        assert_eq!(f.covariance, Matrix::zeros(2));
    }

    #[test]
    fn fit_two_points() {
        let f = fit_gaussian(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(f.mean, vec![1.0]);
        assert_eq!(f.covariance.get(0, 0), 2.0);
        assert!(fit_gaussian(&[vec![0.0]]).is_err());
        assert!(fit_gaussian(&[vec![0.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn frechet_one_dimensional_closed_form() {
        let fd = frechet_distance(&fit1(1.0, 4.0), &fit1(-0.5, 0.25)).unwrap();
        // (1.5)² + (2 − 0.5)²
        assert!((fd - 4.5).abs() < 1e-12);
    }

    #[test]
    fn frechet_self_and_shift() {
        let c = Matrix::from_rows(&[vec![2.0, 0.3], vec![0.3, 0.5]]).unwrap();
        let a = GaussianFit { mean: vec![1.0, 2.0], covariance: c.clone(), n_samples: 3 };
        let b = GaussianFit { mean: vec![0.0, 4.0], covariance: c, n_samples: 3 };
        assert!(frechet_distance(&a, &a).unwrap() < 1e-9);
        assert!((frechet_distance(&a, &b).unwrap() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn frechet_rejects_mismatch_and_indefinite() {
        let a = fit1(0.0, 1.0);
        let b = GaussianFit { mean: vec![0.0, 0.0], covariance: Matrix::identity(2), n_samples: 2 };
        assert!(frechet_distance(&a, &b).is_err());
        assert!(matches!(
            frechet_distance(&a, &fit1(0.0, -1.0)),
            Err(Error::NotPsd(_))
        ));
    }

    #[test]
    fn quick_test_transitions() {
        let s0 = EmaState::new(0.4, 0.2, 500).unwrap();
        let (hit, s1) = quick_test(&s0, 5.0);
        assert!(!hit);
        assert_eq!(s1.avg_score, Some(5.0));

        let (hit, s2) = quick_test(&s1, 4.9);
        assert!(hit);
        assert_eq!(s2, s1);

        let (hit, s3) = quick_test(&s1, 4.0);
        assert!(!hit);
        assert!((s3.avg_score.unwrap() - 4.6).abs() < 1e-15);
    }

    #[test]
    fn ema_state_validation() {
        assert!(EmaState::new(0.0, 0.2, 1).is_err());
        assert!(EmaState::new(1.0, 0.2, 1).is_err());
        assert!(EmaState::new(0.4, 0.0, 1).is_err());
        assert!(EmaState::new(0.4, 0.2, 0).is_err());
    }
}
