//! Minibatch SGD on the simplified DDPM objective.
//!
//! Shared by warmup, client updates and server correction. Each minibatch
//! element draws its own timestep uniformly from `1..=steps` and its own noise
//! vector, in element order, from the caller's stream.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::diffusion::{q_sample, standard_normal, NoiseSchedule, Sample};
use crate::error::{Error, Result};
use crate::net::{self, DenoiserConfig, GradientVector, ParamVector};

/// A fully specified term of the objective: data point, timestep and noise.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub x0: Sample,
    pub t: usize,
    pub eps: Sample,
}

impl LossTerm {
    pub fn draw<R: Rng + ?Sized>(x0: &[f64], schedule: &NoiseSchedule, rng: &mut R) -> Self {
        let t = schedule.sample_timestep(rng);
        let eps = standard_normal(x0.len(), rng);
        LossTerm {
            x0: x0.to_vec(),
            t,
            eps,
        }
    }
}

/// Mean loss and mean gradient over `terms`, accumulated in order.
pub fn mean_gradient(
    params: &ParamVector,
    config: &DenoiserConfig,
    schedule: &NoiseSchedule,
    terms: &[LossTerm],
) -> Result<(f64, GradientVector)> {
    if terms.is_empty() {
        return Err(Error::EmptyDataset("no loss terms".into()));
    }
    if params.len() != config.num_params() {
        return Err(Error::ParamLength {
            expected: config.num_params(),
            got: params.len(),
        });
    }
    let mut grad = vec![0.0; params.len()];
    let weight = 1.0 / terms.len() as f64;
    let mut loss = 0.0;
    for term in terms {
        if term.x0.len() != config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: config.input_dim,
                got: term.x0.len(),
            });
        }
        let x_t = q_sample(schedule, &term.x0, term.t, &term.eps)?;
        loss += net::accumulate_gradient(
            params.as_slice(),
            config,
            &x_t,
            term.t,
            schedule.steps(),
            &term.eps,
            &mut grad,
            weight,
        );
    }
    Ok((loss * weight, GradientVector::from(grad)))
}

/// Optional FedProx pull `mu · (w − anchor)` added to every gradient.
#[derive(Debug, Clone, Copy)]
pub struct Proximal<'a> {
    pub mu: f64,
    pub anchor: &'a ParamVector,
}

/// Result of an SGD run: final parameters and the mean minibatch loss.
#[derive(Debug, Clone)]
pub struct SgdOutcome {
    pub params: ParamVector,
    pub mean_loss: f64,
}

/// Number of minibatches in one pass over `m` samples.
pub fn batches_per_epoch(m: usize, batch_size: usize) -> usize {
    m.div_ceil(batch_size)
}

/// Runs `n_steps` SGD updates `w ← w − lr·g` over `data`.
///
/// Minibatches are consecutive slices of a permutation of `data` that is
/// redrawn at the start of every pass; the last batch of a pass may be short.
pub fn sgd<R: Rng + ?Sized>(
    start: &ParamVector,
    data: &[Sample],
    n_steps: usize,
    lr: f64,
    batch_size: usize,
    proximal: Option<Proximal<'_>>,
    schedule: &NoiseSchedule,
    config: &DenoiserConfig,
    rng: &mut R,
) -> Result<SgdOutcome> {
    if n_steps > 0 && data.is_empty() {
        return Err(Error::EmptyDataset("SGD over an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut params = start.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut loss_sum = 0.0;
    for _ in 0..n_steps {
        if cursor >= data.len() {
            order.shuffle(rng);
            cursor = 0;
        }
        let end = (cursor + batch_size).min(data.len());
        let terms: Vec<LossTerm> = order[cursor..end]
            .iter()
            .map(|&i| LossTerm::draw(&data[i], schedule, rng))
            .collect();
        cursor = end;

        let (loss, grad) = mean_gradient(&params, config, schedule, &terms)?;
        loss_sum += loss;
        let mut g = grad.into_vec();
        if let Some(prox) = proximal {
            if prox.mu != 0.0 {
                for ((gi, w), a) in g.iter_mut().zip(params.as_slice()).zip(prox.anchor.as_slice()) {
                    *gi += prox.mu * (w - a);
                }
            }
        }
        net::axpy_in_place(&mut params, &g, -lr)?;
    }
    let mean_loss = if n_steps == 0 {
        0.0
    } else {
        loss_sum / n_steps as f64
    };
    Ok(SgdOutcome { params, mean_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn mean_gradient_matches_per_term_backward() {
        let cfg = DenoiserConfig::new(2, vec![6], 4).unwrap();
        let s = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let p = cfg.init_params(&mut stream(1, &[]));
        let mut r = stream(2, &[]);
        let terms: Vec<LossTerm> = (0..5)
            .map(|i| LossTerm::draw(&[i as f64 * 0.3, -0.2], &s, &mut r))
            .collect();
        let (loss, grad) = mean_gradient(&p, &cfg, &s, &terms).unwrap();
        let mut acc = vec![0.0; p.len()];
        let mut lacc = 0.0;
        for term in &terms {
            let x_t = q_sample(&s, &term.x0, term.t, &term.eps).unwrap();
            let (l, g) = net::backward(&p, &cfg, &x_t, term.t, 10, &term.eps).unwrap();
            lacc += l;
            for (a, gi) in acc.iter_mut().zip(g.as_slice()) {
                *a += gi;
            }
        }
        assert!((loss - lacc / 5.0).abs() < 1e-12);
        for (a, b) in grad.as_slice().iter().zip(&acc) {
            assert!((a - b / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lr_or_zero_steps_is_identity() {
        let cfg = DenoiserConfig::new(2, vec![6], 4).unwrap();
        let s = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let p = cfg.init_params(&mut stream(1, &[]));
        let data = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let out = sgd(&p, &data, 3, 0.0, 2, None, &s, &cfg, &mut stream(3, &[])).unwrap();
        assert_eq!(out.params, p);
        let out = sgd(&p, &[], 0, 0.1, 2, None, &s, &cfg, &mut stream(3, &[])).unwrap();
        assert_eq!(out.params, p);
        assert!(sgd(&p, &[], 1, 0.1, 2, None, &s, &cfg, &mut stream(3, &[])).is_err());
    }

    #[test]
    fn epoch_batch_count() {
        assert_eq!(batches_per_epoch(200, 32), 7);
        assert_eq!(batches_per_epoch(64, 32), 2);
        assert_eq!(batches_per_epoch(1, 32), 1);
    }
}
