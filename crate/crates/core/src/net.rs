//! Small feed-forward noise predictor with hand-written backpropagation.
//!
//! The input is `[ξ_t, emb(t)]` where `emb` is a sinusoidal embedding of the
//! normalised timestep. Hidden layers use SiLU, which is C¹ (in fact smooth),
//! and the output layer is affine with width equal to the data dimension.
//!
//! All weights and biases live in one flat [`ParamVector`]: for each layer the
//! row-major weight matrix (`out × in`) followed by the bias vector.

use std::io::{Read, Write};

use rand::Rng;

use crate::diffusion::{Denoiser, Sample};
use crate::error::{check_len, Error, Result};

/// Largest angular frequency of the timestep embedding (applied to `t / steps`).
const MAX_FREQUENCY: f64 = 32.0;

/// Upper bound of `|silu'(x)|` over the reals (attained near x ≈ 2.4).
pub const SILU_DERIVATIVE_BOUND: f64 = 1.0999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub time_embed_dim: usize,
    pub activation: Activation,
}

impl DenoiserConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, time_embed_dim: usize) -> Result<Self> {
        let cfg = DenoiserConfig {
            input_dim,
            hidden_dims,
            time_embed_dim,
            activation: Activation::Silu,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be >= 1".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument("hidden widths must be >= 1".into()));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(
                "time_embed_dim must be a positive even number".into(),
            ));
        }
        Ok(())
    }

    /// Widths from input (data + embedding) to output.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim + self.time_embed_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.input_dim);
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims()
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Uniform initialisation in `[-a, a]`, `a = 1/√fan_in`, weights and biases alike.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = Vec::with_capacity(self.num_params());
        for w in self.layer_dims().windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..(fan_in * fan_out + fan_out) {
                values.push(rng.random_range(-a..=a));
            }
        }
        ParamVector(values)
    }
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            input_dim: 2,
            hidden_dims: vec![64, 64],
            time_embed_dim: 8,
            activation: Activation::Silu,
        }
    }
}

/// Sinusoidal embedding of `t / steps` with log-spaced frequencies in `[1, MAX_FREQUENCY]`.
pub fn time_embedding(t: usize, steps: usize, dim: usize) -> Vec<f64> {
    let u = t as f64 / steps as f64;
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = if half == 1 {
            1.0
        } else {
            MAX_FREQUENCY.powf(k as f64 / (half - 1) as f64)
        };
        out.push((freq * u).sin());
        out.push((freq * u).cos());
    }
    out
}

/// Flat vector of all denoiser weights and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

/// Same layout as [`ParamVector`]; holds ∂loss/∂w.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(Vec<f64>);

macro_rules! flat_vector {
    ($t:ty) => {
        impl $t {
            pub fn zeros(len: usize) -> Self {
                Self(vec![0.0; len])
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn as_mut_slice(&mut self) -> &mut [f64] {
                &mut self.0
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.0
            }

            pub fn norm_sq(&self) -> f64 {
                norm_sq(&self.0)
            }
        }

        impl From<Vec<f64>> for $t {
            fn from(v: Vec<f64>) -> Self {
                Self(v)
            }
        }
    };
}

flat_vector!(ParamVector);
flat_vector!(GradientVector);

impl ParamVector {
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Little-endian `u64` length followed by that many little-endian `f64`s.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.0.len() as u64).to_le_bytes())?;
        for v in &self.0 {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 8];
        r.read_exact(&mut header)?;
        let len = u64::from_le_bytes(header) as usize;
        let mut values = Vec::with_capacity(len.min(1 << 24));
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Parse(format!(
                "{} trailing bytes after parameter payload",
                rest.len()
            )));
        }
        Ok(ParamVector(values))
    }
}

/// Sequential sum of squares.
pub fn norm_sq(v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for x in v {
        acc += x * x;
    }
    acc
}

/// `params + scale · direction` as a new vector.
pub fn axpy(params: &ParamVector, direction: &[f64], scale: f64) -> Result<ParamVector> {
    let mut out = params.clone();
    axpy_in_place(&mut out, direction, scale)?;
    Ok(out)
}

pub fn axpy_in_place(params: &mut ParamVector, direction: &[f64], scale: f64) -> Result<()> {
    check_len(params.len(), direction.len())?;
    for (p, d) in params.0.iter_mut().zip(direction) {
        *p += scale * d;
    }
    Ok(())
}

fn check_params(params: &ParamVector, config: &DenoiserConfig) -> Result<()> {
    let expected = config.num_params();
    if params.len() != expected {
        return Err(Error::ParamLength {
            expected,
            got: params.len(),
        });
    }
    Ok(())
}

fn check_inputs(
    params: &ParamVector,
    config: &DenoiserConfig,
    x_t: &[f64],
    t: usize,
    steps: usize,
) -> Result<()> {
    check_params(params, config)?;
    check_len(config.input_dim, x_t.len())?;
    if t == 0 || t > steps {
        return Err(Error::TimestepOutOfRange { t, steps });
    }
    Ok(())
}

/// Forward pass keeping pre-activations and activations for backprop.
/// `acts[0]` is the network input; `pre[l]` is the affine output of layer `l`.
fn forward_trace(
    w: &[f64],
    config: &DenoiserConfig,
    x_t: &[f64],
    t: usize,
    steps: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let dims = config.layer_dims();
    let n_layers = dims.len() - 1;
    let mut input = Vec::with_capacity(dims[0]);
    input.extend_from_slice(x_t);
    input.extend(time_embedding(t, steps, config.time_embed_dim));

    let mut acts = Vec::with_capacity(n_layers + 1);
    let mut pre = Vec::with_capacity(n_layers);
    acts.push(input);
    let mut offset = 0;
    for l in 0..n_layers {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let weights = &w[offset..offset + fan_in * fan_out];
        let bias = &w[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;

        let x = &acts[l];
        let z: Vec<f64> = (0..fan_out)
            .map(|o| {
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                let mut acc = bias[o];
                for (wi, xi) in row.iter().zip(x) {
                    acc += wi * xi;
                }
                acc
            })
            .collect();
        let a = if l + 1 < n_layers {
            z.iter().map(|&v| config.activation.apply(v)).collect()
        } else {
            z.clone()
        };
        pre.push(z);
        acts.push(a);
    }
    (pre, acts)
}

/// Predicted noise ε̂_w(ξ_t, t).
pub fn forward(
    params: &ParamVector,
    config: &DenoiserConfig,
    x_t: &[f64],
    t: usize,
    steps: usize,
) -> Result<Sample> {
    check_inputs(params, config, x_t, t, steps)?;
    let (_, mut acts) = forward_trace(&params.0, config, x_t, t, steps);
    Ok(acts.pop().expect("network has an output layer"))
}

/// Adds `weight · ∂/∂w ‖eps − ε̂_w(x_t, t)‖²` into `grad` and returns the loss.
///
/// Inputs are assumed validated; used by the training loops to avoid an
/// allocation per sample.
pub(crate) fn accumulate_gradient(
    w: &[f64],
    config: &DenoiserConfig,
    x_t: &[f64],
    t: usize,
    steps: usize,
    eps: &[f64],
    grad: &mut [f64],
    weight: f64,
) -> f64 {
    let dims = config.layer_dims();
    let n_layers = dims.len() - 1;
    let (pre, acts) = forward_trace(w, config, x_t, t, steps);
    let out = &acts[n_layers];

    let mut loss = 0.0;
    let mut delta: Vec<f64> = out
        .iter()
        .zip(eps)
        .map(|(y, e)| {
            let r = y - e;
            loss += r * r;
            2.0 * r
        })
        .collect();

    let mut offsets = Vec::with_capacity(n_layers);
    let mut offset = 0;
    for l in 0..n_layers {
        offsets.push(offset);
        offset += dims[l] * dims[l + 1] + dims[l + 1];
    }

    for l in (0..n_layers).rev() {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let base = offsets[l];
        let x = &acts[l];
        for o in 0..fan_out {
            let d = weight * delta[o];
            if d == 0.0 {
                continue;
            }
            let row = &mut grad[base + o * fan_in..base + (o + 1) * fan_in];
            for (g, xi) in row.iter_mut().zip(x) {
                *g += d * xi;
            }
            grad[base + fan_in * fan_out + o] += d;
        }
        if l > 0 {
            let weights = &w[base..base + fan_in * fan_out];
            let mut prev = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                for (p, wi) in prev.iter_mut().zip(row) {
                    *p += wi * d;
                }
            }
            for (p, z) in prev.iter_mut().zip(&pre[l - 1]) {
                *p *= config.activation.derivative(*z);
            }
            delta = prev;
        }
    }
    loss
}

/// Loss `‖eps − forward(..)‖²` and its exact gradient in the parameters.
pub fn backward(
    params: &ParamVector,
    config: &DenoiserConfig,
    x_t: &[f64],
    t: usize,
    steps: usize,
    eps: &[f64],
) -> Result<(f64, GradientVector)> {
    check_inputs(params, config, x_t, t, steps)?;
    check_len(config.input_dim, eps.len())?;
    let mut grad = vec![0.0; params.len()];
    let loss = accumulate_gradient(&params.0, config, x_t, t, steps, eps, &mut grad, 1.0);
    Ok((loss, GradientVector(grad)))
}

/// Upper bound on the Lipschitz constant of `x_t ↦ forward(params, x_t, t)`:
/// product of per-layer Frobenius norms times the activation slope bound.
pub fn lipschitz_bound(params: &ParamVector, config: &DenoiserConfig) -> Result<f64> {
    check_params(params, config)?;
    let dims = config.layer_dims();
    let mut offset = 0;
    let mut bound = 1.0;
    for l in 0..dims.len() - 1 {
        let n_w = dims[l] * dims[l + 1];
        bound *= norm_sq(&params.0[offset..offset + n_w]).sqrt();
        if l + 2 < dims.len() {
            bound *= SILU_DERIVATIVE_BOUND;
        }
        offset += n_w + dims[l + 1];
    }
    Ok(bound)
}

/// A parameter vector bound to its architecture, usable wherever a
/// [`Denoiser`] is expected.
#[derive(Debug, Clone, Copy)]
pub struct MlpDenoiser<'a> {
    params: &'a ParamVector,
    config: &'a DenoiserConfig,
    steps: usize,
}

impl<'a> MlpDenoiser<'a> {
    pub fn new(params: &'a ParamVector, config: &'a DenoiserConfig, steps: usize) -> Result<Self> {
        check_params(params, config)?;
        if steps == 0 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        Ok(MlpDenoiser {
            params,
            config,
            steps,
        })
    }
}

impl Denoiser for MlpDenoiser<'_> {
    fn dim(&self) -> usize {
        self.config.input_dim
    }

    fn predict(&self, x_t: &[f64], t: usize) -> Sample {
        let (_, mut acts) = forward_trace(&self.params.0, self.config, x_t, t, self.steps);
        acts.pop().expect("network has an output layer")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig::new(1, vec![2], 2).unwrap()
    }

    fn silu(x: f64) -> f64 {
        x / (1.0 + (-x).exp())
    }

    #[test]
    fn param_count() {
        // (3→2) + (2→1): 6 + 2 + 2 + 1
        assert_eq!(tiny().num_params(), 11);
        let d = DenoiserConfig::default();
        assert_eq!(d.num_params(), 10 * 64 + 64 + 64 * 64 + 64 + 64 * 2 + 2);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let cfg = DenoiserConfig::default();
        let p = ParamVector::zeros(cfg.num_params());
        let y = forward(&p, &cfg, &[0.3, -0.4], 7, 100).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn hand_computed_forward() {
        let cfg = tiny();
        // layer 1: W1 = [[1, 0, 0], [0.5, 1, -1]], b1 = [0, 0.1]
        // layer 2: W2 = [[2, -1]], b2 = [0.3]
        let p = ParamVector::from(vec![
            1.0, 0.0, 0.0, 0.5, 1.0, -1.0, 0.0, 0.1, 2.0, -1.0, 0.3,
        ]);
        let (t, steps, x) = (5, 10, 0.4);
        let u: f64 = 0.5;
        let (s, c) = (u.sin(), u.cos());
        let h1 = silu(x);
        let h2 = silu(0.5 * x + s - c + 0.1);
        let expected = 2.0 * h1 - h2 + 0.3;
        let y = forward(&p, &cfg, &[x], t, steps).unwrap();
        assert!((y[0] - expected).abs() < 1e-15, "{} vs {}", y[0], expected);
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let cfg = tiny();
        let p = ParamVector::zeros(cfg.num_params());
        assert!(matches!(
            forward(&ParamVector::zeros(3), &cfg, &[0.0], 1, 10),
            Err(Error::ParamLength { .. })
        ));
        assert!(matches!(
            forward(&p, &cfg, &[0.0, 1.0], 1, 10),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            forward(&p, &cfg, &[0.0], 11, 10),
            Err(Error::TimestepOutOfRange { .. })
        ));
    }

    #[test]
    fn exact_fit_gives_zero_loss_and_gradient() {
        let cfg = DenoiserConfig::new(2, vec![8], 4).unwrap();
        let p = cfg.init_params(&mut stream(1, &[]));
        let x = [0.2, -0.7];
        let eps = forward(&p, &cfg, &x, 3, 10).unwrap();
        let (loss, grad) = backward(&p, &cfg, &x, 3, 10, &eps).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.as_slice().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn loss_is_quadratic_in_residual() {
        let cfg = DenoiserConfig::new(2, vec![8], 4).unwrap();
        let p = cfg.init_params(&mut stream(2, &[]));
        let x = [0.5, 0.1];
        let y = forward(&p, &cfg, &x, 4, 10).unwrap();
        let r = [0.3, -0.2];
        let eps1: Vec<f64> = y.iter().zip(&r).map(|(a, b)| a + b).collect();
        let eps2: Vec<f64> = y.iter().zip(&r).map(|(a, b)| a + 2.0 * b).collect();
        let (l1, _) = backward(&p, &cfg, &x, 4, 10, &eps1).unwrap();
        let (l2, _) = backward(&p, &cfg, &x, 4, 10, &eps2).unwrap();
        assert!((l2 - 4.0 * l1).abs() < 1e-14);
        assert!((l1 - 0.13).abs() < 1e-14);
    }

    #[test]
    fn axpy_identities() {
        let w = ParamVector::from(vec![1.0, -2.0, 3.5]);
        let g = [0.1, 0.2, -0.3];
        assert_eq!(axpy(&w, &g, 0.0).unwrap(), w);
        assert_eq!(
            axpy(&w, w.as_slice(), -1.0).unwrap(),
            ParamVector::zeros(3)
        );
        let back = axpy(&axpy(&w, &g, -0.01).unwrap(), &g, 0.01).unwrap();
        for (a, b) in back.as_slice().iter().zip(w.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(axpy(&w, &[1.0], 1.0).is_err());
    }

    #[test]
    fn serialization_roundtrip_and_layout() {
        let p = ParamVector::from(vec![1.5, -0.0, f64::MIN_POSITIVE]);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 3 * 8);
        assert_eq!(&buf[..8], &3u64.to_le_bytes());
        assert_eq!(&buf[8..16], &1.5f64.to_le_bytes());
        assert_eq!(ParamVector::read_from(&buf[..]).unwrap(), p);
        assert!(ParamVector::read_from(&buf[..20]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(ParamVector::read_from(&extra[..]).is_err());
    }

    #[test]
    fn embedding_shape() {
        let e = time_embedding(50, 100, 8);
        assert_eq!(e.len(), 8);
        assert!((e[0] - 0.5f64.sin()).abs() < 1e-15);
        assert!((e[7] - (32.0f64 * 0.5).cos()).abs() < 1e-12);
    }

    #[test]
    fn silu_slope_bound_holds() {
        let a = Activation::Silu;
        let max = (-2000..2000)
            .map(|i| a.derivative(i as f64 * 0.005))
            .fold(f64::MIN, f64::max);
        assert!(max <= SILU_DERIVATIVE_BOUND && max > 1.09);
    }
}
