//! Federated training of denoising diffusion models at desk scale.
//!
//! The crate simulates FedAvg, FedProx, FedDDPM (server-side correction on a
//! synthetic auxiliary dataset after every aggregation) and FedDDPM+ (an
//! EMA-gated one-shot correction followed by early exit) on small Gaussian
//! mixture datasets, with a multilayer-perceptron noise predictor whose
//! gradients are computed by hand.
//!
//! Module map:
//!
//! - [`diffusion`]: noise schedule, forward jump, noise-prediction loss, ancestral sampler,
//!   closed-form Gaussian denoiser
//! - [`net`]: the MLP denoiser, its backward pass and flat parameter arithmetic
//! - [`train`]: minibatch SGD shared by warmup, clients and server
//! - [`data`]: mixtures, shard / Dirichlet partitioning, auxiliary dataset
//! - [`fl`]: the federated loop and theory-mode stepsizes
//! - [`metrics`]: Fréchet distance, QuickTest, stationarity estimate
//! - [`harness`]: experiment configs, round logs, comparison tables
//! - [`checks`]: gradient and analytic-denoiser self-checks

pub mod data;
pub mod diffusion;
pub mod checks;
pub mod error;
pub mod fl;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
