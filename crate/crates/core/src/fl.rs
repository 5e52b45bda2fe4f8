//! Federated training loop: FedAvg, FedProx, FedDDPM and FedDDPM+.
//!
//! Rounds are 0-based. Every random draw comes from a stream derived from the
//! master seed and its role:
//!
//! - client selection in round `t`: `(SELECT, t)`
//! - client `i`'s local SGD in round `t`: `(CLIENT, t, i)`
//! - server correction in round `t`: `(SERVER, t)`
//! - warmup of client `i`: `(WARMUP, i)`
//!
//! so the trajectory does not depend on thread scheduling, and enabling the
//! server correction never perturbs what the clients draw.

use rand::Rng;
use rayon::prelude::*;

use crate::data::{AuxiliaryDataset, ClientDataset};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::metrics::{quick_test, EmaState, Evaluator};
use crate::net::{DenoiserConfig, ParamVector};
use crate::rng::{self, tag};
use crate::train::{self, batches_per_epoch, Proximal, SgdOutcome};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    FedAvg,
    FedProx { mu: f64 },
    FedDdpm,
    FedDdpmPlus,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::FedAvg => "fedavg",
            Variant::FedProx { .. } => "fedprox",
            Variant::FedDdpm => "fedddpm",
            Variant::FedDdpmPlus => "fedddpm+",
        }
    }

    /// Whether the variant needs warmup and an auxiliary dataset.
    pub fn uses_auxiliary(&self) -> bool {
        matches!(self, Variant::FedDdpm | Variant::FedDdpmPlus)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::FedProx { mu } => write!(f, "fedprox(mu={mu})"),
            other => f.write_str(other.name()),
        }
    }
}

/// Amount of local or server work: raw SGD steps, or passes over the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Work {
    Steps(usize),
    Epochs(usize),
}

impl Work {
    pub fn value(&self) -> usize {
        match *self {
            Work::Steps(v) | Work::Epochs(v) => v,
        }
    }

    /// SGD steps over a dataset of `m` samples with minibatch `batch_size`.
    pub fn steps_for(&self, m: usize, batch_size: usize) -> usize {
        match *self {
            Work::Steps(k) => k,
            Work::Epochs(e) => e * batches_per_epoch(m, batch_size),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// `w_t + (1/n)·Σ (w_i − w_t)` over the selected clients.
    #[default]
    Uniform,
    /// Selected clients weighted by local dataset size.
    SizeWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuickTestConfig {
    pub gamma: f64,
    pub threshold: f64,
    pub test_size: usize,
    /// QuickTest runs in rounds with `t mod period == 0`.
    pub period: usize,
}

impl Default for QuickTestConfig {
    fn default() -> Self {
        QuickTestConfig {
            gamma: 0.4,
            threshold: 0.2,
            test_size: 500,
            period: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlConfig {
    pub n_clients: usize,
    pub participation: f64,
    pub rounds: usize,
    pub local_work: Work,
    pub server_work: Work,
    pub client_lr: f64,
    pub server_lr: f64,
    pub batch_size: usize,
    pub variant: Variant,
    pub quicktest: QuickTestConfig,
    pub aux_ratio: f64,
    pub warmup_epochs: usize,
    pub aggregation: Aggregation,
    /// Run client updates on the rayon pool.
    pub parallel: bool,
}

impl Default for FlConfig {
    fn default() -> Self {
        FlConfig {
            n_clients: 20,
            participation: 0.25,
            rounds: 200,
            local_work: Work::Epochs(2),
            server_work: Work::Epochs(1),
            client_lr: 2e-2,
            server_lr: 2e-2,
            batch_size: 32,
            variant: Variant::FedDdpm,
            quicktest: QuickTestConfig::default(),
            aux_ratio: 0.1,
            warmup_epochs: 100,
            aggregation: Aggregation::Uniform,
            parallel: true,
        }
    }
}

impl FlConfig {
    /// Checks the invariants, naming the offending field.
    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        fn fail(field: &str, msg: impl Into<String>) -> std::result::Result<(), (String, String)> {
            Err((field.to_string(), msg.into()))
        }
        if self.n_clients == 0 {
            return fail("n_clients", "must be >= 1");
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return fail("participation", "must be in (0, 1]");
        }
        if self.rounds == 0 {
            return fail("rounds", "must be >= 1");
        }
        if self.local_work.value() == 0 {
            return fail("local_work", "must be >= 1");
        }
        if !(self.client_lr > 0.0 && self.client_lr.is_finite()) {
            return fail("client_lr", "must be > 0");
        }
        if !(self.server_lr > 0.0 && self.server_lr.is_finite()) {
            return fail("server_lr", "must be > 0");
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be >= 1");
        }
        if let Variant::FedProx { mu } = self.variant {
            if !(mu >= 0.0 && mu.is_finite()) {
                return fail("variant.mu", "must be >= 0");
            }
        }
        let q = &self.quicktest;
        if !(q.gamma > 0.0 && q.gamma < 1.0) {
            return fail("quicktest.gamma", "must be in (0, 1)");
        }
        if !(q.threshold > 0.0) {
            return fail("quicktest.threshold", "must be > 0");
        }
        if q.test_size < 2 {
            return fail("quicktest.test_size", "must be >= 2");
        }
        if q.period == 0 {
            return fail("quicktest.period", "must be >= 1");
        }
        if !(self.aux_ratio > 0.0 && self.aux_ratio <= 1.0) {
            return fail("aux_ratio", "must be in (0, 1]");
        }
        if self.variant.uses_auxiliary() && self.warmup_epochs == 0 {
            return fail("warmup_epochs", "must be >= 1 for FedDDPM variants");
        }
        Ok(())
    }

    pub fn clients_per_round(&self) -> usize {
        clients_per_round(self.n_clients, self.participation)
    }

    /// Switches to theory mode: both work units become SGD steps with the
    /// current values as K and E, and the stepsizes are replaced by the
    /// theoretical ones.
    pub fn apply_theory(&mut self, tp: TheoryParams) -> Result<TheoryStepsizes> {
        let k = self.local_work.value();
        let e = self.server_work.value();
        let steps = theoretical_stepsizes(
            tp,
            k,
            e,
            self.rounds,
            self.n_clients,
            self.clients_per_round(),
        )?;
        self.local_work = Work::Steps(k);
        self.server_work = Work::Steps(e);
        self.server_lr = steps.server_lr;
        self.client_lr = steps.client_lr;
        Ok(steps)
    }
}

/// `n = max(⌊N·p⌋, 1)`.
pub fn clients_per_round(n_clients: usize, participation: f64) -> usize {
    // the epsilon keeps products like 10 × 0.3 from flooring to 2
    let n = (n_clients as f64 * participation + 1e-9).floor() as usize;
    n.clamp(1, n_clients.max(1))
}

/// Uniform `n`-subset of `0..N` without replacement, returned in ascending order.
pub fn select_clients<R: Rng + ?Sized>(n_clients: usize, participation: f64, rng: &mut R) -> Vec<usize> {
    let n = clients_per_round(n_clients, participation);
    let mut ids = rand::seq::index::sample(rng, n_clients, n).into_vec();
    ids.sort_unstable();
    ids
}

/// Local training before federation: every client fits its own model for
/// `epochs` passes over its data, starting from its own initialisation.
pub fn warmup(
    clients: &[ClientDataset],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    schedule: &NoiseSchedule,
    config: &DenoiserConfig,
    seed: u64,
) -> Result<Vec<ParamVector>> {
    if epochs == 0 {
        return Err(Error::InvalidArgument("warmup epochs must be >= 1".into()));
    }
    if let Some(c) = clients.iter().find(|c| c.is_empty()) {
        return Err(Error::EmptyDataset(format!("client {} has no data", c.client_id)));
    }
    clients
        .par_iter()
        .enumerate()
        .map(|(i, client)| {
            let mut r = rng::stream(seed, &[tag::WARMUP, i as u64]);
            let init = config.init_params(&mut r);
            let points = client.points();
            let steps = Work::Epochs(epochs).steps_for(points.len(), batch_size);
            let out = train::sgd(&init, &points, steps, lr, batch_size, None, schedule, config, &mut r)?;
            Ok(out.params)
        })
        .collect()
}

/// Local SGD from the round-start model. FedProx adds `mu·(w − anchor)` to
/// every gradient; other variants ignore `anchor`.
#[allow(clippy::too_many_arguments)]
pub fn client_update<R: Rng + ?Sized>(
    start: &ParamVector,
    local_data: &ClientDataset,
    work: Work,
    lr: f64,
    batch_size: usize,
    variant: Variant,
    anchor: &ParamVector,
    schedule: &NoiseSchedule,
    config: &DenoiserConfig,
    rng: &mut R,
) -> Result<SgdOutcome> {
    if local_data.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "client {} has no data",
            local_data.client_id
        )));
    }
    let points = local_data.points();
    let steps = work.steps_for(points.len(), batch_size);
    let proximal = match variant {
        Variant::FedProx { mu } => Some(Proximal { mu, anchor }),
        _ => None,
    };
    train::sgd(start, &points, steps, lr, batch_size, proximal, schedule, config, rng)
}

/// `ŵ = w_t + (1/n)·Σ_i (w_i − w_t)`, summed in the given client order.
pub fn aggregate(global_prev: &ParamVector, client_models: &[ParamVector]) -> Result<ParamVector> {
    let n = client_models.len();
    aggregate_weighted(global_prev, client_models, &vec![1.0 / n.max(1) as f64; n])
}

/// `ŵ = w_t + Σ_i weight_i·(w_i − w_t)`.
pub fn aggregate_weighted(
    global_prev: &ParamVector,
    client_models: &[ParamVector],
    weights: &[f64],
) -> Result<ParamVector> {
    if client_models.is_empty() {
        return Err(Error::InvalidArgument("no client models to aggregate".into()));
    }
    if weights.len() != client_models.len() {
        return Err(Error::DimensionMismatch {
            expected: client_models.len(),
            got: weights.len(),
        });
    }
    let len = global_prev.len();
    if let Some(m) = client_models.iter().find(|m| m.len() != len) {
        return Err(Error::ParamLength {
            expected: len,
            got: m.len(),
        });
    }
    let base = global_prev.as_slice();
    let mut delta = vec![0.0; len];
    for (model, &w) in client_models.iter().zip(weights) {
        for ((d, m), b) in delta.iter_mut().zip(model.as_slice()).zip(base) {
            *d += w * (m - b);
        }
    }
    Ok(ParamVector::from(
        base.iter().zip(&delta).map(|(b, d)| b + d).collect::<Vec<_>>(),
    ))
}

/// Server-side SGD on the auxiliary dataset with stepsize `lr`.
#[allow(clippy::too_many_arguments)]
pub fn server_correct<R: Rng + ?Sized>(
    agg: &ParamVector,
    aux: &AuxiliaryDataset,
    work: Work,
    lr: f64,
    batch_size: usize,
    schedule: &NoiseSchedule,
    config: &DenoiserConfig,
    rng: &mut R,
) -> Result<ParamVector> {
    if work.value() == 0 {
        return Ok(agg.clone());
    }
    if aux.is_empty() {
        return Err(Error::EmptyDataset("auxiliary dataset is empty".into()));
    }
    let steps = work.steps_for(aux.len(), batch_size);
    Ok(train::sgd(agg, &aux.samples, steps, lr, batch_size, None, schedule, config, rng)?.params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    /// Model right after aggregation.
    pub aggregated: ParamVector,
    /// Global model at the end of the round (after any correction).
    pub global: ParamVector,
    pub mean_client_loss: f64,
    pub score: Option<f64>,
    pub stationarity: Option<f64>,
    pub corrected: bool,
    pub early_exit: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub final_params: ParamVector,
    pub records: Vec<RoundRecord>,
    pub early_exit_round: Option<usize>,
    pub corrections: usize,
}

impl RunOutcome {
    pub fn rounds_executed(&self) -> usize {
        self.records.len()
    }
}

/// Extra per-round scoring for variants without QuickTest.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Score the global model every this many rounds (0 = never).
    pub score_every: usize,
}

/// Executes the configured federated training.
#[allow(clippy::too_many_arguments)]
pub fn run(
    config: &FlConfig,
    clients: &[ClientDataset],
    aux: Option<&AuxiliaryDataset>,
    init: &ParamVector,
    schedule: &NoiseSchedule,
    net: &DenoiserConfig,
    evaluator: &Evaluator,
    options: RunOptions,
    seed: u64,
) -> Result<RunOutcome> {
    config
        .validate()
        .map_err(|(field, msg)| Error::InvalidArgument(format!("{field}: {msg}")))?;
    if clients.len() != config.n_clients {
        return Err(Error::InvalidArgument(format!(
            "config expects {} clients, got {}",
            config.n_clients,
            clients.len()
        )));
    }
    if let Some(c) = clients.iter().find(|c| c.is_empty()) {
        return Err(Error::EmptyDataset(format!("client {} has no data", c.client_id)));
    }
    let aux = match (config.variant.uses_auxiliary(), aux) {
        (true, None) => {
            return Err(Error::InvalidArgument(format!(
                "{} needs an auxiliary dataset",
                config.variant
            )))
        }
        (_, a) => a,
    };

    let mut global = init.clone();
    let mut records = Vec::with_capacity(config.rounds);
    let mut ema = EmaState::new(
        config.quicktest.gamma,
        config.quicktest.threshold,
        config.quicktest.test_size,
    )?;
    let mut early_exit_round = None;
    let mut corrections = 0;

    for t in 0..config.rounds {
        let selected = select_clients(
            config.n_clients,
            config.participation,
            &mut rng::stream(seed, &[tag::SELECT, t as u64]),
        );
        let update = |&i: &usize| {
            let mut r = rng::stream(seed, &[tag::CLIENT, t as u64, i as u64]);
            client_update(
                &global,
                &clients[i],
                config.local_work,
                config.client_lr,
                config.batch_size,
                config.variant,
                &global,
                schedule,
                net,
                &mut r,
            )
        };
        let outcomes: Vec<SgdOutcome> = if config.parallel {
            selected.par_iter().map(update).collect::<Result<_>>()?
        } else {
            selected.iter().map(update).collect::<Result<_>>()?
        };
        let mean_client_loss =
            outcomes.iter().map(|o| o.mean_loss).sum::<f64>() / outcomes.len() as f64;
        let models: Vec<ParamVector> = outcomes.into_iter().map(|o| o.params).collect();
        let aggregated = match config.aggregation {
            Aggregation::Uniform => aggregate(&global, &models)?,
            Aggregation::SizeWeighted => {
                let sizes: Vec<f64> = selected.iter().map(|&i| clients[i].len() as f64).collect();
                let total: f64 = sizes.iter().sum();
                let weights: Vec<f64> = sizes.iter().map(|s| s / total).collect();
                aggregate_weighted(&global, &models, &weights)?
            }
        };

        let mut score = None;
        let mut corrected = false;
        let mut early_exit = false;
        let correct = |w: &ParamVector| {
            server_correct(
                w,
                aux.expect("checked above"),
                config.server_work,
                config.server_lr,
                config.batch_size,
                schedule,
                net,
                &mut rng::stream(seed, &[tag::SERVER, t as u64]),
            )
        };
        let next = match config.variant {
            Variant::FedDdpm => {
                corrected = config.server_work.value() > 0;
                correct(&aggregated)?
            }
            Variant::FedDdpmPlus if t % config.quicktest.period == 0 => {
                let s = evaluator.score_with(&aggregated, net, schedule, t as u64, config.quicktest.test_size)?;
                score = Some(s);
                let (trigger, state) = quick_test(&ema, s);
                ema = state;
                if trigger {
                    early_exit = true;
                    corrected = config.server_work.value() > 0;
                    correct(&aggregated)?
                } else {
                    aggregated.clone()
                }
            }
            _ => aggregated.clone(),
        };
        if score.is_none() && options.score_every > 0 && t % options.score_every == 0 {
            score = Some(evaluator.score(&next, net, schedule, t as u64)?);
        }
        let stationarity = evaluator.stationarity(&next, net, schedule)?;
        if corrected {
            corrections += 1;
        }
        global = next;
        records.push(RoundRecord {
            round: t,
            selected,
            aggregated,
            global: global.clone(),
            mean_client_loss,
            score,
            stationarity,
            corrected,
            early_exit,
        });
        if early_exit {
            early_exit_round = Some(t);
            break;
        }
    }

    Ok(RunOutcome {
        final_params: global,
        records,
        early_exit_round,
        corrections,
    })
}

/// Smoothness constant supplied by the user for theory-mode stepsizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryParams {
    pub lipschitz: f64,
}

/// Evaluation of the two stepsize conditions required by the convergence bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintReport {
    /// `ζ·K·L`.
    pub zeta_kl: f64,
    /// `n(N−1) / (N(n−1))`; `None` when `n = 1` (condition vacuous).
    pub zeta_kl_bound: Option<f64>,
    pub zeta_kl_ok: bool,
    /// `½ − 9K²ζ²L² − (ζL(N−n)/(2n(N−1)))·(54K³ζ²L² + 3K)`; any `C` in
    /// `[0, c_upper)` is admissible when this is positive.
    pub c_upper: f64,
    pub c_positive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryStepsizes {
    /// η = 1/(L·E·√T).
    pub server_lr: f64,
    /// ζ = 1/(2·L·K·√T).
    pub client_lr: f64,
    pub report: ConstraintReport,
}

pub fn theoretical_stepsizes(
    tp: TheoryParams,
    local_steps: usize,
    server_steps: usize,
    rounds: usize,
    n_clients: usize,
    per_round: usize,
) -> Result<TheoryStepsizes> {
    if !(tp.lipschitz > 0.0 && tp.lipschitz.is_finite()) {
        return Err(Error::InvalidArgument("lipschitz constant must be > 0".into()));
    }
    if local_steps == 0 || server_steps == 0 || rounds == 0 || n_clients == 0 || per_round == 0 {
        return Err(Error::InvalidArgument(
            "K, E, T, N and n must all be positive".into(),
        ));
    }
    if per_round > n_clients {
        return Err(Error::InvalidArgument(format!(
            "n = {per_round} exceeds N = {n_clients}"
        )));
    }
    let l = tp.lipschitz;
    let k = local_steps as f64;
    let e = server_steps as f64;
    let sqrt_t = (rounds as f64).sqrt();
    let (big_n, n) = (n_clients as f64, per_round as f64);

    let server_lr = 1.0 / (l * e * sqrt_t);
    let client_lr = 1.0 / (2.0 * l * k * sqrt_t);
    let zeta = client_lr;

    let zeta_kl = zeta * k * l;
    let zeta_kl_bound = if per_round == 1 {
        None
    } else {
        Some(n * (big_n - 1.0) / (big_n * (n - 1.0)))
    };
    let zeta_kl_ok = zeta_kl_bound.is_none_or(|b| zeta_kl <= b);

    // (N − n)/(n(N − 1)) is 0 under full participation, including N = n = 1
    let sampling = if per_round == n_clients {
        0.0
    } else {
        (big_n - n) / (n * (big_n - 1.0))
    };
    let c_upper = 0.5
        - 9.0 * k * k * zeta * zeta * l * l
        - 0.5 * zeta * l * sampling * (54.0 * k.powi(3) * zeta * zeta * l * l + 3.0 * k);

    Ok(TheoryStepsizes {
        server_lr,
        client_lr,
        report: ConstraintReport {
            zeta_kl,
            zeta_kl_bound,
            zeta_kl_ok,
            c_upper,
            c_positive: c_upper > 0.0,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn per_round_counts() {
        assert_eq!(clients_per_round(100, 0.15), 15);
        assert_eq!(clients_per_round(100, 0.3), 30);
        assert_eq!(clients_per_round(10, 0.05), 1);
        assert_eq!(clients_per_round(10, 0.3), 3);
        assert_eq!(clients_per_round(20, 0.25), 5);
        assert_eq!(clients_per_round(7, 1.0), 7);
    }

    #[test]
    fn selection_is_distinct_and_in_range() {
        for s in 0..50 {
            let ids = select_clients(100, 0.15, &mut stream(s, &[]));
            assert_eq!(ids.len(), 15);
            assert!(ids.windows(2).all(|w| w[0] < w[1]));
            assert!(ids.iter().all(|&i| i < 100));
        }
        assert_eq!(select_clients(10, 0.05, &mut stream(0, &[])).len(), 1);
    }

    #[test]
    fn aggregate_identities() {
        let w = ParamVector::from(vec![1.0, 2.0, -3.0]);
        assert_eq!(aggregate(&w, &[w.clone(), w.clone()]).unwrap(), w);
        let plus = ParamVector::from(vec![1.5, 1.0, -3.25]);
        let minus = ParamVector::from(vec![0.5, 3.0, -2.75]);
        assert_eq!(aggregate(&w, &[plus.clone(), minus]).unwrap(), w);
        assert_eq!(aggregate(&w, std::slice::from_ref(&plus)).unwrap(), plus);
        assert!(aggregate(&w, &[]).is_err());
        assert!(aggregate(&w, &[ParamVector::zeros(2)]).is_err());
    }

    #[test]
    fn weighted_aggregate() {
        let w = ParamVector::zeros(1);
        let a = ParamVector::from(vec![1.0]);
        let b = ParamVector::from(vec![4.0]);
        let out = aggregate_weighted(&w, &[a, b], &[0.75, 0.25]).unwrap();
        assert_eq!(out.as_slice(), &[1.75]);
    }

    #[test]
    fn work_units() {
        assert_eq!(Work::Steps(3).steps_for(1000, 32), 3);
        assert_eq!(Work::Epochs(2).steps_for(200, 32), 14);
        assert_eq!(Work::Epochs(0).steps_for(200, 32), 0);
    }

    #[test]
    fn theory_stepsize_arithmetic() {
        let tp = TheoryParams { lipschitz: 1.0 };
        let s = theoretical_stepsizes(tp, 2, 4, 100, 100, 15).unwrap();
        assert!((s.server_lr - 0.025).abs() < 1e-15);
        assert!((s.client_lr - 0.025).abs() < 1e-15);

        // direct substitution: ζKL = 0.05; bound = 15·99/(100·14)
        let r = s.report;
        assert!((r.zeta_kl - 0.05).abs() < 1e-15);
        assert!((r.zeta_kl_bound.unwrap() - 1485.0 / 1400.0).abs() < 1e-15);
        assert!(r.zeta_kl_ok);
        let sampling = 85.0 / (15.0 * 99.0);
        let expected = 0.5
            - 9.0 * 4.0 * 0.025f64.powi(2)
            - 0.5 * 0.025 * sampling * (54.0 * 8.0 * 0.025f64.powi(2) + 6.0);
        assert!((r.c_upper - expected).abs() < 1e-15);
        assert!(r.c_positive);
    }

    #[test]
    fn theory_single_client_per_round_is_vacuous() {
        let s = theoretical_stepsizes(TheoryParams { lipschitz: 2.0 }, 1, 1, 4, 10, 1).unwrap();
        assert_eq!(s.report.zeta_kl_bound, None);
        assert!(s.report.zeta_kl_ok);
        let s = theoretical_stepsizes(TheoryParams { lipschitz: 2.0 }, 1, 1, 4, 1, 1).unwrap();
        assert!(s.report.c_upper.is_finite());
    }

    #[test]
    fn theory_rejects_bad_inputs() {
        let tp = TheoryParams { lipschitz: 1.0 };
        assert!(theoretical_stepsizes(TheoryParams { lipschitz: 0.0 }, 1, 1, 1, 1, 1).is_err());
        assert!(theoretical_stepsizes(tp, 0, 1, 1, 1, 1).is_err());
        assert!(theoretical_stepsizes(tp, 1, 0, 1, 1, 1).is_err());
        assert!(theoretical_stepsizes(tp, 1, 1, 1, 2, 3).is_err());
    }

    #[test]
    fn config_validation_names_fields() {
        let mut c = FlConfig::default();
        assert!(c.validate().is_ok());
        c.participation = 0.0;
        assert_eq!(c.validate().unwrap_err().0, "participation");
        c = FlConfig::default();
        c.quicktest.gamma = 1.0;
        assert_eq!(c.validate().unwrap_err().0, "quicktest.gamma");
    }
}
