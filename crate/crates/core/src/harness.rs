//! Experiment configs, runs and comparison tables.
//!
//! A config is a TOML file with flat sections (`[data]`, `[diffusion]`,
//! `[model]`, `[fl]`, `[quicktest]`, `[theory]`, `[eval]`, `[output]`); every
//! key is optional and falls back to the desk-scale defaults. Unknown keys are
//! rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Deserialize;
use thiserror::Error;

use crate::data::{self, AuxiliaryDataset, ClientDataset, LabeledSample, MixtureComponent, MixtureSpec};
use crate::diffusion::{GaussianSpec, NoiseSchedule, Sample};
use crate::fl::{self, Aggregation, FlConfig, QuickTestConfig, RunOptions, RunOutcome, TheoryParams, TheoryStepsizes, Variant, Work};
use crate::linalg::Matrix;
use crate::metrics::{draw_probe, Evaluator};
use crate::net::{Activation, DenoiserConfig, ParamVector};
use crate::rng::{self, tag};

pub const ROUND_LOG_HEADER: &str = "round,variant,loss,grad_norm_sq,score,wallclock_ms,early_exit";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Runtime(#[from] crate::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl HarnessError {
    /// 1 for config problems, 2 for anything that failed while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } => 1,
            _ => 2,
        }
    }

    fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        HarnessError::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type HarnessResult<T> = std::result::Result<T, HarnessError>;

// ---------------------------------------------------------------------------
// Raw file schema

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RawConfig {
    pub name: Option<String>,
    pub seed: u64,
    pub data: RawData,
    pub diffusion: RawDiffusion,
    pub model: RawModel,
    pub fl: RawFl,
    pub quicktest: RawQuickTest,
    pub theory: Option<RawTheory>,
    pub eval: RawEval,
    pub output: RawOutput,
}


#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RawData {
    pub size: usize,
    pub partition: String,
    pub alpha: f64,
    pub means: Vec<Vec<f64>>,
    pub sigma: f64,
    pub weights: Option<Vec<f64>>,
}

impl Default for RawData {
    fn default() -> Self {
        RawData {
            size: 4000,
            partition: "shard".into(),
            alpha: 0.3,
            means: vec![
                vec![2.0, 2.0],
                vec![-2.0, 2.0],
                vec![-2.0, -2.0],
                vec![2.0, -2.0],
            ],
            sigma: 0.5,
            weights: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RawDiffusion {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for RawDiffusion {
    fn default() -> Self {
        RawDiffusion {
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RawModel {
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub activation: Activation,
}

impl Default for RawModel {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        RawModel {
            hidden: d.hidden_dims,
            time_embed_dim: d.time_embed_dim,
            activation: d.activation,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RawFl {
    pub variant: String,
    pub mu: f64,
    pub n_clients: usize,
    pub participation: f64,
    pub rounds: usize,
    pub local_work: usize,
    pub local_unit: String,
    pub server_work: usize,
    pub server_unit: String,
    pub client_lr: f64,
    pub server_lr: f64,
    pub batch_size: usize,
    pub aux_ratio: f64,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub aggregation: String,
    pub parallel: bool,
}

impl Default for RawFl {
    fn default() -> Self {
        let d = FlConfig::default();
        RawFl {
            variant: d.variant.name().into(),
            mu: 0.01,
            n_clients: d.n_clients,
            participation: d.participation,
            rounds: d.rounds,
            local_work: d.local_work.value(),
            local_unit: "epochs".into(),
            server_work: d.server_work.value(),
            server_unit: "epochs".into(),
            client_lr: d.client_lr,
            server_lr: d.server_lr,
            batch_size: d.batch_size,
            aux_ratio: d.aux_ratio,
            warmup_epochs: d.warmup_epochs,
            warmup_lr: 2e-2,
            aggregation: "uniform".into(),
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RawQuickTest {
    pub gamma: f64,
    pub threshold: f64,
    pub test_size: usize,
    pub period: usize,
}

impl Default for RawQuickTest {
    fn default() -> Self {
        let q = QuickTestConfig::default();
        RawQuickTest {
            gamma: q.gamma,
            threshold: q.threshold,
            test_size: q.test_size,
            period: q.period,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RawTheory {
    pub lipschitz: f64,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RawEval {
    pub final_size: usize,
    pub score_every: usize,
    pub probe_size: usize,
}

impl Default for RawEval {
    fn default() -> Self {
        RawEval {
            final_size: 2000,
            score_every: 0,
            probe_size: 256,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RawOutput {
    pub dir: Option<PathBuf>,
    pub wallclock: bool,
    pub checkpoint_every: usize,
    pub dump_data: bool,
}


// ---------------------------------------------------------------------------
// Validated experiment

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Partition {
    Shard,
    Dirichlet { alpha: f64 },
}

impl Partition {
    pub fn label(&self) -> String {
        match self {
            Partition::Shard => "shard".into(),
            Partition::Dirichlet { alpha } => format!("dirichlet(alpha={alpha})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalParams {
    pub final_size: usize,
    pub score_every: usize,
    pub probe_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputParams {
    pub dir: Option<PathBuf>,
    pub wallclock: bool,
    pub checkpoint_every: usize,
    pub dump_data: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: Option<String>,
    pub fl: FlConfig,
    pub warmup_lr: f64,
    pub mixture: MixtureSpec,
    pub partition: Partition,
    pub dataset_size: usize,
    pub schedule: ScheduleParams,
    pub model: DenoiserConfig,
    pub theory: Option<TheoryParams>,
    pub eval: EvalParams,
    pub output: OutputParams,
    pub seed: u64,
}

fn parse_unit(path: &str, unit: &str, value: usize) -> HarnessResult<Work> {
    match unit {
        "steps" => Ok(Work::Steps(value)),
        "epochs" => Ok(Work::Epochs(value)),
        other => Err(HarnessError::config(
            path,
            format!("unknown unit {other:?}, expected \"steps\" or \"epochs\""),
        )),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> HarnessResult<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let at = e
                .span()
                .map(|s| {
                    let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
                    format!("line {line}")
                })
                .unwrap_or_else(|| "<document>".into());
            HarnessError::config(at, msg)
        })?;
        Self::from_raw(raw)
    }

    pub fn load(path: &Path) -> HarnessResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::config(path.display().to_string(), e.to_string()))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config { path: p, message } => HarnessError::Config {
                path: format!("{}: {p}", path.display()),
                message,
            },
            other => other,
        })
    }

    pub fn from_raw(raw: RawConfig) -> HarnessResult<Self> {
        let d = &raw.data;
        if d.size == 0 {
            return Err(HarnessError::config("data.size", "must be >= 1"));
        }
        if d.means.is_empty() {
            return Err(HarnessError::config("data.means", "need at least one component"));
        }
        if !(d.sigma > 0.0 && d.sigma.is_finite()) {
            return Err(HarnessError::config("data.sigma", "must be > 0"));
        }
        let dim = d.means[0].len();
        if dim == 0 || d.means.iter().any(|m| m.len() != dim) {
            return Err(HarnessError::config(
                "data.means",
                "all means must share one nonzero dimension",
            ));
        }
        let weights = match &d.weights {
            Some(w) if w.len() != d.means.len() => {
                return Err(HarnessError::config(
                    "data.weights",
                    format!("expected {} weights, got {}", d.means.len(), w.len()),
                ))
            }
            Some(w) => w.clone(),
            None => vec![1.0 / d.means.len() as f64; d.means.len()],
        };
        let components = d
            .means
            .iter()
            .zip(&weights)
            .enumerate()
            .map(|(i, (m, &w))| {
                Ok(MixtureComponent {
                    weight: w,
                    gaussian: GaussianSpec::new(
                        m.clone(),
                        Matrix::scaled_identity(dim, d.sigma * d.sigma),
                    )?,
                    label: i as u32,
                })
            })
            .collect::<crate::Result<Vec<_>>>()
            .map_err(|e| HarnessError::config("data.means", e.to_string()))?;
        let mixture = MixtureSpec::new(components)
            .map_err(|e| HarnessError::config("data.weights", e.to_string()))?;
        let partition = match d.partition.as_str() {
            "shard" => Partition::Shard,
            "dirichlet" => {
                if !(d.alpha > 0.0 && d.alpha.is_finite()) {
                    return Err(HarnessError::config("data.alpha", "must be > 0"));
                }
                Partition::Dirichlet { alpha: d.alpha }
            }
            other => {
                return Err(HarnessError::config(
                    "data.partition",
                    format!("unknown partition {other:?}, expected \"shard\" or \"dirichlet\""),
                ))
            }
        };

        let s = &raw.diffusion;
        NoiseSchedule::linear(s.steps, s.beta_start, s.beta_end)
            .map_err(|e| HarnessError::config("diffusion", e.to_string()))?;

        let model = DenoiserConfig {
            input_dim: dim,
            hidden_dims: raw.model.hidden.clone(),
            time_embed_dim: raw.model.time_embed_dim,
            activation: raw.model.activation,
        };
        model
            .validate()
            .map_err(|e| HarnessError::config("model", e.to_string()))?;

        let f = &raw.fl;
        let variant = match f.variant.as_str() {
            "fedavg" => Variant::FedAvg,
            "fedprox" => Variant::FedProx { mu: f.mu },
            "fedddpm" => Variant::FedDdpm,
            "fedddpm+" | "fedddpm_plus" => Variant::FedDdpmPlus,
            other => {
                return Err(HarnessError::config(
                    "fl.variant",
                    format!("unknown variant {other:?}, expected fedavg, fedprox, fedddpm or fedddpm+"),
                ))
            }
        };
        let aggregation = match f.aggregation.as_str() {
            "uniform" => Aggregation::Uniform,
            "size_weighted" => Aggregation::SizeWeighted,
            other => {
                return Err(HarnessError::config(
                    "fl.aggregation",
                    format!("unknown aggregation {other:?}, expected uniform or size_weighted"),
                ))
            }
        };
        let q = &raw.quicktest;
        let fl = FlConfig {
            n_clients: f.n_clients,
            participation: f.participation,
            rounds: f.rounds,
            local_work: parse_unit("fl.local_unit", &f.local_unit, f.local_work)?,
            server_work: parse_unit("fl.server_unit", &f.server_unit, f.server_work)?,
            client_lr: f.client_lr,
            server_lr: f.server_lr,
            batch_size: f.batch_size,
            variant,
            quicktest: QuickTestConfig {
                gamma: q.gamma,
                threshold: q.threshold,
                test_size: q.test_size,
                period: q.period,
            },
            aux_ratio: f.aux_ratio,
            warmup_epochs: f.warmup_epochs,
            aggregation,
            parallel: f.parallel,
        };
        fl.validate().map_err(|(field, msg)| {
            let section = if field.starts_with("quicktest.") { "" } else { "fl." };
            HarnessError::config(format!("{section}{field}"), msg)
        })?;
        if variant.uses_auxiliary() && !(f.warmup_lr > 0.0 && f.warmup_lr.is_finite()) {
            return Err(HarnessError::config("fl.warmup_lr", "must be > 0"));
        }
        if d.size < 2 * f.n_clients && partition == Partition::Shard {
            return Err(HarnessError::config(
                "data.size",
                format!("shard partitioning needs at least {} samples", 2 * f.n_clients),
            ));
        }

        let theory = match &raw.theory {
            Some(t) if !(t.lipschitz > 0.0 && t.lipschitz.is_finite()) => {
                return Err(HarnessError::config("theory.lipschitz", "must be > 0"))
            }
            Some(t) => {
                if f.server_work == 0 {
                    return Err(HarnessError::config(
                        "fl.server_work",
                        "theory mode needs E >= 1",
                    ));
                }
                Some(TheoryParams {
                    lipschitz: t.lipschitz,
                })
            }
            None => None,
        };

        let e = &raw.eval;
        if e.final_size < 2 {
            return Err(HarnessError::config("eval.final_size", "must be >= 2"));
        }

        Ok(ExperimentConfig {
            name: raw.name.clone(),
            fl,
            warmup_lr: f.warmup_lr,
            mixture,
            partition,
            dataset_size: d.size,
            schedule: ScheduleParams {
                steps: s.steps,
                beta_start: s.beta_start,
                beta_end: s.beta_end,
            },
            model,
            theory,
            eval: EvalParams {
                final_size: e.final_size,
                score_every: e.score_every,
                probe_size: e.probe_size,
            },
            output: OutputParams {
                dir: raw.output.dir.clone(),
                wallclock: raw.output.wallclock,
                checkpoint_every: raw.output.checkpoint_every,
                dump_data: raw.output.dump_data,
            },
            seed: raw.seed,
        })
    }

    pub fn noise_schedule(&self) -> crate::Result<NoiseSchedule> {
        NoiseSchedule::linear(
            self.schedule.steps,
            self.schedule.beta_start,
            self.schedule.beta_end,
        )
    }

    /// Display label used in tables and logs.
    pub fn variant_label(&self) -> String {
        self.fl.variant.to_string()
    }
}

// ---------------------------------------------------------------------------
// Running

/// Data, partition, initial model and (when needed) auxiliary dataset for one
/// experiment. Independent of the FL variant, so runs that differ only in
/// variant can share one setup.
#[derive(Debug, Clone)]
pub struct Setup {
    pub global: Vec<LabeledSample>,
    pub clients: Vec<ClientDataset>,
    pub schedule: NoiseSchedule,
    pub init: ParamVector,
    pub aux: Option<AuxiliaryDataset>,
    pub dropped_clients: usize,
}

/// Generates data, partitions it, and builds the auxiliary dataset when
/// `with_aux` is set. Clients left empty by the partition are dropped.
pub fn prepare(config: &ExperimentConfig, with_aux: bool) -> crate::Result<Setup> {
    let seed = config.seed;
    let schedule = config.noise_schedule()?;
    let global = data::generate_global_dataset(
        &config.mixture,
        config.dataset_size,
        &mut rng::stream(seed, &[tag::DATA]),
    )?;
    let mut part_rng = rng::stream(seed, &[tag::PARTITION]);
    let partitioned = match config.partition {
        Partition::Shard => data::partition_shard(&global, config.fl.n_clients, &mut part_rng)?,
        Partition::Dirichlet { alpha } => {
            data::partition_dirichlet(&global, config.fl.n_clients, alpha, &mut part_rng)?
        }
    };
    let before = partitioned.len();
    let clients: Vec<ClientDataset> = partitioned
        .into_iter()
        .filter(|c| !c.is_empty())
        .enumerate()
        .map(|(i, mut c)| {
            c.client_id = i;
            c
        })
        .collect();
    let dropped = before - clients.len();
    if dropped > 0 {
        log::warn!("{dropped} clients received no data and were dropped");
    }
    let init = config.model.init_params(&mut rng::stream(seed, &[tag::INIT]));

    let aux = if with_aux {
        let models = fl::warmup(
            &clients,
            config.fl.warmup_epochs,
            config.warmup_lr,
            config.fl.batch_size,
            &schedule,
            &config.model,
            seed,
        )?;
        let pairs: Vec<(ParamVector, &ClientDataset)> = models.into_iter().zip(&clients).collect();
        Some(data::build_auxiliary_dataset(
            &pairs,
            config.fl.aux_ratio,
            &schedule,
            &config.model,
            rng::derive_seed(seed, &[tag::AUX]),
        )?)
    } else {
        None
    };

    Ok(Setup {
        global,
        clients,
        schedule,
        init,
        aux,
        dropped_clients: dropped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLogRecord {
    pub round: usize,
    pub variant: String,
    pub loss: f64,
    pub grad_norm_sq: Option<f64>,
    pub score: Option<f64>,
    pub wallclock_ms: u64,
    pub early_exit: bool,
}

impl RoundLogRecord {
    pub fn to_csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        format!(
            "{},{},{:?},{},{},{},{}",
            self.round,
            self.variant,
            self.loss,
            opt(self.grad_norm_sq),
            opt(self.score),
            self.wallclock_ms,
            u8::from(self.early_exit)
        )
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub variant: String,
    pub partition: String,
    pub seed: u64,
    pub final_score: f64,
    pub rounds_configured: usize,
    pub rounds_executed: usize,
    pub early_exit_round: Option<usize>,
    pub corrections: usize,
    pub clients: usize,
    pub aux_size: usize,
    pub theory: Option<TheoryStepsizes>,
    pub log: Vec<RoundLogRecord>,
    pub outcome: RunOutcome,
}

impl ExperimentResult {
    pub fn round_log_csv(&self) -> String {
        let mut s = String::from(ROUND_LOG_HEADER);
        s.push('\n');
        for r in &self.log {
            s.push_str(&r.to_csv_line());
            s.push('\n');
        }
        s
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_else(|| "none".into());
        let _ = writeln!(s, "variant = {}", self.variant);
        let _ = writeln!(s, "partition = {}", self.partition);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "clients = {}", self.clients);
        let _ = writeln!(s, "aux_size = {}", self.aux_size);
        let _ = writeln!(s, "rounds_configured = {}", self.rounds_configured);
        let _ = writeln!(s, "rounds_executed = {}", self.rounds_executed);
        let _ = writeln!(s, "early_exit_round = {}", opt(self.early_exit_round));
        let _ = writeln!(s, "corrections = {}", self.corrections);
        let _ = writeln!(s, "final_score = {:?}", self.final_score);
        if let Some(t) = &self.theory {
            let _ = writeln!(s, "theory_server_lr = {:?}", t.server_lr);
            let _ = writeln!(s, "theory_client_lr = {:?}", t.client_lr);
            let _ = writeln!(s, "theory_zeta_kl = {:?}", t.report.zeta_kl);
            let _ = writeln!(
                s,
                "theory_zeta_kl_bound = {}",
                t.report
                    .zeta_kl_bound
                    .map(|b| format!("{b:?}"))
                    .unwrap_or_else(|| "vacuous".into())
            );
            let _ = writeln!(s, "theory_zeta_kl_ok = {}", t.report.zeta_kl_ok);
            let _ = writeln!(s, "theory_c_upper = {:?}", t.report.c_upper);
            let _ = writeln!(s, "theory_c_positive = {}", t.report.c_positive);
        }
        s
    }
}

/// Runs one experiment on a prepared setup.
pub fn run_with_setup(config: &ExperimentConfig, setup: &Setup) -> HarnessResult<ExperimentResult> {
    let mut fl_config = config.fl.clone();
    fl_config.n_clients = setup.clients.len();
    let theory = match config.theory {
        Some(tp) => Some(fl_config.apply_theory(tp)?),
        None => None,
    };

    let real: Vec<Sample> = setup.global.iter().map(|s| s.point.clone()).collect();
    let probe_points = &real[..config.eval.probe_size.min(real.len())];
    let evaluator = Evaluator::new(&real, fl_config.quicktest.test_size, config.seed)?
        .with_probe(draw_probe(probe_points, &setup.schedule, config.seed));

    let aux = if fl_config.variant.uses_auxiliary() {
        match &setup.aux {
            Some(a) => Some(a),
            None => {
                return Err(HarnessError::Runtime(crate::Error::InvalidArgument(
                    "setup has no auxiliary dataset".into(),
                )))
            }
        }
    } else {
        None
    };

    let started = Instant::now();
    let outcome = fl::run(
        &fl_config,
        &setup.clients,
        aux,
        &setup.init,
        &setup.schedule,
        &config.model,
        &evaluator,
        RunOptions {
            score_every: config.eval.score_every,
        },
        config.seed,
    )?;
    let elapsed = started.elapsed().as_millis() as u64;
    let per_round = elapsed / outcome.records.len().max(1) as u64;

    let variant = config.variant_label();
    let log = outcome
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| RoundLogRecord {
            round: r.round,
            variant: variant.clone(),
            loss: r.mean_client_loss,
            grad_norm_sq: r.stationarity,
            score: r.score,
            wallclock_ms: if config.output.wallclock {
                per_round * (i as u64 + 1)
            } else {
                0
            },
            early_exit: r.early_exit,
        })
        .collect();

    let final_score = evaluator.score_with(
        &outcome.final_params,
        &config.model,
        &setup.schedule,
        u64::MAX,
        config.eval.final_size,
    )?;

    Ok(ExperimentResult {
        variant,
        partition: config.partition.label(),
        seed: config.seed,
        final_score,
        rounds_configured: fl_config.rounds,
        rounds_executed: outcome.rounds_executed(),
        early_exit_round: outcome.early_exit_round,
        corrections: outcome.corrections,
        clients: setup.clients.len(),
        aux_size: setup.aux.as_ref().map_or(0, |a| a.len()),
        theory,
        log,
        outcome,
    })
}

/// Full pipeline; writes `round_log.csv` and `summary.txt` (plus optional
/// checkpoints and data dumps) when an output directory is given.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> HarnessResult<ExperimentResult> {
    let setup = prepare(config, config.fl.variant.uses_auxiliary())?;
    let result = run_with_setup(config, &setup)?;
    if let Some(dir) = out_dir.or(config.output.dir.as_deref()) {
        write_artifacts(config, &setup, &result, dir)?;
    }
    Ok(result)
}

fn write_file(path: &Path, bytes: &[u8]) -> HarnessResult<()> {
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

pub fn write_artifacts(
    config: &ExperimentConfig,
    setup: &Setup,
    result: &ExperimentResult,
    dir: &Path,
) -> HarnessResult<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    write_file(&dir.join("round_log.csv"), result.round_log_csv().as_bytes())?;
    write_file(&dir.join("summary.txt"), result.summary_text().as_bytes())?;
    if config.output.checkpoint_every > 0 {
        let ckpt = dir.join("checkpoints");
        fs::create_dir_all(&ckpt).map_err(|e| HarnessError::io(&ckpt, e))?;
        for r in &result.outcome.records {
            if r.round % config.output.checkpoint_every == 0 || r.early_exit {
                let path = ckpt.join(format!("round_{:05}.bin", r.round));
                let mut buf = Vec::new();
                r.global.write_to(&mut buf)?;
                write_file(&path, &buf)?;
            }
        }
        let mut buf = Vec::new();
        result.outcome.final_params.write_to(&mut buf)?;
        write_file(&ckpt.join("final.bin"), &buf)?;
    }
    if config.output.dump_data {
        let mut buf = Vec::new();
        data::write_dataset(&mut buf, &setup.global)?;
        write_file(&dir.join("global.csv"), &buf)?;
        for c in &setup.clients {
            let mut buf = Vec::new();
            data::write_dataset(&mut buf, &c.samples)?;
            write_file(&dir.join(format!("client_{:03}.csv", c.client_id)), &buf)?;
        }
        if let Some(aux) = &setup.aux {
            let mut f = Vec::new();
            for s in &aux.samples {
                let line: Vec<String> = s.iter().map(|v| format!("{v:?}")).collect();
                let _ = writeln!(f, "{}", line.join(", "));
            }
            write_file(&dir.join("auxiliary.csv"), &f)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Comparison

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub variant: String,
    pub partition: String,
    pub seeds: Vec<u64>,
    pub final_scores: Vec<f64>,
    pub rounds_used: Vec<usize>,
    pub early_exit_rounds: Vec<Option<usize>>,
}

impl ComparisonRow {
    pub fn mean_score(&self) -> f64 {
        mean(&self.final_scores)
    }

    /// Sample standard deviation; `None` for a single seed.
    pub fn std_score(&self) -> Option<f64> {
        sample_std(&self.final_scores)
    }

    pub fn mean_rounds(&self) -> f64 {
        let r: Vec<f64> = self.rounds_used.iter().map(|&x| x as f64).collect();
        mean(&r)
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

pub const COMPARISON_HEADER: &str =
    "variant,partition,seeds,final_score_mean,final_score_std,rounds_used_mean,early_exit_rounds";

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(COMPARISON_HEADER);
        s.push('\n');
        for r in &self.rows {
            let exits: Vec<String> = r
                .early_exit_rounds
                .iter()
                .map(|e| e.map(|x| x.to_string()).unwrap_or_else(|| "-".into()))
                .collect();
            let _ = writeln!(
                s,
                "{},{},{},{:?},{},{:?},{}",
                r.variant,
                r.partition,
                r.seeds.len(),
                r.mean_score(),
                r.std_score().map(|v| format!("{v:?}")).unwrap_or_default(),
                r.mean_rounds(),
                exits.join(";")
            );
        }
        s
    }

    pub fn row(&self, variant: &str, partition: &str) -> Option<&ComparisonRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.partition == partition)
    }
}

/// Configs in a sweep must describe the same data and model; only the
/// variant, partition and FL schedule may differ.
fn check_compatible(configs: &[ExperimentConfig]) -> HarnessResult<()> {
    let first = &configs[0];
    for (i, c) in configs.iter().enumerate().skip(1) {
        if c.mixture != first.mixture || c.dataset_size != first.dataset_size {
            return Err(HarnessError::config(
                format!("configs[{i}].data"),
                "dataset settings differ from configs[0]",
            ));
        }
        if c.schedule != first.schedule {
            return Err(HarnessError::config(
                format!("configs[{i}].diffusion"),
                "diffusion schedule differs from configs[0]",
            ));
        }
        if c.model != first.model {
            return Err(HarnessError::config(
                format!("configs[{i}].model"),
                "model differs from configs[0]",
            ));
        }
    }
    Ok(())
}

/// Key under which setups are shared between configs of one sweep.
fn setup_key(c: &ExperimentConfig, with_aux: bool) -> String {
    format!(
        "{}|{:?}|{}|{}|{}|{}|{}|{}",
        c.seed,
        c.partition,
        c.fl.n_clients,
        with_aux,
        c.fl.warmup_epochs,
        c.warmup_lr,
        c.fl.batch_size,
        c.fl.aux_ratio
    )
}

/// Runs every config for every seed (or its own seed when `seeds` is empty)
/// and tabulates one row per config, in input order.
pub fn compare(configs: &[ExperimentConfig], seeds: &[u64]) -> HarnessResult<(ComparisonTable, Vec<ExperimentResult>)> {
    if configs.len() < 2 {
        return Err(HarnessError::config("configs", "a comparison needs at least 2 configs"));
    }
    check_compatible(configs)?;
    let mut setups: BTreeMap<String, Setup> = BTreeMap::new();
    let mut rows = Vec::with_capacity(configs.len());
    let mut results = Vec::new();
    for c in configs {
        let run_seeds: Vec<u64> = if seeds.is_empty() { vec![c.seed] } else { seeds.to_vec() };
        let mut row = ComparisonRow {
            variant: c.variant_label(),
            partition: c.partition.label(),
            seeds: run_seeds.clone(),
            final_scores: Vec::new(),
            rounds_used: Vec::new(),
            early_exit_rounds: Vec::new(),
        };
        for &seed in &run_seeds {
            let mut cfg = c.clone();
            cfg.seed = seed;
            let with_aux = cfg.fl.variant.uses_auxiliary();
            let key = setup_key(&cfg, with_aux);
            if !setups.contains_key(&key) {
                setups.insert(key.clone(), prepare(&cfg, with_aux)?);
            }
            let result = run_with_setup(&cfg, &setups[&key])?;
            row.final_scores.push(result.final_score);
            row.rounds_used.push(result.rounds_executed);
            row.early_exit_rounds.push(result.early_exit_round);
            results.push(result);
        }
        rows.push(row);
    }
    Ok((ComparisonTable { rows }, results))
}

/// Reads a sweep list: one config path per line, relative to the list file;
/// blank lines and `#` comments are ignored.
pub fn load_sweep(list: &Path) -> HarnessResult<Vec<ExperimentConfig>> {
    let text = fs::read_to_string(list)
        .map_err(|e| HarnessError::config(list.display().to_string(), e.to_string()))?;
    let base = list.parent().unwrap_or(Path::new("."));
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| ExperimentConfig::load(&base.join(l)))
        .collect()
}

/// Writes `comparison.csv` plus one `run_<k>_<variant>_seed<s>/` directory
/// with the round log and summary of every run, in execution order.
pub fn write_comparison_runs(
    table: &ComparisonTable,
    results: &[ExperimentResult],
    dir: &Path,
) -> HarnessResult<PathBuf> {
    let path = write_comparison(table, dir)?;
    for (k, r) in results.iter().enumerate() {
        let sub = dir.join(format!("run_{k:03}_{}_seed{}", r.variant.replace('+', "plus"), r.seed));
        fs::create_dir_all(&sub).map_err(|e| HarnessError::io(&sub, e))?;
        write_file(&sub.join("round_log.csv"), r.round_log_csv().as_bytes())?;
        write_file(&sub.join("summary.txt"), r.summary_text().as_bytes())?;
    }
    Ok(path)
}

pub fn write_comparison(table: &ComparisonTable, dir: &Path) -> HarnessResult<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let path = dir.join("comparison.csv");
    let mut f = fs::File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
    f.write_all(table.to_csv().as_bytes())
        .map_err(|e| HarnessError::io(&path, e))?;
    Ok(path)
}
