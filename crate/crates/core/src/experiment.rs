//! Declarative experiment sweeps: JSON configs, seeded runs over a
//! method × set-count grid, and CSV / JSON / text reports.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    supervised_fraction_objective, ProportionObjective, PseudoLabelObjective,
    PseudoLabelSettings, VatSettings,
};
use crate::data::{
    allocate_clients_noniid, gen_gaussian_task, load_idx_dataset, sample_test_set, sample_u_sets,
    ClassConditionals, ClassPools, LabeledTestSet, TaskSpec, USetCollection,
};
use crate::error::{Error, Result};
use crate::federation::{
    client_init, rng_stream, streams, ClientState, Federation, LocalObjective, LocalSettings,
    RoundMetrics, ServerState,
};
use crate::nn::{Activation, ModelParams};
use crate::priors::{
    perturb_priors, sample_prior_matrix_weighted, ClassPriorMatrix, PriorRole, PriorVector,
};

const PRIOR_RETRIES: usize = 1000;

/// Where the inputs come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    /// Unit-variance Gaussians whose means sit `separation` from the origin.
    Gaussian {
        classes: usize,
        dim: usize,
        separation: f64,
    },
    /// An IDX image/label pair. `holdout` of every class becomes the test set.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        classes: usize,
        #[serde(default = "default_holdout")]
        holdout: f64,
    },
}

impl TaskConfig {
    pub fn classes(&self) -> usize {
        match self {
            Self::Gaussian { classes, .. } | Self::Idx { classes, .. } => *classes,
        }
    }
}

/// How class mass is spread over clients.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Distribution {
    #[default]
    Iid,
    Noniid {
        #[serde(default = "default_majority")]
        majority_classes: usize,
    },
}

/// Training method of one grid entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fedul,
    Fedpl,
    Fedllp,
    FedllpVat,
    /// Plain FedAvg on the given fraction of rows with their true labels.
    FedavgSupervised(f64),
}

impl Method {
    /// Name safe for file paths.
    pub fn slug(&self) -> String {
        match self {
            Self::FedavgSupervised(rho) => format!("fedavg_supervised_{rho}"),
            other => other.to_string(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fedul => f.write_str("fedul"),
            Self::Fedpl => f.write_str("fedpl"),
            Self::Fedllp => f.write_str("fedllp"),
            Self::FedllpVat => f.write_str("fedllp_vat"),
            Self::FedavgSupervised(rho) => write!(f, "fedavg_supervised({rho})"),
        }
    }
}

fn default_holdout() -> f64 {
    0.2
}
fn default_majority() -> usize {
    2
}
fn default_clients() -> usize {
    5
}
fn default_sets() -> Vec<usize> {
    vec![10]
}
fn default_set_size() -> usize {
    400
}
fn default_prior_range() -> [f64; 2] {
    [0.1, 0.9]
}
fn default_methods() -> Vec<Method> {
    vec![Method::Fedul]
}
fn default_rounds() -> usize {
    100
}
fn default_epochs() -> usize {
    1
}
fn default_batch() -> usize {
    128
}
fn default_local_lr() -> f64 {
    1e-4
}
fn default_global_lr() -> f64 {
    1.0
}
fn default_hidden() -> Vec<usize> {
    vec![64]
}
fn default_test_size() -> usize {
    5000
}
fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

/// A full experiment description. Every field but `task` has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    #[serde(default = "default_clients")]
    pub clients: usize,
    /// Set counts to sweep; every client gets the same count.
    #[serde(default = "default_sets")]
    pub sets: Vec<usize>,
    /// Per-client set counts. Replaces `sets` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_sets: Option<Vec<usize>>,
    /// Examples per set.
    #[serde(default = "default_set_size")]
    pub set_size: usize,
    #[serde(default)]
    pub distribution: Distribution,
    /// Range of the raw prior entries before row normalization.
    #[serde(default = "default_prior_range")]
    pub prior_range: [f64; 2],
    /// Multiplicative noise level on the priors handed to clients.
    #[serde(default)]
    pub prior_noise: f64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_local_lr")]
    pub local_lr: f64,
    #[serde(default = "default_global_lr")]
    pub global_lr: f64,
    /// L1 weight; when absent it depends on the set count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l1_weight: Option<f64>,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    /// Also evaluate on one test set per client drawn from its own class mix.
    #[serde(default)]
    pub client_eval: bool,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub fedpl: PseudoLabelSettings,
    #[serde(default)]
    pub vat: VatSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Record wall-clock times. Off by default so outputs are reproducible byte for byte.
    #[serde(default)]
    pub record_timing: bool,
}

fn config_error(pointer: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        pointer: pointer.into(),
        message: message.into(),
    }
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

/// L1 weight used when the config leaves it out.
pub fn default_l1_weight(sets: usize) -> f64 {
    match sets {
        20 => 5e-5,
        30 => 2e-6,
        _ => 1e-5,
    }
}

impl ExperimentConfig {
    /// Parses and validates a config held in a string.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| config_error("", format!("not valid JSON: {e}")))?;
        let Some(obj) = value.as_object() else {
            return Err(config_error("", "config must be a JSON object"));
        };
        if !obj.contains_key("task") {
            return Err(config_error("/task", "task required"));
        }
        let config: Self = serde_path_to_error::deserialize(value)
            .map_err(|e| config_error(json_pointer(e.path()), e.inner().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| config_error("", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.task.classes();
        match &self.task {
            TaskConfig::Gaussian {
                dim, separation, ..
            } => {
                if *dim == 0 {
                    return Err(config_error("/task/dim", "must be positive"));
                }
                if !(*separation > 0.0 && separation.is_finite()) {
                    return Err(config_error("/task/separation", "must be positive"));
                }
            }
            TaskConfig::Idx { holdout, .. } => {
                if !(*holdout > 0.0 && *holdout < 1.0) {
                    return Err(config_error("/task/holdout", "must lie in (0, 1)"));
                }
            }
        }
        if k < 2 {
            return Err(config_error("/task/classes", "need at least two classes"));
        }
        for (name, v) in [
            ("clients", self.clients),
            ("set_size", self.set_size),
            ("rounds", self.rounds),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("test_size", self.test_size),
        ] {
            if v == 0 {
                return Err(config_error(format!("/{name}"), "must be positive"));
            }
        }
        if self.seeds.is_empty() {
            return Err(config_error("/seeds", "at least one seed required"));
        }
        let mut seen = BTreeSet::new();
        for (i, s) in self.seeds.iter().enumerate() {
            if !seen.insert(*s) {
                return Err(config_error(format!("/seeds/{i}"), format!("duplicate seed {s}")));
            }
        }
        if self.methods.is_empty() {
            return Err(config_error("/methods", "at least one method required"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if let Method::FedavgSupervised(rho) = m {
                if !(*rho > 0.0 && *rho <= 1.0) {
                    return Err(config_error(
                        format!("/methods/{i}/fedavg_supervised"),
                        format!("labeled fraction {rho} outside (0, 1]"),
                    ));
                }
            }
        }
        // Every method trains on the same data, and sampling a full-rank prior
        // matrix needs at least K sets; the transition method depends on it.
        let check_sets = |pointer: String, m: usize| -> Result<()> {
            if m < k {
                return Err(config_error(
                    pointer,
                    format!("{m} sets is fewer than the {k} classes (fedul needs M_c >= K)"),
                ));
            }
            Ok(())
        };
        match &self.client_sets {
            Some(list) => {
                if list.len() != self.clients {
                    return Err(config_error(
                        "/client_sets",
                        format!("{} entries for {} clients", list.len(), self.clients),
                    ));
                }
                for (i, &m) in list.iter().enumerate() {
                    check_sets(format!("/client_sets/{i}"), m)?;
                }
            }
            None => {
                if self.sets.is_empty() {
                    return Err(config_error("/sets", "at least one set count required"));
                }
                for (i, &m) in self.sets.iter().enumerate() {
                    check_sets(format!("/sets/{i}"), m)?;
                }
            }
        }
        let [lo, hi] = self.prior_range;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(config_error("/prior_range", "need 0 < low < high < 1"));
        }
        if !(self.prior_noise >= 0.0 && self.prior_noise.is_finite()) {
            return Err(config_error("/prior_noise", "must be >= 0"));
        }
        if !(self.local_lr > 0.0 && self.local_lr.is_finite()) {
            return Err(config_error("/local_lr", "must be positive"));
        }
        if !(self.global_lr > 0.0 && self.global_lr.is_finite()) {
            return Err(config_error("/global_lr", "must be positive"));
        }
        if let Some(w) = self.l1_weight {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(config_error("/l1_weight", "must be >= 0"));
            }
        }
        if let Some(i) = self.hidden.iter().position(|&w| w == 0) {
            return Err(config_error(format!("/hidden/{i}"), "layer width must be positive"));
        }
        if let Distribution::Noniid { majority_classes } = self.distribution {
            if majority_classes == 0 || majority_classes >= k {
                return Err(config_error(
                    "/distribution/majority_classes",
                    format!("need 1 <= majority classes < {k}"),
                ));
            }
        }
        if !(self.fedpl.mixup_alpha > 0.0) || self.fedpl.mix_weight < 0.0 {
            return Err(config_error("/fedpl", "mixup_alpha must be > 0 and mix_weight >= 0"));
        }
        Ok(())
    }

    /// Set counts of the sweep: one grid value per entry of `sets`, or the
    /// largest per-client count when `client_sets` is given.
    pub fn set_grid(&self) -> Vec<usize> {
        match &self.client_sets {
            Some(list) => vec![list.iter().copied().max().unwrap_or(0)],
            None => self.sets.clone(),
        }
    }

    /// Set count of every client for grid value `sets`.
    pub fn sets_per_client(&self, sets: usize) -> Vec<usize> {
        match &self.client_sets {
            Some(list) => list.clone(),
            None => vec![sets; self.clients],
        }
    }

    pub fn l1_for(&self, sets: usize) -> f64 {
        self.l1_weight.unwrap_or_else(|| default_l1_weight(sets))
    }

    /// Every (method, set count) pair, methods outermost.
    pub fn grid(&self) -> Vec<GridEntry> {
        let sets = self.set_grid();
        self.methods
            .iter()
            .flat_map(|&method| sets.iter().map(move |&sets| GridEntry { method, sets }))
            .collect()
    }
}

/// One point of the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub method: Method,
    pub sets: usize,
}

impl GridEntry {
    pub fn name(&self) -> String {
        format!("{}-M{}", self.method.slug(), self.sets)
    }
}

/// Everything one seeded run trains and evaluates on. Identical for every
/// method at the same seed and set count.
#[derive(Debug, Clone)]
pub struct RunData {
    pub task: TaskSpec,
    pub test: LabeledTestSet,
    pub client_tests: Option<Vec<LabeledTestSet>>,
    /// Client sets, carrying the (possibly noisy) priors the clients are told.
    pub usets: Vec<USetCollection>,
    /// Priors the sets were actually drawn from.
    pub true_priors: Vec<ClassPriorMatrix>,
    pub init: ModelParams,
    pub total_sets: usize,
}

/// Per-client record of what the client was given and derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client: usize,
    pub set_sizes: Vec<usize>,
    pub priors: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate_prior: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// Outcome of one seed of one grid entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub final_error: Option<f64>,
    pub rounds: Vec<RoundMetrics>,
    pub clients: Vec<ClientSummary>,
}

/// All seeds of one grid entry with their summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryReport {
    pub name: String,
    pub method: Method,
    pub sets: usize,
    pub runs: Vec<RunRecord>,
    /// Mean final test error over successful runs.
    pub mean_error: Option<f64>,
    /// Sample standard deviation (n − 1) of the same values; needs two runs.
    pub std_error: Option<f64>,
}

impl EntryReport {
    pub fn new(entry: GridEntry, runs: Vec<RunRecord>) -> Self {
        let finals: Vec<f64> = runs.iter().filter_map(|r| r.final_error).collect();
        let (mean_error, std_error) = mean_and_sample_std(&finals);
        Self {
            name: entry.name(),
            method: entry.method,
            sets: entry.sets,
            runs,
            mean_error,
            std_error,
        }
    }

    pub fn failed_runs(&self) -> usize {
        self.runs.iter().filter(|r| r.status == RunStatus::Failed).count()
    }
}

pub fn mean_and_sample_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub entries: Vec<EntryReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_wall_ms: Option<f64>,
}

impl ExperimentReport {
    pub fn failed_runs(&self) -> usize {
        self.entries.iter().map(EntryReport::failed_runs).sum()
    }

    /// 0 when every run finished, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.failed_runs() == 0 {
            0
        } else {
            2
        }
    }
}

/// A validated config plus any dataset it loads from disk.
#[derive(Debug, Clone)]
pub struct Experiment {
    config: ExperimentConfig,
    pools: Option<ClassPools>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let pools = match &config.task {
            TaskConfig::Idx {
                images,
                labels,
                classes,
                ..
            } => Some(load_idx_dataset(images, labels, *classes)?),
            TaskConfig::Gaussian { .. } => None,
        };
        Ok(Self { config, pools })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    fn task_for(&self, seed: u64) -> Result<(TaskSpec, TaskSpec, Option<LabeledTestSet>)> {
        match (&self.config.task, &self.pools) {
            (
                TaskConfig::Gaussian {
                    classes,
                    dim,
                    separation,
                },
                _,
            ) => {
                let task =
                    gen_gaussian_task(*classes, *dim, *separation, &mut rng_stream(seed, streams::TASK))?;
                Ok((task.clone(), task, None))
            }
            (TaskConfig::Idx { holdout, .. }, Some(pools)) => {
                let (train, held) = pools.split_holdout(*holdout, &mut rng_stream(seed, streams::TASK))?;
                let counts = held.counts();
                let n: usize = counts.iter().sum();
                let prior = PriorVector::new(
                    counts.iter().map(|&c| c as f64 / n as f64).collect(),
                    PriorRole::Test,
                )?;
                let mut inputs = Vec::with_capacity(held.pools.len());
                let mut labels = Vec::with_capacity(n);
                for (k, pool) in held.pools.iter().enumerate() {
                    inputs.push(pool.view());
                    labels.extend(std::iter::repeat_n(k, pool.nrows()));
                }
                let test = LabeledTestSet {
                    inputs: ndarray::concatenate(ndarray::Axis(0), &inputs)
                        .map_err(|e| Error::Shape(e.to_string()))?,
                    labels,
                    classes: held.pools.len(),
                };
                let task = TaskSpec::new(ClassConditionals::Pools { pools: train.pools }, prior.clone())?;
                let eval = TaskSpec::new(ClassConditionals::Pools { pools: held.pools }, prior)?;
                Ok((task, eval, Some(test)))
            }
            (TaskConfig::Idx { .. }, None) => {
                Err(Error::Invariant("dataset pools not loaded".into()))
            }
        }
    }

    /// Builds the data of one seed at grid value `sets`.
    pub fn prepare_run(&self, sets: usize, seed: u64) -> Result<RunData> {
        let cfg = &self.config;
        let k = cfg.task.classes();
        let (task, eval_task, fixed_test) = self.task_for(seed)?;
        let test = match fixed_test {
            Some(t) => t,
            None => sample_test_set(
                &eval_task,
                eval_task.test_prior(),
                cfg.test_size,
                &mut rng_stream(seed, streams::TEST_SET),
            )?,
        };
        let profiles = match cfg.distribution {
            Distribution::Iid => None,
            Distribution::Noniid { majority_classes } => Some(allocate_clients_noniid(
                k,
                cfg.clients,
                majority_classes,
                &mut rng_stream(seed, streams::ALLOCATION),
            )?),
        };
        let per_client = cfg.sets_per_client(sets);
        let [lo, hi] = cfg.prior_range;
        let mut usets = Vec::with_capacity(cfg.clients);
        let mut true_priors = Vec::with_capacity(cfg.clients);
        for (c, &m) in per_client.iter().enumerate() {
            let mut rng = rng_stream(seed, streams::client_data(c));
            let weights = profiles.as_ref().map(|p| p[c].as_slice());
            let priors = sample_prior_matrix_weighted(k, m, lo, hi, weights, PRIOR_RETRIES, &mut rng)?;
            let u = sample_u_sets(c, &task, &priors, &vec![cfg.set_size; m], &mut rng)?;
            true_priors.push(priors);
            usets.push(u);
        }
        if cfg.prior_noise > 0.0 {
            let mut rng = rng_stream(seed, streams::PRIOR_NOISE);
            usets = usets
                .into_iter()
                .map(|u| {
                    let noisy = perturb_priors(u.priors(), cfg.prior_noise, lo, hi, &mut rng)?;
                    u.with_priors(noisy)
                })
                .collect::<Result<_>>()?;
        }
        let client_tests = if cfg.client_eval {
            let mut tests = Vec::with_capacity(cfg.clients);
            for c in 0..cfg.clients {
                let prior = match &profiles {
                    Some(p) => PriorVector::new(p[c].clone(), PriorRole::Test)?,
                    None => eval_task.test_prior().clone(),
                };
                tests.push(sample_test_set(
                    &eval_task,
                    &prior,
                    cfg.test_size,
                    &mut rng_stream(seed, streams::client_eval(c)),
                )?);
            }
            Some(tests)
        } else {
            None
        };
        let init = ModelParams::init(
            task.dim(),
            &cfg.hidden,
            Activation::Relu,
            k,
            &mut rng_stream(seed, streams::MODEL_INIT),
        )?;
        let total_sets = per_client.iter().copied().max().unwrap_or(0);
        Ok(RunData {
            task,
            test,
            client_tests,
            usets,
            true_priors,
            init,
            total_sets,
        })
    }

    /// Builds the federation of one run without training it.
    pub fn build_federation(&self, method: Method, data: &RunData, seed: u64) -> Result<Federation> {
        let cfg = &self.config;
        let settings = LocalSettings {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            l1_weight: cfg.l1_for(data.total_sets),
        };
        let clients = data
            .usets
            .iter()
            .map(|u| {
                let objective: Box<dyn LocalObjective> = match method {
                    Method::Fedul => {
                        return client_init(
                            u,
                            data.task.test_prior(),
                            data.total_sets,
                            &data.init,
                            settings,
                            seed,
                        );
                    }
                    Method::Fedpl => Box::new(PseudoLabelObjective::new(u, cfg.fedpl)?),
                    Method::Fedllp => Box::new(ProportionObjective::new(u, None)?),
                    Method::FedllpVat => Box::new(ProportionObjective::new(u, Some(cfg.vat))?),
                    Method::FedavgSupervised(rho) => Box::new(supervised_fraction_objective(
                        u,
                        rho,
                        &mut rng_stream(seed, streams::client_subsample(u.client())),
                    )?),
                };
                ClientState::new(u.client(), objective, &data.init, settings, seed)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Federation {
            server: ServerState::new(data.init.clone(), cfg.global_lr),
            clients,
            test_set: data.test.clone(),
            client_test_sets: data.client_tests.clone(),
            local_lr: cfg.local_lr,
            record_timing: cfg.record_timing,
        })
    }

    /// Trains one run. Construction and training failures end up in the record;
    /// rounds finished before a failure are kept. Errors from `on_round` abort.
    pub fn train_run<F>(&self, method: Method, data: &RunData, seed: u64, mut on_round: F) -> RunRecord
    where
        F: FnMut(&RoundMetrics) -> Result<()>,
    {
        let mut rounds = Vec::new();
        let mut clients = summarize_clients(data, None);
        let outcome = self.build_federation(method, data, seed).and_then(|mut fed| {
            clients = summarize_clients(data, Some(&fed));
            fed.run_training(self.config.rounds, |m| {
                rounds.push(m.clone());
                on_round(m)
            })
        });
        match outcome {
            Ok(all) => RunRecord {
                seed,
                status: RunStatus::Ok,
                error: None,
                final_error: all.last().map(|m| m.test_error),
                rounds: all,
                clients,
            },
            Err(e) => {
                log::warn!("{method} seed {seed} failed: {e}");
                RunRecord {
                    seed,
                    status: RunStatus::Failed,
                    error: Some(e.to_string()),
                    final_error: None,
                    rounds,
                    clients,
                }
            }
        }
    }

    /// Runs every grid entry for every seed on up to `workers` threads. When
    /// `log_dir` is set, each run streams its rounds to
    /// `<log_dir>/<entry>/seed-<seed>.jsonl` as they finish.
    pub fn run(&self, log_dir: Option<&Path>, workers: usize) -> Result<ExperimentReport> {
        let start = Instant::now();
        let grid = self.config.grid();
        let jobs: Vec<(usize, u64)> = (0..grid.len())
            .flat_map(|e| self.config.seeds.iter().map(move |&s| (e, s)))
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        let records: Vec<Result<RunRecord>> = pool.install(|| {
            jobs.par_iter()
                .map(|&(e, seed)| self.run_job(grid[e], seed, log_dir))
                .collect()
        });
        let mut per_entry: Vec<Vec<RunRecord>> = vec![Vec::new(); grid.len()];
        for (&(e, _), rec) in jobs.iter().zip(records) {
            per_entry[e].push(rec?);
        }
        let entries = grid
            .iter()
            .zip(per_entry)
            .map(|(&g, runs)| EntryReport::new(g, runs))
            .collect();
        Ok(ExperimentReport {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config.clone(),
            entries,
            total_wall_ms: self
                .config
                .record_timing
                .then(|| start.elapsed().as_secs_f64() * 1e3),
        })
    }

    fn run_job(&self, entry: GridEntry, seed: u64, log_dir: Option<&Path>) -> Result<RunRecord> {
        let mut log = match log_dir {
            Some(dir) => {
                let dir = dir.join(entry.name());
                fs::create_dir_all(&dir)?;
                Some(BufWriter::new(File::create(dir.join(format!("seed-{seed}.jsonl")))?))
            }
            None => None,
        };
        let record = match self.prepare_run(entry.sets, seed) {
            Ok(data) => self.train_run(entry.method, &data, seed, |m| {
                if let Some(w) = log.as_mut() {
                    serde_json::to_writer(&mut *w, m)?;
                    w.write_all(b"\n")?;
                    w.flush()?;
                }
                Ok(())
            }),
            Err(e) => RunRecord {
                seed,
                status: RunStatus::Failed,
                error: Some(e.to_string()),
                final_error: None,
                rounds: Vec::new(),
                clients: Vec::new(),
            },
        };
        if let (Some(w), Some(err)) = (log.as_mut(), &record.error) {
            serde_json::to_writer(&mut *w, &serde_json::json!({ "failed": err }))?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok(record)
    }
}

fn summarize_clients(data: &RunData, fed: Option<&Federation>) -> Vec<ClientSummary> {
    data.usets
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let state = fed.and_then(|f| f.clients.get(i));
            ClientSummary {
                client: u.client(),
                set_sizes: u.set_sizes(),
                priors: u.priors().to_rows(),
                surrogate_prior: state
                    .and_then(ClientState::surrogate_prior)
                    .map(|p| p.values().to_vec()),
                transition: state.and_then(ClientState::head).map(|h| h.to_rows()),
            }
        })
        .collect()
}

/// Parses, validates and runs a config in one go.
pub fn run_experiment(config: &ExperimentConfig, log_dir: Option<&Path>, workers: usize) -> Result<ExperimentReport> {
    Experiment::new(config.clone())?.run(log_dir, workers)
}

/// Output files of [`emit_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Format {
    Csv,
    Json,
    Table,
}

impl Format {
    pub const ALL: [Format; 3] = [Format::Csv, Format::Json, Format::Table];

    pub fn file_name(self) -> &'static str {
        match self {
            Self::Csv => "metrics.csv",
            Self::Json => "summary.json",
            Self::Table => "summary.txt",
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "table" | "txt" => Ok(Self::Table),
            other => Err(Error::InvalidArgument(format!(
                "unknown format {other:?}; expected csv, json or table"
            ))),
        }
    }
}

fn sci(v: f64) -> String {
    format!("{v:.16e}")
}

/// Per-round metrics of every run, one row per round.
pub fn metrics_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("round,run_seed,method,test_error,surrogate_loss,wall_ms\n");
    for entry in &report.entries {
        for run in &entry.runs {
            for m in &run.rounds {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    m.round,
                    run.seed,
                    entry.name,
                    sci(m.test_error),
                    m.surrogate_loss.map(sci).unwrap_or_default(),
                    sci(m.wall_ms),
                ));
            }
        }
    }
    out
}

pub fn summary_json(report: &ExperimentReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

/// Fixed-width table sorted by method, then set count. Failed runs are listed below it.
pub fn summary_table(report: &ExperimentReport) -> String {
    let mut rows: Vec<&EntryReport> = report.entries.iter().collect();
    rows.sort_by(|a, b| {
        a.method
            .to_string()
            .cmp(&b.method.to_string())
            .then(a.sets.cmp(&b.sets))
    });
    let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", v * 100.0));
    let mut out = format!(
        "{:<26} {:>4} {:>10} {:>8} {:>6}\n",
        "method", "M", "mean_err%", "std", "rounds"
    );
    for e in &rows {
        out.push_str(&format!(
            "{:<26} {:>4} {:>10} {:>8} {:>6}\n",
            e.method.to_string(),
            e.sets,
            pct(e.mean_error),
            pct(e.std_error),
            report.config.rounds
        ));
    }
    for e in &rows {
        for r in e.runs.iter().filter(|r| r.status == RunStatus::Failed) {
            out.push_str(&format!(
                "FAILED {} seed {}: {}\n",
                e.name,
                r.seed,
                r.error.as_deref().unwrap_or("unknown error")
            ));
        }
    }
    out
}

/// Writes the requested formats into `dir` and returns the paths written.
pub fn emit_report(report: &ExperimentReport, dir: &Path, formats: &[Format]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut wanted: Vec<Format> = formats.to_vec();
    wanted.sort();
    wanted.dedup();
    let mut written = Vec::with_capacity(wanted.len());
    for f in wanted {
        let body = match f {
            Format::Csv => metrics_csv(report),
            Format::Json => summary_json(report)?,
            Format::Table => summary_table(report),
        };
        let path = dir.join(f.file_name());
        fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> String {
        r#"{"task": {"kind": "gaussian", "classes": 2, "dim": 2, "separation": 2.0},
            "clients": 2, "sets": [2], "set_size": 30, "rounds": 2, "test_size": 50,
            "hidden": [4], "local_lr": 1e-2, "batch_size": 16}"#
            .to_string()
    }

    fn pointer(r: Result<ExperimentConfig>) -> String {
        match r {
            Err(Error::Config { pointer, .. }) => pointer,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn missing_task() {
        match ExperimentConfig::from_json("{}") {
            Err(Error::Config { message, .. }) => assert_eq!(message, "task required"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn defaults_filled() {
        let c = ExperimentConfig::from_json(
            r#"{"task": {"kind": "gaussian", "classes": 3, "dim": 2, "separation": 1.0}}"#,
        )
        .unwrap();
        assert_eq!((c.epochs, c.batch_size, c.clients, c.rounds), (1, 128, 5, 100));
        assert_eq!(c.local_lr, 1e-4);
        assert_eq!(c.global_lr, 1.0);
        assert_eq!(c.seeds, vec![1, 2, 3]);
        assert_eq!(c.methods, vec![Method::Fedul]);
        assert_eq!(c.l1_for(10), 1e-5);
        assert_eq!(c.l1_for(20), 5e-5);
        assert_eq!(c.l1_for(30), 2e-6);
        assert_eq!(c.fedpl, PseudoLabelSettings::default());
    }

    #[test]
    fn rejects_bad_configs() {
        let base: serde_json::Value = serde_json::from_str(&tiny()).unwrap();
        let with = |key: &str, v: serde_json::Value| {
            let mut b = base.clone();
            b[key] = v;
            ExperimentConfig::from_json(&b.to_string())
        };
        assert_eq!(pointer(with("seeds", serde_json::json!([7, 7]))), "/seeds/1");
        assert_eq!(pointer(with("sets", serde_json::json!([1]))), "/sets/0");
        assert_eq!(pointer(with("typo", serde_json::json!(1))), "/typo");
        assert_eq!(pointer(with("rounds", serde_json::json!("x"))), "/rounds");
        assert_eq!(pointer(with("seeds", serde_json::json!([]))), "/seeds");
        assert_eq!(
            pointer(with("methods", serde_json::json!([{"fedavg_supervised": 0.0}]))),
            "/methods/0/fedavg_supervised"
        );
        let mut b = base.clone();
        b["task"]["separaton"] = serde_json::json!(1.0);
        assert_eq!(pointer(ExperimentConfig::from_json(&b.to_string())), "/task");
        assert!(ExperimentConfig::from_json("[1]").is_err());
        assert!(ExperimentConfig::from_json("{").is_err());
    }

    #[test]
    fn method_tags_round_trip() {
        let m: Vec<Method> =
            serde_json::from_str(r#"["fedul", "fedllp_vat", {"fedavg_supervised": 0.1}]"#).unwrap();
        assert_eq!(m, vec![Method::Fedul, Method::FedllpVat, Method::FedavgSupervised(0.1)]);
        assert_eq!(m[2].to_string(), "fedavg_supervised(0.1)");
        assert_eq!(m[2].slug(), "fedavg_supervised_0.1");
        let back: Vec<Method> = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn grid_is_methods_by_sets() {
        let mut c = ExperimentConfig::from_json(&tiny()).unwrap();
        c.methods = vec![Method::Fedul, Method::Fedllp];
        c.sets = vec![2, 4];
        let names: Vec<String> = c.grid().iter().map(GridEntry::name).collect();
        assert_eq!(names, ["fedul-M2", "fedul-M4", "fedllp-M2", "fedllp-M4"]);
        c.client_sets = Some(vec![2, 3]);
        assert_eq!(c.set_grid(), vec![3]);
        assert_eq!(c.sets_per_client(3), vec![2, 3]);
    }

    #[test]
    fn sample_std_matches_hand_value() {
        let (m, s) = mean_and_sample_std(&[0.1, 0.2, 0.3]);
        assert!((m.unwrap() - 0.2).abs() < 1e-15);
        assert!((s.unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(mean_and_sample_std(&[0.5]), (Some(0.5), None));
        assert_eq!(mean_and_sample_std(&[]), (None, None));
    }

    #[test]
    fn tiny_run_reports_every_seed() {
        let c = ExperimentConfig::from_json(&tiny()).unwrap();
        let report = run_experiment(&c, None, 1).unwrap();
        assert_eq!(report.entries.len(), 1);
        let e = &report.entries[0];
        assert_eq!(e.runs.len(), 3);
        assert!(e.runs.iter().all(|r| r.rounds.len() == 3 && r.status == RunStatus::Ok));
        let finals: Vec<f64> = e.runs.iter().map(|r| r.final_error.unwrap()).collect();
        let (m, s) = mean_and_sample_std(&finals);
        assert!((e.mean_error.unwrap() - m.unwrap()).abs() < 1e-12);
        assert!((e.std_error.unwrap() - s.unwrap()).abs() < 1e-12);
        assert_eq!(report.exit_code(), 0);
        let csv = metrics_csv(&report);
        assert_eq!(csv.lines().count(), 1 + 3 * 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,1,fedul-M2,"));
        let client = &e.runs[0].clients[0];
        assert_eq!(client.transition.as_ref().unwrap().len(), 2);
        assert_eq!(client.surrogate_prior.as_ref().unwrap().len(), 2);
    }

    #[test]
    fn json_round_trips_exactly() {
        let c = ExperimentConfig::from_json(&tiny()).unwrap();
        let report = run_experiment(&c, None, 1).unwrap();
        let text = summary_json(&report).unwrap();
        let back: ExperimentReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn failed_runs_are_recorded_not_fatal() {
        let mut c = ExperimentConfig::from_json(&tiny()).unwrap();
        c.local_lr = 1e300;
        c.global_lr = 1e300;
        let report = run_experiment(&c, None, 1).unwrap();
        assert_eq!(report.exit_code(), 2);
        assert_eq!(report.failed_runs(), 3);
        assert!(report.entries[0].mean_error.is_none());
        let table = summary_table(&report);
        assert!(table.contains("FAILED fedul-M2 seed 1"), "{table}");
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&report, dir.path(), &Format::ALL).unwrap();
        assert_eq!(files.len(), 3);
        assert!(files.iter().all(|f| f.exists()));
    }

    #[test]
    fn table_sorted_by_method_then_sets() {
        let mut c = ExperimentConfig::from_json(&tiny()).unwrap();
        c.methods = vec![Method::Fedul, Method::Fedllp];
        c.sets = vec![3, 2];
        c.seeds = vec![1];
        c.rounds = 1;
        let table = summary_table(&run_experiment(&c, None, 2).unwrap());
        let firsts: Vec<(String, String)> = table
            .lines()
            .skip(1)
            .map(|l| {
                let mut w = l.split_whitespace();
                (w.next().unwrap().to_string(), w.next().unwrap().to_string())
            })
            .collect();
        let expect = [("fedllp", "2"), ("fedllp", "3"), ("fedul", "2"), ("fedul", "3")];
        assert_eq!(
            firsts,
            expect.map(|(a, b)| (a.to_string(), b.to_string())).to_vec()
        );
        assert!(table.starts_with("method"));
    }

    #[test]
    fn incremental_logs_written() {
        let mut c = ExperimentConfig::from_json(&tiny()).unwrap();
        c.seeds = vec![4];
        let dir = tempfile::tempdir().unwrap();
        Experiment::new(c).unwrap().run(Some(dir.path()), 1).unwrap();
        let log = fs::read_to_string(dir.path().join("fedul-M2/seed-4.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 3);
        let first: RoundMetrics = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(first.round, 0);
    }
}
