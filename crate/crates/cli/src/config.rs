//! Strict JSON run configuration.
//!
//! Every section rejects unknown keys. Omitted parameters take the desk-scale
//! defaults below and are written back out in the provenance sidecar.

use std::fmt;
use std::num::NonZeroUsize;
use std::path::PathBuf;

use mdplab_core::experiments::{Engine, ProbeKind};
use mdplab_core::functionals::scaling_check;
use mdplab_core::integrator::step_count;
use mdplab_core::ObservableSpec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub reason: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid `{}`: {}", self.key, self.reason)
    }
}

impl std::error::Error for ConfigError {}

fn bad(key: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError {
        key: key.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoThreads {
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Threads {
    Count(NonZeroUsize),
    Auto(AutoThreads),
}

impl std::str::FromStr for Threads {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "auto" {
            return Ok(Threads::Auto(AutoThreads::Auto));
        }
        s.parse::<NonZeroUsize>()
            .map(Threads::Count)
            .map_err(|_| format!("expected a positive integer or `auto`, got `{s}`"))
    }
}

impl Threads {
    pub fn resolve(self) -> usize {
        match self {
            Threads::Count(n) => n.get(),
            Threads::Auto(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentConfig>,
    #[serde(default)]
    pub seed: u64,
    /// Not part of the provenance record: outputs do not depend on it.
    #[serde(default, skip_serializing)]
    pub threads: Option<Threads>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Declared hypothesis constants overriding the catalogue values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeclaredConstants {
    pub lambda1: f64,
    pub lambda2: f64,
    pub kappa1: f64,
    pub kappa2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// `b(x, μ) = −θx + η·mean(μ)`, `σ = σ₀·I`.
    MeanFieldOu {
        #[serde(default = "one")]
        theta: f64,
        #[serde(default = "half")]
        eta: f64,
        #[serde(default = "one")]
        sigma0: f64,
        #[serde(default = "one_usize")]
        dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        constants: Option<DeclaredConstants>,
    },
    /// Damped oscillator with mean interaction and noise on the velocity.
    ShsLinear {
        #[serde(default = "one")]
        gamma: f64,
        #[serde(default = "one")]
        k: f64,
        #[serde(default = "tenth")]
        eps_int: f64,
        #[serde(default = "one")]
        sigma0: f64,
    },
}

impl ModelConfig {
    pub fn state_dim(&self) -> usize {
        match self {
            ModelConfig::MeanFieldOu { dim, .. } => *dim,
            ModelConfig::ShsLinear { .. } => 2,
        }
    }

    pub fn is_shs(&self) -> bool {
        matches!(self, ModelConfig::ShsLinear { .. })
    }
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn tenth() -> f64 {
    0.1
}
fn one_usize() -> usize {
    1
}

/// Initial cloud of a particle run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    /// Every particle at `point`.
    Dirac { point: Vec<f64> },
    /// I.i.d. `N(mean, std²·I)`; `mean` defaults to the origin.
    Gaussian {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mean: Option<Vec<f64>>,
        #[serde(default = "one")]
        std: f64,
    },
    /// Resampled from the invariant estimate.
    Invariant,
    /// Atom cloud CSV, resampled when its size differs from `n_particles`.
    File { path: PathBuf },
}

/// Where `μ̄̂` comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum InvariantConfig {
    Estimate {
        #[serde(default = "default_invariant_n")]
        n_particles: usize,
        #[serde(default = "twenty")]
        t_burn: f64,
        #[serde(default = "twenty")]
        t_avg: f64,
        #[serde(default = "centi")]
        dt: f64,
    },
    File { path: PathBuf },
}

impl Default for InvariantConfig {
    fn default() -> Self {
        InvariantConfig::Estimate {
            n_particles: default_invariant_n(),
            t_burn: 20.0,
            t_avg: 20.0,
            dt: 0.01,
        }
    }
}

fn default_invariant_n() -> usize {
    5000
}
fn twenty() -> f64 {
    20.0
}
fn centi() -> f64 {
    0.01
}

fn dirac2() -> InitialConfig {
    InitialConfig::Dirac { point: vec![2.0] }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    pub n_trials: usize,
    pub support: usize,
    pub h2_probes: usize,
    /// (D3) sampling point; defaults to the certified `(r, r₀)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r0: Option<f64>,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            n_trials: 256,
            support: 5,
            h2_probes: 64,
            r: None,
            r0: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub n_particles: usize,
    pub horizon: f64,
    pub dt: f64,
    pub initial: InitialConfig,
    pub track: Vec<usize>,
    pub invariant: InvariantConfig,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            n_particles: 1000,
            horizon: 10.0,
            dt: 0.01,
            initial: InitialConfig::Gaussian { mean: None, std: 1.0 },
            track: vec![0],
            invariant: InvariantConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvariantRunConfig {
    pub n_particles: usize,
    pub t_burn: f64,
    pub t_avg: f64,
    pub dt: f64,
    pub initial: InitialConfig,
}

impl Default for InvariantRunConfig {
    fn default() -> Self {
        Self {
            n_particles: 5000,
            t_burn: 20.0,
            t_avg: 20.0,
            dt: 0.01,
            initial: InitialConfig::Gaussian { mean: None, std: 1.0 },
        }
    }
}

/// Green–Kubo settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceSettings {
    pub horizon: f64,
    pub dt: f64,
    pub tau: f64,
    pub replicas: usize,
}

impl Default for VarianceSettings {
    fn default() -> Self {
        Self {
            horizon: 2000.0,
            dt: 0.01,
            tau: 10.0,
            replicas: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceConfig {
    pub observable: ObservableSpec,
    pub horizon: f64,
    pub dt: f64,
    pub tau: f64,
    pub replicas: usize,
    pub invariant: InvariantConfig,
}

impl VarianceConfig {
    pub fn settings(&self) -> VarianceSettings {
        VarianceSettings {
            horizon: self.horizon,
            dt: self.dt,
            tau: self.tau,
            replicas: self.replicas,
        }
    }
}

impl Default for VarianceConfig {
    fn default() -> Self {
        let v = VarianceSettings::default();
        Self {
            observable: ObservableSpec::Identity,
            horizon: v.horizon,
            dt: v.dt,
            tau: v.tau,
            replicas: v.replicas,
            invariant: InvariantConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContractionConfig {
    pub initial: InitialConfig,
    pub horizons: Vec<f64>,
    pub n_particles: usize,
    pub dt: f64,
    pub invariant: InvariantConfig,
}

impl Default for ContractionConfig {
    fn default() -> Self {
        Self {
            initial: dirac2(),
            horizons: (0..=10).map(|k| 0.5 * k as f64).collect(),
            n_particles: 5000,
            dt: 0.01,
            invariant: InvariantConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathwiseConfig {
    pub initial: InitialConfig,
    pub n_particles: usize,
    pub n_pairs: usize,
    pub horizon: f64,
    pub dt: f64,
    pub invariant: InvariantConfig,
}

impl Default for PathwiseConfig {
    fn default() -> Self {
        Self {
            initial: dirac2(),
            n_particles: 1000,
            n_pairs: 256,
            horizon: 5.0,
            dt: 0.005,
            invariant: InvariantConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdpTailConfig {
    pub observable: ObservableSpec,
    pub y: f64,
    pub kappa: f64,
    pub horizons: Vec<f64>,
    pub replicas: usize,
    pub n_particles: usize,
    pub dt: f64,
    pub engine: Engine,
    /// Known `V̄`; estimated with `variance` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vbar: Option<f64>,
    pub variance: VarianceSettings,
    /// Also write the Cramér functional grid to `cramer.csv`.
    pub cramer: bool,
    pub cramer_z_max: f64,
    pub cramer_points: usize,
    /// Also write the `a(t) = √t` variance diagnostic at this horizon to
    /// `clt.csv`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clt_horizon: Option<f64>,
    pub invariant: InvariantConfig,
}

impl Default for MdpTailConfig {
    fn default() -> Self {
        Self {
            observable: ObservableSpec::Identity,
            y: 0.5,
            kappa: 0.75,
            horizons: vec![50.0, 100.0, 200.0],
            replicas: 10_000,
            n_particles: 1000,
            dt: 0.02,
            engine: Engine::Auto,
            vbar: None,
            variance: VarianceSettings::default(),
            cramer: false,
            cramer_z_max: 2.0,
            cramer_points: 81,
            clt_horizon: None,
            invariant: InvariantConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquivalenceConfig {
    pub observable: ObservableSpec,
    pub epsilon: f64,
    pub kappa: f64,
    pub horizons: Vec<f64>,
    pub replicas: usize,
    pub n_particles: usize,
    pub dt: f64,
    pub engine: Engine,
    pub initial: InitialConfig,
    pub invariant: InvariantConfig,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        Self {
            observable: ObservableSpec::Identity,
            epsilon: 0.05,
            kappa: 0.75,
            horizons: vec![50.0, 100.0, 200.0],
            replicas: 10_000,
            n_particles: 1000,
            dt: 0.02,
            engine: Engine::Auto,
            initial: dirac2(),
            invariant: InvariantConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub deltas: Vec<f64>,
    pub horizons: Vec<f64>,
    pub replicas: usize,
    pub n_particles: usize,
    pub dt: f64,
    pub engine: Engine,
    pub initial: InitialConfig,
    pub invariant: InvariantConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            kind: ProbeKind::Abs,
            deltas: vec![0.0, 0.05, 0.1],
            horizons: vec![10.0, 20.0, 40.0],
            replicas: 2000,
            n_particles: 1000,
            dt: 0.02,
            engine: Engine::Auto,
            initial: dirac2(),
            invariant: InvariantConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum ExperimentConfig {
    Check(CheckConfig),
    Simulate(SimulateConfig),
    Invariant(InvariantRunConfig),
    Variance(VarianceConfig),
    Contraction(ContractionConfig),
    Pathwise(PathwiseConfig),
    MdpTail(MdpTailConfig),
    Equivalence(EquivalenceConfig),
    Probe(ProbeConfig),
}

impl ExperimentConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentConfig::Check(_) => "check",
            ExperimentConfig::Simulate(_) => "simulate",
            ExperimentConfig::Invariant(_) => "invariant",
            ExperimentConfig::Variance(_) => "variance",
            ExperimentConfig::Contraction(_) => "contraction",
            ExperimentConfig::Pathwise(_) => "pathwise",
            ExperimentConfig::MdpTail(_) => "mdp-tail",
            ExperimentConfig::Equivalence(_) => "equivalence",
            ExperimentConfig::Probe(_) => "probe",
        }
    }

    pub fn default_for(name: &str) -> Option<Self> {
        Some(match name {
            "check" => ExperimentConfig::Check(Default::default()),
            "simulate" => ExperimentConfig::Simulate(Default::default()),
            "invariant" => ExperimentConfig::Invariant(Default::default()),
            "variance" => ExperimentConfig::Variance(Default::default()),
            "contraction" => ExperimentConfig::Contraction(Default::default()),
            "pathwise" => ExperimentConfig::Pathwise(Default::default()),
            "mdp-tail" => ExperimentConfig::MdpTail(Default::default()),
            "equivalence" => ExperimentConfig::Equivalence(Default::default()),
            "probe" => ExperimentConfig::Probe(Default::default()),
            _ => return None,
        })
    }
}

/// Parse a JSON document. Structural errors (syntax, unknown or mistyped
/// keys) name the offending key via serde's message.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    serde_json::from_str(text).map_err(|e| bad("config", e.to_string()))
}

impl RunConfig {
    /// Fill the experiment section for `subcommand` and validate every
    /// parameter against the operation's preconditions.
    pub fn resolve(mut self, subcommand: &str) -> Result<Self, ConfigError> {
        match &self.experiment {
            Some(e) if e.name() != subcommand => {
                return Err(bad(
                    "experiment.name",
                    format!("config describes `{}` but the subcommand is `{subcommand}`", e.name()),
                ))
            }
            Some(_) => {}
            None => {
                self.experiment = Some(
                    ExperimentConfig::default_for(subcommand)
                        .ok_or_else(|| bad("subcommand", format!("unknown experiment `{subcommand}`")))?,
                )
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn experiment(&self) -> &ExperimentConfig {
        self.experiment.as_ref().expect("resolved config has an experiment")
    }

    fn validate(&self) -> Result<(), ConfigError> {
        validate_model(&self.model)?;
        let dim = self.model.state_dim();
        let shs = self.model.is_shs();
        match self.experiment() {
            ExperimentConfig::Check(c) => {
                at_least_one("experiment.n_trials", c.n_trials)?;
                at_least_one("experiment.support", c.support)?;
                at_least_one("experiment.h2_probes", c.h2_probes)?;
                if let Some(r) = c.r {
                    positive("experiment.r", r)?;
                }
                if c.r.is_some() != c.r0.is_some() {
                    return Err(bad("experiment.r0", "`r` and `r0` must be given together"));
                }
            }
            ExperimentConfig::Simulate(c) => {
                at_least_one("experiment.n_particles", c.n_particles)?;
                grid("experiment.horizon", &[c.horizon], c.dt)?;
                initial("experiment.initial", &c.initial, dim)?;
                invariant(&c.invariant)?;
                if let Some(&i) = c.track.iter().find(|&&i| i >= c.n_particles) {
                    return Err(bad("experiment.track", format!("particle {i} of {}", c.n_particles)));
                }
            }
            ExperimentConfig::Invariant(c) => {
                at_least_one("experiment.n_particles", c.n_particles)?;
                positive("experiment.t_burn", c.t_burn)?;
                grid("experiment.t_avg", &[c.t_burn, c.t_burn + c.t_avg], c.dt)?;
                if matches!(c.initial, InitialConfig::Invariant) {
                    return Err(bad("experiment.initial", "cannot start from the law being estimated"));
                }
                initial("experiment.initial", &c.initial, dim)?;
            }
            ExperimentConfig::Variance(c) => {
                observable("experiment.observable", c.observable, dim)?;
                variance("experiment", &c.settings())?;
                invariant(&c.invariant)?;
            }
            ExperimentConfig::Contraction(c) => {
                at_least_one("experiment.n_particles", c.n_particles)?;
                grid("experiment.horizons", &c.horizons, c.dt)?;
                initial("experiment.initial", &c.initial, dim)?;
                invariant(&c.invariant)?;
            }
            ExperimentConfig::Pathwise(c) => {
                if shs {
                    return Err(bad("model", "the pathwise bound needs declared (H1) constants of a DDSDE model"));
                }
                at_least_one("experiment.n_particles", c.n_particles)?;
                at_least_one("experiment.n_pairs", c.n_pairs)?;
                grid("experiment.horizon", &[c.horizon], c.dt)?;
                initial("experiment.initial", &c.initial, dim)?;
                invariant(&c.invariant)?;
            }
            ExperimentConfig::MdpTail(c) => {
                observable("experiment.observable", c.observable, dim)?;
                kappa(c.kappa)?;
                finite("experiment.y", c.y)?;
                at_least_one("experiment.replicas", c.replicas)?;
                at_least_one("experiment.n_particles", c.n_particles)?;
                grid("experiment.horizons", &c.horizons, c.dt)?;
                if let Some(v) = c.vbar {
                    positive("experiment.vbar", v)?;
                } else {
                    variance("experiment.variance", &c.variance)?;
                }
                positive("experiment.cramer_z_max", c.cramer_z_max)?;
                if c.cramer_points < 3 {
                    return Err(bad("experiment.cramer_points", "at least 3"));
                }
                if let Some(t) = c.clt_horizon {
                    grid("experiment.clt_horizon", &[t], c.dt)?;
                    positive("experiment.clt_horizon", t)?;
                }
                invariant(&c.invariant)?;
            }
            ExperimentConfig::Equivalence(c) => {
                observable("experiment.observable", c.observable, dim)?;
                kappa(c.kappa)?;
                positive("experiment.epsilon", c.epsilon)?;
                at_least_one("experiment.replicas", c.replicas)?;
                at_least_one("experiment.n_particles", c.n_particles)?;
                grid("experiment.horizons", &c.horizons, c.dt)?;
                initial("experiment.initial", &c.initial, dim)?;
                invariant(&c.invariant)?;
            }
            ExperimentConfig::Probe(c) => {
                match c.kind {
                    ProbeKind::Hoelder { alpha } if !(alpha > 0.0 && alpha < 1.0) => {
                        return Err(bad("experiment.kind.alpha", format!("must lie in (0, 1), got {alpha}")))
                    }
                    ProbeKind::Logmod { p } if !(p > 1.0) => {
                        return Err(bad("experiment.kind.p", format!("must exceed 1, got {p}")))
                    }
                    _ => {}
                }
                if c.deltas.is_empty() || c.deltas.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
                    return Err(bad("experiment.deltas", "nonempty list of finite nonnegative values"));
                }
                at_least_one("experiment.replicas", c.replicas)?;
                at_least_one("experiment.n_particles", c.n_particles)?;
                grid("experiment.horizons", &c.horizons, c.dt)?;
                initial("experiment.initial", &c.initial, dim)?;
                invariant(&c.invariant)?;
            }
        }
        Ok(())
    }
}

fn validate_model(m: &ModelConfig) -> Result<(), ConfigError> {
    match m {
        ModelConfig::MeanFieldOu {
            theta,
            eta,
            sigma0,
            dim,
            constants,
        } => {
            positive("model.theta", *theta)?;
            if !(eta.is_finite() && *eta >= 0.0) {
                return Err(bad("model.eta", format!("must be finite and nonnegative, got {eta}")));
            }
            if theta <= eta {
                return Err(bad("model.eta", format!("must be below theta = {theta}, got {eta}")));
            }
            positive("model.sigma0", *sigma0)?;
            at_least_one("model.dim", *dim)?;
            if let Some(c) = constants {
                finite("model.constants.lambda1", c.lambda1)?;
                if !(c.lambda2 >= 0.0) {
                    return Err(bad("model.constants.lambda2", "must be nonnegative"));
                }
                positive("model.constants.kappa1", c.kappa1)?;
                if !(c.kappa2 >= c.kappa1) {
                    return Err(bad("model.constants.kappa2", "must be at least kappa1"));
                }
            }
        }
        ModelConfig::ShsLinear {
            gamma,
            k,
            eps_int,
            sigma0,
        } => {
            positive("model.gamma", *gamma)?;
            positive("model.k", *k)?;
            positive("model.sigma0", *sigma0)?;
            if !(eps_int.is_finite() && *eps_int >= 0.0) {
                return Err(bad("model.eps_int", format!("must be finite and nonnegative, got {eps_int}")));
            }
        }
    }
    Ok(())
}

fn finite(key: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(bad(key, format!("must be finite, got {v}")))
    }
}

fn positive(key: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(key, format!("must be positive and finite, got {v}")))
    }
}

fn at_least_one(key: &str, v: usize) -> Result<(), ConfigError> {
    if v >= 1 {
        Ok(())
    } else {
        Err(bad(key, "must be at least 1"))
    }
}

fn kappa(k: f64) -> Result<(), ConfigError> {
    if scaling_check(k) {
        Ok(())
    } else {
        Err(bad(
            "experiment.kappa",
            format!("scaling a(t) = t^kappa needs 1/2 < kappa < 1, got {k}"),
        ))
    }
}

/// Horizons must be nondecreasing multiples of `dt`.
fn grid(key: &str, horizons: &[f64], dt: f64) -> Result<(), ConfigError> {
    if horizons.is_empty() {
        return Err(bad(key, "at least one horizon"));
    }
    let mut last = 0;
    for &t in horizons {
        let k = step_count(t, dt).map_err(|e| bad(key, e.to_string()))?;
        if k < last {
            return Err(bad(key, "horizons must be nondecreasing"));
        }
        last = k;
    }
    Ok(())
}

fn variance(prefix: &str, v: &VarianceSettings) -> Result<(), ConfigError> {
    grid(&format!("{prefix}.horizon"), &[v.horizon], v.dt)?;
    positive(&format!("{prefix}.tau"), v.tau)?;
    at_least_one(&format!("{prefix}.replicas"), v.replicas)?;
    let lags = (v.tau / v.dt).round();
    let steps = (v.horizon / v.dt).round();
    if steps < 10.0 * lags {
        return Err(bad(
            format!("{prefix}.horizon"),
            format!("needs at least 10·tau = {} of path, got {}", 10.0 * v.tau, v.horizon),
        ));
    }
    Ok(())
}

fn observable(key: &str, spec: ObservableSpec, dim: usize) -> Result<(), ConfigError> {
    match spec {
        ObservableSpec::Coordinate(i) if i >= dim => Err(bad(key, format!("coordinate {i} of a {dim}-dimensional state"))),
        ObservableSpec::Constant(c) if !c.is_finite() => Err(bad(key, "constant must be finite")),
        _ => Ok(()),
    }
}

fn initial(key: &str, init: &InitialConfig, dim: usize) -> Result<(), ConfigError> {
    match init {
        InitialConfig::Dirac { point } => {
            if point.len() != dim || point.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("{key}.point"), format!("{dim} finite coordinates")));
            }
        }
        InitialConfig::Gaussian { mean, std } => {
            if let Some(m) = mean {
                if m.len() != dim || m.iter().any(|v| !v.is_finite()) {
                    return Err(bad(format!("{key}.mean"), format!("{dim} finite coordinates")));
                }
            }
            if !(std.is_finite() && *std >= 0.0) {
                return Err(bad(format!("{key}.std"), "must be finite and nonnegative"));
            }
        }
        InitialConfig::Invariant | InitialConfig::File { .. } => {}
    }
    Ok(())
}

fn invariant(inv: &InvariantConfig) -> Result<(), ConfigError> {
    if let InvariantConfig::Estimate {
        n_particles,
        t_burn,
        t_avg,
        dt,
    } = inv
    {
        at_least_one("experiment.invariant.n_particles", *n_particles)?;
        positive("experiment.invariant.t_burn", *t_burn)?;
        positive("experiment.invariant.t_avg", *t_avg)?;
        grid("experiment.invariant.t_avg", &[*t_burn, t_burn + t_avg], *dt)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_gets_defaults() {
        let c = parse_config(r#"{"model": {"name": "mean_field_ou"}}"#)
            .unwrap()
            .resolve("check")
            .unwrap();
        assert_eq!(c.seed, 0);
        assert_eq!(c.out_dir, PathBuf::from("out"));
        assert_eq!(c.experiment(), &ExperimentConfig::Check(CheckConfig::default()));
        match c.model {
            ModelConfig::MeanFieldOu { theta, eta, sigma0, dim, .. } => {
                assert_eq!((theta, eta, sigma0, dim), (1.0, 0.5, 1.0, 1))
            }
            _ => panic!(),
        }
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = parse_config(
            r#"{"model": {"name": "mean_field_ou"}, "experiment": {"name": "mdp-tail", "kapa": 0.7}}"#,
        )
        .unwrap_err();
        assert!(e.reason.contains("kapa"), "{e}");
        let e = parse_config(r#"{"model": {"name": "mean_field_ou", "thta": 1}}"#).unwrap_err();
        assert!(e.reason.contains("thta"), "{e}");
        let e = parse_config(r#"{"model": {"name": "mean_field_ou"}, "sed": 1}"#).unwrap_err();
        assert!(e.reason.contains("sed"), "{e}");
    }

    #[test]
    fn clt_kappa_is_rejected_for_mdp_tail() {
        let e = parse_config(
            r#"{"model": {"name": "mean_field_ou"}, "experiment": {"name": "mdp-tail", "kappa": 0.5}}"#,
        )
        .unwrap()
        .resolve("mdp-tail")
        .unwrap_err();
        assert_eq!(e.key, "experiment.kappa");
        assert!(e.reason.contains("1/2 < kappa < 1"));
    }

    #[test]
    fn experiment_must_match_subcommand() {
        let e = parse_config(r#"{"model": {"name": "mean_field_ou"}, "experiment": {"name": "probe"}}"#)
            .unwrap()
            .resolve("check")
            .unwrap_err();
        assert_eq!(e.key, "experiment.name");
    }

    #[test]
    fn threads_accept_count_or_auto() {
        let c = parse_config(r#"{"model": {"name": "shs_linear"}, "threads": "auto"}"#).unwrap();
        assert_eq!(c.threads, Some(Threads::Auto(AutoThreads::Auto)));
        let c = parse_config(r#"{"model": {"name": "shs_linear"}, "threads": 3}"#).unwrap();
        assert_eq!(c.threads.unwrap().resolve(), 3);
        assert!(parse_config(r#"{"model": {"name": "shs_linear"}, "threads": 0}"#).is_err());
        assert!("0".parse::<Threads>().is_err());
    }

    #[test]
    fn resolved_config_round_trips_without_threads() {
        let c = parse_config(r#"{"model": {"name": "mean_field_ou"}, "threads": 2, "seed": 9}"#)
            .unwrap()
            .resolve("probe")
            .unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert!(!text.contains("threads"));
        let back = parse_config(&text).unwrap().resolve("probe").unwrap();
        assert_eq!(back.experiment, c.experiment);
        assert_eq!(back.seed, 9);
    }

    #[test]
    fn off_grid_horizons_are_rejected() {
        let e = parse_config(
            r#"{"model": {"name": "mean_field_ou"}, "experiment": {"name": "contraction", "horizons": [0.5, 0.25], "dt": 0.1}}"#,
        )
        .unwrap()
        .resolve("contraction")
        .unwrap_err();
        assert_eq!(e.key, "experiment.horizons");
    }
}
