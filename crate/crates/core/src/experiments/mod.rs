//! Experiment harnesses: contraction curves, the pathwise coupling bound,
//! MDP tail curves, exponential equivalence and integrability probes.

mod output;
mod replicas;

pub use output::{
    contraction_table, cramer_table, flag, fmt_num, probe_table, report_table, tail_table, Table, TAIL_HEADER,
};
pub use replicas::{
    clt_diagnostic, exp_equivalence_experiment, integrability_probe, mdp_tail_experiment, moderate_samples,
    tail_rows, CltDiagnostic, CouplingSetup, CramerRow, Engine, EquivalenceParams, LegendreRow, MdpParams,
    MdpResult, ModerateParams, ProbeKind, ProbeParams, ProbeResult, ProbeRow,
};

use std::sync::Arc;

use thiserror::Error;

use crate::functionals::{FunctionalError, ScalingFunction};
use crate::integrator::{simulate_coupled_many, step_count, IntegratorError, ParticleSystem};
use crate::measures::{optimal_matching, EmpiricalMeasure, MeasureError};
use crate::models::{Dynamics, HypothesisReport, Model, SigmaClass};
use crate::rng::{Domain, NoiseStream, StreamKey};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
    #[error(transparent)]
    Functional(#[from] FunctionalError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("model has no certified contraction rate (run the (D3) certification first)")]
    Uncertified,
    #[error("pathwise bound needs a state-free diffusion, model has sigma class `{0}`")]
    SigmaClass(SigmaClass),
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> ExperimentError {
    ExperimentError::Parameter {
        name,
        reason: reason.into(),
    }
}

/// Two-sided 95% normal quantile.
pub const WILSON_Z: f64 = 1.959963984540054;

/// Wilson score interval for `hits` successes out of `n`.
pub fn wilson_interval(hits: u64, n: u64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let (k, n) = (hits as f64, n as f64);
    let p = k / n;
    let z2 = WILSON_Z * WILSON_Z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = WILSON_Z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).clamp(0.0, p), (center + half).clamp(p, 1.0))
}

/// Tail probability at one horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailEstimate {
    pub t: f64,
    pub replicas: u64,
    pub hits: u64,
    pub p_hat: f64,
    pub wilson_low: f64,
    pub wilson_high: f64,
    /// `(t/a(t)²)·ln p̂`, or with `wilson_high` when `hits = 0`.
    pub normalized_log_tail: f64,
    pub saturated: bool,
}

impl TailEstimate {
    pub fn from_counts(t: f64, replicas: u64, hits: u64, a: &ScalingFunction) -> Self {
        let p_hat = if replicas > 0 { hits as f64 / replicas as f64 } else { 0.0 };
        let (lo, hi) = wilson_interval(hits, replicas);
        let saturated = hits == 0;
        let p = if saturated { hi } else { p_hat };
        Self {
            t,
            replicas,
            hits,
            p_hat,
            wilson_low: lo,
            wilson_high: hi,
            normalized_log_tail: a.speed(t) * p.ln(),
            saturated,
        }
    }
}

/// Observed versus predicted contraction at one horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub t: f64,
    pub observed: f64,
    pub bound: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionParams {
    pub horizons: Vec<f64>,
    pub n_particles: usize,
    pub dt: f64,
    pub seed: u64,
}

/// Horizons as step counts; must be nondecreasing multiples of `dt`.
pub(crate) fn horizon_steps(horizons: &[f64], dt: f64) -> Result<Vec<u64>> {
    if horizons.is_empty() {
        return Err(param("horizons", "at least one horizon"));
    }
    let steps = horizons
        .iter()
        .map(|&t| step_count(t, dt))
        .collect::<std::result::Result<Vec<u64>, _>>()?;
    if steps.windows(2).any(|w| w[1] < w[0]) {
        return Err(param("horizons", "must be nondecreasing"));
    }
    Ok(steps)
}

/// `n` particles for the initial law: `cloud` itself when it has `n` atoms,
/// otherwise a resample drawn from `(seed, replica, Initial)`.
pub(crate) fn initial_cloud(cloud: &EmpiricalMeasure, n: usize, seed: u64, replica: u64) -> Result<EmpiricalMeasure> {
    if cloud.len() == n {
        return Ok(cloud.clone());
    }
    Ok(crate::integrator::resample(
        cloud,
        n,
        StreamKey::new(seed, replica, Domain::Initial, 0),
    )?)
}

/// `W₂(P_t*ν₀, μ̄)²` against `e^{−g t}·W₂(ν₀, μ̄)²` along one particle run.
///
/// The rate `g` is the model's declared (DDSDE) or certified (SHS)
/// contraction rate. `μ̄` is matched through [`matching_targets`] when the
/// cloud sizes differ.
pub fn contraction_experiment(
    model: Arc<Model>,
    nu0: &EmpiricalMeasure,
    mu_bar_hat: &EmpiricalMeasure,
    params: &ContractionParams,
) -> Result<Vec<CurveRow>> {
    if nu0.is_empty() {
        return Err(MeasureError::Empty.into());
    }
    let rate = model.contraction().ok_or(ExperimentError::Uncertified)?.rate;
    let steps = horizon_steps(&params.horizons, params.dt)?;
    let init = initial_cloud(nu0, params.n_particles, params.seed, 0)?;
    let targets = matching_targets(mu_bar_hat, init.len(), params.seed)?;
    let w0 = optimal_matching(&init, &targets)?.cost;
    let mut sys = ParticleSystem::new(model, &init, params.seed, 0)?;
    let mut rows = Vec::with_capacity(steps.len());
    for (&t, &k) in params.horizons.iter().zip(&steps) {
        while sys.steps() < k {
            sys.step(params.dt)?;
        }
        let observed = optimal_matching(&sys.empirical(), &targets)?.cost;
        let bound = (-rate * t).exp() * w0;
        rows.push(CurveRow {
            t,
            observed,
            bound,
            ratio: if bound > 0.0 { observed / bound } else { f64::NAN },
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathwiseParams {
    pub n_pairs: usize,
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
}

/// `mu_bar_hat` itself when it has `n` atoms, otherwise `n` atoms resampled
/// from it on a stream reserved for matching targets.
pub fn matching_targets(mu_bar_hat: &EmpiricalMeasure, n: usize, seed: u64) -> Result<EmpiricalMeasure> {
    if mu_bar_hat.len() == n {
        return Ok(mu_bar_hat.clone());
    }
    Ok(crate::integrator::resample(
        mu_bar_hat,
        n,
        StreamKey::new(seed, u64::MAX, Domain::Initial, 0),
    )?)
}

/// Pathwise Gronwall bound along synchronously coupled pairs.
///
/// The law proxy is the particle system started from `nu_hat`; pair `j`
/// starts at `(ν̂_i, μ̄_{π(i)})` for a uniform `i` and the W₂-optimal
/// matching `π` onto [`matching_targets`]. The reference dynamics freeze
/// the full `mu_bar_hat`. Margin at grid time `t`:
/// `|X_t−X̄_t|² − max(|X₀−X̄₀|², Ŵ₂²)·e^{−gt}·(1 + 10·dt·t)`.
/// Each pair is one trial with its worst grid time.
pub fn pathwise_contraction_check(
    model: Arc<Model>,
    nu_hat: &EmpiricalMeasure,
    mu_bar_hat: &EmpiricalMeasure,
    params: PathwiseParams,
) -> Result<HypothesisReport> {
    let class = model.sigma_class();
    if class == SigmaClass::General {
        return Err(ExperimentError::SigmaClass(class));
    }
    let rate = model.contraction().ok_or(ExperimentError::Uncertified)?.rate;
    if params.n_pairs == 0 {
        return Err(param("n_pairs", "at least one pair"));
    }
    let targets = matching_targets(mu_bar_hat, nu_hat.len(), params.seed)?;
    let matching = optimal_matching(nu_hat, &targets)?;
    let w2sq = matching.cost;
    let picks: Vec<usize> = (0..params.n_pairs)
        .map(|j| NoiseStream::new(StreamKey::new(params.seed, j as u64, Domain::Initial, 0), 1).index(nu_hat.len()))
        .collect();
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = picks
        .iter()
        .map(|&i| (nu_hat.atom(i).to_vec(), targets.atom(matching.perm[i]).to_vec()))
        .collect();
    let proxy = ParticleSystem::new(model, nu_hat, params.seed, 0)?;
    let (paths, _) = simulate_coupled_many(&pairs, mu_bar_hat, &proxy, params.horizon, params.dt, (params.seed, 0))?;
    let dt = params.dt;
    let worst: Vec<(f64, f64)> = paths
        .iter()
        .map(|c| {
            let d0: f64 = sq_gap(c.path_x.point(0), c.path_xbar.point(0));
            let scale = d0.max(w2sq);
            let mut best = (f64::NEG_INFINITY, 0.0);
            for k in 0..c.path_x.len() {
                let t = c.path_x.time(k) - c.path_x.t0;
                let m = sq_gap(c.path_x.point(k), c.path_xbar.point(k)) - scale * (-rate * t).exp() * (1.0 + 10.0 * dt * t);
                if m > best.0 {
                    best = (m, t);
                }
            }
            best
        })
        .collect();
    let margins: Vec<f64> = worst.iter().map(|w| w.0).collect();
    Ok(HypothesisReport::from_margins(&margins, 0.0, |j| {
        format!("pair={j} atom={} t={}", picks[j], worst[j].1)
    }))
}

pub(crate) fn sq_gap(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Least-squares slope of `ys` against `xs`.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests;
