//! Replica experiments on a tagged particle: moderate-functional samples,
//! tail curves, exponential equivalence and integrability probes.
//!
//! Replica `r` owns the streams `(seed, r, ·)`. Affine mean-field models use
//! the reduced tagged simulation unless [`Engine::Full`] is requested; other
//! models always run the full particle system with particle 0 tagged.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{horizon_steps, matching_targets, param, sq_gap, Result, TailEstimate};
use crate::functionals::{
    clt_rate, cramer_functional, legendre_transform, logsumexp, rate_function, scaling_check, CramerValue,
    FunctionalError, Observable, ScalingFunction, Trapezoid,
};
use crate::integrator::{CoupledTagged, ParticleSystem, ReferenceProcess, TaggedSystem};
use crate::measures::{optimal_matching, EmpiricalMeasure};
use crate::models::{AffineMeanField, Dynamics, Model};
use crate::rng::{Domain, NoiseStream, StreamKey};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    /// Reduced tagged simulation when the model is affine mean-field.
    #[default]
    Auto,
    /// Always simulate all N particles.
    Full,
}

impl Engine {
    fn reduced_field(self, model: &Model) -> Option<AffineMeanField> {
        match self {
            Engine::Auto => model.affine(),
            Engine::Full => None,
        }
    }

    /// Name of the engine actually used for `model`.
    pub fn resolved(self, model: &Model) -> &'static str {
        if self.reduced_field(model).is_some() {
            "reduced"
        } else {
            "full"
        }
    }
}

fn replica_picker(seed: u64, r: usize) -> NoiseStream {
    NoiseStream::new(StreamKey::new(seed, r as u64, Domain::Initial, 0), 1)
}

enum Tagged {
    Reduced(TaggedSystem),
    Full(ParticleSystem),
}

impl Tagged {
    /// N particles drawn i.i.d. from `law`; particle 0 is tagged.
    fn stationary(
        model: &Arc<Model>,
        field: Option<&AffineMeanField>,
        law: &EmpiricalMeasure,
        n: usize,
        seed: u64,
        r: usize,
    ) -> Result<Self> {
        let mut pick = replica_picker(seed, r);
        let d = law.dim();
        match field {
            Some(f) => {
                let x0 = law.atom(pick.index(law.len())).to_vec();
                let mut rest = vec![0.0; d];
                for _ in 1..n {
                    for (a, v) in rest.iter_mut().zip(law.atom(pick.index(law.len()))) {
                        *a += v;
                    }
                }
                if n > 1 {
                    rest.iter_mut().for_each(|a| *a /= (n - 1) as f64);
                }
                Ok(Tagged::Reduced(TaggedSystem::new(f.clone(), n, &x0, &rest, seed, r as u64)?))
            }
            None => {
                let mut pts = Vec::with_capacity(n * d);
                for _ in 0..n {
                    pts.extend_from_slice(law.atom(pick.index(law.len())));
                }
                let cloud = EmpiricalMeasure::from_flat(d, pts)?;
                Ok(Tagged::Full(ParticleSystem::new(model.clone(), &cloud, seed, r as u64)?))
            }
        }
    }

    fn step(&mut self, dt: f64) -> Result<()> {
        match self {
            Tagged::Reduced(s) => s.step(dt)?,
            Tagged::Full(s) => s.step(dt)?,
        }
        Ok(())
    }

    fn x(&self) -> &[f64] {
        match self {
            Tagged::Reduced(s) => s.tagged(),
            Tagged::Full(s) => s.particle(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModerateParams {
    pub horizons: Vec<f64>,
    pub replicas: usize,
    pub n_particles: usize,
    pub dt: f64,
    pub seed: u64,
    pub engine: Engine,
}

impl ModerateParams {
    fn validate(&self) -> Result<Vec<u64>> {
        if self.replicas == 0 {
            return Err(param("replicas", "at least one replica"));
        }
        if self.n_particles == 0 {
            return Err(param("n_particles", "at least one particle"));
        }
        horizon_steps(&self.horizons, self.dt)
    }
}

/// Replica values of `l_t^A = (t/a(t))(L_t^A − μ̄(A))` along the tagged
/// particle, started from N i.i.d. draws of `mu_bar_hat`. Indexed
/// `[horizon][replica]`.
pub fn moderate_samples(
    model: &Arc<Model>,
    a: &Observable,
    mu_bar_hat: &EmpiricalMeasure,
    scaling: &ScalingFunction,
    params: &ModerateParams,
) -> Result<Vec<Vec<f64>>> {
    let steps = params.validate()?;
    a.check_dim(model.state_dim())?;
    let field = params.engine.reduced_field(model);
    let mu_a = mu_bar_hat.expect(|x| a.eval(x));
    let dt = params.dt;
    let one = |r: usize| -> Result<Vec<f64>> {
        let mut sys = Tagged::stationary(model, field.as_ref(), mu_bar_hat, params.n_particles, params.seed, r)?;
        let mut q = Trapezoid::new(dt);
        q.push(a.eval(sys.x()));
        let mut out = Vec::with_capacity(steps.len());
        let mut k = 0u64;
        for (&t, &target) in params.horizons.iter().zip(&steps) {
            while k < target {
                sys.step(dt)?;
                q.push(a.eval(sys.x()));
                k += 1;
            }
            out.push(if t > 0.0 { scaling.moderate_factor(t) * (q.mean() - mu_a) } else { 0.0 });
        }
        Ok(out)
    };
    let per_replica = (0..params.replicas)
        .into_par_iter()
        .map(one)
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(transpose(per_replica, params.horizons.len()))
}

fn transpose(rows: Vec<Vec<f64>>, width: usize) -> Vec<Vec<f64>> {
    let mut cols = vec![Vec::with_capacity(rows.len()); width];
    for row in rows {
        for (c, v) in cols.iter_mut().zip(row) {
            c.push(v);
        }
    }
    cols
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdpParams {
    pub y: f64,
    pub kappa: f64,
    pub moderate: ModerateParams,
    /// Half-width of the symmetric z-grid of the Cramér functional.
    pub cramer_z_max: f64,
    pub cramer_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CramerRow {
    pub t: f64,
    pub z: f64,
    pub value: CramerValue,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LegendreRow {
    pub t: f64,
    pub y: f64,
    /// `−Λ̂*(y)` over the unsaturated grid points, if any.
    pub neg_rate: Option<f64>,
    pub convexified: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdpResult {
    pub rows: Vec<TailEstimate>,
    /// `−y²/(8V̄)`
    pub rate8: f64,
    /// `−y²/(4V̄)`
    pub rate4: f64,
    pub cramer: Vec<CramerRow>,
    pub legendre: Vec<LegendreRow>,
    /// `[horizon][replica]` values of `l_t^A`.
    pub samples: Vec<Vec<f64>>,
}

/// Tail rows `#{l ≥ y}` for samples indexed `[horizon][replica]`.
pub fn tail_rows(samples: &[Vec<f64>], horizons: &[f64], y: f64, scaling: &ScalingFunction) -> Vec<TailEstimate> {
    horizons
        .iter()
        .zip(samples)
        .map(|(&t, ls)| {
            let hits = ls.iter().filter(|&&l| l >= y).count() as u64;
            TailEstimate::from_counts(t, ls.len() as u64, hits, scaling)
        })
        .collect()
}

/// Moderate-deviation tail curve of `l_t^A` with both candidate rates.
pub fn mdp_tail_experiment(
    model: &Arc<Model>,
    a: &Observable,
    mu_bar_hat: &EmpiricalMeasure,
    vbar: f64,
    params: &MdpParams,
) -> Result<MdpResult> {
    if !scaling_check(params.kappa) {
        return Err(FunctionalError::Scaling(params.kappa).into());
    }
    let scaling = ScalingFunction::new(params.kappa)?;
    let rate8 = -rate_function(params.y, vbar)?;
    let rate4 = -clt_rate(params.y, vbar)?;
    if params.cramer_points < 3 || !(params.cramer_z_max > 0.0) {
        return Err(param("cramer", "need at least 3 grid points and a positive z range"));
    }
    let samples = moderate_samples(model, a, mu_bar_hat, &scaling, &params.moderate)?;
    let horizons = &params.moderate.horizons;
    let rows = tail_rows(&samples, horizons, params.y, &scaling);
    let zs: Vec<f64> = (0..params.cramer_points)
        .map(|k| -params.cramer_z_max + 2.0 * params.cramer_z_max * k as f64 / (params.cramer_points - 1) as f64)
        .collect();
    let mut cramer = Vec::new();
    let mut legendre = Vec::new();
    for (&t, ls) in horizons.iter().zip(&samples) {
        if t <= 0.0 {
            continue;
        }
        let mut grid = Vec::new();
        for &z in &zs {
            let value = cramer_functional(ls, z, t, &scaling)?;
            if let CramerValue::Value(v) = value {
                grid.push((z, v));
            }
            cramer.push(CramerRow { t, z, value });
        }
        let (neg_rate, convexified) = if grid.is_empty() {
            (None, false)
        } else {
            let lt = legendre_transform(&grid, params.y)?;
            (Some(-lt.value), lt.convexified)
        };
        legendre.push(LegendreRow {
            t,
            y: params.y,
            neg_rate,
            convexified,
        });
    }
    Ok(MdpResult {
        rows,
        rate8,
        rate4,
        cramer,
        legendre,
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CltDiagnostic {
    pub t: f64,
    pub replicas: usize,
    pub mean: f64,
    pub variance: f64,
    /// Normal-theory standard error of the sample variance.
    pub variance_stderr: f64,
    /// `2V̄`, the variance of the CLT limit.
    pub target: f64,
}

/// Sample variance of `(1/√t)∫₀^t (A − μ̄(A))` across replicas: the
/// `a(t) = √t` boundary of the moderate scale, compared with `2V̄`.
pub fn clt_diagnostic(
    model: &Arc<Model>,
    a: &Observable,
    mu_bar_hat: &EmpiricalMeasure,
    vbar: f64,
    t: f64,
    params: &ModerateParams,
) -> Result<CltDiagnostic> {
    let p = ModerateParams {
        horizons: vec![t],
        ..params.clone()
    };
    if !(t > 0.0) {
        return Err(param("t", "positive horizon"));
    }
    let samples = moderate_samples(model, a, mu_bar_hat, &ScalingFunction::clt_diagnostic(), &p)?;
    let ls = &samples[0];
    let n = ls.len() as f64;
    let mean = ls.iter().sum::<f64>() / n;
    let variance = if ls.len() > 1 {
        ls.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(CltDiagnostic {
        t,
        replicas: ls.len(),
        mean,
        variance,
        variance_stderr: variance * (2.0 / (n - 1.0).max(1.0)).sqrt(),
        target: 2.0 * vbar,
    })
}

/// Initial data shared by the coupled experiments: `ν̂`, `μ̄̂` and the
/// W₂-optimal matching of `ν̂` onto [`matching_targets`].
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingSetup {
    pub nu_hat: EmpiricalMeasure,
    pub mu_bar_hat: EmpiricalMeasure,
    pub targets: EmpiricalMeasure,
    pub perm: Vec<usize>,
    pub w2_squared: f64,
}

impl CouplingSetup {
    pub fn new(nu_hat: EmpiricalMeasure, mu_bar_hat: EmpiricalMeasure, seed: u64) -> Result<Self> {
        let targets = matching_targets(&mu_bar_hat, nu_hat.len(), seed)?;
        let m = optimal_matching(&nu_hat, &targets)?;
        Ok(Self {
            nu_hat,
            mu_bar_hat,
            targets,
            perm: m.perm,
            w2_squared: m.cost,
        })
    }

    pub fn n_particles(&self) -> usize {
        self.nu_hat.len()
    }
}

enum Coupled<'a> {
    Reduced(CoupledTagged),
    Full {
        sys: ParticleSystem,
        xbar: ReferenceProcess<'a>,
        xi: Vec<f64>,
    },
}

impl<'a> Coupled<'a> {
    /// Replica `r`: the particle system starts at `ν̂` with a uniformly
    /// chosen atom `i` tagged; `X̄` starts at its match `μ̄̂_{π(i)}` and
    /// shares the tagged particle's increments.
    fn new(model: &'a Arc<Model>, field: Option<&AffineMeanField>, setup: &CouplingSetup, seed: u64, r: usize) -> Result<Self> {
        let n = setup.n_particles();
        let i = replica_picker(seed, r).index(n);
        let xbar0 = setup.targets.atom(setup.perm[i]);
        match field {
            Some(f) => {
                let sys = TaggedSystem::from_cloud(f.clone(), &setup.nu_hat, i, seed, r as u64)?;
                Ok(Coupled::Reduced(CoupledTagged::new(sys, xbar0, setup.mu_bar_hat.mean())?))
            }
            None => {
                let mut order: Vec<usize> = (0..n).collect();
                order.swap(0, i);
                let cloud = setup.nu_hat.permuted(&order);
                let sys = ParticleSystem::new(model.clone(), &cloud, seed, r as u64)?;
                let key = StreamKey::new(seed, r as u64, Domain::Coupling, 0);
                let xbar = ReferenceProcess::new(model, &setup.mu_bar_hat, xbar0, key)?;
                Ok(Coupled::Full {
                    sys,
                    xbar,
                    xi: vec![0.0; model.noise_dim()],
                })
            }
        }
    }

    fn step(&mut self, dt: f64) -> Result<()> {
        match self {
            Coupled::Reduced(c) => c.step(dt)?,
            Coupled::Full { sys, xbar, xi } => {
                sys.step_capture(dt, xi)?;
                xbar.step_with(dt, xi)?;
            }
        }
        Ok(())
    }

    fn pair(&self) -> (&[f64], &[f64]) {
        match self {
            Coupled::Reduced(c) => (c.x(), c.xbar()),
            Coupled::Full { sys, xbar, .. } => (sys.particle(0), xbar.state()),
        }
    }
}

/// Run every replica of a coupled experiment, returning
/// `per_replica[r][h]` of whatever `record` extracts at each horizon.
fn coupled_replicas<S, F, G>(
    model: &Arc<Model>,
    setup: &CouplingSetup,
    horizons: &[f64],
    replicas: usize,
    dt: f64,
    seed: u64,
    engine: Engine,
    init: impl Fn() -> S + Sync,
    update: F,
    record: G,
) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut S, &[f64], &[f64]) + Sync,
    G: Fn(&S, f64) -> f64 + Sync,
{
    if replicas == 0 {
        return Err(param("replicas", "at least one replica"));
    }
    if setup.nu_hat.dim() != model.state_dim() {
        return Err(param("nu_hat", "dimension differs from the model state"));
    }
    let steps = horizon_steps(horizons, dt)?;
    let field = engine.reduced_field(model);
    let one = |r: usize| -> Result<Vec<f64>> {
        let mut c = Coupled::new(model, field.as_ref(), setup, seed, r)?;
        let mut state = init();
        {
            let (x, xb) = c.pair();
            update(&mut state, x, xb);
        }
        let mut out = Vec::with_capacity(steps.len());
        let mut k = 0u64;
        for (&t, &target) in horizons.iter().zip(&steps) {
            while k < target {
                c.step(dt)?;
                let (x, xb) = c.pair();
                update(&mut state, x, xb);
                k += 1;
            }
            out.push(record(&state, t));
        }
        Ok(out)
    };
    (0..replicas).into_par_iter().map(one).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceParams {
    pub epsilon: f64,
    pub kappa: f64,
    pub horizons: Vec<f64>,
    pub replicas: usize,
    pub dt: f64,
    pub seed: u64,
    pub engine: Engine,
}

/// `P(|l_t^A − l̄_t^A| > ε)` for the synchronously coupled pair, normalized
/// by `t/a(t)²`.
pub fn exp_equivalence_experiment(
    model: &Arc<Model>,
    a: &Observable,
    setup: &CouplingSetup,
    params: &EquivalenceParams,
) -> Result<Vec<TailEstimate>> {
    let scaling = ScalingFunction::new(params.kappa)?;
    if !(params.epsilon > 0.0) {
        return Err(param("epsilon", "must be positive"));
    }
    a.check_dim(model.state_dim())?;
    let dt = params.dt;
    let per_replica = coupled_replicas(
        model,
        setup,
        &params.horizons,
        params.replicas,
        dt,
        params.seed,
        params.engine,
        || Trapezoid::new(dt),
        |q, x, xb| q.push(a.eval(x) - a.eval(xb)),
        |q, t| if t > 0.0 { (scaling.moderate_factor(t) * q.mean()).abs() } else { 0.0 },
    )?;
    let cols = transpose(per_replica, params.horizons.len());
    Ok(params
        .horizons
        .iter()
        .zip(&cols)
        .map(|(&t, gaps)| {
            let hits = gaps.iter().filter(|&&g| g > params.epsilon).count() as u64;
            TailEstimate::from_counts(t, gaps.len() as u64, hits, &scaling)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// `G_T = ∫|X−X̄|`
    Abs,
    /// `G_T = ∫|X−X̄|^α(1+|X|+|X̄|)^{2−α}`
    Hoelder { alpha: f64 },
    /// `G_T = ∫(1+|X|²+|X̄|²) / (log(e+|X|²+|X̄|²)·log(e+|X−X̄|⁻¹)^p)`
    Logmod { p: f64 },
    /// `G_T = sup_{t≤T}|X_t|²`
    Supexp,
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProbeKind::Abs => write!(f, "abs"),
            ProbeKind::Hoelder { alpha } => write!(f, "hoelder({alpha})"),
            ProbeKind::Logmod { p } => write!(f, "logmod({p})"),
            ProbeKind::Supexp => write!(f, "supexp"),
        }
    }
}

impl ProbeKind {
    fn validate(self) -> Result<Self> {
        match self {
            ProbeKind::Hoelder { alpha } if !(alpha > 0.0 && alpha < 1.0) => {
                Err(param("alpha", format!("must lie in (0, 1), got {alpha}")))
            }
            ProbeKind::Logmod { p } if !(p > 1.0) => Err(param("p", format!("must exceed 1, got {p}"))),
            k => Ok(k),
        }
    }

    /// Integrand at `(X, X̄)`; unused for `Supexp`.
    pub fn integrand(self, x: &[f64], xb: &[f64]) -> f64 {
        let gap = sq_gap(x, xb).sqrt();
        let (nx2, nb2): (f64, f64) = (x.iter().map(|v| v * v).sum(), xb.iter().map(|v| v * v).sum());
        match self {
            ProbeKind::Abs => gap,
            ProbeKind::Hoelder { alpha } => gap.powf(alpha) * (1.0 + nx2.sqrt() + nb2.sqrt()).powf(2.0 - alpha),
            ProbeKind::Logmod { p } => {
                if gap == 0.0 {
                    return 0.0;
                }
                let s = nx2 + nb2;
                let e = std::f64::consts::E;
                (1.0 + s) / ((e + s).ln() * (e + 1.0 / gap).ln().powf(p))
            }
            ProbeKind::Supexp => nx2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams {
    pub deltas: Vec<f64>,
    pub horizons: Vec<f64>,
    pub replicas: usize,
    pub dt: f64,
    pub seed: u64,
    pub engine: Engine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeRow {
    pub kind: ProbeKind,
    pub delta: f64,
    pub t: f64,
    /// `ln((1/R) Σ_r exp{δ·G_T^r})`
    pub log_mean_exp: f64,
    /// Some `δ·G_T` exceeded the exponent guard.
    pub saturated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub rows: Vec<ProbeRow>,
    /// Deltas whose every row is saturated.
    pub all_saturated: Vec<f64>,
}

/// Exponential-moment probe `ln Ê exp{δ·G_T}` over a (δ, T) grid.
pub fn integrability_probe(
    model: &Arc<Model>,
    kind: ProbeKind,
    setup: &CouplingSetup,
    params: &ProbeParams,
) -> Result<ProbeResult> {
    let kind = kind.validate()?;
    if params.deltas.is_empty() || params.deltas.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
        return Err(param("deltas", "nonempty, finite and nonnegative"));
    }
    let dt = params.dt;
    let per_replica = coupled_replicas(
        model,
        setup,
        &params.horizons,
        params.replicas,
        dt,
        params.seed,
        params.engine,
        || (Trapezoid::new(dt), 0.0f64),
        |(q, sup), x, xb| {
            if kind == ProbeKind::Supexp {
                *sup = sup.max(kind.integrand(x, xb));
            } else {
                q.push(kind.integrand(x, xb));
            }
        },
        |(q, sup), _| if kind == ProbeKind::Supexp { *sup } else { q.integral() },
    )?;
    let cols = transpose(per_replica, params.horizons.len());
    let mut rows = Vec::new();
    let mut all_saturated = Vec::new();
    for &delta in &params.deltas {
        let mut every = true;
        for (&t, gs) in params.horizons.iter().zip(&cols) {
            let exps: Vec<f64> = gs.iter().map(|g| delta * g).collect();
            let max = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let saturated = max > crate::functionals::EXP_GUARD;
            every &= saturated;
            rows.push(ProbeRow {
                kind,
                delta,
                t,
                log_mean_exp: logsumexp(&exps) - (gs.len() as f64).ln(),
                saturated,
            });
        }
        if every {
            all_saturated.push(delta);
        }
    }
    Ok(ProbeResult { rows, all_saturated })
}
