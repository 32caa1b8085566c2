//! Euler–Maruyama stepping for the particle system, the frozen-law reference
//! SDE and synchronously coupled pairs.
//!
//! Particle `i` of replica `r` draws its increments from the stream
//! `(seed, r, Dynamics, id_i)` and step `k` consumes block `k` of it, so the
//! result never depends on how the particle loop is scheduled.

mod tagged;

pub use tagged::{CoupledTagged, TaggedSystem};

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::measures::{
    optimal_matching, wasserstein2, EmpiricalMeasure, MeasureError, W2Method, ASSIGNMENT_LIMIT,
};
use crate::models::{AffineMeanField, Dynamics, Model, SigmaClass};
use crate::rng::{Domain, NoiseStream, StreamKey};

/// A state whose Euclidean norm exceeds this aborts the run.
pub const DIVERGENCE_THRESHOLD: f64 = 1e8;

/// Largest cloud on which the stationarity residual runs the assignment
/// solver; larger multi-dimensional clouds use their leading atoms.
pub const RESIDUAL_ATOMS: usize = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegratorError {
    #[error("state of particle {particle} diverged at t = {time}")]
    Divergence { particle: usize, time: f64 },
    #[error("dt must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("horizon {horizon} is not a nonnegative integer multiple of dt = {dt}")]
    Horizon { horizon: f64, dt: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty measure")]
    EmptyMeasure,
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

pub type Result<T> = std::result::Result<T, IntegratorError>;

pub fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(IntegratorError::BadStep(dt))
    }
}

/// Number of steps of size `dt` covering `horizon`; the ratio must be
/// integral to within 1e−9.
pub fn step_count(horizon: f64, dt: f64) -> Result<u64> {
    check_dt(dt)?;
    let ratio = horizon / dt;
    let k = ratio.round();
    if !(horizon >= 0.0) || !ratio.is_finite() || (ratio - k).abs() > 1e-9 * k.max(1.0) {
        return Err(IntegratorError::Horizon { horizon, dt });
    }
    Ok(k as u64)
}

#[inline]
pub(crate) fn diverged(x: &[f64]) -> bool {
    let n2: f64 = x.iter().map(|v| v * v).sum();
    !(n2.sqrt() <= DIVERGENCE_THRESHOLD)
}

/// One trajectory on a uniform grid `t₀ + k·dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub t0: f64,
    pub dt: f64,
    pub dim: usize,
    /// Row-major, one row per grid time.
    pub states: Vec<f64>,
}

impl Path {
    pub fn new(t0: f64, dt: f64, x0: &[f64]) -> Self {
        Self {
            t0,
            dt,
            dim: x0.len(),
            states: x0.to_vec(),
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim);
        self.states.extend_from_slice(x);
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.time(k)).collect()
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn points(&self) -> std::slice::ChunksExact<'_, f64> {
        self.states.chunks_exact(self.dim)
    }

    /// Elapsed time `t_last − t₀`.
    pub fn duration(&self) -> f64 {
        self.len().saturating_sub(1) as f64 * self.dt
    }
}

/// N particles at a common time, all driven by the empirical measure of the
/// current states.
#[derive(Clone)]
pub struct ParticleSystem {
    model: Arc<Model>,
    affine: Option<AffineMeanField>,
    dim: usize,
    noise_dim: usize,
    time: f64,
    steps: u64,
    states: Vec<f64>,
    ids: Vec<u64>,
    streams: Vec<NoiseStream>,
    seed: u64,
    replica: u64,
}

impl std::fmt::Debug for ParticleSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParticleSystem")
            .field("dim", &self.dim)
            .field("n_particles", &self.ids.len())
            .field("time", &self.time)
            .field("seed", &self.seed)
            .field("replica", &self.replica)
            .finish()
    }
}

impl ParticleSystem {
    /// Particles at the atoms of `initial`, at time 0.
    pub fn new(model: Arc<Model>, initial: &EmpiricalMeasure, seed: u64, replica: u64) -> Result<Self> {
        if initial.dim() != model.state_dim() {
            return Err(IntegratorError::Shape(format!(
                "initial cloud has dimension {}, model state has {}",
                initial.dim(),
                model.state_dim()
            )));
        }
        let n = initial.len();
        let ids: Vec<u64> = (0..n as u64).collect();
        Ok(Self::assemble(model, initial.as_flat().to_vec(), ids, seed, replica))
    }

    fn assemble(model: Arc<Model>, states: Vec<f64>, ids: Vec<u64>, seed: u64, replica: u64) -> Self {
        let noise_dim = model.noise_dim();
        let streams = ids
            .iter()
            .map(|&id| NoiseStream::new(StreamKey::new(seed, replica, Domain::Dynamics, id), noise_dim))
            .collect();
        Self {
            affine: model.affine(),
            dim: model.state_dim(),
            noise_dim,
            model,
            time: 0.0,
            steps: 0,
            states,
            ids,
            streams,
            seed,
            replica,
        }
    }

    /// Reorder particles: new particle `k` is old particle `perm[k]`,
    /// carrying its noise stream along.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        for (k, &p) in perm.iter().enumerate() {
            out.states[k * self.dim..(k + 1) * self.dim].copy_from_slice(self.particle(p));
            out.ids[k] = self.ids[p];
            out.streams[k] = self.streams[p].clone();
        }
        out
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_particles(&self) -> usize {
        self.ids.len()
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn replica(&self) -> u64 {
        self.replica
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn empirical(&self) -> EmpiricalMeasure {
        EmpiricalMeasure::from_flat(self.dim, self.states.clone())
            .expect("particle states are finite between steps")
    }

    /// Mean of the current states, summed in index order.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for x in self.states.chunks_exact(self.dim) {
            for (a, v) in m.iter_mut().zip(x) {
                *a += v;
            }
        }
        let n = self.n_particles() as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    /// Law proxy for drift and diffusion evaluation during the next step.
    pub(crate) fn law(&self) -> Law {
        match &self.affine {
            Some(_) => Law::Mean(self.mean()),
            None => Law::Cloud(self.empirical()),
        }
    }

    /// Advance all particles by one Euler–Maruyama step.
    pub fn step(&mut self, dt: f64) -> Result<()> {
        self.step_capture(dt, &mut [])
    }

    /// Step, and record the increments `ξ` drawn by the first
    /// `captured.len() / noise_dim` particles into `captured`.
    pub fn step_capture(&mut self, dt: f64, captured: &mut [f64]) -> Result<()> {
        check_dt(dt)?;
        let law = self.law();
        let (dim, q) = (self.dim, self.noise_dim);
        let sq = dt.sqrt();
        let model = &*self.model;
        let affine = self.affine.as_ref();
        let update = |x: &mut [f64], stream: &mut NoiseStream, bufs: &mut (Vec<f64>, Vec<f64>)| {
            let (xi, drift) = bufs;
            stream.fill_normals(xi);
            law.euler(model, affine, x, xi, dt, sq, drift);
        };
        self.states
            .par_chunks_mut(dim)
            .zip(self.streams.par_iter_mut())
            .with_min_len(256)
            .for_each_init(
                || (vec![0.0; q], vec![0.0; dim]),
                |bufs, (x, stream)| update(x, stream, bufs),
            );
        self.steps += 1;
        self.time += dt;
        if !captured.is_empty() {
            // Replay the same blocks: streams are step-addressable.
            for (k, out) in captured.chunks_exact_mut(q).enumerate() {
                let mut s = self.streams[k].clone();
                s.seek_block(self.steps - 1);
                s.fill_normals(out);
            }
        }
        if let Some(i) = self.states.chunks_exact(dim).position(diverged) {
            return Err(IntegratorError::Divergence {
                particle: i,
                time: self.time,
            });
        }
        Ok(())
    }
}

/// The measure argument used during one step.
pub(crate) enum Law {
    /// Affine mean-field models only see the mean.
    Mean(Vec<f64>),
    Cloud(EmpiricalMeasure),
}

impl Law {
    pub(crate) fn from_measure(model: &Model, mu: &EmpiricalMeasure) -> Self {
        if model.affine().is_some() {
            Law::Mean(mu.mean().to_vec())
        } else {
            Law::Cloud(mu.clone())
        }
    }

    /// `x ← x + b(x, law)dt + σ(x, law)√dt ξ`
    #[inline]
    pub(crate) fn euler(
        &self,
        model: &Model,
        affine: Option<&AffineMeanField>,
        x: &mut [f64],
        xi: &[f64],
        dt: f64,
        sq: f64,
        drift: &mut [f64],
    ) {
        match (self, affine) {
            (Law::Mean(m), Some(a)) => euler_affine(a, x, m, xi, dt, sq, drift),
            (Law::Cloud(mu), _) => {
                model.drift(x, mu, drift);
                let mut next: Vec<f64> = x.iter().zip(drift.iter()).map(|(v, b)| v + b * dt).collect();
                model.add_diffusion(x, mu, xi, sq, &mut next);
                x.copy_from_slice(&next);
            }
            (Law::Mean(_), None) => unreachable!("mean-only law requires an affine model"),
        }
    }
}

/// Euler step for an affine mean-field model, in place.
#[inline]
pub(crate) fn euler_affine(
    field: &AffineMeanField,
    x: &mut [f64],
    mean: &[f64],
    xi: &[f64],
    dt: f64,
    sq: f64,
    drift: &mut [f64],
) {
    field.drift(x, mean, drift);
    for (v, b) in x.iter_mut().zip(drift.iter()) {
        *v += b * dt;
    }
    field.add_noise(xi, sq, x);
}

/// One step, returning the advanced system.
pub fn em_step(ps: &ParticleSystem, dt: f64) -> Result<ParticleSystem> {
    let mut next = ps.clone();
    next.step(dt)?;
    Ok(next)
}

/// Run for `horizon`, recording the particles in `track` at every step.
pub fn simulate(ps: &ParticleSystem, horizon: f64, dt: f64, track: &[usize]) -> Result<(ParticleSystem, Vec<Path>)> {
    let steps = step_count(horizon, dt)?;
    if let Some(&bad) = track.iter().find(|&&i| i >= ps.n_particles()) {
        return Err(IntegratorError::Shape(format!(
            "tracked particle {bad} out of range for {} particles",
            ps.n_particles()
        )));
    }
    let mut sys = ps.clone();
    let mut paths: Vec<Path> = track.iter().map(|&i| Path::new(sys.time(), dt, sys.particle(i))).collect();
    for _ in 0..steps {
        sys.step(dt)?;
        for (p, &i) in paths.iter_mut().zip(track) {
            p.push(sys.particle(i));
        }
    }
    Ok((sys, paths))
}

/// Single trajectory of the Markov SDE whose measure argument is pinned to
/// `frozen`.
pub fn simulate_reference(
    model: &Model,
    frozen: &EmpiricalMeasure,
    x0: &[f64],
    horizon: f64,
    dt: f64,
    key: StreamKey,
) -> Result<Path> {
    let mut r = ReferenceProcess::new(model, frozen, x0, key)?;
    let steps = step_count(horizon, dt)?;
    let mut path = Path::new(0.0, dt, x0);
    path.states.reserve(steps as usize * x0.len());
    for _ in 0..steps {
        r.step(dt)?;
        path.push(r.state());
    }
    Ok(path)
}

/// Stepper for the frozen-law reference dynamics.
pub struct ReferenceProcess<'a> {
    model: &'a Model,
    affine: Option<AffineMeanField>,
    law: Law,
    x: Vec<f64>,
    stream: NoiseStream,
    xi: Vec<f64>,
    drift: Vec<f64>,
    time: f64,
}

impl<'a> ReferenceProcess<'a> {
    pub fn new(model: &'a Model, frozen: &EmpiricalMeasure, x0: &[f64], key: StreamKey) -> Result<Self> {
        if frozen.is_empty() {
            return Err(IntegratorError::EmptyMeasure);
        }
        let d = model.state_dim();
        if frozen.dim() != d || x0.len() != d {
            return Err(IntegratorError::Shape(format!(
                "model dimension {d}, frozen measure {}, start {}",
                frozen.dim(),
                x0.len()
            )));
        }
        Ok(Self {
            model,
            affine: model.affine(),
            law: Law::from_measure(model, frozen),
            x: x0.to_vec(),
            stream: NoiseStream::new(key, model.noise_dim()),
            xi: vec![0.0; model.noise_dim()],
            drift: vec![0.0; d],
            time: 0.0,
        })
    }

    pub fn state(&self) -> &[f64] {
        &self.x
    }

    pub fn step(&mut self, dt: f64) -> Result<()> {
        self.stream.fill_normals(&mut self.xi);
        let xi = std::mem::take(&mut self.xi);
        self.step_with(dt, &xi)?;
        self.xi = xi;
        Ok(())
    }

    /// Step with externally supplied increments (synchronous coupling).
    pub fn step_with(&mut self, dt: f64, xi: &[f64]) -> Result<()> {
        self.law
            .euler(self.model, self.affine.as_ref(), &mut self.x, xi, dt, dt.sqrt(), &mut self.drift);
        self.time += dt;
        if diverged(&self.x) {
            return Err(IntegratorError::Divergence {
                particle: 0,
                time: self.time,
            });
        }
        Ok(())
    }
}

/// Mean-field path `X` and reference path `X̄` driven by the same increments.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledPaths {
    pub path_x: Path,
    pub path_xbar: Path,
    /// Always true: both paths consumed the same increments.
    pub shared_noise: bool,
    /// False when σ depends on the state, where the deterministic pathwise
    /// Gronwall bound does not apply.
    pub pathwise_bound_applies: bool,
}

/// Synchronously coupled pairs `(X, X̄)`.
///
/// `X` is an extra tagged particle driven by the empirical law of
/// `law_proxy` (advanced in lockstep), `X̄` follows the reference dynamics
/// frozen at `frozen`. Pair `j` draws its increments from
/// `(seed, replica, Coupling, j)` of `key_base`.
pub fn simulate_coupled_many(
    pairs: &[(Vec<f64>, Vec<f64>)],
    frozen: &EmpiricalMeasure,
    law_proxy: &ParticleSystem,
    horizon: f64,
    dt: f64,
    key_base: (u64, u64),
) -> Result<(Vec<CoupledPaths>, ParticleSystem)> {
    let model = law_proxy.model().clone();
    let d = model.state_dim();
    if frozen.dim() != d {
        return Err(IntegratorError::Shape(format!(
            "frozen measure has dimension {}, model {d}",
            frozen.dim()
        )));
    }
    if frozen.is_empty() {
        return Err(IntegratorError::EmptyMeasure);
    }
    if let Some((x, xb)) = pairs.iter().find(|(x, xb)| x.len() != d || xb.len() != d) {
        return Err(IntegratorError::Shape(format!(
            "pair of lengths ({}, {}) for state dimension {d}",
            x.len(),
            xb.len()
        )));
    }
    let steps = step_count(horizon, dt)?;
    let (seed, replica) = key_base;
    let q = model.noise_dim();
    let affine = model.affine();
    let frozen_law = Law::from_measure(&model, frozen);
    let applies = model.sigma_class() != SigmaClass::General;
    let sq = dt.sqrt();

    struct Pair {
        x: Vec<f64>,
        xb: Vec<f64>,
        stream: NoiseStream,
        px: Path,
        pxb: Path,
    }
    let mut state: Vec<Pair> = pairs
        .iter()
        .enumerate()
        .map(|(j, (x, xb))| Pair {
            x: x.clone(),
            xb: xb.clone(),
            stream: NoiseStream::new(StreamKey::new(seed, replica, Domain::Coupling, j as u64), q),
            px: Path::new(law_proxy.time(), dt, x),
            pxb: Path::new(law_proxy.time(), dt, xb),
        })
        .collect();
    let mut proxy = law_proxy.clone();
    for _ in 0..steps {
        let law = proxy.law();
        let t_next = proxy.time() + dt;
        let failure = state
            .par_iter_mut()
            .with_min_len(16)
            .enumerate()
            .map(|(j, p)| {
                let mut xi = vec![0.0; q];
                let mut drift = vec![0.0; d];
                p.stream.fill_normals(&mut xi);
                law.euler(&model, affine.as_ref(), &mut p.x, &xi, dt, sq, &mut drift);
                frozen_law.euler(&model, affine.as_ref(), &mut p.xb, &xi, dt, sq, &mut drift);
                p.px.push(&p.x);
                p.pxb.push(&p.xb);
                (diverged(&p.x) || diverged(&p.xb)).then_some(j)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .next();
        if let Some(j) = failure {
            return Err(IntegratorError::Divergence {
                particle: j,
                time: t_next,
            });
        }
        proxy.step(dt)?;
    }
    let out = state
        .into_iter()
        .map(|p| CoupledPaths {
            path_x: p.px,
            path_xbar: p.pxb,
            shared_noise: true,
            pathwise_bound_applies: applies,
        })
        .collect();
    Ok((out, proxy))
}

/// Single coupled pair; see [`simulate_coupled_many`].
pub fn simulate_coupled(
    init_x: &[f64],
    init_xbar: &[f64],
    frozen: &EmpiricalMeasure,
    law_proxy: &ParticleSystem,
    horizon: f64,
    dt: f64,
    key_base: (u64, u64),
) -> Result<CoupledPaths> {
    let pairs = [(init_x.to_vec(), init_xbar.to_vec())];
    let (mut paths, _) = simulate_coupled_many(&pairs, frozen, law_proxy, horizon, dt, key_base)?;
    Ok(paths.remove(0))
}

/// `n` i.i.d. standard Gaussian points in ℝ^dim from the `Initial` domain.
pub fn gaussian_cloud(dim: usize, n: usize, seed: u64) -> Result<EmpiricalMeasure> {
    let mut s = NoiseStream::new(StreamKey::new(seed, 0, Domain::Initial, 0), dim);
    let mut pts = vec![0.0; n * dim];
    for row in pts.chunks_exact_mut(dim.max(1)) {
        s.fill_normals(row);
    }
    Ok(EmpiricalMeasure::from_flat(dim, pts)?)
}

/// `n` atoms drawn uniformly with replacement from `mu`.
pub fn resample(mu: &EmpiricalMeasure, n: usize, key: StreamKey) -> Result<EmpiricalMeasure> {
    if mu.is_empty() {
        return Err(IntegratorError::EmptyMeasure);
    }
    let mut s = NoiseStream::new(key, 1);
    let mut pts = Vec::with_capacity(n * mu.dim());
    for _ in 0..n {
        pts.extend_from_slice(mu.atom(s.index(mu.len())));
    }
    Ok(EmpiricalMeasure::from_flat(mu.dim(), pts)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvariantEstimate {
    pub mu_bar_hat: EmpiricalMeasure,
    /// Ŵ₂ between the clouds at `T_burn + T_avg/2` and `T_burn + T_avg`.
    pub residual: f64,
}

/// W₂ used for diagnostics: exact, on at most [`RESIDUAL_ATOMS`] leading
/// atoms when the dimension forces the assignment route.
pub fn diagnostic_w2(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    if mu.dim() == 1 {
        return Ok(wasserstein2(mu, nu, W2Method::Sorted1d)?.distance);
    }
    let n = mu.len().min(nu.len()).min(RESIDUAL_ATOMS).min(ASSIGNMENT_LIMIT);
    let head = |m: &EmpiricalMeasure| EmpiricalMeasure::from_flat(m.dim(), m.as_flat()[..n * m.dim()].to_vec());
    Ok(optimal_matching(&head(mu)?, &head(nu)?)?.cost.max(0.0).sqrt())
}

/// Particle estimate of the invariant law started from `initial`.
pub fn estimate_invariant_from(
    model: Arc<Model>,
    initial: &EmpiricalMeasure,
    t_burn: f64,
    t_avg: f64,
    dt: f64,
    seed: u64,
) -> Result<InvariantEstimate> {
    if !(t_burn > 0.0) || !(t_avg > 0.0) {
        return Err(IntegratorError::Horizon {
            horizon: t_burn.min(t_avg),
            dt,
        });
    }
    let burn = step_count(t_burn, dt)?;
    let total = step_count(t_burn + t_avg, dt)?;
    let mid = burn + (total - burn) / 2;
    let mut sys = ParticleSystem::new(model, initial, seed, 0)?;
    let mut half = None;
    for k in 1..=total {
        sys.step(dt)?;
        if k == mid {
            half = Some(sys.empirical());
        }
    }
    let end = sys.empirical();
    let half = half.unwrap_or_else(|| end.clone());
    let residual = diagnostic_w2(&half, &end)?;
    Ok(InvariantEstimate {
        mu_bar_hat: end,
        residual,
    })
}

/// [`estimate_invariant_from`] with `n` standard Gaussian initial particles.
pub fn estimate_invariant(
    model: Arc<Model>,
    n: usize,
    t_burn: f64,
    t_avg: f64,
    dt: f64,
    seed: u64,
) -> Result<InvariantEstimate> {
    let initial = gaussian_cloud(model.state_dim(), n, seed)?;
    estimate_invariant_from(model, &initial, t_burn, t_avg, dt, seed)
}
