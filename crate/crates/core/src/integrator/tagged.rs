//! Reduced simulation of one tagged particle in an affine mean-field system.
//!
//! For `b(x, μ) = Kx + E·mean(μ)` with constant diffusion `S`, the pair
//! (tagged particle, mean of the other N−1 particles) is itself a Markov
//! chain under the Euler scheme: the others' mean moves with the averaged
//! drift and with noise `S·√dt·ζ/√(N−1)`, `ζ` standard Gaussian. Simulating
//! that pair has the same law for the tagged trajectory as the full N-particle
//! system at O(1) cost per step instead of O(N).
//!
//! The tagged particle uses stream `(seed, replica, Dynamics, 0)`, exactly
//! like particle 0 of a [`super::ParticleSystem`]; the others' aggregate
//! uses [`AGGREGATE_STREAM`].

use super::{diverged, euler_affine, IntegratorError, Result};
use crate::measures::EmpiricalMeasure;
use crate::models::AffineMeanField;
use crate::rng::{Domain, NoiseStream, StreamKey, AGGREGATE_STREAM};

#[derive(Debug, Clone)]
pub struct TaggedSystem {
    field: AffineMeanField,
    n: usize,
    x: Vec<f64>,
    rest: Vec<f64>,
    x_noise: NoiseStream,
    rest_noise: NoiseStream,
    xi: Vec<f64>,
    zeta: Vec<f64>,
    mean: Vec<f64>,
    drift: Vec<f64>,
    time: f64,
}

impl TaggedSystem {
    /// `rest_mean` is the mean of the other `n_particles − 1` particles; it
    /// is ignored when `n_particles == 1`.
    pub fn new(
        field: AffineMeanField,
        n_particles: usize,
        x0: &[f64],
        rest_mean: &[f64],
        seed: u64,
        replica: u64,
    ) -> Result<Self> {
        let (d, q) = (field.dim, field.noise_dim);
        if n_particles == 0 {
            return Err(IntegratorError::EmptyMeasure);
        }
        if x0.len() != d || (n_particles > 1 && rest_mean.len() != d) {
            return Err(IntegratorError::Shape(format!(
                "state dimension {d}, got tagged {} and rest {}",
                x0.len(),
                rest_mean.len()
            )));
        }
        let rest = if n_particles > 1 { rest_mean.to_vec() } else { x0.to_vec() };
        Ok(Self {
            n: n_particles,
            x: x0.to_vec(),
            rest,
            x_noise: NoiseStream::new(StreamKey::new(seed, replica, Domain::Dynamics, 0), q),
            rest_noise: NoiseStream::new(StreamKey::new(seed, replica, Domain::Dynamics, AGGREGATE_STREAM), q),
            xi: vec![0.0; q],
            zeta: vec![0.0; q],
            mean: vec![0.0; d],
            drift: vec![0.0; d],
            time: 0.0,
            field,
        })
    }

    /// Tag atom `tagged` of `cloud`; the rest of the cloud are the others.
    pub fn from_cloud(
        field: AffineMeanField,
        cloud: &EmpiricalMeasure,
        tagged: usize,
        seed: u64,
        replica: u64,
    ) -> Result<Self> {
        let n = cloud.len();
        if tagged >= n {
            return Err(IntegratorError::Shape(format!("tagged atom {tagged} of {n}")));
        }
        let x0 = cloud.atom(tagged);
        let rest: Vec<f64> = if n > 1 {
            cloud
                .mean()
                .iter()
                .zip(x0)
                .map(|(m, x)| (n as f64 * m - x) / (n - 1) as f64)
                .collect()
        } else {
            x0.to_vec()
        };
        Self::new(field, n, x0, &rest, seed, replica)
    }

    pub fn n_particles(&self) -> usize {
        self.n
    }

    pub fn tagged(&self) -> &[f64] {
        &self.x
    }

    pub fn rest_mean(&self) -> &[f64] {
        &self.rest
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn field(&self) -> &AffineMeanField {
        &self.field
    }

    /// Empirical mean of all N particles.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.x.len()];
        self.fill_mean(&mut m);
        m
    }

    fn fill_mean(&self, out: &mut [f64]) {
        if self.n == 1 {
            out.copy_from_slice(&self.x);
            return;
        }
        let (n, others) = (self.n as f64, (self.n - 1) as f64);
        for ((o, x), r) in out.iter_mut().zip(&self.x).zip(&self.rest) {
            *o = (x + others * r) / n;
        }
    }

    /// Increments `ξ` consumed by the tagged particle in the last step.
    pub fn last_increment(&self) -> &[f64] {
        &self.xi
    }

    pub fn step(&mut self, dt: f64) -> Result<()> {
        let sq = dt.sqrt();
        let mut mean = std::mem::take(&mut self.mean);
        self.fill_mean(&mut mean);
        self.x_noise.fill_normals(&mut self.xi);
        euler_affine(&self.field, &mut self.x, &mean, &self.xi, dt, sq, &mut self.drift);
        if self.n > 1 {
            self.rest_noise.fill_normals(&mut self.zeta);
            let scale = sq / ((self.n - 1) as f64).sqrt();
            euler_affine(&self.field, &mut self.rest, &mean, &self.zeta, dt, scale, &mut self.drift);
        }
        self.mean = mean;
        self.time += dt;
        if diverged(&self.x) {
            return Err(IntegratorError::Divergence {
                particle: 0,
                time: self.time,
            });
        }
        if diverged(&self.rest) {
            return Err(IntegratorError::Divergence {
                particle: 1,
                time: self.time,
            });
        }
        Ok(())
    }
}

/// Tagged particle `X` plus a reference copy `X̄` frozen at a fixed mean,
/// both consuming the tagged particle's increments.
#[derive(Debug, Clone)]
pub struct CoupledTagged {
    sys: TaggedSystem,
    xbar: Vec<f64>,
    frozen_mean: Vec<f64>,
    drift: Vec<f64>,
}

impl CoupledTagged {
    pub fn new(sys: TaggedSystem, xbar0: &[f64], frozen_mean: &[f64]) -> Result<Self> {
        let d = sys.x.len();
        if xbar0.len() != d || frozen_mean.len() != d {
            return Err(IntegratorError::Shape(format!(
                "state dimension {d}, got xbar {} and frozen mean {}",
                xbar0.len(),
                frozen_mean.len()
            )));
        }
        Ok(Self {
            sys,
            xbar: xbar0.to_vec(),
            frozen_mean: frozen_mean.to_vec(),
            drift: vec![0.0; d],
        })
    }

    pub fn x(&self) -> &[f64] {
        self.sys.tagged()
    }

    pub fn xbar(&self) -> &[f64] {
        &self.xbar
    }

    pub fn system(&self) -> &TaggedSystem {
        &self.sys
    }

    pub fn step(&mut self, dt: f64) -> Result<()> {
        self.sys.step(dt)?;
        euler_affine(
            &self.sys.field,
            &mut self.xbar,
            &self.frozen_mean,
            &self.sys.xi,
            dt,
            dt.sqrt(),
            &mut self.drift,
        );
        if diverged(&self.xbar) {
            return Err(IntegratorError::Divergence {
                particle: 0,
                time: self.sys.time,
            });
        }
        Ok(())
    }
}
