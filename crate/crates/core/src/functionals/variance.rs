use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};

use super::{FunctionalError, Observable, Result, Trapezoid};
use crate::integrator::{check_dt, step_count, Path, ReferenceProcess};
use crate::measures::EmpiricalMeasure;
use crate::models::{Dynamics, Model};
use crate::rng::{Domain, NoiseStream, StreamKey};

/// `Ĉ(k·dt)` for `k = 0..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Autocovariance {
    pub dt: f64,
    pub values: Vec<f64>,
}

impl Autocovariance {
    pub fn lags(&self) -> Vec<f64> {
        (0..self.values.len()).map(|k| k as f64 * self.dt).collect()
    }

    /// `∫₀^{K dt} Ĉ(s) ds` by the trapezoid rule.
    pub fn integral(&self) -> f64 {
        let mut q = Trapezoid::new(self.dt);
        self.values.iter().for_each(|&v| q.push(v));
        q.integral()
    }
}

fn lag_count(max_lag: f64, dt: f64) -> usize {
    (max_lag / dt + 1e-9).floor() as usize
}

/// Empirical autocovariance of a scalar series sampled every `dt`:
/// `Ĉ(k) = (1/(n−k)) Σ_u (a_u − ā)(a_{u+k} − ā)`, computed by FFT.
pub fn autocovariance_series(values: &[f64], dt: f64, max_lag: f64) -> Result<Autocovariance> {
    check_dt(dt)?;
    let n = values.len();
    let k_max = lag_count(max_lag, dt);
    let needed = 10 * k_max.max(1);
    if n < needed || !(max_lag >= 0.0) {
        return Err(FunctionalError::LagTooLarge {
            max_lag,
            needed,
            len: n,
        });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = values
        .iter()
        .map(|v| Complex::new(v - mean, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    buf.iter_mut().for_each(|c| *c = Complex::new(c.norm_sqr(), 0.0));
    planner.plan_fft_inverse(size).process(&mut buf);
    let values = (0..=k_max)
        .map(|k| buf[k].re / size as f64 / (n - k) as f64)
        .collect();
    Ok(Autocovariance { dt, values })
}

/// Autocovariance of `A` along `path` up to `max_lag`.
pub fn autocovariance(path: &Path, a: &Observable, max_lag: f64) -> Result<Autocovariance> {
    let values: Vec<f64> = path.points().map(|x| a.eval(x)).collect();
    autocovariance_series(&values, path.dt, max_lag)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceParams {
    pub horizon: f64,
    pub dt: f64,
    pub tau: f64,
    pub replicas: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceEstimate {
    pub vbar: f64,
    pub stderr: f64,
    pub truncation_tau: f64,
    pub dt: f64,
    /// Per-replica `∫₀^τ Ĉ`.
    pub per_replica: Vec<f64>,
}

/// Green–Kubo estimate `V̄ = ∫₀^τ Ĉ(s) ds` along stationary reference paths.
///
/// Replica `r` starts at an atom of `mu_bar_hat` drawn from
/// `(seed, r, Initial)` and runs the reference dynamics frozen at
/// `mu_bar_hat` with stream `(seed, r, Dynamics, 0)`.
pub fn asymptotic_variance(
    model: &Model,
    a: &Observable,
    mu_bar_hat: &EmpiricalMeasure,
    params: VarianceParams,
) -> Result<VarianceEstimate> {
    let VarianceParams {
        horizon,
        dt,
        tau,
        replicas,
        seed,
    } = params;
    if replicas == 0 {
        return Err(FunctionalError::Empty("replicas"));
    }
    if !(tau > 0.0 && tau <= horizon / 10.0) {
        return Err(FunctionalError::Parameter {
            name: "tau",
            requirement: "positive and at most T/10",
            value: tau,
        });
    }
    a.check_dim(model.state_dim())?;
    let steps = step_count(horizon, dt)? as usize;
    let one = |r: usize| -> Result<f64> {
        let mut pick = NoiseStream::new(StreamKey::new(seed, r as u64, Domain::Initial, 0), 1);
        let x0 = mu_bar_hat.atom(pick.index(mu_bar_hat.len()));
        let key = StreamKey::new(seed, r as u64, Domain::Dynamics, 0);
        let mut proc = ReferenceProcess::new(model, mu_bar_hat, x0, key)?;
        let mut values = Vec::with_capacity(steps + 1);
        values.push(a.eval(proc.state()));
        for _ in 0..steps {
            proc.step(dt)?;
            values.push(a.eval(proc.state()));
        }
        Ok(autocovariance_series(&values, dt, tau)?.integral())
    };
    let per_replica = (0..replicas)
        .into_par_iter()
        .map(one)
        .collect::<Result<Vec<f64>>>()?;
    let n = replicas as f64;
    let mean = per_replica.iter().sum::<f64>() / n;
    let stderr = if replicas > 1 {
        (per_replica.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(VarianceEstimate {
        vbar: mean.max(0.0),
        stderr,
        truncation_tau: tau,
        dt,
        per_replica,
    })
}
