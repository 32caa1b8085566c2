//! Observables, additive and moderate functionals, the rate function and
//! the empirical Cramér functional.

mod variance;

pub use variance::{asymptotic_variance, autocovariance, autocovariance_series, Autocovariance, VarianceEstimate, VarianceParams};

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrator::{IntegratorError, Path};
use crate::models::{HypothesisReport, DEFAULT_TOLERANCE};
use crate::rng::{Domain, NoiseStream, StreamKey};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FunctionalError {
    #[error("kappa = {0} violates 1/2 < kappa < 1")]
    Scaling(f64),
    #[error("parameter `{name}` must be {requirement}, got {value}")]
    Parameter {
        name: &'static str,
        requirement: &'static str,
        value: f64,
    },
    #[error("max lag {max_lag} needs a path of at least {needed} points, got {len}")]
    LagTooLarge { max_lag: f64, needed: usize, len: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("coordinate {index} out of range for dimension {dim}")]
    Coordinate { index: usize, dim: usize },
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
}

pub type Result<T> = std::result::Result<T, FunctionalError>;

/// Regularity class of an observable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegClass {
    Lipschitz,
    Hoelder { alpha: f64 },
    LogModulus { p: f64 },
}

impl RegClass {
    fn validate(self) -> Result<Self> {
        match self {
            RegClass::Hoelder { alpha } if !(alpha > 0.0 && alpha < 1.0) => Err(FunctionalError::Parameter {
                name: "alpha",
                requirement: "in (0, 1)",
                value: alpha,
            }),
            RegClass::LogModulus { p } if !(p > 1.0 && p.is_finite()) => Err(FunctionalError::Parameter {
                name: "p",
                requirement: "greater than 1",
                value: p,
            }),
            c => Ok(c),
        }
    }

    /// Class ratio at a pair `x ≠ y` with value difference `diff`.
    pub fn ratio(self, diff: f64, x: &[f64], y: &[f64]) -> f64 {
        let dist = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if dist == 0.0 {
            return 0.0;
        }
        let (nx2, ny2): (f64, f64) = (x.iter().map(|v| v * v).sum(), y.iter().map(|v| v * v).sum());
        let diff = diff.abs();
        match self {
            RegClass::Lipschitz => diff / dist,
            RegClass::Hoelder { alpha } => {
                diff / (dist.powf(alpha) * (1.0 + nx2.sqrt() + ny2.sqrt()).powf(2.0 - alpha))
            }
            RegClass::LogModulus { p } => {
                let s = nx2 + ny2;
                diff * (std::f64::consts::E + s).ln() * (std::f64::consts::E + 1.0 / dist).ln().powf(p) / (1.0 + s)
            }
        }
    }
}

impl fmt::Display for RegClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegClass::Lipschitz => write!(f, "lipschitz"),
            RegClass::Hoelder { alpha } => write!(f, "hoelder({alpha})"),
            RegClass::LogModulus { p } => write!(f, "log_modulus({p})"),
        }
    }
}

/// Named catalogue observables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservableSpec {
    /// `A(x) = x₁`
    Identity,
    /// `A(x) = |x|²`
    Norm2,
    Constant(f64),
    /// `A(x) = x_i` (zero-based)
    Coordinate(usize),
}

pub type ObservableFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
enum Eval {
    Catalogue(ObservableSpec),
    Custom(ObservableFn),
}

/// An observable `A` with its declared regularity.
#[derive(Clone)]
pub struct Observable {
    name: String,
    eval: Eval,
    reg_class: RegClass,
    lip_const: Option<f64>,
    class_const: f64,
}

impl fmt::Debug for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Observable")
            .field("name", &self.name)
            .field("reg_class", &self.reg_class)
            .field("lip_const", &self.lip_const)
            .field("class_const", &self.class_const)
            .finish()
    }
}

fn positive(name: &'static str, value: f64) -> Result<f64> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(FunctionalError::Parameter {
            name,
            requirement: "positive and finite",
            value,
        })
    }
}

impl Observable {
    /// Catalogue entry with its known class: identity, coordinates and
    /// constants are 1-Lipschitz; `|x|²` is Hölder-½ with constant 1
    /// (`||x|²−|y|²| ≤ |x−y|·(|x|+|y|)`).
    pub fn catalogue(spec: ObservableSpec) -> Self {
        let (name, reg_class, lip) = match spec {
            ObservableSpec::Identity => ("identity".to_string(), RegClass::Lipschitz, Some(1.0)),
            ObservableSpec::Coordinate(i) => (format!("coordinate({i})"), RegClass::Lipschitz, Some(1.0)),
            ObservableSpec::Constant(c) => (format!("constant({c})"), RegClass::Lipschitz, Some(1.0)),
            ObservableSpec::Norm2 => ("norm2".to_string(), RegClass::Hoelder { alpha: 0.5 }, None),
        };
        Self {
            name,
            eval: Eval::Catalogue(spec),
            reg_class,
            lip_const: lip,
            class_const: 1.0,
        }
    }

    pub fn identity() -> Self {
        Self::catalogue(ObservableSpec::Identity)
    }

    pub fn constant(c: f64) -> Self {
        Self::catalogue(ObservableSpec::Constant(c))
    }

    /// User observable. `lip_const` is required for the Lipschitz class.
    pub fn custom(
        name: &str,
        f: ObservableFn,
        reg_class: RegClass,
        lip_const: Option<f64>,
        class_const: f64,
    ) -> Result<Self> {
        let reg_class = reg_class.validate()?;
        let lip_const = lip_const.map(|k| positive("lip_const", k)).transpose()?;
        if reg_class == RegClass::Lipschitz && lip_const.is_none() {
            return Err(FunctionalError::Parameter {
                name: "lip_const",
                requirement: "present for the lipschitz class",
                value: f64::NAN,
            });
        }
        Ok(Self {
            name: name.to_string(),
            eval: Eval::Custom(f),
            reg_class,
            lip_const,
            class_const: positive("class_const", class_const)?,
        })
    }

    /// Same map, different declared class.
    pub fn with_class(&self, reg_class: RegClass, lip_const: Option<f64>, class_const: f64) -> Result<Self> {
        let mut out = Self::custom(&self.name, Arc::new(|_: &[f64]| 0.0), reg_class, lip_const, class_const)?;
        out.eval = self.eval.clone();
        Ok(out)
    }

    /// Reject coordinates outside `0..dim`.
    pub fn check_dim(&self, dim: usize) -> Result<()> {
        match self.eval {
            Eval::Catalogue(ObservableSpec::Coordinate(index)) if index >= dim => {
                Err(FunctionalError::Coordinate { index, dim })
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn reg_class(&self) -> RegClass {
        self.reg_class
    }

    /// The constant `K` of the Lipschitz bound, when declared.
    pub fn lip_const(&self) -> Option<f64> {
        self.lip_const
    }

    pub fn class_const(&self) -> f64 {
        self.class_const
    }

    pub fn spec(&self) -> Option<ObservableSpec> {
        match self.eval {
            Eval::Catalogue(s) => Some(s),
            Eval::Custom(_) => None,
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        match &self.eval {
            Eval::Catalogue(ObservableSpec::Identity) => x[0],
            Eval::Catalogue(ObservableSpec::Coordinate(i)) => x[*i],
            Eval::Catalogue(ObservableSpec::Constant(c)) => *c,
            Eval::Catalogue(ObservableSpec::Norm2) => x.iter().map(|v| v * v).sum(),
            Eval::Custom(f) => f(x),
        }
    }
}

/// Sampled refutation of the declared class inequality. The margin of a
/// trial is `ratio − class_const`.
pub fn check_observable_class(a: &Observable, dim: usize, seed: u64, n_trials: usize) -> HypothesisReport {
    let sample = |t: usize| {
        let mut s = NoiseStream::new(StreamKey::new(seed, t as u64, Domain::Observable, 0), dim);
        let scale = 10f64.powf(3.0 * s.uniform() - 1.0);
        let mut x = vec![0.0; dim];
        let mut y = vec![0.0; dim];
        s.fill_normals(&mut x);
        s.fill_normals(&mut y);
        x.iter_mut().for_each(|v| *v *= scale);
        if s.uniform() < 0.5 {
            let h = scale * 10f64.powf(-6.0 * s.uniform());
            for (yi, xi) in y.iter_mut().zip(&x) {
                *yi = xi + h * *yi;
            }
        } else {
            y.iter_mut().for_each(|v| *v *= scale);
        }
        (x, y)
    };
    let ratio = |t: usize| {
        let (x, y) = sample(t);
        a.reg_class.ratio(a.eval(&x) - a.eval(&y), &x, &y)
    };
    let margins: Vec<f64> = (0..n_trials).into_par_iter().map(|t| ratio(t) - a.class_const).collect();
    HypothesisReport::from_margins(&margins, DEFAULT_TOLERANCE, |t| {
        let (x, y) = sample(t);
        format!("x={x:?} y={y:?} ratio={}", ratio(t))
    })
}

/// `a(t) = t^κ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingFunction {
    kappa: f64,
}

pub fn scaling_check(kappa: f64) -> bool {
    kappa > 0.5 && kappa < 1.0
}

impl ScalingFunction {
    pub fn new(kappa: f64) -> Result<Self> {
        if scaling_check(kappa) {
            Ok(Self { kappa })
        } else {
            Err(FunctionalError::Scaling(kappa))
        }
    }

    /// `a(t) = √t`: the CLT boundary, outside the moderate range. Used only
    /// for the variance diagnostic.
    pub fn clt_diagnostic() -> Self {
        Self { kappa: 0.5 }
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn is_moderate(&self) -> bool {
        scaling_check(self.kappa)
    }

    pub fn eval(&self, t: f64) -> f64 {
        t.powf(self.kappa)
    }

    /// `t / a(t)`
    pub fn moderate_factor(&self, t: f64) -> f64 {
        t / self.eval(t)
    }

    /// `t / a(t)²`, the normalization of log-probabilities.
    pub fn speed(&self, t: f64) -> f64 {
        let a = self.eval(t);
        t / (a * a)
    }
}

/// Online trapezoid rule on a uniform grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trapezoid {
    dt: f64,
    first: f64,
    last: f64,
    interior: f64,
    points: usize,
}

impl Trapezoid {
    pub fn new(dt: f64) -> Self {
        Self {
            dt,
            first: 0.0,
            last: 0.0,
            interior: 0.0,
            points: 0,
        }
    }

    pub fn push(&mut self, v: f64) {
        match self.points {
            0 => self.first = v,
            1 => {}
            _ => self.interior += self.last,
        }
        self.last = v;
        self.points += 1;
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn duration(&self) -> f64 {
        self.points.saturating_sub(1) as f64 * self.dt
    }

    pub fn integral(&self) -> f64 {
        if self.points < 2 {
            return 0.0;
        }
        self.dt * (0.5 * (self.first + self.last) + self.interior)
    }

    /// Time average; a single point returns its value.
    pub fn mean(&self) -> f64 {
        match self.points {
            0 => f64::NAN,
            1 => self.first,
            _ => self.integral() / self.duration(),
        }
    }
}

/// `L_t^A = (1/t)∫A(X_s)ds` by the trapezoid rule along `path`.
pub fn additive_functional(path: &Path, a: &Observable) -> Result<f64> {
    if path.is_empty() {
        return Err(FunctionalError::Empty("path"));
    }
    let mut q = Trapezoid::new(path.dt);
    for x in path.points() {
        q.push(a.eval(x));
    }
    Ok(q.mean())
}

/// `l_t^A = (t/a(t))·(L − μ̄(A))`
pub fn moderate_functional(l: f64, mu_bar_a: f64, t: f64, a: &ScalingFunction) -> Result<f64> {
    positive("t", t)?;
    Ok(a.moderate_factor(t) * (l - mu_bar_a))
}

/// `I(y) = y² / (8 V̄)`
pub fn rate_function(y: f64, vbar: f64) -> Result<f64> {
    positive("vbar", vbar)?;
    Ok(y * y / (8.0 * vbar))
}

/// `y² / (4 V̄)`: the Gaussian rate of the CLT-scale variance `2V̄`,
/// reported next to [`rate_function`].
pub fn clt_rate(y: f64, vbar: f64) -> Result<f64> {
    positive("vbar", vbar)?;
    Ok(y * y / (4.0 * vbar))
}

/// Largest admissible exponent before the Cramér plug-in saturates.
pub const EXP_GUARD: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CramerValue {
    Value(f64),
    Saturated { max_exponent: f64 },
}

impl CramerValue {
    pub fn value(self) -> Option<f64> {
        match self {
            CramerValue::Value(v) => Some(v),
            CramerValue::Saturated { .. } => None,
        }
    }
}

/// Numerically stable `ln Σ exp(x_i)`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `(t/a²)·ln((1/R) Σ exp{(a²/t)·z·l_r})`
pub fn cramer_functional(samples: &[f64], z: f64, t: f64, a: &ScalingFunction) -> Result<CramerValue> {
    if samples.is_empty() {
        return Err(FunctionalError::Empty("samples"));
    }
    positive("t", t)?;
    let s = 1.0 / a.speed(t);
    let exps: Vec<f64> = samples.iter().map(|l| s * z * l).collect();
    let max = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max > EXP_GUARD {
        return Ok(CramerValue::Saturated { max_exponent: max });
    }
    Ok(CramerValue::Value((logsumexp(&exps) - (samples.len() as f64).ln()) / s))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LegendreValue {
    pub value: f64,
    /// The input was not convex; the value is that of its convex minorant.
    pub convexified: bool,
}

/// `sup_z (z·y − Λ̂(z))` over the grid.
pub fn legendre_transform(grid: &[(f64, f64)], y: f64) -> Result<LegendreValue> {
    if grid.is_empty() {
        return Err(FunctionalError::Empty("lambda grid"));
    }
    let value = grid
        .iter()
        .map(|&(z, l)| z * y - l)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(LegendreValue {
        value,
        convexified: !is_convex(grid),
    })
}

/// Secant slopes nondecreasing in `z`, up to a relative tolerance.
fn is_convex(grid: &[(f64, f64)]) -> bool {
    let mut pts = grid.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts.dedup_by(|a, b| a.0 == b.0);
    let slopes: Vec<f64> = pts.windows(2).map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0)).collect();
    slopes
        .windows(2)
        .all(|s| s[1] >= s[0] - 1e-9 * (1.0 + s[0].abs().max(s[1].abs())))
}
