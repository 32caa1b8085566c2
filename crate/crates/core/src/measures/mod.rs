//! Uniform-weight empirical measures on ℝ^D and quadratic Wasserstein
//! distances between them.
//!
//! Exact transport is restricted to equal-size clouds, where the optimal
//! coupling is attained at a permutation. Three exact routes exist
//! (monotone rearrangement in 1-D, shortest-augmenting-path assignment,
//! brute-force enumeration for tiny inputs) plus an entropic fallback that
//! reports its regularization bias.

mod assignment;
mod csv_io;
mod sinkhorn;

pub use assignment::solve_assignment;
pub use csv_io::{read_cloud_csv, write_cloud_csv};

use thiserror::Error;

/// Largest size accepted by the assignment solver.
pub const ASSIGNMENT_LIMIT: usize = 4096;
/// Largest size accepted by brute-force enumeration.
pub const BRUTE_LIMIT: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("empirical measure needs at least one atom")]
    Empty,
    #[error("dimension must be positive")]
    ZeroDimension,
    #[error("row {row} contains a non-finite entry")]
    NonFinite { row: usize },
    #[error("row {row} has {found} coordinates, expected {expected}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("{method} transport requires equal sizes, got {left} and {right}")]
    SizeMismatch {
        method: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{method} transport accepts at most {limit} atoms, got {n}")]
    SizeLimit {
        method: &'static str,
        limit: usize,
        n: usize,
    },
    #[error("sorted1d transport requires dim = 1, got {0}")]
    NotOneDimensional(usize),
    #[error("entropic regularization must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("csv: {0}")]
    Csv(String),
}

/// A probability measure with `n` atoms of equal weight `1/n`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    mean: Vec<f64>,
}

impl EmpiricalMeasure {
    /// Build from one row per atom.
    pub fn from_samples<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, MeasureError> {
        let first = rows.first().ok_or(MeasureError::Empty)?;
        let dim = first.as_ref().len();
        let mut points = Vec::with_capacity(rows.len() * dim);
        for (row, atom) in rows.iter().enumerate() {
            let atom = atom.as_ref();
            if atom.len() != dim {
                return Err(MeasureError::Ragged {
                    row,
                    expected: dim,
                    found: atom.len(),
                });
            }
            points.extend_from_slice(atom);
        }
        Self::from_flat(dim, points)
    }

    /// Build from a row-major `n × dim` buffer.
    pub fn from_flat(dim: usize, points: Vec<f64>) -> Result<Self, MeasureError> {
        if dim == 0 {
            return Err(MeasureError::ZeroDimension);
        }
        if points.is_empty() {
            return Err(MeasureError::Empty);
        }
        if points.len() % dim != 0 {
            return Err(MeasureError::Ragged {
                row: points.len() / dim,
                expected: dim,
                found: points.len() % dim,
            });
        }
        if let Some(pos) = points.iter().position(|v| !v.is_finite()) {
            return Err(MeasureError::NonFinite { row: pos / dim });
        }
        let mean = column_mean(dim, &points);
        Ok(Self { dim, points, mean })
    }

    pub fn dirac(x: &[f64]) -> Result<Self, MeasureError> {
        Self::from_flat(x.len(), x.to_vec())
    }

    /// `n` copies of the same atom.
    pub fn repeated(x: &[f64], n: usize) -> Result<Self, MeasureError> {
        let mut points = Vec::with_capacity(n * x.len());
        for _ in 0..n {
            points.extend_from_slice(x);
        }
        Self::from_flat(x.len(), points)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn atoms(&self) -> std::slice::ChunksExact<'_, f64> {
        self.points.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.points
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.points
    }

    /// Barycentre, computed once at construction.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Coordinate-wise (population) variance.
    pub fn variance(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut var = vec![0.0; self.dim];
        for atom in self.atoms() {
            for ((v, x), m) in var.iter_mut().zip(atom).zip(&self.mean) {
                *v += (x - m) * (x - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        var
    }

    /// `( (1/n) Σ |x_i|² )^{1/2}`.
    pub fn second_moment_norm(&self) -> f64 {
        let sum: f64 = self.points.iter().map(|x| x * x).sum();
        (sum / self.len() as f64).sqrt()
    }

    /// Mean of `f` over the atoms.
    pub fn expect<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        self.atoms().map(f).sum::<f64>() / self.len() as f64
    }

    /// Atoms scaled by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self, MeasureError> {
        Self::from_flat(self.dim, self.points.iter().map(|x| c * x).collect())
    }

    /// Atoms reordered so that atom `i` of the result is atom `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut points = Vec::with_capacity(self.points.len());
        for &j in perm {
            points.extend_from_slice(self.atom(j));
        }
        Self {
            dim: self.dim,
            points,
            mean: self.mean.clone(),
        }
    }
}

fn column_mean(dim: usize, points: &[f64]) -> Vec<f64> {
    let n = points.len() / dim;
    let mut mean = vec![0.0; dim];
    for atom in points.chunks_exact(dim) {
        for (m, x) in mean.iter_mut().zip(atom) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    mean
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum W2Method {
    /// Monotone rearrangement, dim = 1, equal sizes.
    Sorted1d,
    /// Shortest augmenting path, equal sizes ≤ [`ASSIGNMENT_LIMIT`].
    Assignment,
    /// Log-domain Sinkhorn with regularization `epsilon`.
    Entropic { epsilon: f64 },
    /// Enumeration of all permutations, equal sizes ≤ [`BRUTE_LIMIT`].
    Brute,
}

impl W2Method {
    fn name(&self) -> &'static str {
        match self {
            W2Method::Sorted1d => "sorted1d",
            W2Method::Assignment => "assignment",
            W2Method::Entropic { .. } => "entropic",
            W2Method::Brute => "brute",
        }
    }
}

/// Result of [`wasserstein2`]. `entropic_bias` is `Some(b)` for the entropic
/// route: the squared cost `distance²` exceeds the exact W₂² by at most `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct W2Estimate {
    pub distance: f64,
    pub entropic_bias: Option<f64>,
}

impl W2Estimate {
    pub fn is_exact(&self) -> bool {
        self.entropic_bias.is_none()
    }
}

/// Optimal matching between equal-size clouds: atom `i` of the source goes
/// to atom `perm[i]` of the target.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    pub perm: Vec<usize>,
    /// Mean squared displacement, i.e. W₂².
    pub cost: f64,
}

fn check_pair(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    method: &'static str,
    limit: Option<usize>,
) -> Result<(), MeasureError> {
    if mu.dim() != nu.dim() {
        return Err(MeasureError::DimensionMismatch {
            left: mu.dim(),
            right: nu.dim(),
        });
    }
    if mu.len() != nu.len() {
        return Err(MeasureError::SizeMismatch {
            method,
            left: mu.len(),
            right: nu.len(),
        });
    }
    if let Some(limit) = limit {
        if mu.len() > limit {
            return Err(MeasureError::SizeLimit {
                method,
                limit,
                n: mu.len(),
            });
        }
    }
    Ok(())
}

pub fn wasserstein2(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    method: W2Method,
) -> Result<W2Estimate, MeasureError> {
    let exact = |cost: f64| W2Estimate {
        distance: cost.max(0.0).sqrt(),
        entropic_bias: None,
    };
    match method {
        W2Method::Sorted1d => sorted_matching(mu, nu).map(|m| exact(m.cost)),
        W2Method::Assignment => assignment_matching(mu, nu).map(|m| exact(m.cost)),
        W2Method::Brute => wasserstein2_brute(mu, nu).map(|d| exact(d * d)),
        W2Method::Entropic { epsilon } => {
            if !(epsilon > 0.0 && epsilon.is_finite()) {
                return Err(MeasureError::BadEpsilon(epsilon));
            }
            check_pair(mu, nu, method.name(), None)?;
            let (cost, bias) = sinkhorn::entropic_cost(mu, nu, epsilon);
            Ok(W2Estimate {
                distance: cost.max(0.0).sqrt(),
                entropic_bias: Some(bias),
            })
        }
    }
}

/// Exact W₂ with the cheapest applicable exact route.
pub fn w2_exact(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64, MeasureError> {
    optimal_matching(mu, nu).map(|m| m.cost.max(0.0).sqrt())
}

/// Exact optimal matching: sorted for dim = 1, assignment otherwise.
pub fn optimal_matching(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> Result<Matching, MeasureError> {
    if mu.dim() == 1 {
        sorted_matching(mu, nu)
    } else {
        assignment_matching(mu, nu)
    }
}

pub fn sorted_matching(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> Result<Matching, MeasureError> {
    if mu.dim() != 1 {
        return Err(MeasureError::NotOneDimensional(mu.dim()));
    }
    check_pair(mu, nu, "sorted1d", None)?;
    let order = |m: &EmpiricalMeasure| {
        let mut idx: Vec<usize> = (0..m.len()).collect();
        idx.sort_by(|&a, &b| m.as_flat()[a].total_cmp(&m.as_flat()[b]));
        idx
    };
    let (om, on) = (order(mu), order(nu));
    let mut perm = vec![0; mu.len()];
    let mut cost = 0.0;
    for (&i, &j) in om.iter().zip(&on) {
        perm[i] = j;
        let d = mu.as_flat()[i] - nu.as_flat()[j];
        cost += d * d;
    }
    Ok(Matching {
        perm,
        cost: cost / mu.len() as f64,
    })
}

pub fn assignment_matching(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> Result<Matching, MeasureError> {
    check_pair(mu, nu, "assignment", Some(ASSIGNMENT_LIMIT))?;
    let n = mu.len();
    let perm = solve_assignment(n, |i, j| sq_dist(mu.atom(i), nu.atom(j)));
    let cost = perm
        .iter()
        .enumerate()
        .map(|(i, &j)| sq_dist(mu.atom(i), nu.atom(j)))
        .sum::<f64>()
        / n as f64;
    Ok(Matching { perm, cost })
}

/// Exact W₂ by enumerating all `n!` permutation couplings.
pub fn wasserstein2_brute(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> Result<f64, MeasureError> {
    check_pair(mu, nu, "brute", Some(BRUTE_LIMIT))?;
    let n = mu.len();
    let cost: Vec<f64> = (0..n * n)
        .map(|k| sq_dist(mu.atom(k / n), nu.atom(k % n)))
        .collect();
    let eval = |perm: &[usize]| -> f64 {
        perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum()
    };
    // Heap's algorithm, iterative form.
    let mut perm: Vec<usize> = (0..n).collect();
    let mut counters = vec![0usize; n];
    let mut best = eval(&perm);
    let mut i = 1;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            best = best.min(eval(&perm));
            counters[i] += 1;
            i = 1;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    Ok((best / n as f64).max(0.0).sqrt())
}
