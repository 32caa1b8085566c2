//! Randomized refuters for the structural hypotheses.
//!
//! A passing report means that no sampled configuration violated the
//! inequality with the declared constants. It does not prove the hypothesis,
//! which quantifies over all states and all measures in 𝒫₂. A failing
//! report carries the worst trial as a witness and does refute the
//! declaration.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use super::{DDSDEModel, Dynamics, ModelError, SHSModel};
use crate::measures::{w2_exact, EmpiricalMeasure};
use crate::rng::{Domain, NoiseStream, StreamKey};

/// Margin tolerance for the identity-level checks.
pub const DEFAULT_TOLERANCE: f64 = 1e-9;

/// Radii of the (D3) certification grid.
pub const D3_R_GRID: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
/// `r0` grid as fractions of `1/‖B‖`.
pub const D3_R0_FRACTIONS: [f64; 19] = [
    -0.9, -0.8, -0.7, -0.6, -0.5, -0.4, -0.3, -0.2, -0.1, 0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7,
    0.8, 0.9,
];

/// 64-point logarithmic grid on `[1e-3, 10]` for (θ₁, θ₂).
pub fn theta_grid() -> Vec<f64> {
    let (lo, hi) = (1e-3f64.ln(), 10f64.ln());
    (0..64)
        .map(|k| (lo + (hi - lo) * k as f64 / 63.0).exp())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Witness {
    pub trial: usize,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisReport {
    pub trials: usize,
    /// Largest observed `LHS − RHS`.
    pub worst_margin: f64,
    pub witness: Option<Witness>,
    pub tolerance: f64,
    pub pass: bool,
}

impl HypothesisReport {
    /// Max-margin reduction in trial order (first maximum wins); `describe`
    /// is called once, for the worst trial.
    pub fn from_margins<F: FnOnce(usize) -> String>(
        margins: &[f64],
        tolerance: f64,
        describe: F,
    ) -> Self {
        let mut worst = f64::NEG_INFINITY;
        let mut at = None;
        for (i, &m) in margins.iter().enumerate() {
            if m.is_nan() {
                worst = f64::NAN;
                at = Some(i);
                break;
            }
            if m > worst {
                worst = m;
                at = Some(i);
            }
        }
        let witness = at.map(|trial| Witness {
            trial,
            description: describe(trial),
        });
        Self {
            trials: margins.len(),
            worst_margin: worst,
            witness,
            tolerance,
            pass: Self::passes(worst, tolerance),
        }
    }

    pub fn passes(worst_margin: f64, tolerance: f64) -> bool {
        worst_margin <= tolerance
    }
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    format!("[{}]", parts.join(" "))
}

/// Random configuration `(x, y, μ, ν)` for trial `trial`.
struct Probe {
    x: Vec<f64>,
    y: Vec<f64>,
    mu: EmpiricalMeasure,
    nu: EmpiricalMeasure,
}

fn sample_probe(seed: u64, trial: usize, dim: usize, support: usize) -> Probe {
    let mut s = NoiseStream::new(StreamKey::new(seed, trial as u64, Domain::Hypothesis, 0), dim);
    let gauss = |s: &mut NoiseStream| {
        let mut v = vec![0.0; dim];
        s.fill_normals(&mut v);
        v
    };
    let scale = 10f64.powf(2.0 * s.uniform() - 1.0);
    let x: Vec<f64> = gauss(&mut s).iter().map(|z| scale * z).collect();
    let y: Vec<f64> = if s.uniform() < 0.5 {
        let h = scale * 10f64.powf(-3.0 * s.uniform());
        gauss(&mut s).iter().zip(&x).map(|(z, xi)| xi + h * z).collect()
    } else {
        gauss(&mut s).iter().map(|z| scale * z).collect()
    };
    let cloud = |s: &mut NoiseStream| {
        let factor = 0.5 + 1.5 * s.uniform();
        let pts: Vec<f64> = (0..support)
            .flat_map(|_| gauss(s))
            .map(|z| factor * z)
            .collect();
        EmpiricalMeasure::from_flat(dim, pts).expect("finite gaussian atoms")
    };
    let mu = cloud(&mut s);
    let nu = cloud(&mut s);
    Probe { x, y, mu, nu }
}

/// `2⟨b(x,μ)−b(y,ν), x−y⟩ + ‖σ(x,μ)−σ(y,ν)‖²_HS − λ₂W₂(μ,ν)² + λ₁|x−y|²`
/// with the model's declared constants and exact W₂.
pub fn h1_margin(
    model: &DDSDEModel,
    x: &[f64],
    y: &[f64],
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> f64 {
    let d = model.dim();
    let (mut bx, mut by) = (vec![0.0; d], vec![0.0; d]);
    model.drift(x, mu, &mut bx);
    model.drift(y, nu, &mut by);
    let mut inner = 0.0;
    let mut dist2 = 0.0;
    for k in 0..d {
        let u = x[k] - y[k];
        inner += (bx[k] - by[k]) * u;
        dist2 += u * u;
    }
    let hs = (model.diffusion_matrix(x, mu) - model.diffusion_matrix(y, nu)).norm_squared();
    let w2 = w2_exact(mu, nu).expect("probe measures share size and dimension");
    let c = model.constants();
    2.0 * inner + hs - c.lambda2 * w2 * w2 + c.lambda1 * dist2
}

/// Sampled refutation of the monotonicity condition (H1).
pub fn check_h1(model: &DDSDEModel, seed: u64, n_trials: usize, support_size: usize) -> HypothesisReport {
    let dim = model.dim();
    let support = support_size.max(1);
    let margins: Vec<f64> = (0..n_trials)
        .into_par_iter()
        .map(|t| {
            let p = sample_probe(seed, t, dim, support);
            h1_margin(model, &p.x, &p.y, &p.mu, &p.nu)
        })
        .collect();
    HypothesisReport::from_margins(&margins, DEFAULT_TOLERANCE, |t| {
        let p = sample_probe(seed, t, dim, support);
        format!(
            "x={} y={} mean(mu)={} mean(nu)={}",
            fmt_vec(&p.x),
            fmt_vec(&p.y),
            fmt_vec(p.mu.mean()),
            fmt_vec(p.nu.mean())
        )
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct H2Report {
    pub kappa1_hat: f64,
    pub kappa2_hat: f64,
    pub pass: bool,
}

/// Extreme singular values of `σ(x, μ)` over all probe pairs, compared with
/// the declared `κ₁, κ₂`.
pub fn check_h2(
    model: &DDSDEModel,
    probe_states: &[Vec<f64>],
    probe_measures: &[EmpiricalMeasure],
) -> Result<H2Report, ModelError> {
    if probe_states.is_empty() || probe_measures.is_empty() {
        return Err(ModelError::NoProbe);
    }
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for x in probe_states {
        for mu in probe_measures {
            let sv = model.diffusion_matrix(x, mu).singular_values();
            lo = lo.min(sv.min());
            hi = hi.max(sv.max());
        }
    }
    let c = model.constants();
    let slack = 1e-9;
    Ok(H2Report {
        kappa1_hat: lo,
        kappa2_hat: hi,
        pass: c.kappa1 <= lo + slack && hi <= c.kappa2 + slack,
    })
}

/// Gaussian probe states and measures for [`check_h2`].
pub fn h2_probes(seed: u64, dim: usize, count: usize, support: usize) -> (Vec<Vec<f64>>, Vec<EmpiricalMeasure>) {
    let probes: Vec<Probe> = (0..count).map(|t| sample_probe(seed, t, dim, support)).collect();
    let states = probes.iter().flat_map(|p| [p.x.clone(), p.y.clone()]).collect();
    let measures = probes.into_iter().map(|p| p.mu).collect();
    (states, measures)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KalmanReport {
    pub rank: usize,
    pub pass: bool,
}

/// Rank of `[B, AB, …, A^{m−1}B]` with threshold `1e−10 · σ_max`.
pub fn kalman_rank(mat_a: &DMatrix<f64>, mat_b: &DMatrix<f64>) -> Result<KalmanReport, ModelError> {
    let m = mat_a.nrows();
    if mat_a.ncols() != m || mat_b.nrows() != m {
        return Err(ModelError::Shape(format!(
            "A is {:?}, B is {:?}",
            mat_a.shape(),
            mat_b.shape()
        )));
    }
    let d = mat_b.ncols();
    let mut block = DMatrix::zeros(m, m * d);
    let mut power = mat_b.clone();
    for k in 0..m {
        block.view_mut((0, k * d), (m, d)).copy_from(&power);
        power = mat_a * power;
    }
    let sv = block.singular_values();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let rank = if smax > 0.0 {
        sv.iter().filter(|&&s| s > 1e-10 * smax).count()
    } else {
        0
    };
    Ok(KalmanReport {
        rank,
        pass: rank == m,
    })
}

/// Constants certified for (D3) together with the norm-equivalence constant
/// `C` of the Lyapunov form `Ψ(u) = r²/2|u¹|² + ½|u²|² + r r₀⟨u¹, B u²⟩`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct D3Certificate {
    pub r: f64,
    pub r0: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub psi_constant: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct D3Report {
    /// Sampled margins at the requested `(r, r0)`.
    pub sampled: HypothesisReport,
    /// `(θ₁, θ₂)` used for the sampled margins.
    pub sampled_thetas: (f64, f64),
    /// Best grid certificate, if any grid point passes.
    pub certificate: Option<D3Certificate>,
}

fn check_r0(model: &SHSModel, r0: f64) -> Result<(), ModelError> {
    let bound = 1.0 / model.b_norm();
    if r0.abs() < bound {
        Ok(())
    } else {
        Err(ModelError::R0OutOfRange { r0, bound })
    }
}

/// Smallest `C ≥ 1` with `C⁻¹|u|² ≤ Ψ(u) ≤ C|u|²`.
pub fn psi_equivalence_constant(model: &SHSModel, r: f64, r0: f64) -> Result<f64, ModelError> {
    check_r0(model, r0)?;
    let (m, d) = (model.m(), model.d());
    let n = m + d;
    let mut s = DMatrix::zeros(n, n);
    for i in 0..m {
        s[(i, i)] = 0.5 * r * r;
    }
    for i in m..n {
        s[(i, i)] = 0.5;
    }
    let off = model.mat_b() * (0.5 * r * r0);
    s.view_mut((0, m), (m, d)).copy_from(&off);
    s.view_mut((m, 0), (d, m)).copy_from(&off.transpose());
    let eig = SymmetricEigen::new(s).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    Ok(hi.max(1.0 / lo).max(1.0))
}

/// LHS − RHS of (D3) at one configuration:
/// `⟨r²u¹ + r r₀Bu², Au¹ + Bu²⟩ + ⟨Z(x,μ) − Z(y,ν), u² + r r₀B*u¹⟩
///  + θ₁|u|² − θ₂W₂(μ,ν)²` with `u = x − y`.
#[allow(clippy::too_many_arguments)]
pub fn d3_margin(
    model: &SHSModel,
    r: f64,
    r0: f64,
    theta1: f64,
    theta2: f64,
    x: &[f64],
    y: &[f64],
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> f64 {
    let (m, d) = (model.m(), model.d());
    let (a, b) = (model.mat_a(), model.mat_b());
    let u: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
    let (u1, u2) = (&u[..m], &u[m..]);
    let mut first = 0.0;
    for i in 0..m {
        let mut lhs = r * r * u1[i];
        let mut rhs = 0.0;
        for j in 0..d {
            lhs += r * r0 * b[(i, j)] * u2[j];
            rhs += b[(i, j)] * u2[j];
        }
        for j in 0..m {
            rhs += a[(i, j)] * u1[j];
        }
        first += lhs * rhs;
    }
    let (mut zx, mut zy) = (vec![0.0; d], vec![0.0; d]);
    model.z(x, mu.mean(), &mut zx);
    model.z(y, nu.mean(), &mut zy);
    let mut second = 0.0;
    for j in 0..d {
        let mut dir = u2[j];
        for i in 0..m {
            dir += r * r0 * b[(i, j)] * u1[i];
        }
        second += (zx[j] - zy[j]) * dir;
    }
    let rho2: f64 = u.iter().map(|v| v * v).sum();
    let w2 = w2_exact(mu, nu).expect("probe measures share size and dimension");
    first + second + theta1 * rho2 - theta2 * w2 * w2
}

/// Quadratic-form pieces of (D3) for the affine catalogue, with
/// `w = mean(μ) − mean(ν)`: the left side is `uᵀPu + wᵀCu` where
/// `|w| ≤ W₂(μ, ν)`. Returns `(P, H)` with `H = CᵀC`, so that the condition
/// holds whenever `P + θ₁I + H/(4θ₂) ⪯ 0`.
fn d3_quadratic_form(model: &SHSModel, r: f64, r0: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (m, d) = (model.m(), model.d());
    let n = m + d;
    let b = model.mat_b();
    let mut g1 = DMatrix::zeros(m, n);
    let mut g2 = DMatrix::zeros(m, n);
    let mut g3 = DMatrix::zeros(d, n);
    for i in 0..m {
        g1[(i, i)] = r * r;
    }
    g1.view_mut((0, m), (m, d)).copy_from(&(b * (r * r0)));
    g2.view_mut((0, 0), (m, m)).copy_from(model.mat_a());
    g2.view_mut((0, m), (m, d)).copy_from(b);
    g3.view_mut((0, 0), (d, m)).copy_from(&(b.transpose() * (r * r0)));
    for j in 0..d {
        g3[(j, m + j)] = 1.0;
    }
    let z = model.zfield();
    let raw = g1.transpose() * &g2 + g3.transpose() * &z.state;
    let p = (&raw + raw.transpose()) * 0.5;
    let cross = z.mean.transpose() * &g3;
    let h = cross.transpose() * cross;
    (p, h)
}

fn max_eig(m: DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m).eigenvalues.max()
}

/// Largest grid `θ₁` certified at `(r, r0, θ₂)`, if it exceeds `θ₂`.
fn best_theta1(p: &DMatrix<f64>, h: &DMatrix<f64>, theta2: f64, grid: &[f64]) -> Option<f64> {
    let bound = -max_eig(p + h * (0.25 / theta2));
    grid.iter()
        .copied()
        .filter(|&t1| t1 > theta2 && t1 <= bound - 1e-12)
        .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.max(t))))
}

/// Grid search for `(r, r0, θ₁, θ₂)` satisfying (D3), maximizing `θ₁ − θ₂`.
///
/// Uses the sufficient condition that the quadratic form in `(u, w)` is
/// negative semidefinite; first-found wins on ties (iteration order `r`,
/// `r0`, `θ₂` ascending).
pub fn certify_d3(model: &SHSModel) -> Option<D3Certificate> {
    let grid = theta_grid();
    let bound = 1.0 / model.b_norm();
    let mut best: Option<D3Certificate> = None;
    for &r in &D3_R_GRID {
        for &frac in &D3_R0_FRACTIONS {
            let r0 = frac * bound;
            let (p, h) = d3_quadratic_form(model, r, r0);
            for &theta2 in &grid {
                let Some(theta1) = best_theta1(&p, &h, theta2, &grid) else {
                    continue;
                };
                if best.is_none_or(|b| theta1 - theta2 > b.theta1 - b.theta2) {
                    let psi = psi_equivalence_constant(model, r, r0).ok()?;
                    best = Some(D3Certificate {
                        r,
                        r0,
                        theta1,
                        theta2,
                        psi_constant: psi,
                    });
                }
            }
        }
    }
    best
}

/// Sampled (D3) margins at the given `(r, r0)` plus the grid certificate.
///
/// The sampled margins use the best `(θ₁, θ₂)` certified at this `(r, r0)`,
/// or the weakest grid pair when none is.
pub fn check_d3(model: &SHSModel, r: f64, r0: f64, seed: u64, n_trials: usize) -> Result<D3Report, ModelError> {
    check_r0(model, r0)?;
    if !(r > 0.0) {
        return Err(ModelError::Parameter {
            name: "r",
            requirement: "positive",
            value: r,
        });
    }
    let grid = theta_grid();
    let (p, h) = d3_quadratic_form(model, r, r0);
    let local = grid
        .iter()
        .filter_map(|&t2| best_theta1(&p, &h, t2, &grid).map(|t1| (t1, t2)))
        .fold(None, |acc: Option<(f64, f64)>, c| match acc {
            Some(a) if a.0 - a.1 >= c.0 - c.1 => Some(a),
            _ => Some(c),
        });
    let (theta1, theta2) = local.unwrap_or((grid[1], grid[0]));
    let dim = model.state_dim();
    let margins: Vec<f64> = (0..n_trials)
        .into_par_iter()
        .map(|t| {
            let pr = sample_probe(seed, t, dim, 8);
            d3_margin(model, r, r0, theta1, theta2, &pr.x, &pr.y, &pr.mu, &pr.nu)
        })
        .collect();
    let sampled = HypothesisReport::from_margins(&margins, DEFAULT_TOLERANCE, |t| {
        let pr = sample_probe(seed, t, dim, 8);
        format!(
            "x={} y={} theta1={theta1} theta2={theta2}",
            fmt_vec(&pr.x),
            fmt_vec(&pr.y)
        )
    });
    Ok(D3Report {
        sampled,
        sampled_thetas: (theta1, theta2),
        certificate: certify_d3(model),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{make_mean_field_ou, make_shs_linear, Diffusion, HypothesisConstants};
    use std::sync::Arc;

    #[test]
    fn h1_holds_for_ou_and_degenerate_pair_is_zero() {
        let m = make_mean_field_ou(1.0, 0.5, 1.0, 1).unwrap();
        let rep = check_h1(&m, 7, 2000, 8);
        assert!(rep.pass, "{rep:?}");
        assert!(rep.worst_margin <= 1e-9);
        let mu = EmpiricalMeasure::from_flat(1, vec![0.3, -1.0, 2.0]).unwrap();
        assert_eq!(h1_margin(&m, &[0.7], &[0.7], &mu, &mu), 0.0);
    }

    #[test]
    fn h1_refutes_overstated_lambda1() {
        let m = make_mean_field_ou(1.0, 0.5, 1.0, 1).unwrap();
        let c = m.constants();
        let bad = m
            .with_constants(HypothesisConstants {
                lambda1: c.lambda1 + 1.0,
                ..c
            })
            .unwrap();
        let rep = check_h1(&bad, 7, 500, 8);
        assert!(!rep.pass);
        let w = rep.witness.unwrap();
        assert!(w.description.contains("x="));
        // The witness trial reproduces its margin.
        let p = sample_probe(7, w.trial, 1, 8);
        assert_eq!(h1_margin(&bad, &p.x, &p.y, &p.mu, &p.nu), rep.worst_margin);
    }

    #[test]
    fn report_pass_is_function_of_margin() {
        let r = HypothesisReport::from_margins(&[-1.0, 0.5, 0.5, -2.0], 0.1, |t| t.to_string());
        assert_eq!(r.worst_margin, 0.5);
        assert_eq!(r.witness.unwrap().trial, 1);
        assert!(!r.pass);
        let ok = HypothesisReport::from_margins(&[-1.0, 0.05], 0.1, |_| String::new());
        assert!(ok.pass);
        let nan = HypothesisReport::from_margins(&[-1.0, f64::NAN], 0.1, |_| String::new());
        assert!(!nan.pass);
    }

    #[test]
    fn h2_examples() {
        let ou = make_mean_field_ou(1.0, 0.5, 1.0, 2).unwrap();
        let (states, measures) = h2_probes(1, 2, 4, 8);
        let rep = check_h2(&ou, &states, &measures).unwrap();
        assert_eq!((rep.kappa1_hat, rep.kappa2_hat), (1.0, 1.0));
        assert!(rep.pass);

        let diag = ou
            .with_diffusion(Diffusion::Constant(DMatrix::from_diagonal(
                &nalgebra::DVector::from_vec(vec![1.0, 2.0]),
            )))
            .unwrap();
        let rep = check_h2(&diag, &states, &measures).unwrap();
        assert!((rep.kappa1_hat - 1.0).abs() < 1e-12 && (rep.kappa2_hat - 2.0).abs() < 1e-12);
        assert!(!rep.pass);

        let zero = ou.with_diffusion(Diffusion::Constant(DMatrix::zeros(2, 2))).unwrap();
        let rep = check_h2(&zero, &states, &measures).unwrap();
        assert_eq!(rep.kappa1_hat, 0.0);
        assert!(!rep.pass);

        assert_eq!(check_h2(&ou, &[], &measures), Err(ModelError::NoProbe));
    }

    #[test]
    fn h2_bounds_monotone_in_probes() {
        let ou = make_mean_field_ou(1.0, 0.5, 1.0, 1).unwrap();
        let m = ou
            .with_diffusion(Diffusion::General(Arc::new(|x: &[f64], _: &EmpiricalMeasure| {
                DMatrix::from_element(1, 1, 1.0 + 0.5 * x[0].sin())
            })))
            .unwrap();
        let (states, measures) = h2_probes(3, 1, 20, 4);
        let mut prev = (f64::INFINITY, 0.0);
        for k in 1..=states.len() {
            let r = check_h2(&m, &states[..k], &measures).unwrap();
            assert!(r.kappa1_hat <= prev.0 && r.kappa2_hat >= prev.1);
            prev = (r.kappa1_hat, r.kappa2_hat);
        }
    }

    #[test]
    fn kalman_examples() {
        let one = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(
            kalman_rank(&DMatrix::zeros(1, 1), &one).unwrap(),
            KalmanReport { rank: 1, pass: true }
        );
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        assert_eq!(kalman_rank(&a, &b).unwrap(), KalmanReport { rank: 2, pass: true });
        assert_eq!(
            kalman_rank(&a, &DMatrix::zeros(2, 1)).unwrap(),
            KalmanReport { rank: 0, pass: false }
        );
        assert!(kalman_rank(&a, &DMatrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn d3_certifies_weak_coupling_and_refuses_strong() {
        let weak = make_shs_linear(1.0, 1.0, 0.1, 1.0).unwrap();
        let cert = certify_d3(&weak).expect("weak interaction certifies");
        assert!(cert.theta1 > cert.theta2 && cert.theta2 > 0.0);
        assert!(cert.psi_constant >= 1.0);
        let rep = check_d3(&weak, cert.r, cert.r0, 5, 2000).unwrap();
        assert!(rep.sampled.pass, "{rep:?}");

        let strong = make_shs_linear(1.0, 1.0, 10.0, 1.0).unwrap();
        assert!(certify_d3(&strong).is_none());
        let rep = check_d3(&strong, 1.0, 0.5, 5, 2000).unwrap();
        assert!(rep.certificate.is_none());
    }

    #[test]
    fn d3_degenerate_pair_and_r0_range() {
        let m = make_shs_linear(1.0, 1.0, 0.1, 1.0).unwrap();
        let mu = EmpiricalMeasure::from_flat(2, vec![0.0, 1.0, 1.0, -1.0]).unwrap();
        assert_eq!(d3_margin(&m, 1.0, 0.5, 0.2, 0.1, &[1.0, 2.0], &[1.0, 2.0], &mu, &mu), 0.0);
        assert!(matches!(
            check_d3(&m, 1.0, 1.0, 0, 10),
            Err(ModelError::R0OutOfRange { .. })
        ));
    }

    #[test]
    fn d3_sampled_margins_respect_certificate_bound() {
        // The quadratic-form certificate is sufficient: sampled margins at the
        // certified constants can never be positive.
        let m = make_shs_linear(1.5, 0.7, 0.3, 1.0).unwrap();
        let cert = certify_d3(&m).unwrap();
        for t in 0..500 {
            let p = sample_probe(11, t, 2, 8);
            let margin = d3_margin(&m, cert.r, cert.r0, cert.theta1, cert.theta2, &p.x, &p.y, &p.mu, &p.nu);
            assert!(margin <= 1e-9, "trial {t}: {margin}");
        }
    }

    #[test]
    fn psi_constant_scalar_case() {
        // r = 1, r0 = 0: Ψ = ½|u|², so C = max(½, 2) = 2.
        let m = make_shs_linear(1.0, 1.0, 0.0, 1.0).unwrap();
        assert!((psi_equivalence_constant(&m, 1.0, 0.0).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn theta_grid_endpoints() {
        let g = theta_grid();
        assert_eq!(g.len(), 64);
        assert!((g[0] - 1e-3).abs() < 1e-15 && (g[63] - 10.0).abs() < 1e-12);
    }
}
