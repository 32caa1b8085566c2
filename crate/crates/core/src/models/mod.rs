//! Model catalogue and hypothesis checkers.
//!
//! Two families are provided: distribution-dependent SDEs on ℝ^d
//! ([`DDSDEModel`], with the mean-field Ornstein–Uhlenbeck constructor) and
//! degenerate stochastic Hamiltonian systems on ℝ^{m+d} ([`SHSModel`]).
//! Both implement [`Dynamics`], which is all the integrator needs.

mod hypotheses;

pub use hypotheses::{
    certify_d3, check_d3, check_h1, check_h2, d3_margin, h1_margin, h2_probes, kalman_rank,
    psi_equivalence_constant, theta_grid, DEFAULT_TOLERANCE, D3Certificate, D3Report, H2Report, HypothesisReport,
    KalmanReport, Witness, D3_R0_FRACTIONS, D3_R_GRID,
};

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::measures::EmpiricalMeasure;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("mean-field OU needs theta > eta (lambda1 = 2 theta - eta > lambda2 = eta), got theta = {theta}, eta = {eta}")]
    ThetaNotAboveEta { theta: f64, eta: f64 },
    #[error("parameter `{name}` must be {requirement}, got {value}")]
    Parameter {
        name: &'static str,
        requirement: &'static str,
        value: f64,
    },
    #[error("declared constants violate {0}")]
    Constants(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("r0 = {r0} outside (-1/|B|, 1/|B|) = (-{bound}, {bound})")]
    R0OutOfRange { r0: f64, bound: f64 },
    #[error("no probe supplied")]
    NoProbe,
}

fn positive(name: &'static str, value: f64) -> Result<f64, ModelError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(ModelError::Parameter {
            name,
            requirement: "positive and finite",
            value,
        })
    }
}

/// How the diffusion coefficient depends on its arguments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaClass {
    General,
    MeasureOnly,
    Constant,
}

impl SigmaClass {
    /// Whether synchronous coupling cancels the noise in `X − X̄` exactly.
    pub fn is_state_free(self) -> bool {
        !matches!(self, SigmaClass::General)
    }
}

impl fmt::Display for SigmaClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SigmaClass::General => "general",
            SigmaClass::MeasureOnly => "measure_only",
            SigmaClass::Constant => "constant",
        })
    }
}

/// Constants of the monotonicity condition
/// `2⟨b(x,μ)−b(y,ν), x−y⟩ + ‖σ(x,μ)−σ(y,ν)‖²_HS ≤ λ₂W₂(μ,ν)² − λ₁|x−y|²`
/// and the ellipticity bounds `κ₁²I ≤ σσ* ≤ κ₂²I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HypothesisConstants {
    pub lambda1: f64,
    pub lambda2: f64,
    pub kappa1: f64,
    pub kappa2: f64,
}

impl HypothesisConstants {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.lambda2 >= 0.0 && self.lambda1 > self.lambda2) {
            return Err(ModelError::Constants("lambda1 > lambda2 >= 0"));
        }
        if !(self.kappa1 > 0.0 && self.kappa1 <= self.kappa2) {
            return Err(ModelError::Constants("0 < kappa1 <= kappa2"));
        }
        Ok(())
    }

    /// Exponential W₂² contraction rate `λ₁ − λ₂`.
    pub fn gap(&self) -> f64 {
        self.lambda1 - self.lambda2
    }
}

/// Rate and prefactor of `W₂(P_t*μ, P_t*ν)² ≤ C·e^{−g t}·W₂(μ, ν)²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionRate {
    pub rate: f64,
    pub prefactor: f64,
}

/// Drift `b(x, μ) = K x + E·mean(μ)` with constant diffusion `S`, all stored
/// row-major. Models of this shape depend on the law only through its mean,
/// which is what the reduced tagged-particle simulation exploits.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMeanField {
    pub dim: usize,
    pub noise_dim: usize,
    /// `dim × dim`
    pub state: Vec<f64>,
    /// `dim × dim`
    pub interaction: Vec<f64>,
    /// `dim × noise_dim`
    pub diffusion: Vec<f64>,
}

impl AffineMeanField {
    fn from_matrices(state: &DMatrix<f64>, interaction: &DMatrix<f64>, diffusion: &DMatrix<f64>) -> Self {
        let row_major = |m: &DMatrix<f64>| m.transpose().as_slice().to_vec();
        Self {
            dim: state.nrows(),
            noise_dim: diffusion.ncols(),
            state: row_major(state),
            interaction: row_major(interaction),
            diffusion: row_major(diffusion),
        }
    }

    /// `out = K x + E m`
    #[inline]
    pub fn drift(&self, x: &[f64], mean: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for (r, o) in out.iter_mut().enumerate().take(d) {
            let k = &self.state[r * d..(r + 1) * d];
            let e = &self.interaction[r * d..(r + 1) * d];
            let mut acc = 0.0;
            for c in 0..d {
                acc += k[c] * x[c] + e[c] * mean[c];
            }
            *o = acc;
        }
    }

    /// `out += scale · S ξ`
    #[inline]
    pub fn add_noise(&self, xi: &[f64], scale: f64, out: &mut [f64]) {
        let q = self.noise_dim;
        for (r, o) in out.iter_mut().enumerate().take(self.dim) {
            let s = &self.diffusion[r * q..(r + 1) * q];
            let mut acc = 0.0;
            for c in 0..q {
                acc += s[c] * xi[c];
            }
            *o += scale * acc;
        }
    }
}

/// Interface between a model and the time stepper.
pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    /// `out = b(x, μ)`
    fn drift(&self, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);
    /// `out += scale · σ(x, μ) ξ`
    fn add_diffusion(&self, x: &[f64], mu: &EmpiricalMeasure, xi: &[f64], scale: f64, out: &mut [f64]);
    fn sigma_class(&self) -> SigmaClass;
    /// Affine mean-field structure, when the model has one.
    fn affine(&self) -> Option<AffineMeanField>;
    /// Declared or certified W₂ contraction of the nonlinear flow.
    fn contraction(&self) -> Option<ContractionRate>;
}

pub type DriftFn = Arc<dyn Fn(&[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync>;
pub type MeasureDiffusionFn = Arc<dyn Fn(&EmpiricalMeasure) -> DMatrix<f64> + Send + Sync>;
pub type StateDiffusionFn = Arc<dyn Fn(&[f64], &EmpiricalMeasure) -> DMatrix<f64> + Send + Sync>;

#[derive(Clone)]
pub enum Drift {
    /// `b(x, μ) = linear·x + interaction·mean(μ)`
    AffineMean {
        linear: DMatrix<f64>,
        interaction: DMatrix<f64>,
    },
    Custom(DriftFn),
}

#[derive(Clone)]
pub enum Diffusion {
    Constant(DMatrix<f64>),
    MeasureOnly(MeasureDiffusionFn),
    General(StateDiffusionFn),
}

impl Diffusion {
    pub fn class(&self) -> SigmaClass {
        match self {
            Diffusion::Constant(_) => SigmaClass::Constant,
            Diffusion::MeasureOnly(_) => SigmaClass::MeasureOnly,
            Diffusion::General(_) => SigmaClass::General,
        }
    }

    pub fn matrix(&self, x: &[f64], mu: &EmpiricalMeasure) -> DMatrix<f64> {
        match self {
            Diffusion::Constant(s) => s.clone(),
            Diffusion::MeasureOnly(f) => f(mu),
            Diffusion::General(f) => f(x, mu),
        }
    }
}

/// Distribution-dependent SDE `dX = b(X, L_X)dt + σ(X, L_X)dB` on ℝ^dim with
/// its declared hypothesis constants.
#[derive(Clone)]
pub struct DDSDEModel {
    dim: usize,
    drift: Drift,
    diffusion: Diffusion,
    constants: HypothesisConstants,
}

impl fmt::Debug for DDSDEModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DDSDEModel")
            .field("dim", &self.dim)
            .field("sigma_class", &self.diffusion.class())
            .field("constants", &self.constants)
            .finish_non_exhaustive()
    }
}

impl DDSDEModel {
    pub fn new(
        dim: usize,
        drift: Drift,
        diffusion: Diffusion,
        constants: HypothesisConstants,
    ) -> Result<Self, ModelError> {
        if dim == 0 {
            return Err(ModelError::Shape("dim must be positive".into()));
        }
        if let Drift::AffineMean { linear, interaction } = &drift {
            if linear.shape() != (dim, dim) || interaction.shape() != (dim, dim) {
                return Err(ModelError::Shape("affine drift matrices must be dim × dim".into()));
            }
        }
        if let Diffusion::Constant(s) = &diffusion {
            if s.shape() != (dim, dim) {
                return Err(ModelError::Shape("diffusion must be dim × dim".into()));
            }
        }
        constants.validate()?;
        Ok(Self {
            dim,
            drift,
            diffusion,
            constants,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn constants(&self) -> HypothesisConstants {
        self.constants
    }

    pub fn diffusion(&self) -> &Diffusion {
        &self.diffusion
    }

    /// Same dynamics, different declared constants. Used to probe the
    /// hypothesis checkers with deliberately wrong declarations.
    pub fn with_constants(&self, constants: HypothesisConstants) -> Result<Self, ModelError> {
        constants.validate()?;
        Ok(Self {
            constants,
            ..self.clone()
        })
    }

    pub fn with_diffusion(&self, diffusion: Diffusion) -> Result<Self, ModelError> {
        Self::new(self.dim, self.drift.clone(), diffusion, self.constants)
    }

    pub fn diffusion_matrix(&self, x: &[f64], mu: &EmpiricalMeasure) -> DMatrix<f64> {
        self.diffusion.matrix(x, mu)
    }
}

impl Dynamics for DDSDEModel {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn noise_dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        match &self.drift {
            Drift::AffineMean {
                linear,
                interaction,
            } => {
                let mean = mu.mean();
                for (r, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for c in 0..self.dim {
                        acc += linear[(r, c)] * x[c] + interaction[(r, c)] * mean[c];
                    }
                    *o = acc;
                }
            }
            Drift::Custom(f) => f(x, mu, out),
        }
    }

    fn add_diffusion(&self, x: &[f64], mu: &EmpiricalMeasure, xi: &[f64], scale: f64, out: &mut [f64]) {
        let s = self.diffusion.matrix(x, mu);
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (c, z) in xi.iter().enumerate() {
                acc += s[(r, c)] * z;
            }
            *o += scale * acc;
        }
    }

    fn sigma_class(&self) -> SigmaClass {
        self.diffusion.class()
    }

    fn affine(&self) -> Option<AffineMeanField> {
        match (&self.drift, &self.diffusion) {
            (
                Drift::AffineMean {
                    linear,
                    interaction,
                },
                Diffusion::Constant(s),
            ) => Some(AffineMeanField::from_matrices(linear, interaction, s)),
            _ => None,
        }
    }

    fn contraction(&self) -> Option<ContractionRate> {
        Some(ContractionRate {
            rate: self.constants.gap(),
            prefactor: 1.0,
        })
    }
}

/// Mean-field OU: `b(x, μ) = −θx + η·mean(μ)`, `σ = σ₀ I`, with
/// `λ₁ = 2θ − η`, `λ₂ = η`, `κ₁ = κ₂ = σ₀`.
pub fn make_mean_field_ou(theta: f64, eta: f64, sigma0: f64, dim: usize) -> Result<DDSDEModel, ModelError> {
    positive("theta", theta)?;
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(ModelError::Parameter {
            name: "eta",
            requirement: "nonnegative and finite",
            value: eta,
        });
    }
    positive("sigma0", sigma0)?;
    if theta <= eta {
        return Err(ModelError::ThetaNotAboveEta { theta, eta });
    }
    if dim == 0 {
        return Err(ModelError::Shape("dim must be positive".into()));
    }
    DDSDEModel::new(
        dim,
        Drift::AffineMean {
            linear: DMatrix::identity(dim, dim) * -theta,
            interaction: DMatrix::identity(dim, dim) * eta,
        },
        Diffusion::Constant(DMatrix::identity(dim, dim) * sigma0),
        HypothesisConstants {
            lambda1: 2.0 * theta - eta,
            lambda2: eta,
            kappa1: sigma0,
            kappa2: sigma0,
        },
    )
}

/// Affine second-block field `Z(x, μ) = state·x + mean·mean(μ)`, both
/// `d × (m + d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineZField {
    pub state: DMatrix<f64>,
    pub mean: DMatrix<f64>,
}

/// Degenerate system on ℝ^{m+d}:
/// `dX¹ = (A X¹ + B X²)dt`, `dX² = Z(X, L_X)dt + M dB`.
#[derive(Debug, Clone, PartialEq)]
pub struct SHSModel {
    m: usize,
    d: usize,
    mat_a: DMatrix<f64>,
    mat_b: DMatrix<f64>,
    mat_m: DMatrix<f64>,
    zfield: AffineZField,
    certificate: Option<D3Certificate>,
}

impl SHSModel {
    pub fn new(
        mat_a: DMatrix<f64>,
        mat_b: DMatrix<f64>,
        mat_m: DMatrix<f64>,
        zfield: AffineZField,
    ) -> Result<Self, ModelError> {
        let m = mat_a.nrows();
        let d = mat_m.nrows();
        if m == 0 || d == 0 {
            return Err(ModelError::Shape("block sizes must be positive".into()));
        }
        if mat_a.shape() != (m, m)
            || mat_b.shape() != (m, d)
            || mat_m.shape() != (d, d)
            || zfield.state.shape() != (d, m + d)
            || zfield.mean.shape() != (d, m + d)
        {
            return Err(ModelError::Shape(format!(
                "A {:?}, B {:?}, M {:?}, Z {:?}/{:?} do not conform for m = {m}, d = {d}",
                mat_a.shape(),
                mat_b.shape(),
                mat_m.shape(),
                zfield.state.shape(),
                zfield.mean.shape()
            )));
        }
        let sv = mat_m.clone().singular_values();
        let smax = sv.max();
        if !(sv.min() > 1e-12 * smax.max(1.0)) {
            return Err(ModelError::Shape("M must be invertible".into()));
        }
        Ok(Self {
            m,
            d,
            mat_a,
            mat_b,
            mat_m,
            zfield,
            certificate: None,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn mat_a(&self) -> &DMatrix<f64> {
        &self.mat_a
    }

    pub fn mat_b(&self) -> &DMatrix<f64> {
        &self.mat_b
    }

    pub fn mat_m(&self) -> &DMatrix<f64> {
        &self.mat_m
    }

    pub fn zfield(&self) -> &AffineZField {
        &self.zfield
    }

    /// Operator norm ‖B‖.
    pub fn b_norm(&self) -> f64 {
        self.mat_b.clone().singular_values().max()
    }

    pub fn certificate(&self) -> Option<&D3Certificate> {
        self.certificate.as_ref()
    }

    pub fn with_certificate(mut self, cert: D3Certificate) -> Self {
        self.certificate = Some(cert);
        self
    }

    /// `Z(x, μ)` into `out` (length d).
    pub fn z(&self, x: &[f64], mean: &[f64], out: &mut [f64]) {
        let n = self.m + self.d;
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for c in 0..n {
                acc += self.zfield.state[(r, c)] * x[c] + self.zfield.mean[(r, c)] * mean[c];
            }
            *o = acc;
        }
    }

    fn full_matrices(&self) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let (m, d) = (self.m, self.d);
        let n = m + d;
        let mut k = DMatrix::zeros(n, n);
        k.view_mut((0, 0), (m, m)).copy_from(&self.mat_a);
        k.view_mut((0, m), (m, d)).copy_from(&self.mat_b);
        k.view_mut((m, 0), (d, n)).copy_from(&self.zfield.state);
        let mut e = DMatrix::zeros(n, n);
        e.view_mut((m, 0), (d, n)).copy_from(&self.zfield.mean);
        let mut s = DMatrix::zeros(n, d);
        s.view_mut((m, 0), (d, d)).copy_from(&self.mat_m);
        (k, e, s)
    }

    /// Full-state drift matrix and noise matrix `(K, S)` of the reference
    /// (frozen-law) linear system.
    pub fn linear_system(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let (k, _, s) = self.full_matrices();
        (k, s)
    }
}

impl Dynamics for SHSModel {
    fn state_dim(&self) -> usize {
        self.m + self.d
    }

    fn noise_dim(&self) -> usize {
        self.d
    }

    fn drift(&self, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let (m, d) = (self.m, self.d);
        for r in 0..m {
            let mut acc = 0.0;
            for c in 0..m {
                acc += self.mat_a[(r, c)] * x[c];
            }
            for c in 0..d {
                acc += self.mat_b[(r, c)] * x[m + c];
            }
            out[r] = acc;
        }
        self.z(x, mu.mean(), &mut out[m..]);
    }

    fn add_diffusion(&self, _x: &[f64], _mu: &EmpiricalMeasure, xi: &[f64], scale: f64, out: &mut [f64]) {
        for r in 0..self.d {
            let mut acc = 0.0;
            for (c, z) in xi.iter().enumerate() {
                acc += self.mat_m[(r, c)] * z;
            }
            out[self.m + r] += scale * acc;
        }
    }

    fn sigma_class(&self) -> SigmaClass {
        SigmaClass::Constant
    }

    fn affine(&self) -> Option<AffineMeanField> {
        let (k, e, s) = self.full_matrices();
        Some(AffineMeanField::from_matrices(&k, &e, &s))
    }

    fn contraction(&self) -> Option<ContractionRate> {
        self.certificate.as_ref().map(|c| ContractionRate {
            rate: (c.theta1 - c.theta2) / (2.0 * c.psi_constant),
            prefactor: c.psi_constant,
        })
    }
}

/// Linear kinetic oscillator with mean-field velocity coupling:
/// `dx = v dt`, `dv = (−k x − γ v + ε·mean_v(μ))dt + σ₀ dB`.
pub fn make_shs_linear(gamma: f64, k: f64, eps_int: f64, sigma0: f64) -> Result<SHSModel, ModelError> {
    positive("gamma", gamma)?;
    positive("k", k)?;
    positive("sigma0", sigma0)?;
    if !(eps_int >= 0.0 && eps_int.is_finite()) {
        return Err(ModelError::Parameter {
            name: "eps_int",
            requirement: "nonnegative and finite",
            value: eps_int,
        });
    }
    SHSModel::new(
        DMatrix::from_element(1, 1, 0.0),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, sigma0),
        AffineZField {
            state: DMatrix::from_row_slice(1, 2, &[-k, -gamma]),
            mean: DMatrix::from_row_slice(1, 2, &[0.0, eps_int]),
        },
    )
}

/// Either catalogue family behind one type, for configuration-driven runs.
#[derive(Debug, Clone)]
pub enum Model {
    Ddsde(DDSDEModel),
    Shs(SHSModel),
}

impl Dynamics for Model {
    fn state_dim(&self) -> usize {
        match self {
            Model::Ddsde(m) => m.state_dim(),
            Model::Shs(m) => m.state_dim(),
        }
    }

    fn noise_dim(&self) -> usize {
        match self {
            Model::Ddsde(m) => m.noise_dim(),
            Model::Shs(m) => m.noise_dim(),
        }
    }

    fn drift(&self, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        match self {
            Model::Ddsde(m) => m.drift(x, mu, out),
            Model::Shs(m) => m.drift(x, mu, out),
        }
    }

    fn add_diffusion(&self, x: &[f64], mu: &EmpiricalMeasure, xi: &[f64], scale: f64, out: &mut [f64]) {
        match self {
            Model::Ddsde(m) => m.add_diffusion(x, mu, xi, scale, out),
            Model::Shs(m) => m.add_diffusion(x, mu, xi, scale, out),
        }
    }

    fn sigma_class(&self) -> SigmaClass {
        match self {
            Model::Ddsde(m) => m.sigma_class(),
            Model::Shs(m) => m.sigma_class(),
        }
    }

    fn affine(&self) -> Option<AffineMeanField> {
        match self {
            Model::Ddsde(m) => m.affine(),
            Model::Shs(m) => m.affine(),
        }
    }

    fn contraction(&self) -> Option<ContractionRate> {
        match self {
            Model::Ddsde(m) => m.contraction(),
            Model::Shs(m) => m.contraction(),
        }
    }
}

impl From<DDSDEModel> for Model {
    fn from(m: DDSDEModel) -> Self {
        Model::Ddsde(m)
    }
}

impl From<SHSModel> for Model {
    fn from(m: SHSModel) -> Self {
        Model::Shs(m)
    }
}
