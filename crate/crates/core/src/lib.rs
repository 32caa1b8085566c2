//! Particle approximations of distribution-dependent SDEs and stochastic
//! Hamiltonian systems, Wasserstein contraction, and moderate-deviation
//! experiments for time averages along a tagged particle.

pub use nalgebra;

pub mod experiments;
pub mod functionals;
pub mod integrator;
pub mod measures;
pub mod models;
pub mod rng;

pub use experiments::ExperimentError;
pub use functionals::{FunctionalError, Observable, ObservableSpec, RegClass, ScalingFunction};
pub use integrator::{IntegratorError, ParticleSystem, Path};
pub use measures::{wasserstein2, EmpiricalMeasure, MeasureError, W2Method};
pub use models::{
    DDSDEModel, Dynamics, HypothesisConstants, HypothesisReport, Model, ModelError, SHSModel, SigmaClass,
};
pub use rng::{Domain, NoiseStream, StreamKey};
