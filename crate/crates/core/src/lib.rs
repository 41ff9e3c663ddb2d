//! Guided-diffusion sampling laboratory.
//!
//! Closed-form score models, classifier-free guidance with its
//! characteristic (non-linear) correction, the samplers that consume
//! them, a lattice-magnet reference experiment, and the metrics used to
//! compare guided samples against analytic targets.
//!
//! The numeric core is generic over the scalar type ([`real::Real`],
//! implemented for `f32` and `f64`); the concrete aliases below pin the
//! `f64` instantiations used by the experiment pipelines.

pub mod config;
pub mod error;
pub mod experiment;
pub mod guidance;
pub mod linalg;
pub mod magnet;
pub mod metrics;
pub mod output;
pub mod real;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod score;

pub use error::{Error, Result};

/// `f64` instantiations used throughout the pipelines.
pub type NoiseSchedule64 = schedule::NoiseSchedule<f64>;
pub type GaussianModel64 = score::GaussianModel<f64>;
pub type MixtureModel64 = score::MixtureModel<f64>;
pub type KernelModel64 = score::KernelModel<f64>;
pub type KernelDataset64 = score::KernelDataset<f64>;
pub type BlendedMagnetModel64 = magnet::BlendedMagnetModel<f64>;
pub type LatticeField64 = magnet::LatticeField<f64>;
pub type GuidanceSpec64 = guidance::GuidanceSpec<f64>;
pub type SolverParams64 = guidance::SolverParams<f64>;
pub type SampleBatch64 = sampler::SampleBatch<f64>;
