//! Large deformation diffeomorphic image registration.
//!
//! The engine registers a template image `I_0` to a target `J` by optimising
//! a time-varying velocity field whose flow deforms the template. Matching is
//! either the sum of squared differences or Mattes mutual information, so
//! images of different contrast can be aligned. Affine pre-alignment and
//! coarse-to-fine / cascaded-smoothness schedules are included.
//!
//! Everything is generic over the scalar type ([`Real`], implemented for
//! `f32` and `f64`); the aliases below fix it to `f64`.

pub mod affine;
pub mod error;
pub mod flow;
pub mod grid;
pub mod io;
pub mod kernel;
pub mod lddmm;
pub mod matching;
pub mod multires;
pub mod phantom;
pub mod scalar;
pub mod validation;

pub use error::{Error, Result};
pub use scalar::Real;

pub type ImageGrid = grid::ImageGrid<f64>;
pub type ImageVolume = grid::ImageVolume<f64>;
pub type VectorField = grid::VectorField<f64>;
pub type DeformationMap = grid::DeformationMap<f64>;
pub type TimeVaryingVelocity = flow::TimeVaryingVelocity<f64>;
pub type KernelParams = kernel::KernelParams<f64>;
pub type SpectralKernel = kernel::SpectralKernel<f64>;
pub type RegistrationConfig = lddmm::RegistrationConfig<f64>;
pub type RegistrationResult = lddmm::RegistrationResult<f64>;
pub type AffineTransform = affine::AffineTransform<f64>;
pub type LandmarkSet = validation::LandmarkSet<f64>;
pub type ScheduleResult = multires::ScheduleResult<f64>;
pub use multires::Schedule;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
