//! Anisotropic SPDE-based score generative modeling on pixel grids.
//!
//! The forward process smooths an image with a gradient-modulated heat flow
//! and injects gradient-modulated noise; the backward process reverses it with
//! a score model and a predictor-corrector sampler.

pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod integrator;
pub mod quadrature;
pub mod reversal;
pub mod schedules;
pub mod score;

pub use dynamics::{classify, ForwardSde, OrnsteinUhlenbeck, SdeInstance, SpdeClass};
pub use error::{Error, Result};
pub use evaluation::{edge_correlation, mmd_permutation_test, mmd_rbf, moments, montage, MetricRecord, MmdTest, MomentReport, MontageRow};
pub use grid::{Field, Shape};
pub use integrator::{RngStream, StepperConfig, Trajectory};
pub use reversal::{BackwardInstance, CorrectorConfig};
pub use schedules::{Anisotropy, Preset, Schedule, Transition};
