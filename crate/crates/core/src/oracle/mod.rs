//! Independent checks: finite-difference gradients, a dense fixed-step
//! reference simulator, seeded random instances, and the experiment
//! harnesses.

mod experiments;
mod fd;
mod instances;
mod reference;

pub use crate::simulator::NoiseModel;
pub use experiments::*;
pub use fd::{agrees, finite_diff_gradient, FdGradient};
pub use instances::{random_instance, random_simplex};
pub use reference::{reference_simulate, ReferenceLaw, ReferenceOutput, REFERENCE_STEP_FRACTION};
