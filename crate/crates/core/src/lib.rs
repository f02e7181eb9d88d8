//! Vibrating string with interior point masses under a left-end Dirichlet
//! control: exact wave representations, a finite-difference reference
//! solver, spectral data, and synthesis of shape, velocity and full-state
//! boundary controls.

pub mod control;
pub mod dynamics;
pub mod edd;
pub mod fd;
pub mod kernel;
pub mod model;
pub mod numerics;
pub mod spaces;
pub mod spectral;

pub use model::{
    Bead, ControlSignal, Domain, MassState, ModelError, Potential, Profile, RawConfig, SampledFunction,
    StateSnapshot, StringSystem,
};
