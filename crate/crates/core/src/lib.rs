//! Harmonic correctors of stationary random conductance environments on the
//! periodic lattice.
//!
//! The pipeline is: generate an elliptic conductance field on `Z_L^d`
//! ([`environment`]), solve the periodic cell problem for the harmonic cocycle
//! with prescribed mean ([`solver`]), check the cocycle algebra ([`cocycle`]),
//! measure sublinearity and oscillation ([`ergodic`]) and run the random walk
//! among the conductances together with its martingale ([`walk`]).

pub mod cli;
pub mod cocycle;
pub mod environment;
pub mod ergodic;
pub mod format;
pub mod lattice;
pub mod solver;
pub mod walk;

pub use cocycle::{CocycleField, PathSpec, Step};
pub use environment::{Environment, GeneratorModel, ModelKind};
pub use lattice::{LatticeBox, TorusShape};
pub use solver::{CorrectorSolution, EffectiveTensor, SolverOptions};
