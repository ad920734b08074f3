//! Corotational linear tetrahedral FEM with implicit Euler integration,
//! Rayleigh damping and penalty contact against a kinematic sphere.

mod element;
mod material;
mod polar;
mod replay;
mod sim;
mod solver;
mod sparse;

pub use element::{element_stiffness, shape_gradients, stress_from_strain, Mat12, Vec12};
pub use material::{lame_parameters, MaterialParams, PHANTOM_MASS_G};
pub use polar::polar_rotation;
pub use replay::{read_run_dir, run_replay, run_replay_from, run_replay_with, write_run_dir, ReplayFrame, ReplayOutput};
pub use sim::{contact_forces, element_strain, element_stress, static_solve, FemState, ProbeSphere, Simulation};
pub use solver::{pcg, CgOutcome, ImplicitSystem, SolverConfig};
pub use sparse::BlockCsr;
