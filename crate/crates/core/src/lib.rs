//! Soft-tissue simulation with learned correction: tetrahedral FEM, probe
//! kinematics replay, depth-cloud processing, rigid registration, stiffness
//! search and a U-Net displacement corrector.

pub mod dataset;
pub mod error;
pub mod fem;
pub mod mesh;
pub mod metric;
pub mod net;
pub mod pointcloud;
pub mod registration;
pub mod scalar;
pub mod search;
pub mod sync;
pub mod synth;

pub use error::{Error, Result};
pub use nalgebra;
pub use scalar::Real;

pub type Mesh = mesh::TetMesh<f64>;
pub type MeshSpec = mesh::GridMeshSpec<f64>;
pub type Cloud = pointcloud::PointCloud<f64>;
pub type Transform = registration::RigidTransform<f64>;
pub type Trajectory = sync::KinematicsTrajectory<f64>;
pub type Material = fem::MaterialParams<f64>;
pub type Solver = fem::SolverConfig<f64>;
pub type Probe = fem::ProbeSphere<f64>;
pub type Sim = fem::Simulation<f64>;
