//! Monodomain cardiac electrophysiology on adaptive Cartesian forests.
//!
//! Space is discretised with symmetric interior penalty DG on a
//! forest-of-trees mesh, time with explicit forward Euler for the potential
//! and Rush–Larsen for gating variables, and every element advances with its
//! own power-of-two number of substeps inside a global step.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod basis;
pub mod benchmarks;
pub mod config;
pub mod error;
pub mod indicators;
pub mod ionics;
pub mod lat;
pub mod mesh;
pub mod refsolver;
pub mod run;
pub mod sipg;
pub mod slts;
pub mod transfer;
pub mod vtk;

pub use basis::Basis;
pub use benchmarks::PropagationSetup;
pub use config::{RunConfig, SolverKind};
pub use error::{Error, Result};
pub use mesh::{CellKey, FaceInfo, FaceKind, ForestMesh, RefinementDelta};
pub use sipg::{apply_diffusion, assemble_operators, DiffusionTensor, ElementOps};
pub use ionics::{IonicModel, StimulusProtocol};
pub use run::{run, RunOptions, RunSummary};
pub use slts::{Simulation, SltsSettings};
