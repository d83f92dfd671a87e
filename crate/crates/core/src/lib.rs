//! Coupled generalized multiscale finite elements (CGMsFEM) for
//! quasi-static linear thermoelasticity on the unit square.
//!
//! The library is generic over the scalar type; the aliases below fix it to
//! `f64`.

// `!(x > tol)` is deliberate throughout: NaN must fail the test.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the element formulas.
#![allow(clippy::needless_range_loop)]

pub mod assembly;
pub mod coeffs;
pub mod config;
pub mod diagnostics;
pub mod element;
pub mod error;
pub mod experiment;
pub mod mesh;
pub mod scalar;
pub mod sparse;
pub mod spectral;
pub mod timeloop;
pub mod verify;
pub mod vtk;

pub use error::{Error, Result};

pub type FineMesh = mesh::FineMesh<f64>;
pub type CoarseMesh = mesh::CoarseMesh<f64>;
pub type MeshPair = mesh::MeshPair<f64>;
pub type PartitionOfUnity = mesh::PartitionOfUnity<f64>;
pub type MaterialField = coeffs::MaterialField<f64>;
pub type OperatorBlocks = assembly::OperatorBlocks<f64>;
pub type PatchSpectrum = spectral::PatchSpectrum<f64>;
pub type MultiscaleBasis = spectral::MultiscaleBasis<f64>;
pub type TimeGrid = timeloop::TimeGrid<f64>;
pub type SolutionHistory = timeloop::SolutionHistory<f64>;
