//! Finite-volume workbench for the truncated discrete
//! coagulation-fragmentation-diffusion system in periodically perforated
//! domains, together with its homogenized (two-scale) limit.
//!
//! The crate is organized around the pipeline
//!
//! ```text
//! kernels ──> reaction ─────────────┐
//! geometry ──> linsolve ──> microsolver (perforated grid, flux on hole walls)
//!        │               └> macrosolver (effective tensor A, porosity θ)
//!        └──> cellproblem ──────────┘
//!                       convergence (cell averages of micro vs θ·macro)
//! ```
//!
//! * `kernels` tabulates and validates coagulation rates `a_{i,j}`,
//!   fragmentation rates `B_i`, daughter counts `beta_{i,j}`, and diffusion
//!   constants `d_i`.
//! * `reaction` evaluates the truncated coagulation/fragmentation operators
//!   and their conservation identities.
//! * `geometry` voxelizes the perforated domain, the hole-boundary face set,
//!   and the periodic reference cell.
//! * `linsolve` provides the Neumann Laplacian stencils and a preconditioned
//!   conjugate-gradient solver.
//! * `microsolver`/`macrosolver` time-integrate the fine-scale and
//!   homogenized systems with the same Lie splitting.
//! * `cellproblem` solves the periodic corrector problems and assembles the
//!   effective diffusion tensor.
//! * `convergence` compares ε-cell averages of the micro solution against
//!   the porosity-weighted macro solution.
//! * `cli` holds the JSON run configuration and the subcommand orchestration.

// Index loops mirror the stencil formulas; `!(x > 0)` guards reject NaN.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cellproblem;
pub mod cli;
pub mod convergence;
pub mod geometry;
pub mod kernels;
pub mod linsolve;
pub mod macrosolver;
pub mod microsolver;
pub mod reaction;

mod numeric;

#[cfg(test)]
mod test_util;
