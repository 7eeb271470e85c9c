//! Homogenized system on the unperforated domain.
//!
//! The limit equations carry the porosity `theta` on the time derivative and
//! on every reaction term, the effective tensor `A` inside the diffusion
//! operator, and a monomer source `d_1 * integral_Gamma psi(t,x,y) dsigma(y)`
//! from the hole-wall flux. Dividing through by `theta` leaves the reaction
//! dynamics identical to the fine-scale ones and rescales only the diffusion
//! coefficient (`d_i A / theta`) and the source (`d_1 gamma_source / theta`):
//! that divided form is what the stepper integrates, driven by the same
//! splitting engine as the fine-scale solver. With `theta = 1`, `A = I` and
//! no holes the two solvers take bitwise identical paths.
//!
//! The source factorizes as `gamma_source(t,x) = g(t) p(x) * q_gamma` where
//! `q_gamma` is the cell factor of `psi` integrated over the voxelized hole
//! boundary of the reference cell. The fine-scale wall flux uses the same
//! voxel surface measure per cell, so the injected-mass budgets of the two
//! solvers agree as the period shrinks.

use crate::cellproblem::CellSolution;
use crate::geometry::PerforatedGrid;
use crate::kernels::KernelSet;
use crate::linsolve::assemble_tensor_laplacian;
use crate::microsolver::{
    init_state, BoundarySource, Engine, RunError, SourceTerm, StepControls, Trajectory,
};
use crate::numeric::KahanSum;

/// Effective coefficients feeding the homogenized run.
#[derive(Clone, Debug)]
pub struct HomogenizedCoefficients {
    /// Effective diffusion tensor (geometry factor, no `d_i`).
    pub tensor: [[f64; 3]; 3],
    /// Fluid volume fraction of the reference cell.
    pub theta: f64,
    /// Integral of the cell factor of `psi` over the reference hole wall.
    pub q_gamma: f64,
}

impl HomogenizedCoefficients {
    /// Assembles the coefficients from a cell solution and the quadrature of
    /// the source's cell factor over the reference hole boundary.
    pub fn new(
        solution: &CellSolution,
        reference_cell: &PerforatedGrid,
        psi: &BoundarySource,
    ) -> Self {
        let measure = reference_cell.face_measure();
        let mut q_gamma = KahanSum::new();
        for face in reference_cell.gamma_faces() {
            let y = reference_cell.gamma_face_cell_coords(face);
            q_gamma.add(psi.eval_cell(&y) * measure);
        }
        Self {
            tensor: solution.tensor,
            theta: solution.theta,
            q_gamma: q_gamma.value(),
        }
    }

    /// The integrated source `g(t) p(x) q_gamma`.
    pub fn gamma_source(&self, psi: &BoundarySource, t: f64, x: &[f64; 3]) -> f64 {
        psi.eval_time_space(t, x) * self.q_gamma
    }
}

/// Runs the homogenized system on an unperforated grid.
///
/// The trajectory's mass ledgers are porosity-weighted, so the audit rows
/// track the physical mass `theta * sum_i i * integral(u_i)`.
pub fn run_macro(
    grid: &PerforatedGrid,
    kernels: &KernelSet,
    psi: &BoundarySource,
    coefficients: &HomogenizedCoefficients,
    u1_init: f64,
    controls: &StepControls,
) -> Result<Trajectory, RunError> {
    assert!(
        grid.gamma_faces().is_empty() && !grid.is_periodic(),
        "homogenized runs use the plain box grid"
    );
    let theta = coefficients.theta;
    let engine = Engine {
        grid,
        kernels,
        laplacian: assemble_tensor_laplacian(grid, &coefficients.tensor),
        diffusion_coef: (1..=kernels.n_max())
            .map(|i| kernels.d(i) / theta)
            .collect(),
        d1: kernels.d(1),
        source: SourceTerm::Volumetric {
            psi,
            q_gamma: coefficients.q_gamma,
            theta,
        },
        mass_weight: theta,
    };
    engine.run(init_state(grid, kernels, u1_init), controls)
}
