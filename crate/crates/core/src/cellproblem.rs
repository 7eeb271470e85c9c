//! Periodic corrector problems on the reference cell and the effective
//! diffusion tensor.
//!
//! For each direction `j` the corrector `w_j` solves, on the fluid part of
//! the periodic unit cell,
//!
//! ```text
//! -div(grad w_j + e_j) = 0      in Y*,
//! (grad w_j + e_j) . n = 0      on the hole boundary,
//! w_j periodic, zero mean.
//! ```
//!
//! In the finite-volume form this is the pure-Neumann Laplacian with a
//! right-hand side supported on the hole-boundary faces (the flux of the
//! constant field `e_j` through the staircase wall). The effective tensor
//!
//! ```text
//! A_jk = sum over fluid-fluid faces of (g_j + e_j.n)(g_k + e_k.n) h^dim
//! ```
//!
//! uses the same face gradients `g = (w_+ - w_-)/h` as the operator, so the
//! discrete solve is exactly the Ritz minimizer of this energy. That gives
//! symmetry and the variational bound `A_jj <= theta` for free: the zero
//! corrector is admissible and each face maps injectively to its lower fluid
//! voxel.

use crate::geometry::PerforatedGrid;
use crate::linsolve::{assemble_neumann_laplacian, solve_spd, Gauge, ShiftedOperator, SolveError};
use crate::numeric::KahanSum;
use thiserror::Error;

/// Correctors, effective tensor, and porosity of one reference cell.
#[derive(Clone, Debug)]
pub struct CellSolution {
    dim: usize,
    /// One zero-mean corrector field per direction, on fluid voxels.
    pub correctors: Vec<Vec<f64>>,
    /// Effective tensor, row-major `dim x dim` (stored 3x3).
    pub tensor: [[f64; 3]; 3],
    /// Fluid volume fraction of the reference cell.
    pub theta: f64,
    /// CG iteration count per direction.
    pub iterations: Vec<usize>,
    /// Relative residual per direction.
    pub residuals: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum CellProblemError {
    #[error("reference cell must be periodic")]
    NotPeriodic,
    #[error("cell solve in direction {direction} failed: {source}")]
    Solve {
        direction: usize,
        source: SolveError,
    },
}

impl CellSolution {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Smallest eigenvalue of the (2x2 or 3x3) effective tensor.
    pub fn smallest_eigenvalue(&self) -> f64 {
        smallest_eigenvalue_sym(self.dim, &self.tensor)
    }
}

/// Closed-form smallest eigenvalue of a symmetric 2x2 or 3x3 matrix.
pub fn smallest_eigenvalue_sym(dim: usize, m: &[[f64; 3]; 3]) -> f64 {
    match dim {
        2 => {
            let half_tr = 0.5 * (m[0][0] + m[1][1]);
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            half_tr - (half_tr * half_tr - det).max(0.0).sqrt()
        }
        3 => {
            // Trigonometric solution for symmetric 3x3 eigenvalues.
            let q = (m[0][0] + m[1][1] + m[2][2]) / 3.0;
            let mut b = [[0.0f64; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    b[i][j] = m[i][j] - if i == j { q } else { 0.0 };
                }
            }
            let p2 = (0..3)
                .flat_map(|i| (0..3).map(move |j| (i, j)))
                .map(|(i, j)| b[i][j] * b[i][j])
                .sum::<f64>()
                / 6.0;
            let p = p2.sqrt();
            if p == 0.0 {
                return q;
            }
            let det_b = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
                - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
                + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
            let r = (det_b / (2.0 * p * p * p)).clamp(-1.0, 1.0);
            let phi = r.acos() / 3.0;
            // Smallest root of the shifted characteristic polynomial.
            q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos()
        }
        _ => f64::NAN,
    }
}

/// Solves the corrector problems on a periodic reference cell.
pub fn solve_cell_problem(
    cell: &PerforatedGrid,
    tol: f64,
    max_iter: usize,
) -> Result<CellSolution, CellProblemError> {
    if !cell.is_periodic() {
        return Err(CellProblemError::NotPeriodic);
    }
    let dim = cell.dim();
    let n = cell.fluid_count();
    let h = cell.spacing();
    let lap = assemble_neumann_laplacian(cell);
    let op = ShiftedOperator {
        laplacian: &lap,
        mass: 0.0,
        coef: 1.0,
    };

    let mut correctors = Vec::with_capacity(dim);
    let mut iterations = Vec::with_capacity(dim);
    let mut residuals = Vec::with_capacity(dim);
    for j in 0..dim {
        // Flux of e_j through the hole wall, attributed to the fluid cell.
        let mut rhs = vec![0.0; n];
        for face in cell.gamma_faces() {
            if face.axis as usize == j {
                let row = cell.fluid_index(face.fluid_voxel);
                rhs[row] -= f64::from(face.dir) / h;
            }
        }
        let (w, stats) =
            solve_spd(&op, &rhs, None, tol, max_iter, Gauge::ZeroMean).map_err(|source| {
                CellProblemError::Solve {
                    direction: j,
                    source,
                }
            })?;
        correctors.push(w);
        iterations.push(stats.iterations);
        residuals.push(stats.residual);
    }

    let tensor = effective_tensor(cell, &correctors);
    Ok(CellSolution {
        dim,
        correctors,
        tensor,
        theta: cell.fluid_count() as f64 * cell.voxel_volume(),
        iterations,
        residuals,
    })
}

/// Face-based energy quadrature of `(grad w_j + e_j).(grad w_k + e_k)`.
fn effective_tensor(cell: &PerforatedGrid, correctors: &[Vec<f64>]) -> [[f64; 3]; 3] {
    let dim = cell.dim();
    let h = cell.spacing();
    let vol = cell.voxel_volume();
    let mut acc = [[KahanSum::new(); 3]; 3];
    for row in 0..cell.fluid_count() {
        let voxel = cell.fluid_voxel(row);
        for axis in 0..dim {
            // Each fluid-fluid face is visited once from its minus side.
            let Some(nb) = cell.neighbor(voxel, axis, 1) else {
                continue;
            };
            let col = cell.fluid_index(nb);
            if col == crate::geometry::SOLID {
                continue;
            }
            let mut flux = [0.0f64; 3];
            for j in 0..dim {
                let g = (correctors[j][col] - correctors[j][row]) / h;
                flux[j] = g + if j == axis { 1.0 } else { 0.0 };
            }
            for j in 0..dim {
                for k in 0..dim {
                    acc[j][k].add(flux[j] * flux[k] * vol);
                }
            }
        }
    }
    let mut tensor = [[0.0; 3]; 3];
    for j in 0..dim {
        for k in 0..dim {
            tensor[j][k] = acc[j][k].value();
        }
    }
    tensor
}

/// Reconstructs the first-order corrector field `sum_j grad_j * w_j` on the
/// reference cell for a given macroscopic gradient.
pub fn corrector_reconstruct(solution: &CellSolution, macro_grad: &[f64]) -> Vec<f64> {
    let n = solution.correctors.first().map_or(0, Vec::len);
    let mut field = vec![0.0; n];
    for (j, w) in solution.correctors.iter().enumerate() {
        let g = macro_grad.get(j).copied().unwrap_or(0.0);
        if g == 0.0 {
            continue;
        }
        for (f, &wv) in field.iter_mut().zip(w) {
            *f += g * wv;
        }
    }
    field
}

/// Energy of a reconstructed field against a unit macroscopic gradient
/// direction, using the same face quadrature as the tensor assembly.
pub fn gradient_energy(cell: &PerforatedGrid, field: &[f64], macro_grad: &[f64]) -> f64 {
    let dim = cell.dim();
    let h = cell.spacing();
    let vol = cell.voxel_volume();
    let mut acc = KahanSum::new();
    for row in 0..cell.fluid_count() {
        let voxel = cell.fluid_voxel(row);
        for axis in 0..dim {
            let Some(nb) = cell.neighbor(voxel, axis, 1) else {
                continue;
            };
            let col = cell.fluid_index(nb);
            if col == crate::geometry::SOLID {
                continue;
            }
            let g = (field[col] - field[row]) / h + macro_grad.get(axis).copied().unwrap_or(0.0);
            acc.add(g * g * vol);
        }
    }
    acc.value()
}
