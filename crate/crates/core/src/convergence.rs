//! Empirical two-scale comparison between the fine-scale and homogenized
//! runs.
//!
//! Oscillating sequences on shrinking perforations are compared through
//! their epsilon-cell averages: the zero-extended fine field is averaged
//! over each `epsilon`-cell, and its limit target is `theta * u_i` with the
//! macroscopic field. Averages (not pointwise restriction) are the right
//! yardstick here; near the hole walls the fine field oscillates at scale
//! `epsilon` and only tested averages converge. No rate is asserted, only a
//! monotone decrease over the configured epsilon sequence, plus a bounded
//! "duality" diagnostic
//!
//! ```text
//! integral_0^T integral (sum_i i u_i)^2 dx dt
//! ```
//!
//! whose uniform boundedness across epsilon is the quantitative backbone of
//! the limit.

use crate::geometry::PerforatedGrid;
use crate::microsolver::Trajectory;
use crate::numeric::KahanSum;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CompareError {
    #[error("snapshot counts differ: fine run has {micro}, homogenized run has {macro_}")]
    SnapshotCount { micro: usize, macro_: usize },
    #[error("snapshot times diverge at index {index}: {t_micro} vs {t_macro}")]
    TimeMismatch {
        index: usize,
        t_micro: f64,
        t_macro: f64,
    },
    #[error("grid does not conform to the epsilon lattice")]
    NonConformingGrid,
}

/// Average of the zero-extended field over each epsilon-cell.
///
/// Returns one value per lattice cell, row-major over the epsilon lattice.
/// Solid voxels contribute zero, so a field constant on the fluid averages
/// to `constant * local porosity`.
pub fn cell_average(field: &[f64], grid: &PerforatedGrid) -> Vec<f64> {
    let n_per = grid.cells_per_side();
    let cells = n_per.pow(grid.dim() as u32);
    let mut sums = vec![KahanSum::new(); cells];
    for (c, &value) in field.iter().enumerate() {
        let voxel = grid.fluid_voxel(c);
        sums[grid.epsilon_cell(voxel)].add(value);
    }
    let cell_volume = grid.epsilon().powi(grid.dim() as i32);
    let scale = grid.voxel_volume() / cell_volume;
    sums.iter().map(|s| s.value() * scale).collect()
}

/// Center of an epsilon-cell given its flattened lattice index.
pub fn epsilon_cell_center(grid: &PerforatedGrid, cell: usize) -> [f64; 3] {
    let n_per = grid.cells_per_side();
    let eps = grid.epsilon();
    let k = [cell % n_per, (cell / n_per) % n_per, cell / (n_per * n_per)];
    let mut x = [0.0; 3];
    for a in 0..grid.dim() {
        x[a] = (k[a] as f64 + 0.5) * eps;
    }
    x
}

/// Multilinear interpolation of a field stored on voxel centers of an
/// unperforated grid, clamped at the boundary (consistent with the
/// zero-flux closure).
pub fn sample_multilinear(field: &[f64], grid: &PerforatedGrid, point: &[f64; 3]) -> f64 {
    let dim = grid.dim();
    let dims = grid.dims();
    let h = grid.spacing();
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..dim {
        let s = point[a] / h - 0.5;
        let clamped = s.clamp(0.0, (dims[a] - 1) as f64);
        let i0 = (clamped.floor() as usize).min(dims[a].saturating_sub(2));
        base[a] = i0;
        frac[a] = (clamped - i0 as f64).clamp(0.0, 1.0);
    }
    let corners = 1usize << dim;
    let mut value = 0.0;
    for s in 0..corners {
        let mut weight = 1.0;
        let mut coord = [0usize; 3];
        for a in 0..dim {
            let bit = (s >> a) & 1;
            coord[a] = base[a] + bit;
            weight *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        if weight == 0.0 {
            continue;
        }
        let voxel = grid.index(coord);
        value += weight * field[grid.fluid_index(voxel)];
    }
    value
}

/// Space-time L2 errors `e_i` between the cell-averaged fine fields and
/// `theta * u_i` of the homogenized run, one entry per species.
pub fn compare(
    micro: &Trajectory,
    micro_grid: &PerforatedGrid,
    macro_run: &Trajectory,
    macro_grid: &PerforatedGrid,
    theta: f64,
) -> Result<Vec<f64>, CompareError> {
    if micro.snapshots.len() != macro_run.snapshots.len() {
        return Err(CompareError::SnapshotCount {
            micro: micro.snapshots.len(),
            macro_: macro_run.snapshots.len(),
        });
    }
    if micro_grid.cells_per_side() * micro_grid.m_cell() != micro_grid.dims()[0] {
        return Err(CompareError::NonConformingGrid);
    }
    let times: Vec<f64> = micro.snapshots.iter().map(|s| s.t).collect();
    for (idx, (a, b)) in micro.snapshots.iter().zip(&macro_run.snapshots).enumerate() {
        if (a.t - b.t).abs() > 1e-9 * a.t.abs().max(1.0) {
            return Err(CompareError::TimeMismatch {
                index: idx,
                t_micro: a.t,
                t_macro: b.t,
            });
        }
    }

    let n_species = micro.snapshots[0].fields.len();
    let n_per = micro_grid.cells_per_side();
    let lattice_cells = n_per.pow(micro_grid.dim() as u32);
    let cell_volume = micro_grid.epsilon().powi(micro_grid.dim() as i32);
    let centers: Vec<[f64; 3]> = (0..lattice_cells)
        .map(|cell| epsilon_cell_center(micro_grid, cell))
        .collect();

    let mut errors = vec![KahanSum::new(); n_species];
    for (s, (micro_state, macro_state)) in
        micro.snapshots.iter().zip(&macro_run.snapshots).enumerate()
    {
        let weight = trapezoid_weight(&times, s);
        for i in 0..n_species {
            let coarse = cell_average(&micro_state.fields[i], micro_grid);
            for (cell, &avg) in coarse.iter().enumerate() {
                let target =
                    theta * sample_multilinear(&macro_state.fields[i], macro_grid, &centers[cell]);
                let diff = avg - target;
                errors[i].add(weight * diff * diff * cell_volume);
            }
        }
    }
    Ok(errors.iter().map(|e| e.value().max(0.0).sqrt()).collect())
}

fn trapezoid_weight(times: &[f64], index: usize) -> f64 {
    if times.len() < 2 {
        return 0.0;
    }
    let left = if index == 0 {
        0.0
    } else {
        0.5 * (times[index] - times[index - 1])
    };
    let right = if index + 1 == times.len() {
        0.0
    } else {
        0.5 * (times[index + 1] - times[index])
    };
    left + right
}

/// Space-time quadrature of the squared mass density
/// `(sum_i i u_i)^2` over the trajectory snapshots.
pub fn duality_diagnostic(trajectory: &Trajectory, grid: &PerforatedGrid) -> f64 {
    let times: Vec<f64> = trajectory.snapshots.iter().map(|s| s.t).collect();
    let vol = grid.voxel_volume();
    let mut acc = KahanSum::new();
    for (s, state) in trajectory.snapshots.iter().enumerate() {
        let weight = trapezoid_weight(&times, s);
        if weight == 0.0 {
            continue;
        }
        let mut space = KahanSum::new();
        let n_cells = grid.fluid_count();
        for c in 0..n_cells {
            let mut rho = 0.0;
            for (i, field) in state.fields.iter().enumerate() {
                rho += (i + 1) as f64 * field[c];
            }
            space.add(rho * rho * vol);
        }
        acc.add(weight * space.value());
    }
    acc.value()
}

/// One row of the convergence report.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ConvergenceEntry {
    pub epsilon: f64,
    /// Species size (1-based).
    pub species: usize,
    /// Space-time L2 error of the cell-averaged comparison.
    pub error: f64,
    /// Duality diagnostic of the fine-scale run at this epsilon.
    pub duality: f64,
    /// Largest mass-audit residual of the fine-scale run.
    pub mass_residual: f64,
}

/// Full report of one epsilon sweep (serialized to JSON by the CLI).
#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceReport {
    pub dim: usize,
    pub hole_radius: f64,
    pub m_cell: usize,
    pub theta: f64,
    /// Effective tensor, row-major `dim x dim`.
    pub tensor: Vec<f64>,
    pub dt: f64,
    pub t_end: f64,
    pub epsilons: Vec<f64>,
    pub entries: Vec<ConvergenceEntry>,
    /// Deterministic run metadata: accepted steps per epsilon run.
    pub steps: Vec<usize>,
    /// Total CG iterations per epsilon run.
    pub cg_iterations: Vec<usize>,
}
