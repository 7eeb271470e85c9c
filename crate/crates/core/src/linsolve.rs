//! Sparse symmetric operators on fluid voxels and a conjugate-gradient solver.
//!
//! The diffusion steps and the periodic cell problems all reduce to systems
//! `(mass + coef * K) x = b` where `K` is a finite-volume Laplacian with
//! zero-flux closure: interior fluid faces couple with `1/h^2`, faces toward
//! solid voxels or the outer boundary contribute nothing, and periodic grids
//! wrap. `K` is positive semidefinite with constants in its kernel, so the
//! shifted operator is SPD for `mass > 0`, and the pure-Neumann case
//! (`mass = 0`) is solved on the zero-mean subspace instead of pinning a
//! node, which keeps the operator symmetric and the gauge grid-independent.
//!
//! The solver is diagonally preconditioned CG; everything is matrix-stored
//! CSR, assembled once per run.

use crate::geometry::PerforatedGrid;
use std::collections::BTreeMap;
use thiserror::Error;

/// Compressed sparse row symmetric operator over fluid voxels.
#[derive(Clone, Debug)]
pub struct SparseOperator {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
    diag: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("no convergence after {iterations} iterations, residual {residual}")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("operator is not positive definite (breakdown at iteration {iterations})")]
    Breakdown { iterations: usize },
    #[error("rhs has length {got}, operator expects {expected}")]
    DimensionMismatch { got: usize, expected: usize },
}

impl SparseOperator {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    /// `y = K x`.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        for row in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[row]..self.row_ptr[row + 1] {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            y[row] = acc;
        }
    }

    /// Entry iterator for structure tests.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |row| {
            (self.row_ptr[row]..self.row_ptr[row + 1])
                .map(move |k| (row, self.col_idx[k], self.vals[k]))
        })
    }

    fn from_triplets(n: usize, triplets: BTreeMap<(usize, usize), f64>) -> Self {
        let mut row_ptr = vec![0usize; n + 1];
        for &(r, _) in triplets.keys() {
            row_ptr[r + 1] += 1;
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        let nnz = triplets.len();
        let mut col_idx = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        let mut diag = vec![0.0; n];
        // BTreeMap iterates in (row, col) order, which is exactly CSR order.
        for ((r, c), v) in triplets {
            col_idx.push(c);
            vals.push(v);
            if r == c {
                diag[r] = v;
            }
        }
        Self {
            n,
            row_ptr,
            col_idx,
            vals,
            diag,
        }
    }
}

/// Assembles `-Laplacian` with per-axis coefficients `coefs[a] / h^2`.
///
/// With unit coefficients this is the plain Neumann Laplacian; the
/// homogenized solver passes the diagonal of the effective tensor.
pub fn assemble_axis_laplacian(grid: &PerforatedGrid, coefs: [f64; 3]) -> SparseOperator {
    let n = grid.fluid_count();
    let h2 = grid.spacing() * grid.spacing();
    let mut triplets: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for row in 0..n {
        let voxel = grid.fluid_voxel(row);
        for axis in 0..grid.dim() {
            let w = coefs[axis] / h2;
            for dir in [-1i8, 1] {
                if let Some(nb) = grid.neighbor(voxel, axis, dir) {
                    let col = grid.fluid_index(nb);
                    if col != crate::geometry::SOLID {
                        *triplets.entry((row, row)).or_insert(0.0) += w;
                        *triplets.entry((row, col)).or_insert(0.0) -= w;
                    }
                }
            }
        }
        // Isolated voxels still need an (empty) row.
        triplets.entry((row, row)).or_insert(0.0);
    }
    SparseOperator::from_triplets(n, triplets)
}

/// Plain `-Laplacian` with zero-flux closure (and periodic wrap when the
/// grid is a reference cell).
pub fn assemble_neumann_laplacian(grid: &PerforatedGrid) -> SparseOperator {
    assemble_axis_laplacian(grid, [1.0, 1.0, 1.0])
}

/// Assembles `-div(A grad .)` for a constant symmetric tensor `A`.
///
/// When `A` is (numerically) diagonal this reduces to the axis stencil,
/// which is also the microscale discretization. Cross-derivative couplings
/// use a corner-based energy form: per interior lattice corner, the
/// gradient averaged over the surrounding `2^dim` voxels enters
/// `h^dim/2 * g^T A g`, whose variational derivative is a symmetric stencil
/// with row sums zero, so the implicit steps stay conservative.
pub fn assemble_tensor_laplacian(grid: &PerforatedGrid, tensor: &[[f64; 3]; 3]) -> SparseOperator {
    let dim = grid.dim();
    let scale = (0..dim).map(|a| tensor[a][a].abs()).fold(0.0, f64::max);
    let mut off = 0.0f64;
    for a in 0..dim {
        for b in 0..dim {
            if a != b {
                off = off.max(tensor[a][b].abs());
            }
        }
    }
    if off <= 1e-14 * scale.max(1e-300) {
        return assemble_axis_laplacian(grid, [tensor[0][0], tensor[1][1], tensor[2][2]]);
    }

    let n = grid.fluid_count();
    let h = grid.spacing();
    let denom = (1 << (dim - 1)) as f64 * h;
    let n_corner_cells = 1usize << dim;
    let dims = grid.dims();
    let mut triplets: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for row in 0..n {
        triplets.entry((row, row)).or_insert(0.0);
    }

    // Interior corners: lattice points with a full 2^dim block of voxels.
    let zmax = if dim == 3 { dims[2] } else { 2 };
    for cz in 1..zmax {
        for cy in 1..dims[1] {
            for cx in 1..dims[0] {
                let mut cells = [0usize; 8];
                let mut all_fluid = true;
                for s in 0..n_corner_cells {
                    let c = [
                        cx - 1 + (s & 1),
                        cy - 1 + ((s >> 1) & 1),
                        if dim == 3 { cz - 1 + ((s >> 2) & 1) } else { 0 },
                    ];
                    let v = grid.index(c);
                    let f = grid.fluid_index(v);
                    if f == crate::geometry::SOLID {
                        all_fluid = false;
                        break;
                    }
                    cells[s] = f;
                }
                if !all_fluid {
                    continue;
                }
                for s in 0..n_corner_cells {
                    for sp in 0..n_corner_cells {
                        let mut acc = 0.0;
                        for a in 0..dim {
                            let sig_a = if (s >> a) & 1 == 1 { 1.0 } else { -1.0 };
                            for b in 0..dim {
                                let sig_b = if (sp >> b) & 1 == 1 { 1.0 } else { -1.0 };
                                acc += tensor[a][b] * sig_a * sig_b;
                            }
                        }
                        *triplets.entry((cells[s], cells[sp])).or_insert(0.0) +=
                            acc / (denom * denom);
                    }
                }
            }
        }
    }
    SparseOperator::from_triplets(n, triplets)
}

/// `mass * I + coef * K`, applied matrix-free.
#[derive(Clone, Copy)]
pub struct ShiftedOperator<'a> {
    pub laplacian: &'a SparseOperator,
    pub mass: f64,
    pub coef: f64,
}

impl ShiftedOperator<'_> {
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.laplacian.apply(x, y);
        for i in 0..x.len() {
            y[i] = self.mass * x[i] + self.coef * y[i];
        }
    }

    fn preconditioner(&self) -> Vec<f64> {
        self.laplacian
            .diag()
            .iter()
            .map(|&d| {
                let v = self.mass + self.coef * d;
                if v > 0.0 {
                    1.0 / v
                } else {
                    1.0
                }
            })
            .collect()
    }
}

/// Gauge for the singular pure-Neumann case.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gauge {
    /// Operator is SPD as-is.
    Fixed,
    /// Project right-hand side and iterates onto the zero-mean subspace.
    ZeroMean,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
}

fn subtract_mean(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    for x in v.iter_mut() {
        *x -= mean;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Diagonally preconditioned conjugate gradients.
///
/// Converges when the 2-norm residual drops below `tol * |rhs|`; a zero
/// right-hand side short-circuits to the zero solution. Iteration counts are
/// deterministic for fixed inputs.
pub fn solve_spd(
    op: &ShiftedOperator,
    rhs: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
    gauge: Gauge,
) -> Result<(Vec<f64>, SolveStats), SolveError> {
    let n = op.laplacian.size();
    if rhs.len() != n {
        return Err(SolveError::DimensionMismatch {
            got: rhs.len(),
            expected: n,
        });
    }
    if n == 0 {
        return Ok((Vec::new(), SolveStats::default()));
    }

    let mut b = rhs.to_vec();
    if gauge == Gauge::ZeroMean {
        subtract_mean(&mut b);
    }
    let bnorm = dot(&b, &b).sqrt();
    if bnorm == 0.0 {
        return Ok((vec![0.0; n], SolveStats::default()));
    }

    let precond = op.preconditioner();
    let mut x = match x0 {
        Some(guess) => guess.to_vec(),
        None => vec![0.0; n],
    };
    if gauge == Gauge::ZeroMean {
        subtract_mean(&mut x);
    }

    let mut r = vec![0.0; n];
    op.apply(&x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z: Vec<f64> = r.iter().zip(&precond).map(|(ri, m)| ri * m).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];

    let mut residual = dot(&r, &r).sqrt();
    if residual <= tol * bnorm {
        return Ok((
            x,
            SolveStats {
                iterations: 0,
                residual: residual / bnorm,
            },
        ));
    }

    for iter in 1..=max_iter {
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(SolveError::Breakdown { iterations: iter });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if gauge == Gauge::ZeroMean {
            // Row sums are zero, so r stays mean-free in exact arithmetic;
            // re-project x to stop rounding drift along the constant mode.
            subtract_mean(&mut x);
        }
        residual = dot(&r, &r).sqrt();
        if residual <= tol * bnorm {
            return Ok((
                x,
                SolveStats {
                    iterations: iter,
                    residual: residual / bnorm,
                },
            ));
        }
        for i in 0..n {
            z[i] = r[i] * precond[i];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }

    Err(SolveError::NonConvergence {
        iterations: max_iter,
        residual: residual / bnorm,
    })
}
